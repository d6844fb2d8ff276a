//! Central finite-difference checks against reverse-mode gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of every `backward` rule it is used to verify.

use ndarray::Array2;

use crate::autograd::{Graph, ParamId, ParamStore, Var};

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
    pub label: String,
}

impl GradCheck {
    /// Relative tolerance used throughout the test suites.
    pub const DEFAULT_TOL: f64 = 1e-3;
    /// Central-difference step.
    pub const STEP: f64 = 1e-5;
    /// Denominator floor so that gradients that are (numerically) zero on both
    /// sides do not register as relative failures.
    pub const FLOOR: f64 = 1e-6;

    fn new() -> Self {
        Self { max_rel_err: 0.0, analytic: 0.0, numeric: 0.0, n_checked: 0, label: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let rel = rel_err(analytic, numeric);
        self.n_checked += 1;
        if rel > self.max_rel_err || self.n_checked == 1 {
            self.max_rel_err = rel;
            self.analytic = analytic;
            self.numeric = numeric;
            self.label = label();
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }

    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.passes(tol),
            "gradient check failed at {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e}, tol {tol:e}, {} entries)",
            self.label,
            self.analytic,
            self.numeric,
            self.max_rel_err,
            self.n_checked
        );
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GradCheck::FLOOR)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    let val = g.value(v);
    assert_eq!(val.dim(), (1, 1), "gradient check needs a scalar objective");
    val[[0, 0]]
}

/// Check d f / d x for every entry of `x`. `f` receives the graph and the
/// input node and must return a scalar node. Parameters (if any) come from an
/// empty store, so `f` should only use constants.
pub fn check_input_grad(x: &Array2<f64>, f: impl Fn(&mut Graph, Var) -> Var) -> GradCheck {
    check_input_grad_with(&ParamStore::new(), x, f)
}

/// As [`check_input_grad`] but with a parameter store available to `f`.
pub fn check_input_grad_with(
    store: &ParamStore,
    x: &Array2<f64>,
    f: impl Fn(&mut Graph, Var) -> Var,
) -> GradCheck {
    let analytic = {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let out = f(&mut g, xv);
        let grads = g.backward(out);
        grads.wrt(xv).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()))
    };
    let eval = |xp: Array2<f64>| {
        let mut g = Graph::new(store);
        let xv = g.input(xp);
        let out = f(&mut g, xv);
        scalar(&g, out)
    };
    let mut rep = GradCheck::new();
    let h = GradCheck::STEP;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let fp = eval(xp);
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        let fm = eval(xm);
        let numeric = (fp - fm) / (2.0 * h);
        rep.record(analytic[[r, c]], numeric, || format!("input[{r},{c}]"));
    }
    rep
}

/// Check gradients for selected scalar entries `(param, flat index)` of a
/// parameter store. `f` builds the scalar objective from a fresh graph whose
/// store is the (possibly perturbed) copy.
pub fn check_param_grads(
    store: &ParamStore,
    picks: &[(ParamId, usize)],
    f: impl Fn(&mut Graph) -> Var,
) -> GradCheck {
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).into_param_grads(store)
    };
    let mut rep = GradCheck::new();
    let h = GradCheck::STEP;
    let mut work = store.clone();
    for &(id, flat) in picks {
        let cols = store.get(id).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let orig = store.get(id)[[r, c]];
        work.get_mut(id)[[r, c]] = orig + h;
        let fp = {
            let mut g = Graph::new(&work);
            let out = f(&mut g);
            scalar(&g, out)
        };
        work.get_mut(id)[[r, c]] = orig - h;
        let fm = {
            let mut g = Graph::new(&work);
            let out = f(&mut g);
            scalar(&g, out)
        };
        work.get_mut(id)[[r, c]] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        rep.record(grads[id.0][[r, c]], numeric, || format!("{}[{r},{c}]", store.name(id)));
    }
    rep
}

/// Every scalar entry of the listed parameters.
pub fn all_entries(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter().flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i))).collect()
}

/// `n` pseudo-random `(param, flat index)` picks spread over the whole store.
pub fn sample_entries(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    use rand::Rng;
    let mut rng = crate::nn::init::rng(seed);
    let ids: Vec<ParamId> = store.ids().filter(|id| !store.get(*id).is_empty()).collect();
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.get(id).len()))
        })
        .collect()
}
