//! Small parameterised building blocks shared by the encoder and denoiser.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};

pub mod init {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub type Rng = ChaCha8Rng;

    pub fn rng(seed: u64) -> Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Glorot-uniform init for a `fan_in × fan_out` weight.
    pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
        use rand::Rng as _;
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a))
    }
}

/// Fully connected layer `y = x W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), init::xavier(rng, d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Array2::zeros((1, d_out))));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.affine(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Per-row LayerNorm with learned gain and shift.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

/// Overwrite every listed parameter with zeros.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).fill(0.0);
    }
}
