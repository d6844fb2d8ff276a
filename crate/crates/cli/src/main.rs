//! Command-line entry point: segmentation, strata, training, sampling,
//! evaluation, ablations and reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use evmotion::data::toy::{self, TOY_FPS};
use evmotion::data::write_motion;
use evmotion::diffusion::{sample_motion, DiffusionSchedule};
use evmotion::evaluation::EvaluationReport;
use evmotion::pipeline::{
    ablate, comparison_table, condition_prompt, text_encoder, AblationAxis, DataSource, Pipeline, PipelineError,
    RunConfig, SegBackend,
};
use evmotion::segmentation::{decompose, read_count_records, stratify_records, HttpLlm, LlmClient, ResponseCache, Strategy};
use evmotion::data::CaptionRecord;

mod plot;

#[derive(Parser)]
#[command(name = "evmotion", version, about = "Event-conditioned text-to-motion diffusion")]
struct Cli {
    /// Run configuration (TOML). Defaults to the toy configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split prompts into event clauses.
    Decompose {
        /// Prompt text; omit to read one caption per line from --input or stdin.
        prompt: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSON-lines output; prints clause lists to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "event")]
        strategy: String,
        /// rule or llm (endpoint from EVMOTION_LLM_ENDPOINT).
        #[arg(long, default_value = "rule")]
        backend: String,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Event-count strata from a decomposition file or from the configured test split.
    BuildStrata {
        /// JSON lines with `id` and `event_counts` or `decompositions`.
        #[arg(long)]
        decompositions: Option<PathBuf>,
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Train a denoiser; the run directory keeps config, checkpoints and log.
    Train {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Generate a motion for a prompt from a trained run.
    Sample {
        #[arg(long, default_value = "runs/default")]
        run: PathBuf,
        prompt: String,
        /// Frames; defaults to one toy segment per event or 196.
        #[arg(long)]
        len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        /// Directory for the motion file; defaults to <run>/samples.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the best checkpoint on the stratified test split; missing earlier stages run first.
    Eval {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// One report per value of a sampling or training axis.
    Ablate {
        /// steps, scale, backbone or encoder_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 3,4,5,6.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Data, segmentation, encoding, training and evaluation in one go.
    Pipeline {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Print stored reports; --plot renders metric-versus-condition curves.
    Report {
        /// Report JSON files or directories holding report.json / report-*.json.
        #[arg(default_value = "runs/default")]
        paths: Vec<PathBuf>,
        #[arg(long)]
        plot: bool,
        /// Directory for SVG files; defaults to the first path's directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Print a complete configuration file.
    Config {
        /// Full-scale defaults instead of the toy configuration.
        #[arg(long)]
        full: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn validation(msg: impl ToString) -> Self {
        Self { code: 1, msg: msg.to_string() }
    }

    fn runtime(msg: impl ToString) -> Self {
        Self { code: 2, msg: msg.to_string() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self { code: e.exit_code() as u8, msg: e.to_string() }
    }
}

type Res<T = ()> = Result<T, Failure>;

fn unset_keys(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    if let Some(map) = v.as_object() {
        for (k, child) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_null() {
                out.push(path);
            } else {
                unset_keys(&path, child, out);
            }
        }
    }
}

fn config_help() -> String {
    let cfg = RunConfig::default();
    let mut unset = Vec::new();
    unset_keys("", &serde_json::to_value(&cfg).expect("config serialises"), &mut unset);
    let optional: String = unset.iter().map(|k| format!("# {k} = <unset by default>\n")).collect();
    format!(
        "CONFIGURATION KEYS (defaults of the full configuration; `evmotion config` prints the toy one):\n\n{}\n{optional}",
        cfg.to_toml()
    )
}

fn load_config(path: Option<&Path>) -> Res<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn llm_client(backend: &str) -> Res<Option<Box<dyn LlmClient>>> {
    match backend {
        "rule" => Ok(None),
        "llm" => match HttpLlm::from_env() {
            Some(c) => Ok(Some(Box::new(c))),
            None => {
                log::warn!("no LLM endpoint configured; using the rule segmenter");
                Ok(None)
            }
        },
        other => Err(Failure::validation(format!("unknown backend {other:?} (expected rule or llm)"))),
    }
}

fn cmd_decompose(
    prompt: Option<String>,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    strategy: &str,
    backend: &str,
    cache: Option<PathBuf>,
) -> Res {
    let strategy: Strategy = strategy.parse().map_err(Failure::validation)?;
    let llm = llm_client(backend)?;
    let cache = match (&llm, cache) {
        (Some(_), Some(p)) => Some(ResponseCache::open(p).map_err(Failure::runtime)?),
        _ => None,
    };
    let lines: Vec<String> = match (prompt, input) {
        (Some(p), _) => vec![p],
        (None, Some(path)) => fs::read_to_string(&path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?.lines().map(String::from).collect(),
        (None, None) => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(Failure::runtime)?;
            s.lines().map(String::from).collect()
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines.iter().filter(|l| !l.trim().is_empty()).enumerate() {
        let caption = CaptionRecord::parse(line).unwrap_or_else(|_| CaptionRecord::plain(line.trim()));
        let d = decompose(&caption, strategy, llm.as_deref(), cache.as_ref());
        if out.is_none() {
            for (k, t) in d.texts().iter().enumerate() {
                println!("{}\t{}\t{}", i, k + 1, t);
            }
        }
        records.push(serde_json::json!({
            "id": format!("{i:06}"),
            "prompt": caption.text,
            "decompositions": [d.texts()],
        }));
    }
    if let Some(path) = out {
        let text: String = records.iter().map(|r| format!("{r}\n")).collect();
        fs::write(&path, text).map_err(Failure::runtime)?;
        println!("wrote {} decompositions to {}", records.len(), path.display());
    }
    Ok(())
}

fn print_strata(b: &evmotion::segmentation::StratifiedBenchmark) {
    println!("total {}", b.total);
    for (c, ids) in &b.conditions {
        println!(">={c}\t{}", ids.len());
    }
}

fn cmd_build_strata(cfg_path: Option<&Path>, decompositions: Option<PathBuf>, out: PathBuf) -> Res {
    if let Some(path) = decompositions {
        let text = fs::read_to_string(&path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let records = read_count_records(&text).map_err(Failure::validation)?;
        let b = stratify_records(&records).map_err(Failure::validation)?;
        print_strata(&b);
        fs::create_dir_all(&out).map_err(Failure::runtime)?;
        fs::write(out.join("strata.json"), serde_json::to_string_pretty(&b).unwrap()).map_err(Failure::runtime)?;
        return Ok(());
    }
    let mut p = Pipeline::new(load_config(cfg_path)?, &out)?;
    let (splits, kd) = p.data()?;
    let (decomps, kp) = p.decompose(&splits, &kd)?;
    let (strata, _) = p.strata(&splits, &decomps, &kp)?;
    print_strata(&strata.benchmark);
    if let Some(ok) = strata.matches_ground_truth() {
        println!("matches generator labels: {ok}");
    }
    Ok(())
}

fn print_stages(p: &Pipeline) {
    for r in &p.records {
        println!("stage {:<10} {:?}", r.name, r.status);
    }
}

fn cmd_train(cfg_path: Option<&Path>, out: PathBuf) -> Res {
    let mut p = Pipeline::new(load_config(cfg_path)?, &out)?;
    let run = p.run_to_training()?;
    print_stages(&p);
    println!("best epoch {} (validation FID {:.4})", run.best.epoch, run.best.val_fid);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(run_dir: PathBuf, prompt: &str, len: Option<usize>, seed: u64, steps: Option<usize>, scale: Option<f64>, out: Option<PathBuf>) -> Res {
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let mut p = Pipeline::new(cfg.clone(), &run_dir)?;
    p.cached_only = true;
    let run = p.run_to_training()?;
    let model = run.model()?;
    let llm = if cfg.segmentation.backend == SegBackend::Llm { llm_client("llm")? } else { None };
    let enc = text_encoder(&cfg, &run.evaluator);
    let (d, bundle) = condition_prompt(prompt, &cfg, enc.as_ref(), llm.as_deref())?;
    let toy = cfg.data.source == DataSource::Toy;
    let len = len.unwrap_or(if toy { d.k() * cfg.data.toy.segment_frames } else { 196 });
    let mut schedule_cfg = cfg.diffusion.schedule.clone();
    if let Some(n) = steps {
        schedule_cfg.inference_steps = n;
    }
    let schedule = DiffusionSchedule::new(&schedule_cfg).map_err(Failure::validation)?;
    let mut guidance = cfg.diffusion.guidance.clone();
    if let Some(s) = scale {
        guidance.scale = s;
    }
    guidance.validate().map_err(Failure::validation)?;
    let fps = run.splits.train.pairs.first().map(|s| s.motion.fps).unwrap_or(TOY_FPS);
    let id = format!("sample_{seed}");
    let motion = sample_motion(&model, &bundle, len, &schedule, &guidance, run.splits.stats(), fps, &id, seed).map_err(Failure::runtime)?;
    let dir = out.unwrap_or_else(|| run_dir.join("samples"));
    write_motion(&dir, &motion).map_err(Failure::runtime)?;
    for (k, t) in d.texts().iter().enumerate() {
        println!("event {}: {t}", k + 1);
    }
    println!("wrote {} frames to {}", motion.len(), dir.join(format!("{id}.bin")).display());
    if toy {
        let segs = toy::classify_sequence(motion.frames.view(), d.k());
        let names: Vec<String> = segs.iter().map(|p| p.to_string()).collect();
        println!("classified segments: {}", names.join(" | "));
    }
    Ok(())
}

fn cmd_pipeline(cfg_path: Option<&Path>, out: PathBuf) -> Res {
    let mut p = Pipeline::new(load_config(cfg_path)?, &out)?;
    let o = p.run()?;
    print_stages(&p);
    print!("{}", o.report.to_table());
    Ok(())
}

fn cmd_ablate(cfg_path: Option<&Path>, axis: &str, values: Vec<String>, out: PathBuf) -> Res {
    let axis: AblationAxis = axis.parse().map_err(Failure::validation)?;
    if values.is_empty() {
        return Err(Failure::validation("--values needs at least one value"));
    }
    let cfg = load_config(cfg_path)?;
    let reports = ablate(&cfg, &out, axis, &values)?;
    let pairs: Vec<(String, EvaluationReport)> = reports.into_iter().map(|(v, r, _)| (v, r)).collect();
    print!("{}", comparison_table(&pairs));
    Ok(())
}

/// Reports from files or directories, labelled by file stem or report label.
fn collect_reports(paths: &[PathBuf]) -> Res<Vec<(String, EvaluationReport)>> {
    let mut files: Vec<PathBuf> = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name == "report.json" || (name.starts_with("report-") && name.ends_with(".json"))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Failure::validation(format!("no report JSON under {}", p.display())));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Failure::validation(format!("{}: {e}", f.display())))?;
        let r: EvaluationReport = serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", f.display())))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let mut label = stem.strip_prefix("report-").unwrap_or(stem).to_string();
        if label == "report" {
            label = if r.meta.label.is_empty() { "report".into() } else { r.meta.label.clone() };
        }
        let n = seen.entry(label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            label = format!("{label}#{n}");
        }
        out.push((label, r));
    }
    Ok(out)
}

fn cmd_report(paths: Vec<PathBuf>, plot: bool, plot_dir: Option<PathBuf>) -> Res {
    let reports = collect_reports(&paths)?;
    for (label, r) in &reports {
        println!("== {label}");
        print!("{}", r.to_table());
    }
    if plot {
        let dir = plot_dir.unwrap_or_else(|| {
            let first = &paths[0];
            let base = if first.is_dir() { first.clone() } else { first.parent().map(Path::to_path_buf).unwrap_or_default() };
            base.join("plots")
        });
        fs::create_dir_all(&dir).map_err(Failure::runtime)?;
        for (metric, title) in [("fid", "FID"), ("top1", "R-Precision top-1")] {
            let path = dir.join(format!("{metric}_vs_condition.svg"));
            plot::metric_vs_condition(&reports, metric, title, &path).map_err(Failure::runtime)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    let cfg = cli.config.as_deref();
    match cli.cmd {
        Cmd::Decompose { prompt, input, out, strategy, backend, cache } => cmd_decompose(prompt, input, out, &strategy, &backend, cache),
        Cmd::BuildStrata { decompositions, out } => cmd_build_strata(cfg, decompositions, out),
        Cmd::Train { out } => cmd_train(cfg, out),
        Cmd::Sample { run, prompt, len, seed, steps, scale, out } => cmd_sample(run, &prompt, len, seed, steps, scale, out),
        Cmd::Eval { out } | Cmd::Pipeline { out } => cmd_pipeline(cfg, out),
        Cmd::Ablate { axis, values, out } => cmd_ablate(cfg, &axis, values, out),
        Cmd::Report { paths, plot, plot_dir } => cmd_report(paths, plot, plot_dir),
        Cmd::Config { full } => {
            let c = if full { RunConfig::default() } else { RunConfig::toy() };
            print!("{}", c.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config_help();
    let cmd = Cli::command().after_long_help(help.clone()).mut_subcommands(|s| match s.get_name() {
        "build-strata" | "train" | "eval" | "ablate" | "pipeline" => s.after_long_help(help.clone()),
        _ => s,
    });
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
