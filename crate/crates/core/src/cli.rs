//! Experiment runner behind the `avi` binary.
//!
//! Settings resolve as: command-line flag, then `AVI_OUT` (output directory
//! only), then the `--config` file, then built-in defaults. Config files use
//! the long flag names as keys, one `key=value` per line.

use crate::error::Error;
use crate::meanfield::ParamStore;
use crate::models::{Model, ModelKind};
use crate::optimize::{run_optimization, Algorithm, Halt, IterationRecord, OptimizerConfig, Outer};
use clap::{CommandFactory, Parser};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const OUT_ENV: &str = "AVI_OUT";

pub const HISTORY_HEADER: &str = "iteration,cumulative_samples,elbo_mean,elbo_stderr,direction_norm,wallclock_s";

#[derive(Debug, Parser, Default)]
#[command(name = "avi", about = "Score-function variational inference on probabilistic programs", allow_negative_numbers = true)]
pub struct Args {
    /// qmr, lda, fig1, two-coin or gaussian-pair
    #[arg(long)]
    pub model: Option<String>,
    /// Model instance file (qmr and lda only); defaults to the built-in desk-scale instance
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    /// Comma-separated list of sgd, enac, sogd
    #[arg(long)]
    pub algo: Option<String>,
    /// steepest or cg
    #[arg(long)]
    pub outer: Option<String>,
    #[arg(long)]
    pub stepsize: Option<f64>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Comma-separated list of seeds
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Guided traces per ELBO evaluation
    #[arg(long)]
    pub elbo_samples: Option<usize>,
    /// Conjugate-gradient restart period
    #[arg(long)]
    pub restart_period: Option<usize>,
    /// File of key=value lines using the long flag names
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Record wall-clock seconds (otherwise written as 0 so outputs are reproducible)
    #[arg(long)]
    pub timing: bool,
    /// QMR only: leave negative findings out of the likelihood
    #[arg(long)]
    pub drop_negative_findings: bool,
    /// Write the resolved model instance to this path and exit
    #[arg(long)]
    pub emit_model: Option<PathBuf>,
    /// Worker threads for independent runs (0 = available parallelism)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Run(m) => write!(f, "run failed: {m}"),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelKind,
    pub model_file: Option<PathBuf>,
    pub algorithms: Vec<Algorithm>,
    pub outer: Outer,
    pub stepsize: f64,
    pub rollouts: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub ridge: f64,
    pub elbo_eval_samples: usize,
    pub restart_period: usize,
    pub timing: bool,
    pub drop_negative_findings: bool,
    pub jobs: usize,
}

impl RunSpec {
    pub fn config(&self, algorithm: Algorithm, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            algorithm,
            outer: self.outer,
            stepsize: self.stepsize,
            rollouts: self.rollouts,
            iterations: self.iterations,
            elbo_eval_samples: self.elbo_eval_samples,
            seed,
            ridge: self.ridge,
            restart_period: self.restart_period,
        }
    }

    /// File stem shared by the history and snapshot of one run.
    pub fn run_name(&self, algorithm: Algorithm, seed: u64) -> String {
        format!("{}-{}-{}-seed{}", self.model, algorithm, self.outer, seed)
    }

    /// Every resolved setting as `key=value` lines, in a fixed order.
    pub fn manifest(&self) -> String {
        let join = |xs: Vec<String>| xs.join(",");
        let mut out = String::from("# resolved run configuration\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("model", self.model.to_string());
        line(
            "model-file",
            self.model_file.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "builtin".into()),
        );
        line("algo", join(self.algorithms.iter().map(|a| a.to_string()).collect()));
        line("outer", self.outer.to_string());
        line("stepsize", format!("{:?}", self.stepsize));
        line("rollouts", self.rollouts.to_string());
        line("iters", self.iterations.to_string());
        line("seed", join(self.seeds.iter().map(|s| s.to_string()).collect()));
        line("out", self.out.display().to_string());
        line("ridge", format!("{:?}", self.ridge));
        line("elbo-samples", self.elbo_eval_samples.to_string());
        line("restart-period", self.restart_period.to_string());
        line("timing", self.timing.to_string());
        line("drop-negative-findings", self.drop_negative_findings.to_string());
        out
    }
}

const CONFIG_KEYS: [&str; 15] = [
    "model",
    "model-file",
    "algo",
    "outer",
    "stepsize",
    "rollouts",
    "iters",
    "seed",
    "out",
    "ridge",
    "elbo-samples",
    "restart-period",
    "timing",
    "drop-negative-findings",
    "jobs",
];

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", i + 1)))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(usage(format!("config line {}: unknown key '{key}'", i + 1)));
        }
        map.insert(key.to_owned(), value.trim().to_owned());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| usage(format!("invalid value '{value}' for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    let items = value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(usage(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Combine flags, the output-directory environment override, and the config file.
pub fn resolve(args: &Args, env_out: Option<&str>) -> Result<RunSpec, CliError> {
    let config = match &args.config {
        Some(path) => parse_config(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)?,
        None => BTreeMap::new(),
    };
    let pick = |flag: Option<String>, key: &str| flag.or_else(|| config.get(key).cloned());
    let defaults = OptimizerConfig::default();

    let model_name = pick(args.model.clone(), "model").ok_or_else(|| usage("--model is required"))?;
    let model: ModelKind = model_name
        .parse()
        .map_err(|_| usage(format!("unknown model '{model_name}'")))?;
    let model_file = args
        .model_file
        .clone()
        .or_else(|| config.get("model-file").map(PathBuf::from));
    if model_file.is_some() && !model.has_file_format() {
        return Err(usage(format!("model '{model}' does not read a model file")));
    }
    let algorithms = match pick(args.algo.clone(), "algo") {
        Some(v) => parse_list::<String>("algo", &v)?
            .into_iter()
            .map(|a| a.parse::<Algorithm>().map_err(|_| usage(format!("unknown algorithm '{a}'"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![defaults.algorithm],
    };
    let outer = match pick(args.outer.clone(), "outer") {
        Some(v) => v.parse().map_err(|_| usage(format!("unknown outer optimizer '{v}'")))?,
        None => defaults.outer,
    };
    let stepsize = match pick(args.stepsize.map(|v| format!("{v:?}")), "stepsize") {
        Some(v) => parse_value("stepsize", &v)?,
        None => defaults.stepsize,
    };
    let rollouts = match pick(args.rollouts.map(|v| v.to_string()), "rollouts") {
        Some(v) => parse_value("rollouts", &v)?,
        None => defaults.rollouts,
    };
    let iterations = match pick(args.iters.map(|v| v.to_string()), "iters") {
        Some(v) => parse_value("iters", &v)?,
        None => defaults.iterations,
    };
    let seeds = match pick(args.seed.clone(), "seed") {
        Some(v) => parse_list("seed", &v)?,
        None => vec![defaults.seed],
    };
    let out = args
        .out
        .clone()
        .or_else(|| env_out.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| config.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ridge = match pick(args.ridge.map(|v| format!("{v:?}")), "ridge") {
        Some(v) => parse_value("ridge", &v)?,
        None => defaults.ridge,
    };
    let elbo_eval_samples = match pick(args.elbo_samples.map(|v| v.to_string()), "elbo-samples") {
        Some(v) => parse_value("elbo-samples", &v)?,
        None => defaults.elbo_eval_samples,
    };
    let restart_period = match pick(args.restart_period.map(|v| v.to_string()), "restart-period") {
        Some(v) => parse_value("restart-period", &v)?,
        None => defaults.restart_period,
    };
    let flag_or_config = |flag: bool, key: &str| -> Result<bool, CliError> {
        if flag {
            return Ok(true);
        }
        config.get(key).map(|v| parse_bool(key, v)).unwrap_or(Ok(false))
    };
    let jobs = match pick(args.jobs.map(|v| v.to_string()), "jobs") {
        Some(v) => parse_value("jobs", &v)?,
        None => 0,
    };

    let spec = RunSpec {
        model,
        model_file,
        algorithms,
        outer,
        stepsize,
        rollouts,
        iterations,
        seeds,
        out,
        ridge,
        elbo_eval_samples,
        restart_period,
        timing: flag_or_config(args.timing, "timing")?,
        drop_negative_findings: flag_or_config(args.drop_negative_findings, "drop-negative-findings")?,
        jobs,
    };
    for &a in &spec.algorithms {
        spec.config(a, 0).validate().map_err(|e| usage(e.to_string()))?;
    }
    Ok(spec)
}

/// Instantiate the model named by `spec`, reading its file if one is given.
pub fn load_model(spec: &RunSpec) -> Result<Model, CliError> {
    let mut model = match &spec.model_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Model::from_text(spec.model, &text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
        }
        None => Model::default_instance(spec.model),
    };
    if let Model::Qmr(qmr) = &mut model {
        qmr.include_negative = !spec.drop_negative_findings;
    }
    Ok(model)
}

fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with one row per record; floats carry 17 significant digits. The
/// wall-clock column is written as zero unless `timing` is set.
pub fn write_history(records: &[IterationRecord], path: &Path, timing: bool) -> crate::error::Result<()> {
    if records.is_empty() {
        return Err(Error::Param("history needs at least one record".into()));
    }
    let mut out = String::with_capacity(records.len() * 96);
    out += HISTORY_HEADER;
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.cumulative_samples,
            format_float(r.elbo_mean),
            format_float(r.elbo_stderr),
            format_float(r.direction_norm),
            format_float(if timing { r.wallclock_seconds } else { 0.0 }),
        );
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_history(path: &Path) -> crate::error::Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing history header".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |message: &str| Error::Parse {
                line: i + 1,
                message: message.into(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid integer"));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid float"));
            Ok(IterationRecord {
                iteration: int(fields[0])?,
                cumulative_samples: int(fields[1])?,
                elbo_mean: float(fields[2])?,
                elbo_stderr: float(fields[3])?,
                direction_norm: float(fields[4])?,
                wallclock_seconds: float(fields[5])?,
            })
        })
        .collect()
}

/// One finished run.
#[derive(Debug)]
pub struct RunOutcome {
    pub name: String,
    pub final_elbo: f64,
    pub halted: Option<Halt>,
}

/// Execute every (algorithm, seed) pair of `spec` and write its outputs.
pub fn execute(spec: &RunSpec, model: &Model) -> Result<Vec<RunOutcome>, CliError> {
    fs::create_dir_all(&spec.out).map_err(|e| io_error(&spec.out, e))?;
    let jobs: Vec<(Algorithm, u64)> = spec
        .algorithms
        .iter()
        .flat_map(|&a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let workers = match spec.jobs {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(jobs.len())
    .max(1);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(algorithm, seed)) = jobs.get(i) else {
                    break;
                };
                let outcome = run_one(spec, model, algorithm, seed);
                results.lock().expect("result slots")[i] = Some(outcome);
            });
        }
    });
    let outcomes = results
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let mut manifest = spec.manifest();
    for o in &outcomes {
        let _ = writeln!(manifest, "run={}", o.name);
        if let Some(h) = &o.halted {
            let _ = writeln!(manifest, "halted.{}=iteration {}: {}", o.name, h.iteration, h.error);
        }
    }
    let path = spec.out.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| io_error(&path, e))?;
    Ok(outcomes)
}

fn run_one(spec: &RunSpec, model: &Model, algorithm: Algorithm, seed: u64) -> Result<RunOutcome, CliError> {
    let name = spec.run_name(algorithm, seed);
    let mut store = ParamStore::new();
    let result = run_optimization(model, &mut store, &spec.config(algorithm, seed))
        .map_err(|e| CliError::Run(format!("{name}: {e}")))?;
    let history = spec.out.join(format!("{name}.csv"));
    write_history(&result.records, &history, spec.timing).map_err(|e| CliError::Io(e.to_string()))?;
    let snapshot = spec.out.join(format!("{name}.store"));
    let text = store.to_snapshot().map_err(|e| CliError::Run(format!("{name}: {e}")))?;
    fs::write(&snapshot, text).map_err(|e| io_error(&snapshot, e))?;
    Ok(RunOutcome {
        name,
        final_elbo: result.records.last().map(|r| r.elbo_mean).unwrap_or(f64::NAN),
        halted: result.halted,
    })
}

/// Entry point; returns the process exit code.
pub fn main<I, T>(argv: I, env_out: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_cli(&args, env_out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("{}", Args::command().render_usage());
            }
            e.exit_code()
        }
    }
}

fn run_cli(args: &Args, env_out: Option<&str>) -> Result<(), CliError> {
    let spec = resolve(args, env_out)?;
    let model = load_model(&spec)?;
    if let Some(path) = &args.emit_model {
        let text = model
            .to_text()
            .ok_or_else(|| usage(format!("model '{}' has no file format", spec.model)))?;
        return fs::write(path, text).map_err(|e| io_error(path, e));
    }
    for o in execute(&spec, &model)? {
        match &o.halted {
            None => println!("{}: final elbo {:.6}", o.name, o.final_elbo),
            Some(h) => println!("{}: halted at iteration {} ({})", o.name, h.iteration, h.error),
        }
    }
    Ok(())
}
