//! Fixed-stepsize outer loops over unit-norm gradient directions.
//!
//! Iteration `t` (1-based) draws `M` guided rollouts from streams
//! `(seed, Rollout, t, j)`, turns them into a direction, normalizes it, and
//! steps `θ ← θ + α·d`. The ELBO is then estimated on a copy of the store
//! from stream `(seed, Evaluation, t, 0)`, so monitoring never perturbs the
//! trajectory and every algorithm is monitored with the same random numbers.

use crate::error::{Error, Result};
use crate::gradient::{l2_norm, normalize, Baseline, ScoreBatch, DEFAULT_RIDGE};
use crate::meanfield::{elbo_estimate, ParamStore};
use crate::rng::{stream, Domain};
use crate::trace::{run_guided, Program};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Score gradient with `K = 0`.
    Sgd,
    /// Slope of the gain-on-score regression.
    Enac,
    /// Optimal-baseline gradient preconditioned by the empirical Fisher matrix.
    Sogd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Sgd, Algorithm::Enac, Algorithm::Sogd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Enac => "enac",
            Algorithm::Sogd => "sogd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outer {
    Steepest,
    ConjugateGradient,
}

impl Outer {
    pub fn name(self) -> &'static str {
        match self {
            Outer::Steepest => "steepest",
            Outer::ConjugateGradient => "cg",
        }
    }
}

impl fmt::Display for Outer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Outer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steepest" => Ok(Outer::Steepest),
            "cg" => Ok(Outer::ConjugateGradient),
            _ => Err(Error::Param(format!("unknown outer optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub outer: Outer,
    pub stepsize: f64,
    pub rollouts: usize,
    pub iterations: usize,
    pub elbo_eval_samples: usize,
    pub seed: u64,
    pub ridge: f64,
    pub restart_period: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Enac,
            outer: Outer::Steepest,
            stepsize: 0.05,
            rollouts: 10,
            iterations: 500,
            elbo_eval_samples: 100,
            seed: 1,
            ridge: DEFAULT_RIDGE,
            restart_period: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize.is_finite() && self.stepsize > 0.0) {
            return Err(Error::Param(format!("stepsize {} must be positive", self.stepsize)));
        }
        if self.rollouts == 0 || self.elbo_eval_samples == 0 || self.restart_period == 0 {
            return Err(Error::Param(
                "rollouts, elbo_eval_samples and restart_period must be positive".into(),
            ));
        }
        if self.algorithm == Algorithm::Enac && self.rollouts < 2 {
            return Err(Error::Param("ENAC needs at least two rollouts".into()));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::Param(format!("ridge {} must be non-negative", self.ridge)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Guided rollouts consumed by the optimizer so far; evaluation draws are not counted.
    pub cumulative_samples: usize,
    pub elbo_mean: f64,
    pub elbo_stderr: f64,
    /// Norm of the raw direction before normalization; 0 on the initial row.
    pub direction_norm: f64,
    pub wallclock_seconds: f64,
}

/// Why an optimization stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Halt {
    pub iteration: usize,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub records: Vec<IterationRecord>,
    pub halted: Option<Halt>,
}

/// Raw (unnormalized) ascent direction of `algorithm` for one batch.
pub fn direction(batch: &ScoreBatch, algorithm: Algorithm, ridge: f64) -> Result<Vec<f64>> {
    match algorithm {
        Algorithm::Sgd => Ok(batch.score_gradient(&Baseline::Scalar(0.0))?.direction),
        Algorithm::Enac => Ok(batch.enac_direction(ridge)?.w),
        Algorithm::Sogd => batch.sogd_direction(ridge),
    }
}

/// Polak–Ribière-plus: `g_new + β·d_old` with
/// `β = max(0, g_newᵀ(g_new − g_old) / ‖g_old‖²)`.
pub fn cg_update(g_new: &[f64], g_old: &[f64], d_old: &[f64], restart: bool) -> Vec<f64> {
    assert!(
        g_new.len() == g_old.len() && g_new.len() == d_old.len(),
        "cg_update needs vectors of equal length"
    );
    let old_sq: f64 = g_old.iter().map(|g| g * g).sum();
    let beta = if restart || old_sq == 0.0 {
        0.0
    } else {
        let num: f64 = g_new.iter().zip(g_old).map(|(n, o)| n * (n - o)).sum();
        (num / old_sq).max(0.0)
    };
    g_new.iter().zip(d_old).map(|(g, d)| g + beta * d).collect()
}

/// New addresses extend the flat layout at the end; earlier vectors are zero-padded.
fn pad(v: &mut Vec<f64>, dim: usize) {
    v.resize(dim, 0.0);
}

pub fn run_optimization<P: Program + ?Sized>(
    program: &P,
    store: &mut ParamStore,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    config.validate()?;
    let start = Instant::now();
    let evaluate = |store: &ParamStore, t: usize| -> Result<(f64, f64)> {
        let mut scratch = store.clone();
        let est = elbo_estimate(
            program,
            &mut scratch,
            config.elbo_eval_samples,
            &mut stream(config.seed, Domain::Evaluation, t as u64, 0),
        )?;
        Ok((est.mean, est.stderr))
    };

    let (elbo_mean, elbo_stderr) = evaluate(store, 0)?;
    let mut records = vec![IterationRecord {
        iteration: 0,
        cumulative_samples: 0,
        elbo_mean,
        elbo_stderr,
        direction_norm: 0.0,
        wallclock_seconds: start.elapsed().as_secs_f64(),
    }];
    let mut g_old: Vec<f64> = Vec::new();
    let mut d_old: Vec<f64> = Vec::new();

    for t in 1..=config.iterations {
        let traces = (0..config.rollouts)
            .map(|j| run_guided(program, store, &mut stream(config.seed, Domain::Rollout, t as u64, j as u64)))
            .collect::<Result<Vec<_>>>()?;

        let step = ScoreBatch::new(&traces, store).and_then(|batch| {
            let raw = direction(&batch, config.algorithm, config.ridge)?;
            let norm = l2_norm(&raw);
            let g = normalize(&raw);
            let d = match config.outer {
                Outer::Steepest => g,
                Outer::ConjugateGradient => {
                    pad(&mut g_old, g.len());
                    pad(&mut d_old, g.len());
                    let restart = (t - 1) % config.restart_period == 0;
                    let d = cg_update(&g, &g_old, &d_old, restart);
                    g_old = g;
                    d_old = d.clone();
                    normalize(&d)
                }
            };
            store.apply_step(&d, config.stepsize)?;
            Ok(norm)
        });
        let norm = match step {
            Ok(norm) => norm,
            Err(error @ Error::Numerical(_)) => {
                return Ok(OptimizationResult {
                    records,
                    halted: Some(Halt { iteration: t, error }),
                })
            }
            Err(e) => return Err(e),
        };

        let (elbo_mean, elbo_stderr) = evaluate(store, t)?;
        records.push(IterationRecord {
            iteration: t,
            cumulative_samples: t * config.rollouts,
            elbo_mean,
            elbo_stderr,
            direction_norm: norm,
            wallclock_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(OptimizationResult { records, halted: None })
}
