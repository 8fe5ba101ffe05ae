//! Score-function gradient estimators over a batch of guided traces.
//!
//! All directions are *ascent* directions on the lower bound `L(θ)`: for
//! trace `j` with flattened score `ψ_j` and gain `f_j = gain(trace_j, 0)`,
//! the vanilla estimate is `(1/N) Σ_j ψ_j (f_j + b)`.
//!
//! Batches with fewer traces than parameters are the normal case (ten
//! rollouts against hundreds of parameters), so the Fisher-based solvers
//! switch to the `N × N` dual form whenever `d > N`.

use crate::error::{Error, Result};
use crate::meanfield::ParamStore;
use crate::trace::Trace;
use nalgebra::{Cholesky, DMatrix, DVector};

pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Scalar(f64),
    PerComponent(Vec<f64>),
}

impl Baseline {
    pub fn zero() -> Self {
        Baseline::Scalar(0.0)
    }

    pub fn component(&self, i: usize) -> f64 {
        match self {
            Baseline::Scalar(k) => *k,
            Baseline::PerComponent(b) => b[i],
        }
    }

    /// Scalar summary: the value itself, or the mean of the components.
    pub fn scalar(&self) -> f64 {
        match self {
            Baseline::Scalar(k) => *k,
            Baseline::PerComponent(b) if b.is_empty() => 0.0,
            Baseline::PerComponent(b) => b.iter().sum::<f64>() / b.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub direction: Vec<f64>,
    pub baseline: Baseline,
    pub n_traces: usize,
    /// `gain(trace_j, 0)` for every trace in the batch.
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnacFit {
    /// Regression slope on the scores: the natural-gradient direction.
    pub w: Vec<f64>,
    /// Fitted intercept: the baseline.
    pub b: f64,
    /// Set when every score in the batch was zero; `w` is then zero.
    pub degenerate: bool,
}

/// Flattened score of one trace; addresses absent from the trace contribute zeros.
pub fn per_trace_score(trace: &Trace, store: &ParamStore) -> Result<Vec<f64>> {
    let mut flat = vec![0.0; store.dim()];
    for entry in &trace.entries {
        let range = store.segment(&entry.address).ok_or_else(|| Error::Structural {
            address: entry.address.clone(),
            message: "trace address unknown to the store".into(),
        })?;
        if range.len() != entry.score.len() {
            return Err(Error::Dimension {
                expected: range.len(),
                got: entry.score.len(),
            });
        }
        flat[range].copy_from_slice(&entry.score);
    }
    Ok(flat)
}

/// Scores and gains of a batch, laid out for the estimators below.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    /// `N × d`, one row per trace.
    pub scores: DMatrix<f64>,
    pub gains: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(traces: &[Trace], store: &ParamStore) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::Param("gradient estimation needs at least one trace".into()));
        }
        let d = store.dim();
        let mut scores = DMatrix::zeros(traces.len(), d);
        for (j, trace) in traces.iter().enumerate() {
            let row = per_trace_score(trace, store)?;
            for (i, v) in row.into_iter().enumerate() {
                scores[(j, i)] = v;
            }
        }
        let gains = traces.iter().map(|t| t.gain(0.0)).collect();
        Ok(ScoreBatch { scores, gains })
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    pub fn dim(&self) -> usize {
        self.scores.ncols()
    }

    pub fn score_gradient(&self, baseline: &Baseline) -> Result<GradientEstimate> {
        if let Baseline::PerComponent(b) = baseline {
            if b.len() != self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    got: b.len(),
                });
            }
        }
        let n = self.n() as f64;
        let direction: Vec<f64> = (0..self.dim())
            .map(|i| {
                let b = baseline.component(i);
                self.scores
                    .column(i)
                    .iter()
                    .zip(&self.gains)
                    .map(|(s, f)| if *s == 0.0 { 0.0 } else { s * (f + b) })
                    .sum::<f64>()
                    / n
            })
            .collect();
        ensure_finite(&direction, "score gradient")?;
        Ok(GradientEstimate {
            direction,
            baseline: baseline.clone(),
            n_traces: self.n(),
            gains: self.gains.clone(),
        })
    }

    /// `b_i = -Σ_j ψ_ij² f_j / Σ_j ψ_ij²`, zero where component `i` never scores.
    pub fn optimal_baseline(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let (num, den) = self
                    .scores
                    .column(i)
                    .iter()
                    .zip(&self.gains)
                    .fold((0.0, 0.0), |(num, den), (s, f)| {
                        let s2 = s * s;
                        if s2 == 0.0 {
                            (num, den)
                        } else {
                            (num + s2 * f, den + s2)
                        }
                    });
                if den == 0.0 {
                    0.0
                } else {
                    -num / den
                }
            })
            .collect()
    }

    /// `(1/N) Σ_j ψ_j ψ_jᵀ + λI`, dense.
    pub fn fisher_estimate(&self, ridge: f64) -> FisherMatrix {
        let n = self.n() as f64;
        let mut matrix = self.scores.tr_mul(&self.scores) / n;
        for i in 0..self.dim() {
            matrix[(i, i)] += ridge;
        }
        FisherMatrix { matrix, ridge }
    }

    /// Ridge regression `f_j ≈ ψ_jᵀ w + b` with an unpenalized intercept.
    pub fn enac_direction(&self, ridge: f64) -> Result<EnacFit> {
        if self.n() < 2 {
            return Err(Error::Param("ENAC regression needs at least two traces".into()));
        }
        let n = self.n();
        let d = self.dim();
        let f_mean = self.gains.iter().sum::<f64>() / n as f64;
        if self.scores.iter().all(|s| *s == 0.0) {
            return Ok(EnacFit {
                w: vec![0.0; d],
                b: f_mean,
                degenerate: true,
            });
        }
        let score_mean = self.scores.row_mean();
        let mut centered = self.scores.clone();
        for mut row in centered.row_iter_mut() {
            row -= &score_mean;
        }
        let f_centered = DVector::from_iterator(n, self.gains.iter().map(|f| f - f_mean));

        let w = if d <= n {
            // (Ψcᵀ Ψc / N + λI) w = Ψcᵀ fc / N
            let mut gram = centered.tr_mul(&centered) / n as f64;
            for i in 0..d {
                gram[(i, i)] += ridge;
            }
            let rhs = centered.tr_mul(&f_centered) / n as f64;
            solve_spd(gram, rhs, "ENAC normal equations")?
        } else {
            // w = Ψcᵀ (Ψc Ψcᵀ + NλI)⁻¹ fc
            let mut kernel = &centered * centered.transpose();
            for j in 0..n {
                kernel[(j, j)] += n as f64 * ridge;
            }
            let alpha = solve_spd(kernel, f_centered, "ENAC dual system")?;
            centered.tr_mul(&alpha)
        };
        let b = f_mean - score_mean.transpose().dot(&w);
        let w: Vec<f64> = w.iter().copied().collect();
        ensure_finite(&w, "ENAC direction")?;
        Ok(EnacFit { w, b, degenerate: false })
    }

    /// `F⁻¹ g` with `g` the optimal-baseline score gradient and `F` the
    /// ridge-regularized empirical Fisher matrix.
    pub fn sogd_direction(&self, ridge: f64) -> Result<Vec<f64>> {
        let g = self
            .score_gradient(&Baseline::PerComponent(self.optimal_baseline()))?
            .direction;
        let g = DVector::from_vec(g);
        let n = self.n();
        let d = self.dim();
        let direction = if d <= n {
            solve_spd(self.fisher_estimate(ridge).matrix, g, "Fisher system")?
        } else {
            if ridge <= 0.0 {
                return Err(Error::Numerical("Fisher matrix is singular with fewer traces than parameters and no ridge".into()));
            }
            // Woodbury: (λI + ΨᵀΨ/N)⁻¹ g = (g − Ψᵀ (NλI + ΨΨᵀ)⁻¹ Ψ g) / λ
            let mut kernel = &self.scores * self.scores.transpose();
            for j in 0..n {
                kernel[(j, j)] += n as f64 * ridge;
            }
            let projected = &self.scores * &g;
            let inner = solve_spd(kernel, projected, "Fisher dual system")?;
            (g - self.scores.tr_mul(&inner)) / ridge
        };
        let direction: Vec<f64> = direction.iter().copied().collect();
        ensure_finite(&direction, "SOGD direction")?;
        Ok(direction)
    }
}

fn solve_spd(matrix: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if matrix.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    let chol = Cholesky::new(matrix).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(chol.solve(&rhs))
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is not finite")))
    }
}

pub fn score_gradient(traces: &[Trace], store: &ParamStore, baseline: &Baseline) -> Result<GradientEstimate> {
    ScoreBatch::new(traces, store)?.score_gradient(baseline)
}

pub fn optimal_baseline(traces: &[Trace], store: &ParamStore) -> Result<Vec<f64>> {
    Ok(ScoreBatch::new(traces, store)?.optimal_baseline())
}

pub fn fisher_estimate(traces: &[Trace], store: &ParamStore, ridge: f64) -> Result<FisherMatrix> {
    Ok(ScoreBatch::new(traces, store)?.fisher_estimate(ridge))
}

pub fn enac_direction(traces: &[Trace], store: &ParamStore, ridge: f64) -> Result<EnacFit> {
    ScoreBatch::new(traces, store)?.enac_direction(ridge)
}

pub fn sogd_direction(traces: &[Trace], store: &ParamStore, ridge: f64) -> Result<Vec<f64>> {
    ScoreBatch::new(traces, store)?.sogd_direction(ridge)
}

/// Scale to unit Euclidean norm; directions shorter than `1e-12` become zero.
pub fn normalize(direction: &[f64]) -> Vec<f64> {
    let norm = l2_norm(direction);
    if norm > 1e-12 {
        direction.iter().map(|d| d / norm).collect()
    } else {
        vec![0.0; direction.len()]
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
