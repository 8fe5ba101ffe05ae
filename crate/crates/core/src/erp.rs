//! Elementary random procedures (ERPs).
//!
//! Each family has two parameterizations:
//!
//! * the *natural* form a target program passes at a call site (mean and
//!   standard deviation, a probability, concentrations, ...), and
//! * an *unconstrained* form used for variational parameters, so that any
//!   finite vector is valid and gradient steps never need projection.
//!
//! | family        | natural                 | unconstrained            |
//! |---------------|-------------------------|--------------------------|
//! | `Normal`      | `[mean, std]`           | `[mean, ln std]`         |
//! | `Bernoulli`   | `[p]`                   | `[logit p]`              |
//! | `Categorical` | `[p_0, .., p_{n-1}]`    | `[ln p_0, ..]` (logits)  |
//! | `Beta`        | `[a, b]`                | `[ln a, ln b]`           |
//! | `Gamma`       | `[shape, rate]`         | `[ln shape, ln rate]`    |
//! | `Dirichlet`   | `[alpha_0, ..]`         | `[ln alpha_0, ..]`       |
//! | `Uniform`     | `[]` (support in family)| `[ln a, ln b]`           |
//!
//! A `Uniform` site is approximated by a Beta distribution scaled to the
//! target's fixed support; `Beta(1, 1)` reproduces the target exactly.
//!
//! Log-densities return `-inf` for values outside the support. Gradients
//! refuse such values with [`Error::Support`].

use crate::error::{Error, Result};
use rand::{Rng, RngCore};
use rand_distr::Distribution;
use statrs::function::gamma::{digamma, ln_gamma};
use std::f64::consts::PI;
use std::fmt;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Simplex values must sum to one within this tolerance.
pub const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum ErpFamily {
    Normal,
    Bernoulli,
    /// Categorical over `0..n`.
    Categorical(usize),
    Beta,
    Gamma,
    /// Dirichlet over the `k`-simplex.
    Dirichlet(usize),
    /// Uniform on the open interval `(low, high)`.
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ErpValue {
    Real(f64),
    Index(usize),
    Simplex(Vec<f64>),
}

impl ErpValue {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            ErpValue::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_index(&self) -> Option<usize> {
        match self {
            ErpValue::Index(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ErpValue::Index(0) => Some(false),
            ErpValue::Index(1) => Some(true),
            _ => None,
        }
    }

    pub fn as_simplex(&self) -> Option<&[f64]> {
        match self {
            ErpValue::Simplex(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for ErpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErpFamily::Normal => write!(f, "normal"),
            ErpFamily::Bernoulli => write!(f, "bernoulli"),
            ErpFamily::Categorical(n) => write!(f, "categorical({n})"),
            ErpFamily::Beta => write!(f, "beta"),
            ErpFamily::Gamma => write!(f, "gamma"),
            ErpFamily::Dirichlet(k) => write!(f, "dirichlet({k})"),
            ErpFamily::Uniform { low, high } => write!(f, "uniform({low:?};{high:?})"),
        }
    }
}

impl std::str::FromStr for ErpFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("unknown family `{s}`"));
        let (name, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(&s[open + 1..s.len() - 1])),
            Some(_) => return Err(bad()),
            None => (s, None),
        };
        let family = match (name, arg) {
            ("normal", None) => ErpFamily::Normal,
            ("bernoulli", None) => ErpFamily::Bernoulli,
            ("beta", None) => ErpFamily::Beta,
            ("gamma", None) => ErpFamily::Gamma,
            ("categorical", Some(n)) => ErpFamily::Categorical(n.parse().map_err(|_| bad())?),
            ("dirichlet", Some(k)) => ErpFamily::Dirichlet(k.parse().map_err(|_| bad())?),
            ("uniform", Some(bounds)) => {
                let (lo, hi) = bounds.split_once(';').ok_or_else(bad)?;
                ErpFamily::Uniform {
                    low: lo.parse().map_err(|_| bad())?,
                    high: hi.parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        family.validate()?;
        Ok(family)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln p` floored so that zero probabilities map to a finite logit.
fn floored_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn beta_log_pdf(a: f64, b: f64, x: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Gradient of the Beta log-density with respect to `(ln a, ln b)`.
fn beta_grad(a: f64, b: f64, x: f64) -> [f64; 2] {
    let common = digamma(a + b);
    [
        a * (x.ln() - digamma(a) + common),
        b * ((-x).ln_1p() - digamma(b) + common),
    ]
}

fn sample_beta(a: f64, b: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let dist = rand_distr::Beta::new(a, b).map_err(|e| Error::Param(format!("beta({a}, {b}): {e}")))?;
    // Keep draws strictly inside (0, 1) so the log-density stays finite.
    Ok(dist.sample(rng).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// `ln G` for `G ~ Gamma(shape, 1)`, computed in log space so that small
/// shapes do not underflow to zero.
fn sample_ln_gamma(shape: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let bad = |e: rand_distr::GammaError| Error::Param(format!("gamma({shape}): {e}"));
    if shape < 1.0 {
        let g: f64 = rand_distr::Gamma::new(shape + 1.0, 1.0).map_err(bad)?.sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        Ok(g.ln() + u.ln() / shape)
    } else {
        let g: f64 = rand_distr::Gamma::new(shape, 1.0).map_err(bad)?.sample(rng);
        Ok(g.max(f64::MIN_POSITIVE).ln())
    }
}

fn positive(values: &[f64], what: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(Error::Param(format!("{what} must be positive and finite, got {v}")))
            }
        })
        .collect()
}

fn exp_all(params: &[f64]) -> Result<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let v = p.exp();
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Param(format!("exp({p}) is not a usable positive parameter")))
            }
        })
        .collect()
}

impl ErpFamily {
    /// Number of unconstrained (variational) parameters.
    pub fn arity(&self) -> usize {
        match self {
            ErpFamily::Normal | ErpFamily::Beta | ErpFamily::Gamma | ErpFamily::Uniform { .. } => 2,
            ErpFamily::Bernoulli => 1,
            ErpFamily::Categorical(n) => *n,
            ErpFamily::Dirichlet(k) => *k,
        }
    }

    /// Number of natural parameters a target program passes.
    pub fn natural_arity(&self) -> usize {
        match self {
            ErpFamily::Uniform { .. } => 0,
            other => other.arity(),
        }
    }

    /// Outcome count for finite-discrete families, `None` for continuous ones.
    pub fn outcomes(&self) -> Option<usize> {
        match self {
            ErpFamily::Bernoulli => Some(2),
            ErpFamily::Categorical(n) => Some(*n),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ErpFamily::Categorical(0) => Err(Error::Param("categorical needs at least one outcome".into())),
            ErpFamily::Dirichlet(0) => Err(Error::Param("dirichlet needs at least one component".into())),
            ErpFamily::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                Err(Error::Param(format!("uniform support ({low}, {high}) is empty or unbounded")))
            }
            _ => Ok(()),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.arity() {
            return Err(Error::Param(format!(
                "{self} expects {} parameters, got {}",
                self.arity(),
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(Error::Param(format!("{self} parameter {bad} is not finite")));
        }
        Ok(())
    }

    fn check_natural(&self, natural: &[f64]) -> Result<()> {
        if natural.len() != self.natural_arity() {
            return Err(Error::Param(format!(
                "{self} expects {} natural parameters, got {}",
                self.natural_arity(),
                natural.len()
            )));
        }
        Ok(())
    }

    /// Whether `value` lies in the (open) support of this family.
    pub fn in_support(&self, value: &ErpValue) -> bool {
        match (self, value) {
            (ErpFamily::Normal, ErpValue::Real(x)) => x.is_finite(),
            (ErpFamily::Beta, ErpValue::Real(x)) => *x > 0.0 && *x < 1.0,
            (ErpFamily::Gamma, ErpValue::Real(x)) => *x > 0.0 && x.is_finite(),
            (ErpFamily::Uniform { low, high }, ErpValue::Real(x)) => x > low && x < high,
            (ErpFamily::Bernoulli, ErpValue::Index(i)) => *i < 2,
            (ErpFamily::Categorical(n), ErpValue::Index(i)) => i < n,
            (ErpFamily::Dirichlet(k), ErpValue::Simplex(xs)) => {
                xs.len() == *k
                    && xs.iter().all(|&x| x > 0.0 && x <= 1.0)
                    && (xs.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
            }
            _ => false,
        }
    }

    /// The `index`-th outcome of a finite-discrete family.
    pub fn outcome(&self, index: usize) -> Option<ErpValue> {
        match self.outcomes() {
            Some(n) if index < n => Some(ErpValue::Index(index)),
            _ => None,
        }
    }

    /// Unconstrained parameters that reproduce the natural-form distribution.
    ///
    /// Zero probabilities (Bernoulli, Categorical) are floored at the smallest
    /// positive normal number so that the logits stay finite.
    pub fn init_from_target(&self, natural: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_natural(natural)?;
        match self {
            ErpFamily::Normal => {
                let (mean, std) = (natural[0], natural[1]);
                if !mean.is_finite() {
                    return Err(Error::Param(format!("normal mean {mean} is not finite")));
                }
                let log_std = positive(&[std], "normal std")?[0];
                Ok(vec![mean, log_std])
            }
            ErpFamily::Bernoulli => {
                let p = natural[0];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Param(format!("bernoulli p = {p} outside [0, 1]")));
                }
                Ok(vec![floored_ln(p) - floored_ln(1.0 - p)])
            }
            ErpFamily::Categorical(_) => {
                let total = Self::check_probabilities(natural)?;
                Ok(natural.iter().map(|p| floored_ln(p / total)).collect())
            }
            ErpFamily::Beta => positive(natural, "beta shape"),
            ErpFamily::Gamma => positive(natural, "gamma shape/rate"),
            ErpFamily::Dirichlet(_) => positive(natural, "dirichlet concentration"),
            ErpFamily::Uniform { .. } => Ok(vec![0.0, 0.0]),
        }
    }

    fn check_probabilities(probs: &[f64]) -> Result<f64> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Param(format!("probabilities {probs:?} must be nonnegative")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(total)
    }

    /// Draw a value using unconstrained parameters.
    pub fn sample(&self, params: &[f64], rng: &mut dyn RngCore) -> Result<ErpValue> {
        self.validate()?;
        self.check_params(params)?;
        let value = match self {
            ErpFamily::Normal => {
                let std = exp_all(&params[1..])?[0];
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                ErpValue::Real(params[0] + std * z)
            }
            ErpFamily::Bernoulli => ErpValue::Index(usize::from(rng.random::<f64>() < sigmoid(params[0]))),
            ErpFamily::Categorical(n) => {
                let lse = log_sum_exp(params);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, l) in params.iter().enumerate() {
                    acc += (l - lse).exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                ErpValue::Index(chosen)
            }
            ErpFamily::Beta => {
                let ab = exp_all(params)?;
                ErpValue::Real(sample_beta(ab[0], ab[1], rng)?)
            }
            ErpFamily::Gamma => {
                let sr = exp_all(params)?;
                let ln_g = sample_ln_gamma(sr[0], rng)?;
                ErpValue::Real((ln_g - sr[1].ln()).exp().clamp(f64::MIN_POSITIVE, f64::MAX))
            }
            ErpFamily::Dirichlet(_) => {
                let alphas = exp_all(params)?;
                let logs = alphas
                    .iter()
                    .map(|&a| sample_ln_gamma(a, rng))
                    .collect::<Result<Vec<_>>>()?;
                let lse = log_sum_exp(&logs);
                let mut xs: Vec<f64> = logs.iter().map(|l| (l - lse).exp().max(f64::MIN_POSITIVE)).collect();
                let total: f64 = xs.iter().sum();
                xs.iter_mut().for_each(|x| *x /= total);
                ErpValue::Simplex(xs)
            }
            ErpFamily::Uniform { low, high } => {
                let ab = exp_all(params)?;
                let u = sample_beta(ab[0], ab[1], rng)?;
                let x = (low + (high - low) * u).clamp(next_up(*low), next_down(*high));
                ErpValue::Real(x)
            }
        };
        Ok(value)
    }

    /// Draw a value using natural parameters (what a target program does).
    pub fn sample_natural(&self, natural: &[f64], rng: &mut dyn RngCore) -> Result<ErpValue> {
        let params = self.init_from_target(natural)?;
        self.sample(&params, rng)
    }

    /// Log-density (or log-mass) under unconstrained parameters.
    pub fn log_pdf(&self, params: &[f64], value: &ErpValue) -> Result<f64> {
        self.validate()?;
        self.check_params(params)?;
        if !self.in_support(value) {
            return Ok(f64::NEG_INFINITY);
        }
        let lp = match (self, value) {
            (ErpFamily::Normal, ErpValue::Real(x)) => {
                let z = (x - params[0]) * (-params[1]).exp();
                -0.5 * z * z - params[1] - HALF_LN_2PI
            }
            (ErpFamily::Bernoulli, ErpValue::Index(i)) => {
                if *i == 1 {
                    -softplus(-params[0])
                } else {
                    -softplus(params[0])
                }
            }
            (ErpFamily::Categorical(_), ErpValue::Index(i)) => params[*i] - log_sum_exp(params),
            (ErpFamily::Beta, ErpValue::Real(x)) => {
                let ab = exp_all(params)?;
                beta_log_pdf(ab[0], ab[1], *x)
            }
            (ErpFamily::Gamma, ErpValue::Real(x)) => {
                let sr = exp_all(params)?;
                let (shape, rate) = (sr[0], sr[1]);
                shape * params[1] + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)
            }
            (ErpFamily::Dirichlet(_), ErpValue::Simplex(xs)) => {
                let alphas = exp_all(params)?;
                dirichlet_log_pdf(&alphas, xs)
            }
            (ErpFamily::Uniform { low, high }, ErpValue::Real(x)) => {
                let ab = exp_all(params)?;
                let width = high - low;
                beta_log_pdf(ab[0], ab[1], (x - low) / width) - width.ln()
            }
            _ => unreachable!("support check covers value variants"),
        };
        Ok(lp)
    }

    /// Log-density under natural parameters, computed directly in the natural
    /// form rather than through [`ErpFamily::init_from_target`].
    pub fn log_pdf_natural(&self, natural: &[f64], value: &ErpValue) -> Result<f64> {
        self.validate()?;
        self.check_natural(natural)?;
        if !self.in_support(value) {
            return Ok(f64::NEG_INFINITY);
        }
        let lp = match (self, value) {
            (ErpFamily::Normal, ErpValue::Real(x)) => {
                let (mean, std) = (natural[0], natural[1]);
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(Error::Param(format!("normal({mean}, {std}) invalid")));
                }
                let z = (x - mean) / std;
                -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
            }
            (ErpFamily::Bernoulli, ErpValue::Index(i)) => {
                let p = natural[0];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Param(format!("bernoulli p = {p} outside [0, 1]")));
                }
                if *i == 1 {
                    p.ln()
                } else {
                    (-p).ln_1p()
                }
            }
            (ErpFamily::Categorical(_), ErpValue::Index(i)) => {
                let total = Self::check_probabilities(natural)?;
                (natural[*i] / total).ln()
            }
            (ErpFamily::Beta, ErpValue::Real(x)) => {
                positive(natural, "beta shape")?;
                beta_log_pdf(natural[0], natural[1], *x)
            }
            (ErpFamily::Gamma, ErpValue::Real(x)) => {
                positive(natural, "gamma shape/rate")?;
                let (shape, rate) = (natural[0], natural[1]);
                shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)
            }
            (ErpFamily::Dirichlet(_), ErpValue::Simplex(xs)) => {
                positive(natural, "dirichlet concentration")?;
                dirichlet_log_pdf(natural, xs)
            }
            (ErpFamily::Uniform { low, high }, ErpValue::Real(_)) => -(high - low).ln(),
            _ => unreachable!("support check covers value variants"),
        };
        Ok(lp)
    }

    /// Gradient of [`ErpFamily::log_pdf`] with respect to the unconstrained
    /// parameters, evaluated at `value`.
    pub fn grad_log_pdf(&self, params: &[f64], value: &ErpValue) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_params(params)?;
        if !self.in_support(value) {
            return Err(Error::Support(format!("{value:?} for {self}")));
        }
        let grad = match (self, value) {
            (ErpFamily::Normal, ErpValue::Real(x)) => {
                let inv_std = (-params[1]).exp();
                let z = (x - params[0]) * inv_std;
                vec![z * inv_std, z * z - 1.0]
            }
            (ErpFamily::Bernoulli, ErpValue::Index(i)) => vec![*i as f64 - sigmoid(params[0])],
            (ErpFamily::Categorical(_), ErpValue::Index(i)) => {
                let lse = log_sum_exp(params);
                let mut g: Vec<f64> = params.iter().map(|l| -(l - lse).exp()).collect();
                g[*i] += 1.0;
                g
            }
            (ErpFamily::Beta, ErpValue::Real(x)) => {
                let ab = exp_all(params)?;
                beta_grad(ab[0], ab[1], *x).to_vec()
            }
            (ErpFamily::Gamma, ErpValue::Real(x)) => {
                let sr = exp_all(params)?;
                let (shape, rate) = (sr[0], sr[1]);
                vec![shape * (params[1] + x.ln() - digamma(shape)), shape - rate * x]
            }
            (ErpFamily::Dirichlet(_), ErpValue::Simplex(xs)) => {
                let alphas = exp_all(params)?;
                let common = digamma(alphas.iter().sum());
                alphas
                    .iter()
                    .zip(xs)
                    .map(|(a, x)| a * (common - digamma(*a) + x.ln()))
                    .collect()
            }
            (ErpFamily::Uniform { low, high }, ErpValue::Real(x)) => {
                let ab = exp_all(params)?;
                beta_grad(ab[0], ab[1], (x - low) / (high - low)).to_vec()
            }
            _ => unreachable!("support check covers value variants"),
        };
        Ok(grad)
    }
}

fn dirichlet_log_pdf(alphas: &[f64], xs: &[f64]) -> f64 {
    let total: f64 = alphas.iter().sum();
    ln_gamma(total)
        + alphas
            .iter()
            .zip(xs)
            .map(|(a, x)| (a - 1.0) * x.ln() - ln_gamma(*a))
            .sum::<f64>()
}

fn next_up(x: f64) -> f64 {
    let next = x + x.abs().max(f64::MIN_POSITIVE) * f64::EPSILON;
    if next > x {
        next
    } else {
        x + f64::MIN_POSITIVE
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn rng(i: u64) -> crate::rng::StreamRng {
        stream(7, Domain::Test, 0, i)
    }

    fn all_families() -> Vec<ErpFamily> {
        vec![
            ErpFamily::Normal,
            ErpFamily::Bernoulli,
            ErpFamily::Categorical(4),
            ErpFamily::Beta,
            ErpFamily::Gamma,
            ErpFamily::Dirichlet(3),
            ErpFamily::Uniform { low: -1.0, high: 2.5 },
        ]
    }

    fn random_params(family: &ErpFamily, r: &mut impl Rng) -> Vec<f64> {
        match family {
            ErpFamily::Normal => vec![r.random_range(-3.0..3.0), r.random_range(-1.0..1.0)],
            ErpFamily::Bernoulli | ErpFamily::Categorical(_) => {
                (0..family.arity()).map(|_| r.random_range(-2.5..2.5)).collect()
            }
            // Shapes between e^-0.5 and e^1.5 keep the finite-difference problem well conditioned.
            _ => (0..family.arity()).map(|_| r.random_range(-0.5..1.5)).collect(),
        }
    }

    fn central_difference(family: &ErpFamily, params: &[f64], value: &ErpValue) -> Vec<f64> {
        let h = 1e-6;
        (0..params.len())
            .map(|i| {
                let mut up = params.to_vec();
                let mut down = params.to_vec();
                up[i] += h;
                down[i] -= h;
                (family.log_pdf(&up, value).unwrap() - family.log_pdf(&down, value).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn closed_form_log_densities() {
        let lp = ErpFamily::Normal.log_pdf(&[0.0, 0.0], &ErpValue::Real(0.0)).unwrap();
        assert!((lp - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((lp + 0.91894).abs() < 1e-5);

        let lp = ErpFamily::Bernoulli.log_pdf(&[0.0], &ErpValue::Index(1)).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);

        let point = ErpValue::Simplex(vec![0.2, 0.3, 0.5]);
        let lp = ErpFamily::Dirichlet(3).log_pdf(&[0.0; 3], &point).unwrap();
        assert!((lp - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn outside_support_is_negative_infinity_and_gradient_refuses() {
        let cases = [
            (ErpFamily::Beta, ErpValue::Real(1.5)),
            (ErpFamily::Gamma, ErpValue::Real(-1.0)),
            (ErpFamily::Bernoulli, ErpValue::Index(2)),
            (ErpFamily::Categorical(3), ErpValue::Real(0.0)),
            (ErpFamily::Dirichlet(2), ErpValue::Simplex(vec![0.5, 0.6])),
            (ErpFamily::Uniform { low: 0.0, high: 1.0 }, ErpValue::Real(1.0)),
        ];
        for (family, value) in cases {
            let params = vec![0.0; family.arity()];
            assert_eq!(family.log_pdf(&params, &value).unwrap(), f64::NEG_INFINITY, "{family}");
            assert!(matches!(family.grad_log_pdf(&params, &value), Err(Error::Support(_))));
        }
    }

    #[test]
    fn dimension_mismatch_is_a_parameter_error() {
        let mut r = rng(0);
        assert!(matches!(ErpFamily::Normal.sample(&[0.0], &mut r), Err(Error::Param(_))));
        assert!(matches!(ErpFamily::Categorical(3).sample(&[0.0; 2], &mut r), Err(Error::Param(_))));
        assert!(matches!(ErpFamily::Beta.sample(&[f64::NAN, 0.0], &mut r), Err(Error::Param(_))));
    }

    #[test]
    fn gradient_examples() {
        let g = ErpFamily::Bernoulli.grad_log_pdf(&[0.0], &ErpValue::Index(1)).unwrap();
        assert_eq!(g, vec![0.5]);
        let g = ErpFamily::Normal.grad_log_pdf(&[1.0, 0.0], &ErpValue::Real(1.0)).unwrap();
        assert_eq!(g, vec![0.0, -1.0]);
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let mut r = rng(1);
        for _ in 0..50 {
            let params = random_params(&ErpFamily::Gamma, &mut r);
            let value = ErpFamily::Gamma.sample(&params, &mut r).unwrap();
            let analytic = ErpFamily::Gamma.grad_log_pdf(&params, &value).unwrap();
            let numeric = central_difference(&ErpFamily::Gamma, &params, &value);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= (1e-4 * n.abs()).max(1e-7), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn finite_difference_consistency_all_families() {
        let mut r = rng(2);
        for family in all_families() {
            for _ in 0..100 {
                let params = random_params(&family, &mut r);
                let value = family.sample(&params, &mut r).unwrap();
                let analytic = family.grad_log_pdf(&params, &value).unwrap();
                let numeric = central_difference(&family, &params, &value);
                for (a, n) in analytic.iter().zip(&numeric) {
                    let tol = (1e-4 * n.abs()).max(1e-7);
                    assert!((a - n).abs() <= tol, "{family}: {a} vs {n} at {value:?}");
                }
            }
        }
    }

    #[test]
    fn discrete_families_normalize() {
        let mut r = rng(3);
        for family in [ErpFamily::Bernoulli, ErpFamily::Categorical(5), ErpFamily::Categorical(1)] {
            for _ in 0..20 {
                let params = random_params(&family, &mut r);
                let n = family.outcomes().unwrap();
                let total: f64 = (0..n)
                    .map(|i| family.log_pdf(&params, &family.outcome(i).unwrap()).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_from_target_examples() {
        assert_eq!(ErpFamily::Normal.init_from_target(&[2.0, 3.0]).unwrap(), vec![2.0, 3f64.ln()]);
        assert_eq!(ErpFamily::Bernoulli.init_from_target(&[0.5]).unwrap(), vec![0.0]);
        assert_eq!(ErpFamily::Dirichlet(2).init_from_target(&[2.0, 1.0]).unwrap(), vec![2f64.ln(), 0.0]);
        assert!(matches!(ErpFamily::Normal.init_from_target(&[0.0, 0.0]), Err(Error::Param(_))));
        assert!(matches!(ErpFamily::Normal.init_from_target(&[0.0, -1.0]), Err(Error::Param(_))));
        assert!(matches!(ErpFamily::Bernoulli.init_from_target(&[1.5]), Err(Error::Param(_))));
        assert!(matches!(ErpFamily::Categorical(2).init_from_target(&[0.3, 0.3]), Err(Error::Param(_))));
    }

    #[test]
    fn init_from_target_reproduces_natural_density() {
        let mut r = rng(4);
        let naturals: Vec<(ErpFamily, Vec<f64>)> = vec![
            (ErpFamily::Normal, vec![2.0, 3.0]),
            (ErpFamily::Bernoulli, vec![0.3]),
            (ErpFamily::Categorical(3), vec![0.2, 0.5, 0.3]),
            (ErpFamily::Beta, vec![2.5, 0.7]),
            (ErpFamily::Gamma, vec![1.7, 0.4]),
            (ErpFamily::Dirichlet(4), vec![0.5, 1.0, 2.0, 3.5]),
            (ErpFamily::Uniform { low: 0.0, high: 1.0 }, vec![]),
            (ErpFamily::Uniform { low: -2.0, high: 5.0 }, vec![]),
        ];
        for (family, natural) in naturals {
            let params = family.init_from_target(&natural).unwrap();
            for _ in 0..20 {
                let value = family.sample_natural(&natural, &mut r).unwrap();
                let via_params = family.log_pdf(&params, &value).unwrap();
                let direct = family.log_pdf_natural(&natural, &value).unwrap();
                assert!((via_params - direct).abs() < 1e-10, "{family}: {via_params} vs {direct}");
            }
        }
    }

    #[test]
    fn zero_probabilities_stay_finite() {
        let logits = ErpFamily::Categorical(3).init_from_target(&[0.0, 0.4, 0.6]).unwrap();
        assert!(logits.iter().all(|l| l.is_finite()));
        let lp = ErpFamily::Categorical(3).log_pdf_natural(&[0.0, 0.4, 0.6], &ErpValue::Index(0)).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn sampling_symmetries() {
        let mut r = rng(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| ErpFamily::Normal.sample(&[0.0, 0.0], &mut r).unwrap().as_real().unwrap())
            .collect();
        let positive = draws.iter().filter(|x| **x > 0.0).count() as f64 / n as f64;
        assert!((positive - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());

        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[ErpFamily::Categorical(3).sample(&[0.0; 3], &mut r).unwrap().as_index().unwrap()] += 1;
        }
        let stderr = ((1.0 / 3.0) * (2.0 / 3.0) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 3.0 * stderr);
        }

        let draws: Vec<f64> = (0..n)
            .map(|_| ErpFamily::Beta.sample(&[0.0, 0.0], &mut r).unwrap().as_real().unwrap())
            .collect();
        let (mean, stderr) = mean_and_stderr(&draws);
        assert!((mean - 0.5).abs() < 3.0 * stderr);
    }

    #[test]
    fn score_identity_all_families() {
        let mut r = rng(6);
        for family in all_families() {
            let params = random_params(&family, &mut r);
            let n = 100_000;
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v = family.sample(&params, &mut r).unwrap();
                    family.grad_log_pdf(&params, &v).unwrap()
                })
                .collect();
            for i in 0..family.arity() {
                let column: Vec<f64> = scores.iter().map(|s| s[i]).collect();
                let (mean, stderr) = mean_and_stderr(&column);
                assert!(mean.abs() <= 3.0 * stderr + 1e-12, "{family} component {i}: {mean} ± {stderr}");
            }
        }
    }

    #[test]
    fn family_text_round_trip() {
        for family in all_families() {
            let parsed: ErpFamily = family.to_string().parse().unwrap();
            assert_eq!(parsed, family);
        }
        assert!("poisson".parse::<ErpFamily>().is_err());
        assert!("uniform(2;1)".parse::<ErpFamily>().is_err());
    }
}
