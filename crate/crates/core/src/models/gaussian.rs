use crate::erp::{ErpFamily, ErpValue};
use crate::error::{Error, Result};
use crate::trace::{Context, Program};

/// `x ~ N(prior_mean, prior_std)`, `y ~ N(x, likelihood_std)` observed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair {
    pub prior_mean: f64,
    pub prior_std: f64,
    pub likelihood_std: f64,
    pub observation: f64,
}

impl Default for GaussianPair {
    fn default() -> Self {
        GaussianPair {
            prior_mean: 0.0,
            prior_std: 1.0,
            likelihood_std: 0.5,
            observation: 1.5,
        }
    }
}

impl GaussianPair {
    pub fn posterior(&self) -> Result<GaussianPosterior> {
        gaussian_pair_oracle(self.prior_mean, self.prior_std, self.likelihood_std, self.observation)
    }
}

impl Program for GaussianPair {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let x = ctx.normal("x", self.prior_mean, self.prior_std)?;
        ctx.observe(
            &ErpFamily::Normal,
            &[x, self.likelihood_std],
            &ErpValue::Real(self.observation),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPosterior {
    pub mean: f64,
    pub std: f64,
    /// `ln p(y)`.
    pub log_evidence: f64,
}

/// Conjugate posterior of a Normal mean under a Normal likelihood.
pub fn gaussian_pair_oracle(prior_mean: f64, prior_std: f64, likelihood_std: f64, y: f64) -> Result<GaussianPosterior> {
    if !(prior_std > 0.0 && likelihood_std > 0.0) || !prior_mean.is_finite() || !y.is_finite() {
        return Err(Error::Param(format!(
            "gaussian pair needs positive scales and finite locations (got {prior_std}, {likelihood_std})"
        )));
    }
    let prior_precision = prior_std.powi(-2);
    let lik_precision = likelihood_std.powi(-2);
    let precision = prior_precision + lik_precision;
    let mean = (prior_precision * prior_mean + lik_precision * y) / precision;
    let marginal_var = prior_std.powi(2) + likelihood_std.powi(2);
    let log_evidence = -0.5 * ((2.0 * std::f64::consts::PI * marginal_var).ln() + (y - prior_mean).powi(2) / marginal_var);
    Ok(GaussianPosterior {
        mean,
        std: precision.sqrt().recip(),
        log_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    #[test]
    fn closed_form_examples() {
        let post = gaussian_pair_oracle(0.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(post.mean, 0.0);
        assert!((post.std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let post = gaussian_pair_oracle(2.5, 0.3, 4.0, 2.5).unwrap();
        assert!((post.mean - 2.5).abs() < 1e-15);
        assert!(gaussian_pair_oracle(0.0, 0.0, 1.0, 0.0).is_err());

        let default = GaussianPair::default().posterior().unwrap();
        assert!((default.mean - 1.2).abs() < 1e-12);
        assert!((default.std - 0.2f64.sqrt()).abs() < 1e-12);
    }

    /// Composite Simpson integration of the unnormalized posterior.
    fn quadrature(prior_mean: f64, prior_std: f64, lik_std: f64, y: f64) -> (f64, f64, f64) {
        let density = |x: f64| {
            let lp = -0.5 * ((x - prior_mean) / prior_std).powi(2)
                - 0.5 * ((y - x) / lik_std).powi(2)
                - (2.0 * std::f64::consts::PI * prior_std * lik_std).ln();
            lp.exp()
        };
        let center = prior_mean;
        let half_width = 40.0 * prior_std.max(lik_std) + (y - prior_mean).abs();
        let (lo, hi) = (center - half_width, center + half_width);
        let n = 400_000;
        let h = (hi - lo) / n as f64;
        let mut moments = [0.0; 3];
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let d = w * density(x);
            moments[0] += d;
            moments[1] += d * x;
            moments[2] += d * x * x;
        }
        let z = moments[0] * h / 3.0;
        let mean = moments[1] / moments[0];
        let var = moments[2] / moments[0] - mean * mean;
        (z, mean, var.sqrt())
    }

    #[test]
    fn matches_quadrature() {
        let mut r = stream(11, Domain::Test, 0, 0);
        for _ in 0..5 {
            let (m0, s0, sl, y) = (
                r.random_range(-3.0..3.0),
                r.random_range(0.3..3.0),
                r.random_range(0.3..3.0),
                r.random_range(-5.0..5.0),
            );
            let post = gaussian_pair_oracle(m0, s0, sl, y).unwrap();
            let (z, mean, std) = quadrature(m0, s0, sl, y);
            assert!((post.mean - mean).abs() < 1e-8, "mean {} vs {mean}", post.mean);
            assert!((post.std - std).abs() < 1e-8, "std {} vs {std}", post.std);
            assert!((post.log_evidence - z.ln()).abs() < 1e-8);
        }
    }
}
