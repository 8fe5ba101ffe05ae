use crate::erp::{ErpFamily, ErpValue};
use crate::error::Result;
use crate::trace::{Context, Program};

/// `x ~ flip(p)`, weighted by `likelihood[x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneCoin {
    pub p: f64,
    /// `[p(y | x = 0), p(y | x = 1)]`.
    pub likelihood: [f64; 2],
}

impl Default for OneCoin {
    fn default() -> Self {
        OneCoin {
            p: 0.5,
            likelihood: [0.2, 0.8],
        }
    }
}

impl Program for OneCoin {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let x = ctx.flip("x", self.p)?;
        ctx.factor(self.likelihood[x as usize].ln());
        Ok(())
    }
}

/// Dependent coins `a → b` with a noisy observation of both.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoCoin {
    pub p_a: f64,
    /// `[p(b | a = 0), p(b | a = 1)]`.
    pub p_b: [f64; 2],
    /// `p(y = 1)` when neither, exactly one, or both coins are heads.
    pub p_y: [f64; 3],
}

impl Default for TwoCoin {
    fn default() -> Self {
        TwoCoin {
            p_a: 0.3,
            p_b: [0.25, 0.8],
            p_y: [0.1, 0.5, 0.9],
        }
    }
}

impl Program for TwoCoin {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let a = ctx.flip("a", self.p_a)?;
        let b = ctx.flip("b", self.p_b[a as usize])?;
        let heads = a as usize + b as usize;
        ctx.observe(&ErpFamily::Bernoulli, &[self.p_y[heads]], &ErpValue::Index(1))
    }
}

/// `X | M` observed with Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub value: f64,
    pub noise_std: f64,
}

/// A program whose control flow depends on a continuous draw:
///
/// ```text
/// M = normal(0, 1)                          line1
/// if M > 1:  X = normal(scale·(sin M + M²), 1)   line4
/// else:      X = uniform(0, 1)               line6
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BranchingModel {
    pub scale: f64,
    pub observation: Option<Observation>,
}

impl Default for BranchingModel {
    fn default() -> Self {
        BranchingModel {
            scale: 1.0,
            observation: Some(Observation {
                value: 2.0,
                noise_std: 0.5,
            }),
        }
    }
}

impl BranchingModel {
    pub fn unobserved() -> Self {
        BranchingModel {
            scale: 1.0,
            observation: None,
        }
    }

    pub fn mean_of_x(&self, m: f64) -> f64 {
        self.scale * (m.sin() + m * m)
    }
}

impl Program for BranchingModel {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let m = ctx.normal("line1", 0.0, 1.0)?;
        let x = if m > 1.0 {
            ctx.normal("line4", self.mean_of_x(m), 1.0)?
        } else {
            ctx.uniform("line6", 0.0, 1.0)?
        };
        if let Some(obs) = self.observation {
            ctx.observe(&ErpFamily::Normal, &[x, obs.noise_std], &ErpValue::Real(obs.value))?;
        }
        Ok(())
    }
}
