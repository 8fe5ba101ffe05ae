//! Benchmark programs and exact oracles.
//!
//! Model files are line-oriented text: blank lines and lines starting with
//! `#` are ignored, every other line is a keyword followed by
//! whitespace-separated fields. The grammars are documented on
//! [`QmrModel::from_text`] and [`LdaModel::from_text`].

mod enumerate;
mod gaussian;
mod lda;
mod qmr;
mod toy;

pub use enumerate::{enumerate_posterior, enumerate_within, register_all, EnumeratedTrace, Enumeration, MAX_ENUMERATED_TRACES};
pub use gaussian::{gaussian_pair_oracle, GaussianPair, GaussianPosterior};
pub use lda::{lda_collapsed_log_evidence, LdaModel};
pub use qmr::QmrModel;
pub use toy::{BranchingModel, OneCoin, TwoCoin};

use crate::error::{Error, Result};
use crate::trace::{Context, Program};
use std::fmt;
use std::str::FromStr;

/// Seed for the synthetic benchmark datasets shipped under `data/`.
pub const DATA_SEED: u64 = 2013;

/// Model names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Qmr,
    Lda,
    Fig1,
    TwoCoin,
    GaussianPair,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Qmr,
        ModelKind::Lda,
        ModelKind::Fig1,
        ModelKind::TwoCoin,
        ModelKind::GaussianPair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Qmr => "qmr",
            ModelKind::Lda => "lda",
            ModelKind::Fig1 => "fig1",
            ModelKind::TwoCoin => "two-coin",
            ModelKind::GaussianPair => "gaussian-pair",
        }
    }

    /// Whether instances of this model can be read from a model file.
    pub fn has_file_format(self) -> bool {
        matches!(self, ModelKind::Qmr | ModelKind::Lda)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown model '{s}'")))
    }
}

/// A concrete model instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Qmr(QmrModel),
    Lda(LdaModel),
    Fig1(BranchingModel),
    TwoCoin(TwoCoin),
    GaussianPair(GaussianPair),
}

impl Model {
    /// The default desk-scale instance of `kind`.
    pub fn default_instance(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Qmr => Model::Qmr(QmrModel::desk_scale()),
            ModelKind::Lda => Model::Lda(LdaModel::desk_scale()),
            ModelKind::Fig1 => Model::Fig1(BranchingModel::default()),
            ModelKind::TwoCoin => Model::TwoCoin(TwoCoin::default()),
            ModelKind::GaussianPair => Model::GaussianPair(GaussianPair::default()),
        }
    }

    pub fn from_text(kind: ModelKind, text: &str) -> Result<Self> {
        match kind {
            ModelKind::Qmr => QmrModel::from_text(text).map(Model::Qmr),
            ModelKind::Lda => LdaModel::from_text(text).map(Model::Lda),
            other => Err(Error::Param(format!("model '{other}' has no file format"))),
        }
    }

    pub fn to_text(&self) -> Option<String> {
        match self {
            Model::Qmr(m) => Some(m.to_text()),
            Model::Lda(m) => Some(m.to_text()),
            _ => None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Qmr(_) => ModelKind::Qmr,
            Model::Lda(_) => ModelKind::Lda,
            Model::Fig1(_) => ModelKind::Fig1,
            Model::TwoCoin(_) => ModelKind::TwoCoin,
            Model::GaussianPair(_) => ModelKind::GaussianPair,
        }
    }
}

impl Program for Model {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        match self {
            Model::Qmr(m) => m.run(ctx),
            Model::Lda(m) => m.run(ctx),
            Model::Fig1(m) => m.run(ctx),
            Model::TwoCoin(m) => m.run(ctx),
            Model::GaussianPair(m) => m.run(ctx),
        }
    }
}

/// Non-comment lines of a model file as `(line number, fields)`.
pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split_whitespace().collect()))
        }
    })
}

pub(crate) fn parse_field<T: FromStr>(line: usize, field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} '{field}'"),
    })
}

pub(crate) fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// `ln Σ exp(x_i)`, `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
            assert_eq!(Model::default_instance(kind).kind(), kind);
        }
        assert!("bogus".parse::<ModelKind>().is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
