//! Variational parameters of the partial mean-field program.
//!
//! The store maps each [`Address`] to an ERP family and its unconstrained
//! parameters. Sites are registered on first encounter, initialized from the
//! target's natural parameters at that encounter, and flattened in
//! registration order so that optimizers can treat the whole variational
//! program as one real vector.
//!
//! Snapshot format, one line per address in registration order:
//!
//! ```text
//! # site_id,occurrence,family,params...
//! disease,0,bernoulli,-2.1972245773362196
//! x,0,normal,1.2,-0.8047189562170501
//! ```

use crate::erp::ErpFamily;
use crate::error::{Error, Result};
use crate::trace::{run_guided, Address, Program};
use rand::RngCore;
use std::collections::HashMap;
use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub address: Address,
    pub family: ErpFamily,
    pub params: Vec<f64>,
    offset: usize,
}

impl Site {
    pub fn segment(&self) -> Range<usize> {
        self.offset..self.offset + self.params.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    index: HashMap<Address, usize>,
    sites: Vec<Site>,
    dim: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of registered addresses.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Total flattened dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sites in registration order.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn get(&self, address: &Address) -> Option<(&ErpFamily, &[f64])> {
        self.index
            .get(address)
            .map(|&i| (&self.sites[i].family, self.sites[i].params.as_slice()))
    }

    pub fn segment(&self, address: &Address) -> Option<Range<usize>> {
        self.index.get(address).map(|&i| self.sites[i].segment())
    }

    /// Return the stored parameters for `address`, registering it with
    /// parameters that reproduce `target_natural` if it is new. The natural
    /// parameters are ignored for known addresses.
    pub fn lookup_or_init(&mut self, address: &Address, family: &ErpFamily, target_natural: &[f64]) -> Result<&[f64]> {
        if let Some(&i) = self.index.get(address) {
            let site = &self.sites[i];
            if &site.family != family {
                return Err(Error::Structural {
                    address: address.clone(),
                    message: format!("registered as {}, reused as {family}", site.family),
                });
            }
            return Ok(&self.sites[i].params);
        }
        let params = family.init_from_target(target_natural)?;
        Ok(self.register(address.clone(), family.clone(), params))
    }

    fn register(&mut self, address: Address, family: ErpFamily, params: Vec<f64>) -> &[f64] {
        let offset = self.dim;
        self.dim += params.len();
        self.index.insert(address.clone(), self.sites.len());
        self.sites.push(Site {
            address,
            family,
            params,
            offset,
        });
        &self.sites.last().expect("just pushed").params
    }

    pub fn set_params(&mut self, address: &Address, params: &[f64]) -> Result<()> {
        let &i = self.index.get(address).ok_or_else(|| Error::Structural {
            address: address.clone(),
            message: "unknown address".into(),
        })?;
        let site = &mut self.sites[i];
        if params.len() != site.params.len() {
            return Err(Error::Dimension {
                expected: site.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Param(format!("non-finite parameters {params:?} for {address}")));
        }
        site.params.copy_from_slice(params);
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim);
        for site in &self.sites {
            flat.extend_from_slice(&site.params);
        }
        flat
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        self.check_len(flat)?;
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::Param("non-finite value in flattened parameters".into()));
        }
        for site in &mut self.sites {
            let range = site.segment();
            site.params.copy_from_slice(&flat[range]);
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `θ ← θ + stepsize · direction`, segment-wise in registration order.
    pub fn apply_step(&mut self, direction: &[f64], stepsize: f64) -> Result<()> {
        self.check_len(direction)?;
        let updated: Vec<f64> = self
            .flatten()
            .iter()
            .zip(direction)
            .map(|(p, d)| p + stepsize * d)
            .collect();
        if updated.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("step produced non-finite parameters".into()));
        }
        self.unflatten(&updated)
    }

    pub fn to_snapshot(&self) -> Result<String> {
        let mut out = String::from("# site_id,occurrence,family,params...\n");
        for site in &self.sites {
            let id = &site.address.site;
            if id.contains([',', '\n', '\r']) || id.starts_with('#') || id.is_empty() {
                return Err(Error::Param(format!("site id {id:?} cannot be written to a snapshot")));
            }
            out.push_str(&format!("{id},{},{}", site.address.occurrence, site.family));
            for p in &site.params {
                out.push_str(&format!(",{p:?}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 3 {
                return Err(parse_err("expected site_id,occurrence,family,params...".into()));
            }
            let occurrence: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad occurrence `{}`", fields[1])))?;
            let family: ErpFamily = fields[2].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let params = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("bad parameter `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            if params.len() != family.arity() || params.iter().any(|p| !p.is_finite()) {
                return Err(parse_err(format!("{family} needs {} finite parameters", family.arity())));
            }
            let address = Address::new(fields[0], occurrence);
            if store.index.contains_key(&address) {
                return Err(parse_err(format!("duplicate address {address}")));
            }
            store.register(address, family, params);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Set when `n_samples == 1`; `stderr` is then reported as zero.
    pub single_sample: bool,
}

/// Monte-Carlo estimate of the lower bound: the mean of `gain(trace, 0)` over
/// `n` guided traces.
pub fn elbo_estimate<P: Program + ?Sized>(
    program: &P,
    store: &mut ParamStore,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<ElboEstimate> {
    if n == 0 {
        return Err(Error::Param("elbo_estimate needs at least one sample".into()));
    }
    let gains = (0..n)
        .map(|_| run_guided(program, store, rng).map(|t| t.gain(0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&gains))
}

pub(crate) fn summarize(samples: &[f64]) -> ElboEstimate {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let stderr = if n == 1 {
        0.0
    } else if !mean.is_finite() {
        f64::INFINITY
    } else {
        let var = samples.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    ElboEstimate {
        mean,
        stderr,
        n_samples: n,
        single_sample: n == 1,
    }
}
