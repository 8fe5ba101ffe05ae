//! Program execution and trace recording.
//!
//! A model is ordinary Rust code written against [`Context`]. The same code
//! runs in three modes:
//!
//! * **target**: every ERP draws from the natural parameters the program
//!   passes, so the trace is a draw from the prior;
//! * **guided**: every ERP draws from the variational parameters stored at
//!   its address (initialized from the target on first encounter), while the
//!   program's own parameters are only used to score the draw;
//! * **replay**: ERPs take prescribed outcome indices, which is how
//!   [`crate::models::enumerate`] walks every trace of a discrete program.
//!
//! Control flow is shared by all three, so a branch taken in the program
//! decides which addresses exist, but in guided mode the parameters a site
//! would have received from earlier draws are ignored.

use crate::erp::{ErpFamily, ErpValue};
use crate::error::{Error, Result};
use crate::meanfield::ParamStore;
use rand::RngCore;
use std::collections::HashMap;
use std::fmt;

/// Identity of one ERP draw: the author-supplied site label plus how many
/// times that label has already been reached in the current execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address {
    pub site: String,
    pub occurrence: usize,
}

impl Address {
    pub fn new(site: impl Into<String>, occurrence: usize) -> Self {
        Address {
            site: site.into(),
            occurrence,
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.site, self.occurrence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub address: Address,
    pub family: ErpFamily,
    pub value: ErpValue,
    /// Natural parameters the program passed at this draw.
    pub target_params: Vec<f64>,
    /// `log p(x_t | h_t)` under the program's own parameters.
    pub log_p_target: f64,
    /// `log q(x_t)` under the parameters the value was drawn from.
    pub log_q: f64,
    /// Gradient of `log_q` with respect to the unconstrained parameters.
    pub score: Vec<f64>,
    /// `log_p_target - log_q`.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    /// Accumulated `log p(y | x)` from `observe` and `factor`.
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_guide: f64,
}

impl Trace {
    pub fn reward_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.reward).sum()
    }

    /// `Σ R_t + log p(y|x) + k`.
    pub fn gain(&self, k: f64) -> f64 {
        self.reward_sum() + self.log_lik + k
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.entries.iter().map(|e| &e.address)
    }

    pub fn entry(&self, site: &str, occurrence: usize) -> Option<&TraceEntry> {
        self.entries
            .iter()
            .find(|e| e.address.site == site && e.address.occurrence == occurrence)
    }
}

pub fn gain(trace: &Trace, k: f64) -> f64 {
    trace.gain(k)
}

/// A probabilistic program. Any `Fn(&mut Context) -> Result<()>` qualifies.
pub trait Program: Sync {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()>;
}

impl<F> Program for F
where
    F: Fn(&mut Context<'_>) -> Result<()> + Sync,
{
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        self(ctx)
    }
}

/// Outcome indices prescribed to a replayed execution, and what it saw.
pub(crate) struct Replay<'a> {
    pub choices: &'a [usize],
    /// Outcome index taken at each ERP, in order.
    pub taken: Vec<usize>,
    /// Outcome count of each ERP, in order.
    pub sizes: Vec<usize>,
    pub store: Option<&'a ParamStore>,
}

enum Mode<'a> {
    Target,
    Guided(&'a mut ParamStore),
    Replay(Replay<'a>),
}

/// The interface model code calls.
pub struct Context<'a> {
    mode: Mode<'a>,
    rng: Option<&'a mut dyn RngCore>,
    counters: HashMap<String, usize>,
    trace: Trace,
}

impl<'a> Context<'a> {
    fn new(mode: Mode<'a>, rng: Option<&'a mut dyn RngCore>) -> Self {
        Context {
            mode,
            rng,
            counters: HashMap::new(),
            trace: Trace::default(),
        }
    }

    fn next_address(&mut self, site: &str) -> Address {
        let occurrence = match self.counters.get_mut(site) {
            Some(counter) => counter,
            None => self.counters.entry(site.to_owned()).or_insert(0),
        };
        let address = Address::new(site, *occurrence);
        *occurrence += 1;
        address
    }

    /// Draw from an ERP at `site`. `natural` are the parameters the target
    /// program would use here.
    pub fn sample(&mut self, site: &str, family: ErpFamily, natural: &[f64]) -> Result<ErpValue> {
        let address = self.next_address(site);
        // Target densities go through the same unconstrained route as the
        // guide, so a guide equal to the target gives rewards of exactly zero.
        let target = family.init_from_target(natural)?;

        let (value, log_q, score) = match &mut self.mode {
            Mode::Target => {
                let value = family.sample(&target, self.rng.as_deref_mut().expect("target mode has a stream"))?;
                let score = family.grad_log_pdf(&target, &value)?;
                (value, None, score)
            }
            Mode::Guided(store) => {
                let params = store.lookup_or_init(&address, &family, natural)?;
                let rng = self.rng.as_deref_mut().expect("guided mode has a stream");
                let value = family.sample(params, rng)?;
                let log_q = family.log_pdf(params, &value)?;
                let score = family.grad_log_pdf(params, &value)?;
                (value, Some(log_q), score)
            }
            Mode::Replay(replay) => {
                let size = family.outcomes().ok_or_else(|| {
                    Error::Enumeration(format!("{address} draws from continuous family {family}"))
                })?;
                let position = replay.taken.len();
                let index = replay.choices.get(position).copied().unwrap_or(0);
                replay.taken.push(index);
                replay.sizes.push(size);
                let value = family.outcome(index).ok_or_else(|| {
                    Error::Enumeration(format!("replayed outcome {index} out of range at {address}"))
                })?;
                match replay.store {
                    Some(store) => {
                        let (stored_family, params) = store.get(&address).ok_or_else(|| Error::Structural {
                            address: address.clone(),
                            message: "address not registered in store".into(),
                        })?;
                        if stored_family != &family {
                            return Err(Error::Structural {
                                address,
                                message: format!("stored family {stored_family} differs from {family}"),
                            });
                        }
                        let log_q = family.log_pdf(params, &value)?;
                        let score = family.grad_log_pdf(params, &value)?;
                        (value, Some(log_q), score)
                    }
                    None => {
                        let score = family.grad_log_pdf(&target, &value)?;
                        (value, None, score)
                    }
                }
            }
        };

        let log_p_target = family.log_pdf(&target, &value)?;
        let log_q = log_q.unwrap_or(log_p_target);
        let reward = log_p_target - log_q;
        self.trace.log_prior += log_p_target;
        self.trace.log_guide += log_q;
        self.trace.entries.push(TraceEntry {
            address,
            family,
            value: value.clone(),
            target_params: natural.to_vec(),
            log_p_target,
            log_q,
            score,
            reward,
        });
        Ok(value)
    }

    /// Condition on `value` having been drawn from a fixed ERP.
    pub fn observe(&mut self, family: &ErpFamily, natural: &[f64], value: &ErpValue) -> Result<()> {
        let lp = family.log_pdf_natural(natural, value)?;
        self.trace.log_lik += lp;
        Ok(())
    }

    /// Add an arbitrary log-weight to the likelihood.
    pub fn factor(&mut self, log_weight: f64) {
        self.trace.log_lik += log_weight;
    }

    /// Draws consumed so far in this execution.
    pub fn draws(&self) -> usize {
        self.trace.entries.len()
    }

    pub fn normal(&mut self, site: &str, mean: f64, std: f64) -> Result<f64> {
        let v = self.sample(site, ErpFamily::Normal, &[mean, std])?;
        Ok(v.as_real().expect("normal yields reals"))
    }

    pub fn flip(&mut self, site: &str, p: f64) -> Result<bool> {
        let v = self.sample(site, ErpFamily::Bernoulli, &[p])?;
        Ok(v.as_bool().expect("bernoulli yields 0/1"))
    }

    pub fn categorical(&mut self, site: &str, probs: &[f64]) -> Result<usize> {
        let v = self.sample(site, ErpFamily::Categorical(probs.len()), probs)?;
        Ok(v.as_index().expect("categorical yields indices"))
    }

    pub fn beta(&mut self, site: &str, a: f64, b: f64) -> Result<f64> {
        let v = self.sample(site, ErpFamily::Beta, &[a, b])?;
        Ok(v.as_real().expect("beta yields reals"))
    }

    pub fn gamma(&mut self, site: &str, shape: f64, rate: f64) -> Result<f64> {
        let v = self.sample(site, ErpFamily::Gamma, &[shape, rate])?;
        Ok(v.as_real().expect("gamma yields reals"))
    }

    pub fn dirichlet(&mut self, site: &str, alphas: &[f64]) -> Result<Vec<f64>> {
        match self.sample(site, ErpFamily::Dirichlet(alphas.len()), alphas)? {
            ErpValue::Simplex(xs) => Ok(xs),
            _ => unreachable!("dirichlet yields simplex values"),
        }
    }

    pub fn uniform(&mut self, site: &str, low: f64, high: f64) -> Result<f64> {
        let v = self.sample(site, ErpFamily::Uniform { low, high }, &[])?;
        Ok(v.as_real().expect("uniform yields reals"))
    }

    fn finish<P: Program + ?Sized>(mut self, program: &P) -> Result<(Trace, Mode<'a>)> {
        match program.run(&mut self) {
            Ok(()) => Ok((self.trace, self.mode)),
            Err(Error::Program { address: None, message }) => Err(Error::Program {
                address: self.trace.entries.last().map(|e| e.address.clone()),
                message,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Run the program forward under its own parameters.
pub fn run_target<P: Program + ?Sized>(program: &P, rng: &mut dyn RngCore) -> Result<Trace> {
    Context::new(Mode::Target, Some(rng)).finish(program).map(|(t, _)| t)
}

/// Run the variational program defined by `store`, registering any address
/// seen for the first time.
pub fn run_guided<P: Program + ?Sized>(program: &P, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Trace> {
    Context::new(Mode::Guided(store), Some(rng))
        .finish(program)
        .map(|(t, _)| t)
}

/// Run with prescribed discrete outcomes; ERPs beyond `choices` take outcome 0.
pub(crate) fn run_replay<P: Program + ?Sized>(
    program: &P,
    choices: &[usize],
    store: Option<&ParamStore>,
) -> Result<(Trace, Vec<usize>, Vec<usize>)> {
    let replay = Replay {
        choices,
        taken: Vec::new(),
        sizes: Vec::new(),
        store,
    };
    let (trace, mode) = Context::new(Mode::Replay(replay), None).finish(program)?;
    match mode {
        Mode::Replay(r) => Ok((trace, r.taken, r.sizes)),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;

    fn two_normals(ctx: &mut Context<'_>) -> Result<()> {
        let a = ctx.normal("a", 0.0, 1.0)?;
        let _b = ctx.normal("b", a, 2.0)?;
        Ok(())
    }

    #[test]
    fn factor_only_program() {
        let program = |ctx: &mut Context<'_>| {
            ctx.factor(-1.5);
            Ok(())
        };
        let trace = run_target(&program, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        assert!(trace.entries.is_empty());
        assert_eq!(trace.log_lik, -1.5);
        assert_eq!(trace.log_prior, 0.0);

        let mut store = ParamStore::new();
        let trace = run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        for k in [-3.0, 0.0, 2.5] {
            assert_eq!(trace.gain(k), -1.5 + k);
        }
    }

    #[test]
    fn gain_examples() {
        let trace = Trace {
            log_lik: -2.0,
            ..Trace::default()
        };
        assert_eq!(gain(&trace, 0.0), -2.0);
        assert_eq!(gain(&Trace::default(), 5.0), 5.0);
    }

    #[test]
    fn target_entries_have_zero_reward() {
        let trace = run_target(&two_normals, &mut stream(1, Domain::Test, 0, 0)).unwrap();
        assert_eq!(trace.entries.len(), 2);
        for e in &trace.entries {
            assert_eq!(e.reward, 0.0);
            assert_eq!(e.log_q, e.log_p_target);
            assert_eq!(e.score.len(), e.family.arity());
        }
    }

    #[test]
    fn two_zero_draws_have_closed_form_prior() {
        let program = |ctx: &mut Context<'_>| {
            ctx.sample("z", ErpFamily::Normal, &[0.0, 1.0])?;
            ctx.sample("z", ErpFamily::Normal, &[0.0, 1.0])?;
            Ok(())
        };
        let mut store = ParamStore::new();
        run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        // Collapse both guide sites onto zero (std e^-40) so the draws sit at the mode.
        store.set_params(&Address::new("z", 0), &[0.0, -40.0]).unwrap();
        store.set_params(&Address::new("z", 1), &[0.0, -40.0]).unwrap();
        let trace = run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 1)).unwrap();
        for e in &trace.entries {
            assert!(e.value.as_real().unwrap().abs() < 1e-15);
        }
        assert!((trace.log_prior - 2.0 * -0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((trace.log_prior - 2.0 * -0.91894).abs() < 1e-4);
    }

    #[test]
    fn store_equal_to_target_gives_zero_rewards() {
        let program = |ctx: &mut Context<'_>| {
            ctx.normal("a", 1.0, 2.0)?;
            ctx.flip("b", 0.3)?;
            ctx.dirichlet("c", &[1.0, 2.0, 0.5])?;
            ctx.uniform("d", -1.0, 1.0)?;
            Ok(())
        };
        let mut store = ParamStore::new();
        for i in 0..20 {
            let trace = run_guided(&program, &mut store, &mut stream(2, Domain::Test, 0, i)).unwrap();
            for e in &trace.entries {
                assert!(e.reward.abs() < 1e-10, "{}: {}", e.address, e.reward);
            }
        }
    }

    #[test]
    fn occurrence_counters_disambiguate_loops() {
        let program = |ctx: &mut Context<'_>| {
            for _ in 0..3 {
                ctx.flip("coin", 0.5)?;
            }
            ctx.flip("other", 0.5)?;
            Ok(())
        };
        let trace = run_target(&program, &mut stream(3, Domain::Test, 0, 0)).unwrap();
        let addresses: Vec<String> = trace.addresses().map(|a| a.to_string()).collect();
        assert_eq!(addresses, ["coin#0", "coin#1", "coin#2", "other#0"]);
    }

    #[test]
    fn family_reuse_is_structural_error() {
        let flip_first = std::sync::atomic::AtomicBool::new(true);
        let program = |ctx: &mut Context<'_>| {
            if flip_first.swap(false, std::sync::atomic::Ordering::SeqCst) {
                ctx.flip("x", 0.5)?;
            } else {
                ctx.normal("x", 0.0, 1.0)?;
            }
            Ok(())
        };
        let mut store = ParamStore::new();
        run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        let err = run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 1)).unwrap_err();
        assert!(matches!(err, Error::Structural { .. }), "{err}");
    }

    #[test]
    fn program_errors_carry_last_address() {
        let program = |ctx: &mut Context<'_>| {
            ctx.flip("before", 0.5)?;
            Err(Error::program("boom"))
        };
        let err = run_target(&program, &mut stream(0, Domain::Test, 0, 0)).unwrap_err();
        assert_eq!(
            err,
            Error::Program {
                address: Some(Address::new("before", 0)),
                message: "boom".into()
            }
        );
    }

    #[test]
    fn observe_never_registers_parameters() {
        let program = |ctx: &mut Context<'_>| {
            ctx.observe(&ErpFamily::Normal, &[0.0, 1.0], &ErpValue::Real(0.0))?;
            ctx.factor(0.25);
            Ok(())
        };
        let mut store = ParamStore::new();
        let trace = run_guided(&program, &mut store, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        assert!(store.is_empty());
        assert!((trace.log_lik - (0.25 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn guided_traces_are_deterministic_and_consistent(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let program = move |ctx: &mut Context<'_>| {
                let a = ctx.normal("a", shift, 1.0)?;
                if a > 0.0 {
                    ctx.gamma("g", 1.0 + a, 2.0)?;
                } else {
                    ctx.categorical("c", &[0.2, 0.3, 0.5])?;
                }
                ctx.beta("b", 2.0, 1.0 + a.abs())?;
                ctx.factor(-a * a);
                Ok(())
            };
            let mut store = ParamStore::new();
            run_guided(&program, &mut store, &mut stream(seed, Domain::Test, 0, 0)).unwrap();
            let mut store2 = store.clone();
            let t1 = run_guided(&program, &mut store, &mut stream(seed, Domain::Test, 1, 0)).unwrap();
            let t2 = run_guided(&program, &mut store2, &mut stream(seed, Domain::Test, 1, 0)).unwrap();
            prop_assert_eq!(&t1, &t2);

            let rewards = t1.reward_sum();
            prop_assert!((t1.log_prior - t1.log_guide - rewards).abs() < 1e-10);
            prop_assert!((t1.gain(0.7) - (t1.log_prior - t1.log_guide + t1.log_lik + 0.7)).abs() < 1e-10);

            // Summing per-entry densities through the unconstrained route recovers the prior.
            let recomputed: f64 = t1.entries.iter().map(|e| {
                let params = e.family.init_from_target(&e.target_params).unwrap();
                e.family.log_pdf(&params, &e.value).unwrap()
            }).sum();
            prop_assert!((recomputed - t1.log_prior).abs() < 1e-10);
        }
    }
}
