use super::log_sum_exp;
use crate::error::{Error, Result};
use crate::gradient::per_trace_score;
use crate::meanfield::ParamStore;
use crate::trace::{run_replay, Address, Program, Trace};
use nalgebra::DMatrix;

/// Upper bound on the number of traces an enumeration may visit.
pub const MAX_ENUMERATED_TRACES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrace {
    /// Outcome index taken at each ERP, in execution order.
    pub choices: Vec<usize>,
    /// `ln p(x, y)`.
    pub log_joint: f64,
    /// `ln q(x)` under the store.
    pub log_q: f64,
}

/// Exact quantities of a finite-discrete program.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub traces: Vec<EnumeratedTrace>,
    /// `ln p(y) = ln Σ_x p(y | x) p(x)`.
    pub log_evidence: f64,
    /// `p(x | y)` for each trace, in the order of `traces`.
    pub posterior: Vec<f64>,
    /// `L(θ) = Σ_x q(x) (ln p(x, y) − ln q(x))`.
    pub elbo: f64,
    /// `∇L = Σ_x q(x) ψ(x) (ln p(x, y) − ln q(x))`, in store layout.
    pub gradient: Vec<f64>,
    /// `Σ_x q(x) ψ(x) ψ(x)ᵀ`.
    pub fisher: DMatrix<f64>,
}

impl Enumeration {
    /// Posterior probability of each outcome at `address`, replaying every
    /// trace of `program`. Traces that never reach the address are excluded,
    /// so the result sums to `p(reached | y)`.
    pub fn posterior_marginal<P: Program + ?Sized>(
        &self,
        program: &P,
        address: &Address,
        outcomes: usize,
    ) -> Result<Vec<f64>> {
        let mut marginal = vec![0.0; outcomes];
        for (t, w) in self.traces.iter().zip(&self.posterior) {
            let (trace, _, _) = run_replay(program, &t.choices, None)?;
            if let Some(i) = trace
                .entries
                .iter()
                .find(|e| &e.address == address)
                .and_then(|e| e.value.as_index())
            {
                marginal[i] += w;
            }
        }
        Ok(marginal)
    }
}

/// Visit every trace by odometer search over the outcome indices.
fn visit<P, F>(program: &P, store: Option<&ParamStore>, bound: usize, mut f: F) -> Result<()>
where
    P: Program + ?Sized,
    F: FnMut(&[usize], Trace) -> Result<()>,
{
    let mut choices = Vec::new();
    for _ in 0..bound {
        let (trace, taken, sizes) = run_replay(program, &choices, store)?;
        f(&taken, trace)?;
        match (0..taken.len()).rev().find(|&i| taken[i] + 1 < sizes[i]) {
            Some(i) => {
                choices.clear();
                choices.extend_from_slice(&taken[..i]);
                choices.push(taken[i] + 1);
            }
            None => return Ok(()),
        }
    }
    Err(Error::Enumeration(format!(
        "program has more than {bound} traces"
    )))
}

/// Register every reachable address in `store`, initialized from the target
/// parameters of the first trace (in enumeration order) that reaches it.
pub fn register_all<P: Program + ?Sized>(program: &P, store: &mut ParamStore) -> Result<()> {
    register_within(program, store, MAX_ENUMERATED_TRACES)
}

fn register_within<P: Program + ?Sized>(program: &P, store: &mut ParamStore, bound: usize) -> Result<()> {
    visit(program, None, bound, |_, trace| {
        for e in &trace.entries {
            store.lookup_or_init(&e.address, &e.family, &e.target_params)?;
        }
        Ok(())
    })
}

/// Exhaustively enumerate a finite-discrete program under the variational
/// distribution in `store`. Addresses the store has not seen are registered first.
pub fn enumerate_posterior<P: Program + ?Sized>(program: &P, store: &mut ParamStore) -> Result<Enumeration> {
    enumerate_within(program, store, MAX_ENUMERATED_TRACES)
}

/// [`enumerate_posterior`] with a custom trace bound.
pub fn enumerate_within<P: Program + ?Sized>(program: &P, store: &mut ParamStore, bound: usize) -> Result<Enumeration> {
    register_within(program, store, bound)?;
    let store: &ParamStore = store;
    let d = store.dim();
    let mut traces = Vec::new();
    let mut elbo = 0.0;
    let mut gradient = vec![0.0; d];
    let mut fisher = DMatrix::zeros(d, d);
    visit(program, Some(store), bound, |choices, trace| {
        let log_q = trace.log_guide;
        let q = log_q.exp();
        if q > 0.0 {
            let gain = trace.gain(0.0);
            elbo += q * gain;
            let psi = per_trace_score(&trace, store)?;
            for i in 0..d {
                if psi[i] == 0.0 {
                    continue;
                }
                gradient[i] += q * psi[i] * gain;
                for j in 0..d {
                    fisher[(i, j)] += q * psi[i] * psi[j];
                }
            }
        }
        traces.push(EnumeratedTrace {
            choices: choices.to_vec(),
            log_joint: trace.log_prior + trace.log_lik,
            log_q,
        });
        Ok(())
    })?;
    let joints: Vec<f64> = traces.iter().map(|t| t.log_joint).collect();
    let log_evidence = log_sum_exp(&joints);
    let posterior = joints.iter().map(|lj| (lj - log_evidence).exp()).collect();
    Ok(Enumeration {
        traces,
        log_evidence,
        posterior,
        elbo,
        gradient,
        fisher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{OneCoin, QmrModel, TwoCoin};
    use crate::trace::Context;

    #[test]
    fn deterministic_program_has_one_trace() {
        let program = |ctx: &mut Context<'_>| {
            ctx.factor(-0.75);
            Ok(())
        };
        let e = enumerate_posterior(&program, &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 1);
        assert_eq!(e.log_evidence, -0.75);
        assert_eq!(e.posterior, vec![1.0]);
    }

    #[test]
    fn one_coin_posterior() {
        let e = enumerate_posterior(&OneCoin::default(), &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 2);
        assert!((e.log_evidence - 0.5f64.ln()).abs() < 1e-15);
        let m = e.posterior_marginal(&OneCoin::default(), &Address::new("x", 0), 2).unwrap();
        assert!((m[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_coin_evidence() {
        let model = TwoCoin::default();
        let e = enumerate_posterior(&model, &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 4);
        let py = 0.7 * 0.75 * 0.1 + 0.7 * 0.25 * 0.5 + 0.3 * 0.2 * 0.5 + 0.3 * 0.8 * 0.9;
        assert!((e.log_evidence.exp() - py).abs() < 1e-14);
        assert!((e.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn branching_program_enumerates_each_path() {
        let program = |ctx: &mut Context<'_>| {
            if ctx.flip("a", 0.5)? {
                ctx.categorical("b", &[0.2, 0.3, 0.5])?;
            }
            Ok(())
        };
        let e = enumerate_posterior(&program, &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 4);
        let choices: Vec<_> = e.traces.iter().map(|t| t.choices.clone()).collect();
        assert_eq!(choices, vec![vec![0], vec![1, 0], vec![1, 1], vec![1, 2]]);
        assert!((e.log_evidence).abs() < 1e-15);
    }

    #[test]
    fn continuous_draws_are_refused() {
        let program = |ctx: &mut Context<'_>| ctx.normal("x", 0.0, 1.0).map(|_| ());
        assert!(matches!(
            enumerate_posterior(&program, &mut ParamStore::new()),
            Err(Error::Enumeration(_))
        ));
    }

    #[test]
    fn trace_bound_is_enforced() {
        let program = |ctx: &mut Context<'_>| {
            for _ in 0..7 {
                ctx.flip("x", 0.5)?;
            }
            Ok(())
        };
        assert!(matches!(
            enumerate_within(&program, &mut ParamStore::new(), 127),
            Err(Error::Enumeration(_))
        ));
        assert_eq!(enumerate_within(&program, &mut ParamStore::new(), 128).unwrap().traces.len(), 128);
        assert_eq!(MAX_ENUMERATED_TRACES, 1_000_000);
    }

    #[test]
    fn qmr_two_disease_example() {
        let model = QmrModel::new(vec![0.5, 0.5], vec![0.0], vec![vec![0.8, 0.6]], vec![true]).unwrap();
        let e = enumerate_posterior(&model, &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 4);
        assert!((e.log_evidence.exp() - 0.58).abs() < 1e-14);
        // p(d0 = 1 | y) = 0.25 (0.8 + 0.92) / 0.58
        let m = e.posterior_marginal(&model, &Address::new("disease", 0), 2).unwrap();
        assert!((m[1] - 0.25 * 1.72 / 0.58).abs() < 1e-14);
        let m = e.posterior_marginal(&model, &Address::new("disease", 1), 2).unwrap();
        assert!((m[1] - 0.25 * 1.52 / 0.58).abs() < 1e-14);
    }

    #[test]
    fn qmr_five_diseases_enumerate_in_32_states() {
        let e = enumerate_posterior(&QmrModel::synthetic(5, 6, 1), &mut ParamStore::new()).unwrap();
        assert_eq!(e.traces.len(), 32);
    }

    #[test]
    fn prior_guide_elbo_is_bounded_by_evidence() {
        let e = enumerate_posterior(&TwoCoin::default(), &mut ParamStore::new()).unwrap();
        assert!(e.elbo <= e.log_evidence);
    }

    #[test]
    fn gradient_matches_finite_differences_of_exact_elbo() {
        let model = TwoCoin::default();
        let mut store = ParamStore::new();
        register_all(&model, &mut store).unwrap();
        let mut flat = store.flatten();
        for (i, v) in flat.iter_mut().enumerate() {
            *v += 0.3 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        store.unflatten(&flat).unwrap();
        let exact = enumerate_posterior(&model, &mut store).unwrap();
        let h = 1e-5;
        for i in 0..flat.len() {
            let shifted = |delta: f64| {
                let mut perturbed = flat.clone();
                perturbed[i] += delta;
                let mut s = store.clone();
                s.unflatten(&perturbed).unwrap();
                enumerate_posterior(&model, &mut s).unwrap().elbo
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - exact.gradient[i]).abs() < 1e-6, "component {i}: {fd} vs {}", exact.gradient[i]);
        }
    }
}
