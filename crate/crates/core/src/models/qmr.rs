use super::{data_lines, parse_error, parse_field, DATA_SEED};
use crate::erp::{ErpFamily, ErpValue};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::trace::{run_target, Context, Program};
use rand::Rng;

/// Bipartite noisy-or network: binary diseases cause binary findings.
#[derive(Debug, Clone, PartialEq)]
pub struct QmrModel {
    pub prior: Vec<f64>,
    pub leak: Vec<f64>,
    /// `weights[f][d]`: probability that disease `d` alone activates finding `f`.
    pub weights: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
    /// When false, only positive findings enter the likelihood.
    pub include_negative: bool,
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Param(format!("{what} {p} is not a probability")))
    }
}

impl QmrModel {
    pub fn new(prior: Vec<f64>, leak: Vec<f64>, weights: Vec<Vec<f64>>, observed: Vec<bool>) -> Result<Self> {
        let n_findings = leak.len();
        if weights.len() != n_findings || observed.len() != n_findings {
            return Err(Error::Param(format!(
                "{n_findings} leaks but {} weight rows and {} observations",
                weights.len(),
                observed.len()
            )));
        }
        for p in &prior {
            check_probability(*p, "disease prior")?;
        }
        for p in &leak {
            check_probability(*p, "leak")?;
        }
        for row in &weights {
            if row.len() != prior.len() {
                return Err(Error::Param(format!(
                    "weight row has {} entries for {} diseases",
                    row.len(),
                    prior.len()
                )));
            }
            for q in row {
                check_probability(*q, "weight")?;
            }
        }
        Ok(QmrModel {
            prior,
            leak,
            weights,
            observed,
            include_negative: true,
        })
    }

    pub fn n_diseases(&self) -> usize {
        self.prior.len()
    }

    pub fn n_findings(&self) -> usize {
        self.leak.len()
    }

    pub fn positive_findings(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    pub fn with_negative_findings(mut self, include: bool) -> Self {
        self.include_negative = include;
        self
    }

    /// `ln p(finding f = 0 | active diseases)`.
    pub fn log_no_fire(&self, finding: usize, active: &[usize]) -> f64 {
        let row = &self.weights[finding];
        active
            .iter()
            .fold((-self.leak[finding]).ln_1p(), |acc, &d| acc + (-row[d]).ln_1p())
    }

    /// Random network with findings sampled from the model itself.
    ///
    /// Each finding links to `min(4, D)` distinct diseases with weights in
    /// `[0.3, 0.9)`; priors lie in `[0.05, 0.15)` and leaks in `[0.01, 0.05)`.
    pub fn synthetic(n_diseases: usize, n_findings: usize, seed: u64) -> Self {
        let mut r = stream(seed, Domain::Data, 0, 0);
        let prior = (0..n_diseases).map(|_| r.random_range(0.05..0.15)).collect();
        let leak = (0..n_findings).map(|_| r.random_range(0.01..0.05)).collect();
        let links = n_diseases.min(4);
        let weights = (0..n_findings)
            .map(|_| {
                let mut row = vec![0.0; n_diseases];
                for d in rand::seq::index::sample(&mut r, n_diseases, links) {
                    row[d] = r.random_range(0.3..0.9);
                }
                row
            })
            .collect();
        let mut model = QmrModel::new(prior, leak, weights, vec![false; n_findings])
            .expect("generated probabilities are valid");

        let generative = |ctx: &mut Context<'_>| {
            let active = model.sample_diseases(ctx)?;
            for f in 0..model.n_findings() {
                ctx.flip("finding", -model.log_no_fire(f, &active).exp_m1())?;
            }
            Ok(())
        };
        let trace = run_target(&generative, &mut stream(seed, Domain::Data, 1, 0)).expect("generative run succeeds");
        let observed = (0..n_findings)
            .map(|f| trace.entry("finding", f).and_then(|e| e.value.as_bool()).expect("finding drawn"))
            .collect();
        model.observed = observed;
        model
    }

    /// Desk-scale benchmark: 20 diseases, 30 findings.
    pub fn desk_scale() -> Self {
        QmrModel::synthetic(20, 30, DATA_SEED)
    }

    fn sample_diseases(&self, ctx: &mut Context<'_>) -> Result<Vec<usize>> {
        let mut active = Vec::new();
        for (d, p) in self.prior.iter().enumerate() {
            if ctx.flip("disease", *p)? {
                active.push(d);
            }
        }
        Ok(active)
    }

    /// Serialize in the QMR model file format.
    pub fn to_text(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut out = String::from("# noisy-or network\n");
        out += &format!("qmr {} {}\n", self.n_diseases(), self.n_findings());
        out += &format!("prior {}\n", join(&self.prior));
        out += &format!("leak {}\n", join(&self.leak));
        for (f, row) in self.weights.iter().enumerate() {
            for (d, q) in row.iter().enumerate() {
                if *q != 0.0 {
                    out += &format!("weight {f} {d} {q:?}\n");
                }
            }
        }
        let findings: Vec<&str> = self.observed.iter().map(|o| if *o { "1" } else { "0" }).collect();
        out += &format!("findings {}\n", findings.join(" "));
        out
    }

    /// Parse the QMR model file format:
    ///
    /// ```text
    /// qmr <D> <F>
    /// prior <p_0> .. <p_{D-1}>
    /// leak <l_0> .. <l_{F-1}>
    /// weight <finding> <disease> <q>      (any number; absent links are 0)
    /// findings <0|1> x F
    /// ```
    ///
    /// `qmr` comes first; the other lines may appear in any order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = data_lines(text);
        let (line, header) = lines.next().ok_or_else(|| parse_error(0, "empty model file"))?;
        if header.len() != 3 || header[0] != "qmr" {
            return Err(parse_error(line, "expected 'qmr <diseases> <findings>'"));
        }
        let n_diseases: usize = parse_field(line, header[1], "disease count")?;
        let n_findings: usize = parse_field(line, header[2], "finding count")?;
        let mut prior = None;
        let mut leak = None;
        let mut observed = None;
        let mut weights = vec![vec![0.0; n_diseases]; n_findings];

        let floats = |line: usize, fields: &[&str], n: usize, what: &str| -> Result<Vec<f64>> {
            if fields.len() != n {
                return Err(parse_error(line, format!("expected {n} {what} values, got {}", fields.len())));
            }
            fields.iter().map(|f| parse_field(line, f, what)).collect()
        };

        for (line, fields) in lines {
            let once = |present: bool| {
                if present {
                    Err(parse_error(line, format!("duplicate '{}' line", fields[0])))
                } else {
                    Ok(())
                }
            };
            match fields[0] {
                "prior" => {
                    once(prior.is_some())?;
                    prior = Some(floats(line, &fields[1..], n_diseases, "prior")?);
                }
                "leak" => {
                    once(leak.is_some())?;
                    leak = Some(floats(line, &fields[1..], n_findings, "leak")?);
                }
                "findings" => {
                    once(observed.is_some())?;
                    if fields.len() != n_findings + 1 {
                        return Err(parse_error(line, format!("expected {n_findings} findings")));
                    }
                    observed = Some(
                        fields[1..]
                            .iter()
                            .map(|f| match *f {
                                "0" => Ok(false),
                                "1" => Ok(true),
                                other => Err(parse_error(line, format!("finding '{other}' is not 0 or 1"))),
                            })
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                "weight" => {
                    if fields.len() != 4 {
                        return Err(parse_error(line, "expected 'weight <finding> <disease> <q>'"));
                    }
                    let f: usize = parse_field(line, fields[1], "finding index")?;
                    let d: usize = parse_field(line, fields[2], "disease index")?;
                    if f >= n_findings || d >= n_diseases {
                        return Err(parse_error(line, format!("weight index ({f}, {d}) out of range")));
                    }
                    weights[f][d] = parse_field(line, fields[3], "weight")?;
                }
                other => return Err(parse_error(line, format!("unknown keyword '{other}'"))),
            }
        }
        let missing = |what: &str| parse_error(0, format!("missing '{what}' line"));
        let model = QmrModel::new(
            prior.ok_or_else(|| missing("prior"))?,
            leak.ok_or_else(|| missing("leak"))?,
            weights,
            observed.ok_or_else(|| missing("findings"))?,
        )?;
        Ok(model)
    }
}

impl Program for QmrModel {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let active = self.sample_diseases(ctx)?;
        for (f, &fired) in self.observed.iter().enumerate() {
            if !fired && !self.include_negative {
                continue;
            }
            let p = -self.log_no_fire(f, &active).exp_m1();
            ctx.observe(&ErpFamily::Bernoulli, &[p], &ErpValue::Index(fired as usize))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn silent_network_has_zero_likelihood() {
        let model = QmrModel::new(vec![0.5; 3], vec![0.0; 2], vec![vec![0.0; 3]; 2], vec![false; 2]).unwrap();
        for i in 0..20 {
            let trace = run_target(&model, &mut stream(0, Domain::Test, 0, i)).unwrap();
            assert_eq!(trace.log_lik, 0.0);
            assert_eq!(trace.entries.len(), 3);
        }
    }

    #[test]
    fn dropping_negative_findings() {
        let model = QmrModel::new(vec![1.0], vec![0.1, 0.2], vec![vec![0.5], vec![0.5]], vec![true, false]).unwrap();
        let both = run_target(&model, &mut stream(0, Domain::Test, 0, 0)).unwrap().log_lik;
        let expected_pos = -((0.9f64).ln() + 0.5f64.ln()).exp_m1();
        let expected_neg = (0.8f64).ln() + 0.5f64.ln();
        assert!((both - (expected_pos.ln() + expected_neg)).abs() < 1e-12);
        let model = model.with_negative_findings(false);
        let pos_only = run_target(&model, &mut stream(0, Domain::Test, 0, 0)).unwrap().log_lik;
        assert!((pos_only - expected_pos.ln()).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(QmrModel::new(vec![1.5], vec![0.0], vec![vec![0.0]], vec![false]).is_err());
        assert!(QmrModel::new(vec![0.5], vec![0.0], vec![vec![0.0, 0.0]], vec![false]).is_err());
        assert!(QmrModel::new(vec![0.5], vec![0.0], vec![vec![0.0]], vec![]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let model = QmrModel::synthetic(6, 9, 3);
        assert_eq!(QmrModel::from_text(&model.to_text()).unwrap(), model);
    }

    #[test]
    fn malformed_text() {
        let good = "qmr 1 1\nprior 0.5\nleak 0.1\nweight 0 0 0.4\nfindings 1\n";
        assert!(QmrModel::from_text(good).is_ok());
        for (bad, line) in [
            ("qmr 1 1\nprior 0.5 0.5\nleak 0.1\nfindings 1\n", 2),
            ("qmr 1 1\nprior 0.5\nleak 0.1\nweight 3 0 0.4\nfindings 1\n", 4),
            ("qmr 1 1\nprior 0.5\nleak x\nfindings 1\n", 3),
            ("qmr 1 1\nprior 0.5\nleak 0.1\nfindings 2\n", 4),
            ("qmr 1 1\nprior 0.5\nprior 0.5\n", 3),
            ("qmr 1 1\nprior 0.5\nleak 0.1\n", 0),
            ("lda 1 1\n", 1),
        ] {
            match QmrModel::from_text(bad) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{bad}"),
                other => panic!("expected parse error for {bad:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_sparse() {
        let a = QmrModel::synthetic(20, 30, 7);
        assert_eq!(a, QmrModel::synthetic(20, 30, 7));
        for row in &a.weights {
            assert_eq!(row.iter().filter(|q| **q > 0.0).count(), 4);
        }
    }
}
