use super::{data_lines, log_sum_exp, parse_error, parse_field, DATA_SEED, MAX_ENUMERATED_TRACES};
use crate::erp::{ErpFamily, ErpValue};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::trace::{run_target, Context, Program};
use statrs::function::gamma::ln_gamma;

/// Latent Dirichlet allocation with explicit per-word topic assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub n_topics: usize,
    pub vocab_size: usize,
    pub documents: Vec<Vec<usize>>,
    /// Dirichlet concentration over the vocabulary, length `vocab_size`.
    pub topic_prior: Vec<f64>,
    /// Dirichlet concentration over topics, length `n_topics`.
    pub doc_prior: Vec<f64>,
}

impl LdaModel {
    pub fn new(
        n_topics: usize,
        vocab_size: usize,
        documents: Vec<Vec<usize>>,
        topic_prior: Vec<f64>,
        doc_prior: Vec<f64>,
    ) -> Result<Self> {
        if n_topics == 0 || vocab_size == 0 {
            return Err(Error::Param("LDA needs at least one topic and one word type".into()));
        }
        if topic_prior.len() != vocab_size || doc_prior.len() != n_topics {
            return Err(Error::Param(format!(
                "concentrations have lengths {} and {}, expected {vocab_size} and {n_topics}",
                topic_prior.len(),
                doc_prior.len()
            )));
        }
        if let Some(c) = topic_prior.iter().chain(&doc_prior).find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::Param(format!("concentration {c} is not positive")));
        }
        if let Some(w) = documents.iter().flatten().find(|w| **w >= vocab_size) {
            return Err(Error::Param(format!("word index {w} outside vocabulary of {vocab_size}")));
        }
        Ok(LdaModel {
            n_topics,
            vocab_size,
            documents,
            topic_prior,
            doc_prior,
        })
    }

    pub fn n_words(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// Corpus drawn from the model with symmetric concentrations `alpha`
    /// (over topics) and `beta` (over words).
    pub fn synthetic(
        n_topics: usize,
        vocab_size: usize,
        n_documents: usize,
        words_per_document: usize,
        alpha: f64,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut model = LdaModel::new(
            n_topics,
            vocab_size,
            vec![Vec::new(); n_documents],
            vec![beta; vocab_size],
            vec![alpha; n_topics],
        )?;
        let generative = |ctx: &mut Context<'_>| {
            let topics = model.sample_topics(ctx)?;
            for _ in 0..n_documents {
                let theta = ctx.dirichlet("doc", &model.doc_prior)?;
                for _ in 0..words_per_document {
                    let z = ctx.categorical("assign", &theta)?;
                    ctx.categorical("word", &topics[z])?;
                }
            }
            Ok(())
        };
        let trace = run_target(&generative, &mut stream(seed, Domain::Data, 0, 0))?;
        let mut words = trace
            .entries
            .iter()
            .filter(|e| e.address.site == "word")
            .map(|e| e.value.as_index().expect("categorical draw"));
        model.documents = (0..n_documents)
            .map(|_| words.by_ref().take(words_per_document).collect())
            .collect();
        Ok(model)
    }

    /// Desk-scale benchmark: 5 topics, 50 word types, 10 documents of 40 words.
    pub fn desk_scale() -> Self {
        LdaModel::synthetic(5, 50, 10, 40, 0.5, 0.5, DATA_SEED).expect("valid desk-scale settings")
    }

    fn sample_topics(&self, ctx: &mut Context<'_>) -> Result<Vec<Vec<f64>>> {
        (0..self.n_topics)
            .map(|_| ctx.dirichlet("topic", &self.topic_prior))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let join = |xs: &[f64]| {
            if xs.windows(2).all(|w| w[0] == w[1]) {
                format!("{:?}", xs[0])
            } else {
                xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
            }
        };
        let mut out = String::from("# latent Dirichlet allocation corpus\n");
        out += &format!("lda {} {}\n", self.n_topics, self.vocab_size);
        out += &format!("alpha {}\n", join(&self.doc_prior));
        out += &format!("beta {}\n", join(&self.topic_prior));
        for doc in &self.documents {
            out += "doc";
            for w in doc {
                out += &format!(" {w}");
            }
            out += "\n";
        }
        out
    }

    /// Parse the LDA model file format:
    ///
    /// ```text
    /// lda <K> <V>
    /// alpha <a> | <a_1> .. <a_K>     (doc-topic concentration, scalar = symmetric)
    /// beta <b> | <b_1> .. <b_V>      (topic-word concentration)
    /// doc <w> <w> ...                (one line per document, word indices < V)
    /// ```
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = data_lines(text);
        let (line, header) = lines.next().ok_or_else(|| parse_error(0, "empty model file"))?;
        if header.len() != 3 || header[0] != "lda" {
            return Err(parse_error(line, "expected 'lda <topics> <vocabulary>'"));
        }
        let n_topics: usize = parse_field(line, header[1], "topic count")?;
        let vocab_size: usize = parse_field(line, header[2], "vocabulary size")?;
        let mut alpha = None;
        let mut beta = None;
        let mut documents = Vec::new();

        let concentration = |line: usize, fields: &[&str], n: usize| -> Result<Vec<f64>> {
            let values: Vec<f64> = fields.iter().map(|f| parse_field(line, f, "concentration")).collect::<Result<_>>()?;
            match values.len() {
                1 => Ok(vec![values[0]; n]),
                len if len == n => Ok(values),
                len => Err(parse_error(line, format!("expected 1 or {n} concentrations, got {len}"))),
            }
        };

        for (line, fields) in lines {
            match fields[0] {
                "alpha" if alpha.is_none() => alpha = Some(concentration(line, &fields[1..], n_topics)?),
                "beta" if beta.is_none() => beta = Some(concentration(line, &fields[1..], vocab_size)?),
                "alpha" | "beta" => return Err(parse_error(line, format!("duplicate '{}' line", fields[0]))),
                "doc" => {
                    let words = fields[1..]
                        .iter()
                        .map(|w| {
                            let w: usize = parse_field(line, w, "word index")?;
                            if w < vocab_size {
                                Ok(w)
                            } else {
                                Err(parse_error(line, format!("word {w} outside vocabulary")))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    documents.push(words);
                }
                other => return Err(parse_error(line, format!("unknown keyword '{other}'"))),
            }
        }
        LdaModel::new(
            n_topics,
            vocab_size,
            documents,
            beta.ok_or_else(|| parse_error(0, "missing 'beta' line"))?,
            alpha.ok_or_else(|| parse_error(0, "missing 'alpha' line"))?,
        )
    }
}

impl Program for LdaModel {
    fn run(&self, ctx: &mut Context<'_>) -> Result<()> {
        let topics = self.sample_topics(ctx)?;
        let word = ErpFamily::Categorical(self.vocab_size);
        for doc in &self.documents {
            let theta = ctx.dirichlet("doc", &self.doc_prior)?;
            for &w in doc {
                let z = ctx.categorical("assign", &theta)?;
                ctx.observe(&word, &topics[z], &ErpValue::Index(w))?;
            }
        }
        Ok(())
    }
}

/// Log-probability of a specific sequence under a Dirichlet-multinomial.
fn log_dirichlet_multinomial(concentration: &[f64], counts: &[usize]) -> f64 {
    let total: f64 = concentration.iter().sum();
    let n: usize = counts.iter().sum();
    let mut lp = ln_gamma(total) - ln_gamma(total + n as f64);
    for (a, c) in concentration.iter().zip(counts) {
        if *c > 0 {
            lp += ln_gamma(a + *c as f64) - ln_gamma(*a);
        }
    }
    lp
}

/// Exact `ln p(words)` with topics and document mixtures integrated out,
/// summing over every topic-assignment pattern.
pub fn lda_collapsed_log_evidence(model: &LdaModel) -> Result<f64> {
    let n = model.n_words();
    let k = model.n_topics;
    let patterns = (k as f64).powi(n as i32);
    if patterns > MAX_ENUMERATED_TRACES as f64 {
        return Err(Error::Enumeration(format!("{patterns} assignment patterns exceed the bound")));
    }
    let words: Vec<(usize, usize)> = model
        .documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| doc.iter().map(move |w| (d, *w)))
        .collect();
    let mut assignment = vec![0usize; n];
    let mut terms = Vec::with_capacity(patterns as usize);
    loop {
        let mut doc_counts = vec![vec![0usize; k]; model.documents.len()];
        let mut topic_counts = vec![vec![0usize; model.vocab_size]; k];
        for (&(d, w), &z) in words.iter().zip(&assignment) {
            doc_counts[d][z] += 1;
            topic_counts[z][w] += 1;
        }
        let lp = doc_counts
            .iter()
            .map(|c| log_dirichlet_multinomial(&model.doc_prior, c))
            .chain(topic_counts.iter().map(|c| log_dirichlet_multinomial(&model.topic_prior, c)))
            .sum::<f64>();
        terms.push(lp);

        let Some(pos) = assignment.iter().rposition(|z| z + 1 < k) else {
            break;
        };
        assignment[pos] += 1;
        for z in &mut assignment[pos + 1..] {
            *z = 0;
        }
    }
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn tiny() -> LdaModel {
        LdaModel::new(2, 3, vec![vec![0, 2]], vec![0.7, 1.0, 1.3], vec![0.5, 0.9]).unwrap()
    }

    #[test]
    fn single_topic_likelihood() {
        let model = LdaModel::new(1, 4, vec![vec![0, 3, 3], vec![1]], vec![1.0; 4], vec![1.0]).unwrap();
        let trace = run_target(&model, &mut stream(0, Domain::Test, 0, 0)).unwrap();
        let phi = trace.entry("topic", 0).unwrap().value.as_simplex().unwrap().to_vec();
        let expected = phi[0].ln() + 2.0 * phi[3].ln() + phi[1].ln();
        assert!((trace.log_lik - expected).abs() < 1e-12);
    }

    #[test]
    fn trace_structure_is_fixed() {
        let model = LdaModel::synthetic(3, 8, 4, 5, 0.5, 0.5, 1).unwrap();
        for i in 0..10 {
            let trace = run_target(&model, &mut stream(1, Domain::Test, 0, i)).unwrap();
            assert_eq!(trace.entries.len(), 3 + 4 + 20);
            let mut addresses: Vec<_> = trace.addresses().cloned().collect();
            addresses.sort_by(|a, b| (&a.site, a.occurrence).cmp(&(&b.site, b.occurrence)));
            addresses.dedup();
            assert_eq!(addresses.len(), 27);
        }
    }

    #[test]
    fn collapsed_evidence_single_word() {
        // One word: p(w) = Σ_z E[θ_z] E[φ_z,w].
        let model = LdaModel::new(2, 3, vec![vec![1]], vec![0.7, 1.0, 1.3], vec![0.5, 1.5]).unwrap();
        let expected = (0.25f64 / 3.0 + 0.75 / 3.0).ln();
        assert!((lda_collapsed_log_evidence(&model).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn collapsed_evidence_matches_prior_sampling() {
        let model = tiny();
        let exact = lda_collapsed_log_evidence(&model).unwrap().exp();
        let n = 200_000;
        let likes: Vec<f64> = (0..n)
            .map(|i| run_target(&model, &mut stream(2, Domain::Test, 0, i)).unwrap().log_lik.exp())
            .collect();
        let mean = likes.iter().sum::<f64>() / n as f64;
        let var = likes.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let stderr = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * stderr, "{mean} vs {exact} ± {stderr}");
    }

    #[test]
    fn text_round_trip() {
        let model = LdaModel::synthetic(3, 10, 4, 6, 0.5, 0.2, 9).unwrap();
        assert_eq!(LdaModel::from_text(&model.to_text()).unwrap(), model);
        let asym = tiny();
        assert_eq!(LdaModel::from_text(&asym.to_text()).unwrap(), asym);
    }

    #[test]
    fn malformed_text() {
        for bad in [
            "lda 2 3\nalpha 1 1 1\nbeta 1\n",
            "lda 2 3\nalpha 1\nbeta 1\ndoc 0 5\n",
            "lda 2 3\nalpha 1\nalpha 1\nbeta 1\n",
            "lda 2 3\nbeta 1\n",
            "lda 2 3\nalpha -1\nbeta 1\n",
            "qmr 2 3\n",
        ] {
            assert!(LdaModel::from_text(bad).is_err(), "{bad:?}");
        }
    }
}
