use std::collections::HashMap;

use crate::ngram::{count_ngrams, NGram};
use crate::{check_aligned, MetricError};

const MAX_ORDER: usize = 4;
const SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vec: [HashMap<NGram<'a>, f64>; MAX_ORDER],
    norm: [f64; MAX_ORDER],
    // The toolkit measures length in bigrams; kept for score parity.
    length: f64,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<NGram<'a>, f64>, log_docs: f64) -> TfIdf<'a> {
    let mut vec: [HashMap<NGram<'a>, f64>; MAX_ORDER] = Default::default();
    let mut norm = [0.0; MAX_ORDER];
    let mut length = 0.0;
    for (ng, tf) in count_ngrams(tokens, MAX_ORDER) {
        let n = ng.len() - 1;
        let d = df.get(ng).copied().unwrap_or(0.0).max(1.0).ln();
        let v = tf as f64 * (log_docs - d);
        vec[n].insert(ng, v);
        norm[n] += v * v;
        if n == 1 {
            length += tf as f64;
        }
    }
    for x in &mut norm {
        *x = x.sqrt();
    }
    TfIdf { vec, norm, length }
}

fn similarity(hyp: &TfIdf<'_>, reference: &TfIdf<'_>) -> [f64; MAX_ORDER] {
    let delta = hyp.length - reference.length;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    let mut val = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        for (ng, &h) in &hyp.vec[n] {
            let r = reference.vec[n].get(ng).copied().unwrap_or(0.0);
            val[n] += h.min(r) * r;
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            val[n] /= hyp.norm[n] * reference.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// Corpus CIDEr-D: document frequencies come from the references only
/// (one count per image), `log` terms are floored at zero, and the score is
/// the mean over images of `10 × mean_n(mean_refs(sim_n))`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_aligned(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut df: HashMap<NGram<'_>, f64> = HashMap::new();
    for refs in references {
        let mut seen: Vec<NGram<'_>> = refs
            .iter()
            .flat_map(|r| count_ngrams(r, MAX_ORDER).into_keys())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for ng in seen {
            *df.entry(ng).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (candidates.len() as f64).ln();

    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let hyp = tfidf(cand, &df, log_docs);
        let mut acc = [0.0; MAX_ORDER];
        for r in refs {
            let rv = tfidf(r, &df, log_docs);
            for (a, s) in acc.iter_mut().zip(similarity(&hyp, &rv)) {
                *a += s;
            }
        }
        let mean: f64 = acc.iter().sum::<f64>() / MAX_ORDER as f64;
        total += mean / refs.len() as f64 * 10.0;
    }
    Ok(total / candidates.len() as f64)
}
