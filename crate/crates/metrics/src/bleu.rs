use std::collections::HashMap;

use crate::ngram::count_ngrams;
use crate::{check_aligned, MetricError};

/// Cumulative BLEU-1..BLEU-k.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScores {
    pub scores: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuScores {
    /// BLEU-`order` (1-based).
    pub fn get(&self, order: usize) -> f64 {
        self.scores[order - 1]
    }
}

/// Corpus-level BLEU with clipped n-gram precision.
///
/// The effective reference length of each candidate is the reference length
/// closest to it (shorter wins ties). The brevity penalty `exp(1 - r/c)` is
/// applied when the total candidate length `c` is below `r`.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_order: usize,
) -> Result<BleuScores, MetricError> {
    check_aligned(candidates, references)?;
    let mut correct = vec![0usize; max_order];
    let mut guessed = vec![0usize; max_order];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        let mut max_ref_counts: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            for (ng, c) in count_ngrams(r, max_order) {
                let slot = max_ref_counts.entry(ng).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        for (ng, c) in count_ngrams(cand, max_order) {
            let clip = max_ref_counts.get(ng).copied().unwrap_or(0);
            correct[ng.len() - 1] += c.min(clip);
        }
        for (k, g) in guessed.iter_mut().enumerate() {
            *g += (cand.len() + 1).saturating_sub(k + 1);
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
    }

    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };

    let mut scores = Vec::with_capacity(max_order);
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 0..max_order {
        if correct[k] == 0 || guessed[k] == 0 {
            zero = true;
        } else {
            log_sum += (correct[k] as f64 / guessed[k] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            brevity_penalty * (log_sum / (k + 1) as f64).exp()
        });
    }
    Ok(BleuScores {
        scores,
        brevity_penalty,
        candidate_length: cand_len,
        reference_length: ref_len,
    })
}
