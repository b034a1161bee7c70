use crate::{check_aligned, MetricError};

/// Recall weight of the toolkit's ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn pair_score(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut best_p = 0.0f64;
    let mut best_r = 0.0f64;
    for r in refs.iter().filter(|r| !r.is_empty()) {
        let lcs = lcs_len(r, cand) as f64;
        best_p = best_p.max(lcs / cand.len() as f64);
        best_r = best_r.max(lcs / r.len() as f64);
    }
    if best_p == 0.0 || best_r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p)
}

/// Corpus mean of the per-pair LCS F-measure (precision and recall are
/// maximized independently over the references).
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_aligned(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| pair_score(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}
