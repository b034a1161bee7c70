//! Caption-quality metrics and ranking AUC.
//!
//! BLEU, ROUGE-L and CIDEr-D follow the conventions of the COCO caption
//! evaluation toolkit (corpus-level BLEU with closest reference length,
//! ROUGE-L with β = 1.2, CIDEr-D with clipping, σ = 6 length penalty and
//! ×10 scaling). Inputs are pre-tokenized; each candidate may have one or
//! more references.
//!
//! BLEU is computed without the toolkit's `1e-15 / 1e-9` smoothing terms so
//! that analytic cases (identity, disjoint) are exact; the difference is
//! below 1e-8 whenever every n-gram order has at least one match.

mod auc;
mod bleu;
mod cider;
mod ngram;
mod rouge;

pub use auc::roc_auc;
pub use bleu::{bleu, BleuScores};
pub use cider::cider;
pub use rouge::{rouge_l, ROUGE_BETA};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("candidate {index} has no references")]
    NoReferences { index: usize },
    #[error("AUC undefined: need at least one positive and one negative label (got {positives} positives, {negatives} negatives)")]
    AucUndefined { positives: usize, negatives: usize },
    #[error("{0} scores are NaN")]
    NanScore(usize),
}

/// Splits on whitespace into owned tokens; convenience for callers that hold
/// detokenized text.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

pub(crate) fn check_aligned<C, R>(candidates: &[C], references: &[Vec<R>]) -> Result<(), MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(index) = references.iter().position(Vec::is_empty) {
        return Err(MetricError::NoReferences { index });
    }
    Ok(())
}
