use std::collections::HashMap;

pub(crate) type NGram<'a> = &'a [String];

/// Counts every n-gram of order `1..=max_order`.
pub(crate) fn count_ngrams(tokens: &[String], max_order: usize) -> HashMap<NGram<'_>, usize> {
    let mut counts = HashMap::new();
    for n in 1..=max_order {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}
