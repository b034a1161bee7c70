//! Mean distilling gate values grouped by sentence class.

use serde::Serialize;

/// Words marking a sentence as describing normal findings.
pub const NORMALITY_WORDS: [&str; 4] = ["no", "normal", "clear", "stable"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceClass {
    Normality,
    Abnormality,
}

/// One report's tokens with the gates of the step that produced each token.
#[derive(Debug, Clone)]
pub struct GateSequence {
    pub tokens: Vec<String>,
    pub gates: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub class: SentenceClass,
    /// Means over every token in sentences of this class.
    pub token_lambda1: f64,
    pub token_lambda2: f64,
    pub tokens: usize,
    /// Means over per-sentence averages.
    pub sentence_lambda1: f64,
    pub sentence_lambda2: f64,
    pub sentences: usize,
}

pub fn classify(sentence: &[String]) -> SentenceClass {
    if sentence.iter().any(|w| NORMALITY_WORDS.contains(&w.as_str())) {
        SentenceClass::Normality
    } else {
        SentenceClass::Abnormality
    }
}

/// Splits tokens into sentences, each ending at (and including) a period.
pub fn sentences(tokens: &[String]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t == "." {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(start..tokens.len());
    }
    out
}

/// Per-class gate means; a class with no sentences has no row.
pub fn gate_statistics(items: &[GateSequence]) -> Vec<GateRow> {
    #[derive(Default)]
    struct Acc {
        tok: [f64; 2],
        n_tok: usize,
        sent: [f64; 2],
        n_sent: usize,
    }
    let mut acc = [Acc::default(), Acc::default()];
    for item in items {
        let n = item.tokens.len().min(item.gates.len());
        for range in sentences(&item.tokens[..n]) {
            let class = classify(&item.tokens[range.clone()]);
            let a = &mut acc[class as usize];
            let mut s = [0.0; 2];
            for g in &item.gates[range.clone()] {
                s[0] += g[0];
                s[1] += g[1];
            }
            let len = range.len() as f64;
            a.tok[0] += s[0];
            a.tok[1] += s[1];
            a.n_tok += range.len();
            a.sent[0] += s[0] / len;
            a.sent[1] += s[1] / len;
            a.n_sent += 1;
        }
    }
    [SentenceClass::Normality, SentenceClass::Abnormality]
        .into_iter()
        .zip(acc)
        .filter(|(_, a)| a.n_sent > 0)
        .map(|(class, a)| GateRow {
            class,
            token_lambda1: a.tok[0] / a.n_tok as f64,
            token_lambda2: a.tok[1] / a.n_tok as f64,
            tokens: a.n_tok,
            sentence_lambda1: a.sent[0] / a.n_sent as f64,
            sentence_lambda2: a.sent[1] / a.n_sent as f64,
            sentences: a.n_sent,
        })
        .collect()
}
