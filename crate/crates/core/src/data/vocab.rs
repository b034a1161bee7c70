//! Word vocabulary with reserved special ids.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabPolicy {
    /// Keep the `k` most frequent tokens.
    TopK(usize),
    /// Keep tokens seen at least this many times.
    MinFrequency(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRecord", into = "VocabRecord")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    policy: VocabPolicy,
    /// Share of training token occurrences covered by the kept tokens.
    coverage: f64,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    policy: VocabPolicy,
    coverage: f64,
    tokens: Vec<String>,
}

impl From<VocabRecord> for Vocabulary {
    fn from(r: VocabRecord) -> Self {
        Self::from_tokens(r.tokens, r.policy, r.coverage)
    }
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        Self {
            policy: v.policy,
            coverage: v.coverage,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, policy: VocabPolicy, coverage: f64) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            policy,
            coverage,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn policy(&self) -> VocabPolicy {
        self.policy
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps tokens to ids, unknown ones to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Maps ids back to tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| SPECIALS[UNK].to_owned()))
            .collect()
    }
}

/// Frequency-ranked vocabulary; ties in frequency are broken
/// lexicographically.
pub fn build_vocab<'a, I, S>(reports: I, policy: VocabPolicy) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    let mut n_reports = 0usize;
    for report in reports {
        n_reports += 1;
        for t in report {
            *freq.entry(t.as_ref()).or_default() += 1;
            total += 1;
        }
    }
    if n_reports == 0 {
        return Err(DataError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|(t, _)| !SPECIALS.contains(t)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    match policy {
        VocabPolicy::TopK(k) => ranked.truncate(k),
        VocabPolicy::MinFrequency(m) => ranked.retain(|(_, c)| *c >= m),
    }
    let kept: usize = ranked.iter().map(|(_, c)| c).sum();
    let coverage = if total == 0 { 0.0 } else { kept as f64 / total as f64 };
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_owned()))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, policy, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn single_report_policies() {
        let r = toks("a a b");
        let v = build_vocab([r.as_slice()], VocabPolicy::TopK(1)).unwrap();
        assert_eq!(v.words(), ["a"]);
        let v = build_vocab([r.as_slice()], VocabPolicy::MinFrequency(2)).unwrap();
        assert_eq!(v.words(), ["a"]);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.encode(&["a", "zzz"]), vec![4, UNK]);
    }

    #[test]
    fn frequency_ties_are_lexicographic() {
        let r = toks("c b a c b a d");
        let v = build_vocab([r.as_slice()], VocabPolicy::TopK(10)).unwrap();
        assert_eq!(v.words(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let none: Vec<&[String]> = Vec::new();
        assert!(matches!(build_vocab(none, VocabPolicy::TopK(3)), Err(DataError::EmptyCorpus)));
    }

    #[test]
    fn coverage_matches_hand_count() {
        let reports: Vec<Vec<String>> = ["the heart is normal .", "the lungs are clear .", "the heart is big .", "no effusion .", "the the ."]
            .iter()
            .map(|s| toks(s))
            .collect();
        // the:5 .:5 heart:2 is:2, everything else once; 21 occurrences.
        let v = build_vocab(reports.iter().map(Vec::as_slice), VocabPolicy::TopK(4)).unwrap();
        assert_eq!(v.words(), [".", "the", "heart", "is"]);
        assert!((v.coverage() - 14.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn serde_round_trip() {
        let r = toks("x y y");
        let v = build_vocab([r.as_slice()], VocabPolicy::MinFrequency(1)).unwrap();
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
