//! Greedy and beam decoding over any next-token model.

use std::cmp::Ordering;

use crate::data::vocab::{BOS, EOS, PAD, UNK};
use crate::tensor::{Result, TensorError};

pub struct StepOutput {
    /// Log-probabilities over the vocabulary for the next token.
    pub log_probs: Vec<f64>,
    /// Mean `(λ1, λ2)` at this step.
    pub gates: [f64; 2],
}

/// Anything that scores the next token given a prefix starting with BOS.
pub trait StepModel {
    fn step(&self, prefix: &[usize]) -> Result<StepOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Maximum number of emitted tokens, excluding EOS.
    pub max_len: usize,
    pub beam_width: usize,
    pub suppress_unk: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 60,
            beam_width: 1,
            suppress_unk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Emitted tokens without BOS/EOS.
    pub token_ids: Vec<usize>,
    /// Gates of the step that produced each emitted token.
    pub gates: Vec<[f64; 2]>,
    /// Sum of log-probabilities, including the EOS step when finished.
    pub log_prob: f64,
    /// Whether generation ended with EOS rather than the length limit.
    pub finished: bool,
}

impl GenerationResult {
    /// Number of scored steps.
    pub fn steps(&self) -> usize {
        self.token_ids.len() + usize::from(self.finished)
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        self.log_prob / self.steps().max(1) as f64
    }
}

fn allowed(token: usize, opts: &DecodeOptions) -> bool {
    token != PAD && token != BOS && !(opts.suppress_unk && token == UNK)
}

fn prefix(tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS);
    p.extend_from_slice(tokens);
    p
}

/// Argmax at every step until EOS or `max_len`; ties go to the smaller id.
pub fn greedy_decode(model: &impl StepModel, opts: &DecodeOptions) -> Result<GenerationResult> {
    let mut res = GenerationResult {
        token_ids: Vec::new(),
        gates: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while res.token_ids.len() < opts.max_len {
        let out = model.step(&prefix(&res.token_ids))?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &lp) in out.log_probs.iter().enumerate() {
            if allowed(tok, opts) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let Some((tok, lp)) = best else { break };
        res.log_prob += lp;
        if tok == EOS {
            res.finished = true;
            break;
        }
        res.token_ids.push(tok);
        res.gates.push(out.gates);
    }
    Ok(res)
}

/// Better-first ordering: higher normalized score, then the
/// lexicographically smaller token sequence.
pub fn rank(a: &GenerationResult, b: &GenerationResult) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.token_ids.cmp(&b.token_ids))
}

/// Beam search keeping `beam_width` hypotheses ranked by
/// `sum(log p) / steps`. Finished hypotheses stay in the beam and compete
/// with extensions. A hypothesis reaching `max_len` tokens is final.
pub fn beam_decode(model: &impl StepModel, opts: &DecodeOptions) -> Result<GenerationResult> {
    let width = opts.beam_width.max(1);
    let mut beam = vec![GenerationResult {
        token_ids: Vec::new(),
        gates: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let done = |h: &GenerationResult| h.finished || h.token_ids.len() >= opts.max_len;
    while !beam.iter().all(done) {
        let mut pool = Vec::new();
        for hyp in std::mem::take(&mut beam) {
            if done(&hyp) {
                pool.push(hyp);
                continue;
            }
            let out = model.step(&prefix(&hyp.token_ids))?;
            for (tok, &lp) in out.log_probs.iter().enumerate() {
                if !allowed(tok, opts) {
                    continue;
                }
                let mut next = hyp.clone();
                next.log_prob += lp;
                if tok == EOS {
                    next.finished = true;
                } else {
                    next.token_ids.push(tok);
                    next.gates.push(out.gates);
                }
                pool.push(next);
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        if pool.is_empty() {
            return Err(TensorError::Contract("no token is allowed at this step".into()));
        }
        beam = pool;
    }
    beam.sort_by(rank);
    Ok(beam.into_iter().next().expect("beam is never empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl StepModel for Fixed {
        fn step(&self, _: &[usize]) -> Result<StepOutput> {
            Ok(StepOutput {
                log_probs: self.0.clone(),
                gates: [0.5, 0.5],
            })
        }
    }

    #[test]
    fn eos_first_gives_empty_report() {
        let m = Fixed(vec![0.0, 0.0, -0.1, -5.0, -3.0]);
        let opts = DecodeOptions { max_len: 5, ..Default::default() };
        let g = greedy_decode(&m, &opts).unwrap();
        assert!(g.token_ids.is_empty() && g.finished);
        assert_eq!(g.log_prob, -0.1);
        let b = beam_decode(&m, &DecodeOptions { beam_width: 3, ..opts }).unwrap();
        assert!(b.token_ids.is_empty());
    }

    #[test]
    fn greedy_stops_at_max_len() {
        let m = Fixed(vec![-9.0, -9.0, -9.0, -9.0, -0.1]);
        let g = greedy_decode(&m, &DecodeOptions { max_len: 3, ..Default::default() }).unwrap();
        assert_eq!(g.token_ids, vec![4, 4, 4]);
        assert!(!g.finished);
        assert_eq!(g.gates.len(), 3);
    }

    #[test]
    fn unk_suppression() {
        let m = Fixed(vec![-9.0, -9.0, -2.0, -0.1, -1.0]);
        let opts = DecodeOptions { max_len: 1, beam_width: 1, suppress_unk: true };
        assert_eq!(greedy_decode(&m, &opts).unwrap().token_ids, vec![4]);
    }
}
