mod common;

use common::{random_tensor, rng, toy, Toy};
use proptest::prelude::*;
use rand::Rng;
use radreport::attention::multi_head_attention;
use radreport::data::vocab::{BOS, EOS, UNK};
use radreport::mkd::decode::rank;
use radreport::mkd::{
    adaptive_distilling_attention, batch_loss, beam_decode, decode_forward, gate_statistics, greedy_decode, sequence_nll, DecodeOptions, GateMode,
    GateSequence, GenerationResult, Memory, StepModel, StepOutput,
};
use radreport::model::Stepper;
use radreport::{Tape, Tensor};

fn memory_of<'t>(tape: &'t Tape, seed: u64, n_i: usize) -> Memory<'t> {
    let mut r = rng(seed);
    Memory {
        i_prime: tape.constant(random_tensor(&mut r, n_i, 16)),
        g_prime: tape.constant(random_tensor(&mut r, n_i, 16)),
        w_prime: tape.constant(random_tensor(&mut r, n_i, 16)),
    }
}

#[test]
fn gate_off_limit_is_plain_attention_over_image() {
    let t = toy(0);
    let ada = &t.model.layout.decoder.ada;
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let mem = memory_of(&tape, 1, 4);
    let h = tape.constant(random_tensor(&mut rng(2), 3, 16));
    let fused = adaptive_distilling_attention(&ctx, h, &mem, ada, GateMode::Forced(0.0, 0.0)).unwrap();
    let plain = multi_head_attention(&ctx, h, mem.i_prime, &ada.mha, None).unwrap();
    assert!(fused.out.value().max_abs_diff(&plain.out.value()) < 1e-10);
}

#[test]
fn zero_gate_weights_give_one_half() {
    let mut t = toy(0);
    let ada = t.model.layout.decoder.ada.clone();
    for id in [ada.w_h, ada.w_i, ada.w_g, ada.w_w] {
        t.model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let mem = memory_of(&tape, 1, 4);
    let h = tape.constant(random_tensor(&mut rng(2), 3, 16));
    let out = adaptive_distilling_attention(&ctx, h, &mem, &ada, GateMode::Learned).unwrap();
    assert!(out.lambda1.value().data().iter().chain(out.lambda2.value().data()).all(|&l| l == 0.5));
    let k = mem.i_prime.add(mem.g_prime.add(mem.w_prime).unwrap().scale(0.5)).unwrap();
    let reference = multi_head_attention(&ctx, h, k, &ada.mha, None).unwrap();
    assert!(out.out.value().max_abs_diff(&reference.out.value()) < 1e-10);
}

#[test]
fn mismatched_sources_are_rejected() {
    let t = toy(0);
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let mut mem = memory_of(&tape, 1, 4);
    mem.g_prime = tape.constant(Tensor::zeros(3, 16));
    let h = tape.constant(Tensor::zeros(2, 16));
    assert!(adaptive_distilling_attention(&ctx, h, &mem, &t.model.layout.decoder.ada, GateMode::Learned).is_err());
}

fn log_probs(t: &Toy, inputs: &[usize]) -> Tensor {
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let mem = memory_of(&tape, 5, 4);
    decode_forward(&ctx, inputs, &mem, &t.model.layout.decoder, GateMode::Learned)
        .unwrap()
        .log_probs
        .value()
        .as_ref()
        .clone()
}

#[test]
fn distributions_normalize() {
    let t = toy(3);
    let lp = log_probs(&t, &[BOS, 7, 9, 11, 4]);
    for r in 0..lp.rows() {
        let s: f64 = lp.row_slice(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn future_tokens_do_not_leak() {
    let t = toy(4);
    let mut r = rng(9);
    let base: Vec<usize> = std::iter::once(BOS).chain((0..8).map(|_| r.random_range(4..30))).collect();
    let lp = log_probs(&t, &base);
    for cut in 1..base.len() {
        let mut pert = base.clone();
        for tok in &mut pert[cut..] {
            *tok = r.random_range(3..30);
        }
        let lq = log_probs(&t, &pert);
        for row in 0..cut {
            for c in 0..lp.cols() {
                assert!((lp.get(row, c) - lq.get(row, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn input_contract() {
    let t = toy(0);
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let mem = memory_of(&tape, 1, 4);
    let d = &t.model.layout.decoder;
    assert!(decode_forward(&ctx, &[5, 6], &mem, d, GateMode::Learned).is_err());
    assert!(decode_forward(&ctx, &[BOS, 30], &mem, d, GateMode::Learned).is_err());
}

#[test]
fn output_layer_by_hand() {
    // Zero gain on the last layer norm pins the decoder state to its bias, so
    // p_1 = softmax(β·W_p + b_p).
    let mut t = toy(0);
    let dec = t.model.layout.decoder.clone();
    let s = &mut t.model.store;
    s.value_mut(dec.ffn.norm.gain).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut beta = vec![0.0; 16];
    beta[0] = 1.0;
    beta[1] = -2.0;
    s.set_value(dec.ffn.norm.bias, Tensor::row(&beta)).unwrap();
    let mut w = Tensor::zeros(16, 30);
    w.data_mut()[4] = 1.0; // row 0, token 4
    w.data_mut()[30 + 5] = 0.5; // row 1, token 5
    s.set_value(dec.output.weight, w).unwrap();
    let mut b = vec![0.0; 30];
    b[6] = 2.0f64.ln();
    s.set_value(dec.output.bias.unwrap(), Tensor::row(&b)).unwrap();
    let lp = log_probs(&t, &[BOS]);
    // logits: token 4 → 1, token 5 → −1, token 6 → ln 2, the other 27 → 0
    let z = 1f64.exp() + (-1f64).exp() + 2.0 + 27.0;
    for (tok, logit) in [(4, 1.0), (5, -1.0), (6, 2f64.ln()), (0, 0.0)] {
        assert!((lp.get(0, tok).exp() - f64::exp(logit) / z).abs() < 1e-12);
    }
}

#[test]
fn loss_closed_forms() {
    let tape = Tape::new();
    let mut onehot = Tensor::full(3, 4, f64::NEG_INFINITY);
    for (r, c) in [(0, 1), (1, 3), (2, 2)] {
        onehot.data_mut()[r * 4 + c] = 0.0;
    }
    let (nll, n) = sequence_nll(tape.constant(onehot), &[Some(1), Some(3), Some(2)]).unwrap();
    assert_eq!((batch_loss(&[(nll, n)]).unwrap().item(), n), (0.0, 3));

    let uniform = tape.constant(Tensor::full(5, 7, -(7f64.ln())));
    let (nll, n) = sequence_nll(uniform, &[Some(0), Some(6), None, Some(2), Some(2)]).unwrap();
    assert_eq!(n, 4);
    assert!((batch_loss(&[(nll, n)]).unwrap().item() - 7f64.ln()).abs() < 1e-15);
    assert!(sequence_nll(uniform, &[Some(0)]).is_err());
}

#[test]
fn loss_matches_recomputation_from_logged_distributions() {
    let t = toy(6);
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let enc = t.model.encode(&ctx, &t.input()).unwrap();
    let (out, targets) = t.model.decode_teacher_forced(&ctx, &enc.memory, &t.tokens, GateMode::Learned).unwrap();
    let p = out.log_probs.value().map(f64::exp);
    let (nll, n) = sequence_nll(out.log_probs, &targets).unwrap();
    let loss = batch_loss(&[(nll, n)]).unwrap().item();
    let mut manual = 0.0;
    for (row, tgt) in targets.iter().enumerate() {
        manual -= p.get(row, tgt.unwrap()).ln();
    }
    assert!((loss - manual / n as f64).abs() < 1e-9);
}

#[test]
fn batch_loss_is_token_weighted_mean_of_examples() {
    let toys: Vec<Toy> = (0..3).map(|s| toy(10 + s)).collect();
    let model = &toys[0].model;
    let per_example: Vec<(f64, usize)> = toys
        .iter()
        .map(|t| {
            let tape = Tape::new();
            let ctx = model.bind(&tape);
            let (nll, n) = model.example_nll(&ctx, &t.input(), &t.tokens[..2 + t.tokens.len() % 3]).unwrap();
            (nll.item() / n as f64, n)
        })
        .collect();
    let tape = Tape::new();
    let ctx = model.bind(&tape);
    let parts: Vec<_> = toys
        .iter()
        .map(|t| model.example_nll(&ctx, &t.input(), &t.tokens[..2 + t.tokens.len() % 3]).unwrap())
        .collect();
    let batch = batch_loss(&parts).unwrap().item();
    let total: usize = per_example.iter().map(|p| p.1).sum();
    let weighted: f64 = per_example.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / total as f64;
    assert!((batch - weighted).abs() < 1e-12);
}

#[test]
fn beam_width_one_is_greedy_on_the_model() {
    for seed in 0..4 {
        let t = toy(seed);
        let memory = t.model.memory_tensors(&t.input()).unwrap();
        let stepper = Stepper { model: &t.model, memory, mode: GateMode::Learned };
        let opts = DecodeOptions { max_len: 8, beam_width: 1, suppress_unk: false };
        assert_eq!(greedy_decode(&stepper, &opts).unwrap(), beam_decode(&stepper, &opts).unwrap());
    }
}

#[test]
fn forced_eos_gives_empty_report() {
    let mut t = toy(0);
    let bias = t.model.layout.decoder.output.bias.unwrap();
    t.model.store.value_mut(bias).data_mut()[EOS] = 100.0;
    let opts = DecodeOptions { max_len: 10, beam_width: 3, suppress_unk: false };
    let g = t.model.generate(&t.input(), &opts).unwrap();
    assert!(g.token_ids.is_empty() && g.finished);
    assert!(g.gates.is_empty());
}

/// Next-token table keyed by the prefix, deterministic in the seed.
struct TableModel {
    vocab: usize,
    seed: u64,
}

impl StepModel for TableModel {
    fn step(&self, prefix: &[usize]) -> radreport::tensor::Result<StepOutput> {
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut r = rng(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| r.random_range(-2.0..2.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        Ok(StepOutput {
            log_probs: logits.iter().map(|l| l - m - z.ln()).collect(),
            gates: [0.0, 0.0],
        })
    }
}

/// Every complete hypothesis up to `max_len` tokens under the beam's scoring.
fn enumerate(model: &impl StepModel, opts: &DecodeOptions) -> Vec<GenerationResult> {
    let mut out = Vec::new();
    let mut frontier = vec![GenerationResult { token_ids: vec![], gates: vec![], log_prob: 0.0, finished: false }];
    while let Some(h) = frontier.pop() {
        if h.token_ids.len() == opts.max_len {
            out.push(h);
            continue;
        }
        let mut prefix = vec![BOS];
        prefix.extend(&h.token_ids);
        let lp = model.step(&prefix).unwrap().log_probs;
        for (tok, &l) in lp.iter().enumerate() {
            if tok < 3 && tok != EOS || opts.suppress_unk && tok == UNK {
                continue;
            }
            let mut n = h.clone();
            n.log_prob += l;
            if tok == EOS {
                n.finished = true;
                out.push(n);
            } else {
                n.token_ids.push(tok);
                n.gates.push([0.0, 0.0]);
                frontier.push(n);
            }
        }
    }
    out.sort_by(rank);
    out
}

#[test]
fn beam_equals_exhaustive_enumeration_when_the_beam_holds_the_frontier() {
    // One word plus EOS: at most one open hypothesis per step, so width 3
    // never prunes an open path.
    for seed in 0..20 {
        let m = TableModel { vocab: 5, seed };
        let opts = DecodeOptions { max_len: 4, beam_width: 3, suppress_unk: true };
        let best = enumerate(&m, &opts).remove(0);
        assert_eq!(beam_decode(&m, &opts).unwrap(), best, "seed {seed}");
    }
    // Two words: width 9 covers every open prefix up to length 2.
    for seed in 0..20 {
        let m = TableModel { vocab: 6, seed };
        let opts = DecodeOptions { max_len: 2, beam_width: 9, suppress_unk: true };
        let best = enumerate(&m, &opts).remove(0);
        assert_eq!(beam_decode(&m, &opts).unwrap(), best, "seed {seed}");
    }
}

#[test]
fn teacher_forced_gate_statistics() {
    let t = toy(2);
    let tape = Tape::new();
    let ctx = t.model.bind(&tape);
    let enc = t.model.encode(&ctx, &t.input()).unwrap();
    let words = ["n", ".", "a", "b", "."];
    let tokens = t.model.vocab.encode(&words);
    let (out, _) = t.model.decode_teacher_forced(&ctx, &enc.memory, &tokens, GateMode::Learned).unwrap();
    let gates = out.ada.step_gates();
    let seq = GateSequence { tokens: vec!["no".into(), ".".into(), "a".into(), "b".into(), ".".into()], gates: gates[..5].to_vec() };
    let rows = gate_statistics(&[seq]);
    assert_eq!(rows.len(), 2);
    let expect = (gates[0][0] + gates[1][0]) / 2.0;
    assert!((rows[0].token_lambda1 - expect).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn gates_stay_strictly_inside_unit_interval(seed in 0u64..10_000, l in 1usize..6, scale in 0.1f64..8.0) {
        let t = toy(seed % 4);
        let tape = Tape::new();
        let ctx = t.model.bind(&tape);
        let mut r = rng(seed);
        let mem = Memory {
            i_prime: tape.constant(random_tensor(&mut r, 4, 16).map(|v| v * scale)),
            g_prime: tape.constant(random_tensor(&mut r, 4, 16).map(|v| v * scale)),
            w_prime: tape.constant(random_tensor(&mut r, 4, 16).map(|v| v * scale)),
        };
        let h = tape.constant(random_tensor(&mut r, l, 16).map(|v| v * scale));
        let out = adaptive_distilling_attention(&ctx, h, &mem, &t.model.layout.decoder.ada, GateMode::Learned).unwrap();
        for &g in out.lambda1.value().data().iter().chain(out.lambda2.value().data()) {
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn beam_one_matches_greedy_on_random_tables(seed in 0u64..10_000, vocab in 4usize..9, max_len in 1usize..6) {
        let m = TableModel { vocab, seed };
        let opts = DecodeOptions { max_len, beam_width: 1, suppress_unk: seed % 2 == 0 };
        prop_assert_eq!(greedy_decode(&m, &opts).unwrap(), beam_decode(&m, &opts).unwrap());
    }
}
