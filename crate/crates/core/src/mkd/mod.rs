//! Causal decoder that distils posterior and prior knowledge into every
//! generation step through adaptive distilling attention (ADA).

pub mod decode;
pub mod gates;

use std::sync::Arc;

use crate::attention::{causal_mask, sublayer, AttentionLayer, FfnLayer, MhaParams, NormParams};
use crate::autograd::Var;
use crate::data::vocab::{BOS, EOS, PAD};
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::params::ParamId;
use crate::tensor::{Result, Tensor, TensorError};

pub use decode::{beam_decode, greedy_decode, DecodeOptions, GenerationResult, StepModel, StepOutput};
pub use gates::{gate_statistics, GateRow, GateSequence, SentenceClass};

/// Fixed sinusoidal position embeddings, `len × d`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct AdaParams {
    pub w_h: ParamId,
    pub w_i: ParamId,
    pub w_g: ParamId,
    pub w_w: ParamId,
    pub mha: MhaParams,
    pub norm: NormParams,
}

impl AdaParams {
    pub fn new(b: &mut ParamBuilder<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            w_h: b.matrix("w_h", d, 2)?,
            w_i: b.matrix("w_i", d, 2)?,
            w_g: b.matrix("w_g", d, 2)?,
            w_w: b.matrix("w_w", d, 2)?,
            mha: MhaParams::new(&mut b.scope("mha"), d, heads)?,
            norm: NormParams::new(&mut b.scope("norm"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub vocab_size: usize,
    pub word_emb: ParamId,
    pub self_attn: Vec<AttentionLayer>,
    pub ada: AdaParams,
    pub ffn: FfnLayer,
    pub output: Linear,
}

impl DecoderParams {
    pub fn new(b: &mut ParamBuilder<'_>, vocab_size: usize, d: usize, heads: usize, depth: usize) -> Result<Self> {
        let bound = (3.0 / d as f64).sqrt();
        Ok(Self {
            vocab_size,
            word_emb: b.uniform("word_emb", vocab_size, d, bound)?,
            self_attn: (0..depth)
                .map(|i| AttentionLayer::new(&mut b.scope(format!("self_attn.{i}")), d, heads))
                .collect::<Result<_>>()?,
            ada: AdaParams::new(&mut b.scope("ada"), d, heads)?,
            ffn: FfnLayer::new(&mut b.scope("ffn"), d)?,
            output: Linear::new(&mut b.scope("output"), d, vocab_size, true)?,
        })
    }
}

/// Knowledge sources the decoder attends to, each `N_I × d`.
#[derive(Clone, Copy)]
pub struct Memory<'t> {
    pub i_prime: Var<'t>,
    pub g_prime: Var<'t>,
    pub w_prime: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Learned,
    /// Fixed `(λ1, λ2)` everywhere; `(0, 0)` is the gate-off limit.
    Forced(f64, f64),
}

pub struct AdaOutput<'t> {
    /// Pre-sublayer attention output, `l × d`.
    pub out: Var<'t>,
    /// `λ1`, `λ2` as `l × N_I` (row `t` holds step `t`'s per-position gates).
    pub lambda1: Var<'t>,
    pub lambda2: Var<'t>,
    /// Head-averaged attention over source positions, `l × N_I`.
    pub weights: Tensor,
}

impl AdaOutput<'_> {
    /// Per-step gate means over source positions.
    pub fn step_gates(&self) -> Vec<[f64; 2]> {
        let (a, b) = (self.lambda1.value(), self.lambda2.value());
        (0..a.rows())
            .map(|t| {
                let n = a.cols() as f64;
                [a.row_slice(t).iter().sum::<f64>() / n, b.row_slice(t).iter().sum::<f64>() / n]
            })
            .collect()
    }
}

/// Adaptive distilling attention for every query row of `h` at once.
///
/// For query row `t`, the gates are `σ(h_t W_h ⊕ (I′W_I + G′W_G + W′W_W))`
/// and keys/values are `I′ + λ1⊙G′ + λ2⊙W′`. Because the head projections
/// are linear, the per-step fused keys are expanded as
/// `I′W + λ1⊙(G′W) + λ2⊙(W′W)` and the step dimension is batched.
pub fn adaptive_distilling_attention<'t>(
    ctx: &Ctx<'t>,
    h: Var<'t>,
    mem: &Memory<'t>,
    p: &AdaParams,
    mode: GateMode,
) -> Result<AdaOutput<'t>> {
    let (n_i, d) = mem.i_prime.dims();
    for (name, src) in [("G′", mem.g_prime), ("W′", mem.w_prime)] {
        if src.dims() != (n_i, d) {
            return Err(TensorError::Contract(format!(
                "ADA source {name} is {:?}, expected [{n_i}, {d}]",
                src.shape()
            )));
        }
    }
    let l = h.dims().0;
    let tape = ctx.tape;
    let (lambda1, lambda2) = match mode {
        GateMode::Learned => {
            let src = mem
                .i_prime
                .matmul(ctx.p(p.w_i))?
                .add(mem.g_prime.matmul(ctx.p(p.w_g))?)?
                .add(mem.w_prime.matmul(ctx.p(p.w_w))?)?;
            let step = h.matmul(ctx.p(p.w_h))?;
            let spread = tape.constant(Tensor::full(1, n_i, 1.0));
            let gate = |c: usize| -> Result<Var<'t>> {
                step.slice_cols(c, 1)?
                    .matmul(spread)?
                    .add_row(src.slice_cols(c, 1)?.transpose())
                    .map(Var::sigmoid)
            };
            (gate(0)?, gate(1)?)
        }
        GateMode::Forced(a, b) => (tape.constant(Tensor::full(l, n_i, a)), tape.constant(Tensor::full(l, n_i, b))),
    };

    let m = &p.mha;
    let scale = 1.0 / (m.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(m.n_heads);
    let mut weights = Vec::with_capacity(m.n_heads);
    for hd in 0..m.n_heads {
        let (wq, wk, wv) = (ctx.p(m.wq[hd]), ctx.p(m.wk[hd]), ctx.p(m.wv[hd]));
        let q = h.matmul(wq)?;
        let score = |src: Var<'t>| q.matmul(src.matmul(wk)?.transpose());
        let logits = score(mem.i_prime)?
            .add(lambda1.mul(score(mem.g_prime)?)?)?
            .add(lambda2.mul(score(mem.w_prime)?)?)?
            .scale(scale);
        let alpha = logits.softmax(1)?;
        let out = alpha
            .matmul(mem.i_prime.matmul(wv)?)?
            .add(alpha.mul(lambda1)?.matmul(mem.g_prime.matmul(wv)?)?)?
            .add(alpha.mul(lambda2)?.matmul(mem.w_prime.matmul(wv)?)?)?;
        heads.push(out);
        weights.push(alpha);
    }
    let out = Var::concat_cols(&heads)?.matmul(ctx.p(m.wo))?;
    Ok(AdaOutput {
        out,
        lambda1,
        lambda2,
        weights: crate::attention::average(&weights),
    })
}

pub struct DecoderOutput<'t> {
    /// Next-token log-probabilities, `len × V`.
    pub log_probs: Var<'t>,
    pub ada: AdaOutput<'t>,
}

/// Teacher-forced pass over `inputs` (which start with BOS).
pub fn decode_forward<'t>(
    ctx: &Ctx<'t>,
    inputs: &[usize],
    mem: &Memory<'t>,
    p: &DecoderParams,
    mode: GateMode,
) -> Result<DecoderOutput<'t>> {
    if inputs.first() != Some(&BOS) {
        return Err(TensorError::Contract("decoder input must start with BOS".into()));
    }
    if let Some(&bad) = inputs.iter().find(|&&t| t >= p.vocab_size) {
        return Err(TensorError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            p.vocab_size
        )));
    }
    let len = inputs.len();
    let d = ctx.p(p.word_emb).dims().1;
    let x = ctx
        .p(p.word_emb)
        .gather_rows(inputs)?
        .add(ctx.tape.constant(positions(len, d)))?;
    let mask = Arc::new(causal_mask(len));
    let mut h = x;
    for layer in &p.self_attn {
        h = layer.forward(ctx, h, h, Some(&mask))?.0;
    }
    let ada = adaptive_distilling_attention(ctx, h, mem, &p.ada, mode)?;
    let h = sublayer(ctx, h, ada.out, &p.ada.norm)?;
    let h = p.ffn.forward(ctx, h)?;
    let log_probs = p.output.forward(ctx, h)?.log_softmax()?;
    Ok(DecoderOutput { log_probs, ada })
}

/// Decoder inputs `[BOS, y…]` and targets `[y…, EOS]`; PAD targets are
/// excluded from the loss.
pub fn teacher_forcing(tokens: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut inputs = Vec::with_capacity(tokens.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(tokens);
    let targets = tokens
        .iter()
        .chain(std::iter::once(&EOS))
        .map(|&t| (t != PAD).then_some(t))
        .collect();
    (inputs, targets)
}

/// Summed negative log-likelihood of `targets` and the number of scored
/// tokens.
pub fn sequence_nll<'t>(log_probs: Var<'t>, targets: &[Option<usize>]) -> Result<(Var<'t>, usize)> {
    if log_probs.dims().0 != targets.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy_loss",
            left: log_probs.shape(),
            right: vec![targets.len()],
        });
    }
    Ok((log_probs.nll_sum(targets)?, targets.iter().flatten().count()))
}

/// Batch loss: summed NLL over every scored token divided by the token count.
pub fn batch_loss<'t>(parts: &[(Var<'t>, usize)]) -> Result<Var<'t>> {
    let tokens: usize = parts.iter().map(|p| p.1).sum();
    let mut iter = parts.iter();
    let first = iter
        .next()
        .ok_or_else(|| TensorError::Contract("empty batch".into()))?
        .0;
    let total = iter.try_fold(first, |acc, p| acc.add(p.0))?;
    Ok(total.scale(1.0 / tokens.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_start_with_sin_cos_of_zero() {
        let p = positions(3, 4);
        assert_eq!(p.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((p.get(1, 2) - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn teacher_forcing_shifts() {
        let (i, t) = teacher_forcing(&[5, 6]);
        assert_eq!(i, vec![BOS, 5, 6]);
        assert_eq!(t, vec![Some(5), Some(6), Some(EOS)]);
    }
}
