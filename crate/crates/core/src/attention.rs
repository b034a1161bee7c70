//! Multi-head scaled dot-product attention, the position-wise feed-forward
//! network, and the post-norm sublayer `LayerNorm(x + Dropout(f(x)))` that
//! follows each of them.

use std::sync::Arc;

use crate::autograd::{Mask, Var};
use crate::nn::{Ctx, ParamBuilder};
use crate::params::ParamId;
use crate::tensor::{Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-head projections `W_Q, W_K, W_V: d×d_n` and the output `W_O: d×d`.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub n_heads: usize,
    pub d_model: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl MhaParams {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::Contract(format!(
                "model width {d_model} not divisible by {n_heads} heads"
            )));
        }
        let dn = d_model / n_heads;
        let heads = |kind: &str, b: &mut ParamBuilder<'_>| -> Result<Vec<ParamId>> {
            let mut s = b.scope(kind);
            (0..n_heads).map(|h| s.matrix(&format!("head{h}"), d_model, dn)).collect()
        };
        let wq = heads("wq", b)?;
        let wk = heads("wk", b)?;
        let wv = heads("wv", b)?;
        let wo = b.matrix("wo", d_model, d_model)?;
        Ok(Self {
            n_heads,
            d_model,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `W_f: d×4d`, `W_ff: 4d×d` and their biases.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_ff: ParamId,
    pub b_ff: ParamId,
}

impl FfnParams {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize) -> Result<Self> {
        Ok(Self {
            w_f: b.matrix("w_f", d_model, 4 * d_model)?,
            b_f: b.constant("b_f", 1, 4 * d_model, 0.0)?,
            w_ff: b.matrix("w_ff", 4 * d_model, d_model)?,
            b_ff: b.constant("b_ff", 1, d_model, 0.0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize) -> Result<Self> {
        Ok(Self {
            gain: b.constant("gain", 1, d_model, 1.0)?,
            bias: b.constant("bias", 1, d_model, 0.0)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias), LAYER_NORM_EPS)
    }
}

/// Attention result before the sublayer, with per-head weight matrices.
pub struct MhaOutput<'t> {
    pub out: Var<'t>,
    pub weights: Vec<Var<'t>>,
}

impl MhaOutput<'_> {
    /// Head-averaged attention weights (`l_x × l_y`).
    pub fn mean_weights(&self) -> Tensor {
        average(&self.weights)
    }
}

pub(crate) fn average(weights: &[Var<'_>]) -> Tensor {
    let first = weights[0].value();
    let mut acc = first.as_ref().clone();
    for w in &weights[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(w.value().data()) {
            *a += b;
        }
    }
    let n = weights.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= n);
    acc
}

fn check_width(op: &'static str, x: &Var<'_>, d: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(TensorError::Shape {
            op,
            left: shape,
            right: vec![0, d],
        });
    }
    Ok(())
}

/// `MHA(X, Y) = [Att_1; …; Att_n]·W_O` with
/// `Att_i = softmax(X·W_Q^i·(Y·W_K^i)ᵀ / √d_n)·Y·W_V^i`.
///
/// `X` supplies the queries and `Y` both keys and values. Disallowed mask
/// positions receive zero weight.
pub fn multi_head_attention<'t>(
    ctx: &Ctx<'t>,
    x: Var<'t>,
    y: Var<'t>,
    p: &MhaParams,
    mask: Option<&Arc<Mask>>,
) -> Result<MhaOutput<'t>> {
    check_width("multi_head_attention", &x, p.d_model)?;
    check_width("multi_head_attention", &y, p.d_model)?;
    let mut q = Vec::with_capacity(p.n_heads);
    let mut k = Vec::with_capacity(p.n_heads);
    let mut v = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        q.push(x.matmul(ctx.p(p.wq[h]))?);
        k.push(y.matmul(ctx.p(p.wk[h]))?);
        v.push(y.matmul(ctx.p(p.wv[h]))?);
    }
    attend_projected(ctx, &q, &k, &v, p, mask)
}

/// Attention from already projected per-head queries, keys and values.
pub(crate) fn attend_projected<'t>(
    ctx: &Ctx<'t>,
    q: &[Var<'t>],
    k: &[Var<'t>],
    v: &[Var<'t>],
    p: &MhaParams,
    mask: Option<&Arc<Mask>>,
) -> Result<MhaOutput<'t>> {
    let lx = q[0].dims().0;
    let ly = k[0].dims().0;
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (lx, ly) {
            return Err(TensorError::Shape {
                op: "attention mask",
                left: vec![m.rows(), m.cols()],
                right: vec![lx, ly],
            });
        }
    }
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let mut scores = q[h].matmul(k[h].transpose())?.scale(scale);
        if let Some(m) = mask {
            scores = scores.mask_fill(m)?;
        }
        let w = scores.softmax(1)?;
        heads.push(w.matmul(v[h])?);
        weights.push(w);
    }
    let out = Var::concat_cols(&heads)?.matmul(ctx.p(p.wo))?;
    Ok(MhaOutput { out, weights })
}

/// `max(0, x·W_f + b_f)·W_ff + b_ff`.
pub fn feed_forward<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &FfnParams) -> Result<Var<'t>> {
    let hidden = x.matmul(ctx.p(p.w_f))?.add_row(ctx.p(p.b_f))?.relu();
    hidden.matmul(ctx.p(p.w_ff))?.add_row(ctx.p(p.b_ff))
}

/// `LayerNorm(residual + Dropout(fx))`.
pub fn sublayer<'t>(ctx: &Ctx<'t>, residual: Var<'t>, fx: Var<'t>, norm: &NormParams) -> Result<Var<'t>> {
    norm.forward(ctx, residual.add(fx.dropout(ctx.dropout))?)
}

/// Lower-triangular allow-mask: position `t` sees positions `0..=t`.
pub fn causal_mask(len: usize) -> Mask {
    assert!(len >= 1, "causal mask needs length >= 1");
    let allow = (0..len * len).map(|k| k % len <= k / len).collect();
    Mask::new(len, len, allow)
}

/// MHA followed by its sublayer; residual comes from the query input.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub mha: MhaParams,
    pub norm: NormParams,
}

impl AttentionLayer {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            mha: MhaParams::new(&mut b.scope("mha"), d_model, n_heads)?,
            norm: NormParams::new(&mut b.scope("norm"), d_model)?,
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        y: Var<'t>,
        mask: Option<&Arc<Mask>>,
    ) -> Result<(Var<'t>, MhaOutput<'t>)> {
        let att = multi_head_attention(ctx, x, y, &self.mha, mask)?;
        let out = sublayer(ctx, x, att.out, &self.norm)?;
        Ok((out, att))
    }
}

/// FFN followed by its sublayer.
#[derive(Debug, Clone)]
pub struct FfnLayer {
    pub ffn: FfnParams,
    pub norm: NormParams,
}

impl FfnLayer {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize) -> Result<Self> {
        Ok(Self {
            ffn: FfnParams::new(&mut b.scope("ffn"), d_model)?,
            norm: NormParams::new(&mut b.scope("norm"), d_model)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_width("feed_forward", &x, ctx.p(self.ffn.b_ff).dims().1)?;
        let f = feed_forward(ctx, x, &self.ffn)?;
        sublayer(ctx, x, f, &self.norm)
    }
}

/// `FFN(MHA(X, Y))`, each with its sublayer; stacked blocks re-query the
/// same key/value source.
#[derive(Debug, Clone)]
pub struct AttendBlock {
    pub attn: AttentionLayer,
    pub ffn: FfnLayer,
}

impl AttendBlock {
    pub fn new(b: &mut ParamBuilder<'_>, d_model: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            attn: AttentionLayer::new(&mut b.scope("attn"), d_model, n_heads)?,
            ffn: FfnLayer::new(&mut b.scope("ffn"), d_model)?,
        })
    }

    pub fn stack(b: &mut ParamBuilder<'_>, depth: usize, d_model: usize, n_heads: usize) -> Result<Vec<Self>> {
        (0..depth).map(|i| Self::new(&mut b.scope(i), d_model, n_heads)).collect()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, y: Var<'t>) -> Result<(Var<'t>, MhaOutput<'t>)> {
        let (h, att) = self.attn.forward(ctx, x, y, None)?;
        Ok((self.ffn.forward(ctx, h)?, att))
    }
}

/// Runs a stack of [`AttendBlock`]s; returns the output and the head-averaged
/// attention of the last block.
pub fn run_stack<'t>(ctx: &Ctx<'t>, blocks: &[AttendBlock], x: Var<'t>, y: Var<'t>) -> Result<(Var<'t>, Tensor)> {
    let mut h = x;
    let mut last = None;
    for block in blocks {
        let (out, att) = block.forward(ctx, h, y)?;
        h = out;
        last = Some(att.mean_weights());
    }
    let weights = last.ok_or_else(|| TensorError::Contract("attention stack depth must be >= 1".into()))?;
    Ok((h, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(1);
        assert!(m.allows(0, 0));
        let m = causal_mask(3);
        assert!(m.allows(1, 0) && m.allows(1, 1) && !m.allows(1, 2));
        assert!(m.allows(2, 2) && !m.allows(0, 1));
    }
}
