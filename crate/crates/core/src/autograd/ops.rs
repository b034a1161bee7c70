//! Forward definitions of the differentiable operations.

use std::sync::Arc;

use rand::Rng;

use super::{Mask, Op, Var};
use crate::tensor::{matmul_into, Result, Tensor, TensorError};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let ng = self.tape.needs_grad(self.id);
        self.tape.push(Arc::new(value), op, ng)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        let ng = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        self.tape.push(Arc::new(value), op, ng)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &a, &b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }

    fn zip_same(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let (m, n) = a.dims2("add_row")?;
        if r.shape() != [1, n] {
            return Err(shape_err("add_row", &a, &r));
        }
        let mut data = a.data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        let v = Tensor::new(&[m, n], data)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, c) = (self.value(), col.value());
        let (m, n) = a.dims2("mul_col")?;
        if c.shape() != [m, 1] {
            return Err(shape_err("mul_col", &a, &c));
        }
        let mut data = a.data().to_vec();
        for i in 0..m {
            let s = c.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
        }
        let v = Tensor::new(&[m, n], data)?;
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows), computed with
    /// max subtraction. `-inf` entries receive zero weight; a lane with no
    /// finite entry or any NaN is an error.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("softmax")?;
        if axis > 1 {
            return Err(TensorError::Contract(format!("softmax axis {axis} out of range")));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = vec![0.0; r * c];
        for_each_lane(r, c, axis, |idx| {
            let max = idx.clone().map(|i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract("softmax over a fully masked lane".into()));
            }
            if max == f64::INFINITY {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let mut sum = 0.0;
            for i in idx.clone() {
                let e = (x.data()[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for i in idx {
                out[i] /= sum;
            }
            Ok(())
        })?;
        let v = Tensor::new(&[r, c], out)?;
        Ok(self.unary(v, Op::Softmax { x: self.id, axis }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("log_softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(TensorError::NonFinite { op: "log_softmax" });
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    /// Sets disallowed positions to `-inf` (ahead of a softmax).
    pub fn mask_fill(self, mask: &Arc<Mask>) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("mask_fill")?;
        if (mask.rows(), mask.cols()) != (r, c) {
            return Err(TensorError::Shape {
                op: "mask_fill",
                left: vec![r, c],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let data = x
            .data()
            .iter()
            .zip(mask.as_slice())
            .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
            .collect();
        let v = Tensor::new(&[r, c], data)?;
        Ok(self.unary(
            v,
            Op::MaskFill {
                x: self.id,
                mask: Arc::clone(mask),
            },
        ))
    }

    /// Normalizes each row to zero mean and unit variance (biased estimate,
    /// `eps` added to the variance), then applies `gain` and `bias` (`1×n`).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let (r, c) = x.dims2("layer_norm")?;
        if g.shape() != [1, c] || b.shape() != [1, c] {
            return Err(shape_err("layer_norm", &x, &g));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        let ng = [self, gain, bias].iter().any(|v| self.tape.needs_grad(v.id));
        Ok(self.tape.push(
            Arc::new(v),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        for v in &values {
            if v.dims2("concat_cols")?.0 != rows {
                return Err(shape_err("concat_cols", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let ng = parts.iter().any(|p| tape.needs_grad(p.id));
        let v = Tensor::new(&[rows, total], data)?;
        Ok(tape.push(Arc::new(v), Op::ConcatCols(parts.iter().map(|p| p.id).collect()), ng))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        for v in &values {
            if v.dims2("concat_rows")?.1 != cols {
                return Err(shape_err("concat_rows", &values[0], v));
            }
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let ng = parts.iter().any(|p| tape.needs_grad(p.id));
        let v = Tensor::new(&[rows, cols], data)?;
        Ok(tape.push(Arc::new(v), Op::ConcatRows(parts.iter().map(|p| p.id).collect()), ng))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let v = Tensor::new(&[len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(v, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let data = (0..r)
            .flat_map(|i| x.row_slice(i)[start..start + len].iter().copied())
            .collect();
        let v = Tensor::new(&[r, len], data)?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    /// Embedding lookup: row `ids[i]` of the table becomes row `i`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (r, c) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    extent: r,
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let v = Tensor::new(&[ids.len(), c], data)?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        x.dims2("mean_rows")?;
        let v = Tensor::new(&[1, x.cols()], x.mean_rows())?;
        Ok(self.unary(v, Op::MeanRows(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Inverted dropout on training tapes; identity otherwise.
    pub fn dropout(self, rate: f64) -> Var<'t> {
        if !self.tape.is_training() || rate <= 0.0 {
            return self;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let x = self.value();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = {
            let mut rng = self.tape.rng.borrow_mut();
            (0..x.len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(x.shape(), data).expect("same shape");
        self.unary(v, Op::Dropout { x: self.id, mask })
    }

    /// `-Σ_i logp[i, targets[i]]` over rows whose target is `Some`.
    pub fn nll_sum(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let lp = self.value();
        let (r, c) = lp.dims2("nll_sum")?;
        if targets.len() != r {
            return Err(TensorError::Contract(format!(
                "nll_sum: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        let mut s = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(TensorError::Index {
                        op: "nll_sum",
                        index: t,
                        extent: c,
                    });
                }
                s -= lp.get(i, t);
            }
        }
        Ok(self.unary(
            Tensor::scalar(s),
            Op::NllSum {
                logp: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Summed binary cross-entropy on logits with per-column positive-class
    /// weights: `-Σ w·y·log σ(z) + (1-y)·log(1-σ(z))`.
    pub fn bce_with_logits(self, targets: &[f64], pos_weight: &[f64]) -> Result<Var<'t>> {
        let z = self.value();
        let (r, c) = z.dims2("bce_with_logits")?;
        if targets.len() != r * c || pos_weight.len() != c {
            return Err(TensorError::Contract(format!(
                "bce_with_logits: {} targets / {} weights for {}x{} logits",
                targets.len(),
                pos_weight.len(),
                r,
                c
            )));
        }
        let mut s = 0.0;
        for (k, (&zv, &y)) in z.data().iter().zip(targets).enumerate() {
            let w = pos_weight[k % c];
            // log σ(z) = -softplus(-z), log(1-σ(z)) = -softplus(z)
            s += w * y * softplus(-zv) + (1.0 - y) * softplus(zv);
        }
        Ok(self.unary(
            Tensor::scalar(s),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.to_vec(),
                pos_weight: pos_weight.to_vec(),
            },
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Calls `f` with the flat indices of each softmax lane.
pub(crate) fn for_each_lane<F>(r: usize, c: usize, axis: usize, mut f: F) -> Result<()>
where
    F: FnMut(std::iter::StepBy<std::ops::Range<usize>>) -> Result<()>,
{
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1))?;
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c))?;
        }
    }
    Ok(())
}
