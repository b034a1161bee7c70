use super::ops::{for_each_lane, sigmoid};
use super::{Op, Tape, Var};
use crate::params::ParamStore;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Result, Tensor, TensorError};

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, crate::params::ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(&self.shapes[var.id], g.clone()).ok()
    }

    /// Adds parameter gradients into the store (accumulating across calls).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

pub(super) fn run(tape: &Tape, loss: usize) -> Result<Gradients> {
    let nodes = tape.nodes.borrow();
    let loss_shape = nodes[loss].value.shape();
    if loss_shape != [1, 1] {
        return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
    }
    let n = nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[loss] = Some(vec![1.0]);

    for id in (0..=loss).rev() {
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let out = &node.value;
        let len_of = |i: usize| nodes[i].value.len();
        let wants = |i: usize| nodes[i].needs_grad;

        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {
                grads[id] = Some(g);
                continue;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (av.rows(), av.cols());
                let nn = bv.cols();
                if wants(*a) {
                    add_into(&mut grads[*a], m * k, |ga| matmul_nt_into(&g, bv.data(), ga, m, nn, k));
                }
                if wants(*b) {
                    add_into(&mut grads[*b], k * nn, |gb| matmul_tn_into(av.data(), &g, gb, m, k, nn));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                add_into(&mut grads[*a], r * c, |ga| {
                    // out is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(&mut grads[*a], g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                if wants(*b) {
                    add_into(&mut grads[*b], g.len(), |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    add_into(&mut grads[*a], g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv.data()[i];
                        }
                    });
                }
                if wants(*b) {
                    add_into(&mut grads[*b], g.len(), |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av.data()[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                add_into(&mut grads[*a], g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddRow(a, row) => {
                let c = out.cols();
                if wants(*a) {
                    add_into(&mut grads[*a], g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                if wants(*row) {
                    add_into(&mut grads[*row], c, |gr| {
                        for (k, y) in g.iter().enumerate() {
                            gr[k % c] += y;
                        }
                    });
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (&nodes[*a].value, &nodes[*col].value);
                let (m, c) = (av.rows(), av.cols());
                if wants(*a) {
                    add_into(&mut grads[*a], m * c, |ga| {
                        for i in 0..m {
                            let s = cv.data()[i];
                            for j in 0..c {
                                ga[i * c + j] += g[i * c + j] * s;
                            }
                        }
                    });
                }
                if wants(*col) {
                    add_into(&mut grads[*col], m, |gc| {
                        for i in 0..m {
                            gc[i] += (0..c).map(|j| g[i * c + j] * av.data()[i * c + j]).sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x.data()[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..g.len() {
                        let y = out.data()[i];
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                add_into(&mut grads[*x], r * c, |gx| {
                    for_each_lane(r, c, *axis, |idx| {
                        let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                        for i in idx {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                        Ok(())
                    })
                    .expect("lanes are infallible here");
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = (out.rows(), out.cols());
                add_into(&mut grads[*x], r * c, |gx| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let gsum: f64 = g[row.clone()].iter().sum();
                        for k in row {
                            gx[k] += g[k] - out.data()[k].exp() * gsum;
                        }
                    }
                });
            }
            Op::MaskFill { x, mask } => {
                add_into(&mut grads[*x], g.len(), |gx| {
                    for (i, &ok) in mask.as_slice().iter().enumerate() {
                        if ok {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let gv = nodes[*gain].value.data();
                if wants(*x) {
                    add_into(&mut grads[*x], r * c, |gx| {
                        for i in 0..r {
                            let row = i * c..(i + 1) * c;
                            let dxhat: Vec<f64> = row.clone().map(|k| g[k] * gv[k - i * c]).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                            let s = rstd[i] / c as f64;
                            for (j, k) in row.enumerate() {
                                gx[k] += s * (c as f64 * dxhat[j] - sum_d - xhat[k] * sum_dx);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    add_into(&mut grads[*gain], c, |gg| {
                        for k in 0..r * c {
                            gg[k % c] += g[k] * xhat[k];
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[*bias], c, |gb| {
                        for k in 0..r * c {
                            gb[k % c] += g[k];
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p].value.cols();
                    if wants(p) {
                        add_into(&mut grads[p], r * pc, |gp| {
                            for i in 0..r {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = len_of(p);
                    if wants(p) {
                        add_into(&mut grads[p], len, |gp| {
                            gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let total = len_of(*x);
                add_into(&mut grads[*x], total, |gx| {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (out.rows(), out.cols());
                let c = nodes[*x].value.cols();
                add_into(&mut grads[*x], r * c, |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let c = out.cols();
                let total = len_of(*table);
                add_into(&mut grads[*table], total, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let xv = &nodes[*x].value;
                let (r, c) = (xv.rows(), xv.cols());
                add_into(&mut grads[*x], r * c, |gx| {
                    for k in 0..r * c {
                        gx[k] += g[k % c] / r as f64;
                    }
                });
            }
            Op::Sum(x) => {
                let len = len_of(*x);
                add_into(&mut grads[*x], len, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Dropout { x, mask } => {
                add_into(&mut grads[*x], g.len(), |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::NllSum { logp, targets } => {
                let c = nodes[*logp].value.cols();
                let total = len_of(*logp);
                add_into(&mut grads[*logp], total, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            gl[i * c + t] -= g[0];
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            } => {
                let z = &nodes[*logits].value;
                let c = z.cols();
                add_into(&mut grads[*logits], z.len(), |gz| {
                    for k in 0..z.len() {
                        let s = sigmoid(z.data()[k]);
                        let y = targets[k];
                        let w = pos_weight[k % c];
                        gz[k] += g[0] * (w * y * (s - 1.0) + (1.0 - y) * s);
                    }
                });
            }
        }
    }

    let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
    let params = nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n.op {
            Op::Param(pid) => Some((i, pid)),
            _ => None,
        })
        .collect();
    Ok(Gradients { grads, shapes, params })
}
