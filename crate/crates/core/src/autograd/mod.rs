//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so walking the tape backwards is a valid reverse
//! topological order. Tapes are cheap and meant to be discarded after
//! [`Tape::backward`]; parameters live in a [`ParamStore`] and are bound onto
//! the tape as leaves.
//!
//! Broadcasting is limited to two patterns: a `1×n` row added to every row
//! ([`Var::add_row`]) and an `m×1` column scaling every row
//! ([`Var::mul_col`]).

mod backward;
mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backward::Gradients;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Boolean attention mask; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Self {
        assert_eq!(rows * cols, allow.len(), "mask data length");
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub(crate) fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax(usize),
    MaskFill { x: usize, mask: Arc<Mask> },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    MeanRows(usize),
    Sum(usize),
    Dropout { x: usize, mask: Vec<f64> },
    NllSum { logp: usize, targets: Vec<Option<usize>> },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
        pos_weight: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Constant, false)
    }

    /// Input that receives a gradient (used for gradient checks).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value_arc(id), Op::Param(id), store.requires_grad(id))
    }

    /// Binds every parameter of `store`, indexable by [`ParamId::index`].
    pub fn bind_all(&self, store: &ParamStore) -> Vec<Var<'_>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        backward::run(self, loss.id)
    }

    pub(crate) fn push(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows(), v.cols())
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}
