//! Parameter construction and per-pass binding shared by the model blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Glorot-uniform initialized matrix.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, rows, cols, a)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::new(&[rows, cols], data)?)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(rows, cols, value))
    }
}

/// Parameters of one store bound onto a tape, plus pass-wide settings.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    pub dropout: f64,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, dropout: f64) -> Self {
        Self {
            tape,
            vars: tape.bind_all(store),
            dropout,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.index()]
    }
}

/// `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = b.matrix("weight", input, output)?;
        let bias = if bias { Some(b.constant("bias", 1, output, 0.0)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(ctx.p(b)),
            None => Ok(y),
        }
    }
}
