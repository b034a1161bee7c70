//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    grad: Vec<f64>,
    requires_grad: bool,
}

/// Ordered collection of learnable tensors addressed by dotted names such as
/// `poke.topic_attn.0.mha.wq.head0`.
///
/// Values are reference-counted so a forward pass can borrow them without
/// copying; updates go through [`ParamStore::value_mut`], which copies only if
/// a tape still holds the old value.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        let grad = vec![0.0; value.len()];
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            grad,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                left: entry.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].requires_grad
    }

    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.entries[id.0].requires_grad = on;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        assert_eq!(g.len(), grad.len(), "gradient length for {}", id.0);
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn grad_and_value_mut(&mut self, id: ParamId) -> (&[f64], &mut Tensor) {
        let e = &mut self.entries[id.0];
        (&e.grad, Arc::make_mut(&mut e.value))
    }
}
