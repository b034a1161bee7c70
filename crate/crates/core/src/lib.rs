//! Knowledge-grounded radiology report generation: posterior and prior
//! knowledge exploration feeding a gated causal decoder, with the tensor
//! engine, data pipeline and training loop it needs.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod io;
pub mod mkd;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod poke;
pub mod prke;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Mask, Tape, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
