//! Dense `f64` tensors, a reverse-mode tape, layers, and Adam.

pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{same_padded_len, sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, Grads};
pub use params::{ParamId, ParamStore, Parameter};
pub(crate) use params::{read_exact, read_f64, read_u16, read_u32};
pub use rng::{Rng, SeedStream};
pub use tensor::Tensor;
