//! Dense arrays, the MLP, reverse-mode gradients and the optimizer.

mod array;
pub(crate) mod kernels;
mod mlp;
mod optim;
mod tape;

pub use array::DenseArray;
pub use kernels::{sigmoid, Activation};
pub use mlp::{Layer, MlpParams};
pub use optim::{Adam, AdamConfig};
pub use tape::{GradientTape, Var};
