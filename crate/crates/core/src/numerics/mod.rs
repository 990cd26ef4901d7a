//! Dense tensors, tape-based reverse-mode differentiation, MLP blocks, Adam, checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Csr, Graph, Lattice, LatticeStack, Var};
pub use mlp::{Activation, Init, Layer, Mlp};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
