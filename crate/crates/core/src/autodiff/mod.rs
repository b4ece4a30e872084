//! Reverse-mode differentiation, masked conditioners and the optimiser.

pub mod adam;
pub mod made;
pub mod tape;

pub use adam::AdamState;
pub use made::{AutoregressiveMask, MaskedMlp};
pub use tape::{grad, Gradients, Graph, Mat, ParamId, ParamStore, ParamTensor, Var};
