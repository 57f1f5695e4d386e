//! Dense/sparse matrices, a reverse-mode tape for the layers the pipeline
//! uses, and the Adam optimizer.

pub mod gradcheck;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use params::{Adam, ParamId, ParamStore};
pub use sparse::{SparseAdj, SparseMatrix};
pub use tape::{Elementwise, Tape, Var, NORM_EPS};
pub use tensor::Tensor2;
