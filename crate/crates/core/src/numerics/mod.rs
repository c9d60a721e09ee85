//! Dense `f64` matrices, a reverse-mode tape, MLPs and the weight container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod sinkhorn;

pub use gradcheck::{finite_diff_check, finite_diff_check_strided};
pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use mlp::{mlp_forward, Activation, BoundMlp, DenseLayer, MlpWeights};
pub use params::Parameterized;
