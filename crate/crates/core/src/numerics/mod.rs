//! Dense tensors, reverse-mode differentiation, seeded sampling and simplex geometry.

pub mod linalg;
pub mod optim;
pub mod rng;
pub mod simplex;
pub mod tape;
pub mod tensor;

pub use rng::Rng;
pub use simplex::{check_simplex, project_simplex, sample_dirichlet, WeightVector};
pub use tape::{finite_diff_check, Gradients, Tape, Var};
pub use tensor::Tensor;
