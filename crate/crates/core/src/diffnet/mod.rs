//! Small reverse-mode differentiation core: tensors, a per-pass tape, graph
//! layers, Dirichlet machinery, Adam and a finite-difference checker.

pub mod dirichlet;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod special;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use layers::{gcn_propagation, global_sum_pool, neighbor_sum_pool, Dense, GatLayer, GcnLayer};
pub use optim::Adam;
pub use tape::{ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor2;
