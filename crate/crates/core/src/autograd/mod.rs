//! Dense tensors, a reverse-mode tape, optimizer and checkpoint IO.

mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_difference_check, finite_difference_report, GradCheckReport};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use store::ParameterStore;
pub use tensor::Tensor;
