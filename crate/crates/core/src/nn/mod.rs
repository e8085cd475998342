//! Float networks, training primitives and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use model::{Network, StudentNet, TeacherConfig, TeacherNet, NUM_CLASSES};
pub use tensor::{argmax, Tensor};
