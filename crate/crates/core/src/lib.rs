//! Res3ATN: a 3D residual attention network for hand-gesture recognition in
//! video clips, built on a small self-contained tensor engine.
//!
//! * [`tensor`]: dense tensors, reverse-mode tape, 3D operators, gradient checks
//! * [`arch`]: residual bottlenecks, attention blocks and the full network
//! * [`optim`]: Nesterov SGD with L2 weight decay
//! * [`data`]: clips, augmentation, the synthetic motion dataset, `.r3clip` I/O
//! * [`train`]: training and evaluation loops, checkpoints, ablations, mask export
//! * [`cli`]: run configuration files and the command implementations

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
