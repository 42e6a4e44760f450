//! Residual blocks, attention blocks, and the assembled network.
//!
//! Parameters live in a [`ParamStore`]; layers only hold slot indices. A
//! forward pass runs through a [`Ctx`], which binds each parameter to the
//! tape on first use and carries the batch-norm mode and buffers.

mod attention;
mod check;
mod layers;
mod network;
mod params;
mod residual;

pub use attention::{AttentionBlock, AttentionBlockSpec, AttentionOutput, Fusion, Head, MaskSource, MASK_HEAD_GAIN};
pub use check::{network_check_config, network_grad_check, reduced_spec, NETWORK_CHECK_BATCH};
pub use layers::{BatchNorm, Conv, Ctx, Linear};
pub use network::{build_res3atn, Network, NetworkOutput, NetworkSpec, StageShape};
pub use params::{BufferStore, ParamBuilder, ParamKind, ParamStore, Parameter, Role};
pub use residual::{ResidualBlock, ResidualBlockSpec};
