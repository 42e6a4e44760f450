//! Pre-activation bottleneck residual block.

use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

use super::layers::{BatchNorm, Conv, Ctx};
use super::params::ParamBuilder;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    /// Stride of the 3x3x3 convolution, applied on every axis.
    pub mid_stride: usize,
}

impl ResidualBlockSpec {
    pub fn new(in_channels: usize, bottleneck_channels: usize, out_channels: usize, mid_stride: usize) -> Self {
        Self {
            in_channels,
            bottleneck_channels,
            out_channels,
            mid_stride,
        }
    }

    /// Channels preserved, stride 1, bottleneck a quarter of the width.
    pub fn preserving(channels: usize) -> Self {
        Self::new(channels, (channels / 4).max(1), channels, 1)
    }

    pub fn identity_shortcut(&self) -> bool {
        self.in_channels == self.out_channels && self.mid_stride == 1
    }
}

/// `conv3(relu(bn3(conv2(relu(bn2(conv1(relu(bn1(x))))))))) + shortcut`.
///
/// The projection shortcut, when present, reads the pre-activated input.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    bn3: BatchNorm,
    conv3: Conv,
    shortcut: Option<Conv>,
}

impl ResidualBlock {
    pub fn build<T: Float>(b: &mut ParamBuilder<T>, name: &str, spec: ResidualBlockSpec) -> Result<Self> {
        let ResidualBlockSpec {
            in_channels: cin,
            bottleneck_channels: mid,
            out_channels: cout,
            mid_stride: s,
        } = spec;
        if cin == 0 || mid == 0 || cout == 0 || s == 0 {
            return Err(Error::Arch(format!("residual block {name}: zero channels or stride in {spec:?}")));
        }
        b.scoped(name, |b| {
            Ok(Self {
                spec,
                bn1: BatchNorm::build(b, "bn1", cin)?,
                conv1: Conv::build(b, "conv1", cin, mid, 1, 1, false)?,
                bn2: BatchNorm::build(b, "bn2", mid)?,
                conv2: Conv::build(b, "conv2", mid, mid, 3, s, false)?,
                bn3: BatchNorm::build(b, "bn3", mid)?,
                conv3: Conv::build(b, "conv3", mid, cout, 1, 1, false)?,
                shortcut: if spec.identity_shortcut() {
                    None
                } else {
                    Some(Conv::build(b, "shortcut", cin, cout, 1, s, false)?)
                },
            })
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if x.shape().len() != 5 || c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "residual block expects {} input channels, got shape {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let pre = self.bn1.forward_relu(ctx, x)?;
        let h = self.conv1.forward(ctx, &pre)?;
        let h = self.bn2.forward_relu(ctx, &h)?;
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.bn3.forward_relu(ctx, &h)?;
        let h = self.conv3.forward(ctx, &h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(ctx, &pre)?,
            None => x.clone(),
        };
        ctx.tape.add(&h, &skip)
    }

    /// Weight slot of the last convolution of the branch.
    pub fn last_conv_weight(&self) -> usize {
        self.conv3.weight
    }
}
