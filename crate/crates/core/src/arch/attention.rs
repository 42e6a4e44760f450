//! Attention block: trunk branch `T`, soft mask branch `M`, and their fusion.
//!
//! The mask branch is an encoder/decoder. The encoder repeats
//! `maxpool(3, 2, 1) -> residual block` `depth` times; the decoder mirrors it
//! with `residual block -> trilinear resize` back to each encoder scale, adding
//! the encoder feature map at the deepest `min(skip_count, depth)` junctions.
//! A `1x1x1 conv -> BN -> ReLU -> 1x1x1 conv -> sigmoid` head produces `M`.

use crate::error::{Error, Result};
use crate::tensor::{Float, PoolParams, Tensor, Triple, Var, AXIS_NAMES};
use crate::tensor::ops::window_out_extent;

use super::layers::{BatchNorm, Conv, Ctx};
use super::params::ParamBuilder;
use super::residual::{ResidualBlock, ResidualBlockSpec};

/// Initial weight scale of the mask head's last convolution, so that a fresh
/// mask sits close to 0.5 everywhere.
pub const MASK_HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlockSpec {
    pub channels: usize,
    /// Number of pooling stages in the mask branch.
    pub depth: usize,
    /// Requested lateral skips; at most `depth` are realized.
    pub skip_count: usize,
    pub site: usize,
}

impl AttentionBlockSpec {
    /// Depths 3/2/1 and skip counts 4/2/0 for sites 1/2/3.
    pub fn for_site(site: usize, channels: usize) -> Result<Self> {
        let (depth, skip_count) = match site {
            1 => (3, 4),
            2 => (2, 2),
            3 => (1, 0),
            _ => return Err(Error::Arch(format!("attention site must be 1, 2 or 3, got {site}"))),
        };
        Ok(Self {
            channels,
            depth,
            skip_count,
            site,
        })
    }

    pub fn realized_skips(&self) -> usize {
        self.skip_count.min(self.depth)
    }

    /// Encoder scales `[input, after pool 1, ..., after pool depth]`.
    ///
    /// Every pooling stage needs at least 2 rows and columns of input; the
    /// frame axis is allowed to stay at 1.
    pub fn mask_scales(&self, input: Triple) -> Result<Vec<Triple>> {
        let pool = PoolParams::downsample();
        let mut scales = vec![input];
        for stage in 1..=self.depth {
            let cur = *scales.last().unwrap_or(&input);
            for a in 1..3 {
                if cur[a] < 2 {
                    return Err(Error::Shape(format!(
                        "attention site {}: mask pooling stage {stage} needs {} extent >= 2, got {} (input {:?})",
                        self.site, AXIS_NAMES[a], cur[a], input
                    )));
                }
            }
            let next: Triple = std::array::from_fn(|a| {
                window_out_extent(cur[a], pool.kernel[a], pool.stride[a], pool.padding[a]).unwrap_or(0)
            });
            scales.push(next);
        }
        Ok(scales)
    }
}

/// How the mask multiplies the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// `(1 + M) * T`.
    Residual,
    /// `M * T`.
    Plain,
}

/// Where `M` comes from for one forward pass.
#[derive(Clone, Debug)]
pub enum MaskSource<T: Float = f32> {
    Branch,
    /// The mask branch runs but its output is a constant for backward.
    Detached,
    /// A caller-provided constant; the mask branch is skipped.
    Hook(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct AttentionOutput<T: Float = f32> {
    pub trunk: Var<T>,
    pub mask: Var<T>,
    /// Fused value before the output residual block.
    pub fused: Var<T>,
    pub output: Var<T>,
}

/// `conv_b(relu(bn(conv_a(x))))`, both convs 1x1x1.
#[derive(Clone, Debug)]
pub struct Head {
    conv_a: Conv,
    bn: BatchNorm,
    conv_b: Conv,
}

impl Head {
    /// `gain` scales the initial weights of the final convolution.
    fn build<T: Float>(b: &mut ParamBuilder<T>, channels: usize, gain: f64) -> Result<Self> {
        b.scoped("head", |b| {
            Ok(Self {
                conv_a: Conv::build(b, "conv_a", channels, channels, 1, 1, false)?,
                bn: BatchNorm::build(b, "bn", channels)?,
                conv_b: Conv::build_with_gain(b, "conv_b", channels, channels, 1, 1, true, gain)?,
            })
        })
    }

    fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv_a.forward(ctx, x)?;
        let h = self.bn.forward_relu(ctx, &h)?;
        self.conv_b.forward(ctx, &h)
    }

    /// Parameter slots of the final convolution (weight, bias).
    pub fn final_conv(&self) -> (usize, Option<usize>) {
        (self.conv_b.weight, self.conv_b.bias)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub spec: AttentionBlockSpec,
    trunk: Vec<ResidualBlock>,
    pub trunk_head: Head,
    encoder: Vec<ResidualBlock>,
    decoder: Vec<ResidualBlock>,
    pub mask_head: Head,
    output: ResidualBlock,
}

impl AttentionBlock {
    pub fn build<T: Float>(b: &mut ParamBuilder<T>, name: &str, spec: AttentionBlockSpec) -> Result<Self> {
        let c = spec.channels;
        let rb = ResidualBlockSpec::preserving(c);
        b.scoped(name, |b| {
            let (trunk, trunk_head) = b.scoped("trunk", |b| {
                let blocks = vec![ResidualBlock::build(b, "res1", rb)?, ResidualBlock::build(b, "res2", rb)?];
                Ok((blocks, Head::build(b, c, 1.0)?))
            })?;
            let (encoder, decoder, mask_head) = b.scoped("mask", |b| {
                let enc = (1..=spec.depth)
                    .map(|i| ResidualBlock::build(b, &format!("enc{i}"), rb))
                    .collect::<Result<Vec<_>>>()?;
                let dec = (1..=spec.depth)
                    .map(|i| ResidualBlock::build(b, &format!("dec{i}"), rb))
                    .collect::<Result<Vec<_>>>()?;
                Ok((enc, dec, Head::build(b, c, MASK_HEAD_GAIN)?))
            })?;
            Ok(Self {
                spec,
                trunk,
                trunk_head,
                encoder,
                decoder,
                mask_head,
                output: ResidualBlock::build(b, "output", rb)?,
            })
        })
    }

    fn check_input<T: Float>(&self, x: &Var<T>) -> Result<Triple> {
        match x.shape() {
            &[_, c, f, h, w] if c == self.spec.channels => Ok([f, h, w]),
            s => Err(Error::Shape(format!(
                "attention site {} expects [N, {}, F, H, W], got {s:?}",
                self.spec.site, self.spec.channels
            ))),
        }
    }

    /// `T(x)`: two residual blocks and a two-conv head; shape preserved.
    pub fn trunk_forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.trunk {
            h = block.forward(ctx, &h)?;
        }
        self.trunk_head.forward(ctx, &h)
    }

    /// `M(x)` in `(0, 1)` with the shape of `x`.
    pub fn mask_forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let scales = self.spec.mask_scales(self.check_input(x)?)?;
        let pool = PoolParams::downsample();
        let mut skips = Vec::with_capacity(self.spec.depth + 1);
        skips.push(x.clone());
        let mut h = x.clone();
        for block in &self.encoder {
            h = ctx.tape.maxpool3d(&h, &pool)?;
            h = block.forward(ctx, &h)?;
            skips.push(h.clone());
        }
        let d = self.spec.depth;
        let with_skip = self.spec.realized_skips();
        for (level, block) in (1..=d).rev().zip(self.decoder.iter().rev()) {
            h = block.forward(ctx, &h)?;
            h = ctx.tape.trilinear_upsample(&h, scales[level - 1])?;
            // junction `level` merges scale `level - 1`; the deepest come first
            if d - level < with_skip {
                h = ctx.tape.add(&h, &skips[level - 1])?;
            }
        }
        let logits = self.mask_head.forward(ctx, &h)?;
        ctx.tape.sigmoid(&logits)
    }

    pub fn forward<T: Float>(
        &self,
        ctx: &mut Ctx<T>,
        x: &Var<T>,
        fusion: Fusion,
        source: &MaskSource<T>,
    ) -> Result<AttentionOutput<T>> {
        let trunk = self.trunk_forward(ctx, x)?;
        let mask = match source {
            MaskSource::Branch => self.mask_forward(ctx, x)?,
            MaskSource::Detached => self.mask_forward(ctx, x)?.detach(),
            MaskSource::Hook(m) => {
                if m.shape() != trunk.shape() {
                    return Err(Error::Shape(format!(
                        "mask hook shape {:?} differs from trunk shape {:?}",
                        m.shape(),
                        trunk.shape()
                    )));
                }
                Var::constant(m.clone())
            }
        };
        if mask.shape() != trunk.shape() {
            return Err(Error::Arch(format!(
                "internal: mask shape {:?} != trunk shape {:?}",
                mask.shape(),
                trunk.shape()
            )));
        }
        let fused = match fusion {
            Fusion::Residual => {
                let gain = ctx.tape.add_scalar(&mask, T::one())?;
                ctx.tape.mul(&gain, &trunk)?
            }
            Fusion::Plain => ctx.tape.mul(&mask, &trunk)?,
        };
        let output = self.output.forward(ctx, &fused)?;
        Ok(AttentionOutput {
            trunk,
            mask,
            fused,
            output,
        })
    }
}
