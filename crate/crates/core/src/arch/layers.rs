//! Forward context and the three parameterized layers.

use crate::error::Result;
use crate::tensor::{BatchNormParams, BnMode, ConvParams, Float, Tape, Var};

use super::params::{BufferStore, ParamBuilder, ParamKind, ParamStore};

/// Everything a forward pass needs: the tape, parameters, and BN buffers.
pub struct Ctx<'a, T: Float = f32> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    buffers: &'a mut BufferStore<T>,
    bound: Vec<Option<Var<T>>>,
    pub mode: BnMode,
    pub bn: BatchNormParams,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a ParamStore<T>,
        buffers: &'a mut BufferStore<T>,
        mode: BnMode,
    ) -> Self {
        Self {
            tape,
            bound: vec![None; params.len()],
            params,
            buffers,
            mode,
            bn: BatchNormParams::default(),
        }
    }

    /// Uses `var` in place of parameter `slot` for this pass.
    pub fn bind(&mut self, slot: usize, var: Var<T>) {
        self.bound[slot] = Some(var);
    }

    /// The tape variable of parameter `slot`, created on first use.
    pub fn param(&mut self, slot: usize) -> Var<T> {
        if let Some(v) = &self.bound[slot] {
            return v.clone();
        }
        let v = self.tape.param(slot, self.params.get(slot).value.clone());
        self.bound[slot] = Some(v.clone());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub params: ConvParams,
}

impl Conv {
    /// Cubic kernel `k` with "same" padding `k / 2`.
    pub fn build<T: Float>(
        b: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build_with_gain(b, name, cin, cout, k, stride, bias, 1.0)
    }

    /// As `build`, with the He standard deviation multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_with_gain<T: Float>(
        b: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let fan_in = cin * k * k * k;
            let weight = b.scaled_normal("weight", ParamKind::ConvWeight, &[cout, cin, k, k, k], fan_in, gain)?;
            let bias = if bias {
                Some(b.constant("bias", ParamKind::Bias, &[cout], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                params: ConvParams::same(k, stride),
            })
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|s| ctx.param(s));
        ctx.tape.conv3d(x, &w, b.as_ref(), &self.params)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub buffer: usize,
}

impl BatchNorm {
    pub fn build<T: Float>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.constant("gamma", ParamKind::BnGamma, &[channels], 1.0)?,
                beta: b.constant("beta", ParamKind::BnBeta, &[channels], 0.0)?,
                buffer: b.bn_buffer(channels),
            })
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let (mode, bn) = (ctx.mode, ctx.bn);
        let stats = &mut ctx.buffers.stats[self.buffer];
        ctx.tape.batchnorm3d(x, &g, &b, stats, mode, &bn)
    }

    /// `relu(bn(x))`.
    pub fn forward_relu<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.forward(ctx, x)?;
        ctx.tape.relu(&y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn build<T: Float>(b: &mut ParamBuilder<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.he_normal("weight", ParamKind::LinearWeight, &[dout, din], din)?,
                bias: b.constant("bias", ParamKind::Bias, &[dout], 0.0)?,
            })
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, &w, &b)
    }
}
