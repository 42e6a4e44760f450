//! Trilinear resizing with half-pixel (align-corners = false) sampling.

use crate::error::{shape_err, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{dims5, Float, NodeId, OpKind, Tape, Tensor, Triple, Var};

/// Two source taps and their weights for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Taps {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Source coordinate `(t + 0.5) * in / out - 0.5`, clamped at the edges.
fn axis_taps(input: usize, output: usize) -> Vec<Taps> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|t| {
            let src = ((t as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Taps {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

struct Plan {
    input: Triple,
    output: Triple,
    taps: [Vec<Taps>; 3],
}

impl Plan {
    fn new(input: Triple, output: Triple) -> Result<Self> {
        if output.contains(&0) || input.contains(&0) {
            return Err(shape_err!(
                "trilinear_upsample: extents must be >= 1, input {:?} target {:?}",
                input,
                output
            ));
        }
        Ok(Self {
            input,
            output,
            taps: [
                axis_taps(input[0], output[0]),
                axis_taps(input[1], output[1]),
                axis_taps(input[2], output[2]),
            ],
        })
    }

    /// Calls `f(out_index, in_index, weight)` for all eight taps of each output.
    fn visit(&self, planes: usize, mut f: impl FnMut(usize, usize, f64)) {
        let [_, ih, iw] = self.input;
        let in_plane: usize = self.input.iter().product();
        let out_plane: usize = self.output.iter().product();
        for p in 0..planes {
            let mut o = p * out_plane;
            let base = p * in_plane;
            for tf in &self.taps[0] {
                for th in &self.taps[1] {
                    for tw in &self.taps[2] {
                        for (sf, wf) in [(tf.i0, tf.w0), (tf.i1, tf.w1)] {
                            for (sh, wh) in [(th.i0, th.w0), (th.i1, th.w1)] {
                                for (sw, ww) in [(tw.i0, tw.w0), (tw.i1, tw.w1)] {
                                    let wt = wf * wh * ww;
                                    if wt != 0.0 {
                                        f(o, base + (sf * ih + sh) * iw + sw, wt);
                                    }
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn trilinear_forward<T: Float>(x: &Tensor<T>, target: Triple) -> Result<Tensor<T>> {
    let [n, c, f, h, w] = x.dims5()?;
    let plan = Plan::new([f, h, w], target)?;
    let out_plane: usize = target.iter().product();
    let mut acc = vec![0.0f64; n * c * out_plane];
    let xd = x.data();
    plan.visit(n * c, |o, i, wt| acc[o] += wt * xd[i].to_f64_lossy());
    Tensor::new(
        &[n, c, target[0], target[1], target[2]],
        acc.into_iter().map(T::of).collect(),
    )
}

struct UpsampleOp {
    inputs: [Option<NodeId>; 1],
    plan: Plan,
    planes: usize,
}

impl<T: Float> Backward<T> for UpsampleOp {
    fn kind(&self) -> OpKind {
        OpKind::Upsample
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let in_plane: usize = self.plan.input.iter().product();
        let mut acc = vec![0.0f64; self.planes * in_plane];
        self.plan
            .visit(self.planes, |o, i, wt| acc[i] += wt * g[o].to_f64_lossy());
        Ok(vec![Some(acc.into_iter().map(T::of).collect())])
    }
}

impl<T: Float> Tape<T> {
    /// Resizes `(F, H, W)` to `target` by trilinear interpolation.
    pub fn trilinear_upsample(&mut self, x: &Var<T>, target: Triple) -> Result<Var<T>> {
        let [n, c, f, h, w] = dims5(x.shape())?;
        let out = trilinear_forward(x.value(), target)?;
        Ok(self.record(
            out,
            UpsampleOp {
                inputs: [x.node()],
                plan: Plan::new([f, h, w], target)?,
                planes: n * c,
            },
        ))
    }
}
