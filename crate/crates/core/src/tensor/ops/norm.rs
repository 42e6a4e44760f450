//! Per-channel batch normalization over `(N, F, H, W)`.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{dims5, Float, NodeId, OpKind, Tape, Tensor, Var};

/// How a batch-norm layer normalizes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, and the running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching the running statistics.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T: Float = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Set once the statistics have been updated by training or loaded.
    pub ready: bool,
    /// Training updates applied so far. Update `t` (from 0) blends with
    /// weight `max(momentum, 1 / (t + 1))`, so early averages are cumulative
    /// means instead of being dominated by the initial `0` / `1`.
    pub updates: u64,
}

impl<T: Float> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            ready: false,
            updates: 0,
        }
    }

    /// Marks externally provided statistics as settled.
    pub fn mark_loaded(&mut self) {
        self.ready = true;
        self.updates = u64::MAX;
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }
}

struct BatchNormOp<T: Float> {
    inputs: [Option<NodeId>; 3],
    xhat: Arc<Vec<T>>,
    inv_std: Vec<f64>,
    gamma: Arc<Tensor<T>>,
    channels: usize,
    plane: usize,
    /// `true` when the batch statistics were used (mean/var depend on x).
    batch_stats: bool,
}

impl<T: Float> Backward<T> for BatchNormOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::BatchNorm3d
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let c = self.channels;
        let s = self.plane;
        let n = g.len() / (c * s);
        let m = (n * s) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (block, (gb, xb)) in g.chunks(s).zip(self.xhat.chunks(s)).enumerate() {
            let ch = block % c;
            for (&dy, &xh) in gb.iter().zip(xb) {
                let dy = dy.to_f64_lossy();
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * xh.to_f64_lossy();
            }
        }
        let gx = self.inputs[0].map(|_| {
            let mut gx = Vec::with_capacity(g.len());
            for (block, (gb, xb)) in g.chunks(s).zip(self.xhat.chunks(s)).enumerate() {
                let ch = block % c;
                let gamma = self.gamma.data()[ch].to_f64_lossy();
                let k = gamma * self.inv_std[ch];
                if self.batch_stats {
                    let (mean_dy, mean_dyx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    gx.extend(gb.iter().zip(xb).map(|(&dy, &xh)| {
                        T::of(k * (dy.to_f64_lossy() - mean_dy - xh.to_f64_lossy() * mean_dyx))
                    }));
                } else {
                    gx.extend(gb.iter().map(|&dy| T::of(k * dy.to_f64_lossy())));
                }
            }
            gx
        });
        let gg = self.inputs[1].map(|_| sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
        let gbeta = self.inputs[2].map(|_| sum_dy.iter().map(|&v| T::of(v)).collect());
        Ok(vec![gx, gg, gbeta])
    }
}

impl<T: Float> Tape<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &mut BnStats<T>,
        mode: BnMode,
        params: &BatchNormParams,
    ) -> Result<Var<T>> {
        let [n, c, f, h, w] = dims5(x.shape())?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if v.shape() != [c] {
                return Err(shape_err!(
                    "batchnorm3d: {name} shape {:?} must be [{c}] (channel axis)",
                    v.shape()
                ));
            }
        }
        if stats.channels() != c {
            return Err(shape_err!(
                "batchnorm3d: running stats hold {} channels, input has {c}",
                stats.channels()
            ));
        }
        let plane = f * h * w;
        let m = n * plane;
        let xd = x.data();

        let (mean, var) = match mode {
            BnMode::Train | BnMode::Batch => {
                if m < 2 {
                    return Err(Error::BatchNorm(format!(
                        "batch statistics need N*F*H*W >= 2 per channel, got {m}"
                    )));
                }
                let mut sum = vec![0.0f64; c];
                for (block, chunk) in xd.chunks(plane).enumerate() {
                    sum[block % c] += chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
                let mut sq = vec![0.0f64; c];
                for (block, chunk) in xd.chunks(plane).enumerate() {
                    let mu = mean[block % c];
                    sq[block % c] += chunk
                        .iter()
                        .map(|v| (v.to_f64_lossy() - mu).powi(2))
                        .sum::<f64>();
                }
                let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
                if mode == BnMode::Train {
                    let mom = params.momentum.max(1.0 / (stats.updates as f64 + 1.0));
                    stats.updates = stats.updates.saturating_add(1);
                    let unbias = m as f64 / (m as f64 - 1.0);
                    for ch in 0..c {
                        let rm = &mut stats.running_mean.data_mut()[ch];
                        *rm = T::of((1.0 - mom) * rm.to_f64_lossy() + mom * mean[ch]);
                        let rv = &mut stats.running_var.data_mut()[ch];
                        *rv = T::of((1.0 - mom) * rv.to_f64_lossy() + mom * var[ch] * unbias);
                    }
                    stats.ready = true;
                }
                (mean, var)
            }
            BnMode::Eval => {
                if !stats.ready {
                    return Err(Error::BatchNorm(
                        "eval mode before any running-stat update; train first or load a checkpoint"
                            .into(),
                    ));
                }
                let mean = stats.running_mean.data().iter().map(|v| v.to_f64_lossy()).collect();
                let var = stats.running_var.data().iter().map(|v| v.to_f64_lossy()).collect();
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();

        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (block, chunk) in xd.chunks(plane).enumerate() {
            let ch = block % c;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let g = gamma.data()[ch].to_f64_lossy();
            let b = beta.data()[ch].to_f64_lossy();
            for &v in chunk {
                let xh = (v.to_f64_lossy() - mu) * is;
                xhat.push(T::of(xh));
                out.push(T::of(g * xh + b));
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.record(
            out,
            BatchNormOp {
                inputs: [x.node(), gamma.node(), beta.node()],
                xhat: Arc::new(xhat),
                inv_std,
                gamma: gamma.value_arc(),
                channels: c,
                plane,
                batch_stats: mode != BnMode::Eval,
            },
        ))
    }
}
