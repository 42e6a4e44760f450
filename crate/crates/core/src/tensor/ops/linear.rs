//! Fully connected layer and the softmax cross-entropy loss.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{Float, NodeId, OpKind, Tape, Tensor, Var};

struct LinearOp<T: Float> {
    inputs: [Option<NodeId>; 3],
    x: Arc<Tensor<T>>,
    w: Arc<Tensor<T>>,
    n: usize,
    d: usize,
    dout: usize,
}

impl<T: Float> Backward<T> for LinearOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::Linear
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, d, dout) = (self.n, self.d, self.dout);
        let gx = self.inputs[0].map(|_| {
            let mut gx = vec![T::zero(); n * d];
            T::gemm(n, dout, d, T::one(), g, false, self.w.data(), false, T::zero(), &mut gx);
            gx
        });
        let gw = self.inputs[1].map(|_| {
            let mut gw = vec![T::zero(); dout * d];
            T::gemm(dout, n, d, T::one(), g, true, self.x.data(), false, T::zero(), &mut gw);
            gw
        });
        let gb = self.inputs[2].map(|_| {
            let mut gb = vec![T::zero(); dout];
            for row in g.chunks(dout) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            gb
        });
        Ok(vec![gx, gw, gb])
    }
}

struct SoftmaxCeOp<T: Float> {
    inputs: [Option<NodeId>; 1],
    probs: Vec<T>,
    labels: Vec<usize>,
    k: usize,
}

impl<T: Float> Backward<T> for SoftmaxCeOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::SoftmaxCrossEntropy
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let n = self.labels.len();
        let scale = g[0] / T::of(n as f64);
        let mut gx = self.probs.clone();
        for (i, &label) in self.labels.iter().enumerate() {
            gx[i * self.k + label] -= T::one();
        }
        gx.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(gx)])
    }
}

/// Row-wise softmax computed with max subtraction.
pub fn softmax_rows<T: Float>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).to_f64_lossy().exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / z)));
    }
    out
}

impl<T: Float> Tape<T> {
    /// `y = x W^T + b` for `x: [N, D]`, `W: [Dout, D]`, `b: [Dout]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (&[n, d], &[dout, wd]) = (x.shape(), w.shape()) else {
            return Err(shape_err!(
                "linear: expected x [N, D] and weight [Dout, D], got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        };
        if wd != d {
            return Err(shape_err!("linear: input has {d} features, weight expects {wd}"));
        }
        if bias.shape() != [dout] {
            return Err(shape_err!("linear: bias shape {:?} must be [{dout}]", bias.shape()));
        }
        let mut y = vec![T::zero(); n * dout];
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(bias.data());
        }
        T::gemm(n, d, dout, T::one(), x.data(), false, w.data(), true, T::one(), &mut y);
        let out = Tensor::new(&[n, dout], y)?;
        Ok(self.record(
            out,
            LinearOp {
                inputs: [x.node(), w.node(), bias.node()],
                x: x.value_arc(),
                w: w.value_arc(),
                n,
                d,
                dout,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let &[n, k] = logits.shape() else {
            return Err(shape_err!(
                "softmax_cross_entropy: logits must be [N, K], got {:?}",
                logits.shape()
            ));
        };
        if labels.len() != n {
            return Err(shape_err!(
                "softmax_cross_entropy: {} labels for a batch of {n}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut loss = 0.0f64;
        for (row, &label) in logits.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).to_f64_lossy();
            let z: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
            loss += z.ln() + max - row[label].to_f64_lossy();
        }
        loss /= n as f64;
        let probs = softmax_rows(logits.data(), k);
        Ok(self.record(
            Tensor::scalar(T::of(loss)),
            SoftmaxCeOp {
                inputs: [logits.node()],
                probs,
                labels: labels.to_vec(),
                k,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![5.0]).unwrap());
        assert_eq!(tape.linear(&x, &w, &b).unwrap().data(), &[16.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.linear(&x, &w, &b).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = tape.softmax_cross_entropy(&l, &[0, 1, 3]).unwrap();
        assert!((loss.value().item().unwrap() - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logit() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::new(&[1, 3], vec![0.0, 1e4, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(&l, &[1]).unwrap();
        assert!(loss.value().item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.softmax_cross_entropy(&l, &[3]).is_err());
    }
}
