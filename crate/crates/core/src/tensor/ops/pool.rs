//! Max pooling with recorded argmax routing, and global average pooling.

use super::window_out_dims;
use crate::error::{shape_err, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{dims5, Float, NodeId, OpKind, Tape, Tensor, Triple, Var, AXIS_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: Triple,
    pub stride: Triple,
    pub padding: Triple,
}

impl PoolParams {
    pub fn new(kernel: Triple, stride: Triple, padding: Triple) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// kernel 3, stride 2, padding 1 on every axis.
    pub fn downsample() -> Self {
        Self::new([3; 3], [2; 3], [1; 3])
    }
}

/// Output and, per output element, the flat input index it was taken from.
pub fn maxpool3d_forward<T: Float>(x: &Tensor<T>, p: &PoolParams) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, f, h, w] = x.dims5()?;
    for a in 0..3 {
        if 2 * p.padding[a] > p.kernel[a] {
            return Err(shape_err!(
                "maxpool3d: padding {} exceeds half the kernel {} along the {} axis",
                p.padding[a],
                p.kernel[a],
                AXIS_NAMES[a]
            ));
        }
    }
    let out = window_out_dims("maxpool3d", [f, h, w], p.kernel, p.stride, p.padding)?;
    let [of, oh, ow] = out;
    let in_plane = f * h * w;
    let out_plane = of * oh * ow;
    let mut values = Vec::with_capacity(n * c * out_plane);
    let mut argmax = Vec::with_capacity(n * c * out_plane);
    let xd = x.data();
    let range = |o: usize, a: usize, extent: usize| {
        let start = (o * p.stride[a]) as isize - p.padding[a] as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + p.kernel[a] as isize).min(extent as isize)).max(0) as usize;
        lo..hi
    };
    for plane in 0..n * c {
        let base = plane * in_plane;
        for tf in 0..of {
            let rf = range(tf, 0, f);
            for th in 0..oh {
                let rh = range(th, 1, h);
                for tw in 0..ow {
                    let rw = range(tw, 2, w);
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    // ascending scan with strict `>` keeps the lowest index on ties
                    for sf in rf.clone() {
                        for sh in rh.clone() {
                            for sw in rw.clone() {
                                let i = base + (sf * h + sh) * w + sw;
                                if xd[i] > best || best_i == usize::MAX {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(shape_err!("maxpool3d: window lies entirely in padding"));
                    }
                    values.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, c, of, oh, ow], values)?, argmax))
}

struct MaxPoolOp {
    inputs: [Option<NodeId>; 1],
    argmax: Vec<usize>,
    in_numel: usize,
}

impl<T: Float> Backward<T> for MaxPoolOp {
    fn kind(&self) -> OpKind {
        OpKind::MaxPool3d
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut gx = vec![T::zero(); self.in_numel];
        for (&i, &v) in self.argmax.iter().zip(g) {
            gx[i] += v;
        }
        Ok(vec![Some(gx)])
    }
}

struct AvgPoolOp {
    inputs: [Option<NodeId>; 1],
    plane: usize,
}

impl<T: Float> Backward<T> for AvgPoolOp {
    fn kind(&self) -> OpKind {
        OpKind::AvgPool3d
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let inv = T::of(1.0 / self.plane as f64);
        let mut gx = Vec::with_capacity(g.len() * self.plane);
        for &v in g {
            gx.extend(std::iter::repeat_n(v * inv, self.plane));
        }
        Ok(vec![Some(gx)])
    }
}

impl<T: Float> Tape<T> {
    pub fn maxpool3d(&mut self, x: &Var<T>, p: &PoolParams) -> Result<Var<T>> {
        let (out, argmax) = maxpool3d_forward(x.value(), p)?;
        Ok(self.record(
            out,
            MaxPoolOp {
                inputs: [x.node()],
                argmax,
                in_numel: x.value().numel(),
            },
        ))
    }

    /// Global mean over `(F, H, W)`: `[N, C, F, H, W] -> [N, C, 1, 1, 1]`.
    pub fn avgpool3d_adaptive(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let [n, c, f, h, w] = dims5(x.shape())?;
        let plane = f * h * w;
        if plane == 0 {
            return Err(shape_err!("avgpool3d: empty spatial/temporal extent"));
        }
        let data = x
            .data()
            .chunks(plane)
            .map(|ch| T::of(ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64))
            .collect();
        let out = Tensor::new(&[n, c, 1, 1, 1], data)?;
        Ok(self.record(out, AvgPoolOp { inputs: [x.node()], plane }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::window_out_extent;

    #[test]
    fn two_by_two_max() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = PoolParams::new([1, 2, 2], [1; 3], [0; 3]);
        let (y, idx) = maxpool3d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn downsample_extent() {
        assert_eq!(window_out_extent(56, 3, 2, 1), Some(28));
        assert_eq!(window_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(window_out_extent(1, 3, 2, 1), Some(1));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 2, 2], 5.0);
        let p = PoolParams::new([1, 2, 2], [1; 3], [0; 3]);
        let (_, idx) = maxpool3d_forward(&x, &p).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn negative_inputs_ignore_padding() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1, 1], -3.0);
        let (y, _) = maxpool3d_forward(&x, &PoolParams::downsample()).unwrap();
        assert_eq!(y.data(), &[-3.0]);
    }

    #[test]
    fn oversized_window_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 2, 2]);
        let p = PoolParams::new([1, 3, 3], [1; 3], [0; 3]);
        assert!(maxpool3d_forward(&x, &p).is_err());
    }

    #[test]
    fn avgpool_values() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[2, 3, 2, 3, 4], 7.0));
        let y = tape.avgpool3d_adaptive(&c).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
        let x = tape.constant(Tensor::new(&[1, 1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
        assert_eq!(tape.avgpool3d_adaptive(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_routes_one_per_window() {
        use crate::tensor::ops::test_util::{rng, uniform};
        let mut r = rng(17);
        let x = uniform::<f32>(&[1, 2, 4, 5, 5], -1.0, 1.0, &mut r);
        let p = PoolParams::new([2; 3], [2; 3], [0; 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.maxpool3d(&v, &p).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&v).unwrap();
        // non-overlapping 2x2x2 windows: brute-force each window's argmax
        let mut expected = vec![0.0f32; x.numel()];
        let [_, c, f, h, w] = x.dims5().unwrap();
        for ch in 0..c {
            for of in 0..f / 2 {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let mut best = (f32::NEG_INFINITY, 0);
                        for df in 0..2 {
                            for dh in 0..2 {
                                for dw in 0..2 {
                                    let i = (((ch * f + 2 * of + df) * h) + 2 * oh + dh) * w + 2 * ow + dw;
                                    if x.data()[i] > best.0 {
                                        best = (x.data()[i], i);
                                    }
                                }
                            }
                        }
                        expected[best.1] += 1.0;
                    }
                }
            }
        }
        assert_eq!(g.data(), expected.as_slice());
        assert_eq!(g.sum(), y.value().numel() as f64);
    }
}
