//! 3D convolution.
//!
//! Two interchangeable kernels: an im2col + GEMM path used for training and
//! a direct nested-loop path that serves as the reference. Both implement
//! forward and backward; [`ConvAlgo`] selects between them per tape.

use std::sync::Arc;

use rayon::prelude::*;

use super::window_out_dims;
use crate::error::{shape_err, Result};
use crate::tensor::tape::Backward;
use crate::tensor::{Float, NodeId, OpKind, Tape, Tensor, Triple, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Im2col,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: Triple,
    pub padding: Triple,
}

impl ConvParams {
    pub fn new(stride: Triple, padding: Triple) -> Self {
        Self { stride, padding }
    }

    /// Stride 1, no padding.
    pub fn unit() -> Self {
        Self::new([1; 3], [0; 3])
    }

    /// Padding that preserves extents for an odd cubic kernel at stride 1.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self::new([stride; 3], [kernel / 2; 3])
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    input: Triple,
    kernel: Triple,
    out: Triple,
    stride: Triple,
    pad: Triple,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, p: &ConvParams) -> Result<Self> {
        let &[n, cin, f, h, wd] = x else {
            return Err(shape_err!("conv3d: input must be (N, C, F, H, W), got {:?}", x));
        };
        let &[cout, wcin, kf, kh, kw] = w else {
            return Err(shape_err!(
                "conv3d: weight must be (Cout, Cin, kF, kH, kW), got {:?}",
                w
            ));
        };
        if wcin != cin {
            return Err(shape_err!(
                "conv3d: channel axis mismatch, input has {cin} channels but weight expects {wcin}"
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(shape_err!("conv3d: bias shape {:?} must be [{cout}]", b));
            }
        }
        let kernel = [kf, kh, kw];
        let input = [f, h, wd];
        let out = window_out_dims("conv3d", input, kernel, p.stride, p.padding)?;
        Ok(Self {
            n,
            cin,
            cout,
            input,
            kernel,
            out,
            stride: p.stride,
            pad: p.padding,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k_volume()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Input coordinate for output index `o` and kernel offset `k` on `axis`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }
}

fn im2col<T: Float>(g: &Geom, x: &[T], cols: &mut [T]) {
    let [of, oh, ow] = g.out;
    let [kf, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for dk in 0..kf {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for tf in 0..of {
                        let sf = g.src(0, tf, dk);
                        for th in 0..oh {
                            let sh = g.src(1, th, dh);
                            match (sf, sh) {
                                (Some(sf), Some(sh)) => {
                                    let base = (sf * ih + sh) * iw;
                                    for tw in 0..ow {
                                        dst[idx] = match g.src(2, tw, dw) {
                                            Some(sw) => xc[base + sw],
                                            None => T::zero(),
                                        };
                                        idx += 1;
                                    }
                                }
                                _ => {
                                    dst[idx..idx + ow].iter_mut().for_each(|v| *v = T::zero());
                                    idx += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &Geom, cols: &[T], dx: &mut [T]) {
    let [of, oh, ow] = g.out;
    let [kf, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for dk in 0..kf {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for tf in 0..of {
                        let sf = g.src(0, tf, dk);
                        for th in 0..oh {
                            if let (Some(sf), Some(sh)) = (sf, g.src(1, th, dh)) {
                                let base = (sf * ih + sh) * iw;
                                for tw in 0..ow {
                                    if let Some(sw) = g.src(2, tw, dw) {
                                        dxc[base + sw] += src[idx];
                                    }
                                    idx += 1;
                                }
                            } else {
                                idx += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_im2col<T: Float>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (p, k) = (g.out_plane(), g.col_rows());
    let sample_in = g.cin * g.in_plane();
    out.par_chunks_mut(g.cout * p)
        .zip(x.par_chunks(sample_in))
        .for_each(|(o, xs)| {
            if g.pointwise() {
                T::gemm(g.cout, k, p, T::one(), w, false, xs, false, T::zero(), o);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(g, xs, &mut cols);
                T::gemm(g.cout, k, p, T::one(), w, false, &cols, false, T::zero(), o);
            }
            if let Some(b) = bias {
                for (co, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
}

struct ConvGrads<T> {
    input: Option<Vec<T>>,
    weight: Option<Vec<T>>,
    bias: Option<Vec<T>>,
}

fn backward_im2col<T: Float>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (p, k) = (g.out_plane(), g.col_rows());
    let sample_in = g.cin * g.in_plane();
    let sample_out = g.cout * p;
    let wlen = g.cout * k;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * sample_in..(n + 1) * sample_in];
            let go = &gout[n * sample_out..(n + 1) * sample_out];
            let cols_owned;
            let cols: &[T] = if g.pointwise() {
                xs
            } else if need[1] {
                let mut c = vec![T::zero(); k * p];
                im2col(g, xs, &mut c);
                cols_owned = c;
                &cols_owned
            } else {
                &[]
            };
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); wlen];
                T::gemm(g.cout, p, k, T::one(), go, false, cols, true, T::zero(), &mut gw);
                gw
            });
            let gx = need[0].then(|| {
                let mut dcols = vec![T::zero(); k * p];
                T::gemm(k, g.cout, p, T::one(), w, true, go, false, T::zero(), &mut dcols);
                if g.pointwise() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); sample_in];
                    col2im(g, &dcols, &mut dx);
                    dx
                }
            });
            (gx, gw)
        })
        .collect();

    let mut input = need[0].then(|| Vec::with_capacity(g.n * sample_in));
    let mut weight = need[1].then(|| vec![T::zero(); wlen]);
    for (gx, gw) in per_sample {
        if let (Some(acc), Some(gx)) = (&mut input, gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gw)) = (&mut weight, gw) {
            acc.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
        }
    }
    ConvGrads {
        input,
        weight,
        bias: need[2].then(|| bias_grad(g, gout)),
    }
}

fn bias_grad<T: Float>(g: &Geom, gout: &[T]) -> Vec<T> {
    let p = g.out_plane();
    let mut gb = vec![0.0f64; g.cout];
    for sample in gout.chunks(g.cout * p) {
        for (co, chunk) in sample.chunks(p).enumerate() {
            gb[co] += chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
    }
    gb.into_iter().map(T::of).collect()
}

/// Visits every (output element, input element, weight element) triple.
fn for_each_tap(g: &Geom, mut f: impl FnMut(usize, usize, usize)) {
    let [of, oh, ow] = g.out;
    let [kf, kh, kw] = g.kernel;
    let [_, ih, iw] = g.input;
    let p = g.out_plane();
    for n in 0..g.n {
        for co in 0..g.cout {
            for tf in 0..of {
                for th in 0..oh {
                    for tw in 0..ow {
                        let o = (n * g.cout + co) * p + (tf * oh + th) * ow + tw;
                        for ci in 0..g.cin {
                            for dk in 0..kf {
                                let Some(sf) = g.src(0, tf, dk) else { continue };
                                for dh in 0..kh {
                                    let Some(sh) = g.src(1, th, dh) else { continue };
                                    for dw in 0..kw {
                                        let Some(sw) = g.src(2, tw, dw) else { continue };
                                        let xi = (n * g.cin + ci) * g.in_plane() + (sf * ih + sh) * iw + sw;
                                        let wi = (((co * g.cin + ci) * kf + dk) * kh + dh) * kw + dw;
                                        f(o, xi, wi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_direct<T: Float>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let p = g.out_plane();
    let mut acc = vec![0.0f64; out.len()];
    for_each_tap(g, |o, xi, wi| acc[o] += x[xi].to_f64_lossy() * w[wi].to_f64_lossy());
    for (i, (dst, a)) in out.iter_mut().zip(acc).enumerate() {
        let b = bias.map_or(0.0, |b| b[(i / p) % g.cout].to_f64_lossy());
        *dst = T::of(a + b);
    }
}

fn backward_direct<T: Float>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let mut gx = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; w.len()];
    for_each_tap(g, |o, xi, wi| {
        let go = gout[o].to_f64_lossy();
        gx[xi] += w[wi].to_f64_lossy() * go;
        gw[wi] += x[xi].to_f64_lossy() * go;
    });
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    ConvGrads {
        input: need[0].then(|| cast(gx)),
        weight: need[1].then(|| cast(gw)),
        bias: need[2].then(|| bias_grad(g, gout)),
    }
}

/// Forward convolution without a tape.
pub fn conv3d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &ConvParams,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), w.shape(), bias.map(|b| b.shape()), params)?;
    let [of, oh, ow] = g.out;
    let mut out = vec![T::zero(); g.n * g.cout * g.out_plane()];
    let b = bias.map(|b| b.data());
    match algo {
        ConvAlgo::Im2col => forward_im2col(&g, x.data(), w.data(), b, &mut out),
        ConvAlgo::Direct => forward_direct(&g, x.data(), w.data(), b, &mut out),
    }
    Tensor::new(&[g.n, g.cout, of, oh, ow], out)
}

/// Gradients `(input, weight, bias)` of a convolution for upstream `gout`.
pub fn conv3d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    params: &ConvParams,
    algo: ConvAlgo,
    gout: &[T],
) -> Result<(Vec<T>, Vec<T>, Option<Vec<T>>)> {
    let bshape = [w.shape()[0]];
    let g = Geom::new(x.shape(), w.shape(), with_bias.then_some(&bshape[..]), params)?;
    if gout.len() != g.n * g.cout * g.out_plane() {
        return Err(shape_err!("conv3d backward: upstream gradient has the wrong length"));
    }
    let grads = run_backward(&g, x.data(), w.data(), gout, [true, true, with_bias], algo);
    Ok((grads.input.unwrap(), grads.weight.unwrap(), grads.bias))
}

fn run_backward<T: Float>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: [bool; 3],
    algo: ConvAlgo,
) -> ConvGrads<T> {
    match algo {
        ConvAlgo::Im2col => backward_im2col(g, x, w, gout, need),
        ConvAlgo::Direct => backward_direct(g, x, w, gout, need),
    }
}

struct Conv3dOp<T: Float> {
    inputs: [Option<NodeId>; 3],
    x: Arc<Tensor<T>>,
    w: Arc<Tensor<T>>,
    geom: Geom,
    algo: ConvAlgo,
}

impl<T: Float> Backward<T> for Conv3dOp<T> {
    fn kind(&self) -> OpKind {
        OpKind::Conv3d
    }
    fn inputs(&self) -> &[Option<NodeId>] {
        &self.inputs
    }
    fn backward(&self, gout: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let need = self.inputs.map(|i| i.is_some());
        let g = run_backward(&self.geom, self.x.data(), self.w.data(), gout, need, self.algo);
        Ok(vec![g.input, g.weight, g.bias])
    }
}

impl<T: Float> Tape<T> {
    /// 3D convolution with zero padding, using this tape's [`ConvAlgo`].
    pub fn conv3d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        params: &ConvParams,
    ) -> Result<Var<T>> {
        let algo = self.conv_algo();
        let geom = Geom::new(x.shape(), w.shape(), bias.map(|b| b.shape()), params)?;
        let out = conv3d_forward(x.value(), w.value(), bias.map(|b| b.value()), params, algo)?;
        Ok(self.record(
            out,
            Conv3dOp {
                inputs: [x.node(), w.node(), bias.and_then(|b| b.node())],
                x: x.value_arc(),
                w: w.value_arc(),
                geom,
                algo,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::test_util::{rng, uniform};

    #[test]
    fn all_ones_sum_to_nine() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 3, 3]);
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let y = conv3d_forward(&x, &w, None, &ConvParams::unit(), algo).unwrap();
            assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
            assert_eq!(y.data(), &[9.0]);
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut r = rng(3);
        let x = uniform::<f32>(&[1, 1, 2, 3, 3], -1.0, 1.0, &mut r);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1, 1]);
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let y = conv3d_forward(&x, &w, None, &ConvParams::unit(), algo).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 7, 9, 10]);
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3, 3]);
        let p = ConvParams::new([2, 2, 3], [1, 0, 1]);
        let y = conv3d_forward(&x, &w, None, &p, ConvAlgo::Im2col).unwrap();
        // floor((in + 2 pad - k) / stride) + 1
        assert_eq!(y.shape(), &[1, 3, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_the_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::<f32>::zeros(&[1, 3, 1, 1, 1]);
        let err = conv3d_forward(&x, &w, None, &ConvParams::unit(), ConvAlgo::Im2col)
            .unwrap_err()
            .to_string();
        assert!(err.contains("channel"), "{err}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 5, 5]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, None, &ConvParams::unit(), ConvAlgo::Im2col)
            .unwrap_err()
            .to_string();
        assert!(err.contains("frame"), "{err}");
    }

    #[test]
    fn zero_stride_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        let w = Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]);
        let p = ConvParams::new([1, 0, 1], [0; 3]);
        assert!(conv3d_forward(&x, &w, None, &p, ConvAlgo::Im2col).is_err());
    }

    #[test]
    fn backward_paths_agree() {
        let mut r = rng(11);
        let x = uniform::<f64>(&[2, 3, 4, 5, 5], -1.0, 1.0, &mut r);
        let w = uniform::<f64>(&[4, 3, 3, 3, 3], -1.0, 1.0, &mut r);
        let p = ConvParams::new([2, 1, 2], [1, 1, 0]);
        let y = conv3d_forward(&x, &w, None, &p, ConvAlgo::Direct).unwrap();
        let gout: Vec<f64> = (0..y.numel()).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
        let a = conv3d_backward(&x, &w, true, &p, ConvAlgo::Im2col, &gout).unwrap();
        let b = conv3d_backward(&x, &w, true, &p, ConvAlgo::Direct, &gout).unwrap();
        for (u, v) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
            assert!((u - v).abs() < 1e-10);
        }
        for (u, v) in a.2.unwrap().iter().zip(&b.2.unwrap()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn fast_path_matches_oracle_on_random_configs() {
        use rand::Rng;
        let mut r = rng(2024);
        for _ in 0..24 {
            let k: Triple = std::array::from_fn(|_| r.random_range(1..=3));
            let pad: Triple = std::array::from_fn(|a| r.random_range(0..=k[a] / 2));
            let stride: Triple = std::array::from_fn(|_| r.random_range(1..=2));
            let ext: Triple = std::array::from_fn(|a| r.random_range(k[a]..=7));
            let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
            let x = uniform::<f32>(&[n, cin, ext[0], ext[1], ext[2]], -1.0, 1.0, &mut r);
            let w = uniform::<f32>(&[cout, cin, k[0], k[1], k[2]], -1.0, 1.0, &mut r);
            let b = uniform::<f32>(&[cout], -1.0, 1.0, &mut r);
            let p = ConvParams::new(stride, pad);
            let fast = conv3d_forward(&x, &w, Some(&b), &p, ConvAlgo::Im2col).unwrap();
            let slow = conv3d_forward(&x, &w, Some(&b), &p, ConvAlgo::Direct).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }

    #[test]
    fn strided_padded_example() {
        let mut r = rng(5);
        let x = uniform::<f32>(&[2, 3, 4, 6, 6], -1.0, 1.0, &mut r);
        let w = uniform::<f32>(&[5, 3, 3, 3, 3], -1.0, 1.0, &mut r);
        let p = ConvParams::new([2; 3], [1; 3]);
        let fast = conv3d_forward(&x, &w, None, &p, ConvAlgo::Im2col).unwrap();
        let slow = conv3d_forward(&x, &w, None, &p, ConvAlgo::Direct).unwrap();
        assert_eq!(fast.shape(), &[2, 5, 2, 3, 3]);
        assert!(fast.max_abs_diff(&slow) < 1e-5);
    }
}
