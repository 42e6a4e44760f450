//! Independent seven-loop convolution oracle, plus the adjoint identity
//! `<g, conv(x, w)> = <dx, x> = <dw, w>` for the backward pass.

use proptest::prelude::*;
use res3atn::tensor::ops::conv::{conv3d_backward, conv3d_forward};
use res3atn::tensor::{ConvAlgo, ConvParams, Tensor};

#[derive(Clone, Debug)]
struct Case {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Vec<f64>,
    stride: [usize; 3],
    padding: [usize; 3],
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..3, 1usize..4, 1usize..4, prop::array::uniform3(1usize..4), prop::array::uniform3(1usize..3))
        .prop_flat_map(|(n, cin, cout, k, stride)| {
            let padding = prop::array::uniform3(0usize..2).prop_map(move |p| std::array::from_fn(|a| p[a].min(k[a] / 2)));
            let ext = (0usize..4, 0usize..4, 0usize..4).prop_map(move |(a, b, c)| [k[0] + a, k[1] + b, k[2] + c]);
            (Just((n, cin, cout, k, stride)), padding, ext)
        })
        .prop_flat_map(|((n, cin, cout, k, stride), padding, ext)| {
            let xs = [n, cin, ext[0], ext[1], ext[2]];
            let ws = [cout, cin, k[0], k[1], k[2]];
            (
                prop::collection::vec(-1.0f64..1.0, xs.iter().product::<usize>()),
                prop::collection::vec(-1.0f64..1.0, ws.iter().product::<usize>()),
                prop::collection::vec(-1.0f64..1.0, cout),
            )
                .prop_map(move |(xd, wd, b)| Case {
                    x: Tensor::new(&xs, xd).unwrap(),
                    w: Tensor::new(&ws, wd).unwrap(),
                    b,
                    stride,
                    padding,
                })
        })
}

fn naive(c: &Case) -> (Vec<usize>, Vec<f64>) {
    let xs = c.x.shape();
    let ws = c.w.shape();
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let out: Vec<usize> = (0..3).map(|a| (xs[2 + a] + 2 * c.padding[a] - ws[2 + a]) / c.stride[a] + 1).collect();
    let mut y = vec![0.0; n * cout * out[0] * out[1] * out[2]];
    let mut idx = 0;
    for ni in 0..n {
        for co in 0..cout {
            for of in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = c.b[co];
                        for ci in 0..cin {
                            for kf in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let pos = [of * c.stride[0] + kf, oh * c.stride[1] + kh, ow * c.stride[2] + kw];
                                        if (0..3).any(|a| pos[a] < c.padding[a] || pos[a] - c.padding[a] >= xs[2 + a]) {
                                            continue;
                                        }
                                        let [f, h, w] = std::array::from_fn(|a| pos[a] - c.padding[a]);
                                        let xi = (((ni * cin + ci) * xs[2] + f) * xs[3] + h) * xs[4] + w;
                                        let wi = (((co * cin + ci) * ws[2] + kf) * ws[3] + kh) * ws[4] + kw;
                                        acc += c.x.data()[xi] * c.w.data()[wi];
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    let mut shape = vec![n, cout];
    shape.extend(out);
    (shape, y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn both_paths_match_the_naive_loops(c in case()) {
        let (shape, expected) = naive(&c);
        let p = ConvParams::new(c.stride, c.padding);
        let b = Tensor::new(&[c.b.len()], c.b.clone()).unwrap();
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let y = conv3d_forward(&c.x, &c.w, Some(&b), &p, algo).unwrap();
            prop_assert_eq!(y.shape(), &shape[..]);
            for (a, e) in y.data().iter().zip(&expected) {
                prop_assert!((a - e).abs() < 1e-12, "{:?}: {} vs {}", algo, a, e);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint(c in case(), gseed in prop::collection::vec(-1.0f64..1.0, 16)) {
        let p = ConvParams::new(c.stride, c.padding);
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let y = conv3d_forward(&c.x, &c.w, None, &p, algo).unwrap();
            let g: Vec<f64> = (0..y.numel()).map(|i| gseed[i % 16] + 0.01 * i as f64).collect();
            let (gx, gw, gb) = conv3d_backward(&c.x, &c.w, true, &p, algo, &g).unwrap();
            let lhs = dot(&g, y.data());
            prop_assert!((lhs - dot(&gx, c.x.data())).abs() < 1e-9 * (1.0 + lhs.abs()));
            prop_assert!((lhs - dot(&gw, c.w.data())).abs() < 1e-9 * (1.0 + lhs.abs()));
            let plane = y.numel() / y.shape()[0] / y.shape()[1];
            let gb = gb.unwrap();
            for (co, v) in gb.iter().enumerate() {
                let expect: f64 = (0..y.shape()[0])
                    .map(|ni| g[(ni * y.shape()[1] + co) * plane..(ni * y.shape()[1] + co + 1) * plane].iter().sum::<f64>())
                    .sum();
                prop_assert!((v - expect).abs() < 1e-9);
            }
        }
    }
}
