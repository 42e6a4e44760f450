//! Property tests for engine invariants: gradient accumulation at fan-out,
//! max-pool routing, upsampling linearity, batch-norm statistics and the
//! optimizer update rule.

use proptest::prelude::*;
use res3atn::arch::{ParamBuilder, ParamKind};
use res3atn::optim::{Sgd, SgdConfig};
use res3atn::tensor::{BatchNormParams, BnMode, BnStats, PoolParams, Tape, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, n)
}

fn dims() -> impl Strategy<Value = [usize; 5]> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..5, 1usize..5).prop_map(|(n, c, f, h, w)| [n, c, f, h, w])
}

fn tensor(shape: [usize; 5]) -> impl Strategy<Value = Tensor<f32>> {
    let n = shape.iter().product();
    values(n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn pool_case() -> impl Strategy<Value = ([usize; 5], Vec<usize>)> {
    (1usize..3, 1usize..3, 1usize..3, 1usize..4, 1usize..4)
        .prop_map(|(n, c, f, h, w)| [n, c, 2 * f, 2 * h, 2 * w])
        .prop_flat_map(|s| {
            let order: Vec<usize> = (0..s.iter().product::<usize>()).collect();
            (Just(s), Just(order).prop_shuffle())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fan_out_gradients_add((x, a, b) in dims().prop_flat_map(|d| (tensor(d), tensor(d), tensor(d)))) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l1 = tape.mul(&xv, &av).unwrap();
        let l2 = tape.mul(&xv, &bv).unwrap();
        let s1 = tape.sum(&l1).unwrap();
        let s2 = tape.sum(&l2).unwrap();
        let loss = tape.add(&s1, &s2).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&xv).unwrap();
        for ((gi, ai), bi) in g.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert_eq!(*gi, ai + bi);
        }
    }

    #[test]
    fn maxpool_routes_each_window_to_its_argmax((shape, order) in pool_case(), seed in values(64)) {
        // distinct values so every window has a unique maximum
        let x = Tensor::new(&shape, order.iter().map(|&i| i as f32 * 0.01).collect()).unwrap();
        let p = PoolParams::new([2, 2, 2], [2, 2, 2], [0, 0, 0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.maxpool3d(&xv, &p).unwrap();
        let g: Vec<f32> = (0..y.value().numel()).map(|i| seed[i % seed.len()] + 3.0).collect();
        tape.backward_with_seed(&y, &g).unwrap();
        let gx = tape.grad(&xv).unwrap();
        let [n, c, f, h, w] = shape;
        let (fo, ho, wo) = (f / 2, h / 2, w / 2);
        let mut out_idx = 0;
        for ni in 0..n {
            for ci in 0..c {
                for a in 0..fo {
                    for b in 0..ho {
                        for d in 0..wo {
                            let mut best = (f32::MIN, 0);
                            for (da, db, dd) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                                let idx = (((ni * c + ci) * f + 2 * a + da) * h + 2 * b + db) * w + 2 * d + dd;
                                if x.data()[idx] > best.0 {
                                    best = (x.data()[idx], idx);
                                }
                            }
                            prop_assert_eq!(gx.data()[best.1], g[out_idx]);
                            out_idx += 1;
                        }
                    }
                }
            }
        }
        prop_assert_eq!(gx.data().iter().filter(|v| **v != 0.0).count(), out_idx);
    }

    #[test]
    fn upsampling_is_linear(
        (x, y) in dims().prop_flat_map(|d| (tensor(d), tensor(d))),
        target in (1usize..6, 1usize..7, 1usize..7),
        alpha in -2.0f32..2.0,
    ) {
        let target = [target.0, target.1, target.2];
        let mut tape = Tape::no_grad();
        let combo = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let (xv, yv, cv) = (tape.constant(x.clone()), tape.constant(y), tape.constant(combo));
        let ux = tape.trilinear_upsample(&xv, target).unwrap();
        let uy = tape.trilinear_upsample(&yv, target).unwrap();
        let uc = tape.trilinear_upsample(&cv, target).unwrap();
        for ((c, a), b) in uc.data().iter().zip(ux.data()).zip(uy.data()) {
            prop_assert!((c - (alpha * a + b)).abs() < 1e-4);
        }
        let [_, _, f, h, w] = x.dims5().unwrap();
        let same = tape.trilinear_upsample(&xv, [f, h, w]).unwrap();
        prop_assert_eq!(same.value(), &x);
    }

    #[test]
    fn batchnorm_normalizes_each_channel(
        shape in (2usize..4, 1usize..4, 1usize..3, 2usize..5, 2usize..5).prop_map(|(n, c, f, h, w)| [n, c, f, h, w]),
        raw in values(1024),
        shift in -5.0f32..5.0,
        spread in 0.5f32..4.0,
    ) {
        let [n, c, f, h, w] = shape;
        let x = Tensor::from_fn(&shape, |i| shift + spread * (raw[i % raw.len()] + 0.001 * (i % 7) as f32));
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::ones(&[c]));
        let beta = tape.constant(Tensor::zeros(&[c]));
        let mut stats = BnStats::new(c);
        let y = tape
            .batchnorm3d(&xv, &gamma, &beta, &mut stats, BnMode::Train, &BatchNormParams::default())
            .unwrap();
        let plane = f * h * w;
        for ci in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|ni| y.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
            // the 1e-5 epsilon pulls the variance slightly below one
            prop_assert!((var - 1.0).abs() < 1e-2, "var {}", var);
        }
        prop_assert!(stats.ready);
        prop_assert_eq!(stats.updates, 1);
    }

    #[test]
    fn sgd_matches_reference_trajectory(
        p0 in prop::collection::vec(-1.0f64..1.0, 1..6),
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..5),
        lr in 0.001f64..0.5,
        mu in 0.0f64..0.99,
        wd in 0.0f64..0.01,
    ) {
        let n = p0.len();
        let mut b = ParamBuilder::<f64>::new(0);
        b.constant("p", ParamKind::LinearWeight, &[n], 0.0).unwrap();
        let (mut store, _) = b.finish();
        store.get_mut(0).value_mut().data_mut().copy_from_slice(&p0);
        let config = SgdConfig { lr, momentum: mu, weight_decay: wd, exclude_bn_from_decay: false };
        let mut opt = Sgd::new(config, &store);
        let (mut p, mut v) = (p0.clone(), vec![0.0; n]);
        for g in &grads {
            store.get_mut(0).value_mut().accumulate_grad(&g[..n]).unwrap();
            opt.step(&mut store).unwrap();
            for i in 0..n {
                let gi = g[i] + wd * p[i];
                v[i] = mu * v[i] + gi;
                p[i] -= lr * (gi + mu * v[i]);
            }
        }
        prop_assert_eq!(store.get(0).value.data(), &p[..]);
        prop_assert_eq!(opt.velocity(0).data(), &v[..]);
    }
}
