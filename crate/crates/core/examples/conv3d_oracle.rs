//! Compares the im2col + GEMM convolution against the direct seven-loop
//! oracle on random configurations, forward and backward.
//!
//! ```bash
//! cargo run --release --example conv3d_oracle
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use res3atn::tensor::ops::conv::{conv3d_backward, conv3d_forward};
use res3atn::tensor::{ConvAlgo, ConvParams, Tensor};

fn main() -> res3atn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let k: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
        let padding: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=k[a] / 2));
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5));
        let extent: [usize; 3] = std::array::from_fn(|a| rng.random_range(k[a]..=k[a] + 5));
        let x = Tensor::<f32>::from_fn(&[n, cin, extent[0], extent[1], extent[2]], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[cout, cin, k[0], k[1], k[2]], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[cout], |_| rng.random_range(-1.0..1.0));
        let p = ConvParams::new(stride, padding);

        let fast = conv3d_forward(&x, &w, Some(&b), &p, ConvAlgo::Im2col)?;
        let slow = conv3d_forward(&x, &w, Some(&b), &p, ConvAlgo::Direct)?;
        let gout: Vec<f32> = (0..fast.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx_f, gw_f, _) = conv3d_backward(&x, &w, true, &p, ConvAlgo::Im2col, &gout)?;
        let (gx_s, gw_s, _) = conv3d_backward(&x, &w, true, &p, ConvAlgo::Direct, &gout)?;
        let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(u, v)| (u - v).abs() as f64).fold(0.0, f64::max);
        let d = fast.max_abs_diff(&slow).max(diff(&gx_f, &gx_s)).max(diff(&gw_f, &gw_s));
        worst = worst.max(d);
        println!(
            "case {case:>2}: x {:?} w {:?} stride {stride:?} pad {padding:?} -> {:?}  max |diff| {d:.2e}",
            x.shape(),
            w.shape(),
            fast.shape()
        );
    }
    println!("worst {worst:.2e} ({})", if worst < 1e-5 { "within 1e-5" } else { "ABOVE 1e-5" });
    Ok(())
}
