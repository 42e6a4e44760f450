//! Central finite-difference verification of analytic gradients.
//!
//! A closure maps input tensors to an output on a fresh tape. Non-scalar
//! outputs are reduced to `L = sum_i r_i * y_i` with fixed random weights `r`,
//! accumulated in 64-bit so that unperturbed outputs cancel exactly between
//! the `+eps` and `-eps` evaluations. The analytic side back-propagates the
//! same `r` as the seed gradient.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Mutation, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinate budget; tensors larger than this are subsampled.
    pub max_coords: usize,
    /// Gradients smaller than this are compared on an absolute scale. Rounding
    /// of a 32-bit output bounds the numeric derivative's absolute accuracy
    /// near `ulp(|L|) / (2 eps)`, so the floor must sit well above that.
    pub abs_floor: f64,
    pub seed: u64,
    /// Applied to the analytic pass only.
    pub mutation: Option<Mutation>,
    /// Skip coordinates whose forward and backward one-sided differences
    /// disagree by more than `tolerance`, i.e. where a kink (ReLU switch,
    /// max-pool reassignment) lies inside `[x - eps, x + eps]`.
    pub kink_guard: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tolerance: 1e-3,
            max_coords: 256,
            abs_floor: 1.0,
            seed: 0,
            mutation: None,
            kink_guard: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped by the kink guard.
    pub skipped: usize,
    pub passed: bool,
    pub worst: Option<CoordError>,
}

fn project<T: Float>(out: &Var<T>, weights: &[f64]) -> f64 {
    out.data()
        .iter()
        .zip(weights)
        .map(|(&y, &r)| y.to_f64_lossy() * r)
        .sum()
}

fn evaluate<T, F>(f: &mut F, inputs: &[Tensor<T>]) -> Result<Var<T>>
where
    T: Float,
    F: FnMut(&mut Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var<T>> = inputs.iter().cloned().map(Var::constant).collect();
    f(&mut tape, &vars)
}

/// Picks `(input, index)` pairs to probe under the coordinate budget.
fn sample_coords<T: Float>(inputs: &[Tensor<T>], budget: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        if n == 0 {
            continue;
        }
        if total <= budget {
            coords.extend((0..n).map(|j| (i, j)));
            continue;
        }
        let share = ((budget as f64 * n as f64 / total as f64).round() as usize).clamp(1, n);
        let mut picked = index::sample(rng, n, share).into_vec();
        picked.sort_unstable();
        coords.extend(picked.into_iter().map(|j| (i, j)));
    }
    coords
}

/// Compares the tape gradient of `f` against central differences.
pub fn grad_check<T, F>(mut f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Float,
    F: FnMut(&mut Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::GradCheck("inputs must be finite".into()));
    }
    let base = evaluate(&mut f, inputs)?;
    let again = evaluate(&mut f, inputs)?;
    if base.value() != again.value() {
        return Err(Error::GradCheck(
            "closure is not deterministic: two forward passes on the same inputs differ".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = if base.value().numel() == 1 {
        vec![1.0]
    } else {
        (0..base.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect()
    };

    let mut tape = Tape::new();
    tape.set_mutation(cfg.mutation);
    let leaves: Vec<Var<T>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if out.shape() != base.shape() {
        return Err(Error::GradCheck("output shape changed between passes".into()));
    }
    let seed: Vec<T> = weights.iter().map(|&r| T::of(r)).collect();
    tape.backward_with_seed(&out, &seed)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|v| match tape.grad_slice(v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; v.value().numel()],
        })
        .collect();

    let coords = sample_coords(inputs, cfg.max_coords, &mut rng);
    let l0 = project(&base, &weights);
    let mut skipped = 0;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut worst: Option<CoordError> = None;
    let eps = T::of(cfg.epsilon);
    for &(i, j) in &coords {
        let x0 = inputs[i].data()[j];
        let (xp, xm) = (x0 + eps, x0 - eps);
        work[i].data_mut()[j] = xp;
        let lp = project(&evaluate(&mut f, &work)?, &weights);
        work[i].data_mut()[j] = xm;
        let lm = project(&evaluate(&mut f, &work)?, &weights);
        work[i].data_mut()[j] = x0;

        // divide by the step actually representable in T
        let numeric = (lp - lm) / (xp.to_f64_lossy() - xm.to_f64_lossy());
        if cfg.kink_guard {
            let up = (lp - l0) / (xp.to_f64_lossy() - x0.to_f64_lossy());
            let down = (l0 - lm) / (x0.to_f64_lossy() - xm.to_f64_lossy());
            let scale = up.abs().max(down.abs()).max(cfg.abs_floor);
            if (up - down).abs() / scale > cfg.tolerance {
                skipped += 1;
                continue;
            }
        }
        let a = analytic[i][j];
        let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (a - numeric).abs() / denom;
        if worst.is_none_or(|w| rel > w.rel_error) {
            worst = Some(CoordError {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    let max_rel_error = worst.map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        max_rel_error,
        checked: coords.len() - skipped,
        skipped,
        passed: max_rel_error < cfg.tolerance,
        worst,
    })
}

/// Result of checking one operator over several random shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every differentiable operator, checked on `cases` random small shapes.
pub fn operator_suite<T: Float>(cfg: &GradCheckConfig, cases: usize) -> Result<Vec<OpCheck>> {
    use super::ops::pool::PoolParams;
    use super::{BatchNormParams, BnMode, BnStats, ConvParams};

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_f0b5);
    let mut results = Vec::new();
    let mut run = |op: &'static str,
                   rng: &mut ChaCha8Rng,
                   case: &mut dyn FnMut(&mut ChaCha8Rng, &GradCheckConfig) -> Result<GradCheckReport>|
     -> Result<()> {
        let mut worst = 0.0f64;
        let mut passed = true;
        for c in 0..cases {
            let case_cfg = GradCheckConfig {
                seed: cfg.seed.wrapping_add(c as u64),
                ..cfg.clone()
            };
            let r = case(rng, &case_cfg)?;
            worst = worst.max(r.max_rel_error);
            passed &= r.passed;
        }
        results.push(OpCheck {
            op,
            cases,
            max_rel_error: worst,
            passed,
        });
        Ok(())
    };

    let uniform = |shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        Tensor::<T>::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    };

    run("conv3d", &mut rng, &mut |rng, c| {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        let pad: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=k[a] / 2));
        let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
        let ext: [usize; 3] = std::array::from_fn(|a| rng.random_range(k[a].max(2)..=5));
        let p = ConvParams::new(stride, pad);
        let x = uniform(&[n, cin, ext[0], ext[1], ext[2]], -0.5, 0.5, rng);
        let w = uniform(&[cout, cin, k[0], k[1], k[2]], -0.5, 0.5, rng);
        let b = uniform(&[cout], -0.5, 0.5, rng);
        grad_check(|t, v| t.conv3d(&v[0], &v[1], Some(&v[2]), &p), &[x, w, b], c)
    })?;

    run("maxpool3d", &mut rng, &mut |rng, c| {
        let n = rng.random_range(1..=2);
        let ch = rng.random_range(1..=3);
        let k: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        let pad: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=k[a] / 2));
        let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
        let ext: [usize; 3] = std::array::from_fn(|a| rng.random_range(k[a].max(2)..=5));
        let shape = [n, ch, ext[0], ext[1], ext[2]];
        // distinct values spaced well beyond 2 * eps so no window changes its argmax
        let numel: usize = shape.iter().product();
        let mut order = index::sample(rng, numel, numel).into_vec();
        order.iter_mut().for_each(|v| *v += 1);
        let x = Tensor::<T>::from_fn(&shape, |i| T::of(order[i] as f64 * 0.02 - numel as f64 * 0.01));
        let p = PoolParams::new(k, stride, pad);
        grad_check(|t, v| t.maxpool3d(&v[0], &p), &[x], c)
    })?;

    run("avgpool3d", &mut rng, &mut |rng, c| {
        let shape: [usize; 5] = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        ];
        let x = uniform(&shape, -1.0, 1.0, rng);
        grad_check(|t, v| t.avgpool3d_adaptive(&v[0]), &[x], c)
    })?;

    run("trilinear_upsample", &mut rng, &mut |rng, c| {
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=4));
        let target: [usize; 3] = std::array::from_fn(|a| rng.random_range(ext[a]..=2 * ext[a] + 1));
        let x = uniform(&[1, rng.random_range(1..=2), ext[0], ext[1], ext[2]], -1.0, 1.0, rng);
        grad_check(|t, v| t.trilinear_upsample(&v[0], target), &[x], c)
    })?;

    run("batchnorm3d", &mut rng, &mut |rng, c| {
        let ch = rng.random_range(1..=3);
        let shape = [
            rng.random_range(1..=3),
            ch,
            rng.random_range(1..=2),
            rng.random_range(2..=3),
            rng.random_range(2..=3),
        ];
        let x = uniform(&shape, -1.0, 1.0, rng);
        let g = uniform(&[ch], 0.5, 1.5, rng);
        let b = uniform(&[ch], -0.5, 0.5, rng);
        let mut stats = BnStats::new(ch);
        let params = BatchNormParams::default();
        grad_check(
            |t, v| t.batchnorm3d(&v[0], &v[1], &v[2], &mut stats, BnMode::Train, &params),
            &[x, g, b],
            c,
        )
    })?;

    run("sigmoid", &mut rng, &mut |rng, c| {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 1, 2, rng.random_range(1..=3)];
        let x = uniform(&shape, -3.0, 3.0, rng);
        grad_check(|t, v| t.sigmoid(&v[0]), &[x], c)
    })?;

    run("relu", &mut rng, &mut |rng, c| {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 1, 2, rng.random_range(1..=3)];
        // keep every probe at least 10 eps away from the kink
        let margin = 10.0 * c.epsilon;
        let x = Tensor::<T>::from_fn(&shape, |_| {
            let mag = rng.random_range(margin + 1e-3..2.0);
            T::of(if rng.random_bool(0.5) { mag } else { -mag })
        });
        grad_check(|t, v| t.relu(&v[0]), &[x], c)
    })?;

    run("linear", &mut rng, &mut |rng, c| {
        let (n, d, dout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let x = uniform(&[n, d], -1.0, 1.0, rng);
        let w = uniform(&[dout, d], -1.0, 1.0, rng);
        let b = uniform(&[dout], -1.0, 1.0, rng);
        grad_check(|t, v| t.linear(&v[0], &v[1], &v[2]), &[x, w, b], c)
    })?;

    run("softmax_cross_entropy", &mut rng, &mut |rng, c| {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let x = uniform(&[n, k], -1.0, 1.0, rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        grad_check(|t, v| t.softmax_cross_entropy(&v[0], &labels), &[x], c)
    })?;

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_in_f32() {
        let report = operator_suite::<f32>(&GradCheckConfig::default(), 5).unwrap();
        for r in &report {
            println!("{:<24} max rel {:.3e}", r.op, r.max_rel_error);
        }
        assert!(report.iter().all(|r| r.passed));
    }

    #[test]
    fn suite_is_tight_in_f64() {
        let cfg = GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-6,
            abs_floor: 1e-6,
            ..GradCheckConfig::default()
        };
        let report = operator_suite::<f64>(&cfg, 5).unwrap();
        for r in &report {
            assert!(r.passed, "{} max rel {:.3e}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn conv_weight_mutation_is_caught() {
        let cfg = GradCheckConfig {
            mutation: Some(Mutation::conv3d_weight()),
            ..GradCheckConfig::default()
        };
        let report = operator_suite::<f32>(&cfg, 5).unwrap();
        let conv = report.iter().find(|r| r.op == "conv3d").unwrap();
        assert!(!conv.passed);
        assert!(report.iter().filter(|r| r.op != "conv3d").all(|r| r.passed));
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut calls = 0.0f32;
        let x = Tensor::<f32>::ones(&[3]);
        let err = grad_check(
            |t, v| {
                calls += 1.0;
                t.scale(&v[0], calls)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(matches!(err, Err(Error::GradCheck(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(grad_check(|t, v| t.relu(&v[0]), &[x], &GradCheckConfig::default()).is_err());
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 8, 8], |i| (i as f32 * 0.37).sin());
        let cfg = GradCheckConfig {
            max_coords: 64,
            ..GradCheckConfig::default()
        };
        let r = grad_check(|t, v| t.sigmoid(&v[0]), &[x], &cfg).unwrap();
        assert_eq!(r.checked, 64);
        assert!(r.passed);
    }
}
