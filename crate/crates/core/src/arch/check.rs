//! Finite-difference check of the whole network's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::tensor::{BnMode, Float, Tensor};

use super::network::{build_res3atn, NetworkSpec};

/// Small variant for gradient checks: widths / 16, 8 frames, 32x32 input,
/// 4 classes.
pub fn reduced_spec(seed: u64) -> NetworkSpec {
    NetworkSpec {
        num_classes: 4,
        input_frames: 8,
        channel_scale: 16,
        input_size: 32,
        seed,
        ..NetworkSpec::default()
    }
}

/// 64-bit settings for the reduced network: `eps = 1e-6`, relative
/// tolerance 2e-3, absolute floor 1e-5, kink guard on, eight clips.
pub fn network_check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        epsilon: 1e-6,
        tolerance: 2e-3,
        max_coords: 96,
        abs_floor: 1e-5,
        seed,
        mutation: None,
        kink_guard: true,
    }
}

pub const NETWORK_CHECK_BATCH: usize = 8;

/// Checks `d loss / d theta` for every parameter tensor (subsampled to the
/// coordinate budget, at least one coordinate each) on a random batch of
/// `batch` clips. Batch-norm layers use batch statistics without updating
/// their running averages, so the loss is a pure function of the parameters.
pub fn network_grad_check<T: Float>(spec: &NetworkSpec, batch: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = build_res3atn::<T>(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e65_7477);
    let shape = spec.input_shape(batch);
    let x = Tensor::<T>::from_fn(&shape, |_| T::of(rng.random_range(0.0..1.0)));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let params: Vec<Tensor<T>> = net.params.iter().map(|p| (*p.value).clone()).collect();
    grad_check(
        |tape, vars| {
            let bound: Vec<_> = vars.iter().cloned().enumerate().collect();
            let input = tape.constant(x.clone());
            let out = net.forward_bound(tape, &input, BnMode::Batch, &bound)?;
            tape.softmax_cross_entropy(&out.logits, &labels)
        },
        &params,
        cfg,
    )
}
