//! Forward kernels and backward rules.
//!
//! Each operator is a method on [`Tape`](super::Tape) that computes the
//! forward value and records a backward rule when any operand needs a
//! gradient. The raw kernels are also exposed for direct testing.

pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod upsample;

use crate::error::{shape_err, Result};

use super::{Triple, AXIS_NAMES};

/// Output extent of a sliding window along one axis.
pub fn window_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub(crate) fn window_out_dims(
    what: &str,
    input: Triple,
    kernel: Triple,
    stride: Triple,
    pad: Triple,
) -> Result<Triple> {
    let mut out = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(shape_err!("{what}: stride along the {} axis is 0", AXIS_NAMES[a]));
        }
        if kernel[a] == 0 {
            return Err(shape_err!("{what}: kernel along the {} axis is 0", AXIS_NAMES[a]));
        }
        out[a] = window_out_extent(input[a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
            shape_err!(
                "{what}: kernel {} exceeds padded input {} along the {} axis",
                kernel[a],
                input[a] + 2 * pad[a],
                AXIS_NAMES[a]
            )
        })?;
        if out[a] == 0 {
            return Err(shape_err!("{what}: zero-sized output along the {} axis", AXIS_NAMES[a]));
        }
    }
    Ok(out)
}
