//! Builds the full-width network and prints the per-stage output shapes for
//! 8, 16 and 32 input frames, plus parameter counts for every site subset.
//!
//! ```bash
//! cargo run --release --example shape_trace
//! ```

use std::time::Instant;

use res3atn::arch::{build_res3atn, NetworkSpec};
use res3atn::tensor::{BnMode, Tape, Tensor, Var};

fn main() -> res3atn::Result<()> {
    for frames in [32, 16, 8] {
        let spec = NetworkSpec {
            num_classes: 83,
            input_frames: frames,
            ..NetworkSpec::default()
        };
        let mut net = build_res3atn::<f32>(&spec)?;
        let x = Var::constant(Tensor::full(&spec.input_shape(1), 0.5));
        let start = Instant::now();
        let out = net.forward(&mut Tape::no_grad(), &x, BnMode::Batch)?;
        println!(
            "frames {frames}: {} parameters, forward {:.1}s",
            net.param_count(),
            start.elapsed().as_secs_f64()
        );
        for stage in &out.trace {
            println!("  {:<11} {:?}", stage.name, stage.shape);
        }
    }

    println!("\nparameter count by attention sites:");
    for sites in [&[][..], &[1], &[2], &[3], &[1, 2], &[1, 3], &[2, 3], &[1, 2, 3]] {
        let net = build_res3atn::<f32>(&NetworkSpec::default().with_sites(sites))?;
        println!("  {:<10} {}", format!("{sites:?}"), net.param_count());
    }
    Ok(())
}
