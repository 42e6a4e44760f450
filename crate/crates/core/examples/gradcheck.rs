//! Runs the operator gradient-check suite in 32-bit and the reduced network
//! check in 64-bit, then shows that a corrupted conv3d weight gradient is
//! caught.
//!
//! ```bash
//! cargo run --release --example gradcheck
//! ```

use res3atn::arch::{network_check_config, network_grad_check, reduced_spec, NETWORK_CHECK_BATCH};
use res3atn::tensor::gradcheck::{operator_suite, GradCheckConfig};
use res3atn::tensor::Mutation;

fn main() -> res3atn::Result<()> {
    let cfg = GradCheckConfig::default();
    for c in operator_suite::<f32>(&cfg, 5)? {
        println!("{:<20} max rel {:.3e} {}", c.op, c.max_rel_error, if c.passed { "ok" } else { "FAIL" });
    }

    let r = network_grad_check::<f64>(&reduced_spec(0), NETWORK_CHECK_BATCH, &network_check_config(0))?;
    println!(
        "reduced network: {} coordinates ({} skipped at kinks), max rel {:.3e} {}",
        r.checked,
        r.skipped,
        r.max_rel_error,
        if r.passed { "ok" } else { "FAIL" }
    );

    let mutated = GradCheckConfig {
        mutation: Some(Mutation::conv3d_weight()),
        ..cfg
    };
    let conv = operator_suite::<f32>(&mutated, 5)?.into_iter().find(|c| c.op == "conv3d");
    if let Some(c) = conv {
        println!("with a doubled conv3d weight gradient: max rel {:.3e}, passed = {}", c.max_rel_error, c.passed);
    }
    Ok(())
}
