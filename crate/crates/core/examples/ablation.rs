//! Trains every attention-site subset on the synthetic task for a few
//! epochs and prints the comparison table.
//!
//! ```bash
//! cargo run --release --example ablation -- runs/ablation 5
//! ```

use std::path::PathBuf;

use res3atn::train::{ablation_run, full_grid, RunConfig};

fn main() -> res3atn::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation".into()));
    let mut cfg = RunConfig::desk();
    cfg.run.epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let (train_set, eval_set) = cfg.synthetic_splits()?;
    let table = ablation_run(&cfg, &full_grid(), &train_set, &eval_set, Some(&out))?;
    print!("{}", table.to_markdown());
    for (a, b) in table.count_violations() {
        println!("note: {a} has fewer blocks than {b} but at least as many parameters");
    }
    Ok(())
}
