//! Trains the desk-scale network on the 4-class synthetic motion task and
//! writes checkpoints, `metrics.jsonl`, `losses.tsv` and `summary.md`.
//!
//! ```bash
//! cargo run --release --example train_synthetic -- runs/desk 50
//! ```

use std::path::PathBuf;

use res3atn::train::{train_with_progress, RunConfig, Split};

fn main() -> res3atn::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/desk".into()));
    let mut cfg = RunConfig::desk();
    if let Some(e) = args.next().and_then(|s| s.parse().ok()) {
        cfg.run.epochs = e;
    }
    let (train_set, eval_set) = cfg.synthetic_splits()?;
    println!(
        "{} train / {} eval clips, {} epochs, batch {}",
        train_set.len(),
        eval_set.len(),
        cfg.run.epochs,
        cfg.run.batch_size
    );
    let report = train_with_progress(&cfg, &train_set, &eval_set, Some(&out), &mut |r| {
        if r.split != Split::Train {
            println!("epoch {:>2} {:<10?} loss {:.4} top1 {:6.2}", r.epoch, r.split, r.loss, r.top1);
        }
    })?;
    println!(
        "best eval top1 {:.2} at epoch {}, {} parameters, outputs in {}",
        report.best_top1,
        report.best_epoch,
        report.network.param_count(),
        out.display()
    );
    Ok(())
}
