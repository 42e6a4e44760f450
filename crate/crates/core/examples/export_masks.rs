//! Exports the attention masks of a freshly initialized desk network (or of
//! a checkpoint given as the second argument) for one synthetic clip.
//!
//! ```bash
//! cargo run --release --example export_masks -- /tmp/masks [runs/desk/best.ckpt]
//! ```

use std::path::PathBuf;

use res3atn::arch::build_res3atn;
use res3atn::data::eval_preprocess;
use res3atn::train::{export_attention_masks, Checkpoint, RunConfig};

fn main() -> res3atn::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "masks_out".into()));
    let (cfg, ck) = match args.next() {
        Some(path) => {
            let ck = Checkpoint::load(path.as_ref())?;
            let text = ck.config_text().unwrap_or_default();
            (RunConfig::from_toml(&text)?, Some(ck))
        }
        None => (RunConfig::desk(), None),
    };
    let mut net = build_res3atn::<f32>(&cfg.network)?;
    if let Some(ck) = &ck {
        ck.restore(&mut net, None)?;
    }
    let (_, eval_set) = cfg.synthetic_splits()?;
    let clip = &eval_set.clips[0];
    let x = eval_preprocess(clip, &cfg.augment)?;
    let paths = export_attention_masks(&mut net, &x, &out)?;
    for p in &paths {
        let bytes = std::fs::read(p).map_err(|e| res3atn::Error::Data(e.to_string()))?;
        let pixels = &bytes[bytes.len() - 36.min(bytes.len())..];
        let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / pixels.len() as f64;
        println!("{} (tail mean gray {mean:.0})", p.display());
    }
    Ok(())
}
