//! Generates one synthetic clip, runs the training augmentation chain and
//! the evaluation preprocessing, and writes first/last frames as PGM files.
//!
//! ```bash
//! cargo run --release --example augment_clip -- /tmp/augment
//! ```

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use res3atn::data::{augment, centroid_oracle, eval_preprocess, synth_dataset, AugmentConfig, SynthConfig};
use res3atn::train::write_pgm;

fn main() -> res3atn::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "augment_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| res3atn::Error::Data(e.to_string()))?;
    let ds = synth_dataset(&SynthConfig {
        clips_per_class: 1,
        ..SynthConfig::default()
    })?;
    let cfg = AugmentConfig {
        crop: 24,
        frames_out: 16,
        ..AugmentConfig::default()
    };
    for clip in &ds.clips {
        let class = &ds.classes[clip.label];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = augment(clip, &cfg, &mut rng)?;
        let eval = eval_preprocess(clip, &cfg)?;
        println!(
            "{class:<8} source {}x{}x{} -> train {:?}, eval {:?}, oracle says {}",
            clip.frames,
            clip.height,
            clip.width,
            train.shape(),
            eval.shape(),
            ds.classes[centroid_oracle(clip, ds.classes.len())]
        );
        let [_, _, f, h, w] = train.dims5()?;
        for (name, t) in [("train", &train), ("eval", &eval)] {
            for fi in [0, f - 1] {
                // first channel of frame `fi`
                let start = fi * h * w;
                let plane = &t.data()[start..start + h * w];
                write_pgm(&out.join(format!("{class}_{name}_frame{fi}.pgm")), h, w, plane)?;
            }
        }
    }
    println!("wrote frames to {}", out.display());
    Ok(())
}
