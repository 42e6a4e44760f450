//! Run configuration: `[network]`, `[augment]`, `[optimizer]`, `[run]` and
//! `[synthetic]` tables of one TOML document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::data::{synth_dataset, AugmentConfig, ClipDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::optim::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives shuffling; `--seed` also overrides the init and augmentation seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 6,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Sizes of the in-process synthetic train/eval splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSplits {
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub extent: usize,
    pub frames: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        Self {
            train_per_class: 50,
            eval_per_class: 20,
            extent: 48,
            frames: 16,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub augment: AugmentConfig,
    pub optimizer: SgdConfig,
    pub run: RunSettings,
    pub synthetic: SyntheticSplits,
}

impl RunConfig {
    /// Workstation-sized run on the 4-class synthetic task: channel widths / 8,
    /// 16 frames, 24x24 crops, 50 epochs.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.network.num_classes = 4;
        cfg.network.channel_scale = 8;
        cfg.network.input_frames = 16;
        cfg.network.input_size = 24;
        cfg.augment.crop = 24;
        cfg.augment.frames_out = 16;
        cfg.run.epochs = 50;
        cfg.run.output_dir = PathBuf::from("runs/desk");
        cfg
    }

    /// Sets the shuffle, init, augmentation and synthetic-data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.network.seed = seed;
        self.augment.seed = seed;
        self.synthetic.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.network.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be >= 1".into()));
        }
        if self.augment.crop != self.network.input_size {
            return Err(Error::Config(format!(
                "augment.crop ({}) must equal network.input_size ({})",
                self.augment.crop, self.network.input_size
            )));
        }
        if self.augment.frames_out != self.network.input_frames {
            return Err(Error::Config(format!(
                "augment.frames_out ({}) must equal network.input_frames ({})",
                self.augment.frames_out, self.network.input_frames
            )));
        }
        Ok(())
    }

    /// Generates the train and eval splits described by `[synthetic]`.
    pub fn synthetic_splits(&self) -> Result<(ClipDataset, ClipDataset)> {
        let s = &self.synthetic;
        let k = self.network.num_classes;
        let all = synth_dataset(&SynthConfig {
            num_classes: k,
            clips_per_class: s.train_per_class + s.eval_per_class,
            extent: s.extent,
            frames: s.frames,
            noise_level: s.noise_level,
            channels: self.network.input_channels,
            seed: s.seed,
        })?;
        // clips are interleaved by class, so a prefix is class balanced
        let n_train = s.train_per_class * k;
        let mut clips = all.clips;
        let eval = clips.split_off(n_train);
        Ok((
            ClipDataset {
                classes: all.classes.clone(),
                clips,
            },
            ClipDataset {
                classes: all.classes,
                clips: eval,
            },
        ))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_training_protocol() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.run.epochs, cfg.run.batch_size), (30, 6));
        assert_eq!(cfg.optimizer, SgdConfig::default());
        assert_eq!(cfg.network.attention_sites, vec![1, 2, 3]);
        cfg.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig::desk().with_seed(9);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("[run]\nepochs = 3\n").unwrap();
        assert_eq!(partial.run.epochs, 3);
        assert_eq!(partial.run.batch_size, 6);
        let e = RunConfig::from_toml("[run]\nepochz = 3\n").unwrap_err().to_string();
        assert!(e.contains("epochz") && !e.contains('\n'), "{e}");
    }

    #[test]
    fn synthetic_splits_are_balanced() {
        let mut cfg = RunConfig::desk();
        cfg.synthetic.train_per_class = 3;
        cfg.synthetic.eval_per_class = 2;
        let (tr, ev) = cfg.synthetic_splits().unwrap();
        assert_eq!((tr.len(), ev.len()), (12, 8));
        for k in 0..4 {
            assert_eq!(tr.clips.iter().filter(|c| c.label == k).count(), 3);
            assert_eq!(ev.clips.iter().filter(|c| c.label == k).count(), 2);
        }
    }
}
