//! Training and evaluation loops, top-k metrics, checkpoints, the ablation
//! harness and attention-mask export.

mod ablation;
mod checkpoint;
mod config;
mod masks;
mod metrics;
mod trainer;

pub use ablation::{ablation_run, full_grid, standard_grid, sites_label, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONFIG_KEY, EPOCH_KEY, VELOCITY_PREFIX};
pub use config::{RunConfig, RunSettings, SyntheticSplits};
pub use masks::{export_attention_masks, mask_frames, write_pgm};
pub use metrics::{evaluate, topk_hit, MetricsLog, MetricsRecord, Split};
pub use trainer::{clip_seed, overfit_batch, stack_batch, train, train_with_progress, TrainReport};
