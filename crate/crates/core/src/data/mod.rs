//! Clips, augmentation, the synthetic motion dataset, and `.r3clip` I/O.

mod augment;
mod clip;
mod synth;

pub use augment::{
    apply_displacement, augment, center_crop, center_frames, crop_at, displacement_field, elastic_displacement,
    eval_preprocess, normalize, default_scales, random_crop, random_scale, resize, sample_frames, AugmentConfig,
};
pub use clip::{load_clip_dir, ClipDataset, LabeledClip, CLIP_MAGIC, CLIP_VERSION};
pub use synth::{centroid_oracle, centroids, class_names, direction, synth_dataset, SynthConfig};
