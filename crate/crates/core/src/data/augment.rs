//! Training augmentation chain and evaluation preprocessing.
//!
//! Training applies, in order: random frame window, random isotropic scale,
//! random crop, elastic displacement, normalization. One random draw of each
//! kind is shared by every frame of a clip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::clip::LabeledClip;

/// Scale factors `1, 2^(-1/4), 2^(-3/4), 2^(-1)`.
pub fn default_scales() -> Vec<f64> {
    vec![1.0, 2f64.powf(-0.25), 2f64.powf(-0.75), 0.5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_set: Vec<f64>,
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
    pub frames_out: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 112,
            scale_set: default_scales(),
            elastic_sigma: 2.0,
            elastic_alpha: 1.0,
            frames_out: 32,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.frames_out == 0 {
            return Err(Error::Config("augment.crop and augment.frames_out must be >= 1".into()));
        }
        if self.scale_set.is_empty() || self.scale_set.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!(
                "augment.scale_set must be non-empty with values in (0, 1], got {:?}",
                self.scale_set
            )));
        }
        if !(self.elastic_sigma > 0.0) || !(self.elastic_alpha >= 0.0) {
            return Err(Error::Config("augment.elastic_sigma must be > 0 and elastic_alpha >= 0".into()));
        }
        Ok(())
    }
}

/// Frame indices `offset..offset + frames_out`, wrapping cyclically.
fn window(clip: &LabeledClip, offset: usize, frames_out: usize) -> Result<LabeledClip> {
    let mut data = Vec::with_capacity(frames_out * clip.frame_len());
    for i in 0..frames_out {
        data.extend_from_slice(clip.frame((offset + i) % clip.frames));
    }
    clip.with_frames(frames_out, clip.height, clip.width, data)
}

/// A contiguous window at a uniformly random valid offset.
pub fn sample_frames(clip: &LabeledClip, frames_out: usize, rng: &mut ChaCha8Rng) -> Result<LabeledClip> {
    if frames_out == 0 {
        return Err(Error::Data("frames_out must be >= 1".into()));
    }
    let offset = if clip.frames > frames_out {
        rng.random_range(0..=clip.frames - frames_out)
    } else {
        0
    };
    window(clip, offset, frames_out)
}

/// The centered window used at evaluation time.
pub fn center_frames(clip: &LabeledClip, frames_out: usize) -> Result<LabeledClip> {
    if frames_out == 0 {
        return Err(Error::Data("frames_out must be >= 1".into()));
    }
    window(clip, clip.frames.saturating_sub(frames_out) / 2, frames_out)
}

/// Half-pixel source coordinate and the two taps it falls between.
fn taps(out: usize, input: usize, len: usize) -> (usize, usize, f64) {
    let src = ((out as f64 + 0.5) * input as f64 / len as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, src - i0 as f64)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize of every frame to `height x width`.
pub fn resize(clip: &LabeledClip, height: usize, width: usize) -> Result<LabeledClip> {
    if height == clip.height && width == clip.width {
        return Ok(clip.clone());
    }
    let c = clip.channels;
    let ys: Vec<_> = (0..height).map(|y| taps(y, clip.height, height)).collect();
    let xs: Vec<_> = (0..width).map(|x| taps(x, clip.width, width)).collect();
    let mut data = Vec::with_capacity(clip.frames * height * width * c);
    for f in 0..clip.frames {
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                for ch in 0..c {
                    let p = |y, x| clip.at(f, y, x, ch) as f64;
                    let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                    let bottom = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                    data.push(to_u8(top * (1.0 - ly) + bottom * ly));
                }
            }
        }
    }
    clip.with_frames(clip.frames, height, width, data)
}

/// Scales by one factor drawn from `scale_set`; fails if the result is
/// smaller than `crop`.
pub fn random_scale(clip: &LabeledClip, scale_set: &[f64], crop: usize, rng: &mut ChaCha8Rng) -> Result<LabeledClip> {
    if scale_set.is_empty() {
        return Err(Error::Data("scale_set is empty".into()));
    }
    let factor = scale_set[rng.random_range(0..scale_set.len())];
    let h = (clip.height as f64 * factor).round() as usize;
    let w = (clip.width as f64 * factor).round() as usize;
    if h < crop || w < crop {
        let smallest = scale_set.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Data(format!(
            "clip {}: {}x{} scaled by {factor:.4} is {h}x{w}, below crop {crop}; sources need at least {} pixels per side",
            clip.id,
            clip.height,
            clip.width,
            (crop as f64 / smallest).ceil()
        )));
    }
    resize(clip, h, w)
}

/// A `crop x crop` window at `(top, left)` shared by every frame.
pub fn crop_at(clip: &LabeledClip, crop: usize, top: usize, left: usize) -> Result<LabeledClip> {
    if clip.height < crop + top || clip.width < crop + left {
        return Err(Error::Data(format!(
            "clip {}: {}x{} is smaller than crop {crop} at offset ({top}, {left})",
            clip.id, clip.height, clip.width
        )));
    }
    let c = clip.channels;
    let mut data = Vec::with_capacity(clip.frames * crop * crop * c);
    for f in 0..clip.frames {
        let frame = clip.frame(f);
        for y in top..top + crop {
            let row = (y * clip.width + left) * c;
            data.extend_from_slice(&frame[row..row + crop * c]);
        }
    }
    clip.with_frames(clip.frames, crop, crop, data)
}

pub fn random_crop(clip: &LabeledClip, crop: usize, rng: &mut ChaCha8Rng) -> Result<LabeledClip> {
    if clip.height < crop || clip.width < crop {
        return crop_at(clip, crop, 0, 0);
    }
    let top = rng.random_range(0..=clip.height - crop);
    let left = rng.random_range(0..=clip.width - crop);
    crop_at(clip, crop, top, left)
}

pub fn center_crop(clip: &LabeledClip, crop: usize) -> Result<LabeledClip> {
    crop_at(
        clip,
        crop,
        clip.height.saturating_sub(crop) / 2,
        clip.width.saturating_sub(crop) / 2,
    )
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge clamping.
fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * field[y * w + clampi(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel displacement `(dy, dx)` fields: smoothed uniform(-1, 1) noise
/// scaled by `alpha`.
pub fn displacement_field(h: usize, w: usize, sigma: f64, alpha: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let kernel = gaussian_kernel(sigma);
    let mut draw = || -> Vec<f64> {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        smooth(&noise, h, w, &kernel).into_iter().map(|v| v * alpha).collect()
    };
    let dx = draw();
    let dy = draw();
    (dy, dx)
}

/// Resamples every frame at `(y + dy, x + dx)`, bilinear with edge clamping.
pub fn apply_displacement(clip: &LabeledClip, dy: &[f64], dx: &[f64]) -> Result<LabeledClip> {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let mut data = Vec::with_capacity(clip.data.len());
    for f in 0..clip.frames {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as f64 + dy[y * w + x]).clamp(0.0, (h - 1) as f64);
                let sx = (x as f64 + dx[y * w + x]).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
                for ch in 0..c {
                    let p = |yy, xx| clip.at(f, yy, xx, ch) as f64;
                    let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                    let bottom = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                    data.push(to_u8(top * (1.0 - ly) + bottom * ly));
                }
            }
        }
    }
    clip.with_frames(clip.frames, h, w, data)
}

/// One displacement field pair drawn per clip and applied to every frame.
pub fn elastic_displacement(clip: &LabeledClip, sigma: f64, alpha: f64, rng: &mut ChaCha8Rng) -> Result<LabeledClip> {
    let (dy, dx) = displacement_field(clip.height, clip.width, sigma, alpha, rng);
    apply_displacement(clip, &dy, &dx)
}

/// `value / 255` as a `[1, C, F, H, W]` tensor.
pub fn normalize(clip: &LabeledClip) -> Tensor<f32> {
    let (f, h, w, c) = (clip.frames, clip.height, clip.width, clip.channels);
    let plane = f * h * w;
    let mut data = vec![0.0f32; c * plane];
    for (i, px) in clip.data.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[1, c, f, h, w], data).expect("normalize: shape and data agree by construction")
}

/// The full training chain.
pub fn augment(clip: &LabeledClip, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let c = sample_frames(clip, cfg.frames_out, rng)?;
    let c = random_scale(&c, &cfg.scale_set, cfg.crop, rng)?;
    let c = random_crop(&c, cfg.crop, rng)?;
    let c = elastic_displacement(&c, cfg.elastic_sigma, cfg.elastic_alpha, rng)?;
    Ok(normalize(&c))
}

/// Evaluation preprocessing: centered frames, scale 1, center crop.
pub fn eval_preprocess(clip: &LabeledClip, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let c = center_frames(clip, cfg.frames_out)?;
    let c = center_crop(&c, cfg.crop)?;
    Ok(normalize(&c))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn ramp(frames: usize, h: usize, w: usize) -> LabeledClip {
        let data = (0..frames * h * w * 3).map(|i| (i % 251) as u8).collect();
        LabeledClip::new(frames, h, w, 3, data, 1, "ramp").unwrap()
    }

    fn constant(h: usize, w: usize, v: u8) -> LabeledClip {
        LabeledClip::new(2, h, w, 1, vec![v; 2 * h * w], 0, "flat").unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Frame `i` of `ramp` starts with byte `i * frame_len % 251`.
    fn first_bytes(clip: &LabeledClip) -> Vec<u8> {
        (0..clip.frames).map(|f| clip.frame(f)[0]).collect()
    }

    #[test]
    fn frame_window_rules() {
        let same = ramp(8, 2, 2);
        assert_eq!(sample_frames(&same, 8, &mut rng(0)).unwrap(), same);

        let long = ramp(40, 1, 1);
        let mut offsets = std::collections::BTreeSet::new();
        for s in 0..200 {
            let out = sample_frames(&long, 32, &mut rng(s)).unwrap();
            let firsts = first_bytes(&out);
            let start = first_bytes(&long).iter().position(|&b| b == firsts[0]).unwrap();
            assert_eq!(firsts, first_bytes(&long)[start..start + 32]);
            offsets.insert(start);
        }
        assert_eq!(offsets, (0..=8).collect());

        let short = ramp(10, 1, 1);
        let out = sample_frames(&short, 32, &mut rng(1)).unwrap();
        let src = first_bytes(&short);
        assert_eq!(first_bytes(&out), (0..32).map(|i| src[i % 10]).collect::<Vec<_>>());
    }

    #[test]
    fn scale_rules() {
        let clip = ramp(1, 8, 8);
        assert_eq!(random_scale(&clip, &[1.0], 8, &mut rng(0)).unwrap(), clip);
        let big = constant(160, 160, 9);
        let half = random_scale(&big, &[0.5], 80, &mut rng(0)).unwrap();
        assert_eq!((half.height, half.width), (80, 80));
        assert!(half.data.iter().all(|&v| v == 9));
        let err = random_scale(&big, &[0.5], 112, &mut rng(0)).unwrap_err().to_string();
        assert!(err.contains("224"), "{err}");
    }

    #[test]
    fn crop_rules() {
        let clip = ramp(2, 5, 5);
        assert_eq!(random_crop(&clip, 5, &mut rng(0)).unwrap(), clip);
        let big = ramp(1, 113, 113);
        for s in 0..20 {
            let out = random_crop(&big, 112, &mut rng(s)).unwrap();
            assert!(out.data.iter().all(|v| big.data.contains(v)));
        }
        assert!(random_crop(&clip, 6, &mut rng(0)).is_err());
    }

    #[test]
    fn elastic_rules() {
        let clip = ramp(2, 9, 9);
        assert_eq!(elastic_displacement(&clip, 2.0, 0.0, &mut rng(3)).unwrap(), clip);
        let flat = constant(9, 9, 77);
        assert_eq!(elastic_displacement(&flat, 2.0, 1.0, &mut rng(3)).unwrap(), flat);
        let (dy, dx) = displacement_field(32, 32, 2.0, 1.0, &mut rng(4));
        let mean = dy.iter().chain(&dx).map(|v| v.abs()).sum::<f64>() / (2 * dy.len()) as f64;
        assert!(mean <= 1.0);
        assert!(dy.iter().chain(&dx).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn normalize_values_and_layout() {
        let clip = LabeledClip::new(1, 1, 3, 1, vec![255, 0, 128], 0, "n").unwrap();
        let t = normalize(&clip);
        assert_eq!(t.shape(), &[1, 1, 1, 1, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);

        let rgb = ramp(2, 3, 4);
        let t = normalize(&rgb);
        for f in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    for c in 0..3 {
                        let i = (((c * 2) + f) * 3 + y) * 4 + x;
                        assert_eq!(t.data()[i], rgb.at(f, y, x, c) as f32 / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn chain_is_deterministic_and_shaped() {
        let clip = ramp(20, 40, 40);
        let cfg = AugmentConfig {
            crop: 20,
            frames_out: 16,
            ..AugmentConfig::default()
        };
        let a = augment(&clip, &cfg, &mut rng(9)).unwrap();
        let b = augment(&clip, &cfg, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 3, 16, 20, 20]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let e = eval_preprocess(&clip, &cfg).unwrap();
        assert_eq!(e.shape(), a.shape());
    }
}
