//! Attention-mask export as binary grayscale PGM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tape, Tensor};

/// Channel-averaged mask frames `(site, frame, height, width, values)`.
pub fn mask_frames(net: &mut Network<f32>, clip: &Tensor<f32>) -> Result<Vec<(usize, usize, usize, usize, Vec<f32>)>> {
    if net.spec.sites().is_empty() {
        return Err(Error::Arch("network has no attention sites enabled".into()));
    }
    if clip.shape().first() != Some(&1) {
        return Err(Error::Shape(format!("mask export takes a single clip [1, C, F, H, W], got {:?}", clip.shape())));
    }
    let mut initial;
    let net = if net.buffers.all_ready() {
        net
    } else {
        initial = net.clone();
        let named = initial.named_tensors().into_iter().collect();
        initial.load_named(&named)?;
        &mut initial
    };
    let mut tape = Tape::no_grad();
    let x = tape.constant(clip.clone());
    let out = net.forward(&mut tape, &x, BnMode::Eval)?;
    let mut frames = Vec::new();
    for (site, m) in &out.masks {
        let [_, c, f, h, w] = m.value().dims5()?;
        let data = m.data();
        let plane = h * w;
        for fi in 0..f {
            let mut avg = vec![0f32; plane];
            for ci in 0..c {
                let base = (ci * f + fi) * plane;
                for (a, &v) in avg.iter_mut().zip(&data[base..base + plane]) {
                    *a += v;
                }
            }
            avg.iter_mut().for_each(|a| *a /= c as f32);
            frames.push((*site, fi, h, w, avg));
        }
    }
    Ok(frames)
}

/// Writes `values` in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `site<k>_frame<f>.pgm` for every enabled site and mask frame.
/// A network without trained or loaded statistics uses its initial ones.
pub fn export_attention_masks(net: &mut Network<f32>, clip: &Tensor<f32>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let frames = mask_frames(net, clip)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(frames.len());
    for (site, f, h, w, values) in frames {
        let path = out_dir.join(format!("site{site}_frame{f}.pgm"));
        write_pgm(&path, h, w, &values)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_res3atn, NetworkSpec};

    fn spec(sites: &[usize]) -> NetworkSpec {
        NetworkSpec {
            num_classes: 4,
            input_frames: 8,
            channel_scale: 16,
            input_size: 32,
            ..NetworkSpec::default()
        }
        .with_sites(sites)
    }

    #[test]
    fn fresh_masks_are_mid_gray() {
        let mut net = build_res3atn::<f32>(&spec(&[1, 2])).unwrap();
        let clip = Tensor::from_fn(&[1, 3, 8, 32, 32], |i| ((i * 7919) % 255) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let paths = export_attention_masks(&mut net, &clip, dir.path()).unwrap();
        // site 1 runs at 2 frames, site 2 at 1
        assert_eq!(paths.len(), 2 + 1);
        for p in &paths {
            let bytes = fs::read(p).unwrap();
            let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
            assert!(bytes[..header_end].starts_with(b"P5\n"));
            for &v in &bytes[header_end..] {
                assert!((102..=152).contains(&v), "{v}");
            }
        }
        assert!(dir.path().join("site2_frame0.pgm").exists());
    }

    #[test]
    fn no_sites_is_an_error() {
        let mut net = build_res3atn::<f32>(&spec(&[])).unwrap();
        let clip = Tensor::zeros(&[1, 3, 8, 32, 32]);
        assert!(export_attention_masks(&mut net, &clip, Path::new("/nonexistent")).is_err());
    }
}
