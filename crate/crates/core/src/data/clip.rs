//! Raw 8-bit clips and the `.r3clip` container.
//!
//! Layout (little-endian): `"R3CL"`, u16 version = 1, u16 channels,
//! u32 frames, u32 height, u32 width, then `frames * height * width * channels`
//! bytes, frame-major, then row-major, channel-minor.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"R3CL";
pub const CLIP_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// Frames stored as `F x H x W x C` bytes, plus the class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub label: usize,
    pub id: String,
}

impl LabeledClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
        label: usize,
        id: impl Into<String>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Data(format!("clip extents must be >= 1, got {frames}x{height}x{width}")));
        }
        if !matches!(channels, 1 | 3) {
            return Err(Error::Data(format!("clip channels must be 1 or 3, got {channels}")));
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "clip payload has {} bytes, {frames}x{height}x{width}x{channels} needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            label,
            id: id.into(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> u8 {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Same label and id with new frames.
    pub fn with_frames(&self, frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(frames, height, width, self.channels, data, self.label, self.id.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(CLIP_MAGIC);
        out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        for v in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a `.r3clip` body; `path` is used only for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path, label: usize, id: impl Into<String>) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[0..4] != CLIP_MAGIC {
            return Err(fail(0, format!("bad magic {:?}, expected \"R3CL\"", &bytes[0..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        let version = u16_at(4);
        if version != CLIP_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let channels = u16_at(6) as usize;
        let (frames, height, width) = (u32_at(8), u32_at(12), u32_at(16));
        let payload = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| fail(8, "extents overflow".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < payload {
            return Err(fail(
                bytes.len(),
                format!("truncated payload: {} of {payload} bytes", body.len()),
            ));
        }
        if body.len() > payload {
            return Err(fail(HEADER_LEN + payload, format!("{} trailing bytes", body.len() - payload)));
        }
        Self::new(frames, height, width, channels, body.to_vec(), label, id)
            .map_err(|e| fail(6, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, label: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(&bytes, path, label, id)
    }
}

/// Clips plus the class names their labels index into.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClipDataset {
    pub classes: Vec<String>,
    pub clips: Vec<LabeledClip>,
}

impl ClipDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Writes `<root>/<class>/<id>.r3clip` for every clip.
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        for class in &self.classes {
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for clip in &self.clips {
            let class = self.classes.get(clip.label).ok_or_else(|| {
                Error::Data(format!("clip {} has label {} outside the class list", clip.id, clip.label))
            })?;
            clip.save(&root.join(class).join(format!("{}.r3clip", clip.id)))?;
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads `<root>/<class_name>/<clip_id>.r3clip`; classes are indexed in
/// lexicographic order.
pub fn load_clip_dir(root: &Path) -> Result<ClipDataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::File {
            path: root.to_path_buf(),
            msg: "no class directories".into(),
        });
    }
    let mut classes = Vec::new();
    let mut clips = Vec::new();
    let mut empty = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "r3clip"))
            .collect();
        if files.is_empty() {
            empty.push(name.clone());
        }
        for file in files {
            clips.push(LabeledClip::load(&file, label)?);
        }
        classes.push(name);
    }
    if !empty.is_empty() {
        return Err(Error::Data(format!(
            "{}: class directories without .r3clip files: {}",
            root.display(),
            empty.join(", ")
        )));
    }
    Ok(ClipDataset { classes, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: usize) -> LabeledClip {
        let data = (0..2 * 3 * 4 * 3).map(|i| (i * 37 % 256) as u8).collect();
        LabeledClip::new(2, 3, 4, 3, data, label, "c").unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let clip = sample(0);
        let bytes = clip.to_bytes();
        assert_eq!(&bytes[..4], b"R3CL");
        let back = LabeledClip::from_bytes(&bytes, Path::new("x"), 0, "c").unwrap();
        assert_eq!(back, clip);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = sample(0).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = LabeledClip::from_bytes(&bad, Path::new("a.r3clip"), 0, "a").unwrap_err().to_string();
        assert!(e.contains("a.r3clip") && e.contains("magic"), "{e}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(LabeledClip::from_bytes(&bad, Path::new("a"), 0, "a").is_err());
        let e = LabeledClip::from_bytes(&bytes[..bytes.len() - 1], Path::new("a"), 0, "a")
            .unwrap_err()
            .to_string();
        assert!(e.contains("truncated"), "{e}");
    }

    #[test]
    fn layout_indexing() {
        let clip = sample(0);
        assert_eq!(clip.at(1, 2, 3, 2), clip.data[((3 + 2) * 4 + 3) * 3 + 2]);
    }
}
