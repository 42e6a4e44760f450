//! Named-tensor checkpoint archive.
//!
//! Layout (little-endian): `"R3CK"`, u16 version = 1, u32 tensor count, then
//! per tensor u16 name length, name bytes, u8 rank, u32 dims, f32 payload;
//! a trailing u32 CRC32 covers every preceding byte. Tensors are written in
//! name order, so equal contents give identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"R3CK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub const EPOCH_KEY: &str = "meta.epoch";
pub const CONFIG_KEY: &str = "meta.config";
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Network parameters and BN buffers, optimizer velocities, epoch, and
    /// the run configuration text.
    pub fn capture(net: &Network<f32>, opt: Option<&Sgd<f32>>, epoch: usize, config_text: &str) -> Self {
        let mut ck = Checkpoint::default();
        for (name, t) in net.named_tensors() {
            ck.insert(name, t);
        }
        if let Some(opt) = opt {
            for (slot, p) in net.params.iter().enumerate() {
                ck.insert(format!("{VELOCITY_PREFIX}{}", p.name), opt.velocity(slot).clone());
            }
        }
        ck.insert(EPOCH_KEY, Tensor::scalar(epoch as f32).reshape(&[1]).expect("one element"));
        let text: Vec<f32> = config_text.bytes().map(f32::from).collect();
        let n = text.len();
        ck.insert(CONFIG_KEY, Tensor::new(&[n], text).expect("length matches"));
        ck
    }

    pub fn epoch(&self) -> Option<usize> {
        self.tensors.get(EPOCH_KEY).map(|t| t.data()[0] as usize)
    }

    pub fn config_text(&self) -> Option<String> {
        let t = self.tensors.get(CONFIG_KEY)?;
        let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).ok()
    }

    /// Loads parameters/buffers (and velocities if `opt` is given); nothing is
    /// modified when any name or shape disagrees.
    pub fn restore(&self, net: &mut Network<f32>, opt: Option<&mut Sgd<f32>>) -> Result<()> {
        let model: BTreeMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("meta.") && !k.starts_with("optim."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut velocities = Vec::new();
        if opt.is_some() {
            for (slot, p) in net.params.iter().enumerate() {
                let key = format!("{VELOCITY_PREFIX}{}", p.name);
                let v = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Mismatch(format!("missing 1: {key}")))?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Mismatch(format!("mis-shaped 1: {key}")));
                }
                velocities.push((slot, v.clone()));
            }
        }
        net.load_named(&model)?;
        if let Some(opt) = opt {
            for (slot, v) in velocities {
                opt.set_velocity(slot, v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Data(format!("rank too large: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Data(format!("extent too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?.to_vec();
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail(0, format!("bad magic {magic:?}, expected \"R3CK\"")));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| r.fail(at + 2, "tensor name is not UTF-8"))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.fail(at, format!("{name}: extents overflow")))?;
            let payload = r.take(numel, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.fail(at, e.to_string()))?;
            if ck.tensors.insert(name.clone(), t).is_some() {
                return Err(r.fail(at, format!("duplicate tensor {name}")));
            }
        }
        let body_end = r.pos;
        let stored = r.u32("CRC32 trailer")?;
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(r.fail(body_end, format!("CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp: PathBuf = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.insert("b", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        ck.insert("a", Tensor::scalar(4.0));
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected_with_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        let e = Checkpoint::from_bytes(&flipped, Path::new("c.ckpt")).unwrap_err().to_string();
        assert!(e.contains("c.ckpt"), "{e}");
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 7], Path::new("c")).unwrap_err().to_string();
        assert!(e.contains("byte offset") && e.contains("truncated"), "{e}");
        let mut magic = bytes.clone();
        magic[1] = b'x';
        let e = Checkpoint::from_bytes(&magic, Path::new("c")).unwrap_err().to_string();
        assert!(e.contains("byte offset 0"), "{e}");
    }
}
