//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`, floats little-endian `f32`):
//!
//! ```text
//! "NCLP" | version | n_fields | config fields...
//! n_tensors | { name_len | name (utf-8) | ndim | dims... | payload } ...
//! crc32 of every payload byte, in table order
//! ```
//!
//! Tensors are written in insertion order, so a load followed by a save
//! reproduces the original bytes.

use std::fs;
use std::path::Path;

use super::{DualEncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCLP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &DualEncoderModel) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model
                .named_params()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn to_model(&self) -> Result<DualEncoderModel> {
        DualEncoderModel::from_named(self.config.clone(), &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(64 + payload);
        let mut crc = crc32fast::Hasher::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let fields = self.config.to_fields();
        put_u32(&mut out, fields.len() as u32);
        for f in fields {
            put_u32(&mut out, f);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&out[start..]);
        }
        put_u32(&mut out, crc.finalize());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let n_fields = r.u32()? as usize;
        if n_fields > 64 {
            return Err(Error::Format(format!("implausible config field count {n_fields}")));
        }
        let fields = (0..n_fields).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_fields(&fields)?;
        let n_tensors = r.u32()? as usize;
        let mut crc = crc32fast::Hasher::new();
        let mut tensors = Vec::with_capacity(n_tensors.min(4096));
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            crc.update(raw);
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let stored = r.u32()?;
        if stored != crc.finalize() {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(model: &DualEncoderModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoderModel> {
    Checkpoint::load(path)?.to_model()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity(format!("checkpoint truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PresetPair;

    fn model(seed: u64) -> DualEncoderModel {
        let pair: PresetPair = "b-b".parse().unwrap();
        DualEncoderModel::new(ModelConfig::from_presets(pair, 8, 4, 16, 6).unwrap(), seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = model(9);
        let ck = Checkpoint::from_model(&m);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_model().unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = Checkpoint::from_model(&model(1)).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = Checkpoint::from_model(&model(1)).to_bytes();
        bytes[4] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = Checkpoint::from_model(&model(1)).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 80] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Integrity(_))
            ));
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = Checkpoint::from_model(&model(1)).to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn resave_is_byte_identical() {
        let bytes = Checkpoint::from_model(&model(4)).to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again);
    }
}
