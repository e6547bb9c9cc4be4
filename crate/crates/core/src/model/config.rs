use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-width multiplier of the feed-forward sublayer.
pub const MLP_RATIO: usize = 4;

/// Tower size preset. Desk-scale stand-ins for the base/large/huge backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizePreset {
    B,
    L,
    H,
}

impl SizePreset {
    pub const ALL: [SizePreset; 3] = [SizePreset::B, SizePreset::L, SizePreset::H];

    /// `(layers, width, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::B => (2, 64, 2),
            SizePreset::L => (4, 128, 4),
            SizePreset::H => (6, 192, 6),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizePreset::B => "b",
            SizePreset::L => "l",
            SizePreset::H => "h",
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "b" => Ok(SizePreset::B),
            "l" => Ok(SizePreset::L),
            "h" => Ok(SizePreset::H),
            other => Err(Error::Config(format!("unknown size preset `{other}` (expected b, l or h)"))),
        }
    }
}

/// `image-text` preset pair such as `l-b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresetPair {
    pub image: SizePreset,
    pub text: SizePreset,
}

impl fmt::Display for PresetPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.image, self.text)
    }
}

impl FromStr for PresetPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (i, t) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("preset pair `{s}` must look like `l-b`")))?;
        Ok(PresetPair {
            image: i.parse()?,
            text: t.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub embed_dim: usize,
}

impl ModelConfig {
    pub const DEFAULT_EMBED_DIM: usize = 64;

    pub fn from_presets(
        pair: PresetPair,
        image_size: usize,
        patch_size: usize,
        vocab_size: usize,
        max_text_len: usize,
    ) -> Result<Self> {
        let (image_layers, image_dim, image_heads) = pair.image.dims();
        let (text_layers, text_dim, text_heads) = pair.text.dims();
        let cfg = Self {
            image_size,
            patch_size,
            channels: 3,
            image_layers,
            image_heads,
            image_dim,
            text_layers,
            text_heads,
            text_dim,
            vocab_size,
            max_text_len,
            embed_dim: Self::DEFAULT_EMBED_DIM,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("image_layers", self.image_layers),
            ("image_heads", self.image_heads),
            ("image_dim", self.image_dim),
            ("text_layers", self.text_layers),
            ("text_heads", self.text_heads),
            ("text_dim", self.text_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.image_dim.is_multiple_of(self.image_heads) {
            return Err(Error::Config(format!(
                "image_dim {} is not divisible by image_heads {}",
                self.image_dim, self.image_heads
            )));
        }
        if !self.text_dim.is_multiple_of(self.text_heads) {
            return Err(Error::Config(format!(
                "text_dim {} is not divisible by text_heads {}",
                self.text_dim, self.text_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Fixed-order integer encoding used by the checkpoint format.
    pub(crate) fn to_fields(&self) -> [u32; 12] {
        [
            self.image_size,
            self.patch_size,
            self.channels,
            self.image_layers,
            self.image_heads,
            self.image_dim,
            self.text_layers,
            self.text_heads,
            self.text_dim,
            self.vocab_size,
            self.max_text_len,
            self.embed_dim,
        ]
        .map(|v| v as u32)
    }

    pub(crate) fn from_fields(f: &[u32]) -> Result<Self> {
        if f.len() != 12 {
            return Err(Error::Format(format!("expected 12 config fields, found {}", f.len())));
        }
        let f: Vec<usize> = f.iter().map(|&v| v as usize).collect();
        let cfg = Self {
            image_size: f[0],
            patch_size: f[1],
            channels: f[2],
            image_layers: f[3],
            image_heads: f[4],
            image_dim: f[5],
            text_layers: f[6],
            text_heads: f[7],
            text_dim: f[8],
            vocab_size: f[9],
            max_text_len: f[10],
            embed_dim: f[11],
        };
        cfg.validate().map_err(|e| Error::Format(format!("invalid config in checkpoint: {e}")))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_pair_parses() {
        let p: PresetPair = "l-b".parse().unwrap();
        assert_eq!(p.image, SizePreset::L);
        assert_eq!(p.text, SizePreset::B);
        assert_eq!(p.to_string(), "l-b");
        assert!("x-b".parse::<PresetPair>().is_err());
        assert!("lb".parse::<PresetPair>().is_err());
    }

    #[test]
    fn validation_rejects_bad_patch() {
        let pair = "b-b".parse().unwrap();
        assert!(ModelConfig::from_presets(pair, 10, 4, 10, 8).is_err());
        let cfg = ModelConfig::from_presets(pair, 8, 4, 10, 8).unwrap();
        assert_eq!(cfg.num_patches(), 4);
        let mut bad = cfg.clone();
        bad.text_heads = 3;
        assert!(bad.validate().is_err());
    }
}
