//! Line-oriented `key = value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::hex16;
use crate::error::{Error, Result};
use crate::model::{FreezeRegime, PresetPair};
use crate::optim::{OptimizerKind, DEFAULT_BLOCK_SIZE};

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: PresetPair,
    pub regime: FreezeRegime,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    /// Batch order.
    pub data_seed: u64,
    /// Parameter initialisation.
    pub init_seed: u64,
    /// Per-epoch caption language draws.
    pub sampler_seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub block_size: usize,
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Start from these weights instead of a fresh initialisation.
    pub init_checkpoint: Option<PathBuf>,
    /// Train on these languages only; all dataset languages when empty.
    pub train_languages: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "l-b".parse().expect("valid preset"),
            regime: FreezeRegime::Full,
            optimizer: OptimizerKind::Lion,
            lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 10,
            warmup_steps: 0,
            data_seed: 0,
            init_seed: 0,
            sampler_seed: 0,
            image_size: 16,
            patch_size: 16,
            max_text_len: 8,
            block_size: DEFAULT_BLOCK_SIZE,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            init_checkpoint: None,
            train_languages: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 19] = [
        "preset",
        "regime",
        "optimizer",
        "lr",
        "weight_decay",
        "batch_size",
        "epochs",
        "warmup_steps",
        "data_seed",
        "init_seed",
        "sampler_seed",
        "image_size",
        "patch_size",
        "max_text_len",
        "block_size",
        "dataset",
        "output",
        "init_checkpoint",
        "train_languages",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.preset = v.parse()?,
            "regime" => self.regime = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "sampler_seed" => self.sampler_seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "max_text_len" => self.max_text_len = parse(key, v)?,
            "block_size" => self.block_size = parse(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            "init_checkpoint" => self.init_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_languages" => {
                self.train_languages = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("preset", self.preset.to_string());
        m.insert("regime", self.regime.to_string());
        m.insert("optimizer", self.optimizer.to_string());
        m.insert("lr", format!("{:?}", self.lr));
        m.insert("weight_decay", format!("{:?}", self.weight_decay));
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("warmup_steps", self.warmup_steps.to_string());
        m.insert("data_seed", self.data_seed.to_string());
        m.insert("init_seed", self.init_seed.to_string());
        m.insert("sampler_seed", self.sampler_seed.to_string());
        m.insert("image_size", self.image_size.to_string());
        m.insert("patch_size", self.patch_size.to_string());
        m.insert("max_text_len", self.max_text_len.to_string());
        m.insert("block_size", self.block_size.to_string());
        m.insert("dataset", self.dataset.display().to_string());
        m.insert("output", self.output.display().to_string());
        m.insert(
            "init_checkpoint",
            self.init_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        m.insert("train_languages", self.train_languages.join(","));
        m
    }

    /// `key = value` lines in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let m = self.to_map();
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", m[k])).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {} is not `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_text_len < 3 {
            return Err(Error::Config("max_text_len must be >= 3".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Digest of every setting except the output directory, so two runs
    /// that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_map() {
            if k != "output" {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex16(&h.finalize())
    }
}
