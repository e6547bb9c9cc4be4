//! Captioned-image datasets: schema, filtering, splitting and per-epoch
//! caption sampling.

mod io;
mod synthetic;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, load_split, save_dataset, save_split, MANIFEST_FILE, SPLIT_FILE};
pub use synthetic::{generate_synthetic_corpus, Cipher, Scene, CIPHER_FILE};
pub use vocab::{tokenize, tokenize_batch, Vocabulary, BOS, EOS, PAD, UNK, VOCAB_FILE};

pub const AESTHETIC_THRESHOLD: f64 = 4.5;
pub const VAL_FRACTION: f64 = 0.15;
/// Separator between multiple captions of one image in one language.
pub const CAPTION_SEPARATOR: &str = " ||| ";

/// Flores-200 codes handed out to synthetic languages, in order, together
/// with the two-letter codes evaluation tables use for them.
const KNOWN_LANGUAGES: &[(&str, &str)] = &[
    ("eng_Latn", "en"),
    ("fra_Latn", "fr"),
    ("deu_Latn", "de"),
    ("zho_Hans", "zh"),
    ("spa_Latn", "es"),
    ("ita_Latn", "it"),
    ("tur_Latn", "tr"),
    ("rus_Cyrl", "ru"),
    ("kor_Hang", "ko"),
    ("pol_Latn", "pl"),
    ("jpn_Jpan", "ja"),
    ("arb_Arab", "ar"),
    ("ben_Beng", "bn"),
    ("ces_Latn", "cs"),
    ("dan_Latn", "da"),
    ("ell_Grek", "el"),
    ("pes_Arab", "fa"),
    ("fin_Latn", "fi"),
    ("tgl_Latn", "fil"),
    ("heb_Hebr", "he"),
    ("hin_Deva", "hi"),
    ("hrv_Latn", "hr"),
    ("hun_Latn", "hu"),
    ("ind_Latn", "id"),
    ("mri_Latn", "mi"),
    ("nld_Latn", "nl"),
    ("nob_Latn", "no"),
    ("por_Latn", "pt"),
    ("quy_Latn", "quz"),
    ("ron_Latn", "ro"),
    ("swe_Latn", "sv"),
    ("swh_Latn", "sw"),
    ("tel_Telu", "te"),
    ("tha_Thai", "th"),
    ("ukr_Cyrl", "uk"),
    ("vie_Latn", "vi"),
];

/// A Flores-200-style language identifier such as `eng_Latn`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(Error::Format(format!("invalid language code `{code}`")));
        }
        Ok(Self(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `i`-th synthetic language: real Flores codes first, then `x{i}_Synt`.
    pub fn nth(i: usize) -> Self {
        match KNOWN_LANGUAGES.get(i) {
            Some((code, _)) => Self(code.to_string()),
            None => Self(format!("x{i:03}_Synt")),
        }
    }

    /// Short code used by evaluation tables (`en`, `fr`, ...), if any.
    pub fn short_code(&self) -> Option<&'static str> {
        KNOWN_LANGUAGES.iter().find(|(c, _)| *c == self.0).map(|(_, s)| *s)
    }

    /// True if `other` names this language either way.
    pub fn matches(&self, other: &str) -> bool {
        self.0 == other || self.short_code() == Some(other) || (other == "jp" && self.short_code() == Some("ja"))
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pixels held in memory or referenced on disk and read on demand. Bytes are
/// 8-bit RGB, row-major, `side · side · 3` long.
#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Raw(Vec<u8>),
    File(PathBuf),
}

impl Pixels {
    pub fn bytes(&self) -> Result<std::borrow::Cow<'_, [u8]>> {
        match self {
            Pixels::Raw(b) => Ok(std::borrow::Cow::Borrowed(b)),
            Pixels::File(p) => std::fs::read(p)
                .map(std::borrow::Cow::Owned)
                .map_err(|e| Error::io(p, e)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub id: String,
    pub pixels: Pixels,
    pub aesthetic_score: f64,
    /// One field per dataset language, in the dataset's language order.
    /// Multiple captions are joined with [`CAPTION_SEPARATOR`].
    pub captions: Vec<String>,
}

impl CaptionedImage {
    /// Captions of language slot `lang`, split on the separator.
    pub fn captions_for(&self, lang: usize) -> Vec<&str> {
        self.captions[lang].split(CAPTION_SEPARATOR).collect()
    }

    pub fn first_caption(&self, lang: usize) -> &str {
        self.captions[lang].split(CAPTION_SEPARATOR).next().unwrap_or("")
    }
}

/// Records sharing one language set. Construction enforces that every record
/// has a caption in every language, unique ids and finite scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    languages: Vec<LanguageCode>,
    records: Vec<CaptionedImage>,
}

impl Dataset {
    pub fn new(languages: Vec<LanguageCode>, records: Vec<CaptionedImage>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &languages {
            if !seen.insert(l.as_str()) {
                return Err(Error::Format(format!("duplicate language code `{l}`")));
            }
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate record id `{}`", r.id)));
            }
            if !r.aesthetic_score.is_finite() {
                return Err(Error::Format(format!("record `{}` has a non-finite aesthetic score", r.id)));
            }
            if r.captions.len() != languages.len() {
                return Err(Error::Format(format!(
                    "record `{}` has {} captions for {} languages",
                    r.id,
                    r.captions.len(),
                    languages.len()
                )));
            }
            if let Some(i) = r.captions.iter().position(|c| c.trim().is_empty()) {
                return Err(Error::Format(format!(
                    "record `{}` is missing its `{}` caption",
                    r.id, languages[i]
                )));
            }
        }
        Ok(Self { languages, records })
    }

    pub fn languages(&self) -> &[LanguageCode] {
        &self.languages
    }

    pub fn records(&self) -> &[CaptionedImage] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.matches(code))
    }

    /// Same records restricted to `keep` languages (in the given order).
    pub fn with_languages(&self, keep: &[LanguageCode]) -> Result<Self> {
        let idx = keep
            .iter()
            .map(|l| {
                self.language_index(l.as_str())
                    .ok_or_else(|| Error::Config(format!("dataset has no `{l}` captions")))
            })
            .collect::<Result<Vec<_>>>()?;
        let records = self
            .records
            .iter()
            .map(|r| CaptionedImage {
                captions: idx.iter().map(|&i| r.captions[i].clone()).collect(),
                ..r.clone()
            })
            .collect();
        Self::new(keep.to_vec(), records)
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            languages: self.languages.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Records whose id is in `ids`, in dataset order.
    pub fn select_ids(&self, ids: &[String]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let records: Vec<_> = self.records.iter().filter(|r| wanted.contains(r.id.as_str())).cloned().collect();
        if records.len() != wanted.len() {
            return Err(Error::Format(format!(
                "{} of {} listed ids are not in the dataset",
                wanted.len() - records.len(),
                wanted.len()
            )));
        }
        Ok(Self {
            languages: self.languages.clone(),
            records,
        })
    }

    /// Pixels of `indices` as a `[n, 3, side, side]` tensor scaled to `[-1, 1]`.
    pub fn image_tensor(&self, indices: &[usize], side: usize) -> Result<Tensor> {
        let per = side * side;
        let mut out = vec![0f32; indices.len() * 3 * per];
        for (n, &i) in indices.iter().enumerate() {
            let r = &self.records[i];
            let bytes = r.pixels.bytes()?;
            if bytes.len() != 3 * per {
                return Err(Error::Mismatch(format!(
                    "image `{}` has {} bytes, expected {side}x{side}x3",
                    r.id,
                    bytes.len()
                )));
            }
            let dst = &mut out[n * 3 * per..(n + 1) * 3 * per];
            for (p, px) in bytes.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    dst[c * per + p] = px[c] as f32 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![indices.len(), 3, side, side], out)
    }

    /// Short hex digest of languages, ids and captions. Pixels are not read.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.languages {
            h.update(l.as_str().as_bytes());
            h.update([0]);
        }
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update([1]);
            for c in &r.captions {
                h.update(c.as_bytes());
                h.update([2]);
            }
        }
        hex16(&h.finalize())
    }

    /// Side length of the first image, read from its byte count.
    pub fn image_side(&self) -> Result<usize> {
        let r = self
            .records
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        side_from_len(r.pixels.bytes()?.len(), &r.id)
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn side_from_len(len: usize, id: &str) -> Result<usize> {
    let side = ((len / 3) as f64).sqrt().round() as usize;
    if side == 0 || side * side * 3 != len {
        return Err(Error::Format(format!("image `{id}` has {len} bytes, not a square RGB image")));
    }
    Ok(side)
}

/// Records with score strictly above `threshold`, order preserved.
pub fn aesthetic_filter(records: Vec<CaptionedImage>, threshold: f64) -> Vec<CaptionedImage> {
    records.into_iter().filter(|r| r.aesthetic_score > threshold).collect()
}

/// Partitions `0..n` into (train, validation) index lists. The validation
/// size is `round(val_fraction · n)`; membership comes from a seeded shuffle
/// and both lists are returned in ascending order.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Contract(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// [`split_indices`] applied to a slice.
pub fn split<T: Clone>(records: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(records.len(), val_fraction, seed)?;
    Ok((
        train.iter().map(|&i| records[i].clone()).collect(),
        val.iter().map(|&i| records[i].clone()).collect(),
    ))
}

/// The caption language drawn for every image in one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub seed: u64,
    pub epoch: u64,
    /// Language slot per record, aligned with the dataset's records.
    pub choices: Vec<usize>,
}

impl EpochPlan {
    pub fn counts(&self, n_languages: usize) -> Vec<usize> {
        let mut c = vec![0; n_languages];
        for &l in &self.choices {
            c[l] += 1;
        }
        c
    }
}

/// Draws one language uniformly per image. Each draw depends only on
/// `(seed, epoch, image id)`, so plans are stable under record reordering.
pub fn sample_epoch(dataset: &Dataset, epoch: u64, seed: u64) -> Result<EpochPlan> {
    let n_lang = dataset.languages().len();
    if n_lang == 0 {
        return Err(Error::Contract("dataset has no languages".into()));
    }
    let choices = dataset
        .records()
        .iter()
        .map(|r| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(epoch.to_le_bytes());
            h.update(r.id.as_bytes());
            let digest: [u8; 32] = h.finalize().into();
            ChaCha8Rng::from_seed(digest).random_range(0..n_lang)
        })
        .collect();
    Ok(EpochPlan { seed, epoch, choices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, score: f64, caps: &[&str]) -> CaptionedImage {
        CaptionedImage {
            id: id.into(),
            pixels: Pixels::Raw(vec![0; 3]),
            aesthetic_score: score,
            captions: caps.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn filter_is_strict() {
        let kept = aesthetic_filter(vec![rec("a", 4.5, &["x"]), rec("b", 4.51, &["x"])], 4.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_indices(10, 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));
        let (t, v) = split_indices(2000, 0.15, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1700, 300));
        assert!(matches!(split_indices(0, 0.15, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn incomplete_record_is_rejected_by_id() {
        let langs = vec![LanguageCode::nth(0), LanguageCode::nth(1)];
        let err = Dataset::new(langs, vec![rec("ok", 5.0, &["a", "b"]), rec("bad7", 5.0, &["a", " "])]).unwrap_err();
        assert!(err.to_string().contains("bad7"), "{err}");
    }

    #[test]
    fn single_language_plan() {
        let ds = Dataset::new(vec![LanguageCode::nth(0)], vec![rec("a", 5.0, &["x"]), rec("b", 5.0, &["y"])]).unwrap();
        assert_eq!(sample_epoch(&ds, 3, 9).unwrap().choices, vec![0, 0]);
    }

    #[test]
    fn language_codes() {
        assert_eq!(LanguageCode::nth(0).as_str(), "eng_Latn");
        assert!(LanguageCode::nth(10).matches("jp"));
        assert_eq!(LanguageCode::nth(500).as_str(), "x500_Synt");
        assert!(LanguageCode::new("").is_err());
    }
}
