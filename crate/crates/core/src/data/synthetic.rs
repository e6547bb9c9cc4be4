//! Procedural captioned shapes with cipher "translations".

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaptionedImage, Dataset, LanguageCode, Pixels};
use crate::error::{Error, Result};

pub const CIPHER_FILE: &str = "cipher.tsv";

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const SIZES: [&str; 3] = ["small", "medium", "large"];
const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 190, 40]),
    ("blue", [30, 60, 230]),
    ("yellow", [235, 225, 30]),
    ("cyan", [30, 220, 220]),
    ("magenta", [220, 40, 210]),
    ("white", [250, 250, 250]),
    ("black", [10, 10, 10]),
];
const VERTICAL: [&str; 2] = ["top", "bottom"];
const HORIZONTAL: [&str; 2] = ["left", "right"];
const BACKGROUND: u8 = 128;
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "ve", "zu", "ba", "de", "fo", "gi", "ha", "ju",
];

/// One rendered object: shape, colour and size indices plus a quadrant
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scene {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub quadrant: usize,
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            shape: rng.random_range(0..SHAPES.len()),
            color: rng.random_range(0..COLORS.len()),
            size: rng.random_range(0..SIZES.len()),
            quadrant: rng.random_range(0..4),
        }
    }

    /// English caption, e.g. `small red circle top left`.
    pub fn caption(&self) -> String {
        format!(
            "{} {} {} {} {}",
            SIZES[self.size],
            COLORS[self.color].0,
            SHAPES[self.shape],
            VERTICAL[self.quadrant / 2],
            HORIZONTAL[self.quadrant % 2]
        )
    }

    /// `side · side · 3` RGB bytes: noisy grey background, object centred in
    /// its quadrant with a small jitter.
    pub fn render(&self, side: usize, rng: &mut impl Rng) -> Vec<u8> {
        let q = side as f32 / 2.0;
        let jitter = (side as f32 / 16.0).max(0.5);
        let cx = (self.quadrant % 2) as f32 * q + q / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = (self.quadrant / 2) as f32 * q + q / 2.0 + rng.random_range(-jitter..=jitter);
        let r = q / 2.0 * [0.45, 0.7, 0.95][self.size];
        let color = COLORS[self.color].1;
        let mut px = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let inside = match self.shape {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs().max(dy.abs()) <= r * 0.8,
                    2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                    _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
                };
                for &ch in &color {
                    let base = if inside { ch } else { BACKGROUND } as i32;
                    let v = base + rng.random_range(-8..=8);
                    px.push(v.clamp(0, 255) as u8);
                }
            }
        }
        px
    }
}

fn base_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = SIZES.to_vec();
    w.extend(COLORS.iter().map(|c| c.0));
    w.extend(SHAPES);
    w.extend(VERTICAL);
    w.extend(HORIZONTAL);
    w
}

/// Per-language word substitution tables. Language 0 is the identity; every
/// other language maps each base word to a distinct pseudo-word prefixed with
/// the language code, so no two languages share a token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cipher {
    languages: Vec<LanguageCode>,
    tables: Vec<BTreeMap<String, String>>,
}

impl Cipher {
    pub fn new(languages: &[LanguageCode], seed: u64) -> Self {
        let words = base_words();
        let tables = languages
            .iter()
            .enumerate()
            .map(|(k, lang)| {
                if k == 0 {
                    return words.iter().map(|w| (w.to_string(), w.to_string())).collect();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
                let prefix: String = lang.as_str().chars().take(3).collect::<String>().to_lowercase();
                let mut used = HashSet::new();
                words
                    .iter()
                    .map(|w| loop {
                        let n = rng.random_range(2..=3);
                        let body: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
                        let surface = format!("{prefix}{body}");
                        if used.insert(surface.clone()) {
                            break (w.to_string(), surface);
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            languages: languages.to_vec(),
            tables,
        }
    }

    pub fn languages(&self) -> &[LanguageCode] {
        &self.languages
    }

    pub fn encode(&self, lang: usize, base: &str) -> String {
        let t = &self.tables[lang];
        base.split_whitespace()
            .map(|w| t.get(w).map(String::as_str).unwrap_or(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn decode(&self, lang: usize, text: &str) -> String {
        let t = &self.tables[lang];
        text.split_whitespace()
            .map(|w| t.iter().find(|(_, s)| s.as_str() == w).map(|(b, _)| b.as_str()).unwrap_or(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("language\tbase\tsurface\n");
        for (lang, table) in self.languages.iter().zip(&self.tables) {
            for (b, w) in table {
                s.push_str(&format!("{lang}\t{b}\t{w}\n"));
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut languages: Vec<LanguageCode> = Vec::new();
        let mut tables: Vec<BTreeMap<String, String>> = Vec::new();
        for (n, line) in s.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("{}: line {} needs 3 fields", path.display(), n + 1)));
            }
            let lang = LanguageCode::new(f[0])?;
            if languages.last() != Some(&lang) {
                languages.push(lang);
                tables.push(BTreeMap::new());
            }
            tables.last_mut().unwrap().insert(f[1].to_string(), f[2].to_string());
        }
        Ok(Self { languages, tables })
    }
}

/// `n_images` random scenes rendered at `image_size`, each captioned in all
/// `n_languages` languages, with aesthetic scores uniform in `[3.5, 6.5)`.
pub fn generate_synthetic_corpus(
    n_images: usize,
    n_languages: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Dataset, Cipher)> {
    if n_languages == 0 {
        return Err(Error::Contract("n_languages must be >= 1".into()));
    }
    if image_size < 4 {
        return Err(Error::Contract(format!("image_size {image_size} is too small to draw on")));
    }
    let languages: Vec<LanguageCode> = (0..n_languages).map(LanguageCode::nth).collect();
    let cipher = Cipher::new(&languages, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n_images.max(1).to_string().len();
    let records = (0..n_images)
        .map(|i| {
            let scene = Scene::random(&mut rng);
            let pixels = scene.render(image_size, &mut rng);
            let aesthetic_score = rng.random_range(3.5..6.5);
            let base = scene.caption();
            CaptionedImage {
                id: format!("img{i:0width$}"),
                pixels: Pixels::Raw(pixels),
                aesthetic_score,
                captions: (0..n_languages).map(|k| cipher.encode(k, &base)).collect(),
            }
        })
        .collect();
    Ok((Dataset::new(languages, records)?, cipher))
}
