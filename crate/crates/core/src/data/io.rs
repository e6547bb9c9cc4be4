//! Manifest + raw-pixel directory format.
//!
//! `manifest.tsv` has a header `id  aesthetic_score  pixels  <lang>...` and
//! one tab-separated record per line. Pixel paths are relative to the
//! manifest's directory and are not opened until pixels are requested.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{CaptionedImage, Dataset, LanguageCode, Pixels};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
const PIXEL_DIR: &str = "pixels";
const FIXED_COLUMNS: [&str; 3] = ["id", "aesthetic_score", "pixels"];

fn check_field(id: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("record `{id}` has a tab or newline inside a field")));
    }
    Ok(())
}

/// Writes the manifest and one `pixels/<id>.rgb` file per record.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let pix = dir.join(PIXEL_DIR);
    fs::create_dir_all(&pix).map_err(|e| Error::io(&pix, e))?;
    let mut out = FIXED_COLUMNS.join("\t");
    for l in ds.languages() {
        out.push('\t');
        out.push_str(l.as_str());
    }
    out.push('\n');
    for r in ds.records() {
        check_field(&r.id, &r.id)?;
        if r.id.contains(['/', '\\']) || r.id.starts_with('.') {
            return Err(Error::Format(format!("record id `{}` is not usable as a file name", r.id)));
        }
        let rel = format!("{PIXEL_DIR}/{}.rgb", r.id);
        let path = dir.join(&rel);
        fs::write(&path, r.pixels.bytes()?).map_err(|e| Error::io(&path, e))?;
        // `{:?}` on f64 prints the shortest string that parses back exactly.
        out.push_str(&format!("{}\t{:?}\t{rel}", r.id, r.aesthetic_score));
        for c in &r.captions {
            check_field(&r.id, c)?;
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Parses `dir/manifest.tsv`. Pixels stay on disk until read.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(&path, e))?,
        None => return Err(Error::Format(format!("{}: missing header row", path.display()))),
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 4 || cols[..3] != FIXED_COLUMNS {
        return Err(Error::Format(format!(
            "{}: header must be `id aesthetic_score pixels <language>...`",
            path.display()
        )));
    }
    let languages = cols[3..].iter().map(|c| LanguageCode::new(*c)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let id = f[0];
        if f.len() != cols.len() {
            let missing = cols.get(f.len()).copied().unwrap_or("?");
            return Err(Error::Format(format!(
                "record `{id}` (line {}) has {} fields, expected {}; first missing column `{missing}`",
                n + 2,
                f.len(),
                cols.len()
            )));
        }
        let aesthetic_score: f64 = f[1]
            .parse()
            .map_err(|_| Error::Format(format!("record `{id}` has unparsable aesthetic score `{}`", f[1])))?;
        records.push(CaptionedImage {
            id: id.to_string(),
            pixels: Pixels::File(dir.join(f[2])),
            aesthetic_score,
            captions: f[3..].iter().map(|s| s.to_string()).collect(),
        });
    }
    Dataset::new(languages, records)
}

impl Dataset {
    /// Reads every on-disk image into memory.
    pub fn materialize(&self) -> Result<Dataset> {
        let records = self
            .records()
            .iter()
            .map(|r| {
                Ok(CaptionedImage {
                    pixels: Pixels::Raw(r.pixels.bytes()?.into_owned()),
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.languages().to_vec(), records)
    }
}

/// Writes `id\tsplit` lines, `train` first then `validation`.
pub fn save_split(path: &Path, train: &[String], validation: &[String]) -> Result<()> {
    let mut s = String::from("id\tsplit\n");
    for id in train {
        s.push_str(&format!("{id}\ttrain\n"));
    }
    for id in validation {
        s.push_str(&format!("{id}\tvalidation\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (n, line) in s.lines().enumerate().skip(1) {
        match line.split_once('\t') {
            Some((id, "train")) => train.push(id.to_string()),
            Some((id, "validation")) => val.push(id.to_string()),
            _ => return Err(Error::Format(format!("{}: bad split line {}", path.display(), n + 1))),
        }
    }
    Ok((train, val))
}
