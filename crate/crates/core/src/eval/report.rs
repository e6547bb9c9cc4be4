//! Per-language metric tables and their CSV / JSON-lines forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionMode, Direction};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_id: String,
    pub direction: Direction,
    pub caption_mode: CaptionMode,
    pub columns: Vec<String>,
}

impl ReportMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64, dataset_id: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            dataset_id: dataset_id.into(),
            direction: Direction::TextToImage,
            caption_mode: CaptionMode::FirstCaption,
            columns: Vec::new(),
        }
    }
}

/// Percent values in the report's column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub language: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
    pub average: MetricRow,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Meta(ReportMeta),
    Row(MetricRow),
    Average(MetricRow),
}

impl MetricReport {
    /// Builds the report; the average row is the column-wise mean of `rows`.
    pub fn new(meta: ReportMeta, rows: Vec<MetricRow>) -> Self {
        let width = meta.columns.len();
        let mut avg = vec![0.0; width];
        for r in &rows {
            for (a, v) in avg.iter_mut().zip(&r.values) {
                *a += v;
            }
        }
        if !rows.is_empty() {
            avg.iter_mut().for_each(|a| *a /= rows.len() as f64);
        }
        Self {
            meta,
            rows,
            average: MetricRow {
                language: "average".into(),
                values: avg,
            },
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.meta.columns.iter().position(|c| c == name)
    }

    pub fn row(&self, language: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.language == language)
    }

    /// `language,<columns>` with two-decimal percents, average row last.
    pub fn to_csv(&self) -> String {
        let mut s = format!("language,{}\n", self.meta.columns.join(","));
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            s.push_str(&r.language);
            for v in &r.values {
                s.push_str(&format!(",{v:.2}"));
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per line: metadata, language rows, average. Values are
    /// unrounded.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let lines = std::iter::once(Line::Meta(self.meta.clone()))
            .chain(self.rows.iter().cloned().map(Line::Row))
            .chain(std::iter::once(Line::Average(self.average.clone())));
        for l in lines {
            s.push_str(&serde_json::to_string(&l).expect("report serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut meta = None;
        let mut rows = Vec::new();
        let mut average = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("report line {}: {e}", n + 1)))?;
            match parsed {
                Line::Meta(m) => meta = Some(m),
                Line::Row(r) => rows.push(r),
                Line::Average(a) => average = Some(a),
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("report has no metadata line".into()))?;
        let average = average.ok_or_else(|| Error::Format("report has no average line".into()))?;
        Ok(Self { meta, rows, average })
    }

    /// Writes `<stem>.csv` and `<stem>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("jsonl", self.to_jsonl())] {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
