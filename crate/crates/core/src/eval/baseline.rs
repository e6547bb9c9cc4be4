//! Published per-language results bundled as CSV, and report-vs-baseline
//! deltas.

use std::fs;
use std::path::Path;

use super::report::MetricReport;
use crate::data::LanguageCode;
use crate::error::{Error, Result};

pub const BASELINE_COLUMNS: [&str; 6] = ["R@1", "R@5", "R@10", "MRR@1", "MRR@5", "MRR@10"];
/// Largest allowed gap between a recomputed and a published average.
pub const AVERAGE_TOLERANCE: f64 = 0.005;

pub const BUNDLED_BASELINES: &[(&str, &str)] = &[
    ("table1-altclip", include_str!("../../baselines/table1-altclip.csv")),
    ("table1-nllb-clip-base", include_str!("../../baselines/table1-nllb-clip-base.csv")),
    ("table1-nllb-clip-large", include_str!("../../baselines/table1-nllb-clip-large.csv")),
    ("table2-italian-clip", include_str!("../../baselines/table2-italian-clip.csv")),
    ("table2-nllb-clip-base", include_str!("../../baselines/table2-nllb-clip-base.csv")),
    ("table2-nllb-clip-large", include_str!("../../baselines/table2-nllb-clip-large.csv")),
    ("table3-altclip", include_str!("../../baselines/table3-altclip.csv")),
    ("table3-m-clip", include_str!("../../baselines/table3-m-clip.csv")),
    ("table3-mural", include_str!("../../baselines/table3-mural.csv")),
    ("table3-nllb-clip-base", include_str!("../../baselines/table3-nllb-clip-base.csv")),
    ("table3-nllb-clip-large", include_str!("../../baselines/table3-nllb-clip-large.csv")),
    ("table4-msiglip", include_str!("../../baselines/table4-msiglip.csv")),
    ("table4-nllb-clip-base", include_str!("../../baselines/table4-nllb-clip-base.csv")),
    ("table4-nllb-clip-large", include_str!("../../baselines/table4-nllb-clip-large.csv")),
    ("table4-pali", include_str!("../../baselines/table4-pali.csv")),
];

pub type Entries = [Option<f64>; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTable {
    pub name: String,
    pub source: String,
    pub rows: Vec<(String, Entries)>,
    /// The table's own average row, when it has one.
    pub average: Option<Entries>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AverageCheck {
    pub column: &'static str,
    pub recomputed: f64,
    pub published: f64,
}

impl AverageCheck {
    pub fn ok(&self) -> bool {
        (self.recomputed - self.published).abs() <= AVERAGE_TOLERANCE
    }
}

impl BaselineTable {
    /// A bundled table by name. A bare `tableN` selects the NLLB-CLIP large
    /// column of that table.
    pub fn bundled(name: &str) -> Result<Self> {
        let key = match name {
            "table1" | "table2" | "table3" | "table4" => format!("{name}-nllb-clip-large"),
            other => other.to_string(),
        };
        let (_, text) = BUNDLED_BASELINES.iter().find(|(n, _)| *n == key).ok_or_else(|| {
            let names: Vec<&str> = BUNDLED_BASELINES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown baseline `{name}`; bundled: {}", names.join(", ")))
        })?;
        Self::parse(&key, text)
    }

    /// A bundled name or a path to a CSV in the same schema.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let p = Path::new(name_or_path);
        if p.extension().is_some_and(|e| e == "csv") && p.exists() {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("baseline");
            return Self::parse(stem, &text);
        }
        Self::bundled(name_or_path)
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format(format!("baseline `{name}` is empty")))?;
        let expected = format!("language,{},source", BASELINE_COLUMNS.join(","));
        if header.trim() != expected {
            return Err(Error::Format(format!("baseline `{name}` header must be `{expected}`")));
        }
        let mut rows = Vec::new();
        let mut average = None;
        let mut source = String::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(Error::Format(format!("baseline `{name}`: row `{line}` needs 8 fields")));
            }
            let mut entries = [None; 6];
            for (e, s) in entries.iter_mut().zip(&f[1..7]) {
                if !s.is_empty() {
                    *e = Some(s.parse::<f64>().map_err(|_| {
                        Error::Format(format!("baseline `{name}`: `{s}` in row `{}` is not a number", f[0]))
                    })?);
                }
            }
            source = f[7].to_string();
            if f[0] == "average" {
                average = Some(entries);
            } else {
                rows.push((f[0].to_string(), entries));
            }
        }
        Ok(Self {
            name: name.to_string(),
            source,
            rows,
            average,
        })
    }

    pub fn row(&self, language: &str) -> Option<&Entries> {
        self.rows.iter().find(|(l, _)| l == language).map(|(_, e)| e)
    }

    /// Mean of the per-language entries of `column` (those present).
    pub fn recomputed_average(&self, column: usize) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|(_, e)| e[column]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Recomputed vs published average for every column the table averages.
    pub fn average_checks(&self) -> Vec<AverageCheck> {
        let Some(avg) = &self.average else {
            return Vec::new();
        };
        (0..6)
            .filter_map(|c| {
                Some(AverageCheck {
                    column: BASELINE_COLUMNS[c],
                    recomputed: self.recomputed_average(c)?,
                    published: avg[c]?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTable {
    pub baseline: String,
    /// Report columns that the baseline also reports.
    pub columns: Vec<String>,
    /// `(report language, baseline language, report - baseline per column)`.
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
    /// Mean report value minus mean baseline value over the shared languages.
    pub average: Vec<Option<f64>>,
    pub checks: Vec<AverageCheck>,
}

impl DeltaTable {
    pub fn checks_ok(&self) -> bool {
        self.checks.iter().all(AverageCheck::ok)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("language,baseline_language,{}\n", self.columns.iter().map(|c| format!("delta_{c}")).collect::<Vec<_>>().join(","));
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for (l, b, d) in &self.rows {
            s.push_str(&format!("{l},{b},{}\n", d.iter().map(fmt).collect::<Vec<_>>().join(",")));
        }
        s.push_str(&format!("average,average,{}\n", self.average.iter().map(fmt).collect::<Vec<_>>().join(",")));
        s
    }
}

fn same_language(report: &str, baseline: &str) -> bool {
    report == baseline || LanguageCode::new(report).is_ok_and(|c| c.matches(baseline))
}

/// Per-language and average deltas of `report` against `baseline`, plus the
/// baseline's own average consistency checks.
pub fn compare_to_baseline(report: &MetricReport, baseline: &BaselineTable) -> Result<DeltaTable> {
    let cols: Vec<(usize, usize)> = report
        .meta
        .columns
        .iter()
        .enumerate()
        .filter_map(|(ri, name)| BASELINE_COLUMNS.iter().position(|c| c == name).map(|bi| (ri, bi)))
        .collect();
    let mut rows = Vec::new();
    let mut sums = vec![(0.0, 0.0, 0usize); cols.len()];
    for r in &report.rows {
        let Some((bl, entries)) = baseline.rows.iter().find(|(l, _)| same_language(&r.language, l)) else {
            continue;
        };
        let deltas = cols
            .iter()
            .zip(sums.iter_mut())
            .map(|(&(ri, bi), sum)| {
                entries[bi].map(|b| {
                    sum.0 += r.values[ri];
                    sum.1 += b;
                    sum.2 += 1;
                    r.values[ri] - b
                })
            })
            .collect();
        rows.push((r.language.clone(), bl.clone(), deltas));
    }
    if rows.is_empty() {
        return Err(Error::Comparison(format!(
            "report and baseline `{}` share no language",
            baseline.name
        )));
    }
    let average = sums
        .iter()
        .map(|&(a, b, n)| (n > 0).then(|| (a - b) / n as f64))
        .collect();
    Ok(DeltaTable {
        baseline: baseline.name.clone(),
        columns: cols.iter().map(|&(ri, _)| report.meta.columns[ri].clone()).collect(),
        rows,
        average,
        checks: baseline.average_checks(),
    })
}
