//! Retrieval ranking, Recall@K / MRR@K and per-language evaluation.

mod baseline;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize_batch, Dataset, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::parallel;
use crate::tensor::Tensor;

pub use baseline::{compare_to_baseline, AverageCheck, BaselineTable, DeltaTable, BUNDLED_BASELINES};
pub use report::{MetricReport, MetricRow, ReportMeta};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
const IMAGE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TextToImage,
    ImageToText,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TextToImage => "t2i",
            Direction::ImageToText => "i2t",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2i" | "text-to-image" => Ok(Direction::TextToImage),
            "i2t" | "image-to-text" => Ok(Direction::ImageToText),
            _ => Err(Error::Config(format!("unknown direction `{s}` (expected t2i or i2t)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    FirstCaption,
    AllCaptions,
}

impl CaptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CaptionMode::FirstCaption => "first",
            CaptionMode::AllCaptions => "all",
        }
    }
}

impl FromStr for CaptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first-caption" => Ok(CaptionMode::FirstCaption),
            "all" | "all-captions" => Ok(CaptionMode::AllCaptions),
            _ => Err(Error::Config(format!("unknown caption mode `{s}` (expected first or all)"))),
        }
    }
}

/// Queries and candidates as unit-norm rows, with the candidate indices that
/// count as correct for each query.
#[derive(Clone, Debug)]
pub struct RetrievalTask {
    pub queries: Tensor,
    pub candidates: Tensor,
    pub relevant: Vec<Vec<usize>>,
}

/// 1-based rank of the best-placed relevant candidate for every query.
/// Candidates are ordered by descending inner product, ties by ascending
/// index.
pub fn rank_items(task: &RetrievalTask) -> Result<Vec<usize>> {
    let (qs, cs) = (task.queries.shape(), task.candidates.shape());
    if qs.len() != 2 || cs.len() != 2 || qs[1] != cs[1] {
        return Err(Error::dim("rank_items", qs, cs));
    }
    let (nq, nc, d) = (qs[0], cs[0], qs[1]);
    if nc == 0 {
        return Err(Error::Contract("rank_items needs at least one candidate".into()));
    }
    if task.relevant.len() != nq {
        return Err(Error::dim("rank_items", &[nq], &[task.relevant.len()]));
    }
    for rel in &task.relevant {
        if rel.is_empty() {
            return Err(Error::Contract("every query needs a nonempty relevance set".into()));
        }
        if let Some(&bad) = rel.iter().find(|&&c| c >= nc) {
            return Err(Error::Index {
                op: "rank_items",
                index: bad,
                bound: nc,
            });
        }
    }
    let q = task.queries.data();
    let c = task.candidates.data();
    Ok(parallel::map_indices(nq, |i| {
        let qi = &q[i * d..(i + 1) * d];
        let scores: Vec<f32> = (0..nc).map(|j| dot(qi, &c[j * d..(j + 1) * d])).collect();
        rank_from_scores(&scores, &task.relevant[i])
    }))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank of the best relevant index under (score desc, index asc) order,
/// found by counting rather than sorting.
pub(crate) fn rank_from_scores(scores: &[f32], relevant: &[usize]) -> usize {
    // `+ 0.0` maps -0 to +0 so that total_cmp agrees with numeric order
    let key = |j: usize| scores[j] + 0.0;
    let best = relevant
        .iter()
        .copied()
        .min_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)))
        .expect("nonempty relevance set");
    let s = key(best);
    let ahead = (0..scores.len())
        .filter(|&j| match key(j).total_cmp(&s) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => j < best,
            std::cmp::Ordering::Less => false,
        })
        .count();
    ahead + 1
}

/// Fraction of ranks `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Mean of `1/rank`, counting ranks beyond `k` as 0.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// Metric columns for `ks`: every `R@k`, then every `MRR@k`.
pub fn metric_columns(ks: &[usize]) -> Vec<String> {
    ks.iter()
        .map(|k| format!("R@{k}"))
        .chain(ks.iter().map(|k| format!("MRR@{k}")))
        .collect()
}

/// Percent values in [`metric_columns`] order.
pub fn metric_values(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| 100.0 * recall_at_k(ranks, k))
        .chain(ks.iter().map(|&k| 100.0 * mrr_at_k(ranks, k)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub direction: Direction,
    pub caption_mode: CaptionMode,
    pub ks: Vec<usize>,
    /// Restrict to these dataset language codes; all when `None`.
    pub languages: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            direction: Direction::TextToImage,
            caption_mode: CaptionMode::FirstCaption,
            ks: DEFAULT_KS.to_vec(),
            languages: None,
        }
    }
}

/// Embeds every image once, then every caption per language, ranks and
/// fills one metric row per language plus the average row.
pub fn evaluate(
    model: &DualEncoderModel,
    dataset: &Dataset,
    vocab: &Vocabulary,
    opts: &EvalOptions,
    meta: ReportMeta,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("evaluation dataset is empty".into()));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::Config("k values must be >= 1".into()));
    }
    let cfg = model.config();
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Mismatch(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let lang_slots: Vec<usize> = match &opts.languages {
        None => (0..dataset.languages().len()).collect(),
        Some(list) => list
            .iter()
            .map(|code| {
                dataset
                    .language_index(code)
                    .ok_or_else(|| Error::Evaluation(format!("dataset has no `{code}` captions")))
            })
            .collect::<Result<_>>()?,
    };
    // Languages whose captions contain no known token cannot be evaluated.
    let known: Vec<usize> = lang_slots
        .iter()
        .copied()
        .filter(|&l| {
            dataset.records().iter().any(|r| {
                r.captions_for(l)
                    .iter()
                    .flat_map(|c| c.split_whitespace())
                    .any(|w| vocab.id(&w.to_lowercase()) != UNK)
            })
        })
        .collect();
    if known.is_empty() {
        return Err(Error::Evaluation(
            "no evaluated language shares any token with the model vocabulary".into(),
        ));
    }

    let side = cfg.image_size;
    let n = dataset.len();
    let mut image_rows = Vec::with_capacity(n * cfg.embed_dim);
    for start in (0..n).step_by(IMAGE_CHUNK) {
        let idx: Vec<usize> = (start..(start + IMAGE_CHUNK).min(n)).collect();
        let images = dataset.image_tensor(&idx, side)?;
        image_rows.extend_from_slice(model.encode_image(&images)?.data());
    }
    let images = Tensor::new(vec![n, cfg.embed_dim], image_rows)?;

    let mut rows = Vec::with_capacity(known.len());
    for &l in &known {
        let mut texts = Vec::new();
        let mut owner = Vec::new();
        for (i, r) in dataset.records().iter().enumerate() {
            match opts.caption_mode {
                CaptionMode::FirstCaption => {
                    texts.push(r.first_caption(l));
                    owner.push(i);
                }
                CaptionMode::AllCaptions => {
                    for c in r.captions_for(l) {
                        texts.push(c);
                        owner.push(i);
                    }
                }
            }
        }
        let tokens = tokenize_batch(&texts, vocab, cfg.max_text_len)?;
        let text = model.encode_text(&tokens)?;
        let task = match opts.direction {
            Direction::TextToImage => RetrievalTask {
                queries: text,
                candidates: images.clone(),
                relevant: owner.iter().map(|&i| vec![i]).collect(),
            },
            Direction::ImageToText => {
                let mut relevant = vec![Vec::new(); n];
                for (t, &i) in owner.iter().enumerate() {
                    relevant[i].push(t);
                }
                RetrievalTask {
                    queries: images.clone(),
                    candidates: text,
                    relevant,
                }
            }
        };
        let ranks = rank_items(&task)?;
        rows.push(MetricRow {
            language: dataset.languages()[l].to_string(),
            values: metric_values(&ranks, &opts.ks),
        });
    }
    Ok(MetricReport::new(
        ReportMeta {
            direction: opts.direction,
            caption_mode: opts.caption_mode,
            columns: metric_columns(&opts.ks),
            ..meta
        },
        rows,
    ))
}
