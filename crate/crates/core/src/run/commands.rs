//! The four front-end commands as library calls.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{RunConfig, CONFIG_FILE};
use super::record::{append_event, read_events, RunEvent, RECORD_FILE};
use crate::data::{
    aesthetic_filter, generate_synthetic_corpus, load_dataset, load_split, save_dataset, save_split, split_indices, Dataset, Vocabulary,
    AESTHETIC_THRESHOLD, CIPHER_FILE, MANIFEST_FILE, SPLIT_FILE, VAL_FRACTION, VOCAB_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{compare_to_baseline, evaluate, BaselineTable, CaptionMode, DeltaTable, Direction, EvalOptions, MetricReport, ReportMeta, DEFAULT_KS};
use crate::model::Checkpoint;

#[derive(Clone, Debug)]
pub struct DatagenOptions {
    pub output: PathBuf,
    pub images: usize,
    pub languages: usize,
    pub image_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub val_fraction: f64,
    pub force: bool,
}

impl Default for DatagenOptions {
    fn default() -> Self {
        Self {
            output: PathBuf::from("data"),
            images: 2000,
            languages: 8,
            image_size: 16,
            seed: 0,
            threshold: AESTHETIC_THRESHOLD,
            val_fraction: VAL_FRACTION,
            force: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatagenSummary {
    pub generated: usize,
    pub kept: usize,
    pub dropped: usize,
    pub train: usize,
    pub validation: usize,
}

const DATAGEN_OUTPUTS: [&str; 5] = [MANIFEST_FILE, SPLIT_FILE, VOCAB_FILE, CIPHER_FILE, "pixels"];

/// Generates, filters, splits and writes a synthetic corpus.
pub fn cmd_datagen(opts: &DatagenOptions) -> Result<DatagenSummary> {
    let out = &opts.output;
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !opts.force {
            return Err(Error::Refused(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for name in DATAGEN_OUTPUTS {
            let p = out.join(name);
            let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            if let Err(e) = r {
                if e.kind() != std::io::ErrorKind::NotFound {
                    return Err(Error::io(&p, e));
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (full, cipher) = generate_synthetic_corpus(opts.images, opts.languages, opts.image_size, opts.seed)?;
    let generated = full.len();
    let kept = aesthetic_filter(full.records().to_vec(), opts.threshold);
    let ds = Dataset::new(full.languages().to_vec(), kept)?;
    let (train, val) = split_indices(ds.len(), opts.val_fraction, opts.seed)?;
    let ids = |ix: &[usize]| ix.iter().map(|&i| ds.records()[i].id.clone()).collect::<Vec<_>>();
    save_dataset(&ds, out)?;
    save_split(&out.join(SPLIT_FILE), &ids(&train), &ids(&val))?;
    Vocabulary::from_dataset(&ds).save(&out.join(VOCAB_FILE))?;
    cipher.save(&out.join(CIPHER_FILE))?;
    Ok(DatagenSummary {
        generated,
        kept: ds.len(),
        dropped: generated - ds.len(),
        train: train.len(),
        validation: val.len(),
    })
}

/// Which records of the dataset an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Train,
    All,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "val" => Ok(EvalSplit::Validation),
            "train" => Ok(EvalSplit::Train),
            "all" => Ok(EvalSplit::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected validation, train or all)"))),
        }
    }
}

impl EvalSplit {
    fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Validation => "validation",
            EvalSplit::Train => "train",
            EvalSplit::All => "all",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalCommand {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: EvalSplit,
    pub direction: Direction,
    pub caption_mode: CaptionMode,
    pub ks: Vec<usize>,
    pub languages: Option<Vec<String>>,
    pub baseline: Option<String>,
    /// Defaults to the checkpoint's directory.
    pub output: Option<PathBuf>,
}

impl EvalCommand {
    pub fn new(checkpoint: impl Into<PathBuf>, dataset: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            dataset: dataset.into(),
            split: EvalSplit::Validation,
            direction: Direction::TextToImage,
            caption_mode: CaptionMode::FirstCaption,
            ks: DEFAULT_KS.to_vec(),
            languages: None,
            baseline: None,
            output: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub report_csv: PathBuf,
    pub report_jsonl: PathBuf,
    pub deltas: Option<DeltaTable>,
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Evaluates a checkpoint on a dataset directory, writes CSV + JSON-lines
/// reports and, for checkpoints inside a run directory, appends to the run
/// record.
pub fn cmd_eval(cmd: &EvalCommand) -> Result<EvalOutcome> {
    let ck = Checkpoint::load(&cmd.checkpoint)?;
    let model = ck.to_model()?;
    let run_dir = checkpoint_dir(&cmd.checkpoint);
    let vocab_path = [run_dir.join(VOCAB_FILE), cmd.dataset.join(VOCAB_FILE)]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config("no vocab.txt next to the checkpoint or in the dataset".into()))?;
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Mismatch(format!(
            "{} has {} tokens but the checkpoint was trained with {}",
            vocab_path.display(),
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let full = load_dataset(&cmd.dataset)?;
    let ds = match cmd.split {
        EvalSplit::All => full,
        s => {
            let (train, val) = load_split(&cmd.dataset.join(SPLIT_FILE))?;
            full.select_ids(if s == EvalSplit::Train { &train } else { &val })?
        }
    };
    let side = ds.image_side()?;
    if side != model.config().image_size {
        return Err(Error::Mismatch(format!(
            "dataset images are {side}x{side} but the checkpoint expects {}x{}",
            model.config().image_size,
            model.config().image_size
        )));
    }
    let run_cfg = RunConfig::from_file(&run_dir.join(CONFIG_FILE)).ok();
    let (config_hash, seed) = match &run_cfg {
        Some(c) => (c.hash(), c.init_seed),
        None => (
            crate::data::hex16(&{
                use sha2::{Digest, Sha256};
                Sha256::digest(ck.config.to_fields().iter().flat_map(|f| f.to_le_bytes()).collect::<Vec<u8>>())
            }),
            0,
        ),
    };
    let opts = EvalOptions {
        direction: cmd.direction,
        caption_mode: cmd.caption_mode,
        ks: cmd.ks.clone(),
        languages: cmd.languages.clone(),
    };
    let report = evaluate(&model, &ds, &vocab, &opts, ReportMeta::new(config_hash.clone(), seed, ds.fingerprint()))?;
    let out = cmd.output.clone().unwrap_or_else(|| run_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let stem = format!("eval_{}_{}", cmd.split.as_str(), cmd.direction);
    report.write(&out, &stem)?;
    let report_csv = out.join(format!("{stem}.csv"));
    let report_jsonl = out.join(format!("{stem}.jsonl"));
    let deltas = match &cmd.baseline {
        Some(name) => {
            let table = BaselineTable::resolve(name)?;
            let d = compare_to_baseline(&report, &table)?;
            let p = out.join(format!("{stem}_vs_{}.csv", table.name));
            fs::write(&p, d.to_csv()).map_err(|e| Error::io(&p, e))?;
            Some(d)
        }
        None => None,
    };
    if run_dir.join(RECORD_FILE).exists() {
        append_event(
            &run_dir,
            &RunEvent::Eval {
                run_id: config_hash,
                dataset_id: report.meta.dataset_id.clone(),
                direction: report.meta.direction.to_string(),
                caption_mode: report.meta.caption_mode.as_str().to_string(),
                report_csv: report_csv.display().to_string(),
                report_jsonl: report_jsonl.display().to_string(),
                columns: report.meta.columns.clone(),
                average: report.average.values.clone(),
            },
        )?;
    }
    Ok(EvalOutcome {
        report,
        report_csv,
        report_jsonl,
        deltas,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub regime: String,
    pub preset: String,
    pub optimizer: String,
    pub dataset_id: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("run,regime,preset,optimizer,dataset_id,{}\n", self.columns.join(","));
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}", r.run, r.regime, r.preset, r.optimizer, r.dataset_id));
            for v in &r.values {
                s.push_str(&format!(",{v:.2}"));
            }
            s.push('\n');
        }
        s
    }
}

/// One row per run directory, taken from the latest evaluation in its run
/// record (average row of that report).
pub fn cmd_report(runs: &[PathBuf], allow_mixed: bool) -> Result<ComparisonTable> {
    if runs.len() < 2 {
        return Err(Error::Contract(format!("report needs at least 2 runs, got {}", runs.len())));
    }
    let mut rows = Vec::new();
    let mut columns: Option<Vec<String>> = None;
    for dir in runs {
        let events = read_events(dir)?;
        let (report_path, cols) = events
            .iter()
            .rev()
            .find_map(|e| match e {
                RunEvent::Eval { report_jsonl, columns, .. } => Some((PathBuf::from(report_jsonl), columns.clone())),
                _ => None,
            })
            .ok_or_else(|| Error::Contract(format!("{} has no evaluation in its run record", dir.display())))?;
        let report = MetricReport::read_jsonl(&report_path)?;
        match &columns {
            None => columns = Some(cols),
            Some(c) if *c != cols => {
                return Err(Error::Refused(format!("{} reports different metric columns", dir.display())));
            }
            _ => {}
        }
        let cfg = RunConfig::from_file(&dir.join(CONFIG_FILE))?;
        rows.push(ReportRow {
            run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            regime: cfg.regime.to_string(),
            preset: cfg.preset.to_string(),
            optimizer: cfg.optimizer.to_string(),
            dataset_id: report.meta.dataset_id.clone(),
            values: report.average.values,
        });
    }
    if !allow_mixed && rows.iter().any(|r| r.dataset_id != rows[0].dataset_id) {
        return Err(Error::Refused(
            "runs were evaluated on different datasets; pass --allow-mixed to compare anyway".into(),
        ));
    }
    Ok(ComparisonTable {
        columns: columns.unwrap_or_default(),
        rows,
    })
}
