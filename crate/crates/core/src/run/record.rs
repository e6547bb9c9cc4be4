//! Append-only JSON-lines run record.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_FILE: &str = "run.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunEvent {
    Start {
        run_id: String,
        config: BTreeMap<String, String>,
        start_epoch: usize,
    },
    Epoch {
        run_id: String,
        epoch: usize,
        steps: usize,
        train_loss: f64,
        val_loss: f64,
        lr: f64,
        wall_secs: f64,
    },
    End {
        run_id: String,
        best_epoch: usize,
        best_val_loss: f64,
        best_checkpoint: String,
        last_checkpoint: String,
        wall_secs: f64,
    },
    Eval {
        run_id: String,
        dataset_id: String,
        direction: String,
        caption_mode: String,
        report_csv: String,
        report_jsonl: String,
        columns: Vec<String>,
        average: Vec<f64>,
    },
}

/// Appends one event as a JSON line.
pub fn append_event(dir: &Path, event: &RunEvent) -> Result<()> {
    let path = dir.join(RECORD_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut line = serde_json::to_string(event).expect("event serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_events(dir: &Path) -> Result<Vec<RunEvent>> {
    let path = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}
