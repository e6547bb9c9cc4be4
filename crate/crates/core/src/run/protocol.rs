//! Two-stage adaptation: train the whole model on one pivot language, then
//! adapt it to the remaining languages under each freeze regime.

use std::path::{Path, PathBuf};

use super::commands::{cmd_eval, EvalCommand};
use super::config::RunConfig;
use super::trainer::{run_training, BEST_CHECKPOINT};
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::FreezeRegime;

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStage {
    pub pivot: String,
    /// Stage two starts from converged weights whose unseen-language tokens
    /// were never updated, so it needs a larger step than stage one.
    pub stage_two_lr: f32,
    pub seeds: Vec<u64>,
    pub regimes: Vec<FreezeRegime>,
}

impl Default for TwoStage {
    fn default() -> Self {
        Self {
            pivot: "eng_Latn".into(),
            stage_two_lr: 1e-3,
            seeds: vec![0, 1, 2],
            regimes: FreezeRegime::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageTwoRun {
    pub regime: FreezeRegime,
    pub seed: u64,
    pub output: PathBuf,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub stage_one: PathBuf,
    pub new_languages: Vec<String>,
    pub runs: Vec<StageTwoRun>,
}

impl TwoStageOutcome {
    /// Mean over seeds of one average-row metric for `regime`.
    pub fn mean(&self, regime: FreezeRegime, column: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.regime == regime)
            .map(|r| r.report.column(column).map(|c| r.report.average.values[c]))
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl TwoStage {
    pub fn stage_one_config(&self, base: &RunConfig, root: &Path) -> RunConfig {
        RunConfig {
            regime: FreezeRegime::Full,
            train_languages: vec![self.pivot.clone()],
            init_checkpoint: None,
            output: root.join("stage1"),
            ..base.clone()
        }
    }

    pub fn stage_two_config(
        &self,
        base: &RunConfig,
        root: &Path,
        regime: FreezeRegime,
        seed: u64,
        languages: &[String],
    ) -> RunConfig {
        RunConfig {
            regime,
            lr: self.stage_two_lr,
            data_seed: seed,
            init_seed: seed,
            sampler_seed: seed,
            train_languages: languages.to_vec(),
            init_checkpoint: Some(root.join("stage1").join(BEST_CHECKPOINT)),
            output: root.join("stage2").join(format!("{regime}-s{seed}")),
            ..base.clone()
        }
    }

    /// Runs both stages under `root` and evaluates every stage-two run on
    /// the validation split of the new languages.
    pub fn run(&self, base: &RunConfig, root: &Path) -> Result<TwoStageOutcome> {
        let ds = load_dataset(&base.dataset)?;
        if ds.language_index(&self.pivot).is_none() {
            return Err(Error::Config(format!("dataset has no `{}` captions", self.pivot)));
        }
        let new_languages: Vec<String> = ds
            .languages()
            .iter()
            .map(|l| l.as_str().to_string())
            .filter(|l| *l != self.pivot)
            .collect();
        if new_languages.is_empty() {
            return Err(Error::Config("two-stage protocol needs at least one language besides the pivot".into()));
        }
        let stage_one = self.stage_one_config(base, root);
        run_training(&stage_one, false)?;
        let mut runs = Vec::new();
        for &seed in &self.seeds {
            for &regime in &self.regimes {
                let cfg = self.stage_two_config(base, root, regime, seed, &new_languages);
                run_training(&cfg, false)?;
                let mut cmd = EvalCommand::new(cfg.output.join(BEST_CHECKPOINT), &base.dataset);
                cmd.languages = Some(new_languages.clone());
                let report = cmd_eval(&cmd)?.report;
                runs.push(StageTwoRun {
                    regime,
                    seed,
                    output: cfg.output,
                    report,
                });
            }
        }
        Ok(TwoStageOutcome {
            stage_one: stage_one.output,
            new_languages,
            runs,
        })
    }
}
