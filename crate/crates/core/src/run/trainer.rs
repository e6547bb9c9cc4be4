//! Epoch loop: per-epoch caption sampling, contrastive steps, validation,
//! best/last checkpoints and resumption.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, CONFIG_FILE};
use super::record::{append_event, RunEvent, RECORD_FILE};
use crate::contrastive::{clip_loss, similarity};
use crate::data::{load_dataset, load_split, sample_epoch, split_indices, tokenize_batch, Dataset, Vocabulary, SPLIT_FILE, VAL_FRACTION, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::model::{Binder, Checkpoint, Component, DualEncoderModel, ModelConfig, TokenBatch};
use crate::optim::{lr_schedule, AdamWConfig, LionConfig, Optimizer};
use crate::tensor::{Graph, Tensor, Var};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
/// Language draws for the validation loss use this epoch index, so the
/// validation captions are fixed for a run.
const VALIDATION_EPOCH: u64 = u64::MAX;

/// One partition with pixels and first-caption tokens held in memory.
#[derive(Clone, Debug)]
pub struct Split {
    pub dataset: Dataset,
    pub images: Tensor,
    /// Per language slot, rows aligned with the records.
    pub tokens: Vec<TokenBatch>,
}

impl Split {
    pub fn new(dataset: Dataset, vocab: &Vocabulary, side: usize, max_len: usize) -> Result<Self> {
        let dataset = dataset.materialize()?;
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let images = dataset.image_tensor(&idx, side)?;
        let tokens = (0..dataset.languages().len())
            .map(|l| {
                let texts: Vec<&str> = dataset.records().iter().map(|r| r.first_caption(l)).collect();
                tokenize_batch(&texts, vocab, max_len)
            })
            .collect::<Result<_>>()?;
        Ok(Self { dataset, images, tokens })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// Images `idx` as one `[n, 3, side, side]` batch.
    pub fn image_batch(&self, idx: &[usize]) -> Result<Tensor> {
        gather_rows(&self.images, idx)
    }

    /// Caption tokens of record `idx[i]` in language slot `langs[i]`.
    pub fn text_batch(&self, idx: &[usize], langs: &[usize]) -> Result<TokenBatch> {
        let mut rows = Vec::with_capacity(idx.len());
        let mut lens = Vec::with_capacity(idx.len());
        for (&i, &l) in idx.iter().zip(langs) {
            let t = &self.tokens[l];
            let len = t.lengths()[i];
            rows.push(t.row(i)[..len].to_vec());
            lens.push(len);
        }
        TokenBatch::new(&rows, &lens)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Split,
    pub val: Split,
    pub vocab: Vocabulary,
}

impl TrainingData {
    /// Splits `dataset` by record id. `languages` restricts both partitions.
    pub fn from_dataset(
        dataset: &Dataset,
        train_ids: &[String],
        val_ids: &[String],
        vocab: Vocabulary,
        languages: &[String],
        side: usize,
        max_len: usize,
    ) -> Result<Self> {
        let ds = if languages.is_empty() {
            dataset.clone()
        } else {
            let codes = languages
                .iter()
                .map(|code| {
                    dataset
                        .language_index(code)
                        .map(|i| dataset.languages()[i].clone())
                        .ok_or_else(|| Error::Config(format!("dataset has no `{code}` captions")))
                })
                .collect::<Result<Vec<_>>>()?;
            dataset.with_languages(&codes)?
        };
        let train = Split::new(ds.select_ids(train_ids)?, &vocab, side, max_len)?;
        let val = Split::new(ds.select_ids(val_ids)?, &vocab, side, max_len)?;
        if train.len() < 2 {
            return Err(Error::Config(format!("need at least 2 training images, have {}", train.len())));
        }
        Ok(Self { train, val, vocab })
    }

    /// Loads the dataset directory named by `cfg.dataset`. Uses its split and
    /// vocabulary files when present, otherwise derives them.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = &cfg.dataset;
        let ds = load_dataset(dir)?;
        let split_path = dir.join(SPLIT_FILE);
        let (train_ids, val_ids) = if split_path.exists() {
            load_split(&split_path)?
        } else {
            let (t, v) = split_indices(ds.len(), VAL_FRACTION, cfg.data_seed)?;
            let ids = |ix: Vec<usize>| ix.into_iter().map(|i| ds.records()[i].id.clone()).collect::<Vec<_>>();
            (ids(t), ids(v))
        };
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            Vocabulary::from_dataset(&ds)
        };
        Self::from_dataset(&ds, &train_ids, &val_ids, vocab, &cfg.train_languages, cfg.image_size, cfg.max_text_len)
    }
}

/// Pooled features of frozen towers, computed once.
#[derive(Clone, Debug, Default)]
struct FeatureCache {
    image: Option<Tensor>,
    /// Per language slot.
    text: Option<Vec<Tensor>>,
}

impl FeatureCache {
    fn build(model: &DualEncoderModel, split: &Split) -> Result<Self> {
        let image = if model.is_frozen(Component::ImageEncoder) {
            Some(model.image_features(&split.images)?)
        } else {
            None
        };
        let text = if model.is_frozen(Component::TextEncoder) {
            Some(split.tokens.iter().map(|t| model.text_features(t)).collect::<Result<_>>()?)
        } else {
            None
        };
        Ok(Self { image, text })
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Contrastive loss of one batch; `idx` are record indices, `langs` the
/// caption language slot of each.
fn batch_loss(
    model: &DualEncoderModel,
    g: &mut Graph<f32>,
    b: &mut Binder<f32>,
    split: &Split,
    cache: &FeatureCache,
    idx: &[usize],
    langs: &[usize],
) -> Result<Var> {
    let image_features = match &cache.image {
        Some(f) => g.constant(gather_rows(f, idx)?),
        None => {
            let images = gather_rows(&split.images, idx)?;
            model.image_features_graph(g, b, &images)?
        }
    };
    let text_features = match &cache.text {
        Some(per_lang) => {
            let w = per_lang[0].shape()[1];
            let mut data = Vec::with_capacity(idx.len() * w);
            for (&i, &l) in idx.iter().zip(langs) {
                data.extend_from_slice(per_lang[l].row(i));
            }
            g.constant(Tensor::new(vec![idx.len(), w], data)?)
        }
        None => model.text_features_graph(g, b, &split.text_batch(idx, langs)?)?,
    };
    let img = model.project_image_graph(g, b, image_features)?;
    let txt = model.project_text_graph(g, b, text_features)?;
    let scale = model.logit_scale_graph(g, b);
    let sim = similarity(g, img, txt, scale)?;
    clip_loss(g, &sim)
}

/// Consecutive chunks of `order` of size `batch`, dropping a final chunk
/// that is too small to have a negative.
fn batches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    order.chunks(batch).filter(|c| c.len() >= 2).collect()
}

pub struct Trainer {
    cfg: RunConfig,
    model: DualEncoderModel,
    optimizer: Optimizer,
    data: TrainingData,
    train_cache: FeatureCache,
    val_cache: FeatureCache,
    val_langs: Vec<usize>,
    epochs_done: usize,
    steps_done: usize,
    best_val: f32,
    best_epoch: usize,
}

impl Trainer {
    /// Fresh model from `cfg` (or `cfg.init_checkpoint`) with the regime's
    /// freeze mask applied.
    pub fn new(cfg: RunConfig, data: TrainingData) -> Result<Self> {
        cfg.validate()?;
        let model = match &cfg.init_checkpoint {
            Some(p) => {
                let m = Checkpoint::load(p)?.to_model()?;
                let c = m.config();
                if c.vocab_size != data.vocab.len() {
                    return Err(Error::Mismatch(format!(
                        "checkpoint `{}` has vocabulary size {} but the dataset vocabulary has {}",
                        p.display(),
                        c.vocab_size,
                        data.vocab.len()
                    )));
                }
                let want = ModelConfig::from_presets(cfg.preset, cfg.image_size, cfg.patch_size, data.vocab.len(), cfg.max_text_len)?;
                if *c != want {
                    return Err(Error::Mismatch(format!(
                        "checkpoint `{}` architecture {c:?} does not match the config ({want:?})",
                        p.display()
                    )));
                }
                m
            }
            None => {
                let mc = ModelConfig::from_presets(cfg.preset, cfg.image_size, cfg.patch_size, data.vocab.len(), cfg.max_text_len)?;
                DualEncoderModel::new(mc, cfg.init_seed)?
            }
        };
        Self::with_model(cfg, model, data)
    }

    pub fn with_model(cfg: RunConfig, mut model: DualEncoderModel, data: TrainingData) -> Result<Self> {
        cfg.validate()?;
        model.apply_freeze(cfg.regime);
        let lion = LionConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let adam = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let optimizer = Optimizer::new(cfg.optimizer, lion, adam, cfg.block_size, model.params())?;
        let train_cache = FeatureCache::build(&model, &data.train)?;
        let val_cache = FeatureCache::build(&model, &data.val)?;
        let val_langs = if data.val.is_empty() {
            Vec::new()
        } else {
            sample_epoch(&data.val.dataset, VALIDATION_EPOCH, cfg.sampler_seed)?.choices
        };
        Ok(Self {
            cfg,
            model,
            optimizer,
            data,
            train_cache,
            val_cache,
            val_langs,
            epochs_done: 0,
            steps_done: 0,
            best_val: f32::INFINITY,
            best_epoch: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DualEncoderModel {
        &self.model
    }

    pub fn into_model(self) -> DualEncoderModel {
        self.model
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn best(&self) -> (usize, f32) {
        (self.best_epoch, self.best_val)
    }

    pub fn steps_per_epoch(&self) -> usize {
        batches(&(0..self.data.train.len()).collect::<Vec<_>>(), self.cfg.batch_size).len()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(
            self.steps_done.min(self.total_steps()),
            self.total_steps(),
            self.cfg.lr as f64,
            self.cfg.warmup_steps,
        )
    }

    /// One optimizer step on records `idx` with caption languages `langs`.
    /// Returns the batch loss before the update.
    pub fn step(&mut self, idx: &[usize], langs: &[usize]) -> Result<f64> {
        let lr = self.current_lr() as f32;
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut b = Binder::new(self.model.params(), self.model.trainable_mask());
            let loss = batch_loss(&self.model, &mut g, &mut b, &self.data.train, &self.train_cache, idx, langs)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} at epoch {} step {}",
                    self.epochs_done + 1,
                    self.steps_done + 1
                )));
            }
            g.backward(loss)?;
            (value, b.grads(&mut g))
        };
        let names = self.model.names().to_vec();
        let trainable = self.model.trainable_mask().to_vec();
        self.optimizer
            .step(self.model.params_mut(), &grads, &trainable, &names, lr)
            .map_err(|e| match e {
                Error::Training(m) => Error::Training(format!(
                    "{m} at epoch {} step {}",
                    self.epochs_done + 1,
                    self.steps_done + 1
                )),
                other => other,
            })?;
        self.steps_done += 1;
        Ok(loss)
    }

    /// Runs the next epoch and returns its mean batch loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let epoch = self.epochs_done as u64;
        let plan = sample_epoch(&self.data.train.dataset, epoch, self.cfg.sampler_seed)?;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mix = self.cfg.data_seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in batches(&order, self.cfg.batch_size) {
            let langs: Vec<usize> = chunk.iter().map(|&i| plan.choices[i]).collect();
            total += self.step(chunk, &langs)?;
            count += 1;
        }
        self.epochs_done += 1;
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    /// Mean contrastive loss over validation batches, weighted by batch size.
    /// The caption language of every validation image is fixed per run.
    pub fn validation_loss(&self) -> Result<f64> {
        let order: Vec<usize> = (0..self.data.val.len()).collect();
        let frozen = vec![false; self.model.params().len()];
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in batches(&order, self.cfg.batch_size) {
            let langs: Vec<usize> = chunk.iter().map(|&i| self.val_langs[i]).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(self.model.params(), &frozen);
            let loss = batch_loss(&self.model, &mut g, &mut b, &self.data.val, &self.val_cache, chunk, &langs)?;
            sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
            n += chunk.len();
        }
        if n == 0 {
            return Err(Error::Config("validation split has fewer than 2 images".into()));
        }
        Ok(sum / n as f64)
    }

    /// Records a validation loss; returns true if it is a new best.
    pub fn observe_validation(&mut self, loss: f64) -> bool {
        let l = loss as f32;
        if l < self.best_val {
            self.best_val = l;
            self.best_epoch = self.epochs_done;
            true
        } else {
            false
        }
    }

    /// Model weights plus optimizer and loop state.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (n, t) in self.optimizer.export(self.model.names()) {
            ck.push(n, t);
        }
        let scalar = |v: f32| Tensor::new(vec![1], vec![v]).expect("1 element");
        ck.push("train.epochs_done", scalar(self.epochs_done as f32));
        ck.push("train.steps_done", scalar(self.steps_done as f32));
        ck.push("train.best_val", scalar(self.best_val));
        ck.push("train.best_epoch", scalar(self.best_epoch as f32));
        ck
    }

    /// Restores a checkpoint written by [`Trainer::state_checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if &ck.config != self.model.config() {
            return Err(Error::Mismatch("checkpoint model config differs from the run config".into()));
        }
        let restored = ck.to_model()?;
        for (dst, src) in self.model.params_mut().iter_mut().zip(restored.params()) {
            *dst = src.clone();
        }
        let get = |k: &str| ck.get(k).cloned();
        self.optimizer.import(self.model.names(), get)?;
        let scalar = |k: &str| {
            ck.get(k)
                .map(|t| t.data()[0])
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        self.epochs_done = scalar("train.epochs_done")? as usize;
        self.steps_done = scalar("train.steps_done")? as usize;
        self.best_val = scalar("train.best_val")?;
        self.best_epoch = scalar("train.best_epoch")? as usize;
        // cached frozen features were computed from the pre-restore weights
        self.train_cache = FeatureCache::build(&self.model, &self.data.train)?;
        self.val_cache = FeatureCache::build(&self.model, &self.data.val)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub run_id: String,
    pub output: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub model: DualEncoderModel,
}

fn has_run(dir: &Path) -> bool {
    dir.join(LAST_CHECKPOINT).exists() || dir.join(RECORD_FILE).exists()
}

/// Full training run with files: effective config, vocabulary copy,
/// per-epoch best/last checkpoints and the run record. With `resume`, picks
/// up from `last.ckpt` of an earlier run with the same config.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.output;
    let run_id = cfg.hash();
    let resuming = resume && out.join(LAST_CHECKPOINT).exists();
    if resuming {
        let prev = RunConfig::from_file(&out.join(CONFIG_FILE))?;
        if prev.hash() != run_id {
            return Err(Error::Mismatch(format!(
                "cannot resume: {} was written by a different config",
                out.display()
            )));
        }
    } else if has_run(out) {
        return Err(Error::Refused(format!(
            "{} already holds a run; pass --resume or choose another output",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let data = TrainingData::load(cfg)?;
    data.vocab.save(&out.join(VOCAB_FILE))?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    if resuming {
        trainer.restore(&Checkpoint::load(&out.join(LAST_CHECKPOINT))?)?;
    }
    append_event(
        out,
        &RunEvent::Start {
            run_id: run_id.clone(),
            config: cfg.to_map().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            start_epoch: trainer.epochs_done(),
        },
    )?;
    let started = Instant::now();
    let mut logs = Vec::new();
    while trainer.epochs_done() < cfg.epochs {
        let t0 = Instant::now();
        let train_loss = trainer.train_epoch()?;
        let val_loss = trainer.validation_loss()?;
        if trainer.observe_validation(val_loss) {
            Checkpoint::from_model(trainer.model()).save(&out.join(BEST_CHECKPOINT))?;
        }
        trainer.state_checkpoint().save(&out.join(LAST_CHECKPOINT))?;
        let epoch = trainer.epochs_done();
        append_event(
            out,
            &RunEvent::Epoch {
                run_id: run_id.clone(),
                epoch,
                steps: trainer.steps_done(),
                train_loss,
                val_loss,
                lr: trainer.current_lr(),
                wall_secs: t0.elapsed().as_secs_f64(),
            },
        )?;
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
    }
    let (best_epoch, best_val) = trainer.best();
    append_event(
        out,
        &RunEvent::End {
            run_id: run_id.clone(),
            best_epoch,
            best_val_loss: best_val as f64,
            best_checkpoint: out.join(BEST_CHECKPOINT).display().to_string(),
            last_checkpoint: out.join(LAST_CHECKPOINT).display().to_string(),
            wall_secs: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(TrainSummary {
        run_id,
        output: out.clone(),
        epochs: logs,
        best_epoch,
        best_val_loss: best_val as f64,
        model: trainer.into_model(),
    })
}
