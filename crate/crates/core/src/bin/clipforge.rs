use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clipforge::eval::{CaptionMode, Direction};
use clipforge::run::{cmd_datagen, cmd_eval, cmd_report, run_training, DatagenOptions, EvalCommand, EvalSplit, RunConfig};
use clipforge::{Error, Result};

/// Multilingual dual-encoder training and retrieval evaluation at desk scale.
#[derive(Parser)]
#[command(name = "clipforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, filter and split a synthetic multilingual corpus.
    Datagen(DatagenArgs),
    /// Train a dual encoder.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint and write per-language reports.
    Eval(EvalArgs),
    /// Compare evaluated runs in one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, env = "CLIPFORGE_DATA_OUTPUT", default_value = "data")]
    output: PathBuf,
    #[arg(long, env = "CLIPFORGE_IMAGES", default_value_t = 2000)]
    images: usize,
    #[arg(long, env = "CLIPFORGE_LANGUAGES", default_value_t = 8)]
    languages: usize,
    #[arg(long, env = "CLIPFORGE_IMAGE_SIZE", default_value_t = 16)]
    image_size: usize,
    #[arg(long, env = "CLIPFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Keep images whose aesthetic score is strictly above this.
    #[arg(long, env = "CLIPFORGE_THRESHOLD", default_value_t = 4.5)]
    threshold: f64,
    #[arg(long, env = "CLIPFORGE_VAL_FRACTION", default_value_t = 0.15)]
    val_fraction: f64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags and CLIPFORGE_* variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CLIPFORGE_PRESET")]
    preset: Option<String>,
    #[arg(long, env = "CLIPFORGE_REGIME")]
    regime: Option<String>,
    #[arg(long, env = "CLIPFORGE_OPTIMIZER")]
    optimizer: Option<String>,
    #[arg(long, env = "CLIPFORGE_LR")]
    lr: Option<String>,
    #[arg(long, env = "CLIPFORGE_WEIGHT_DECAY")]
    weight_decay: Option<String>,
    #[arg(long, env = "CLIPFORGE_BATCH_SIZE")]
    batch_size: Option<String>,
    #[arg(long, env = "CLIPFORGE_EPOCHS")]
    epochs: Option<String>,
    #[arg(long, env = "CLIPFORGE_WARMUP_STEPS")]
    warmup_steps: Option<String>,
    #[arg(long, env = "CLIPFORGE_DATA_SEED")]
    data_seed: Option<String>,
    #[arg(long, env = "CLIPFORGE_INIT_SEED")]
    init_seed: Option<String>,
    #[arg(long, env = "CLIPFORGE_SAMPLER_SEED")]
    sampler_seed: Option<String>,
    #[arg(long, env = "CLIPFORGE_IMAGE_SIZE")]
    image_size: Option<String>,
    #[arg(long, env = "CLIPFORGE_PATCH_SIZE")]
    patch_size: Option<String>,
    #[arg(long, env = "CLIPFORGE_MAX_TEXT_LEN")]
    max_text_len: Option<String>,
    #[arg(long, env = "CLIPFORGE_BLOCK_SIZE")]
    block_size: Option<String>,
    #[arg(long, env = "CLIPFORGE_DATASET")]
    dataset: Option<String>,
    #[arg(long, env = "CLIPFORGE_OUTPUT")]
    output: Option<String>,
    #[arg(long, env = "CLIPFORGE_INIT_CHECKPOINT")]
    init_checkpoint: Option<String>,
    /// Comma-separated language codes to train on.
    #[arg(long, env = "CLIPFORGE_TRAIN_LANGUAGES")]
    train_languages: Option<String>,
    /// Continue from last.ckpt in the output directory.
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 19] {
        [
            ("preset", &self.preset),
            ("regime", &self.regime),
            ("optimizer", &self.optimizer),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("warmup_steps", &self.warmup_steps),
            ("data_seed", &self.data_seed),
            ("init_seed", &self.init_seed),
            ("sampler_seed", &self.sampler_seed),
            ("image_size", &self.image_size),
            ("patch_size", &self.patch_size),
            ("max_text_len", &self.max_text_len),
            ("block_size", &self.block_size),
            ("dataset", &self.dataset),
            ("output", &self.output),
            ("init_checkpoint", &self.init_checkpoint),
            ("train_languages", &self.train_languages),
        ]
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "CLIPFORGE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "CLIPFORGE_DATASET")]
    dataset: PathBuf,
    /// validation, train or all.
    #[arg(long, env = "CLIPFORGE_SPLIT", default_value = "validation")]
    split: String,
    /// t2i or i2t.
    #[arg(long, env = "CLIPFORGE_DIRECTION", default_value = "t2i")]
    direction: String,
    /// first or all.
    #[arg(long, env = "CLIPFORGE_CAPTION_MODE", default_value = "first")]
    caption_mode: String,
    #[arg(long, env = "CLIPFORGE_K", value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// Comma-separated language codes; all dataset languages by default.
    #[arg(long, env = "CLIPFORGE_EVAL_LANGUAGES", value_delimiter = ',')]
    languages: Option<Vec<String>>,
    /// Bundled table name (e.g. table4, table3-nllb-clip-base) or CSV path.
    #[arg(long, env = "CLIPFORGE_BASELINE")]
    baseline: Option<String>,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long, env = "CLIPFORGE_EVAL_OUTPUT")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding run.jsonl and config.txt.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Compare runs evaluated on different datasets.
    #[arg(long)]
    allow_mixed: bool,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn datagen(a: DatagenArgs) -> Result<String> {
    let s = cmd_datagen(&DatagenOptions {
        output: a.output.clone(),
        images: a.images,
        languages: a.languages,
        image_size: a.image_size,
        seed: a.seed,
        threshold: a.threshold,
        val_fraction: a.val_fraction,
        force: a.force,
    })?;
    Ok(format!(
        "generated {} images: kept {}, dropped {} (score <= {}); train {}, validation {} -> {}\n",
        s.generated,
        s.kept,
        s.dropped,
        a.threshold,
        s.train,
        s.validation,
        a.output.display()
    ))
}

fn train(a: TrainArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, value) in a.overrides() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    let s = run_training(&cfg, a.resume)?;
    let mut o = String::new();
    for e in &s.epochs {
        writeln!(o, "epoch {:>3}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss).unwrap();
    }
    writeln!(
        o,
        "run {}: best val {:.4} at epoch {} -> {}",
        s.run_id,
        s.best_val_loss,
        s.best_epoch,
        s.output.display()
    )
    .unwrap();
    Ok(o)
}

fn eval(a: EvalArgs) -> Result<String> {
    let mut cmd = EvalCommand::new(a.checkpoint, a.dataset);
    cmd.split = a.split.parse::<EvalSplit>()?;
    cmd.direction = a.direction.parse::<Direction>()?;
    cmd.caption_mode = a.caption_mode.parse::<CaptionMode>()?;
    cmd.ks = a.k;
    cmd.languages = a.languages;
    cmd.baseline = a.baseline;
    cmd.output = a.output;
    let out = cmd_eval(&cmd)?;
    let mut o = out.report.to_csv();
    if let Some(d) = &out.deltas {
        writeln!(o, "\ndeltas vs {}:", d.baseline).unwrap();
        o.push_str(&d.to_csv());
        for c in &d.checks {
            writeln!(
                o,
                "baseline average {}: recomputed {:.4}, published {:.2} [{}]",
                c.column,
                c.recomputed,
                c.published,
                if c.ok() { "ok" } else { "MISMATCH" }
            )
            .unwrap();
        }
    }
    writeln!(o, "wrote {} and {}", out.report_csv.display(), out.report_jsonl.display()).unwrap();
    Ok(o)
}

fn report(a: ReportArgs) -> Result<String> {
    let table = cmd_report(&a.runs, a.allow_mixed)?;
    let csv = table.to_csv();
    if let Some(p) = &a.output {
        std::fs::write(p, &csv).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(csv)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = std::io::stdout().lock().write_all(e.to_string().as_bytes());
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(text) => {
            // a closed pipe (e.g. `| head`) is not a failure
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
