//! Command-line front end for the prompt-learning experiments.
//!
//! One experiment = one process. Every command that produces artifacts
//! writes them under a timestamped run directory (chosen from
//! `--run-dir`, then the `IPL_RUN_DIR` environment variable, then
//! `./runs`), starting with `config.json`: the fully-resolved
//! configuration, so that re-running `--config <that file>` reproduces
//! the run bit for bit. Data (metrics lines, evaluation reports, CSV)
//! goes to stdout; diagnostics go to stderr.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ipl_core::analysis::{
    export_gates, gate_similarity, prompt_length_sweep, write_sweep_csv, SWEEP_LENGTHS,
};
use ipl_core::model::{Mode, ModelConfig};
use ipl_core::tasks::{
    gen_synthetic_cls, gen_synthetic_gen, Dataset, Instance, Pattern, TaskConfig, Verbalizer,
};
use ipl_core::train::checkpoint::{self, CheckpointMeta};
use ipl_core::train::{
    evaluate, grad_check, GradCheckConfig, Method, OptimConfig, Trainer,
};
use ipl_core::Error;

/// Environment variable naming the default run-directory root.
pub const RUN_DIR_ENV: &str = "IPL_RUN_DIR";

/// Relative error above which `grad-check` fails.
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Entry point shared by the binary and the tests. Returns the process
/// exit code: 0 on success, 1 for validation/usage errors, 2 for runtime
/// failures.
pub fn run(argv: &[String]) -> u8 {
    let mut stdout = std::io::stdout();
    run_with(argv, &mut stdout)
}

/// [`run`] with an injectable data sink, so tests can capture stdout.
pub fn run_with(argv: &[String], out: &mut dyn Write) -> u8 {
    let full = std::iter::once("ipl".to_string()).chain(argv.iter().cloned());
    let cli = match Cli::try_parse_from(full) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ipl",
    version,
    about = "Instance-aware prompt learning on a miniature transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write its splits as JSONL.
    GenData(GenDataArgs),
    /// Train one model and record metrics plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Compare backpropagated gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Export per-instance gate values (and optional attention maps).
    ExportGates(ExportGatesArgs),
    /// Train across prompt lengths and seeds; write a CSV of dev metrics.
    SweepLength(SweepArgs),
}

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

/// Which synthetic task a run draws its data from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Sentinel-conditioned majority classification.
    CueFlip,
    /// Key-value recall generation.
    KvRecall,
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "cue_flip" => Ok(TaskKind::CueFlip),
            "kv_recall" => Ok(TaskKind::KvRecall),
            other => Err(format!(
                "unknown task {other:?} (expected cue-flip or kv-recall)"
            )),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::CueFlip => "cue-flip",
            TaskKind::KvRecall => "kv-recall",
        })
    }
}

/// Dataset choice and generator knobs; the generator vocabulary always
/// follows the model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub n_examples: usize,
    pub payload_len: usize,
    pub n_pairs: usize,
    /// Seed for data generation, independent of the training seed so
    /// several training runs can share one dataset.
    pub data_seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::CueFlip,
            n_examples: 2000,
            payload_len: 5,
            n_pairs: 3,
            data_seed: 0,
        }
    }
}

/// Everything one run needs. Serialized verbatim as the config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub task: TaskSection,
    /// When set, datasets load from this directory instead of the
    /// generator; recorded so the echoed config stays reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            task: TaskSection::default(),
            data: None,
        }
    }
}

/// Flags mirroring [`TaskSection`] fields.
#[derive(Args, Debug, Default)]
struct TaskArgs {
    /// Task to generate: cue-flip (classification) or kv-recall (generation).
    #[arg(long, help_heading = "Task")]
    task: Option<TaskKind>,
    /// Total generated examples across train/dev/test.
    #[arg(long, help_heading = "Task")]
    n_examples: Option<usize>,
    /// Payload symbols per cue-flip instance (odd).
    #[arg(long, help_heading = "Task")]
    payload_len: Option<usize>,
    /// Key-value pairs per kv-recall instance.
    #[arg(long, help_heading = "Task")]
    n_pairs: Option<usize>,
    /// Seed for data generation (independent of the training seed).
    #[arg(long, help_heading = "Task")]
    data_seed: Option<u64>,
}

impl TaskArgs {
    fn apply(&self, section: &mut TaskSection) {
        if let Some(v) = self.task {
            section.kind = v;
        }
        if let Some(v) = self.n_examples {
            section.n_examples = v;
        }
        if let Some(v) = self.payload_len {
            section.payload_len = v;
        }
        if let Some(v) = self.n_pairs {
            section.n_pairs = v;
        }
        if let Some(v) = self.data_seed {
            section.data_seed = v;
        }
    }
}

/// Flags mirroring [`RunConfig`]: a `--config` JSON file may supply any
/// subset, with explicit flags overriding file values.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file supplying any subset of the run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Vocabulary size (model and generators).
    #[arg(long, help_heading = "Model")]
    vocab_size: Option<usize>,
    /// Embedding width d_e.
    #[arg(long, help_heading = "Model")]
    d_e: Option<usize>,
    /// Transformer blocks.
    #[arg(long, help_heading = "Model")]
    n_layers: Option<usize>,
    /// Attention heads per block.
    #[arg(long, help_heading = "Model")]
    n_heads: Option<usize>,
    /// Feed-forward width.
    #[arg(long, help_heading = "Model")]
    d_ff: Option<usize>,
    /// Position budget.
    #[arg(long, help_heading = "Model")]
    max_len: Option<usize>,
    /// Attention direction: masked or causal.
    #[arg(long, help_heading = "Model")]
    mode: Option<Mode>,
    /// Token id scored at the cloze blank.
    #[arg(long, help_heading = "Model")]
    mask_token_id: Option<u32>,

    /// Adam learning rate.
    #[arg(long, visible_alias = "lr", help_heading = "Optimization")]
    learning_rate: Option<f64>,
    /// Training epochs.
    #[arg(long, help_heading = "Optimization")]
    epochs: Option<usize>,
    /// Instances per optimizer step.
    #[arg(long, help_heading = "Optimization")]
    batch_size: Option<usize>,
    /// Seed for model init and batch order.
    #[arg(long, help_heading = "Optimization")]
    seed: Option<u64>,
    /// Training method: ipl, prompt-tuning, or finetune-pet.
    #[arg(long, help_heading = "Optimization")]
    method: Option<Method>,
    /// Number of prompt tokens.
    #[arg(long, visible_alias = "l", help_heading = "Optimization")]
    prompt_length: Option<usize>,
    /// Gate projection width (defaults to d_e).
    #[arg(long, help_heading = "Optimization")]
    d_h: Option<usize>,
    /// Parameter precision: 32 or 64.
    #[arg(long, help_heading = "Optimization")]
    float_width: Option<u32>,

    #[command(flatten)]
    task: TaskArgs,

    /// Load datasets from this directory instead of generating them.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    /// Defaults, overlaid with the `--config` file, overlaid with flags.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Failure::Validation(format!("cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| {
                    Failure::Validation(format!("bad config {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };

        let m = &mut cfg.model;
        if let Some(v) = self.vocab_size {
            m.vocab_size = v;
        }
        if let Some(v) = self.d_e {
            m.d_e = v;
        }
        if let Some(v) = self.n_layers {
            m.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            m.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            m.d_ff = v;
        }
        if let Some(v) = self.max_len {
            m.max_len = v;
        }
        if let Some(v) = self.mode {
            m.mode = v;
        }
        if let Some(v) = self.mask_token_id {
            m.mask_token_id = v;
        }

        let o = &mut cfg.optim;
        if let Some(v) = self.learning_rate {
            o.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            o.epochs = v;
        }
        if let Some(v) = self.batch_size {
            o.batch_size = v;
        }
        if let Some(v) = self.seed {
            o.seed = v;
        }
        if let Some(v) = self.method {
            o.method = v;
        }
        if let Some(v) = self.prompt_length {
            o.prompt_length = v;
        }
        if let Some(v) = self.d_h {
            o.d_h = Some(v);
        }
        if let Some(v) = self.float_width {
            o.float_width = v
                .try_into()
                .map_err(|e: String| Failure::Validation(e))?;
        }

        self.task.apply(&mut cfg.task);
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }

        cfg.model.validate()?;
        cfg.optim.validate()?;
        task_config(&cfg.task, cfg.model.vocab_size).validate()?;
        Ok(cfg)
    }
}

fn task_config(task: &TaskSection, vocab_size: usize) -> TaskConfig {
    TaskConfig {
        payload_len: task.payload_len,
        n_pairs: task.n_pairs,
        vocab_size,
    }
}

/// Loads the dataset named by the config, or generates it.
fn build_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    match &cfg.data {
        Some(dir) => Ok(Dataset::load(dir)?),
        None => {
            let tc = task_config(&cfg.task, cfg.model.vocab_size);
            let data = match cfg.task.kind {
                TaskKind::CueFlip => {
                    gen_synthetic_cls(cfg.task.data_seed, cfg.task.n_examples, &tc)?
                }
                TaskKind::KvRecall => {
                    gen_synthetic_gen(cfg.task.data_seed, cfg.task.n_examples, &tc)?
                }
            };
            Ok(data)
        }
    }
}

/// Pattern and verbalizer appropriate for the instances at hand:
/// classification instances carry labels and score through the
/// verbalizer; generation instances decode bare continuations.
fn heads_for(instances: &[Instance], vocab_size: usize) -> Result<(Pattern, Option<Verbalizer>), Failure> {
    match instances.first() {
        None => Err(Failure::Validation("the dataset split is empty".into())),
        Some(i) if i.label.is_some() => Ok((
            Pattern::default_cls(),
            Some(Verbalizer::default_cls(vocab_size)?),
        )),
        Some(_) => Ok((Pattern::default_cls(), None)),
    }
}

/// Generation data needs a causal model; catch that before any compute.
fn check_mode(instances: &[Instance], mode: Mode) -> Result<(), Failure> {
    if instances.iter().any(|i| i.target.is_some()) && mode != Mode::Causal {
        return Err(Failure::Validation(
            "generation data requires mode=causal".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------

fn choose_root(flag: Option<PathBuf>, env: Option<std::ffi::OsString>) -> PathBuf {
    flag.or_else(|| env.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<unix-seconds>-<command>[-<n>]`, never reusing an
/// existing directory.
fn make_run_dir(flag: Option<PathBuf>, command: &str) -> Result<PathBuf, Failure> {
    let root = choose_root(flag, std::env::var_os(RUN_DIR_ENV));
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut path = root.join(format!("{secs}-{command}"));
    let mut n = 1;
    while path.exists() {
        path = root.join(format!("{secs}-{command}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&path)?;
    Ok(path)
}

fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------
// Failure → exit code
// ---------------------------------------------------------------------

/// A command failure, split by exit code: validation errors exit 1,
/// runtime errors exit 2.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) | Error::Vocabulary { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<u8, Failure> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args, out),
        Command::Train(args) => cmd_train(args, out),
        Command::Eval(args) => cmd_eval(args, out),
        Command::GradCheck(args) => cmd_grad_check(args, out),
        Command::ExportGates(args) => cmd_export_gates(args, out),
        Command::SweepLength(args) => cmd_sweep_length(args, out),
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: a fresh run directory).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

fn cmd_gen_data(args: GenDataArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let mut cfg = args.config.resolve()?;
    cfg.data = None; // this command *produces* data
    let dataset = build_dataset(&cfg)?;
    let dir = match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            dir
        }
        None => make_run_dir(args.run_dir, "gen-data")?,
    };
    write_config_echo(&dir, &cfg)?;
    dataset.save(&dir)?;
    eprintln!("wrote dataset to {}", dir.display());
    writeln!(
        out,
        "{}",
        json!({
            "dir": dir,
            "task": cfg.task.kind,
            "train": dataset.train.len(),
            "dev": dataset.dev.len(),
            "test": dataset.test.len(),
        })
    )?;
    Ok(0)
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Root under which run directories are created.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let cfg = args.config.resolve()?;
    let dataset = build_dataset(&cfg)?;
    check_mode(&dataset.train, cfg.model.mode)?;
    let (pattern, verbalizer) = heads_for(&dataset.train, cfg.model.vocab_size)?;

    let dir = make_run_dir(args.run_dir, "train")?;
    write_config_echo(&dir, &cfg)?;
    eprintln!("run directory: {}", dir.display());

    let mut trainer = Trainer::new(
        cfg.model.clone(),
        cfg.optim.clone(),
        pattern,
        verbalizer,
    )?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut stream_err: Option<std::io::Error> = None;
    let report = trainer.fit(&dataset.train, &dataset.dev, |rec| {
        let line = rec.to_json_line();
        let wrote = writeln!(metrics, "{line}").and_then(|()| writeln!(out, "{line}"));
        if stream_err.is_none() {
            stream_err = wrote.err();
        }
    })?;
    metrics.flush()?;
    if let Some(e) = stream_err {
        return Err(e.into());
    }

    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        optim: cfg.optim.clone(),
    };
    checkpoint::save(&dir.join("checkpoint.bin"), trainer.lm(), trainer.pm(), &meta)?;
    eprintln!(
        "best epoch {} with dev metric {:.4}; checkpoint written",
        report.best_epoch, report.best_dev
    );
    Ok(0)
}

/// Which dataset split a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn pick(self, data: &Dataset) -> &[Instance] {
        match self {
            Split::Train => &data.train,
            Split::Dev => &data.dev,
            Split::Test => &data.test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Builds the dataset a checkpoint-consuming command works on: an
/// explicit `--data` directory, or the generator driven by task flags
/// with the checkpoint's vocabulary.
fn checkpoint_dataset(
    data: &Option<PathBuf>,
    task_args: &TaskArgs,
    model: &ModelConfig,
) -> Result<Dataset, Failure> {
    let mut task = TaskSection::default();
    task_args.apply(&mut task);
    let cfg = RunConfig {
        model: model.clone(),
        task,
        data: data.clone(),
        ..RunConfig::default()
    };
    task_config(&cfg.task, cfg.model.vocab_size).validate()?;
    build_dataset(&cfg)
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file produced by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Load datasets from this directory instead of generating them.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Dataset split to score.
    #[arg(long, value_enum, default_value_t = Split::Dev)]
    split: Split,
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let (lm, pm, meta) = checkpoint::load(&args.checkpoint)?;
    let dataset = checkpoint_dataset(&args.data, &args.task, &meta.model)?;
    let split = args.split.pick(&dataset);
    check_mode(split, meta.model.mode)?;
    let (pattern, verbalizer) = heads_for(split, meta.model.vocab_size)?;
    let report = evaluate(
        &lm,
        &pm,
        meta.optim.method,
        &pattern,
        verbalizer.as_ref(),
        split,
    )?;
    writeln!(
        out,
        "{}",
        json!({
            "split": args.split.name(),
            "n": split.len(),
            "correct": report.correct.iter().filter(|&&c| c).count(),
            "metric": report.metric,
            "method": meta.optim.method.to_string(),
        })
    )?;
    Ok(0)
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates probed per parameter group (0 checks every coordinate).
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Instances in the probe batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

fn cmd_grad_check(args: GradCheckArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let cfg = args.config.resolve()?;
    if !(args.step.is_finite() && args.step > 0.0) {
        return Err(Failure::Validation(format!(
            "step must be positive and finite, got {}",
            args.step
        )));
    }
    let check = GradCheckConfig {
        batch: args.batch,
        step: args.step,
        samples_per_group: (args.samples > 0).then_some(args.samples),
        seed: cfg.optim.seed,
    };
    let report = grad_check(cfg.model, cfg.optim, &check)?;
    for (name, err) in &report.per_param {
        writeln!(out, "{name} {err:.3e}")?;
    }
    writeln!(
        out,
        "max {:.3e} at {}[{}] over {} coordinates",
        report.max_rel_err, report.worst_param, report.worst_index, report.checked
    )?;
    if report.passes(GRAD_CHECK_TOLERANCE) {
        writeln!(out, "PASS (tolerance {GRAD_CHECK_TOLERANCE:.0e})")?;
        Ok(0)
    } else {
        writeln!(out, "FAIL (tolerance {GRAD_CHECK_TOLERANCE:.0e})")?;
        Ok(1)
    }
}

#[derive(Args, Debug)]
struct ExportGatesArgs {
    /// Checkpoint file produced by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Load datasets from this directory instead of generating them.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Dataset split to export gates for.
    #[arg(long, value_enum, default_value_t = Split::Dev)]
    split: Split,
    /// Instance ids whose relevance/attention maps are also exported.
    #[arg(long, value_delimiter = ',', value_name = "IDS")]
    attention_ids: Vec<usize>,
    /// Output directory (default: a fresh run directory).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

fn cmd_export_gates(args: ExportGatesArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let (lm, pm, meta) = checkpoint::load(&args.checkpoint)?;
    let dataset = checkpoint_dataset(&args.data, &args.task, &meta.model)?;
    let split = args.split.pick(&dataset);
    check_mode(split, meta.model.mode)?;
    let (pattern, verbalizer) = heads_for(split, meta.model.vocab_size)?;
    let dir = match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            dir
        }
        None => make_run_dir(args.run_dir, "export-gates")?,
    };
    let records = export_gates(
        &dir,
        &lm,
        &pm,
        &pattern,
        verbalizer.as_ref(),
        split,
        &args.attention_ids,
    )?;
    // The similarity summary needs two instance types with two members
    // each; smaller exports still succeed, without the summary.
    let similarity = gate_similarity(&records).ok();
    eprintln!("wrote gate records to {}", dir.display());
    writeln!(
        out,
        "{}",
        json!({
            "dir": dir,
            "records": records.len(),
            "similarity": similarity,
        })
    )?;
    Ok(0)
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Prompt lengths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LENGTHS)]
    lengths: Vec<usize>,
    /// Seeds trained per length.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Root under which run directories are created.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

fn cmd_sweep_length(args: SweepArgs, out: &mut dyn Write) -> Result<u8, Failure> {
    let cfg = args.config.resolve()?;
    let dataset = build_dataset(&cfg)?;
    check_mode(&dataset.train, cfg.model.mode)?;
    let (pattern, verbalizer) = heads_for(&dataset.train, cfg.model.vocab_size)?;

    let dir = make_run_dir(args.run_dir, "sweep-length")?;
    write_config_echo(&dir, &cfg)?;
    eprintln!("run directory: {}", dir.display());

    let rows = prompt_length_sweep(
        &cfg.model,
        &cfg.optim,
        &args.lengths,
        &args.seeds,
        &dataset,
        &pattern,
        verbalizer.as_ref(),
    )?;
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    writeln!(out, "length,seed,dev_metric")?;
    for r in &rows {
        writeln!(out, "{},{},{}", r.length, r.seed, r.dev_metric)?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn root_choice_prefers_flag_then_env_then_default() {
        let flag = Some(PathBuf::from("/tmp/flagged"));
        let env = Some(std::ffi::OsString::from("/tmp/envved"));
        assert_eq!(choose_root(flag.clone(), env.clone()), PathBuf::from("/tmp/flagged"));
        assert_eq!(choose_root(None, env), PathBuf::from("/tmp/envved"));
        assert_eq!(choose_root(None, None), PathBuf::from("runs"));
    }

    #[test]
    fn task_kind_parses_both_spellings() {
        assert_eq!("cue-flip".parse::<TaskKind>().unwrap(), TaskKind::CueFlip);
        assert_eq!("kv_recall".parse::<TaskKind>().unwrap(), TaskKind::KvRecall);
        assert!("majority".parse::<TaskKind>().is_err());
    }

    #[test]
    fn config_file_roundtrips_through_serde() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Partial configs fill in defaults; unknown fields are typos.
        let partial: RunConfig =
            serde_json::from_str(r#"{"optim": {"seed": 9}}"#).unwrap();
        assert_eq!(partial.optim.seed, 9);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"optim": {"sed": 9}}"#).is_err());
    }
}
