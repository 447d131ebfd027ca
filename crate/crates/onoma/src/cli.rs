//! Single entry point: dataset building, training, extraction, evaluation,
//! and plotting as subcommands over a layered config.

use crate::config::{ConfigError, RunConfig};
use crate::data::{build_dataset, DataError, DatasetConfig, Taxonomy};
use crate::dsp::{amplitude, read_wav, stft, write_wav, TFMask};
use crate::eval::{
    evaluate_manifest, plot_examples, reconstruct, write_report, EvalError, Extractor, Masker,
    Reconstruction,
};
use crate::model::{ConditionInput, ConditionMode, ModelError};
use crate::phoneme::{encode_one_hot, g2p, OnomatopoeicWord, PhonemeInventory};
use crate::training::{fit, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use std::fmt;
use std::path::PathBuf;

/// Errors grouped by process exit code: 2 config, 3 data, 4 numeric.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::Infeasible(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => CliError::from(m),
            TrainError::Shape(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Encoding(_) | ModelError::Format(_) => {
                CliError::Data(e.to_string())
            }
            ModelError::InvalidConfig(_) | ModelError::ConditionMismatch(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => CliError::from(m),
            EvalError::Train(t) => CliError::from(t),
            EvalError::Length { .. } | EvalError::Degenerate(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::dsp::DspError> for CliError {
    fn from(e: crate::dsp::DspError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::phoneme::PhonemeError> for CliError {
    fn from(e: crate::phoneme::PhonemeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConditionArg {
    Onomatopoeia,
    Subclass,
    Superclass,
}

impl From<ConditionArg> for ConditionMode {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Onomatopoeia => ConditionMode::Onomatopoeia,
            ConditionArg::Subclass => ConditionMode::Subclass,
            ConditionArg::Superclass => ConditionMode::Superclass,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Griffinlim,
    Mixture,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Debug, Parser)]
#[command(name = "onoma", version, about = "Onomatopoeia-conditioned sound extraction")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for all relative paths.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Thread count for rendering and evaluation; 0 = all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic dataset tree and manifests.
    Dataset(DatasetArgs),
    /// Train a mask estimator in one condition mode.
    Train(TrainArgs),
    /// Extract one source from a mixture WAV.
    Extract(ExtractArgs),
    /// Evaluate a checkpoint (or the ideal-ratio-mask oracle) on a manifest.
    Evaluate(EvaluateArgs),
    /// Emit 4-row spectrogram panels for manifest examples.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory; defaults to <workdir>/<dataset_dir>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub condition: ConditionArg,
    /// Continue from <out>/last.ckpt.
    #[arg(long)]
    pub resume: bool,
    /// Output directory; defaults to <workdir>/runs/<condition>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Not required with --identity-mask.
    #[arg(long, required_unless_present = "identity_mask")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Onomatopoeic query word (onomatopoeia-conditioned checkpoints).
    #[arg(long, conflicts_with = "label")]
    pub word: Option<String>,
    /// Class label name (subclass/superclass checkpoints).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, value_enum, default_value = "mixture")]
    pub phase: PhaseArg,
    /// Debug path: skip the model and apply an all-ones mask.
    #[arg(long)]
    pub identity_mask: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the ideal-ratio-mask oracle instead of a model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "mixture")]
    pub phase: PhaseArg,
    /// Output directory; defaults to <workdir>/eval.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Onomatopoeia-conditioned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Class-conditioned baseline checkpoint.
    #[arg(long)]
    pub baseline_checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short = 'n', long, default_value_t = 5)]
    pub count: usize,
    /// Output directory; defaults to <workdir>/figs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(workdir) = &cli.workdir {
        cfg.workdir = workdir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    cfg.finalize();
    cfg.validate()?;
    if cfg.workers > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok(cfg)
}

fn reconstruction_for(cfg: &RunConfig, phase: PhaseArg) -> Reconstruction {
    match phase {
        PhaseArg::Griffinlim => Reconstruction::GriffinLim {
            iterations: cfg.griffin_lim_iterations,
        },
        PhaseArg::Mixture => Reconstruction::Mixture,
    }
}

fn cmd_dataset(cfg: &mut RunConfig, args: &DatasetArgs) -> Result<()> {
    if let Some(preset) = args.preset {
        cfg.dataset = match preset {
            Preset::Toy => DatasetConfig::toy(cfg.seed),
            Preset::Paper => DatasetConfig::paper(cfg.seed),
        };
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.dataset_root());
    cfg.echo_to(&out)?;
    let paths = build_dataset(&cfg.dataset, &out)?;
    println!("train manifest: {}", paths.train.display());
    println!("val manifest:   {}", paths.val.display());
    for (regime, path) in &paths.evals {
        println!("eval manifest:  {} ({regime})", path.display());
    }
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    let mode = ConditionMode::from(args.condition);
    cfg.model.condition_mode = mode;
    let tax = Taxonomy::default_taxonomy();
    cfg.model.class_vocab_size = match mode {
        ConditionMode::Subclass => tax.subclasses.len(),
        ConditionMode::Superclass => tax.superclasses.len(),
        ConditionMode::Onomatopoeia => cfg.model.class_vocab_size,
    };
    if let Some(max_steps) = args.max_steps {
        cfg.train.max_steps = max_steps;
    }
    cfg.finalize();
    cfg.validate()?;

    let mode_name = match mode {
        ConditionMode::Onomatopoeia => "onomatopoeia",
        ConditionMode::Subclass => "subclass",
        ConditionMode::Superclass => "superclass",
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.workdir.join("runs").join(mode_name));
    std::fs::create_dir_all(&out)?;
    cfg.echo_to(&out)?;
    let resume_path = out.join("last.ckpt");
    let resume = if args.resume {
        if !resume_path.exists() {
            return Err(CliError::Config(format!(
                "--resume given but {} does not exist",
                resume_path.display()
            )));
        }
        Some(resume_path)
    } else {
        None
    };
    let root = cfg.dataset_root();
    let outcome = fit(
        cfg.model,
        &cfg.train,
        cfg.stft,
        &root,
        &root.join("train.jsonl"),
        &root.join("val.jsonl"),
        &out,
        resume.as_deref(),
        cfg.echo_json(),
    )?;
    println!(
        "trained {} steps; best val loss {:.6}",
        outcome.steps_run, outcome.best_val_loss
    );
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    Ok(())
}

fn condition_from_flags(
    mode: ConditionMode,
    word: Option<&str>,
    label: Option<&str>,
) -> Result<ConditionInput> {
    match mode {
        ConditionMode::Onomatopoeia => {
            let word = word.ok_or_else(|| {
                CliError::Config("this checkpoint needs --word <onomatopoeia>".into())
            })?;
            let inv = PhonemeInventory::default_inventory();
            let w = OnomatopoeicWord::new(word)?;
            let seq = g2p(&w, &inv)?;
            Ok(ConditionInput::Word(encode_one_hot(&seq, &inv).map_err(
                |e| CliError::Config(e.to_string()),
            )?))
        }
        ConditionMode::Subclass | ConditionMode::Superclass => {
            let label = label.ok_or_else(|| {
                CliError::Config("this checkpoint needs --label <class name>".into())
            })?;
            let tax = Taxonomy::default_taxonomy();
            let idx = match mode {
                ConditionMode::Subclass => tax.subclass_index(label),
                _ => tax.superclass_index(label),
            }
            .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(ConditionInput::Class(idx))
        }
    }
}

fn cmd_extract(cfg: &RunConfig, args: &ExtractArgs) -> Result<()> {
    let mixture = read_wav(&args.input)?;
    let recon = reconstruction_for(cfg, args.phase);
    let output = if args.identity_mask {
        let complex = stft(&mixture, &cfg.stft)?;
        let mask = TFMask {
            values: Array2::ones(amplitude(&complex).magnitudes.dim()),
        };
        reconstruct(&complex, &mask, recon)?
    } else {
        let extractor =
            Extractor::from_checkpoint(args.checkpoint.as_ref().unwrap(), cfg.stft)?;
        let cond =
            condition_from_flags(extractor.mode(), args.word.as_deref(), args.label.as_deref())?;
        extractor.extract(&mixture, &cond, recon)?
    };
    if let Some(parent) = args.output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_wav(&args.output, &output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let recon = reconstruction_for(cfg, args.phase);
    let masker = if args.oracle {
        Masker::IdealRatio
    } else {
        Masker::Model(Extractor::from_checkpoint(
            args.checkpoint.as_ref().unwrap(),
            cfg.stft,
        )?)
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.workdir.join("eval"));
    cfg.echo_to(&out)?;
    let outcome = evaluate_manifest(
        &masker,
        &args.manifest,
        &cfg.dataset_root(),
        cfg.stft,
        recon,
    )?;
    let (json, _) = write_report(&outcome.report, &out, "report")?;
    // Log the reconstruction choice alongside the report.
    let meta = serde_json::json!({
        "reconstruction": recon,
        "manifest": args.manifest.display().to_string(),
        "oracle": args.oracle,
        "records": outcome.records,
    });
    std::fs::write(
        out.join("records.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::Data(e.to_string()))?,
    )?;
    print!("{}", outcome.report.to_text_table());
    println!("report: {}", json.display());
    Ok(())
}

fn cmd_plot(cfg: &RunConfig, args: &PlotArgs) -> Result<()> {
    if args.count == 0 {
        return Err(CliError::Config("plot count must be >= 1".into()));
    }
    let onoma = Extractor::from_checkpoint(&args.checkpoint, cfg.stft)?;
    let baseline = Extractor::from_checkpoint(&args.baseline_checkpoint, cfg.stft)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.workdir.join("figs"));
    cfg.echo_to(&out)?;
    let written = plot_examples(
        &onoma,
        &baseline,
        &args.manifest,
        &cfg.dataset_root(),
        args.count,
        cfg.seed,
        &out,
    )?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Dataset(args) => cmd_dataset(&mut cfg, args),
        Command::Train(args) => cmd_train(&mut cfg, args),
        Command::Extract(args) => cmd_extract(&cfg, args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
        Command::Plot(args) => cmd_plot(&cfg, args),
    }
}
