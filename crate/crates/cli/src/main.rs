mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use sadnn::models::Task;

/// Exit status plus message of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn user(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<sadnn::Error> for Failure {
    fn from(e: sadnn::Error) -> Self {
        Self {
            code: if e.is_user_error() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sadnn", version, about = "Local self-attention networks: training, INT8 quantization and cost analysis")]
struct Cli {
    /// TOML file supplying any long flag; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads; falls back to SADNN_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a float model on a synthetic dataset and write a checkpoint.
    Train(TrainArgs),
    /// Calibrate and convert a float checkpoint to INT8.
    Quantize(QuantizeArgs),
    /// Evaluate a float or quantized checkpoint on a synthetic test set.
    Eval(EvalArgs),
    /// Parameters, operations, model size and energy of a spec or checkpoint.
    Analyze(AnalyzeArgs),
    /// Run a checkpoint on one PGM image.
    Predict(PredictArgs),
    /// Run the acceptance checks.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Structured,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: sadnn::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Model config TOML; defaults to the toy config of the task.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,
    /// Training images.
    #[arg(long)]
    pub n: Option<usize>,
    /// Square image extent; overrides the model config input size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Shuffle seed; defaults to the dataset seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Held-out images scored after training (0 to skip).
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long)]
    pub test_seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-epoch metrics as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Calibration images.
    #[arg(long)]
    pub calib_n: Option<usize>,
    /// Seed of the calibration images; defaults to the training seed.
    #[arg(long)]
    pub calib_seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Expected task; an error if the checkpoint disagrees.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Network spec or checkpoint file.
    pub target: PathBuf,
    /// Input extents as CxHxW.
    #[arg(long)]
    pub input_shape: Option<String>,
    /// TOML overriding some or all of the per-operation energy table.
    #[arg(long, value_name = "FILE")]
    pub energy_table: Option<PathBuf>,
    /// Add the combined multiply+add operation column.
    #[arg(long)]
    pub paper_convention: bool,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    pub format: Format,
    /// Report name; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Grayscale PGM; resized (nearest neighbour) to the model input.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Segmentation: mask PGM to write. Classification: optional TOML scores.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Comma-separated check ids (1 to 10).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u32>,
    #[arg(long, value_name = "FILE")]
    pub energy_table: Option<PathBuf>,
    /// Write the structured report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn log(msg: impl std::fmt::Display) {
    eprintln!("sadnn: {msg}");
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in ["train", "quantize", "eval", "analyze", "predict", "verify"] {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn parse(mut args: Vec<OsString>) -> Result<(Cli, Option<config::FileConfig>), clap::Error> {
    let cmd = command();
    let (sub, path) = config::scan(&args);
    let file = match path {
        Some(p) => Some(config::FileConfig::load(p.as_ref()).map_err(|f| cmd.clone().error(clap::error::ErrorKind::InvalidValue, f.msg))?),
        None => None,
    };
    if let (Some(file), Some(at)) = (&file, sub) {
        let name = args[at].to_string_lossy().into_owned();
        if cmd.find_subcommand(&name).is_some() {
            let extra = file
                .flags_for(&cmd, &name)
                .map_err(|f| cmd.clone().error(clap::error::ErrorKind::InvalidValue, f.msg))?;
            args.splice(at + 1..at + 1, extra);
        }
    }
    let matches = cmd.try_get_matches_from(args)?;
    Ok((Cli::from_arg_matches(&matches)?, file))
}

fn threads(cli: &Cli, file: Option<&config::FileConfig>) -> Result<Option<usize>, Failure> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    if let Some(n) = file.map(|f| f.threads()).transpose()?.flatten() {
        return Ok(Some(n));
    }
    match std::env::var("SADNN_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::user(format!("SADNN_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli, file: Option<config::FileConfig>) -> Result<(), Failure> {
    let threads = threads(&cli, file.as_ref())?;
    let go = move || match cli.command {
        Cmd::Train(a) => commands::train(a),
        Cmd::Quantize(a) => commands::quantize(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Analyze(a) => commands::analyze(a),
        Cmd::Predict(a) => commands::predict(a),
        Cmd::Verify(a) => commands::verify(a),
    };
    match threads {
        Some(n) => sadnn::with_threads(n, go)?,
        None => go(),
    }
}

fn main() -> ExitCode {
    let (cli, file) = match parse(std::env::args_os().collect()) {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sadnn: error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
