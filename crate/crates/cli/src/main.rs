//! `fxsr`: dataset preparation, training, inference, sweeps, evaluation and serving.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::Config;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;
pub const EXIT_OTHER: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: EXIT_USAGE, message }
    }

    pub fn config(message: String) -> Self {
        Self { code: EXIT_CONFIG, message }
    }

    pub fn data(message: String) -> Self {
        Self { code: EXIT_DATA, message }
    }
}

impl From<fxsr::Error> for CliError {
    fn from(e: fxsr::Error) -> Self {
        use fxsr::Error as E;
        let code = match &e {
            E::Domain(_) => EXIT_USAGE,
            E::Config(_) => EXIT_CONFIG,
            E::Shape(_) | E::Data(_) | E::Checkpoint(_) | E::Io(_) | E::Image(_) => EXIT_DATA,
            E::Numerical(_) => EXIT_NUMERICAL,
            E::Tensor(_) => EXIT_OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fxsr", version, about = "Super-resolution with per-pixel style control")]
pub struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Random seed (also the training seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the merged configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Log verbosity (default: `RUST_LOG`, else info).
    #[arg(long, global = true, value_name = "LEVEL")]
    pub log: Option<log::LevelFilter>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut HR/LR training sub-images from a dataset and write them to disk.
    Prepare(PrepareArgs),
    /// Train (or resume training) a style-conditioned generator.
    Train(TrainArgs),
    /// Super-resolve one image under a flat value or a style map.
    Infer(InferArgs),
    /// Super-resolve one image at several style values.
    Sweep(SweepArgs),
    /// Score a model on a dataset across style values.
    Eval(EvalArgs),
    /// Write the perception-distortion curve of a model.
    Pdcurve(EvalArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Resample a style map to new dimensions.
    ResizeMap(ResizeMapArgs),
    /// Write procedurally generated test images.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Pd,
    Ds,
}

impl From<Variant> for fxsr::schedules::ScheduleVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Pd => Self::Pd,
            Variant::Ds => Self::Ds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size networks and the 40k-iteration schedule.
    Full,
    /// Small networks and 2000 iterations, for CPU runs.
    Toy,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset directory with `hr/` (and optionally `lr/`).
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory for sub-images and the manifest.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub scale: Option<usize>,
    /// JPEG quality applied to synthesized LR images.
    #[arg(long, value_name = "Q")]
    pub jpeg_quality: Option<u8>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (prepared, or with `hr/`).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory for checkpoints and the loss log.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Start from a preset instead of the configured training section.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long, value_name = "N")]
    pub iters: Option<u64>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<u64>,
    /// Checkpoint whose generator initializes training.
    #[arg(long, value_name = "CKPT")]
    pub init: Option<PathBuf>,
    /// Start over even when the run directory holds a checkpoint.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("style").required(true).multiple(false)))]
pub struct InferArgs {
    /// Generator checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Low-resolution RGB input.
    #[arg(long, value_name = "IMG")]
    pub lr: PathBuf,
    /// Flat style value in [0, 1].
    #[arg(long, group = "style", value_parser = style_value)]
    pub t: Option<f64>,
    /// 8-bit grayscale style map with the LR dimensions.
    #[arg(long, group = "style", value_name = "IMG")]
    pub map: Option<PathBuf>,
    /// Output image (format from the extension, PNG otherwise).
    #[arg(long, value_name = "IMG")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Generator checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Low-resolution RGB input.
    #[arg(long, value_name = "IMG")]
    pub lr: PathBuf,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.1", value_parser = t_list)]
    pub ts: TList,
    /// One PNG per t, named `NN_tX.XXXX.png`.
    #[arg(long, value_name = "DIR")]
    pub outdir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generator checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Directory of HR images (`hr/`, optional `lr/`, or images directly).
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.1", value_parser = t_list)]
    pub ts: TList,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Dataset label in the report (default: directory name).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Directory of `*.safetensors` checkpoints.
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).multiple(false)))]
pub struct ResizeMapArgs {
    /// 8-bit grayscale style map.
    #[arg(long, value_name = "IMG")]
    pub map: PathBuf,
    /// Take the target dimensions from this image.
    #[arg(long, group = "target", value_name = "IMG")]
    pub like: Option<PathBuf>,
    /// Target dimensions as HEIGHTxWIDTH.
    #[arg(long, group = "target", value_name = "HxW", value_parser = dims)]
    pub size: Option<(usize, usize)>,
    /// Output 8-bit grayscale PNG.
    #[arg(long, value_name = "IMG")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Images go to DIR/hr.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 480)]
    pub height: usize,
    #[arg(long, default_value_t = 480)]
    pub width: usize,
}

fn style_value(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("expected a number in [0, 1], got {s:?}"))?;
    fxsr::schedules::check_style_value(t).map_err(|_| format!("t must lie in [0, 1], got {t}"))?;
    Ok(t)
}

/// Parsed `--ts` value.
#[derive(Debug, Clone, PartialEq)]
pub struct TList(pub Vec<f64>);

fn t_list(s: &str) -> Result<TList, String> {
    fxsr::inference::parse_t_list(s).map(TList).map_err(|e| e.to_string())
}

fn dims(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected HEIGHTxWIDTH, got {s:?}");
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// The base configuration (defaults or `--config`) with the global seed applied.
fn base_config(cli: &Cli) -> Result<Config, CliError> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = base_config(&cli)?;
    commands::apply_flags(&mut config, &cli.command);
    if cli.dump_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    commands::execute(&cli.command, &config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = Cli::command().print_help();
                return ExitCode::from(EXIT_USAGE);
            }
            // Keep the message, drop clap's usage block and hints.
            let text = e.to_string();
            let message = text.split("\n\n").next().unwrap_or_default();
            eprintln!("fxsr: {}", one_line(message.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let mut logger = env_logger::Builder::new();
    logger.filter_level(log::LevelFilter::Info).parse_default_env();
    if let Some(level) = cli.log {
        logger.filter_level(level);
    }
    logger.format_timestamp(None).format_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fxsr: {}", one_line(&e.message));
            ExitCode::from(e.code)
        }
    }
}

/// Writes `bytes` atomically, creating parent directories.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    Ok(fxsr::io::write_atomic(path, bytes)?)
}
