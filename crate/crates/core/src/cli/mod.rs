//! The `wavesplat` command line: convert, synth, train, render, eval,
//! ablate and edit. Each command writes a `run.json` reproducibility
//! record next to its outputs.

pub mod commands;
pub mod record;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
pub use commands::*;
pub use record::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "wavesplat", version, about = "Dynamic Gaussian scene graphs with wavelet appearance")]
pub struct Cli {
    /// Worker threads; 0 uses every core, 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a KITTI tracking sequence into a manifest.
    Convert(ConvertArgs),
    /// Generate a synthetic scene with known ground truth.
    Synth(SynthArgs),
    /// Initialize from a manifest and optimize.
    Train(TrainArgs),
    /// Render frames of a checkpoint.
    Render(RenderArgs),
    /// Score held-out frames of a checkpoint.
    Eval(EvalArgs),
    /// Train once per wavelet dimension and tabulate held-out metrics.
    Ablate(AblateArgs),
    /// Apply an edit script to a checkpoint.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Flat sequence directory, or the KITTI `training` root with --sequence.
    #[arg(long)]
    pub kitti: PathBuf,
    #[arg(long)]
    pub sequence: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// 30 frames at 128×128.
    Fixture,
    /// 5 frames at 48×48.
    Small,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "fixture", conflicts_with = "spec")]
    pub preset: Preset,
    /// JSON scene description instead of a preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by `train` and `ablate`.
#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training fraction: 0.25, 0.5, 0.75 or 1.0.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub iterations: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Start from this checkpoint instead of initializing from LiDAR.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Wavelet dimension of object appearance.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Train objects with plain time-independent SH.
    #[arg(long)]
    pub static_sh: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Supplies the camera and frame poses.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Frame indices, e.g. `0,3,10-12`; all frames by default.
    #[arg(long, conflicts_with = "camera_path")]
    pub frames: Option<String>,
    /// JSON list of timed camera-to-world poses to render instead of frames.
    #[arg(long)]
    pub camera_path: Option<PathBuf>,
    /// Also write background-only and objects-only renders.
    #[arg(long)]
    pub decompose: bool,
    /// Edit script applied before rendering.
    #[arg(long)]
    pub edit_script: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the split the checkpoint was trained with.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma-separated wavelet dimensions.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7, 9])]
    pub dims: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub edit_script: PathBuf,
    /// Supplies the motion-plane normal and, with --frames, the cameras.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Render these frames of the edited scene (needs --manifest).
    #[arg(long, requires = "manifest")]
    pub frames: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error[category]: message` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return 2;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            1
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let ctx = RunContext {
        argv: argv.to_vec(),
        threads: cli.threads,
    };
    pool.install(|| match &cli.command {
        Command::Convert(a) => cmd_convert(&ctx, a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&ctx, a).map(|_| ()),
        Command::Train(a) => cmd_train(&ctx, a).map(|_| ()),
        Command::Render(a) => cmd_render(&ctx, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&ctx, a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&ctx, a).map(|_| ()),
        Command::Edit(a) => cmd_edit(&ctx, a).map(|_| ()),
    })
}

/// Invocation details recorded with every output.
#[derive(Clone, Debug, Default)]
pub struct RunContext {
    pub argv: Vec<String>,
    pub threads: usize,
}

/// Parses `0,3,10-12` into sorted, de-duplicated frame indices.
pub fn parse_frames(spec: &str) -> Result<Vec<usize>> {
    let mut out = std::collections::BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::invalid(format!("bad frame selection '{part}'"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse::<usize>().map_err(|_| bad())?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("empty frame selection"));
    }
    Ok(out.into_iter().collect())
}
