mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use utrice::io::IoError;
use utrice::training::TrainError;

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "utrice",
    version,
    about = "Differentiable triangle-soup ray tracing: train, render, evaluate, check gradients"
)]
struct Cli {
    /// Worker threads (1 selects the single-threaded reference path).
    /// Defaults to UTRICE_THREADS, then to all cores.
    #[arg(long, global = true, env = "UTRICE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a triangle soup against the views of a dataset manifest.
    Train(TrainArgs),
    /// Render a checkpoint from manifest cameras or a look-at camera.
    Render(RenderArgs),
    /// PSNR/SSIM of a checkpoint against a manifest split.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=1000` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both `train.seed` and `init.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the checkpoint, metrics, renders and config echo.
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint; metrics are appended.
    #[arg(long, conflicts_with = "init_ply")]
    resume: Option<PathBuf>,
    /// Start from a triangle PLY instead of the manifest's point cloud.
    #[arg(long)]
    init_ply: Option<PathBuf>,
    /// Accept PLYs from other triangle-splatting tools (missing fields
    /// defaulted).
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Checkpoint to load.
    #[arg(long, required_unless_present = "ply", conflicts_with = "ply")]
    checkpoint: Option<PathBuf>,
    /// Triangle PLY to load instead of a checkpoint.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, requires = "ply")]
    lenient: bool,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, short)]
    output: PathBuf,
    /// Render every camera of this manifest's split.
    #[arg(long, conflicts_with = "eye")]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: commands::Split,
    /// Look-at camera position `x,y,z` (used when no manifest is given).
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,-4")]
    eye: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    target: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,-1,0")]
    up: [f64; 3],
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 45.0)]
    fov: f64,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    /// Thin-lens aperture radius; 0 is a pinhole.
    #[arg(long, default_value_t = 0.0)]
    aperture: f64,
    /// Distance to the plane in focus; defaults to the eye-target distance.
    #[arg(long)]
    focal_distance: Option<f64>,
    /// Samples per pixel (jittered when above 1).
    #[arg(long, default_value_t = 1)]
    spp: usize,
    /// Mirror plane `px,py,pz,nx,ny,nz`.
    #[arg(long, value_parser = parse_floats::<6>, conflicts_with = "refract_sphere")]
    mirror_plane: Option<[f64; 6]>,
    /// Refracting sphere `cx,cy,cz,radius`.
    #[arg(long, value_parser = parse_floats::<4>)]
    refract_sphere: Option<[f64; 4]>,
    /// Refractive index of the sphere.
    #[arg(long, default_value_t = 1.5)]
    eta: f64,
    /// Equirectangular PNG shading rays that leave the scene.
    #[arg(long)]
    envmap: Option<PathBuf>,
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    background: [f64; 3],
    #[arg(long, default_value_t = 3)]
    sh_degree: usize,
    /// k-closest buffer size.
    #[arg(long, default_value_t = utrice::tracer::DEFAULT_K)]
    k: usize,
    /// Sampling seed for jittered pixels and lens samples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "png")]
    format: commands::ImageFormat,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: commands::Split,
    /// Also write the table as CSV here.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Background color; defaults to the checkpoint's training config.
    #[arg(long, value_parser = parse_vec3)]
    background: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; N] = v
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))?;
    if arr.iter().all(|x| x.is_finite()) {
        Ok(arr)
    } else {
        Err("values must be finite".into())
    }
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Diverged(String),
    #[error("gradient check failed")]
    Gradcheck,
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Usage(format!("invalid config: {m}")),
            TrainError::DatasetEmpty => CliError::Usage(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::ShapeMismatch { .. } | TrainError::Observer(_) => {
                CliError::Io(IoError::Malformed(e.to_string()))
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Gradcheck => 5,
        }
    }
}

/// Table-of-defaults text appended to `train --help`.
fn defaults_help() -> String {
    format!(
        "Configuration keys and defaults (set with --config, UTRICE__KEY or --set key=value):\n\n{}",
        config::to_toml(&RunConfig::default())
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Defaults => {
            print!("{}", config::to_toml(&RunConfig::default()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let help = defaults_help();
    let matches = Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(help))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
