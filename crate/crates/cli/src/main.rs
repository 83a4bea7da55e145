//! `splatnav` command-line driver.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid input or
//! parameters, 3 empty result with `--fail-empty`, 4 training aborted on a
//! non-finite loss.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

mod commands;
mod manifest;
mod parse;

use manifest::RunManifest;

/// Exit status attached to an error as context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Usage = 2,
    Empty = 3,
    NonFinite = 4,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exit::Usage => "invalid input",
            Exit::Empty => "empty result",
            Exit::NonFinite => "training aborted",
        })
    }
}

pub trait Classify<T> {
    /// Marks a failure as bad input (exit 2).
    fn usage(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> anyhow::Result<T> {
        self.map_err(|e| e.into().context(Exit::Usage))
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.downcast_ref::<Exit>().map_or(1, |x| *x as u8)
}

#[derive(Parser, Debug)]
#[command(name = "splatnav", version, about = "Gaussian-splat ego-camera simulator: assets, octrees, rendering, training, evaluation")]
struct Cli {
    /// Where to write the run manifest (default: next to the primary output)
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic splat scene and its point cloud
    Synth(SynthArgs),
    /// Crop a point cloud to an axis-aligned box (inclusive)
    Crop(CropArgs),
    /// Build an octree forest from a point cloud
    BuildOctree(BuildOctreeArgs),
    /// Render ego-camera frames from a splat scene
    Render(RenderArgs),
    /// Time rendering and collision queries; prints JSON
    Bench(BenchArgs),
    /// Train a PPO policy on a navigation environment
    Train(TrainArgs),
    /// Evaluate a policy: success map, or action-match rate on labelled frames
    Eval(EvalArgs),
    /// Render labelled frame clips along value-iteration paths
    Labels(LabelsArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutArg {
    Courtyard,
    Blobs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Scene layout
    #[arg(long, value_enum, default_value = "courtyard")]
    pub layout: LayoutArg,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of splats
    #[arg(long, default_value_t = 4000)]
    pub splats: usize,
    /// Point-cloud samples drawn per splat
    #[arg(long, default_value_t = 4)]
    pub samples_per_splat: usize,
    /// Omit the red landmark
    #[arg(long)]
    pub no_landmark: bool,
    /// Scene spec JSON; overrides the flags above
    #[arg(long, value_name = "JSON")]
    pub spec: Option<PathBuf>,
    /// Output splat PLY
    #[arg(long, value_name = "PLY")]
    pub scene_out: PathBuf,
    /// Output point-cloud PLY
    #[arg(long, value_name = "PLY")]
    pub cloud_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CropArgs {
    /// Input point-cloud PLY
    #[arg(long = "in", value_name = "PLY")]
    pub input: PathBuf,
    /// Inclusive box as xmin,xmax,ymin,ymax,zmin,zmax
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: String,
    /// Output PLY (binary little-endian)
    #[arg(long, value_name = "PLY")]
    pub out: PathBuf,
    /// Exit with status 3 when no point survives
    #[arg(long)]
    pub fail_empty: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BuildOctreeArgs {
    /// Input point-cloud PLY
    #[arg(long = "in", value_name = "PLY")]
    pub input: PathBuf,
    /// Edge of the coarse cells, scene units
    #[arg(long, default_value_t = splatnav::occupancy::DEFAULT_CELL_EDGE)]
    pub cell_edge: f64,
    /// Octree depth per cell, 1 to 10
    #[arg(long, default_value_t = splatnav::occupancy::DEFAULT_DEPTH)]
    pub depth: u8,
    /// Points needed to mark a leaf occupied
    #[arg(long, default_value_t = splatnav::occupancy::DEFAULT_MIN_POINTS)]
    pub min_points: u32,
    /// Output forest file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write a JSON dump of cell indices and occupied-leaf counts
    #[arg(long, value_name = "JSON")]
    pub dump: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RenderArgs {
    /// Splat scene PLY
    #[arg(long, value_name = "PLY")]
    pub scene: PathBuf,
    /// Camera pose x,y,z,yaw,pitch,roll; angles in degrees, applied as intrinsic yaw (about +z, 0 = +x), pitch (up), roll
    #[arg(long, allow_hyphen_values = true, conflicts_with = "poses", required_unless_present = "poses")]
    pub pose: Option<String>,
    /// File with one pose per line (same syntax as --pose); --out is then a directory
    #[arg(long, value_name = "FILE")]
    pub poses: Option<PathBuf>,
    /// Image size WxH
    #[arg(long, default_value = "64x64")]
    pub res: String,
    /// Horizontal field of view, degrees
    #[arg(long, default_value_t = 90.0)]
    pub hfov: f64,
    /// Output image (.png or .ppm), or directory with --poses
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Splat scene PLY for render timing
    #[arg(long, value_name = "PLY")]
    pub scene: Option<PathBuf>,
    /// Forest file for query timing
    #[arg(long, value_name = "FILE")]
    pub forest: Option<PathBuf>,
    /// Frames to render
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Point-sized collision queries
    #[arg(long, default_value_t = 100_000)]
    pub queries: usize,
    /// Image size WxH
    #[arg(long, default_value = "64x64")]
    pub res: String,
    /// Horizontal field of view, degrees
    #[arg(long, default_value_t = 90.0)]
    pub hfov: f64,
    /// Seed for poses and query points
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training config JSON (env, ppo, policy); defaults to the grid env
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoint, curve, report
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue the run in --out up to the config's step budget
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartsArg {
    /// Every collision-free grid state
    Grid,
    /// Starts drawn by reset with the curriculum finished
    Random,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Policy checkpoint
    #[arg(long, value_name = "FILE", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the value-iteration policy instead (grid env only)
    #[arg(long, conflicts_with_all = ["checkpoint", "labels"])]
    pub oracle: bool,
    /// Environment config JSON; defaults to the grid env
    #[arg(long, value_name = "JSON")]
    pub env: Option<PathBuf>,
    /// Start set for the success map
    #[arg(long, value_enum, default_value = "grid")]
    pub starts: StartsArg,
    /// Number of starts for --starts random
    #[arg(long, default_value_t = 200)]
    pub start_count: usize,
    /// Episodes per start
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    /// Seed for stochastic evaluation and random starts
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Labelled frame directory; reports the action-match rate instead
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    /// Training run directory whose curve and start visits go into the report
    #[arg(long, value_name = "DIR")]
    pub run: Option<PathBuf>,
    /// Output report JSON
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Directory for PNG plots
    #[arg(long, value_name = "DIR")]
    pub plot: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LabelsArgs {
    /// Environment config JSON (grid); defaults to the grid env
    #[arg(long, value_name = "JSON")]
    pub env: Option<PathBuf>,
    /// Frames per clip, comma-separated
    #[arg(long, default_value = "20,20,20")]
    pub clips: String,
    /// Perturb rendered poses with the env's pose noise
    #[arg(long)]
    pub noise: bool,
    /// Seed for clip starts and noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run
    #[arg(value_name = "MANIFEST")]
    pub from: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Crop(_) => "crop",
            Command::BuildOctree(_) => "build-octree",
            Command::Render(_) => "render",
            Command::Bench(_) => "bench",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Labels(_) => "labels",
            Command::Replay(_) => "replay",
        }
    }

    /// Default manifest location, beside the primary output.
    pub fn manifest_path(&self) -> PathBuf {
        let beside = |p: &Path| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        };
        match self {
            Command::Synth(a) => beside(&a.scene_out),
            Command::Crop(a) => beside(&a.out),
            Command::BuildOctree(a) => beside(&a.out),
            Command::Render(a) if a.poses.is_some() => a.out.join("manifest.json"),
            Command::Render(a) => beside(&a.out),
            Command::Bench(_) => PathBuf::from("splatnav-bench.manifest.json"),
            Command::Train(a) => a.out.join("manifest.json"),
            Command::Eval(a) => beside(&a.out),
            Command::Labels(a) => a.out.join("manifest.json"),
            Command::Replay(a) => beside(&a.from.with_extension("replay")),
        }
    }
}

fn run(cmd: &Command, m: &mut RunManifest) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => commands::synth(a, m),
        Command::Crop(a) => commands::crop(a, m),
        Command::BuildOctree(a) => commands::build_octree(a, m),
        Command::Render(a) => commands::render(a, m),
        Command::Bench(a) => commands::bench(a, m),
        Command::Train(a) => commands::train(a, m),
        Command::Eval(a) => commands::eval(a, m),
        Command::Labels(a) => commands::labels(a, m),
        Command::Replay(a) => {
            let old = RunManifest::read(&a.from).usage()?;
            let cmd: Command = serde_json::from_value(old.config).usage()?;
            anyhow::ensure!(!matches!(cmd, Command::Replay(_)), "cannot replay a replay");
            log::info!("replaying {}", cmd.name());
            run(&cmd, m)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLATNAV_LOG", "warn")).init();
    let config = serde_json::to_value(&cli.command).expect("arguments serialize");
    let mut m = RunManifest::new(cli.command.name(), config);
    let path = cli.manifest.clone().unwrap_or_else(|| cli.command.manifest_path());
    let result = run(&cli.command, &mut m);
    if let Err(e) = &result {
        m.exit_code = exit_code(e);
        m.error = Some(format!("{e:#}"));
    }
    if let Err(e) = m.write(&path) {
        eprintln!("warning: {e:#}");
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
