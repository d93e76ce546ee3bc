//! `partgrid` command-line front end.
//!
//! Every subcommand reads its inputs from files (or stdin), runs one stage of
//! the pipeline and writes JSON or a flat binary tensor with a JSON header.
//! Exit codes: 0 on success, 1 for bad input or usage, 2 when an internal
//! invariant fails.

mod bench;
mod commands;
mod config;
mod eval;
mod io;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "partgrid", version, about = "Part-aware LiDAR detection pipeline tools")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML file overriding the built-in configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-scene parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file; stdout when omitted (where the format allows it).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Where a scene comes from: a JSON scene file (`-` for stdin) or a KITTI
/// frame.
#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long, conflicts_with = "velodyne")]
    pub scene: Option<PathBuf>,
    /// KITTI velodyne .bin; boxes come from --label and --calib.
    #[arg(long, requires = "calib")]
    pub velodyne: Option<PathBuf>,
    #[arg(long, requires = "velodyne")]
    pub label: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Free,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

impl From<Metric> for partgrid::postproc::IouMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Bev => Self::Bev,
            Metric::ThreeD => Self::ThreeD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Max,
    Avg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene (JSON).
    Synth,
    /// Per-point foreground and part-location labels (binary records).
    GenLabels(SceneArgs),
    /// Sparse voxel tensor of a scene (JSON).
    Voxelize(SceneArgs),
    /// Regression targets for the anchor-free or anchor-based head (JSON).
    Encode {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, value_enum)]
        strategy: Strategy,
    },
    /// RoI-aware pooling of per-point labels into canonical grids.
    Pool {
        #[command(flatten)]
        scene: SceneArgs,
        /// JSON list of boxes or scored boxes; the scene's own boxes otherwise.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "max")]
        mode: Mode,
    },
    /// Forward pass of the sparse backbone.
    Backbone {
        #[command(flatten)]
        scene: SceneArgs,
        /// Weight blob with its manifest at `<weights>.json`; seeded weights otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the weights used, with manifest, to this path.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Rotated non-maximum suppression over a JSON list of scored boxes.
    Nms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        thresh: f64,
        #[arg(long, value_enum, default_value = "bev")]
        metric: Metric,
        /// Keep at most this many boxes.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Recall, AP, part error, correlation and false-positive breakdown.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "3d")]
        metric: Metric,
        /// IoU needed for a ground truth to count as recalled.
        #[arg(long, default_value_t = 0.7)]
        recall_iou: f64,
        /// Minimum score of the false positives that are classified.
        #[arg(long, default_value_t = 0.5)]
        fp_score: f64,
        /// PR curve CSV; defaults to the --out path with a .csv extension.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Timing of pipeline stages over synthetic scenes.
    Bench {
        #[command(subcommand)]
        target: bench::Target,
    },
    /// End-to-end run over synthetic scenes with stand-in network heads.
    Smoke {
        #[arg(long)]
        scenes: Option<usize>,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Invariant(String),
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Failure::Input(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Failure::Invariant(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Invariant(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Invariant(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<partgrid::Error> for Failure {
    fn from(e: partgrid::Error) -> Self {
        use partgrid::Error as E;
        match e {
            E::DimensionMismatch(_) | E::ChannelMismatch { .. } | E::IndivisibleDims(_) | E::EmptyTarget => {
                Failure::Invariant(e.to_string())
            }
            _ => Failure::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.global.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Failure::invariant(e.to_string()))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg, cli.global.out.as_deref()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARTGRID_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("partgrid: {f}");
            ExitCode::from(f.code())
        }
    }
}
