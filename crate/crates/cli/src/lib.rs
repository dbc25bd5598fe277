//! Library surface of the `cnc` binary: each subcommand is callable
//! directly, which is how the integration and acceptance tests drive the
//! pipeline without spawning processes.

pub mod config;
pub mod dataset;
pub mod evalcmd;
pub mod manifest;
pub mod pngio;
pub mod samplecmd;
pub mod store;
pub mod traincmd;
pub mod triplet;
pub mod util;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "cnc",
    version,
    about = "Depth-disentangled local and soft-guided global conditioning for a desk-scale latent diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Dataset operations
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Triplet store operations
    Triplet {
        #[command(subcommand)]
        cmd: TripletCmd,
    },
    /// Run one training stage
    Train(TrainCli),
    /// Conditional DDIM sampling
    Sample(SampleCli),
    /// Evaluation suites
    Eval(EvalCli),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Generate a layered-shapes dataset with analytic ground truth
    Gen(DatasetGenCli),
}

#[derive(Args, Debug)]
pub struct DatasetGenCli {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training-split scene count (val/test splits are derived)
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum TripletCmd {
    /// Build synthetic image triplets from a dataset
    Build(TripletBuildCli),
}

#[derive(Args, Debug)]
pub struct TripletBuildCli {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Inpainting backend: oracle | mean-fill
    #[arg(long, default_value = "oracle")]
    pub backend: String,
    /// Condition map kind: depth | edge
    #[arg(long, default_value = "depth")]
    pub condition: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dilation_radius: Option<i32>,
}

#[derive(Args, Debug)]
pub struct TrainCli {
    /// Experiment config JSON (defaults apply when omitted)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// prior | local | global | finetune
    #[arg(long)]
    pub stage: Option<String>,
    /// Prerequisite-stage checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleCli {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub fg_cond: Option<PathBuf>,
    #[arg(long)]
    pub bg_cond: Option<PathBuf>,
    #[arg(long)]
    pub fg_exemplar: Option<PathBuf>,
    #[arg(long)]
    pub bg_exemplar: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.0)]
    pub cfg: f32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_fg: f32,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_bg: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// additive | hadamard
    #[arg(long, default_value = "additive")]
    pub soft_guidance_mode: String,
    /// scene | foreground | masked-foreground
    #[arg(long, default_value = "foreground")]
    pub fg_depth_version: String,
}

#[derive(Args, Debug)]
pub struct EvalCli {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// recon | ordering | semantics | lambda-sweep
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.0)]
    pub cfg: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub estimator_cache: Option<PathBuf>,
}

/// Dispatch a parsed command; returns the process exit code (0 success,
/// 1 domain/validation error; argument parsing itself exits 2 via clap).
pub fn dispatch(cli: Cli) -> i32 {
    let result: anyhow::Result<()> = match cli.cmd {
        Cmd::Dataset { cmd: DatasetCmd::Gen(a) } => (|| {
            let out = util::require(a.out.clone(), "out")?;
            dataset::run(&dataset::DatasetGenArgs {
                seed: a.seed,
                count: a.count,
                resolution: a.resolution,
                out,
            })?;
            Ok(())
        })(),
        Cmd::Triplet { cmd: TripletCmd::Build(a) } => (|| {
            let ds = util::require(a.dataset.clone(), "dataset")?;
            let out = match a.out.clone() {
                Some(o) => o,
                None => ds.parent().unwrap_or_else(|| std::path::Path::new(".")).join("triplets"),
            };
            triplet::run(&triplet::TripletBuildArgs {
                dataset: ds,
                backend: a.backend.clone(),
                condition: a.condition.clone(),
                out,
                dilation_radius: a.dilation_radius,
            })?;
            Ok(())
        })(),
        Cmd::Train(a) => traincmd::run(&traincmd::TrainArgs {
            config: a.config,
            stage: a.stage,
            resume: a.resume,
            seed: a.seed,
            triplets: a.triplets,
            out: a.out,
        })
        .map(|_| ()),
        Cmd::Sample(a) => samplecmd::run(&samplecmd::SampleArgs {
            checkpoint: a.checkpoint,
            fg_cond: a.fg_cond,
            bg_cond: a.bg_cond,
            fg_exemplar: a.fg_exemplar,
            bg_exemplar: a.bg_exemplar,
            mask: a.mask,
            prompt: a.prompt,
            steps: a.steps,
            cfg: a.cfg,
            lambda_fg: a.lambda_fg,
            lambda_bg: a.lambda_bg,
            seed: a.seed,
            count: a.count,
            out: a.out,
            soft_guidance_mode: a.soft_guidance_mode,
            fg_depth_version: a.fg_depth_version,
        })
        .map(|_| ()),
        Cmd::Eval(a) => evalcmd::run(&evalcmd::EvalArgs {
            checkpoint: a.checkpoint,
            suite: a.suite,
            n: a.n,
            dataset: a.dataset,
            out: a.out,
            steps: a.steps,
            cfg: a.cfg,
            seed: a.seed,
            estimator_cache: a.estimator_cache,
            lambda_grid: vec![0.5, 1.0, 1.5],
        })
        .map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
