//! Operator surface for the autoencoder workbench: train the three phases,
//! evaluate reconstructions, run the two ablations, train and sample the
//! latent denoiser, and profile a configuration.
//!
//! Exit codes: 0 success, 2 config/shape, 3 data, 4 numeric, 5 checkpoint,
//! 1 everything else.

mod commands;
mod config;
mod util;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dcae", version, about = "Deep-compression autoencoder workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train autoencoder phases; later phases resume from the saved
    /// checkpoint of the previous one.
    TrainAe(TrainAeArgs),
    /// Save a freshly initialized (transparent) autoencoder checkpoint.
    InitAe(InitAeArgs),
    /// Reconstruction quality of a checkpoint: PSNR/SSIM/Fréchet plus a
    /// side-by-side image grid.
    EvalRecon(EvalReconArgs),
    /// Controlled comparisons.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Train the latent denoiser on top of an autoencoder checkpoint.
    TrainDiffusion(TrainDiffusionArgs),
    /// Draw samples from a trained denoiser checkpoint and decode them.
    Sample(SampleArgs),
    /// Parameter counts, per-phase trainable groups, step timings, and
    /// token accounting for a configuration.
    Profile(ProfileArgs),
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Shortcut vs no-shortcut twins trained identically.
    Residual(AblateResidualArgs),
    /// High-resolution penalty with and without the adaptation phase.
    Generalization(AblateGeneralizationArgs),
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    config: PathBuf,
    /// 1, 2, 3, or all.
    #[arg(long, default_value = "all")]
    phase: String,
    /// Run a phase even when the checkpoint history does not end just
    /// before it.
    #[arg(long)]
    allow_out_of_order: bool,
    /// Output root; overrides run.output_dir.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct InitAeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalReconArgs {
    /// Autoencoder checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// "synthetic:<scene>", a scene name, or an image folder.
    #[arg(long, default_value = "synthetic:mixed")]
    data: String,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Images scored per metric; the reference protocol uses 1024.
    #[arg(long, default_value_t = 64)]
    images: usize,
    /// Images in the side-by-side grid.
    #[arg(long, default_value_t = 8)]
    grid_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct AblateResidualArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct AblateGeneralizationArgs {
    /// Phase-1-trained autoencoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resolution the checkpoint was trained at.
    #[arg(long)]
    train_resolution: usize,
    /// Resolution of the adaptation phase; defaults to twice the train
    /// resolution.
    #[arg(long)]
    adapt_resolution: Option<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "synthetic:mixed")]
    data: String,
    #[arg(long, default_value_t = 8)]
    eval_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long)]
    ae_checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    /// Directory written by train-diffusion (holds both checkpoints).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Guidance scale; defaults to the value stored in the checkpoint.
    #[arg(long)]
    cfg: Option<f64>,
    /// Fixed class id for every sample instead of cycling through all.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<String>,
}

fn run(cli: Cli) -> dcae::Result<()> {
    match cli.command {
        Command::TrainAe(a) => commands::train_ae::run(&a.config, &a.phase, a.allow_out_of_order, a.out.as_deref()),
        Command::InitAe(a) => commands::train_ae::init(&a.config, a.out.as_deref()),
        Command::EvalRecon(a) => commands::eval_recon::run(
            &a.checkpoint,
            &a.data,
            a.resolution,
            a.images,
            a.grid_images,
            a.seed,
            a.out.as_deref(),
        ),
        Command::Ablate(AblateCommand::Residual(a)) => {
            commands::ablate::residual(&a.config, a.out.as_deref())
        }
        Command::Ablate(AblateCommand::Generalization(a)) => commands::ablate::generalization(
            &a.checkpoint,
            a.train_resolution,
            a.adapt_resolution.unwrap_or(2 * a.train_resolution),
            a.steps,
            a.batch_size,
            a.lr,
            &a.data,
            a.eval_images,
            a.seed,
            a.out.as_deref(),
        ),
        Command::TrainDiffusion(a) => {
            commands::train_diffusion::run(&a.ae_checkpoint, &a.config, a.out.as_deref())
        }
        Command::Sample(a) => commands::sample::run(
            &a.checkpoint,
            a.n,
            a.cfg,
            a.class,
            a.seed,
            a.out.as_deref(),
        ),
        Command::Profile(a) => commands::profile::run(&a.config, a.out.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
