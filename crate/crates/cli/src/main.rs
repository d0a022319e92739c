mod commands;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

/// Volumetric super-resolution: synthetic data, training, evaluation,
/// attribution maps and memory profiles.
#[derive(Parser, Debug)]
#[command(name = "mtvnet", version)]
pub struct Cli {
    /// Root of the volume and run store.
    #[arg(long, global = true, env = "MTVNET_DATA_DIR", default_value = "mtvnet-data")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic HR corpus and its degraded LR counterpart.
    MakeData(MakeDataArgs),
    /// Train a model on a stored dataset.
    Train(TrainArgs),
    /// Reconstruct every LR volume of a dataset and score it.
    Eval(EvalArgs),
    /// Local attribution map of a trained model around one location.
    Lam(LamArgs),
    /// Token counts and activation memory across input resolutions.
    Profile(ProfileArgs),
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// ellipsoid, noise or trabecular.
    #[arg(long)]
    pub generator: String,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// HR edge length in voxels.
    #[arg(long, default_value_t = 64)]
    pub edge: usize,
    /// Downsampling factor of the LR volumes.
    #[arg(long)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset name under the data root.
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    /// Downsample without the Gaussian pre-blur.
    #[arg(long)]
    pub no_blur: bool,
    /// Blur sigma in HR voxels (default scale / 2).
    #[arg(long)]
    pub blur_sigma: Option<f64>,
}

/// Where the experiment configuration comes from.
#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Configuration file (key = value lines).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset: desk, l1, l2 or l3.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one configuration key, e.g. --set train.lr=5e-4. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Total iterations; milestones are rescaled to the same fractions.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset whose HR volumes are degraded into training pairs.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Run name; artifacts go to <data-dir>/runs/<run>.
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "ckpt"])))]
pub struct EvalArgs {
    /// Built-in model instead of a checkpoint: trilinear.
    #[arg(long)]
    pub model: Option<String>,
    /// Checkpoint path, or "last" for the run's latest checkpoint.
    #[arg(long)]
    pub ckpt: Option<String>,
    /// Run used to resolve "last" and the run's configuration.
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Configuration of the checkpoint (default: the run's config.cfg).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Scale for the built-in model (default: the dataset's only LR scale).
    #[arg(long)]
    pub scale: Option<usize>,
    /// Tile edge in LR voxels for the built-in model.
    #[arg(long, default_value_t = 16)]
    pub tile: usize,
    /// Reject contexts that leave the volume instead of reflect-padding.
    #[arg(long)]
    pub no_padding: bool,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LamArgs {
    /// Checkpoint path, or "last".
    #[arg(long)]
    pub ckpt: String,
    #[arg(long, default_value = "default")]
    pub run: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Index of the LR volume in the dataset.
    #[arg(long, default_value_t = 0)]
    pub volume: usize,
    /// LR voxel the contexts are centred on, as x,y,z (default: volume centre).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub center: Option<Vec<usize>>,
    /// Edge of the attributed output box in SR voxels.
    #[arg(long, default_value_t = 8)]
    pub box_size: usize,
    /// Integration path steps.
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    /// Gaussian sigma of the blurred baseline, in LR voxels.
    #[arg(long, default_value_t = mtvnet::analysis::DEFAULT_LAM_SIGMA)]
    pub sigma: f64,
    /// Output directory (default: <run>/lam).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Presets to profile. Repeatable; default l1 and l3.
    #[arg(long)]
    pub preset: Vec<String>,
    /// Extra configuration files to profile. Repeatable.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Outermost context edges in LR voxels.
    #[arg(long, value_delimiter = ',', default_value = "16,32,48,64,128")]
    pub resolutions: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Also run a forward pass for rows whose analytic footprint is at most
    /// this many MiB.
    #[arg(long)]
    pub measure_up_to_mib: Option<usize>,
    /// Output directory (default: <data-dir>/profile).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
