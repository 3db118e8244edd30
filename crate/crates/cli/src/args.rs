use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neural_mrf::WidthScale;

#[derive(Parser, Debug)]
#[command(
    name = "neural-mrf",
    version,
    about = "Image synthesis with neural-patch MRF priors"
)]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0, global = true)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Style transfer, or texture synthesis when --alpha-content is 0.
    Transfer(TransferArgs),
    /// Reconstruct an image from its activations at chosen layers.
    Invert(InvertArgs),
    /// Print the best-matching patch in B for query pixels of A.
    MatchReport(MatchArgs),
    /// Write a randomly initialized network in the weight file format.
    GenTestWeights(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Width {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl From<Width> for WidthScale {
    fn from(w: Width) -> Self {
        match w {
            Width::Full => WidthScale::Full,
            Width::Half => WidthScale::Half,
            Width::Quarter => WidthScale::Quarter,
            Width::Eighth => WidthScale::Eighth,
        }
    }
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct NetworkArgs {
    /// Weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,

    /// Use a randomly initialized network with this seed instead of a
    /// weight file.
    #[arg(long, value_name = "SEED")]
    pub test_net: Option<u64>,
}

#[derive(Args, Debug)]
pub struct NetworkSource {
    #[command(flatten)]
    pub source: NetworkArgs,

    /// Channel width of the --test-net network.
    #[arg(long, value_enum, default_value = "eighth")]
    pub test_net_width: Width,
}

/// Energy settings. Unset flags fall back to the --config file, then to
/// the built-in defaults.
#[derive(Args, Debug, Default)]
pub struct EnergyArgs {
    /// File of `key = value` lines using the flag names below.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub alpha_content: Option<f32>,

    #[arg(long)]
    pub alpha_tv: Option<f32>,

    /// Comma-separated layer names.
    #[arg(long, value_delimiter = ',')]
    pub mrf_layers: Option<Vec<String>>,

    /// One weight per MRF layer, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub mrf_weights: Option<Vec<f32>>,

    #[arg(long)]
    pub content_layer: Option<String>,

    #[arg(long)]
    pub patch_size: Option<usize>,

    #[arg(long)]
    pub stride: Option<usize>,

    /// Style copy scales, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub scales: Option<Vec<f32>>,

    /// Style copy rotations in radians, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub rotation_angles: Option<Vec<f32>>,

    /// Also sample patches from rotated style copies.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub rotations: Option<bool>,

    /// Divide each energy term by its element count.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,

    /// L-BFGS iterations per pyramid level.
    #[arg(long)]
    pub iterations: Option<usize>,

    #[arg(long)]
    pub lbfgs_memory: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub style: PathBuf,

    #[arg(long)]
    pub content: Option<PathBuf>,

    /// Output size `HxW` for unguided synthesis.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,

    #[arg(short, long)]
    pub output: PathBuf,

    /// Write the energy trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,

    #[command(flatten)]
    pub network: NetworkSource,

    #[command(flatten)]
    pub energy: EnergyArgs,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,

    /// Comma-separated tap names (`input` for the preprocessed image).
    #[arg(long, value_delimiter = ',', required = true)]
    pub taps: Vec<String>,

    /// Blend the target activations with this image's.
    #[arg(long)]
    pub blend_with: Option<PathBuf>,

    /// Weight of --image when blending.
    #[arg(long, default_value_t = 0.5, requires = "blend_with")]
    pub lambda: f32,

    #[arg(long)]
    pub alpha_tv: Option<f32>,

    #[arg(long, default_value_t = 200)]
    pub iterations: usize,

    #[arg(long, default_value_t = 10)]
    pub lbfgs_memory: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(short, long)]
    pub output: PathBuf,

    /// Write the energy trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,

    #[command(flatten)]
    pub network: NetworkSource,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub a: PathBuf,

    #[arg(long)]
    pub b: PathBuf,

    /// Query pixel `y,x` in A (repeatable).
    #[arg(long = "coords", value_parser = parse_coord, required = true)]
    pub coords: Vec<(usize, usize)>,

    #[arg(long, value_delimiter = ',', default_value = "relu3_1,relu4_1")]
    pub layers: Vec<String>,

    #[arg(long, default_value_t = 3)]
    pub patch_size: usize,

    #[command(flatten)]
    pub network: NetworkSource,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, value_enum, default_value = "eighth")]
    pub width: Width,

    #[arg(short, long)]
    pub output: PathBuf,
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| -> Result<usize, String> {
        match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("bad dimension {v:?} in {s:?}")),
            Ok(n) => Ok(n),
        }
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn parse_coord(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s
        .split_once(',')
        .ok_or_else(|| format!("expected y,x, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(y)?, parse(x)?))
}
