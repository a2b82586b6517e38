//! `dwislice` command-line tool.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::PathBuf;

pub use commands::run;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] dwislice_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Clap(#[from] clap::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) => match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            },
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dwislice", version, about = "Through-plane slice reconstruction for diffusion MRI")]
pub struct Cli {
    /// Seed for every random choice (initialization, splits, noise).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// TOML file with defaults; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// A diffusion volume with its FSL gradient files.
#[derive(Debug, Clone, Args)]
pub struct DwiArgs {
    /// 4D NIfTI with b0 and diffusion-weighted volumes.
    #[arg(long)]
    pub dwi: PathBuf,
    /// b-values; defaults to the volume path with a `.bval` extension.
    #[arg(long)]
    pub bval: Option<PathBuf>,
    /// Gradient directions; defaults to the volume path with a `.bvec` extension.
    #[arg(long)]
    pub bvec: Option<PathBuf>,
    /// Shell to use.
    #[arg(long, default_value_t = 1000.0)]
    pub shell: f64,
    /// Accepted deviation from the shell b-value.
    #[arg(long, default_value_t = 50.0)]
    pub shell_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Linear,
    Cubic,
    Bspline5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NetArg {
    B0,
    #[value(name = "avg-b1000")]
    AvgB1000,
    Sh4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Signal,
    Sh4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    None,
    Gaussian,
    Rician,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtiArg {
    Ols,
    Wls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Subject,
    Slice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpsampleArg {
    Nearest,
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    PerChannel,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Linear,
    Cubic,
    Bspline5,
    ShLinear,
    AeDwi,
    AeSh,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit SH coefficients to one shell.
    FitSh {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long, default_value_t = 4)]
        lmax: usize,
        /// Laplace-Beltrami regularization weight.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Label or mask volume; voxels with value 0 are skipped.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output NIfTI; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate SH coefficients on the directions of a gradient table.
    ProjectSh {
        /// Coefficient NIfTI with its JSON sidecar.
        #[arg(long)]
        sh: PathBuf,
        #[arg(long)]
        bval: PathBuf,
        #[arg(long)]
        bvec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diffusion tensors and write tensor, FA and MD maps.
    FitDti {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DtiArg::Ols)]
        method: DtiArg,
        /// Writes `<prefix>_tensor.nii`, `<prefix>_fa.nii` and `<prefix>_md.nii`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Fill a gap of missing slices by interpolation along z.
    Interp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gap_start: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        n: u8,
        #[arg(long, value_enum, default_value_t = InterpArg::Linear)]
        method: InterpArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder on axial slices.
    Train {
        /// Training subjects; repeat for several.
        #[arg(long = "dwi", required = true)]
        dwi: Vec<PathBuf>,
        /// Label or mask volume per subject, in the order of `--dwi`.
        #[arg(long)]
        mask: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000.0)]
        shell: f64,
        #[arg(long, default_value_t = 50.0)]
        shell_tol: f64,
        #[arg(long, value_enum)]
        net: NetArg,
        /// Diffusion-weighted volumes averaged per sample for `avg-b1000`.
        #[arg(long, default_value_t = 15)]
        avg_n: usize,
        #[arg(long, default_value_t = 4)]
        lmax: usize,
        /// Latent feature maps; defaults to 64 for `sh4` and 32 otherwise.
        #[arg(long)]
        latent_maps: Option<usize>,
        /// Train with 16, 32, 64 and 128 latent maps and keep the best.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.15)]
        val_fraction: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Subject)]
        split: SplitArg,
        #[arg(long, default_value_t = 128)]
        input_size: usize,
        /// Divide every hidden width by this factor.
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        #[arg(long, value_enum, default_value_t = UpsampleArg::Nearest)]
        upsample: UpsampleArg,
        /// Slice normalization of multi-channel inputs; stored in the checkpoint.
        #[arg(long, value_enum, default_value_t = NormArg::PerChannel)]
        norm: NormArg,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Synthesize missing slices with trained autoencoders.
    Infer {
        #[command(flatten)]
        input: DwiArgs,
        /// Signal or SH coefficient model.
        #[arg(long)]
        model: PathBuf,
        /// Model for the b0 volumes; required for `sh4`.
        #[arg(long)]
        b0_model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DomainArg::Signal)]
        domain: DomainArg,
        #[arg(long)]
        gap_start: usize,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        n: u8,
        #[arg(long, default_value_t = 4)]
        lmax: usize,
        /// Label volume; histogram matching then uses only labelled voxels.
        #[arg(long)]
        match_mask: Option<PathBuf>,
        /// Input volume with the gap slices replaced.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic phantom.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, num_args = 3, default_values_t = [64, 64, 16])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 88)]
        directions: usize,
        #[arg(long, default_value_t = 4)]
        n_b0: usize,
        #[arg(long, default_value_t = 1000.0)]
        b_value: f64,
        #[arg(long, value_enum, default_value_t = NoiseArg::None)]
        noise: NoiseArg,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Replace the shell by its SH projection of this order.
        #[arg(long)]
        band_limit: Option<usize>,
    },
    /// Slice-removal experiment over every method and gap.
    Evaluate {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        b0_model: Option<PathBuf>,
        /// One-channel model applied to every diffusion-weighted volume.
        #[arg(long)]
        dwi_model: Option<PathBuf>,
        #[arg(long)]
        sh_model: Option<PathBuf>,
        /// Methods to compare; defaults to every method whose models are given.
        #[arg(long, value_enum, num_args = 1..)]
        methods: Vec<MethodArg>,
        /// Gap sizes.
        #[arg(long = "n", num_args = 1.., default_values_t = [1, 2])]
        n: Vec<usize>,
        /// First slice of each gap; defaults to every interior position.
        #[arg(long, num_args = 1..)]
        gaps: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        lmax: usize,
        /// Receives `report.json`, `report.csv` and `timing.json`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// SH representation error of a shell.
    ShBound {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, num_args = 1.., default_values_t = [4])]
        lmax: Vec<usize>,
    },
}

fn parse_merged(argv: Vec<OsString>) -> Result<Cli, CliError> {
    use clap::CommandFactory;
    let scan = config::prescan(&argv);
    let (Some(path), Some(sub)) = (&scan.config, scan.subcommand) else {
        return Cli::try_parse_from(argv).map_err(CliError::from);
    };
    if scan.given.contains("help") {
        return Cli::try_parse_from(argv).map_err(CliError::from);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let name = argv[sub].to_string_lossy().into_owned();
    let root = Cli::command();
    if root.find_subcommand(&name).is_none() {
        return Cli::try_parse_from(argv).map_err(CliError::from);
    }
    let extra = config::config_args(&text, &root, &name, &scan.given)?;
    let mut merged = vec![argv[0].clone(), argv[sub].clone()];
    merged.extend(extra);
    merged.extend(argv[1..].iter().enumerate().filter(|(i, _)| i + 1 != sub).map(|(_, a)| a.clone()));
    Cli::try_parse_from(merged).map_err(CliError::from)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse_merged(argv) {
        Ok(cli) => cli,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return CliError::Clap(e).exit_code();
        }
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
