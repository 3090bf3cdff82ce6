//! `voxdiff`: corpus generation, codec and denoiser training, sampling in
//! every conditioning mode, metrics and spectra.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "voxdiff", version, about = "Patch-tokenized discrete diffusion for TSDF volumes")]
pub struct Cli {
    /// Run configuration (`key = value` lines in sections); defaults to the desk setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `training.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 = fully sequential).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic labelled corpus into `<out>/corpus`.
    GenCorpus {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the patch codec on the corpus into `<out>/codec`.
    TrainVq,
    /// Encode the corpus into token maps in `<out>/tokens`.
    Tokenize,
    /// Train the denoiser on the token maps into `<out>/denoiser`.
    TrainDiffusion,
    /// Draw shapes from the prior into `<out>/samples`.
    Sample {
        #[arg(long)]
        count: Option<usize>,
        /// Class label for guided sampling.
        #[arg(long)]
        label: Option<u32>,
    },
    /// Complete the region of a TSDF into `<out>/completions`.
    Complete {
        #[arg(long)]
        input: PathBuf,
        /// Observed box as fractions, `x0:x1,y0:y1,z0:z1`.
        #[arg(long)]
        region: Option<String>,
        /// Corruption start k/T.
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        label: Option<u32>,
    },
    /// Add noise to a TSDF (unless `--alpha 0`) and denoise it into `<out>/denoised`.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// `gaussian` or `uniform`.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long)]
        start: Option<f64>,
    },
    /// Regenerate a TSDF under a new class label into `<out>/edits`.
    Edit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        label: u32,
        #[arg(long)]
        start: Option<f64>,
    },
    /// Compare generated shapes with references; reports in `<out>/eval`.
    Eval {
        /// Directory of generated `.tsdf` files (default `<out>/samples`).
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Directory of reference `.tsdf` files (default `<out>/corpus`).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// `cd` or `emd` for 1-NNA.
        #[arg(long, default_value = "cd")]
        distance: String,
        /// Partial input, adds UHD.
        #[arg(long)]
        partial: Option<PathBuf>,
    },
    /// DCT power per octave band of every `.tsdf` in a directory into `<out>/spectrum`.
    Spectrum {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::TrainVq => "train-vq",
            Command::Tokenize => "tokenize",
            Command::TrainDiffusion => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::Complete { .. } => "complete",
            Command::Denoise { .. } => "denoise",
            Command::Edit { .. } => "edit",
            Command::Eval { .. } => "eval",
            Command::Spectrum { .. } => "spectrum",
        }
    }
}

/// Usage errors exit with 1, data errors with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<voxdiff::Error> for CliError {
    fn from(e: voxdiff::Error) -> Self {
        match e {
            voxdiff::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let started = Instant::now();
    match commands::run(&cli, started) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("voxdiff {}: usage error: {m}", cli.command.name());
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("voxdiff {}: error: {m}", cli.command.name());
            ExitCode::from(2)
        }
    }
}
