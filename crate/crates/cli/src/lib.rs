//! `hdrplus` command line: argument parsing, configuration layering and the
//! `merge`, `finish`, `full` and `synthbench` subcommands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Settings;

#[derive(Debug, Parser)]
#[command(
    name = "hdrplus",
    version,
    about = "Align and merge raw bursts, then render them to 8-bit sRGB"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align and merge a burst directory into merged.pgm.
    Merge {
        burst_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a mosaic (such as merged.pgm) to final.png.
    Finish {
        mosaic: PathBuf,
        /// Metadata file; defaults to burst.json next to the mosaic.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Merge then finish: writes merged.pgm and final.png.
    Full {
        burst_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score align+merge on a synthetic burst with known ground truth.
    Synthbench {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory.
    #[arg(short = 'o', long = "output", default_value = ".")]
    pub output: PathBuf,
    /// Config file of `key = value` lines using the flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ref_index: Option<usize>,
    /// Temporal denoising strength.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Spatial denoising strength.
    #[arg(long)]
    pub s: Option<f64>,
    /// Merge and alignment tile size (the coarsest alignment level uses half).
    #[arg(long)]
    pub tile_size: Option<usize>,
    /// Alignment search radius at every level.
    #[arg(long)]
    pub search_radius: Option<usize>,
    /// Distance norm per alignment level, coarsest first, e.g. 2,2,2,1.
    #[arg(long, value_delimiter = ',')]
    pub norms: Option<Vec<u32>>,
    /// Synthetic long-exposure gain for tone mapping.
    #[arg(long)]
    pub gain: Option<f64>,
    #[arg(long)]
    pub contrast_alpha: Option<f64>,
    /// Skip tone mapping, contrast and sharpening.
    #[arg(long)]
    pub minimal: bool,
    /// Write pyramids and motion fields under <output>/intermediates.
    #[arg(long)]
    pub dump_intermediates: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Common {
    pub fn settings(&self) -> Settings {
        Settings {
            ref_index: self.ref_index,
            tau: self.tau,
            s: self.s,
            tile_size: self.tile_size,
            search_radius: self.search_radius,
            norms: self.norms.clone(),
            gain: self.gain,
            contrast_alpha: self.contrast_alpha,
            minimal: self.minimal.then_some(true),
            dump_intermediates: self.dump_intermediates.then_some(true),
            threads: self.threads,
            baseline_lambda_s: None,
            baseline_lambda_r: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Number of frames.
    #[arg(long = "n", default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub width: usize,
    #[arg(long, default_value_t = 768)]
    pub height: usize,
    /// All frames unshifted.
    #[arg(long = "static")]
    pub static_scene: bool,
    /// Also write the synthetic burst (and clean.pgm) to this directory.
    #[arg(long)]
    pub emit_burst: Option<PathBuf>,
    /// Write sweep.csv over every combination of the sweep lists.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,8,25,75,200")]
    pub sweep_tau: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5")]
    pub sweep_s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub sweep_n: Vec<usize>,
}

/// Parse `argv` and run. Returns the process exit code: 0 on success, 1 on
/// pipeline errors, 2 on bad arguments.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
