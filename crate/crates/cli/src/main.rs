//! `dehaze`: synthesize hazy data, train, dehaze and evaluate from the shell.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dehaze",
    version,
    about = "Residual-learning adversarial single-image dehazing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a hazy image from a clean image, depth, beta and airlight.
    Synthesize(SynthesizeArgs),
    /// Write a directory of clean/depth/hazy PNGs plus a manifest.
    MakeDataset(MakeDatasetArgs),
    /// Train generator and discriminator from a dataset manifest.
    Train(TrainArgs),
    /// Run a trained generator on one image.
    Dehaze(DehazeArgs),
    /// Apply guided-filter halo suppression to an already dehazed image.
    Postprocess(PostprocessArgs),
    /// Compare test images against references with PSNR and SSIM.
    Evaluate(EvaluateArgs),
    /// Check every layer's gradient against central finite differences.
    Gradcheck,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    /// Clean 8-bit RGB PNG.
    #[arg(long)]
    clean: PathBuf,
    /// 16-bit grayscale depth PNG.
    #[arg(long, conflicts_with = "constant_depth", required_unless_present = "constant_depth")]
    depth: Option<PathBuf>,
    /// Use this depth everywhere instead of a depth file.
    #[arg(long)]
    constant_depth: Option<f64>,
    /// Depth encoded by the largest 16-bit code.
    #[arg(long, default_value_t = dehaze_core::data::DEFAULT_DEPTH_SCALE)]
    depth_scale: f64,
    #[arg(long)]
    beta: f64,
    /// One gray value or three comma-separated components.
    #[arg(long, default_value = "1.0", value_parser = parse_airlight)]
    airlight: [f64; 3],
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct MakeDatasetArgs {
    /// Number of generated scenes (ramp and step depths alternate).
    #[arg(long, conflicts_with = "sources", required_unless_present = "sources")]
    synthetic: Option<usize>,
    /// Side length of generated scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// JSON list of `{"name", "clean", "depth"}` objects with paths relative to the list.
    #[arg(long)]
    sources: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = dehaze_core::data::DEFAULT_DEPTH_SCALE)]
    depth_scale: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Overrides the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// Guided-filter window radius.
    #[arg(long, default_value_t = 8)]
    radius: usize,
    /// Guided-filter regularization.
    #[arg(long, default_value_t = 1e-3, value_parser = parse_positive)]
    epsilon: f64,
}

#[derive(Debug, Args)]
struct DehazeArgs {
    /// Generator checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Number of generator passes, each fed the previous output.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    recursive: u64,
    #[arg(long)]
    no_postprocess: bool,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    #[arg(long)]
    hazy: PathBuf,
    #[arg(long)]
    dehazed: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference PNG, or a directory of them.
    #[arg(long)]
    reference: PathBuf,
    /// Test PNG, or a directory holding files of the same names.
    #[arg(long)]
    test: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_airlight(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [r, g, b] => Ok([r, g, b]),
        _ => Err(format!("expected 1 or 3 components, got {}", parts.len())),
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(v) => Err(format!("must be positive and finite, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synthesize(a) => commands::synthesize(a),
        Command::MakeDataset(a) => commands::make_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Dehaze(a) => commands::dehaze(a),
        Command::Postprocess(a) => commands::postprocess(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck => commands::gradcheck(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
