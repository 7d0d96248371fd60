//! `shapeconv` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use shapeconv::net::LayerKind;

#[derive(Parser, Debug)]
#[command(name = "shapeconv", version, about = "ShapeConv layers, a toy RGB-D segmentation pipeline and its checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic RGB-D segmentation dataset
    GenData(GenDataArgs),
    /// Train a segmentation model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(EvalArgs),
    /// Fold every shape-aware layer of a checkpoint into a vanilla kernel
    Fuse(FuseArgs),
    /// Time vanilla, unfused and fused forward passes of one layer
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Run the numerical self-check suite
    Selftest(SelftestArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    Vanilla,
    Shapeconv,
}

impl From<LayerArg> for LayerKind {
    fn from(l: LayerArg) -> Self {
        match l {
            LayerArg::Vanilla => LayerKind::Conv,
            LayerArg::Shapeconv => LayerKind::ShapeConv,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Parent directory of the run directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 800)]
    pub train_n: usize,
    #[arg(long, default_value_t = 200)]
    pub test_n: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Depth offset range of the training split, as LO,HI
    #[arg(long, value_parser = parse_range, default_value = "0,1")]
    pub shift_train: (f64, f64),
    /// Depth offset range of the test split, as LO,HI
    #[arg(long, value_parser = parse_range, default_value = "1.5,2.5")]
    pub shift_test: (f64, f64),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides data.path and skips generation
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Parent directory of the run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.layer_kind
    #[arg(long, value_enum)]
    pub layer: Option<LayerArg>,
    /// Keep every base weight at its initial value
    #[arg(long)]
    pub freeze_wb: bool,
    /// Keep every shape weight at its initial value
    #[arg(long)]
    pub freeze_ws: bool,
    /// Overrides the top-level seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory; its test split is evaluated
    #[arg(long)]
    pub data: PathBuf,
    /// Trimap band widths in pixels, as a comma list
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,8")]
    pub trimap_widths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Parent directory of the run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Parent directory of the run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory supplying the probe batch; synthetic scenes otherwise
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Probe batch size
    #[arg(long, default_value_t = 4)]
    pub probe: usize,
    /// Largest accepted end-to-end logit drift
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Input size as N,C,H,W
    #[arg(long, value_parser = parse_dims, default_value = "1,16,32,32")]
    pub dims: [usize; 4],
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 16)]
    pub cout: usize,
    #[arg(long, default_value_t = shapeconv_bench::MIN_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = shapeconv_bench::MIN_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of the run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Parent directory of a run directory for the report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of a run directory for the report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn split_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn split_usizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    match split_floats(s)?[..] {
        [lo, hi] if lo.is_finite() && hi.is_finite() && lo <= hi => Ok((lo, hi)),
        _ => Err(format!("expected LO,HI with finite LO <= HI, got {s:?}")),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let v = split_usizes(s)?;
    <[usize; 4]>::try_from(v).map_err(|_| format!("expected N,C,H,W, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::EXIT_USAGE),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_range("1.5, 2.5"), Ok((1.5, 2.5)));
        assert!(parse_range("2,1").is_err());
        assert!(parse_range("1").is_err());
        assert!(parse_range("nan,1").is_err());
        assert_eq!(parse_dims("1,16,32,32"), Ok([1, 16, 32, 32]));
        assert!(parse_dims("1,16,32").is_err());
    }

    #[test]
    fn command_line_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
