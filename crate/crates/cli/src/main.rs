//! `fastmap` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fastmap", version, about = "Heatmap-guided vector map decoding on synthetic BEV scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Cell size in meters; must tile the range.
    #[arg(long, default_value_t = 0.3)]
    resolution: f64,
}

#[derive(Args, Debug, Clone)]
struct WeightArgs {
    #[arg(long, default_value_t = 2.0)]
    alpha_cls: f64,
    #[arg(long, default_value_t = 2.5)]
    alpha_pl: f64,
    #[arg(long, default_value_t = 2.5)]
    alpha_pp: f64,
    #[arg(long, default_value_t = 2.5)]
    alpha_al: f64,
    #[arg(long, default_value_t = 0.6)]
    alpha_heat: f64,
    /// Stage-1 multiplier.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Stage-2 multiplier.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.8)]
    alpha_gauss: f64,
    #[arg(long, default_value_t = 4.0)]
    beta_gauss: f64,
    /// Matching cost of a class mismatch.
    #[arg(long, default_value_t = 1.0)]
    class_weight: f64,
    /// Use the dot-product point-line variant instead of the perpendicular distance.
    #[arg(long)]
    printed_form: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SetArg {
    Strict,
    Standard,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum IntegrationArg {
    Area,
    Interp101,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Gen {
        #[arg(long, env = "FASTMAP_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        dividers: usize,
        #[arg(long, default_value_t = 1)]
        crossings: usize,
        #[arg(long, default_value_t = 2)]
        boundaries: usize,
        /// Largest curvature magnitude, 1/m.
        #[arg(long, default_value_t = 0.05)]
        curvature: f64,
        /// Points per instance.
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Also write a perturbed prediction set here.
        #[arg(long)]
        perturbed: Option<PathBuf>,
        /// Perturbation half-width in meters.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rasterize a scene into a dilated heatmap.
    Rasterize {
        scene: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Odd dilation kernel size.
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        /// Gaussian sigma in cells (default kernel / 3).
        #[arg(long)]
        sigma: Option<f64>,
        /// Also write an SVG rendering.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the decoder forward pass.
    Forward {
        /// Scene whose heatmap seeds the BEV features.
        #[arg(long, conflicts_with = "bev")]
        scene: Option<PathBuf>,
        /// BEV features as a `d x H x W` container.
        #[arg(long)]
        bev: Option<PathBuf>,
        /// Load weights (the manifest is `<path>.json`) instead of seeding them.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, env = "FASTMAP_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        sample_points: usize,
        /// Prior count M.
        #[arg(long, default_value_t = 256)]
        priors: usize,
        /// Use M = 3500.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value_t = 1)]
        levels: usize,
        #[arg(long, default_value_t = 0.1)]
        offset_scale: f64,
        /// Heatmap confidence threshold.
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        dump_heatmap: Option<PathBuf>,
        /// FMSP priors; the sidecar is `<path>.json`.
        #[arg(long)]
        dump_priors: Option<PathBuf>,
        /// FMWT weights; the manifest is `<path>.json`.
        #[arg(long)]
        dump_weights: Option<PathBuf>,
        #[arg(long)]
        dump_bev: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Match predictions to ground truth and report every loss term.
    Loss {
        pred: PathBuf,
        gt: PathBuf,
        /// Stage-1 predictions (defaults to the stage-2 file).
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Predicted heatmap for the heatmap term.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        weights: WeightArgs,
        /// Include the assignments in the report.
        #[arg(long)]
        dump_matching: bool,
        /// Compare analytic gradients with central differences.
        #[arg(long)]
        gradcheck: bool,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Optimize predicted points against ground truth under the point losses.
    Fit {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Plain fixed-size steps, no backtracking.
        #[arg(long)]
        fixed_step: bool,
        #[command(flatten)]
        weights: WeightArgs,
        /// Per-step loss CSV (default `<out>.trace.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Chamfer AP and smoothness diagnostics.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = SetArg::Standard)]
        set: SetArg,
        #[arg(long, value_enum, default_value_t = IntegrationArg::Area)]
        integration: IntegrationArg,
        #[arg(long, default_value_t = 100)]
        densify: usize,
        /// PR curve points as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        /// Suppress the text table.
        #[arg(long)]
        quiet: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Render ground truth, predictions, heatmaps and priors as SVG.
    Viz {
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// FMSP priors with their `<path>.json` sidecar.
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Pixels per meter.
        #[arg(long, default_value_t = 10.0)]
        scale: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
