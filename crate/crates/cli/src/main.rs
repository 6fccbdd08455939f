//! Command-line front end: full pipeline runs, synthetic-capture generation,
//! and standalone metric scoring.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for a pipeline
//! stage failure, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aerial_splat_core::error::{Error, Result};
use aerial_splat_core::eval::{cloud_metrics, depth_metrics, image_metrics};
use aerial_splat_core::mesh::{read_mesh_ply, read_point_cloud_ply};
use aerial_splat_core::pipeline::{run_pipeline, PipelineConfig};
use aerial_splat_core::raster::{ColorMap, DepthMap};
use aerial_splat_core::synth::{generate_synthetic, write_synthetic, SyntheticSceneSpec};
use aerial_splat_core::Real;

#[derive(Parser)]
#[command(
    name = "aerial-splat",
    version,
    about = "Surface reconstruction from aerial imagery via differentiable Gaussian splatting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run import, partition, train, merge, render, fuse, and eval from a
    /// TOML config; stages completed by a previous run are reused.
    Pipeline {
        /// Pipeline configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic aerial capture with exact depth and geometry
    /// ground truth, in the same layout the pipeline imports.
    Synth {
        /// Scene description file; omit for the built-in default scene.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory receiving images/, sparse/, gt_depth/, and gt_cloud.ply.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction against ground truth and print a JSON report.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Depth-map error metrics (MAE, RMSE, accuracy percentages).
    Depth {
        /// Predicted depth grid (.fgrid).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth depth grid (.fgrid).
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Point-set accuracy, completeness, and F-score. The prediction may be
    /// a mesh, in which case its vertices are scored.
    Cloud {
        /// Predicted cloud or mesh (.ply).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth cloud (.ply).
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Image quality metrics (PSNR, SSIM) between two PNGs.
    Image {
        /// Rendered image (.png).
        #[arg(long)]
        pred: PathBuf,
        /// Reference image (.png).
        #[arg(long)]
        gt: PathBuf,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalCommon {
    /// Error thresholds in scene units, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.6,1.0")]
    thresholds: Vec<Real>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn emit_report<R: serde::Serialize>(report: &R, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Invalid(format!("report serialization: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_pipeline(config: &Path) -> Result<()> {
    let cfg = PipelineConfig::<Real>::from_toml(&read_to_string(config)?)?;
    let manifest = run_pipeline(&cfg)?;
    for stage in &manifest.stages {
        let note = if stage.note.is_empty() { String::new() } else { format!("  ({})", stage.note) };
        println!("{:<10} {:<9} {:8.2}s{note}", stage.name, stage.status, stage.seconds);
    }
    println!("artifacts in {}", cfg.output_dir);
    Ok(())
}

fn cmd_synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(path) => toml::from_str(&read_to_string(path)?)
            .map_err(|e| Error::parse(path, format!("scene spec: {e}")))?,
        None => SyntheticSceneSpec::<Real>::default(),
    };
    let synth = generate_synthetic(&spec)?;
    write_synthetic(out, &synth)?;
    println!(
        "wrote {} views, {} sparse points, {} ground-truth cloud points to {}",
        synth.scene.views.len(),
        synth.scene.points.len(),
        synth.gt_cloud.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(cmd: &EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Depth { pred, gt, common } => {
            let pred = DepthMap::<Real>::read_from(pred)?;
            let gt = DepthMap::<Real>::read_from(gt)?;
            let report = depth_metrics(&pred, &gt, &common.thresholds)?;
            emit_report(&report, common.out.as_deref())
        }
        EvalCommand::Cloud { pred, gt, common } => {
            // A mesh PLY scores by its vertex set; a plain cloud by its points.
            let pred_points = match read_mesh_ply::<Real>(pred) {
                Ok(mesh) if !mesh.triangles.is_empty() => mesh.vertices,
                _ => read_point_cloud_ply::<Real>(pred)?.0,
            };
            let gt_points = read_point_cloud_ply::<Real>(gt)?.0;
            let report = cloud_metrics(&pred_points, &gt_points, &common.thresholds)?;
            emit_report(&report, common.out.as_deref())
        }
        EvalCommand::Image { pred, gt, out } => {
            let pred = ColorMap::<Real>::load_png(pred)?;
            let gt = ColorMap::<Real>::load_png(gt)?;
            let report = image_metrics(&pred, &gt)?;
            emit_report(&report, out.as_deref())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pipeline { config } => cmd_pipeline(config),
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), out),
        Command::Eval(cmd) => cmd_eval(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Stage { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
