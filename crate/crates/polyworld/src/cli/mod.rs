//! Command-line interface: `generate | train | infer | eval`.
//!
//! Every subcommand is deterministic given `--seed`; hyperparameters
//! default to the reference values (D=64, L=4, 4 heads, γ=0.05, ω=100,
//! σ=10, λ=10³, T=100) and are printed in the run header.

mod svg;
pub mod train;

pub use train::{evaluate_model, run_training, LossConfigMirror, TrainConfig, Trainer};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Tensor;
use crate::data::{generate_scene, load_dataset, write_dataset, Scene, ShapeFamily, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::{export_geojson, import_geojson, PolygonSet};
use crate::metrics::EvalReport;
use crate::model::{BackboneConfig, ForwardOptions, GnnConfig, Model, ModelConfig, ScoreMode};

#[derive(Parser)]
#[command(
    name = "polyworld",
    about = "Polygonal building extraction: synthesize data, train, extract polygons, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images + COCO-subset annotations).
    Generate(GenerateArgs),
    /// Train the model with the two-phase schedule.
    Train(TrainArgs),
    /// Extract polygons from images; writes GeoJSON and SVG overlays.
    Infer(InferArgs),
    /// Evaluate GeoJSON predictions against dataset ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long, env = "POLYWORLD_DATA_DIR")]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    buildings_min: usize,
    #[arg(long, default_value_t = 3)]
    buildings_max: usize,
    /// Comma-separated shape families: axis, rot, l.
    #[arg(long, default_value = "axis,l")]
    shapes: String,
    /// Gaussian pixel noise sigma.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stamp dilated Gaussian corner targets instead of single pixels.
    #[arg(long, default_value_t = false)]
    heatmap_dilation: bool,
}

#[derive(Args)]
struct HyperArgs {
    /// Vertex slots N.
    #[arg(long, default_value_t = 64)]
    vertex_count: usize,
    /// Descriptor dimension D.
    #[arg(long, default_value_t = 64)]
    descriptor_dim: usize,
    /// Self-attention layers L.
    #[arg(long, default_value_t = 4)]
    gnn_layers: usize,
    /// Attention heads per layer.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Offset radius γ.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Positive-class weight ω.
    #[arg(long, default_value_t = 100.0)]
    omega: f64,
    /// Angle sharpness σ.
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    /// Rasterizer smoothness λ.
    #[arg(long, default_value_t = 1e3)]
    lambda: f64,
    /// Sinkhorn iterations T.
    #[arg(long, default_value_t = 100)]
    sinkhorn_iters: usize,
    /// Backbone stage channels, comma separated.
    #[arg(long, default_value = "12,24")]
    channels: String,
    /// NMS window size.
    #[arg(long, default_value_t = 3)]
    nms_kernel: usize,
    /// Residual connection around the attention update MLP.
    #[arg(long, default_value_t = false)]
    residual_update: bool,
}

impl HyperArgs {
    fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let channels: Vec<usize> = self
            .channels
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("bad --channels: {e}")))?;
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                channels,
                descriptor_dim: self.descriptor_dim,
            },
            gnn: GnnConfig {
                layers: self.gnn_layers,
                heads: self.heads,
                dim: self.descriptor_dim,
                offset_gamma: self.gamma,
                residual_update: self.residual_update,
            },
            vertex_count: self.vertex_count,
            nms_kernel: self.nms_kernel,
            sinkhorn_iterations: self.sinkhorn_iters,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn header(&self) -> String {
        format!(
            "N={} D={} L={} heads={} gamma={} omega={} sigma={} lambda={} T={} channels={} nms_kernel={}",
            self.vertex_count,
            self.descriptor_dim,
            self.gnn_layers,
            self.heads,
            self.gamma,
            self.omega,
            self.sigma,
            self.lambda,
            self.sinkhorn_iters,
            self.channels,
            self.nms_kernel,
        )
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `generate`).
    #[arg(long, env = "POLYWORLD_DATA_DIR")]
    data: PathBuf,
    /// Run output directory (checkpoints, logs, report).
    #[arg(long)]
    out: PathBuf,
    /// Detection-only pretraining epochs.
    #[arg(long, default_value_t = 2)]
    epochs_det: usize,
    /// Full-loss epochs.
    #[arg(long, default_value_t = 2)]
    epochs_full: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Held-out scenes at the end of the dataset.
    #[arg(long, default_value_t = 200)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// GT matching cap (pixels).
    #[arg(long, default_value_t = 3.0)]
    cap_px: f64,
    /// Greedy nearest-first GT matching instead of optimal assignment.
    #[arg(long, default_value_t = false)]
    greedy_matching: bool,
    /// Cap steps per epoch (subsample of the shuffled order).
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Average the detection loss instead of summing.
    #[arg(long, default_value_t = false)]
    mean_detection: bool,
    /// Combine rendered masks by elementwise max instead of clamped sum.
    #[arg(long, default_value_t = false)]
    raster_max_combine: bool,
    /// Loss weights det,match,angle,seg.
    #[arg(long, default_value = "1,1,1,1")]
    loss_weights: String,
    /// Resume from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the model config (key = value) to this path as well.
    #[arg(long)]
    emit_model_config: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Model or training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to run on.
    #[arg(long, env = "POLYWORLD_DATA_DIR")]
    data: PathBuf,
    /// Output directory for GeoJSON + SVG.
    #[arg(long)]
    out: PathBuf,
    /// Ignore refinement offsets (ablation).
    #[arg(long, default_value_t = false)]
    no_offset: bool,
    /// Score matrix selection: both | clock | count (ablation).
    #[arg(long, default_value = "both")]
    score: String,
    /// Debug oracle: seed vertex slots with ground-truth corners.
    #[arg(long, default_value_t = false)]
    debug_gt_corners: bool,
    /// Only process the first K scenes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of per-scene GeoJSON predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory with ground truth.
    #[arg(long, env = "POLYWORLD_DATA_DIR")]
    data: PathBuf,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Binary entry point; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn parse_shapes(spec: &str) -> Result<Vec<ShapeFamily>> {
    spec.split(',')
        .map(|s| s.trim().parse::<ShapeFamily>())
        .collect()
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let config = SynthConfig {
        width: args.size,
        height: args.size,
        buildings_min: args.buildings_min,
        buildings_max: args.buildings_max,
        shapes: parse_shapes(&args.shapes)?,
        noise_sigma: args.noise,
        margin_px: 2.0,
        heatmap_dilation: args.heatmap_dilation,
    };
    eprintln!(
        "generate: scenes={} size={} buildings={}..={} shapes={} noise={} seed={}",
        args.scenes,
        args.size,
        args.buildings_min,
        args.buildings_max,
        args.shapes,
        args.noise,
        args.seed
    );
    let scenes: Vec<Scene> = (0..args.scenes as u64)
        .map(|i| generate_scene(&config, args.seed.wrapping_add(i)))
        .collect();
    let failures: usize = scenes.iter().map(|s| s.placement_failures).sum();
    if failures > 0 {
        eprintln!("generate: {failures} placements failed; affected scenes hold fewer buildings");
    }
    let manifest = write_dataset(&args.out, &scenes, &config, args.seed)?;
    eprintln!(
        "generate: wrote {} scenes to {} (hash {})",
        manifest.scene_count,
        args.out.display(),
        &manifest.dataset_hash[..16]
    );
    Ok(())
}

fn parse_weights(spec: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("bad --loss-weights: {e}")))?;
    if parts.len() != 4 {
        return Err(Error::Parse("--loss-weights needs 4 values".into()));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    eprintln!("train: {} seed={} lr={}", args.hyper.header(), args.seed, args.lr);
    let scenes = load_dataset(&args.data)?;
    if scenes.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            eprintln!("train: resuming from {}", path.display());
            Trainer::resume(path)?
        }
        None => {
            let config = TrainConfig {
                model: args.hyper.model_config(args.seed)?,
                loss: LossConfigMirror {
                    omega: args.hyper.omega,
                    sigma: args.hyper.sigma,
                    lambda: args.hyper.lambda,
                    weights: parse_weights(&args.loss_weights)?,
                    mean_detection: args.mean_detection,
                    raster_max_combine: args.raster_max_combine,
                },
                epochs_detection: args.epochs_det,
                epochs_full: args.epochs_full,
                learning_rate: args.lr,
                holdout: args.holdout,
                seed: args.seed,
                cap_px: args.cap_px,
                greedy_matching: args.greedy_matching,
                steps_per_epoch: args.steps_per_epoch,
                checkpoint_every_epochs: 1,
            };
            Trainer::new(config)?
        }
    };
    if let Some(path) = &args.emit_model_config {
        std::fs::write(path, trainer.model.config.to_key_values())?;
    }
    let summary = run_training(&mut trainer, &scenes, &args.out, false)?;
    eprintln!(
        "train: finished {} epochs; final step losses det={:.4} match={:.4} angle={:.4} seg={:.4}",
        summary.epochs_run,
        summary.final_losses.detection,
        summary.final_losses.matching,
        summary.final_losses.angle,
        summary.final_losses.segmentation,
    );
    Ok(())
}

fn score_mode(spec: &str) -> Result<ScoreMode> {
    spec.parse()
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    eprintln!(
        "infer: checkpoint={} score={} no_offset={} debug_gt_corners={}",
        args.checkpoint.display(),
        args.score,
        args.no_offset,
        args.debug_gt_corners
    );
    let scenes = load_dataset(&args.data)?;
    let limit = args.limit.unwrap_or(scenes.len());
    std::fs::create_dir_all(&args.out)?;
    for scene in scenes.iter().take(limit) {
        let opts = ForwardOptions {
            score_mode: score_mode(&args.score)?,
            disable_offsets: args.no_offset,
            sinkhorn_iterations: None,
            override_positions: args.debug_gt_corners.then(|| scene.gt_corners()),
        };
        let image = Tensor::from_vec(
            vec![3, scene.height, scene.width],
            scene.image.clone(),
        )?;
        let inference = model.infer(&image, &opts)?;
        let stem = format!("scene_{:06}", scene.id);
        let geojson = export_geojson(
            &inference.polygons,
            Some(&inference.confidences),
            scene.width,
            scene.height,
        )?;
        std::fs::write(args.out.join(format!("{stem}.geojson")), geojson)?;
        let png_path = args.data.join("images").join(format!("{stem}.png"));
        let png_bytes = std::fs::read(&png_path).unwrap_or_default();
        let svg = svg::polygon_overlay_svg(
            &png_bytes,
            scene.width,
            scene.height,
            &inference.polygons,
            &inference.confidences,
        );
        std::fs::write(args.out.join(format!("{stem}.svg")), svg)?;
    }
    eprintln!("infer: wrote {} predictions to {}", limit, args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scenes = load_dataset(&args.data)?;
    if scenes.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let (h, w) = (scenes[0].height, scenes[0].width);
    let mut ids = Vec::new();
    let mut preds: Vec<(PolygonSet, Vec<f64>)> = Vec::new();
    let mut gts = Vec::new();
    for scene in &scenes {
        let path = args.pred.join(format!("scene_{:06}.geojson", scene.id));
        if !path.exists() {
            return Err(Error::contract(format!(
                "prediction missing for scene {}: {}",
                scene.id,
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        let (polys, confs) = import_geojson(&text, w, h)?;
        ids.push(scene.id);
        preds.push((polys, confs));
        gts.push(scene.gt_polygons.clone());
    }
    let report = EvalReport::evaluate(&ids, &preds, &gts, h, w)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    println!("{}", report.to_table());
    Ok(())
}
