//! Two-phase training loop: detection-only pretraining, then the complete
//! loss with teacher-forced refinement.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{Adam, AdamConfig, AdamSlot};
use crate::autodiff::{backward, checkpoint, Tape, Tensor};
use crate::data::{build_targets, Scene};
use crate::error::{Error, Result};
use crate::losses::{
    angle_loss, detection_loss, matching_loss, segmentation_loss, total_loss, LossConfig,
};
use crate::metrics::EvalReport;
use crate::model::{ForwardOptions, Model, ModelConfig, ScoreMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfigMirror,
    pub epochs_detection: usize,
    pub epochs_full: usize,
    pub learning_rate: f64,
    pub holdout: usize,
    pub seed: u64,
    /// GT-corner matching cap in pixels.
    pub cap_px: f64,
    pub greedy_matching: bool,
    /// Optional per-epoch step cap (subsamples the shuffled order).
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every_epochs: usize,
}

/// Serializable mirror of [`LossConfig`] so the train config can live in
/// checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfigMirror {
    pub omega: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub weights: [f64; 4],
    pub mean_detection: bool,
    pub raster_max_combine: bool,
}

impl Default for LossConfigMirror {
    fn default() -> Self {
        let l = LossConfig::default();
        LossConfigMirror {
            omega: l.omega,
            sigma: l.sigma,
            lambda: l.lambda,
            weights: l.weights,
            mean_detection: l.mean_detection,
            raster_max_combine: l.raster_max_combine,
        }
    }
}

impl LossConfigMirror {
    pub fn to_loss_config(&self) -> LossConfig {
        LossConfig {
            omega: self.omega,
            sigma: self.sigma,
            lambda: self.lambda,
            weights: self.weights,
            mean_detection: self.mean_detection,
            raster_max_combine: self.raster_max_combine,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfigMirror::default(),
            epochs_detection: 2,
            epochs_full: 2,
            learning_rate: 1e-3,
            holdout: 200,
            seed: 0,
            cap_px: 3.0,
            greedy_matching: false,
            steps_per_epoch: None,
            checkpoint_every_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub detection: f64,
    pub matching: f64,
    pub angle: f64,
    pub segmentation: f64,
    pub total: f64,
}

pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_losses: StepLosses,
    pub report: Option<EvalReport>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    params: Vec<(String, Tensor)>,
    adam: Adam,
    next_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.model.validate()?;
        config.loss.to_loss_config().validate()?;
        let model = Model::new(config.model.clone())?;
        let params = model.params();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let adam = Adam::new(
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
            &tensors,
        );
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            next_epoch: 0,
        })
    }

    /// Restore a trainer from a training checkpoint (weights, Adam moments,
    /// epoch counter). Hyperparameters come from the checkpoint metadata.
    pub fn resume(path: &Path) -> Result<Trainer> {
        let (entries, meta) = checkpoint::load(path)?;
        let config: TrainConfig = serde_json::from_value(
            meta.get("train_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing train_config in meta".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad train_config: {e}")))?;
        let next_epoch = meta
            .get("next_epoch")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing next_epoch in meta".into()))?
            as usize;
        let step_count = meta
            .get("adam_steps")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let mut trainer = Trainer::new(config)?;
        trainer.model.load_entries(&entries)?;
        let by_name: std::collections::HashMap<&str, &checkpoint::Entry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut slots = Vec::with_capacity(trainer.params.len());
        for (name, tensor) in &trainer.params {
            let m = by_name
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.m.{name}")))?;
            let v = by_name
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.v.{name}")))?;
            if m.data.len() != tensor.numel() || v.data.len() != tensor.numel() {
                return Err(Error::Checkpoint(format!("adam slot size mismatch for {name}")));
            }
            slots.push(AdamSlot {
                m: m.data.clone(),
                v: v.data.clone(),
            });
        }
        trainer.adam.restore(step_count, slots)?;
        trainer.next_epoch = next_epoch;
        Ok(trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<checkpoint::Entry> = self
            .params
            .iter()
            .map(|(name, t)| checkpoint::Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        for ((name, t), slot) in self.params.iter().zip(self.adam.slots()) {
            entries.push(checkpoint::Entry {
                name: format!("adam.m.{name}"),
                shape: t.shape().to_vec(),
                data: slot.m.clone(),
            });
            entries.push(checkpoint::Entry {
                name: format!("adam.v.{name}"),
                shape: t.shape().to_vec(),
                data: slot.v.clone(),
            });
        }
        let meta = serde_json::json!({
            "model_config": self.model.config,
            "train_config": self.config,
            "next_epoch": self.next_epoch,
            "adam_steps": self.adam.step_count,
        });
        checkpoint::save(path, &entries, meta)
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.config.epochs_detection + self.config.epochs_full
    }

    /// One optimization step on one scene. `full` enables the matching and
    /// refinement losses (phase 2).
    pub fn step(&mut self, scene: &Scene, full: bool) -> Result<StepLosses> {
        let (h, w) = (scene.height, scene.width);
        let image = Tensor::from_vec(vec![3, h, w], scene.image.clone())?;
        let loss_cfg = self.config.loss.to_loss_config();
        let tape = Tape::new();
        let watched_image = tape.watch(&image);
        let (features, heatmap) = self.model.backbone_forward(&watched_image, Some(&tape))?;
        let l_det = detection_loss(&heatmap, &scene.heatmap, loss_cfg.omega, loss_cfg.mean_detection)?;

        let mut out = StepLosses {
            detection: l_det.value(),
            ..StepLosses::default()
        };
        let total = if full {
            let peaks = {
                let hm = heatmap.to_vec();
                self.model.detect(&hm, h, w)
            };
            let (ordered, gt) = build_targets(scene, &peaks, self.config.cap_px, self.config.greedy_matching)?;
            let vertices = self.model.assemble_vertices(&features, &ordered, h, w)?;
            let refined = self.model.gnn_forward(&vertices, Some(&tape), false);
            let (_, soft) = self.model.score_and_assign(
                &refined,
                &vertices.valid,
                Some(&tape),
                ScoreMode::Both,
                self.model.config.sinkhorn_iterations,
            )?;
            let l_match = matching_loss(&soft, &gt.perm)?;
            let l_angle = angle_loss(
                &refined.positions,
                &gt.positions,
                &gt.rings,
                loss_cfg.sigma,
            )?;
            let l_seg = segmentation_loss(
                &refined.positions,
                &gt.rings,
                &gt.mask,
                h,
                w,
                &loss_cfg,
            )?;
            out.matching = l_match.value();
            out.angle = l_angle.loss.value();
            out.segmentation = l_seg.value();
            total_loss(&l_det, &l_match, &l_angle.loss, &l_seg, loss_cfg.weights)
        } else {
            l_det.mul_scalar(loss_cfg.weights[0])
        };
        out.total = total.value();
        if !out.total.is_finite() {
            return Err(Error::contract(format!(
                "non-finite loss on scene {}: {:?}",
                scene.id, out
            )));
        }
        backward(&total)?;
        let tensors: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        self.adam.step(&tensors)?;
        for t in &tensors {
            t.zero_grad();
        }
        Ok(out)
    }
}

/// Run the configured schedule over a dataset, writing per-step CSV logs,
/// per-epoch checkpoints, and a final holdout evaluation report.
pub fn run_training(
    trainer: &mut Trainer,
    scenes: &[Scene],
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let holdout = trainer.config.holdout.min(scenes.len());
    let (train_scenes, holdout_scenes) = scenes.split_at(scenes.len() - holdout);
    if train_scenes.is_empty() {
        return Err(Error::contract("no training scenes after holdout split"));
    }

    let log_path = out_dir.join("loss_log.csv");
    let fresh_log = trainer.next_epoch == 0 || !log_path.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if fresh_log {
        writeln!(log, "epoch,phase,step,scene,detection,matching,angle,segmentation,total")?;
    }

    let total_epochs = trainer.total_epochs();
    let mut final_losses = StepLosses::default();
    let start = std::time::Instant::now();
    while trainer.next_epoch < total_epochs {
        let epoch = trainer.next_epoch;
        let full = epoch >= trainer.config.epochs_detection;
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            trainer
                .config
                .seed
                .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);
        if let Some(cap) = trainer.config.steps_per_epoch {
            order.truncate(cap);
        }
        let mut running = StepLosses::default();
        for (step, &idx) in order.iter().enumerate() {
            let scene = &train_scenes[idx];
            let losses = trainer.step(scene, full).map_err(|e| {
                // Diagnostic dump before aborting on a bad batch.
                let dump = out_dir.join("abort_dump.json");
                let _ = std::fs::write(
                    &dump,
                    serde_json::json!({
                        "epoch": epoch,
                        "step": step,
                        "scene": scene.id,
                        "error": e.to_string(),
                    })
                    .to_string(),
                );
                e
            })?;
            writeln!(
                log,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                epoch,
                if full { "full" } else { "detection" },
                step,
                scene.id,
                losses.detection,
                losses.matching,
                losses.angle,
                losses.segmentation,
                losses.total
            )?;
            let blend = 0.02;
            running.detection += blend * (losses.detection - running.detection);
            running.matching += blend * (losses.matching - running.matching);
            running.angle += blend * (losses.angle - running.angle);
            running.segmentation += blend * (losses.segmentation - running.segmentation);
            running.total += blend * (losses.total - running.total);
            if !quiet && (step + 1) % 200 == 0 {
                eprintln!(
                    "epoch {epoch} [{}] step {}/{} avg total {:.3} ({:.1}s)",
                    if full { "full" } else { "det" },
                    step + 1,
                    order.len(),
                    running.total,
                    start.elapsed().as_secs_f64()
                );
            }
            final_losses = losses;
        }
        trainer.next_epoch += 1;
        if trainer.next_epoch % trainer.config.checkpoint_every_epochs == 0
            || trainer.next_epoch == total_epochs
        {
            trainer.save_checkpoint(&out_dir.join(format!("checkpoint_epoch{:03}.pwck", trainer.next_epoch)))?;
            trainer.save_checkpoint(&out_dir.join("checkpoint_latest.pwck"))?;
        }
        log.flush()?;
    }

    let report = if holdout_scenes.is_empty() {
        None
    } else {
        let report = evaluate_model(&trainer.model, holdout_scenes, &ForwardOptions::default())?;
        std::fs::write(
            out_dir.join("eval_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        if !quiet {
            eprintln!("{}", report.to_table());
        }
        Some(report)
    };
    Ok(TrainSummary {
        epochs_run: trainer.next_epoch,
        final_losses,
        report,
    })
}

/// Run inference over scenes and evaluate against their ground truth.
pub fn evaluate_model(
    model: &Model,
    scenes: &[Scene],
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::contract("no scenes to evaluate"));
    }
    let (h, w) = (scenes[0].height, scenes[0].width);
    let mut ids = Vec::with_capacity(scenes.len());
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        if scene.height != h || scene.width != w {
            return Err(Error::contract("mixed image sizes in evaluation"));
        }
        let image = Tensor::from_vec(vec![3, h, w], scene.image.clone())?;
        let inference = model.infer(&image, opts)?;
        ids.push(scene.id);
        preds.push((inference.polygons, inference.confidences));
        gts.push(scene.gt_polygons.clone());
    }
    EvalReport::evaluate(&ids, &preds, &gts, h, w)
}
