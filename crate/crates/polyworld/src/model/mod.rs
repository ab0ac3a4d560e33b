//! The trainable network: backbone, vertex detection, descriptor sampling,
//! attentional graph network, pairwise scoring, and the assignment stage.

mod backbone;
mod gnn;
mod nms;

pub use backbone::{Backbone, BackboneConfig};
pub use gnn::{apply_offsets, Gnn, GnnConfig};
pub use nms::{nms_topk, Peak};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{combine_scores, harden, hungarian, sinkhorn, ScoreMatrix, SoftAssignment};
use crate::autodiff::{checkpoint, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{decode_permutation, PermutationMatrix, Point, PolygonSet};

/// Additive diagonal score for padding sentinels, forcing them to match
/// themselves so constraint ③ discards them.
pub const SENTINEL_DIAG_BOOST: f64 = 1e3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gnn: GnnConfig,
    /// Fixed vertex slot count N per image.
    pub vertex_count: usize,
    /// NMS window size (odd).
    pub nms_kernel: usize,
    /// Sinkhorn iterations T used during training.
    pub sinkhorn_iterations: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            gnn: GnnConfig::default(),
            vertex_count: 64,
            nms_kernel: 3,
            sinkhorn_iterations: 100,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gnn.validate()?;
        if self.backbone.descriptor_dim != self.gnn.dim {
            return Err(Error::contract(format!(
                "descriptor dim {} must equal gnn dim {}",
                self.backbone.descriptor_dim, self.gnn.dim
            )));
        }
        if self.vertex_count == 0 {
            return Err(Error::contract("vertex_count must be positive"));
        }
        if self.nms_kernel % 2 == 0 {
            return Err(Error::contract("nms_kernel must be odd"));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::contract("sinkhorn_iterations must be >= 1"));
        }
        Ok(())
    }

    /// Plain-text `key = value` serialization.
    pub fn to_key_values(&self) -> String {
        let ch = self
            .backbone
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "channels = {ch}\n\
             descriptor_dim = {}\n\
             gnn_layers = {}\n\
             gnn_heads = {}\n\
             offset_gamma = {}\n\
             residual_update = {}\n\
             vertex_count = {}\n\
             nms_kernel = {}\n\
             sinkhorn_iterations = {}\n\
             seed = {}\n",
            self.backbone.descriptor_dim,
            self.gnn.layers,
            self.gnn.heads,
            self.gnn.offset_gamma,
            self.gnn.residual_update,
            self.vertex_count,
            self.nms_kernel,
            self.sinkhorn_iterations,
            self.seed,
        )
    }

    /// Parse the `key = value` format; unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::Parse(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            match key {
                "channels" => {
                    cfg.backbone.channels = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?;
                }
                "descriptor_dim" => {
                    cfg.backbone.descriptor_dim = value.parse().map_err(|e| bad(&e))?;
                    cfg.gnn.dim = cfg.backbone.descriptor_dim;
                }
                "gnn_layers" => cfg.gnn.layers = value.parse().map_err(|e| bad(&e))?,
                "gnn_heads" => cfg.gnn.heads = value.parse().map_err(|e| bad(&e))?,
                "offset_gamma" => cfg.gnn.offset_gamma = value.parse().map_err(|e| bad(&e))?,
                "residual_update" => cfg.gnn.residual_update = value.parse().map_err(|e| bad(&e))?,
                "vertex_count" => cfg.vertex_count = value.parse().map_err(|e| bad(&e))?,
                "nms_kernel" => cfg.nms_kernel = value.parse().map_err(|e| bad(&e))?,
                "sinkhorn_iterations" => {
                    cfg.sinkhorn_iterations = value.parse().map_err(|e| bad(&e))?
                }
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// N detected vertex slots: positions, confidences, validity, and the
/// sampled visual descriptors.
pub struct VertexSet {
    /// Normalized (x, y) per slot.
    pub positions: Vec<(f64, f64)>,
    /// Heatmap pixel (row, col) each slot was sampled at.
    pub pixels: Vec<(usize, usize)>,
    pub confidences: Vec<f64>,
    pub valid: Vec<bool>,
    pub valid_count: usize,
    /// N×D visual descriptors gathered from the feature map.
    pub descriptors: Tensor,
}

/// Output of the attention stage.
pub struct RefinedVertexSet {
    /// p̂ = p + γ·t, N×2 normalized coordinates.
    pub positions: Tensor,
    /// Matching descriptors m, N×D.
    pub matching: Tensor,
    /// Offsets t, N×2 in [-1, 1].
    pub offsets: Tensor,
}

impl RefinedVertexSet {
    pub fn positions_vec(&self) -> Vec<(f64, f64)> {
        let d = self.positions.data();
        (0..self.positions.rows())
            .map(|i| (d[i * 2], d[i * 2 + 1]))
            .collect()
    }

    pub fn positions_points(&self) -> Vec<Point> {
        let d = self.positions.data();
        (0..self.positions.rows())
            .map(|i| Point::new(d[i * 2], d[i * 2 + 1]))
            .collect()
    }
}

/// Which score matrices feed the assignment (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    #[default]
    Both,
    ClockOnly,
    CountOnly,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ScoreMode::Both),
            "clock" => Ok(ScoreMode::ClockOnly),
            "count" => Ok(ScoreMode::CountOnly),
            other => Err(Error::Parse(format!("unknown score mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub score_mode: ScoreMode,
    /// When true the offset head output is ignored (γ forced to 0),
    /// reproducing the offset-off ablation.
    pub disable_offsets: bool,
    /// Override the Sinkhorn iteration count (defaults to the config T).
    pub sinkhorn_iterations: Option<usize>,
    /// Debug mode: take vertex positions from this list instead of NMS
    /// peaks (confidence 1.0 each); remaining slots become sentinels.
    pub override_positions: Option<Vec<(f64, f64)>>,
}

pub struct ForwardOutput {
    pub heatmap: Tensor,
    pub features: Tensor,
    pub vertices: VertexSet,
    pub refined: RefinedVertexSet,
    /// Combined (mode-dependent) scores with sentinel diagonal boost.
    pub scores: ScoreMatrix,
    pub soft: SoftAssignment,
}

/// Inference result after Hungarian hardening and permutation decoding.
pub struct Inference {
    pub polygons: PolygonSet,
    /// Mean member-vertex confidence per polygon.
    pub confidences: Vec<f64>,
    pub permutation: PermutationMatrix,
    pub vertex_positions: Vec<(f64, f64)>,
    pub vertex_count_used: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub gnn: Gnn,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let gnn = Gnn::new(config.gnn.clone(), &mut rng)?;
        Ok(Model {
            config,
            backbone,
            gnn,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.backbone.params();
        out.extend(self.gnn.params());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<checkpoint::Entry> = self
            .params()
            .into_iter()
            .map(|(name, t)| checkpoint::Entry {
                name,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        let meta = serde_json::json!({ "model_config": self.config });
        checkpoint::save(path, &entries, meta)
    }

    /// Load weights (and config) from a checkpoint written by [`Model::save`]
    /// or by the trainer.
    pub fn load(path: &Path) -> Result<Model> {
        let (entries, meta) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing model_config in meta".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad model_config: {e}")))?;
        let model = Model::new(config)?;
        model.load_entries(&entries)?;
        Ok(model)
    }

    pub fn load_entries(&self, entries: &[checkpoint::Entry]) -> Result<()> {
        let params = self.params();
        let by_name: std::collections::HashMap<&str, &checkpoint::Entry> = entries
            .iter()
            .filter(|e| !e.name.starts_with("adam.") && !e.name.starts_with("train."))
            .map(|e| (e.name.as_str(), e))
            .collect();
        for (name, tensor) in &params {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if entry.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': shape {:?} != expected {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(&entry.data);
        }
        Ok(())
    }

    /// Backbone pass: `[3, H, W]` image → (features `[D, H, W]`, heatmap
    /// `[H, W]` through a sigmoid).
    pub fn backbone_forward(
        &self,
        image: &Tensor,
        tape: Option<&Tape>,
    ) -> Result<(Tensor, Tensor)> {
        self.backbone.forward(image, tape)
    }

    /// NMS + top-N peak selection on a heatmap buffer.
    pub fn detect(&self, heatmap: &[f64], h: usize, w: usize) -> Vec<Peak> {
        nms_topk(
            heatmap,
            h,
            w,
            self.config.vertex_count,
            self.config.nms_kernel,
        )
    }

    /// Sample descriptors at peak pixels and assemble the vertex set.
    /// Peak order defines slot order (callers may have re-sorted peaks for
    /// ground-truth index alignment).
    pub fn assemble_vertices(
        &self,
        features: &Tensor,
        peaks: &[Peak],
        h: usize,
        w: usize,
    ) -> Result<VertexSet> {
        if peaks.len() != self.config.vertex_count {
            return Err(Error::contract(format!(
                "expected {} peaks, got {}",
                self.config.vertex_count,
                peaks.len()
            )));
        }
        for p in peaks {
            if p.row >= h || p.col >= w {
                return Err(Error::contract(format!(
                    "peak ({}, {}) outside {h}x{w} image",
                    p.row, p.col
                )));
            }
        }
        let pixels: Vec<(usize, usize)> = peaks.iter().map(|p| (p.row, p.col)).collect();
        let positions: Vec<(f64, f64)> = peaks
            .iter()
            .map(|p| pixel_center(p.row, p.col, h, w))
            .collect();
        let descriptors = features.gather_pixels(&pixels);
        Ok(VertexSet {
            positions,
            pixels,
            confidences: peaks.iter().map(|p| p.confidence).collect(),
            valid: peaks.iter().map(|p| p.valid).collect(),
            valid_count: peaks.iter().filter(|p| p.valid).count(),
            descriptors,
        })
    }

    /// Encoder + attention + heads. `disable_offsets` forces p̂ = p.
    pub fn gnn_forward(
        &self,
        vertices: &VertexSet,
        tape: Option<&Tape>,
        disable_offsets: bool,
    ) -> RefinedVertexSet {
        let n = vertices.positions.len();
        let pos_flat: Vec<f64> = vertices
            .positions
            .iter()
            .flat_map(|&(x, y)| [x, y])
            .collect();
        let positions = Tensor::from_vec(vec![n, 2], pos_flat).unwrap();
        let x0 = self.gnn.encode(&vertices.descriptors, &positions, tape);
        let x = self.gnn.attention_forward(&x0, tape);
        let matching = self.gnn.matching_head(&x, tape);
        let offsets = self.gnn.offset_head(&x, tape);
        let gamma = if disable_offsets {
            0.0
        } else {
            self.gnn.config.offset_gamma
        };
        let refined = apply_offsets(&positions, &offsets, gamma);
        RefinedVertexSet {
            positions: refined,
            matching,
            offsets,
        }
    }

    /// Pairwise scores, mode selection, sentinel boost, Sinkhorn.
    pub fn score_and_assign(
        &self,
        refined: &RefinedVertexSet,
        valid: &[bool],
        tape: Option<&Tape>,
        mode: ScoreMode,
        sinkhorn_iterations: usize,
    ) -> Result<(ScoreMatrix, SoftAssignment)> {
        let n = refined.matching.rows();
        let (sc, sn) = self.gnn.pairwise_scores(&refined.matching, tape);
        let combined = match mode {
            ScoreMode::Both => combine_scores(&ScoreMatrix::new(sc)?, &ScoreMatrix::new(sn)?)?,
            ScoreMode::ClockOnly => ScoreMatrix::new(sc)?,
            ScoreMode::CountOnly => ScoreMatrix::new(sn.transpose())?,
        };
        // Padding sentinels must land on the diagonal.
        let mut boost = vec![0.0; n * n];
        for (i, &ok) in valid.iter().enumerate() {
            if !ok {
                boost[i * n + i] = SENTINEL_DIAG_BOOST;
            }
        }
        let boosted = ScoreMatrix::new(
            combined
                .tensor()
                .add(&Tensor::from_vec(vec![n, n], boost).unwrap()),
        )?;
        let soft = sinkhorn(&boosted, sinkhorn_iterations)?;
        Ok((boosted, soft))
    }

    /// Full pipeline composition on one image.
    pub fn forward_full(
        &self,
        image: &Tensor,
        tape: Option<&Tape>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (features, heatmap) = self.backbone_forward(image, tape)?;
        let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
        let peaks = match &opts.override_positions {
            None => self.detect(&heatmap.data(), h, w),
            Some(list) => {
                if list.len() > self.config.vertex_count {
                    return Err(Error::contract(format!(
                        "{} override positions exceed {} slots",
                        list.len(),
                        self.config.vertex_count
                    )));
                }
                let mut peaks: Vec<Peak> = list
                    .iter()
                    .map(|&(x, y)| {
                        let (row, col) = nearest_pixel(x, y, h, w);
                        Peak {
                            row,
                            col,
                            confidence: 1.0,
                            valid: true,
                        }
                    })
                    .collect();
                while peaks.len() < self.config.vertex_count {
                    peaks.push(Peak {
                        row: 0,
                        col: 0,
                        confidence: 0.0,
                        valid: false,
                    });
                }
                peaks
            }
        };
        let vertices = self.assemble_vertices(&features, &peaks, h, w)?;
        let refined = self.gnn_forward(&vertices, tape, opts.disable_offsets);
        let iterations = opts
            .sinkhorn_iterations
            .unwrap_or(self.config.sinkhorn_iterations);
        let (scores, soft) =
            self.score_and_assign(&refined, &vertices.valid, tape, opts.score_mode, iterations)?;
        Ok(ForwardOutput {
            heatmap,
            features,
            vertices,
            refined,
            scores,
            soft,
        })
    }

    /// Inference: forward pass, exact Hungarian assignment, permutation
    /// decoding into polygons.
    pub fn infer(&self, image: &Tensor, opts: &ForwardOptions) -> Result<Inference> {
        let out = self.forward_full(image, None, opts)?;
        let perm = hungarian(&out.scores);
        // The soft assignment is already computed; keep the argmax path
        // exercised as a consistency probe in debug builds.
        debug_assert_eq!(harden(&out.soft).mapping.len(), perm.size());
        let positions = out.refined.positions_points();
        let polygons = decode_permutation(&positions, &perm, 3)?;
        let confidences: Vec<f64> = polygons
            .sources()
            .iter()
            .map(|src| {
                let s: f64 = src.iter().map(|&i| out.vertices.confidences[i]).sum();
                s / src.len().max(1) as f64
            })
            .collect();
        Ok(Inference {
            polygons,
            confidences,
            permutation: perm,
            vertex_positions: out.refined.positions_vec(),
            vertex_count_used: out.vertices.valid_count,
        })
    }
}

/// Normalized coordinates of a pixel center.
pub fn pixel_center(row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    ((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64)
}

/// Nearest pixel to a normalized coordinate, clamped into the image.
pub fn nearest_pixel(x: f64, y: f64, h: usize, w: usize) -> (usize, usize) {
    let col = ((x * w as f64 - 0.5).round().max(0.0) as usize).min(w - 1);
    let row = ((y * h as f64 - 0.5).round().max(0.0) as usize).min(h - 1);
    (row, col)
}

/// `[H, W, 3]` interleaved buffer → `[3, H, W]` tensor.
pub fn image_tensor_from_hwc(hwc: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if hwc.len() != h * w * 3 {
        return Err(Error::contract("image buffer size mismatch"));
    }
    let mut chw = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                chw[ch * h * w + r * w + c] = hwc[(r * w + c) * 3 + ch];
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], chw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: vec![4, 6],
                descriptor_dim: 8,
            },
            gnn: GnnConfig {
                layers: 2,
                heads: 2,
                dim: 8,
                offset_gamma: 0.05,
                residual_update: false,
            },
            vertex_count: 12,
            nms_kernel: 3,
            sinkhorn_iterations: 20,
            seed: 7,
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_full_shape_contract() {
        let model = Model::new(tiny_config()).unwrap();
        let img = test_image(16, 16, 1);
        let out = model
            .forward_full(&img, None, &ForwardOptions::default())
            .unwrap();
        assert_eq!(out.heatmap.shape(), &[16, 16]);
        assert_eq!(out.features.shape(), &[8, 16, 16]);
        assert_eq!(out.vertices.positions.len(), 12);
        assert_eq!(out.refined.positions.shape(), &[12, 2]);
        assert_eq!(out.refined.matching.shape(), &[12, 8]);
        assert_eq!(out.scores.n(), 12);
        assert_eq!(out.soft.n(), 12);
    }

    #[test]
    fn forward_is_deterministic() {
        let img = test_image(16, 16, 2);
        let run = || {
            let model = Model::new(tiny_config()).unwrap();
            let out = model
                .forward_full(&img, None, &ForwardOptions::default())
                .unwrap();
            (out.heatmap.to_vec(), out.soft.probabilities().to_vec())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn offsets_disabled_keeps_raw_positions() {
        let model = Model::new(tiny_config()).unwrap();
        let img = test_image(16, 16, 3);
        let out = model
            .forward_full(
                &img,
                None,
                &ForwardOptions {
                    disable_offsets: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let refined = out.refined.positions_vec();
        for (a, b) in refined.iter().zip(&out.vertices.positions) {
            assert_eq!(a.0.to_bits(), b.0.to_bits());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
    }

    #[test]
    fn refined_positions_within_gamma() {
        let model = Model::new(tiny_config()).unwrap();
        let img = test_image(16, 16, 4);
        let out = model
            .forward_full(&img, None, &ForwardOptions::default())
            .unwrap();
        let gamma = model.config.gnn.offset_gamma;
        for (r, p) in out
            .refined
            .positions_vec()
            .iter()
            .zip(&out.vertices.positions)
        {
            assert!((r.0 - p.0).abs() <= gamma + 1e-12);
            assert!((r.1 - p.1).abs() <= gamma + 1e-12);
        }
    }

    #[test]
    fn sentinels_forced_to_diagonal() {
        let model = Model::new(tiny_config()).unwrap();
        let img = test_image(16, 16, 5);
        let out = model
            .forward_full(
                &img,
                None,
                &ForwardOptions {
                    // Only 3 override vertices; the other 9 slots are
                    // sentinels and must be discarded via the diagonal.
                    override_positions: Some(vec![(0.2, 0.2), (0.8, 0.3), (0.5, 0.8)]),
                    ..Default::default()
                },
            )
            .unwrap();
        let perm = hungarian(&out.scores);
        for i in 3..12 {
            assert_eq!(perm.next_of(i), i, "sentinel {i} must self-match");
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_weights() {
        let dir = std::env::temp_dir().join("pw_model_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.pwck");
        let model = Model::new(tiny_config()).unwrap();
        let img = test_image(16, 16, 6);
        let before = model
            .forward_full(&img, None, &ForwardOptions::default())
            .unwrap()
            .heatmap
            .to_vec();
        model.save(&path).unwrap();

        let restored = Model::load(&path).unwrap();
        let after = restored
            .forward_full(&img, None, &ForwardOptions::default())
            .unwrap()
            .heatmap
            .to_vec();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn key_value_config_roundtrip_and_unknown_key() {
        let cfg = tiny_config();
        let text = cfg.to_key_values();
        let back = ModelConfig::from_key_values(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(ModelConfig::from_key_values("bogus = 3\n").is_err());
    }
}
