//! Training losses: weighted detection cross-entropy, matching NLL through
//! the Sinkhorn assignment, corner-angle difference, and a soft-IoU
//! segmentation loss on differentiably rasterized polygons.
//!
//! The refinement losses are teacher-forced: rings come from the
//! ground-truth permutation applied to slot indices, so gradients reach the
//! network only through the continuous refined positions.

use crate::assignment::SoftAssignment;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{interior_angle, PermutationMatrix, Point};

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Positive-class weight ω in the detection loss.
    pub omega: f64,
    /// Angle sharpness σ.
    pub sigma: f64,
    /// Rasterizer contour smoothness λ (pixel units).
    pub lambda: f64,
    /// Linear combination weights for (detection, matching, angle,
    /// segmentation).
    pub weights: [f64; 4],
    /// Average the detection loss over pixels instead of summing.
    pub mean_detection: bool,
    /// Combine per-polygon masks with an elementwise max instead of a
    /// clamped sum.
    pub raster_max_combine: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega: 100.0,
            sigma: 10.0,
            lambda: 1e3,
            weights: [1.0; 4],
            mean_detection: false,
            raster_max_combine: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.sigma > 0.0 && self.lambda > 0.0) {
            return Err(Error::contract("loss constants must be positive"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Weighted binary cross-entropy over all pixels, summed (not averaged)
/// unless `mean` is set. Probabilities are clamped to [1e-7, 1-1e-7].
pub fn detection_loss(y: &Tensor, y_bar: &[f64], omega: f64, mean: bool) -> Result<Tensor> {
    if y.numel() != y_bar.len() {
        return Err(Error::contract(format!(
            "heatmap has {} pixels, target has {}",
            y.numel(),
            y_bar.len()
        )));
    }
    let shape = y.shape().to_vec();
    let target = Tensor::from_vec(shape, y_bar.to_vec())?;
    let yc = y.clamp(1e-7, 1.0 - 1e-7);
    let pos = target.mul(&yc.log()).sum_all().mul_scalar(-omega);
    let one_minus_t = target.neg().add_scalar(1.0);
    let one_minus_y = yc.neg().add_scalar(1.0);
    let neg = one_minus_t
        .mul(&one_minus_y.log())
        .sum_all()
        .mul_scalar(-1.0);
    let loss = pos.add(&neg);
    Ok(if mean {
        loss.mul_scalar(1.0 / y_bar.len() as f64)
    } else {
        loss
    })
}

/// Negative log-likelihood of the ground-truth matches (including diagonal
/// discard entries): `-Σ P̄_{i,j} log P_{i,j}`, evaluated in log space.
pub fn matching_loss(p: &SoftAssignment, p_bar: &PermutationMatrix) -> Result<Tensor> {
    if p.n() != p_bar.size() {
        return Err(Error::contract(format!(
            "assignment size {} != permutation size {}",
            p.n(),
            p_bar.size()
        )));
    }
    let n = p.n();
    let mask = Tensor::from_vec(vec![n, n], p_bar.to_dense())?;
    Ok(mask.mul(p.log_probabilities()).sum_all().mul_scalar(-1.0))
}

pub struct AngleLoss {
    pub loss: Tensor,
    pub triples: usize,
    /// Degenerate triples (repeated point in either polygon set) that were
    /// skipped.
    pub skipped: usize,
}

/// Corner-angle difference loss: `Σ_k Σ_(u→v→w) 1 - exp(-σ|Δ|)` over all
/// consecutive vertex triples of every ring, angles in radians.
///
/// `rings` index into the rows of `pred_positions` and into `gt_positions`;
/// both polygon sets share index correspondence (teacher forcing).
pub fn angle_loss(
    pred_positions: &Tensor,
    gt_positions: &[(f64, f64)],
    rings: &[Vec<usize>],
    sigma: f64,
) -> Result<AngleLoss> {
    if pred_positions.shape().len() != 2 || pred_positions.cols() != 2 {
        return Err(Error::contract("pred positions must be N×2"));
    }
    let n = pred_positions.rows();
    if gt_positions.len() != n {
        return Err(Error::contract("gt position count mismatch"));
    }
    let pred_data = pred_positions.to_vec();
    let mut total: Option<Tensor> = None;
    let mut triples = 0usize;
    let mut skipped = 0usize;
    for ring in rings {
        let k = ring.len();
        if k < 3 {
            return Err(Error::contract("ring shorter than 3 in angle loss"));
        }
        for t in 0..k {
            let u = ring[(t + k - 1) % k];
            let v = ring[t];
            let w = ring[(t + 1) % k];
            let gp = |i: usize| Point::new(gt_positions[i].0, gt_positions[i].1);
            let pp = |i: usize| Point::new(pred_data[i * 2], pred_data[i * 2 + 1]);
            let gt_angle = match interior_angle(gp(u), gp(v), gp(w)) {
                Ok(a) => a,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            if pp(u) == pp(v) || pp(w) == pp(v) {
                skipped += 1;
                continue;
            }
            // Differentiable unsigned angle at v: atan2(|cross|, dot).
            let rows = pred_positions.gather_rows(&[u, v, w]);
            let a = rows.narrow(0, 0, 1).sub(&rows.narrow(0, 1, 1));
            let b = rows.narrow(0, 2, 1).sub(&rows.narrow(0, 1, 1));
            let (ax, ay) = (a.narrow(1, 0, 1), a.narrow(1, 1, 1));
            let (bx, by) = (b.narrow(1, 0, 1), b.narrow(1, 1, 1));
            let cross = ax.mul(&by).sub(&ay.mul(&bx));
            let dot = ax.mul(&bx).add(&ay.mul(&by));
            let angle = cross.abs().atan2(&dot);
            let term = angle
                .add_scalar(-gt_angle)
                .abs()
                .mul_scalar(-sigma)
                .exp()
                .neg()
                .add_scalar(1.0)
                .reshape(vec![1]);
            triples += 1;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(&term),
            });
        }
    }
    Ok(AngleLoss {
        loss: total.unwrap_or_else(|| Tensor::scalar(0.0)),
        triples,
        skipped,
    })
}

/// Differentiable polygon rasterization: the soft winding number
///
/// `W(x) = Σ_(u→v) [λ·det / (1 + |λ·det|)] · ∠(p̂_u, x, p̂_v)`
///
/// evaluated at every pixel center in pixel units, normalized by ±2π
/// (sign from the ring orientation so either traversal direction renders),
/// clamped to [0, 1]. Returns an `[H, W]` tensor differentiable w.r.t. the
/// ring's positions.
pub fn soft_rasterize(
    positions: &Tensor,
    ring: &[usize],
    h: usize,
    w: usize,
    lambda: f64,
) -> Tensor {
    assert!(ring.len() >= 3, "contract violation: ring needs >= 3 vertices");
    assert!(lambda > 0.0, "contract violation: lambda must be positive");
    let e = ring.len();
    let hw = h * w;

    // Ring orientation from current data decides the ±2π normalization.
    let pd = positions.data();
    let mut shoelace = 0.0;
    for t in 0..e {
        let (i, j) = (ring[t], ring[(t + 1) % e]);
        let (xi, yi) = (pd[i * 2] * w as f64, pd[i * 2 + 1] * h as f64);
        let (xj, yj) = (pd[j * 2] * w as f64, pd[j * 2 + 1] * h as f64);
        shoelace += xi * yj - xj * yi;
    }
    drop(pd);
    let sign = if shoelace >= 0.0 { 1.0 } else { -1.0 };

    // Edge endpoints in pixel units.
    let scale = Tensor::from_vec(
        vec![e, 2],
        std::iter::repeat([w as f64, h as f64])
            .take(e)
            .flatten()
            .collect(),
    )
    .unwrap();
    let next: Vec<usize> = (0..e).map(|t| ring[(t + 1) % e]).collect();
    let u = positions.gather_rows(ring).mul(&scale);
    let v = positions.gather_rows(&next).mul(&scale);

    // Pixel-center grids, broadcast to E×HW through rank-1 products.
    let mut px = vec![0.0; hw];
    let mut py = vec![0.0; hw];
    for r in 0..h {
        for c in 0..w {
            px[r * w + c] = c as f64 + 0.5;
            py[r * w + c] = r as f64 + 0.5;
        }
    }
    let px = Tensor::from_vec(vec![1, hw], px).unwrap();
    let py = Tensor::from_vec(vec![1, hw], py).unwrap();
    let ones_e = Tensor::full(vec![e, 1], 1.0);
    let ones_hw = Tensor::full(vec![1, hw], 1.0);
    let grid_x = ones_e.matmul(&px);
    let grid_y = ones_e.matmul(&py);

    let bcast = |col: Tensor| col.matmul(&ones_hw);
    let ax = bcast(u.narrow(1, 0, 1)).sub(&grid_x);
    let ay = bcast(u.narrow(1, 1, 1)).sub(&grid_y);
    let bx = bcast(v.narrow(1, 0, 1)).sub(&grid_x);
    let by = bcast(v.narrow(1, 1, 1)).sub(&grid_y);

    let det = ax.mul(&by).sub(&ay.mul(&bx));
    let dot = ax.mul(&bx).add(&ay.mul(&by));
    let t = det.mul_scalar(lambda);
    let soft_sign = t.div(&t.abs().add_scalar(1.0));
    let angle = det.abs().atan2(&dot);
    let contrib = soft_sign.mul(&angle);

    let ones_1e = Tensor::full(vec![1, e], 1.0);
    let summed = ones_1e.matmul(&contrib); // 1×HW
    summed
        .mul_scalar(sign / std::f64::consts::TAU)
        .clamp(0.0, 1.0)
        .reshape(vec![h, w])
}

/// Soft IoU segmentation loss: render every ring, combine (clamped sum by
/// default, elementwise max behind the flag), then `1 - I/U` against the
/// binary ground-truth mask.
pub fn segmentation_loss(
    positions: &Tensor,
    rings: &[Vec<usize>],
    gt_mask: &[f64],
    h: usize,
    w: usize,
    cfg: &LossConfig,
) -> Result<Tensor> {
    if gt_mask.len() != h * w {
        return Err(Error::contract("mask size mismatch"));
    }
    let gt_any = gt_mask.iter().any(|&v| v > 0.0);
    if rings.is_empty() {
        // Defined outcome without gradient when there is nothing to render.
        return Ok(Tensor::scalar(if gt_any { 1.0 } else { 0.0 }));
    }
    let mut combined: Option<Tensor> = None;
    for ring in rings {
        let mask = soft_rasterize(positions, ring, h, w, cfg.lambda);
        combined = Some(match combined {
            None => mask,
            Some(acc) => {
                if cfg.raster_max_combine {
                    acc.maximum(&mask)
                } else {
                    acc.add(&mask)
                }
            }
        });
    }
    let pred = combined.unwrap().clamp(0.0, 1.0);
    let gt = Tensor::from_vec(vec![h, w], gt_mask.to_vec())?;
    let inter = pred.mul(&gt).sum_all();
    let union = pred.sum_all().add(&gt.sum_all()).sub(&inter);
    Ok(inter.div(&union).neg().add_scalar(1.0))
}

/// Weighted linear combination of the four loss terms.
pub fn total_loss(
    detection: &Tensor,
    matching: &Tensor,
    angle: &Tensor,
    segmentation: &Tensor,
    weights: [f64; 4],
) -> Tensor {
    detection
        .mul_scalar(weights[0])
        .add(&matching.mul_scalar(weights[1]))
        .add(&angle.mul_scalar(weights[2]))
        .add(&segmentation.mul_scalar(weights[3]))
}
