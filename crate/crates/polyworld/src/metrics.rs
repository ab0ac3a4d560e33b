//! Polygon-aware evaluation: mask IoU, complexity-aware IoU, max tangent
//! angle error, vertex-count ratio, and a simplified AP/AR.
//!
//! The AP/AR here is deliberately reduced relative to the full COCO
//! protocol: greedy confidence-ordered matching at fixed IoU thresholds
//! (0.50 / 0.75 by default), 101-point interpolated AP, no size
//! stratification or crowd handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exact_winding_inside, Point, Polygon, PolygonSet};

/// Rasterize one polygon at pixel centers.
pub fn rasterize_polygon_mask(poly: &Polygon, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let x = Point::new((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
            if exact_winding_inside(x, poly) {
                mask[r * w + c] = true;
            }
        }
    }
    mask
}

/// Union mask of a polygon set.
pub fn rasterize_set_mask(set: &PolygonSet, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for poly in set.polygons() {
        for (cell, inside) in mask.iter_mut().zip(rasterize_polygon_mask(poly, h, w)) {
            *cell = *cell || inside;
        }
    }
    mask
}

/// `|A∩Ā| / |A∪Ā|`; two empty masks count as a perfect 1.0.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "contract violation: mask size mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Complexity-aware IoU from a precomputed IoU:
/// `IoU · (1 - |n_pred - n_gt| / (n_pred + n_gt))`, with the relative
/// difference defined as 0 when both counts are 0.
pub fn c_iou_from(iou: f64, n_pred: usize, n_gt: usize) -> f64 {
    let total = n_pred + n_gt;
    if total == 0 {
        return iou;
    }
    let rd = (n_pred as f64 - n_gt as f64).abs() / total as f64;
    iou * (1.0 - rd)
}

/// Complexity-aware IoU on masks plus vertex counts.
pub fn c_iou(a: &[bool], b: &[bool], n_pred: usize, n_gt: usize) -> f64 {
    c_iou_from(mask_iou(a, b), n_pred, n_gt)
}

/// Ratio of extracted to ground-truth vertex counts.
pub fn n_ratio(pred_vertices: usize, gt_vertices: usize) -> Result<f64> {
    if gt_vertices == 0 {
        return Err(Error::contract("n_ratio needs a nonzero gt vertex count"));
    }
    Ok(pred_vertices as f64 / gt_vertices as f64)
}

/// Max tangent angle error in degrees.
///
/// Every predicted contour is sampled at `sample_spacing_px` intervals; the
/// tangent at each sample is compared (mod 180°, folded into [0°, 90°])
/// against the tangent of the nearest point on the paired ground-truth
/// contour. Pairs come from best instance mask IoU; per polygon the error
/// is the max over samples, the image value is the mean over predicted
/// polygons, with unmatched predictions contributing 90°. With one side
/// empty the value is 90° (0° when both sides are empty).
pub fn max_tangent_angle_error(
    pred: &PolygonSet,
    gt: &PolygonSet,
    h: usize,
    w: usize,
    sample_spacing_px: f64,
) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 0.0;
    }
    if pred.is_empty() || gt.is_empty() {
        return 90.0;
    }
    let gt_masks: Vec<Vec<bool>> = gt
        .polygons()
        .iter()
        .map(|p| rasterize_polygon_mask(p, h, w))
        .collect();
    let mut per_poly = Vec::with_capacity(pred.len());
    for poly in pred.polygons() {
        let pm = rasterize_polygon_mask(poly, h, w);
        let paired = gt_masks
            .iter()
            .enumerate()
            .map(|(k, gm)| (k, mask_iou(&pm, gm)))
            .filter(|&(_, iou)| iou > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k);
        let Some(k) = paired else {
            per_poly.push(90.0);
            continue;
        };
        per_poly.push(polygon_mta_degrees(poly, &gt.polygons()[k], h, w, sample_spacing_px));
    }
    per_poly.iter().sum::<f64>() / per_poly.len() as f64
}

/// Max-over-samples tangent error between one polygon pair, degrees.
fn polygon_mta_degrees(
    pred: &Polygon,
    gt: &Polygon,
    h: usize,
    w: usize,
    spacing_px: f64,
) -> f64 {
    let to_px = |p: Point| (p.x * w as f64, p.y * h as f64);
    let gt_edges: Vec<((f64, f64), (f64, f64))> = gt
        .edges()
        .map(|(a, b)| (to_px(a), to_px(b)))
        .collect();
    let mut worst: f64 = 0.0;
    for (a, b) in pred.edges() {
        let (ax, ay) = to_px(a);
        let (bx, by) = to_px(b);
        let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        let samples = (len / spacing_px).ceil().max(1.0) as usize;
        let pred_angle = (by - ay).atan2(bx - ax);
        for s in 0..samples {
            let t = (s as f64 + 0.5) / samples as f64;
            let (px, py) = (ax + t * (bx - ax), ay + t * (by - ay));
            // Nearest GT contour point and its edge tangent.
            let mut best = (f64::INFINITY, 0.0);
            for &((gx0, gy0), (gx1, gy1)) in &gt_edges {
                let (ex, ey) = (gx1 - gx0, gy1 - gy0);
                let len2 = ex * ex + ey * ey;
                let u = (((px - gx0) * ex + (py - gy0) * ey) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (gx0 + u * ex, gy0 + u * ey);
                let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                if d2 < best.0 {
                    best = (d2, ey.atan2(ex));
                }
            }
            let diff = (pred_angle - best.1).rem_euclid(std::f64::consts::PI);
            let folded = diff.min(std::f64::consts::PI - diff);
            worst = worst.max(folded.to_degrees());
        }
    }
    worst
}

/// Precision/recall summary at one IoU threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ApAr {
    pub threshold: f64,
    pub ap: f64,
    pub ar: f64,
}

/// Simplified COCO-style AP/AR: predictions across the dataset are matched
/// greedily to ground-truth instances in descending confidence order at
/// each IoU threshold; AP uses 101-point interpolation, AR is the final
/// (maximum) recall.
pub fn simplified_ap_ar(
    predictions: &[(PolygonSet, Vec<f64>)],
    ground_truth: &[PolygonSet],
    thresholds: &[f64],
    h: usize,
    w: usize,
) -> Result<Vec<ApAr>> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::contract(format!(
            "prediction images {} != ground truth images {}",
            predictions.len(),
            ground_truth.len()
        )));
    }
    for (set, conf) in predictions {
        if set.len() != conf.len() {
            return Err(Error::contract("confidence count mismatch"));
        }
        if conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::contract("confidences must lie in [0, 1]"));
        }
    }
    let pred_masks: Vec<Vec<Vec<bool>>> = predictions
        .iter()
        .map(|(set, _)| {
            set.polygons()
                .iter()
                .map(|p| rasterize_polygon_mask(p, h, w))
                .collect()
        })
        .collect();
    let gt_masks: Vec<Vec<Vec<bool>>> = ground_truth
        .iter()
        .map(|set| {
            set.polygons()
                .iter()
                .map(|p| rasterize_polygon_mask(p, h, w))
                .collect()
        })
        .collect();
    let total_gt: usize = ground_truth.iter().map(|g| g.len()).sum();

    // (confidence, image, polygon) sorted by descending confidence with a
    // deterministic tie order.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, (_, confs)) in predictions.iter().enumerate() {
        for (k, &c) in confs.iter().enumerate() {
            ranked.push((c, img, k));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });

    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        if total_gt == 0 {
            let perfect = ranked.is_empty();
            out.push(ApAr {
                threshold: t,
                ap: if perfect { 1.0 } else { 0.0 },
                ar: if perfect { 1.0 } else { 0.0 },
            });
            continue;
        }
        let mut taken: Vec<Vec<bool>> = gt_masks.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
        for &(_, img, k) in &ranked {
            let pm = &pred_masks[img][k];
            let mut best: Option<(usize, f64)> = None;
            for (g, gm) in gt_masks[img].iter().enumerate() {
                if taken[img][g] {
                    continue;
                }
                let iou = mask_iou(pm, gm);
                if iou >= t && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[img][g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            curve.push((
                tp as f64 / (tp + fp) as f64,
                tp as f64 / total_gt as f64,
            ));
        }
        // 101-point interpolated AP.
        let mut ap = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = curve
                .iter()
                .filter(|&&(_, rec)| rec >= r - 1e-12)
                .map(|&(prec, _)| prec)
                .fold(0.0, f64::max);
            ap += p;
        }
        ap /= 101.0;
        let ar = curve.last().map_or(0.0, |&(_, rec)| rec);
        out.push(ApAr {
            threshold: t,
            ap,
            ar,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageEval {
    pub id: u64,
    pub iou: f64,
    pub c_iou: f64,
    pub mta_degrees: f64,
    pub pred_polygons: usize,
    pub gt_polygons: usize,
    pub pred_vertices: usize,
    pub gt_vertices: usize,
}

/// Aggregate evaluation over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-image union-mask IoU.
    pub iou: f64,
    /// Mean per-image complexity-aware IoU.
    pub c_iou: f64,
    /// Mean per-image max tangent angle error, degrees.
    pub mta_degrees: f64,
    /// Total predicted vertices over total ground-truth vertices.
    pub n_ratio: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar50: f64,
    pub ar75: f64,
    pub per_image: Vec<PerImageEval>,
}

impl EvalReport {
    /// Full evaluation of per-image predictions against ground truth.
    pub fn evaluate(
        ids: &[u64],
        predictions: &[(PolygonSet, Vec<f64>)],
        ground_truth: &[PolygonSet],
        h: usize,
        w: usize,
    ) -> Result<EvalReport> {
        if ids.len() != predictions.len() || predictions.len() != ground_truth.len() {
            return Err(Error::contract("image list length mismatch"));
        }
        let mut per_image = Vec::with_capacity(ids.len());
        let mut total_pred_v = 0usize;
        let mut total_gt_v = 0usize;
        for ((&id, (pred, _)), gt) in ids.iter().zip(predictions).zip(ground_truth) {
            let pm = rasterize_set_mask(pred, h, w);
            let gm = rasterize_set_mask(gt, h, w);
            let iou = mask_iou(&pm, &gm);
            let (pv, gv) = (pred.vertex_count(), gt.vertex_count());
            per_image.push(PerImageEval {
                id,
                iou,
                c_iou: c_iou_from(iou, pv, gv),
                mta_degrees: max_tangent_angle_error(pred, gt, h, w, 1.0),
                pred_polygons: pred.len(),
                gt_polygons: gt.len(),
                pred_vertices: pv,
                gt_vertices: gv,
            });
            total_pred_v += pv;
            total_gt_v += gv;
        }
        let ap = simplified_ap_ar(predictions, ground_truth, &[0.5, 0.75], h, w)?;
        let n = per_image.len().max(1) as f64;
        Ok(EvalReport {
            iou: per_image.iter().map(|p| p.iou).sum::<f64>() / n,
            c_iou: per_image.iter().map(|p| p.c_iou).sum::<f64>() / n,
            mta_degrees: per_image.iter().map(|p| p.mta_degrees).sum::<f64>() / n,
            n_ratio: n_ratio(total_pred_v, total_gt_v.max(1))?,
            ap50: ap[0].ap,
            ar50: ap[0].ar,
            ap75: ap[1].ap,
            ar75: ap[1].ar,
            per_image,
        })
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        format!(
            "metric                 value\n\
             ---------------------  ------\n\
             IoU                    {:.4}\n\
             C-IoU                  {:.4}\n\
             MTA (deg)              {:.2}\n\
             N-ratio                {:.3}\n\
             AP50 (simplified)      {:.4}\n\
             AP75 (simplified)      {:.4}\n\
             AR50 (simplified)      {:.4}\n\
             AR75 (simplified)      {:.4}\n\
             images                 {}\n",
            self.iou,
            self.c_iou,
            self.mta_degrees,
            self.n_ratio,
            self.ap50,
            self.ap75,
            self.ar50,
            self.ar75,
            self.per_image.len(),
        )
    }
}
