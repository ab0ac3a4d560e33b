//! Scenes, ground-truth target construction, and dataset I/O.

mod coco;
mod synth;

pub use coco::{load_dataset, load_manifest, write_dataset, DatasetManifest};
pub use synth::{generate_scene, ShapeFamily, SynthConfig};

use crate::error::{Error, Result};
use crate::geometry::{
    encode_polygons, exact_winding_inside, PermutationMatrix, Point, PolygonSet,
};
use crate::model::{nearest_pixel, Peak};

/// One training/eval sample: image raster, polygon annotations, and the
/// targets derivable from the annotations alone (corner heatmap Ȳ and
/// segmentation mask M̄). The permutation target P̄ depends on the detector
/// output and is built per step by [`build_targets`].
pub struct Scene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]` planar RGB in [0, 1].
    pub image: Vec<f64>,
    /// Screen-clockwise simple rings, normalized coordinates.
    pub gt_polygons: PolygonSet,
    /// Sparse ones at ground-truth corner pixels.
    pub heatmap: Vec<f64>,
    /// Exact rasterized union of the ground-truth polygons.
    pub mask: Vec<f64>,
    /// Buildings dropped by placement retries during synthesis.
    pub placement_failures: usize,
}

impl Scene {
    /// All ground-truth corners in polygon order, flattened.
    pub fn gt_corners(&self) -> Vec<(f64, f64)> {
        self.gt_polygons
            .polygons()
            .iter()
            .flat_map(|p| p.vertices().iter().map(|v| (v.x, v.y)))
            .collect()
    }

    pub fn gt_vertex_count(&self) -> usize {
        self.gt_polygons.vertex_count()
    }

    /// Corner heatmap target: a one at each corner's nearest pixel. With
    /// `dilate`, a small Gaussian bump is stamped around each corner.
    pub fn corner_heatmap(
        polygons: &PolygonSet,
        h: usize,
        w: usize,
        dilate: bool,
    ) -> Vec<f64> {
        let mut hm = vec![0.0; h * w];
        for poly in polygons.polygons() {
            for v in poly.vertices() {
                let (r, c) = nearest_pixel(v.x, v.y, h, w);
                if dilate {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            let g = (-((dr * dr + dc * dc) as f64)).exp();
                            let cell = &mut hm[rr as usize * w + cc as usize];
                            *cell = f64::max(*cell, g);
                        }
                    }
                } else {
                    hm[r * w + c] = 1.0;
                }
            }
        }
        hm
    }

    /// Exact winding-number rasterization of the polygon union.
    pub fn rasterize_union(polygons: &PolygonSet, h: usize, w: usize) -> Vec<f64> {
        let mut mask = vec![0.0; h * w];
        for poly in polygons.polygons() {
            for r in 0..h {
                for c in 0..w {
                    if mask[r * w + c] == 0.0 {
                        let x = Point::new((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                        if exact_winding_inside(x, poly) {
                            mask[r * w + c] = 1.0;
                        }
                    }
                }
            }
        }
        mask
    }
}

/// Supervision targets aligned to the N vertex slots of one step.
pub struct GroundTruth {
    /// Ȳ: sparse corner heatmap (H·W).
    pub heatmap: Vec<f64>,
    /// P̄ over the N slots; cycles mirror the ground-truth rings, all other
    /// slots sit on the diagonal.
    pub perm: PermutationMatrix,
    /// p̄ per slot: the matched ground-truth corner for matched slots, the
    /// detection's own position otherwise (unused by the losses there).
    pub positions: Vec<(f64, f64)>,
    /// M̄: exact rasterized union mask (H·W).
    pub mask: Vec<f64>,
    /// Slots hosting a matched ground-truth corner.
    pub matched: Vec<bool>,
    /// Slot-index rings for teacher-forced refinement losses.
    pub rings: Vec<Vec<usize>>,
    pub stats: TargetStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TargetStats {
    /// GT corners beyond the slot budget, dropped for the step.
    pub dropped_corners: usize,
    /// GT corners with no detection within the cap this step.
    pub unmatched_corners: usize,
    /// GT rings left with fewer than 3 matched corners (not encoded).
    pub dropped_rings: usize,
}

/// Match detections to ground-truth corners and build slot-aligned targets.
///
/// Solves a minimum-cost one-to-one assignment (Euclidean distance, pixel
/// units) between GT corners and detected peaks, capped at `cap_px`:
/// corners without a detection inside the cap stay unmatched for this step.
/// The returned peak list is the input re-ordered so that slot `i` hosts
/// the detection matched to GT corner `i`; unmatched detections fill the
/// remaining slots in their incoming (confidence) order and sit on the
/// diagonal of P̄. Rings bridge over unmatched corners and are dropped
/// entirely when fewer than 3 of their corners matched.
///
/// `greedy` switches the matching from optimal assignment to
/// nearest-first greedy claiming.
pub fn build_targets(
    scene: &Scene,
    peaks: &[Peak],
    cap_px: f64,
    greedy: bool,
) -> Result<(Vec<Peak>, GroundTruth)> {
    let n = peaks.len();
    if n == 0 {
        return Err(Error::contract("no vertex slots"));
    }
    let (h, w) = (scene.height, scene.width);
    let corners = scene.gt_corners();
    let mut stats = TargetStats::default();

    // Slot budget: drop excess corners (whole-ring bookkeeping happens via
    // the per-ring matched counts below).
    let budget = corners.len().min(n);
    stats.dropped_corners = corners.len() - budget;

    let px = |p: (f64, f64)| (p.0 * w as f64, p.1 * h as f64);
    let dist = |a: (f64, f64), b: &Peak| {
        let (ax, ay) = px(a);
        let (bx, by) = px((
            (b.col as f64 + 0.5) / w as f64,
            (b.row as f64 + 0.5) / h as f64,
        ));
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    };

    // match_of[g] = detection index for GT corner g.
    let mut match_of: Vec<Option<usize>> = vec![None; budget];
    if greedy {
        let mut taken = vec![false; n];
        for g in 0..budget {
            let mut best: Option<(f64, usize)> = None;
            for (j, peak) in peaks.iter().enumerate() {
                if taken[j] || !peak.valid {
                    continue;
                }
                let d = dist(corners[g], peak);
                if d <= cap_px && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            if let Some((_, j)) = best {
                taken[j] = true;
                match_of[g] = Some(j);
            }
        }
    } else {
        // Optimal min-cost assignment over a square padded problem:
        // real corners score -distance inside the cap, a large negative
        // outside; virtual rows are free. Forced out-of-cap pairs are
        // filtered afterwards.
        use crate::assignment::{hungarian, ScoreMatrix};
        use crate::autodiff::Tensor;
        const FORBIDDEN: f64 = -1e9;
        let mut scores = vec![0.0; n * n];
        for g in 0..budget {
            for (j, peak) in peaks.iter().enumerate() {
                let d = dist(corners[g], peak);
                scores[g * n + j] = if peak.valid && d <= cap_px {
                    -d
                } else {
                    FORBIDDEN
                };
            }
        }
        let sm = ScoreMatrix::new(Tensor::from_vec(vec![n, n], scores.clone())?)?;
        let assignment = hungarian(&sm);
        for g in 0..budget {
            let j = assignment.next_of(g);
            if scores[g * n + j] > FORBIDDEN / 2.0 {
                match_of[g] = Some(j);
            }
        }
    }
    stats.unmatched_corners = match_of.iter().filter(|m| m.is_none()).count();

    // Slot layout: matched corners claim their corner index; everything
    // else fills the remaining slots in incoming order.
    let mut slot_of_detection: Vec<Option<usize>> = vec![None; n];
    let mut detection_of_slot: Vec<Option<usize>> = vec![None; n];
    let mut slot_of_corner: Vec<Option<usize>> = vec![None; budget];
    for g in 0..budget {
        if let Some(j) = match_of[g] {
            slot_of_detection[j] = Some(g);
            detection_of_slot[g] = Some(j);
            slot_of_corner[g] = Some(g);
        }
    }
    let mut free_slots: Vec<usize> = (0..n).filter(|&s| detection_of_slot[s].is_none()).collect();
    free_slots.reverse(); // pop from the front via Vec::pop
    for (j, slot) in slot_of_detection.iter_mut().enumerate() {
        if slot.is_none() {
            let s = free_slots.pop().expect("slot count equals peak count");
            *slot = Some(s);
            detection_of_slot[s] = Some(j);
        }
    }
    let ordered: Vec<Peak> = detection_of_slot
        .iter()
        .map(|d| peaks[d.expect("every slot filled")])
        .collect();

    // Teacher-forced rings over matched slots; P̄ from ring encoding.
    let mut rings = Vec::new();
    let mut corner_base = 0usize;
    for poly in scene.gt_polygons.polygons() {
        let k = poly.len();
        let mut ring = Vec::new();
        for t in 0..k {
            let g = corner_base + t;
            if g < budget {
                if let Some(slot) = slot_of_corner[g] {
                    ring.push(slot);
                }
            }
        }
        corner_base += k;
        if ring.len() >= 3 {
            rings.push(ring);
        } else {
            stats.dropped_rings += 1;
        }
    }
    let ring_set = PolygonSet::with_sources(
        rings
            .iter()
            .map(|ring| {
                // Positions for encode are irrelevant; reuse GT corners.
                let pts: Vec<Point> = ring
                    .iter()
                    .map(|&s| {
                        let g = s; // matched slots equal corner index
                        Point::new(corners[g].0, corners[g].1)
                    })
                    .collect();
                crate::geometry::Polygon::new(pts)
            })
            .collect::<Result<Vec<_>>>()?,
        rings.clone(),
    )?;
    let perm = encode_polygons(&ring_set, n)?;

    // p̄ per slot.
    let positions: Vec<(f64, f64)> = (0..n)
        .map(|s| {
            if s < budget && slot_of_corner[s] == Some(s) {
                corners[s]
            } else {
                let p = &ordered[s];
                (
                    (p.col as f64 + 0.5) / w as f64,
                    (p.row as f64 + 0.5) / h as f64,
                )
            }
        })
        .collect();
    let matched: Vec<bool> = (0..n)
        .map(|s| s < budget && slot_of_corner[s] == Some(s))
        .collect();

    Ok((
        ordered,
        GroundTruth {
            heatmap: scene.heatmap.clone(),
            perm,
            positions,
            mask: scene.mask.clone(),
            matched,
            rings,
            stats,
        },
    ))
}
