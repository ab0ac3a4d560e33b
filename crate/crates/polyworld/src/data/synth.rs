//! Procedural scene synthesis: simple building shapes over a textured
//! background with Gaussian noise, ground truth recorded exactly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::geometry::{exact_winding_inside, Point, Polygon, PolygonSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    AxisRect,
    RotatedRect,
    LShape,
}

impl std::str::FromStr for ShapeFamily {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "axis" | "axis_rect" => Ok(ShapeFamily::AxisRect),
            "rot" | "rotated_rect" => Ok(ShapeFamily::RotatedRect),
            "l" | "l_shape" => Ok(ShapeFamily::LShape),
            other => Err(crate::error::Error::Parse(format!(
                "unknown shape family '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub buildings_min: usize,
    pub buildings_max: usize,
    pub shapes: Vec<ShapeFamily>,
    /// Per-pixel Gaussian noise σ added to every channel.
    pub noise_sigma: f64,
    /// Minimum distance (pixels) between any vertex and the image border.
    pub margin_px: f64,
    /// Stamp dilated Gaussian bumps instead of single-pixel corner targets.
    pub heatmap_dilation: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            buildings_min: 1,
            buildings_max: 3,
            shapes: vec![ShapeFamily::AxisRect, ShapeFamily::LShape],
            noise_sigma: 0.03,
            margin_px: 2.0,
            heatmap_dilation: false,
        }
    }
}

/// Deterministic scene synthesis: same config and seed, same scene.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);

    // Background: per-channel base + linear ramp.
    let mut image = vec![0.0f64; 3 * h * w];
    for ch in 0..3 {
        let base = rng.random_range(0.08..0.4);
        let gx = rng.random_range(-0.08..0.08);
        let gy = rng.random_range(-0.08..0.08);
        for r in 0..h {
            for c in 0..w {
                image[ch * h * w + r * w + c] =
                    base + gx * (c as f64 / w as f64) + gy * (r as f64 / h as f64);
            }
        }
    }

    let target = rng.random_range(cfg.buildings_min..=cfg.buildings_max);
    let mut polygons: Vec<Polygon> = Vec::new();
    let mut bboxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut failures = 0usize;
    'placement: for _ in 0..target {
        for _attempt in 0..40 {
            let family = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let Some(poly) = sample_shape(family, cfg, &mut rng) else {
                continue;
            };
            let bb = bbox(&poly);
            // 2-px dilated bbox separation keeps buildings disjoint.
            let pad = 2.0 / w as f64;
            let clear = bboxes.iter().all(|other| {
                bb.0 - pad > other.2 || other.0 - pad > bb.2 || bb.1 - pad > other.3
                    || other.1 - pad > bb.3
            });
            if clear {
                bboxes.push(bb);
                polygons.push(poly);
                continue 'placement;
            }
        }
        failures += 1;
    }

    // Fill buildings with distinct bright colors.
    for poly in &polygons {
        let fill: [f64; 3] = [
            rng.random_range(0.55..0.95),
            rng.random_range(0.55..0.95),
            rng.random_range(0.55..0.95),
        ];
        let bb = bbox(poly);
        let c_lo = ((bb.0 * w as f64).floor().max(0.0)) as usize;
        let c_hi = ((bb.2 * w as f64).ceil() as usize).min(w);
        let r_lo = ((bb.1 * h as f64).floor().max(0.0)) as usize;
        let r_hi = ((bb.3 * h as f64).ceil() as usize).min(h);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                let x = Point::new((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                if exact_winding_inside(x, poly) {
                    for ch in 0..3 {
                        image[ch * h * w + r * w + c] = fill[ch];
                    }
                }
            }
        }
    }

    // Gaussian pixel noise (Box-Muller), clamped back into [0, 1].
    if cfg.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (*v + cfg.noise_sigma * z).clamp(0.0, 1.0);
        }
    }

    let gt_polygons = PolygonSet::new(polygons);
    let heatmap = Scene::corner_heatmap(&gt_polygons, h, w, cfg.heatmap_dilation);
    let mask = Scene::rasterize_union(&gt_polygons, h, w);
    Scene {
        id: seed,
        width: w,
        height: h,
        image,
        gt_polygons,
        heatmap,
        mask,
        placement_failures: failures,
    }
}

fn bbox(poly: &Polygon) -> (f64, f64, f64, f64) {
    let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in poly.vertices() {
        bb.0 = bb.0.min(v.x);
        bb.1 = bb.1.min(v.y);
        bb.2 = bb.2.max(v.x);
        bb.3 = bb.3.max(v.y);
    }
    bb
}

/// Sample one screen-clockwise ring of the requested family, all vertices
/// at least `margin_px` from the border. Returns None when the draw cannot
/// fit (caller retries).
fn sample_shape(family: ShapeFamily, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Polygon> {
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);
    let m = cfg.margin_px;
    let px = |x: f64, y: f64| Point::new(x / wf, y / hf);
    match family {
        ShapeFamily::AxisRect => {
            let hi_w = 28.0_f64.min(wf - 2.0 * m - 1.0);
            let hi_h = 28.0_f64.min(hf - 2.0 * m - 1.0);
            if hi_w <= 10.0 || hi_h <= 10.0 {
                return None;
            }
            let bw = rng.random_range(10.0..hi_w);
            let bh = rng.random_range(10.0..hi_h);
            let x0 = rng.random_range(m..(wf - m - bw));
            let y0 = rng.random_range(m..(hf - m - bh));
            // Screen-clockwise: right, down, left, up.
            Polygon::new(vec![
                px(x0, y0),
                px(x0 + bw, y0),
                px(x0 + bw, y0 + bh),
                px(x0, y0 + bh),
            ])
            .ok()
        }
        ShapeFamily::RotatedRect => {
            let bw = rng.random_range(10.0..24.0);
            let bh = rng.random_range(10.0..24.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            let cx = rng.random_range(m + 18.0..wf - m - 18.0);
            let cy = rng.random_range(m + 18.0..hf - m - 18.0);
            let corners = [
                (-bw / 2.0, -bh / 2.0),
                (bw / 2.0, -bh / 2.0),
                (bw / 2.0, bh / 2.0),
                (-bw / 2.0, bh / 2.0),
            ];
            let pts: Vec<Point> = corners
                .iter()
                .map(|&(dx, dy)| px(cx + c * dx - s * dy, cy + s * dx + c * dy))
                .collect();
            if pts.iter().any(|p| {
                p.x * wf < m || p.x * wf > wf - m || p.y * hf < m || p.y * hf > hf - m
            }) {
                return None;
            }
            Polygon::new(pts).ok()
        }
        ShapeFamily::LShape => {
            let hi_w = 30.0_f64.min(wf - 2.0 * m - 1.0);
            let hi_h = 30.0_f64.min(hf - 2.0 * m - 1.0);
            if hi_w <= 16.0 || hi_h <= 16.0 {
                return None;
            }
            let bw = rng.random_range(16.0..hi_w);
            let bh = rng.random_range(16.0..hi_h);
            let x0 = rng.random_range(m..(wf - m - bw));
            let y0 = rng.random_range(m..(hf - m - bh));
            let nw = rng.random_range(5.0..bw - 6.0);
            let nh = rng.random_range(5.0..bh - 6.0);
            // Notch the bottom-right corner, then optionally mirror; a
            // mirror flips orientation, so the ring is reversed back to
            // screen-clockwise.
            let mut ring = vec![
                (x0, y0),
                (x0 + bw, y0),
                (x0 + bw, y0 + bh - nh),
                (x0 + bw - nw, y0 + bh - nh),
                (x0 + bw - nw, y0 + bh),
                (x0, y0 + bh),
            ];
            if rng.random_bool(0.5) {
                for p in ring.iter_mut() {
                    p.0 = 2.0 * x0 + bw - p.0;
                }
                ring.reverse();
            }
            if rng.random_bool(0.5) {
                for p in ring.iter_mut() {
                    p.1 = 2.0 * y0 + bh - p.1;
                }
                ring.reverse();
            }
            Polygon::new(ring.into_iter().map(|(x, y)| px(x, y)).collect()).ok()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Orientation;

    #[test]
    fn seed_reproducibility() {
        let cfg = SynthConfig::default();
        let a = generate_scene(&cfg, 42);
        let b = generate_scene(&cfg, 42);
        assert_eq!(a.image.len(), b.image.len());
        assert!(a
            .image
            .iter()
            .zip(&b.image)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.gt_polygons.len(), b.gt_polygons.len());
        for (p, q) in a.gt_polygons.polygons().iter().zip(b.gt_polygons.polygons()) {
            assert_eq!(p.vertices(), q.vertices());
        }
        let c = generate_scene(&cfg, 43);
        assert!(a.image.iter().zip(&c.image).any(|(x, y)| x != y));
    }

    #[test]
    fn zero_buildings_gives_background_only() {
        let cfg = SynthConfig {
            buildings_min: 0,
            buildings_max: 0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&cfg, 7);
        assert!(scene.gt_polygons.is_empty());
        assert!(scene.mask.iter().all(|&v| v == 0.0));
        assert!(scene.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polygons_are_clockwise_simple_and_inside_margin() {
        let cfg = SynthConfig {
            shapes: vec![
                ShapeFamily::AxisRect,
                ShapeFamily::RotatedRect,
                ShapeFamily::LShape,
            ],
            ..SynthConfig::default()
        };
        for seed in 0..50 {
            let scene = generate_scene(&cfg, seed);
            for poly in scene.gt_polygons.polygons() {
                assert!(poly.len() >= 3);
                assert_eq!(poly.orientation(), Orientation::Clockwise);
                for v in poly.vertices() {
                    let (xp, yp) = (v.x * 64.0, v.y * 64.0);
                    assert!(xp >= 2.0 - 1e-9 && xp <= 62.0 + 1e-9);
                    assert!(yp >= 2.0 - 1e-9 && yp <= 62.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn mask_matches_winding_oracle() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&cfg, 3);
        let recomputed = Scene::rasterize_union(&scene.gt_polygons, 64, 64);
        assert_eq!(scene.mask, recomputed);
        // At zero noise, building pixels carry the fill color, so the mask
        // must coincide with bright pixels wherever it is set.
        for (i, &m) in scene.mask.iter().enumerate() {
            if m > 0.0 {
                let any_bright = (0..3).any(|ch| scene.image[ch * 64 * 64 + i] >= 0.55);
                assert!(any_bright, "masked pixel {i} not painted");
            }
        }
    }

    #[test]
    fn heatmap_has_one_per_corner() {
        let cfg = SynthConfig {
            buildings_min: 2,
            buildings_max: 2,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&cfg, 9);
        let ones = scene.heatmap.iter().filter(|&&v| v == 1.0).count();
        // Corners land on distinct pixels for disjoint buildings.
        assert_eq!(ones, scene.gt_vertex_count());
    }
}
