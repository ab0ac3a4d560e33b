//! Dataset on disk: PNG images, COCO-subset polygon annotations, and a
//! deterministic manifest.
//!
//! The annotation file follows the MS COCO instance layout restricted to
//! single-ring polygon segmentations: `images`, `annotations` (with
//! `segmentation: [[x1, y1, x2, y2, ...]]` in pixel units), and a single
//! building category. Annotations with holes (multiple rings) are skipped
//! with a warning on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scene, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, PolygonSet};

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    /// One ring per annotation: `[x1, y1, x2, y2, ...]` pixel coordinates.
    segmentation: Vec<Vec<f64>>,
    area: f64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDataset {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub scene_count: usize,
    /// SHA-256 over annotation bytes and every image's raw buffer.
    pub dataset_hash: String,
    pub placement_failures: usize,
}

const CATEGORY_BUILDING: u32 = 1;

/// Write scenes as `images/*.png` + `annotations.json` + `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    scenes: &[Scene],
    config: &SynthConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    let mut hasher = Sha256::new();
    let mut failures = 0usize;
    for scene in scenes {
        let file_name = format!("scene_{:06}.png", scene.id);
        save_png(&images_dir.join(&file_name), scene)?;
        images.push(CocoImage {
            id: scene.id,
            file_name,
            width: scene.width as u32,
            height: scene.height as u32,
        });
        failures += scene.placement_failures;
        for poly in scene.gt_polygons.polygons() {
            let ring: Vec<f64> = poly
                .vertices()
                .iter()
                .flat_map(|v| [v.x * scene.width as f64, v.y * scene.height as f64])
                .collect();
            let xs: Vec<f64> = ring.iter().step_by(2).copied().collect();
            let ys: Vec<f64> = ring.iter().skip(1).step_by(2).copied().collect();
            let (x0, x1) = (
                xs.iter().copied().fold(f64::INFINITY, f64::min),
                xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
            let (y0, y1) = (
                ys.iter().copied().fold(f64::INFINITY, f64::min),
                ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
            let area = crate::geometry::signed_area(poly).abs()
                * (scene.width * scene.height) as f64;
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: scene.id,
                category_id: CATEGORY_BUILDING,
                segmentation: vec![ring],
                area,
                bbox: [x0, y0, x1 - x0, y1 - y0],
                iscrowd: 0,
            });
            ann_id += 1;
        }
        for &v in &scene.image {
            hasher.update(v.to_le_bytes());
        }
    }
    let dataset = CocoDataset {
        images,
        annotations,
        categories: vec![CocoCategory {
            id: CATEGORY_BUILDING,
            name: "building".into(),
        }],
    };
    let ann_bytes = serde_json::to_vec_pretty(&dataset)?;
    hasher.update(&ann_bytes);
    std::fs::write(dir.join("annotations.json"), &ann_bytes)?;

    let manifest = DatasetManifest {
        config: config.clone(),
        seed,
        scene_count: scenes.len(),
        dataset_hash: format!("{:x}", hasher.finalize()),
        placement_failures: failures,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load a dataset directory written by [`write_dataset`] (or any COCO
/// subset with single-ring polygon segmentations). Derived targets
/// (heatmap, mask) are recomputed from the annotations.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let ann_path = dir.join("annotations.json");
    let text = std::fs::read_to_string(&ann_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", ann_path.display())))?;
    let dataset: CocoDataset = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", ann_path.display())))?;

    let mut scenes = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let (w, h) = (img.width as usize, img.height as usize);
        let path = dir.join("images").join(&img.file_name);
        let image = load_png(&path, h, w)?;
        let mut polygons = Vec::new();
        for ann in dataset
            .annotations
            .iter()
            .filter(|a| a.image_id == img.id)
        {
            if ann.segmentation.len() != 1 {
                eprintln!(
                    "warning: annotation {} has {} rings (holes unsupported), skipped",
                    ann.id,
                    ann.segmentation.len()
                );
                continue;
            }
            let ring = &ann.segmentation[0];
            if ring.len() < 6 || ring.len() % 2 != 0 {
                return Err(Error::Parse(format!(
                    "annotation {}: ring must hold >= 3 (x, y) pairs",
                    ann.id
                )));
            }
            let pts: Vec<Point> = ring
                .chunks_exact(2)
                .map(|xy| Point::new(xy[0] / w as f64, xy[1] / h as f64))
                .collect();
            polygons.push(Polygon::new(pts)?);
        }
        let gt_polygons = PolygonSet::new(polygons);
        let heatmap = Scene::corner_heatmap(&gt_polygons, h, w, false);
        let mask = Scene::rasterize_union(&gt_polygons, h, w);
        scenes.push(Scene {
            id: img.id,
            width: w,
            height: h,
            image,
            gt_polygons,
            heatmap,
            mask,
            placement_failures: 0,
        });
    }
    Ok(scenes)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

fn save_png(path: &Path, scene: &Scene) -> Result<()> {
    let (h, w) = (scene.height, scene.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let pix = [
                (scene.image[r * w + c] * 255.0).round().clamp(0.0, 255.0) as u8,
                (scene.image[h * w + r * w + c] * 255.0).round().clamp(0.0, 255.0) as u8,
                (scene.image[2 * h * w + r * w + c] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(c as u32, r as u32, image::Rgb(pix));
        }
    }
    buf.save(path)?;
    Ok(())
}

fn load_png(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::Parse(format!(
            "{}: image is {}x{}, annotations say {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut out = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let p = img.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                out[ch * h * w + r * w + c] = p.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::generate_scene;
    use super::*;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pw_coco_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_preserves_vertex_coordinates_exactly() {
        let cfg = SynthConfig::default();
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(&cfg, s)).collect();
        let dir = tmpdir("roundtrip");
        write_dataset(&dir, &scenes, &cfg, 0).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.gt_polygons.len(), b.gt_polygons.len());
            for (p, q) in a.gt_polygons.polygons().iter().zip(b.gt_polygons.polygons()) {
                // 64 is a power of two, so pixel scaling round-trips losslessly.
                assert_eq!(p.vertices(), q.vertices());
            }
            assert_eq!(a.heatmap, b.heatmap);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn manifest_hash_is_deterministic() {
        let cfg = SynthConfig::default();
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(&cfg, s)).collect();
        let m1 = write_dataset(&tmpdir("hash1"), &scenes, &cfg, 0).unwrap();
        let scenes2: Vec<Scene> = (0..2).map(|s| generate_scene(&cfg, s)).collect();
        let m2 = write_dataset(&tmpdir("hash2"), &scenes2, &cfg, 0).unwrap();
        assert_eq!(m1.dataset_hash, m2.dataset_hash);
    }

    #[test]
    fn empty_annotation_list_gives_zero_scenes() {
        let dir = tmpdir("empty");
        std::fs::write(
            dir.join("annotations.json"),
            r#"{"images":[],"annotations":[],"categories":[]}"#,
        )
        .unwrap();
        let scenes = load_dataset(&dir).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn malformed_file_reports_location() {
        let dir = tmpdir("malformed");
        std::fs::write(dir.join("annotations.json"), "{ not json").unwrap();
        let err = match load_dataset(&dir) {
            Err(e) => e,
            Ok(_) => panic!("malformed file must not parse"),
        };
        let msg = err.to_string();
        assert!(msg.contains("annotations.json"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn hand_built_fixture_parses_to_known_polygons() {
        // Authored directly against the COCO subset layout.
        let dir = tmpdir("fixture");
        std::fs::create_dir_all(dir.join("images")).unwrap();
        // 16x16 black PNGs.
        let img = image::RgbImage::new(16, 16);
        img.save(dir.join("images/a.png")).unwrap();
        img.save(dir.join("images/b.png")).unwrap();
        std::fs::write(
            dir.join("annotations.json"),
            r#"{
              "images": [
                {"id": 1, "file_name": "a.png", "width": 16, "height": 16},
                {"id": 2, "file_name": "b.png", "width": 16, "height": 16}
              ],
              "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "segmentation": [[4, 4, 12, 4, 12, 12, 4, 12]],
                 "area": 64.0, "bbox": [4, 4, 8, 8], "iscrowd": 0},
                {"id": 2, "image_id": 2, "category_id": 1,
                 "segmentation": [[2, 2, 9, 2, 9, 9, 2, 9]],
                 "area": 49.0, "bbox": [2, 2, 7, 7], "iscrowd": 0},
                {"id": 3, "image_id": 2, "category_id": 1,
                 "segmentation": [[1,1,15,1,15,15,1,15],[4,4,6,4,6,6,4,6]],
                 "area": 10.0, "bbox": [1, 1, 14, 14], "iscrowd": 0}
              ],
              "categories": [{"id": 1, "name": "building"}]
            }"#,
        )
        .unwrap();
        let scenes = load_dataset(&dir).unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].gt_polygons.len(), 1);
        // The two-ring annotation (hole) is skipped with a warning.
        assert_eq!(scenes[1].gt_polygons.len(), 1);
        let quad = &scenes[0].gt_polygons.polygons()[0];
        assert_eq!(quad.vertices()[0], Point::new(0.25, 0.25));
        assert_eq!(quad.vertices()[2], Point::new(0.75, 0.75));
    }
}
