//! Exercise the C ABI through the exported extern functions.

use std::ffi::{CStr, CString};

use polyworld::data::{generate_scene, SynthConfig};
use polyworld::model::{BackboneConfig, GnnConfig, Model, ModelConfig};
use polyworld_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let config = ModelConfig {
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
        vertex_count: 16,
        nms_kernel: 3,
        sinkhorn_iterations: 20,
        seed: 11,
    };
    let model = Model::new(config).unwrap();
    let path = dir.join("tiny.pwck");
    model.save(&path).unwrap();
    path
}

fn scene_hwc() -> (Vec<f64>, usize, usize) {
    let scene = generate_scene(&SynthConfig::default(), 4);
    let (h, w) = (scene.height, scene.width);
    let mut hwc = vec![0.0; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                hwc[(r * w + c) * 3 + ch] = scene.image[ch * h * w + r * w + c];
            }
        }
    }
    (hwc, h, w)
}

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(pw_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn load_extract_access_geojson_free() {
    let dir = std::env::temp_dir().join("pw_ffi_test");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();

    let mut model: *mut PwModel = std::ptr::null_mut();
    let status = unsafe { pw_model_load(cpath.as_ptr(), &mut model) };
    assert_eq!(status, PwStatus::PwOk);
    assert!(!model.is_null());

    let (hwc, h, w) = scene_hwc();
    let mut set: *mut PwPolygonSet = std::ptr::null_mut();
    let status = unsafe { pw_model_extract(model, hwc.as_ptr(), h, w, 0, &mut set) };
    assert_eq!(status, PwStatus::PwOk);
    assert!(!set.is_null());

    let n = unsafe { pw_polygon_set_len(set) };
    for i in 0..n {
        let k = unsafe { pw_polygon_vertex_count(set, i) };
        assert!(k >= 3);
        let conf = unsafe { pw_polygon_confidence(set, i) };
        assert!((0.0..=1.0).contains(&conf));
        let mut buf = vec![0.0f64; k * 2];
        let mut pairs = 0usize;
        let status =
            unsafe { pw_polygon_vertices(set, i, buf.as_mut_ptr(), k, &mut pairs) };
        assert_eq!(status, PwStatus::PwOk);
        assert_eq!(pairs, k);
        assert!(buf.iter().all(|v| v.is_finite()));
    }

    let mut json: *mut std::ffi::c_char = std::ptr::null_mut();
    let status = unsafe { pw_polygon_set_to_geojson(set, &mut json) };
    assert_eq!(status, PwStatus::PwOk);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    assert!(text.contains("FeatureCollection"));
    unsafe { pw_string_free(json) };

    // Ablation flags run the alternate paths.
    let mut set2: *mut PwPolygonSet = std::ptr::null_mut();
    let status = unsafe {
        pw_model_extract(
            model,
            hwc.as_ptr(),
            h,
            w,
            PW_FLAG_NO_OFFSET | PW_FLAG_SCORE_CLOCK_ONLY,
            &mut set2,
        )
    };
    assert_eq!(status, PwStatus::PwOk);
    unsafe { pw_polygon_set_free(set2) };

    unsafe { pw_polygon_set_free(set) };
    unsafe { pw_model_free(model) };
}

#[test]
fn errors_set_message_and_status() {
    let bogus = CString::new("/nonexistent/path.pwck").unwrap();
    let mut model: *mut PwModel = std::ptr::null_mut();
    let status = unsafe { pw_model_load(bogus.as_ptr(), &mut model) };
    assert_eq!(status, PwStatus::PwIoError);
    assert!(model.is_null());
    let msg = unsafe { CStr::from_ptr(pw_last_error_message()) };
    assert!(!msg.to_str().unwrap().is_empty());

    let status = unsafe { pw_model_load(std::ptr::null(), &mut model) };
    assert_eq!(status, PwStatus::PwInvalidArgument);
}

#[test]
fn vertex_copy_rejects_small_capacity() {
    let dir = std::env::temp_dir().join("pw_ffi_test");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model: *mut PwModel = std::ptr::null_mut();
    unsafe { pw_model_load(cpath.as_ptr(), &mut model) };
    let (hwc, h, w) = scene_hwc();
    let mut set: *mut PwPolygonSet = std::ptr::null_mut();
    unsafe { pw_model_extract(model, hwc.as_ptr(), h, w, 0, &mut set) };
    let n = unsafe { pw_polygon_set_len(set) };
    if n > 0 {
        let mut buf = [0.0f64; 2];
        let mut pairs = 0usize;
        let status = unsafe { pw_polygon_vertices(set, 0, buf.as_mut_ptr(), 1, &mut pairs) };
        assert_eq!(status, PwStatus::PwInvalidArgument);
        assert!(pairs >= 3);
    }
    unsafe { pw_polygon_set_free(set) };
    unsafe { pw_model_free(model) };
}
