// quick step profiler
use polyworld::autodiff::{backward, Tape, Tensor};
use polyworld::cli::{LossConfigMirror, TrainConfig, Trainer};
use polyworld::data::{build_targets, generate_scene, SynthConfig};
use polyworld::losses::*;
use polyworld::model::*;
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(cfg).unwrap();
    let scene = generate_scene(&SynthConfig::default(), 3);
    // warmup + step timing
    for _ in 0..2 { trainer.step(&scene, true).unwrap(); }
    let t0 = Instant::now();
    for _ in 0..5 { trainer.step(&scene, true).unwrap(); }
    println!("full step avg: {:.3}s", t0.elapsed().as_secs_f64() / 5.0);
    let t0 = Instant::now();
    for _ in 0..5 { trainer.step(&scene, false).unwrap(); }
    println!("det step avg: {:.3}s", t0.elapsed().as_secs_f64() / 5.0);

    // stage breakdown (forward only + backward total)
    let model = &trainer.model;
    let (h, w) = (scene.height, scene.width);
    let image = Tensor::from_vec(vec![3, h, w], scene.image.clone()).unwrap();
    let tape = Tape::new();
    let wi = tape.watch(&image);
    let t0 = Instant::now();
    let (features, heatmap) = model.backbone_forward(&wi, Some(&tape)).unwrap();
    println!("backbone fwd: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let peaks = model.detect(&heatmap.to_vec(), h, w);
    let (ordered, gt) = build_targets(&scene, &peaks, 3.0, false).unwrap();
    println!("nms+targets: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let vertices = model.assemble_vertices(&features, &ordered, h, w).unwrap();
    let refined = model.gnn_forward(&vertices, Some(&tape), false);
    println!("gnn fwd: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let (_, soft) = model.score_and_assign(&refined, &vertices.valid, Some(&tape), ScoreMode::Both, 100).unwrap();
    println!("scores+sinkhorn fwd: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let l_det = detection_loss(&heatmap, &scene.heatmap, 100.0, false).unwrap();
    let l_match = matching_loss(&soft, &gt.perm).unwrap();
    let l_angle = angle_loss(&refined.positions, &gt.positions, &gt.rings, 10.0).unwrap();
    let lc = LossConfigMirror::default().to_loss_config();
    let l_seg = segmentation_loss(&refined.positions, &gt.rings, &gt.mask, h, w, &lc).unwrap();
    let total = total_loss(&l_det, &l_match, &l_angle.loss, &l_seg, [1.0;4]);
    println!("losses fwd: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    backward(&total).unwrap();
    println!("backward: {:.3}s  (tape empty now)", t0.elapsed().as_secs_f64());
}
