// diagnostic: matching-path introspection on one-scene overfit
use polyworld::autodiff::Tensor;
use polyworld::cli::{TrainConfig, Trainer};
use polyworld::data::{build_targets, generate_scene, SynthConfig};
use polyworld::model::ScoreMode;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.model.seed = 3;
    let mut trainer = Trainer::new(cfg).unwrap();
    let scene = generate_scene(&SynthConfig::default(), 7);
    for i in 0..301 {
        let l = trainer.step(&scene, true).unwrap();
        if i % 50 == 0 {
            let img = Tensor::from_vec(vec![3, 64, 64], scene.image.clone()).unwrap();
            let (feat, hm) = trainer.model.backbone_forward(&img, None).unwrap();
            let peaks = trainer.model.detect(&hm.to_vec(), 64, 64);
            let (ordered, gt) = build_targets(&scene, &peaks, 3.0, false).unwrap();
            let verts = trainer.model.assemble_vertices(&feat, &ordered, 64, 64).unwrap();
            let refined = trainer.model.gnn_forward(&verts, None, false);
            let (scores, soft) = trainer.model
                .score_and_assign(&refined, &verts.valid, None, ScoreMode::Both, 100)
                .unwrap();
            let n = soft.n();
            let on_ring: std::collections::HashSet<usize> = gt.rings.iter().flatten().copied().collect();
            let (mut ring_nll, mut ringc, mut diag_nll, mut diagc) = (0.0, 0usize, 0.0, 0usize);
            for s in 0..n {
                let j = gt.perm.next_of(s);
                let p = soft.get(s, j).max(1e-300);
                if on_ring.contains(&s) { ring_nll -= p.ln(); ringc += 1; } else { diag_nll -= p.ln(); diagc += 1; }
            }
            let t_absmax = refined.offsets.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let sd = scores.tensor().to_vec();
            let smin = sd.iter().cloned().fold(f64::INFINITY, f64::min);
            let smax = sd.iter().cloned().filter(|v| *v < 500.0).fold(f64::NEG_INFINITY, f64::max);
            println!(
                "step {i}: match={:.1} ring_nll={:.1}/{} diag_nll={:.1}/{} |t|max={:.3} scores[{:.2},{:.2}] seg={:.4}",
                l.matching, ring_nll, ringc, diag_nll, diagc, t_absmax, smin, smax, l.segmentation
            );
        }
    }
}
