use rcd_core::boxgeom::Box7;
use rcd_core::detector::pipeline::run_inference;
use rcd_core::detector::scene::generate_scene;
use rcd_core::detector::trainer::{scene_seed, train_toy};
use rcd_core::detector::RunConfig;
use rcd_core::eval::{bucketed_report, EvalConfig, IouMode};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = RunConfig::with_defaults();
    cfg.seed = seed;
    cfg.trainer.iterations = iters;
    let dir = std::env::temp_dir().join(format!("rcd_probe_{}_{}", iters, seed));
    let t0 = std::time::Instant::now();
    let summary = train_toy(&cfg, &dir).unwrap();
    println!("trained {} iters in {:?}", iters, t0.elapsed());
    for row in summary.trace.iter().step_by((iters / 20).max(1)) {
        println!(
            "it {:5}  Lf {:.4}  Lb {:.4}  Lcls {:.4}  Lreg {:.4}  total {:.4}  width {:.3} gate {:.3}",
            row.iteration, row.parts.rpn_cls, row.parts.rpn_box, row.parts.rcnn_cls, row.parts.rcnn_reg,
            row.parts.total(), row.nominal_width, row.gate_scale
        );
    }
    let last = summary.trace.last().unwrap();
    println!("final: total {:.4} width {:.4}", last.parts.total(), last.nominal_width);

    // held-out eval
    let eval_cfg = EvalConfig { iou_threshold: 0.5, mode: IouMode::Bev, bucket_edges: vec![30.0, 50.0] };
    let mut frames: Vec<(Vec<(Box7, f64)>, Vec<Box7>)> = Vec::new();
    for k in 0..8u64 {
        let scene = generate_scene(&cfg.scene, scene_seed(cfg.seed ^ 0xe7a1, 1_000_000, k as usize));
        let dets = run_inference(&scene.image, &scene.res, &summary.params, &cfg.bins, &cfg.trainer).unwrap();
        frames.push((dets, scene.gt_boxes.clone()));
    }
    let report = bucketed_report(&frames, &eval_cfg);
    println!("{}", report.to_table(&eval_cfg));
}
