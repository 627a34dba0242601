use std::time::Instant;
use rcd_core::detector::pipeline::{backward_loss, forward_loss, DetectorParams};
use rcd_core::detector::scene::generate_scene;
use rcd_core::detector::targets::build_targets;
use rcd_core::detector::RunConfig;
use rcd_core::losses::FocalConfig;
use rand::SeedableRng;

fn main() {
    let cfg = RunConfig::with_defaults();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DetectorParams::init(&cfg.net, &cfg.bins, &mut rng);
    let focal = FocalConfig::default();
    let t0 = Instant::now();
    let scene = generate_scene(&cfg.scene, 1);
    let targets = build_targets(&scene, &cfg.bins);
    println!("scene+targets: {:?} (pixels {}, gts {})", t0.elapsed(), scene.image.valid_count(), scene.gt_boxes.len());
    for i in 0..3 {
        let t1 = Instant::now();
        params.zero_grads();
        let (parts, state) = forward_loss(&scene, &targets, &params, &focal, &cfg.bins, &cfg.trainer, 7).unwrap();
        let tf = t1.elapsed();
        let t2 = Instant::now();
        backward_loss([1.0; 4], &scene, &state, &mut params, &cfg.bins).unwrap();
        println!("iter {}: fwd {:?} bwd {:?} total loss {:.4}", i, tf, t2.elapsed(), parts.total());
    }
}
