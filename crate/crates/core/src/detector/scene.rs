//! Deterministic synthetic scenes: vehicles on a ground plane, observed by a
//! spinning multi-laser sensor. Points are sampled on box surfaces and the
//! ground along the sensor's actual rays, and the range image's closest-point
//! collision rule provides the z-buffer occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxgeom::{to_canonical_point, Box7};
use crate::detector::SceneConfig;
use crate::rangeimage::{build_range_image, Laser, LaserCalibration, Point, PointCloud, RangeImage};
use crate::rcd::AngularResolution;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub gt_boxes: Vec<Box7>,
    pub cloud: PointCloud,
    pub calib: LaserCalibration,
    pub image: RangeImage,
    pub res: AngularResolution,
    pub seed: u64,
}

pub fn scene_calibration(cfg: &SceneConfig) -> LaserCalibration {
    let lasers: Vec<Laser> = (0..cfg.height)
        .map(|i| {
            let t = if cfg.height == 1 { 0.0 } else { i as f64 / (cfg.height - 1) as f64 };
            Laser { inclination: cfg.incl_top + t * (cfg.incl_bottom - cfg.incl_top), height: 0.0 }
        })
        .collect();
    LaserCalibration::new(lasers, cfg.width).expect("scene calibration")
}

pub fn scene_resolution(cfg: &SceneConfig) -> AngularResolution {
    let row = if cfg.height > 1 {
        (cfg.incl_top - cfg.incl_bottom) / (cfg.height - 1) as f64
    } else {
        0.01
    };
    AngularResolution::new(row, 2.0 * std::f64::consts::PI / cfg.width as f64).expect("scene resolution")
}

/// Generate a scene; bitwise reproducible from `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = scene_calibration(cfg);
    let res = scene_resolution(cfg);

    let n_boxes = rng.gen_range(cfg.min_vehicles..=cfg.max_vehicles);
    let mut gt_boxes: Vec<Box7> = Vec::with_capacity(n_boxes);
    let mut intervals: Vec<(f64, f64)> = Vec::new(); // (azimuth center, halfwidth)
    let mut intensities: Vec<f64> = Vec::new();
    let two_pi = 2.0 * std::f64::consts::PI;
    for _ in 0..n_boxes {
        for _attempt in 0..64 {
            let r: f64 = rng.gen_range(cfg.min_range..cfg.max_range);
            let az: f64 = rng.gen_range(0.0..two_pi);
            let l: f64 = rng.gen_range(4.2..5.2);
            let w: f64 = rng.gen_range(1.85..2.35);
            let h = rng.gen_range(1.5..1.9);
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let intensity = rng.gen_range(0.4..0.9);
            // angular halfwidth of the BEV diagonal plus a separation margin,
            // so vehicles never occlude each other
            let halfwidth = ((l * l + w * w).sqrt() * 0.5 / r).atan() + 0.06;
            let overlaps = intervals.iter().any(|&(c, hw)| {
                let mut d = (az - c).abs();
                if d > std::f64::consts::PI {
                    d = two_pi - d;
                }
                d < hw + halfwidth
            });
            if overlaps {
                continue;
            }
            intervals.push((az, halfwidth));
            gt_boxes.push(Box7::new(
                r * az.cos(),
                r * az.sin(),
                cfg.ground_z + 0.5 * h,
                l,
                w,
                h,
                theta,
            ));
            intensities.push(intensity);
            break;
        }
    }

    // Ray-cast every (laser, azimuth-bin-center): candidate hits on the
    // ground and on every box go into the cloud; the range image keeps the
    // closest per pixel. Hits are nudged a hair inside the box so the
    // surface points survive exact containment tests.
    let mut points = Vec::new();
    let mut hits = vec![0usize; gt_boxes.len()];
    let max_t = cfg.max_range * 1.6;
    for laser in &calib.lasers {
        let (sin_i, cos_i) = laser.inclination.sin_cos();
        for a in 0..cfg.width {
            let az = (a as f64 + 0.5) / cfg.width as f64 * two_pi;
            let (sin_a, cos_a) = az.sin_cos();
            let dir = [cos_i * cos_a, cos_i * sin_a, sin_i];
            if sin_i < -1e-9 {
                let t = cfg.ground_z / sin_i;
                if t > 0.5 && t <= max_t {
                    points.push(Point { x: dir[0] * t, y: dir[1] * t, z: dir[2] * t, intensity: 0.2 });
                }
            }
            for (bi, b) in gt_boxes.iter().enumerate() {
                if let Some((enter, exit)) = ray_box_entry([0.0, 0.0, 0.0], dir, b) {
                    let t = enter + 1e-6_f64.min(0.5 * (exit - enter));
                    if t > 0.5 && t <= max_t {
                        hits[bi] += 1;
                        points.push(Point {
                            x: dir[0] * t,
                            y: dir[1] * t,
                            z: dir[2] * t,
                            intensity: intensities[bi],
                        });
                    }
                }
            }
        }
    }
    // a box no ray observed is not ground truth
    let gt_boxes: Vec<Box7> = gt_boxes
        .into_iter()
        .zip(&hits)
        .filter_map(|(b, &h)| (h > 0).then_some(b))
        .collect();

    let cloud = PointCloud::new(points);
    let image = build_range_image(&cloud, &calib);
    SyntheticScene { gt_boxes, cloud, calib, image, res, seed }
}

/// Slab test in the box's canonical frame; returns the (entry, exit)
/// distances of the ray if it hits.
fn ray_box_entry(origin: [f64; 3], dir: [f64; 3], b: &Box7) -> Option<(f64, f64)> {
    let o = to_canonical_point(origin, b);
    // rotate the direction without translating
    let (s, c) = b.theta.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for ax in 0..3 {
        if d[ax].abs() < 1e-12 {
            if o[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let t1 = (-half[ax] - o[ax]) / d[ax];
        let t2 = (half[ax] - o[ax]) / d[ax];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    (t_enter > 0.0).then_some((t_enter, t_exit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::SceneConfig;
    use crate::rangeimage::Channel;

    fn small_cfg() -> SceneConfig {
        SceneConfig { height: 16, width: 64, max_vehicles: 3, ..Default::default() }
    }

    #[test]
    fn regeneration_is_bitwise_reproducible() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg, 7);
        let b = generate_scene(&cfg, 7);
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.image.valid(), b.image.valid());
        let c = generate_scene(&cfg, 8);
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn every_box_is_observed() {
        let cfg = small_cfg();
        for seed in 0..5 {
            let scene = generate_scene(&cfg, seed);
            for (bi, b) in scene.gt_boxes.iter().enumerate() {
                let mut count = 0;
                for row in 0..scene.image.height() {
                    for col in 0..scene.image.width() {
                        if scene.image.is_valid(row, col)
                            && b.contains(scene.image.point_at(row, col))
                        {
                            count += 1;
                        }
                    }
                }
                assert!(count >= 1, "box {} of seed {} has no pixels", bi, seed);
            }
        }
    }

    #[test]
    fn boxes_occlude_the_ground_behind_them() {
        // a close box must appear closer than the ground it covers
        let cfg = SceneConfig {
            height: 32,
            width: 128,
            min_vehicles: 1,
            max_vehicles: 1,
            min_range: 8.0,
            max_range: 9.0,
            ..Default::default()
        };
        let scene = generate_scene(&cfg, 3);
        let b = &scene.gt_boxes[0];
        let mut box_pixels = 0;
        for row in 0..scene.image.height() {
            for col in 0..scene.image.width() {
                if !scene.image.is_valid(row, col) {
                    continue;
                }
                if b.contains(scene.image.point_at(row, col)) {
                    box_pixels += 1;
                    let r = scene.image.get(row, col, Channel::Range);
                    assert!(r < 12.0, "box pixel at range {}", r);
                }
            }
        }
        assert!(box_pixels > 20, "only {} box pixels", box_pixels);
    }

    #[test]
    fn ray_box_entry_hand_case() {
        let b = Box7::new(10.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.0);
        let (enter, exit) = ray_box_entry([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], &b).unwrap();
        assert!((enter - 8.0).abs() < 1e-12);
        assert!((exit - 12.0).abs() < 1e-12);
        assert!(ray_box_entry([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], &b).is_none());
    }
}
