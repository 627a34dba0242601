//! Ground-truth targets for the proposal stage, derived from a synthetic
//! scene: per-pixel foreground and neighbor-similarity labels, ground-truth
//! assignment, per-box point counts, and bin-coded box targets.

use crate::boxgeom::{encode_box, BinConfig, BoxEncoding};
use crate::detector::scene::SyntheticScene;
use crate::losses::PixelClsTarget;

#[derive(Debug, Clone)]
pub struct RpnTargets {
    pub cls: Vec<PixelClsTarget>,
    /// Ground-truth box index per pixel, foreground pixels only.
    pub assigned_gt: Vec<Option<usize>>,
    /// Valid pixels whose point lies inside each ground-truth box.
    pub gt_point_count: Vec<usize>,
    pub box_targets: Vec<Option<BoxEncoding>>,
    pub n_gt: usize,
}

pub fn build_targets(scene: &SyntheticScene, bins: &BinConfig) -> RpnTargets {
    let (h, w) = (scene.image.height(), scene.image.width());
    let n = h * w;
    let mut assigned_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_point_count = vec![0usize; scene.gt_boxes.len()];

    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            if !scene.image.is_valid(row, col) {
                continue;
            }
            let p = scene.image.point_at(row, col);
            for (bi, b) in scene.gt_boxes.iter().enumerate() {
                if b.contains(p) {
                    assigned_gt[pix] = Some(bi);
                    gt_point_count[bi] += 1;
                    break;
                }
            }
        }
    }

    let mut cls = vec![PixelClsTarget::default(); n];
    let mut box_targets: Vec<Option<BoxEncoding>> = vec![None; n];
    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            if !scene.image.is_valid(row, col) {
                continue;
            }
            let fg = assigned_gt[pix];
            let mut t = PixelClsTarget {
                valid: true,
                foreground: fg.is_some(),
                top_same: None,
                left_same: None,
            };
            // top neighbor: one row up, no wrap
            if row > 0 && scene.image.is_valid(row - 1, col) {
                let other = assigned_gt[(row - 1) * w + col];
                t.top_same = Some(fg.is_some() && fg == other);
            }
            // left neighbor: previous column, wrapping the 360 degree seam
            let lcol = (col + w - 1) % w;
            if scene.image.is_valid(row, lcol) {
                let other = assigned_gt[row * w + lcol];
                t.left_same = Some(fg.is_some() && fg == other);
            }
            cls[pix] = t;
            if let Some(bi) = fg {
                let p = scene.image.point_at(row, col);
                box_targets[pix] = Some(encode_box(p, &scene.gt_boxes[bi], bins));
            }
        }
    }

    RpnTargets {
        cls,
        assigned_gt,
        gt_point_count,
        box_targets,
        n_gt: scene.gt_boxes.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::scene::generate_scene;
    use crate::detector::SceneConfig;

    #[test]
    fn foreground_pixels_carry_targets_and_counts() {
        let cfg = SceneConfig { height: 16, width: 64, max_vehicles: 2, ..Default::default() };
        let scene = generate_scene(&cfg, 11);
        let targets = build_targets(&scene, &BinConfig::default());
        let mut fg = 0;
        for (pix, t) in targets.cls.iter().enumerate() {
            if t.foreground {
                fg += 1;
                let bi = targets.assigned_gt[pix].unwrap();
                assert!(targets.gt_point_count[bi] >= 1);
                assert!(targets.box_targets[pix].is_some());
            }
        }
        assert!(fg > 0);
        let total: usize = targets.gt_point_count.iter().sum();
        assert_eq!(total, fg);
    }

    #[test]
    fn similarity_labels_respect_box_membership() {
        let cfg = SceneConfig {
            height: 24,
            width: 96,
            min_vehicles: 1,
            max_vehicles: 1,
            min_range: 8.0,
            max_range: 10.0,
            ..Default::default()
        };
        let scene = generate_scene(&cfg, 5);
        let targets = build_targets(&scene, &BinConfig::default());
        let w = scene.image.width();
        let mut same_top = 0;
        for row in 1..scene.image.height() {
            for col in 0..w {
                let pix = row * w + col;
                if let Some(true) = targets.cls[pix].top_same {
                    same_top += 1;
                    assert!(targets.cls[pix].foreground);
                    assert_eq!(targets.assigned_gt[pix], targets.assigned_gt[pix - w]);
                }
            }
        }
        // a near vehicle spans many rows, so interior pixels exist
        assert!(same_top > 5, "{}", same_top);
    }

    #[test]
    fn top_row_has_no_top_neighbor_head() {
        let cfg = SceneConfig { height: 8, width: 32, ..Default::default() };
        let scene = generate_scene(&cfg, 1);
        let targets = build_targets(&scene, &BinConfig::default());
        for col in 0..32 {
            assert!(targets.cls[col].top_same.is_none());
        }
    }
}
