//! 7-DOF oriented box algebra: rotated IoU (BEV and 3D), canonical-frame
//! transforms, fixed-grid feature pooling, NMS, and bin-based box encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid resolution for per-box feature pooling, in (length, width, height)
/// cell counts.
pub const POOL_GRID: [usize; 3] = [12, 8, 6];

/// Oriented 3D box: center, dimensions, heading about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Box7 {
        Box7 { x, y, z, l, w, h, theta: wrap_angle(theta) }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let mut out = [[0.0; 2]; 4];
        for (i, (dx, dy)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
            out[i] = [self.x + c * dx - s * dy, self.y + s * dx + c * dy];
        }
        out
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// True when the point lies inside the box (boundaries inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let c = to_canonical_point(p, self);
        c[0].abs() <= 0.5 * self.l && c[1].abs() <= 0.5 * self.w && c[2].abs() <= 0.5 * self.h
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }
}

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_angle(t: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v = t - two_pi * ((t + std::f64::consts::PI) / two_pi).floor();
    // floor rounding can leave v == pi when t is a hair below a wrap point
    if v >= std::f64::consts::PI {
        v -= two_pi;
    }
    if v < -std::f64::consts::PI {
        v += two_pi;
    }
    v
}

/// BEV intersection-over-union of two rotated rectangles via convex polygon
/// clipping.
pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection area of the two BEV footprints.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    let subject: Vec<[f64; 2]> = a.bev_corners().to_vec();
    let clip = b.bev_corners();
    let mut poly = subject;
    for i in 0..4 {
        let e0 = clip[i];
        let e1 = clip[(i + 1) % 4];
        poly = clip_by_edge(&poly, e0, e1);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Sutherland-Hodgman step: keep the part of `poly` on the left of edge
/// `e0 -> e1` (clip polygon is counter-clockwise).
fn clip_by_edge(poly: &[[f64; 2]], e0: [f64; 2], e1: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0]);
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let sc = side(cur);
        let sp = side(prev);
        if sc >= 0.0 {
            if sp < 0.0 {
                out.push(intersect_lines(prev, cur, e0, e1));
            }
            out.push(cur);
        } else if sp >= 0.0 {
            out.push(intersect_lines(prev, cur, e0, e1));
        }
    }
    out
}

fn intersect_lines(p0: [f64; 2], p1: [f64; 2], q0: [f64; 2], q1: [f64; 2]) -> [f64; 2] {
    let d1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let d2 = [q1[0] - q0[0], q1[1] - q0[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-300 {
        return p1;
    }
    let t = ((q0[0] - p0[0]) * d2[1] - (q0[1] - p0[1]) * d2[0]) / denom;
    [p0[0] + t * d1[0], p0[1] + t * d1[1]]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// 3D IoU: BEV intersection area times vertical overlap, over volume union.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    let zlo = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let zhi = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    let dz = (zhi - zlo).max(0.0);
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Transform a world-frame point into the box's canonical frame: translate by
/// the negated center, rotate by the negated heading. Box corners map to
/// `(+-l/2, +-w/2, +-h/2)`.
pub fn to_canonical_point(p: [f64; 3], b: &Box7) -> [f64; 3] {
    let (s, c) = b.theta.sin_cos();
    let dx = p[0] - b.x;
    let dy = p[1] - b.y;
    [c * dx + s * dy, -s * dx + c * dy, p[2] - b.z]
}

/// Inverse of [`to_canonical_point`].
pub fn from_canonical_point(p: [f64; 3], b: &Box7) -> [f64; 3] {
    let (s, c) = b.theta.sin_cos();
    [b.x + c * p[0] - s * p[1], b.y + s * p[0] + c * p[1], b.z + p[2]]
}

pub fn to_canonical(points: &[[f64; 3]], b: &Box7) -> Vec<[f64; 3]> {
    points.iter().map(|&p| to_canonical_point(p, b)).collect()
}

/// How a pooled channel aggregates the points that fall in a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Features pooled over the fixed 12x8x6 canonical grid of one box.
#[derive(Debug, Clone)]
pub struct PooledBoxFeatures {
    /// `[12 * 8 * 6, channels]` row-major over (length, width, height) cells.
    pub grid: Vec<f64>,
    pub channels: usize,
    pub semantics: Vec<PoolKind>,
    /// Points-per-cell occupancy, for sparse downstream consumers.
    pub counts: Vec<u32>,
}

impl PooledBoxFeatures {
    pub fn cells() -> usize {
        POOL_GRID[0] * POOL_GRID[1] * POOL_GRID[2]
    }
}

/// Map a canonical coordinate to its grid cell, or `None` if outside the box.
///
/// Floor convention at interior bin edges; the upper box boundary is clamped
/// inward so points exactly on it land in the last cell.
pub fn grid_cell(canon: [f64; 3], b: &Box7) -> Option<[usize; 3]> {
    let dims = [b.l, b.w, b.h];
    let mut cell = [0usize; 3];
    for ax in 0..3 {
        let half = 0.5 * dims[ax];
        if canon[ax] < -half || canon[ax] > half {
            return None;
        }
        let t = (canon[ax] + half) / dims[ax] * POOL_GRID[ax] as f64;
        cell[ax] = (t.floor() as usize).min(POOL_GRID[ax] - 1);
    }
    Some(cell)
}

pub fn cell_flat_index(cell: [usize; 3]) -> usize {
    (cell[0] * POOL_GRID[1] + cell[1]) * POOL_GRID[2] + cell[2]
}

/// Pool per-point features into the canonical 12x8x6 grid of `b`.
///
/// `semantics[c]` selects average or max pooling for channel `c`; empty cells
/// stay zero.
pub fn grid_pool(
    points: &[[f64; 3]],
    features: &[f64],
    b: &Box7,
    semantics: &[PoolKind],
) -> Result<PooledBoxFeatures> {
    let channels = semantics.len();
    if points.len() * channels != features.len() {
        return Err(Error::dimension("grid_pool", "features not aligned with points"));
    }
    let cells = PooledBoxFeatures::cells();
    let mut grid = vec![0.0; cells * channels];
    let mut counts = vec![0u32; cells];

    for (pi, &p) in points.iter().enumerate() {
        let canon = to_canonical_point(p, b);
        let Some(cell) = grid_cell(canon, b) else { continue };
        let ci = cell_flat_index(cell);
        let fs = &features[pi * channels..(pi + 1) * channels];
        let out = &mut grid[ci * channels..(ci + 1) * channels];
        if counts[ci] == 0 {
            out.copy_from_slice(fs);
        } else {
            for (c, (&f, o)) in fs.iter().zip(out.iter_mut()).enumerate() {
                match semantics[c] {
                    PoolKind::Avg => *o += f,
                    PoolKind::Max => {
                        if f > *o {
                            *o = f;
                        }
                    }
                }
            }
        }
        counts[ci] += 1;
    }
    for ci in 0..cells {
        if counts[ci] > 1 {
            let inv = 1.0 / counts[ci] as f64;
            for (c, kind) in semantics.iter().enumerate() {
                if *kind == PoolKind::Avg {
                    grid[ci * channels + c] *= inv;
                }
            }
        }
    }
    Ok(PooledBoxFeatures { grid, channels, semantics: semantics.to_vec(), counts })
}

/// Greedy non-maximum suppression by descending score with deterministic
/// index tie-break; returns kept indices.
pub fn nms(boxes: &[Box7], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|&k| bev_iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Bin-based box encoding.
// ---------------------------------------------------------------------------

/// Binning scheme for box regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinConfig {
    /// Half-width of the x/y search window, meters.
    pub search_range: f64,
    /// Bin size along x/y, meters.
    pub bin_size: f64,
    /// Number of heading bins over the full circle.
    pub heading_bins: usize,
    /// Class anchor dimensions (l, w, h), meters.
    pub anchor_dims: [f64; 3],
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig { search_range: 3.0, bin_size: 0.5, heading_bins: 12, anchor_dims: [4.7, 2.1, 1.7] }
    }
}

impl BinConfig {
    pub fn xy_bins(&self) -> usize {
        (2.0 * self.search_range / self.bin_size).round() as usize
    }

    pub fn heading_bin_width(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.heading_bins as f64
    }
}

/// Bin-coded regression target relative to an observation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEncoding {
    pub x_bin: usize,
    pub x_res: f64,
    pub y_bin: usize,
    pub y_res: f64,
    pub z_res: f64,
    pub log_l: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub theta_bin: usize,
    pub theta_res: f64,
    /// Set when the center offset fell outside the search range and was
    /// clamped to an edge bin.
    pub clamped: bool,
}

fn encode_axis(delta: f64, cfg: &BinConfig) -> (usize, f64, bool) {
    let n = cfg.xy_bins();
    let t = (delta + cfg.search_range) / cfg.bin_size;
    let raw = t.floor() as i64;
    let clamped = raw < 0 || raw >= n as i64;
    let bin = raw.clamp(0, n as i64 - 1) as usize;
    let center = -cfg.search_range + (bin as f64 + 0.5) * cfg.bin_size;
    ((bin), (delta - center) / cfg.bin_size, clamped)
}

/// Encode `gt` relative to `point` into bin indices and residuals.
pub fn encode_box(point: [f64; 3], gt: &Box7, cfg: &BinConfig) -> BoxEncoding {
    let (x_bin, x_res, cx) = encode_axis(gt.x - point[0], cfg);
    let (y_bin, y_res, cy) = encode_axis(gt.y - point[1], cfg);
    let two_pi = 2.0 * std::f64::consts::PI;
    let bw = cfg.heading_bin_width();
    let t = gt.theta.rem_euclid(two_pi);
    let theta_bin = ((t / bw).floor() as usize).min(cfg.heading_bins - 1);
    let center = (theta_bin as f64 + 0.5) * bw;
    BoxEncoding {
        x_bin,
        x_res,
        y_bin,
        y_res,
        z_res: gt.z - point[2],
        log_l: (gt.l / cfg.anchor_dims[0]).ln(),
        log_w: (gt.w / cfg.anchor_dims[1]).ln(),
        log_h: (gt.h / cfg.anchor_dims[2]).ln(),
        theta_bin,
        theta_res: (t - center) / bw,
        clamped: cx || cy,
    }
}

/// Exact inverse of [`encode_box`] on the representable domain.
pub fn decode_box(point: [f64; 3], enc: &BoxEncoding, cfg: &BinConfig) -> Box7 {
    let axis = |bin: usize, res: f64| {
        let center = -cfg.search_range + (bin as f64 + 0.5) * cfg.bin_size;
        center + res * cfg.bin_size
    };
    let bw = cfg.heading_bin_width();
    let theta = (enc.theta_bin as f64 + 0.5) * bw + enc.theta_res * bw;
    Box7::new(
        point[0] + axis(enc.x_bin, enc.x_res),
        point[1] + axis(enc.y_bin, enc.y_res),
        point[2] + enc.z_res,
        cfg.anchor_dims[0] * enc.log_l.exp(),
        cfg.anchor_dims[1] * enc.log_w.exp(),
        cfg.anchor_dims[2] * enc.log_h.exp(),
        theta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square(x: f64, y: f64, theta: f64) -> Box7 {
        Box7::new(x, y, 0.0, 1.0, 1.0, 1.0, theta)
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = Box7::new(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.3);
        assert!((bev_iou(&b, &b) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_unit_squares_iou_is_one_third() {
        let a = unit_square(0.0, 0.0, 0.0);
        let b = unit_square(0.5, 0.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn rotated_square_iou_matches_octagon_closed_form() {
        let a = unit_square(0.0, 0.0, 0.0);
        let b = unit_square(0.0, 0.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0_f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((bev_iou(&a, &b) - expected).abs() < 1e-3);
        // polygon clipping should actually be far tighter than the spec bound
        assert!((bev_iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn stacked_boxes_without_z_overlap_have_zero_3d_iou() {
        let a = Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = Box7::new(0.0, 0.0, 2.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn unit_cubes_offset_in_z_only() {
        let a = Box7::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = Box7::new(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn canonical_transform_maps_center_to_origin() {
        let b = Box7::new(3.0, -2.0, 1.0, 4.0, 2.0, 1.5, 0.7);
        let c = to_canonical_point([3.0, -2.0, 1.0], &b);
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn canonical_transform_front_center_quarter_turn() {
        let b = Box7::new(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, std::f64::consts::FRAC_PI_2);
        // front-center of the box sits at +l/2 along the heading direction
        let front = [0.0, 2.0, 0.0];
        let c = to_canonical_point(front, &b);
        assert!((c[0] - 2.0).abs() < 1e-12);
        assert!(c[1].abs() < 1e-12);
    }

    #[test]
    fn canonical_round_trip_is_identity() {
        let b = Box7::new(1.0, 2.0, 3.0, 4.0, 2.0, 1.5, -1.1);
        let p = [0.3, -0.7, 2.9];
        let rt = from_canonical_point(to_canonical_point(p, &b), &b);
        for i in 0..3 {
            assert!((rt[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_pool_avg_and_max_semantics() {
        let b = Box7::new(0.0, 0.0, 0.0, 12.0, 8.0, 6.0, 0.0);
        // two points in the same cell
        let points = [[-5.6, -3.6, -2.6], [-5.7, -3.7, -2.7]];
        let features = [2.0, 2.0, 4.0, 4.0];
        let pooled = grid_pool(&points, &features, &b, &[PoolKind::Avg, PoolKind::Max]).unwrap();
        let ci = cell_flat_index([0, 0, 0]);
        assert!((pooled.grid[ci * 2] - 3.0).abs() < 1e-12);
        assert!((pooled.grid[ci * 2 + 1] - 4.0).abs() < 1e-12);
        assert_eq!(pooled.counts[ci], 2);
    }

    #[test]
    fn grid_pool_single_point_passes_through() {
        let b = Box7::new(0.0, 0.0, 0.0, 12.0, 8.0, 6.0, 0.0);
        let points = [[1.3, 2.1, -0.4]];
        let features = [7.5];
        let pooled = grid_pool(&points, &features, &b, &[PoolKind::Avg]).unwrap();
        let total: f64 = pooled.grid.iter().sum();
        assert!((total - 7.5).abs() < 1e-12);
    }

    #[test]
    fn grid_cell_boundary_goes_to_higher_index() {
        let b = Box7::new(0.0, 0.0, 0.0, 12.0, 8.0, 6.0, 0.0);
        // x = -5.0 is exactly the boundary between cells 0 and 1 along length
        let cell = grid_cell([-5.0, 0.0, 0.0], &b).unwrap();
        assert_eq!(cell[0], 1);
        // upper box edge clamps inward
        let top = grid_cell([6.0, 0.0, 0.0], &b).unwrap();
        assert_eq!(top[0], 11);
    }

    #[test]
    fn nms_keeps_highest_scoring_duplicate() {
        let b = unit_square(0.0, 0.0, 0.0);
        let kept = nms(&[b, b], &[0.9, 0.8], 0.7, 100);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let boxes = vec![unit_square(0.0, 0.0, 0.0), unit_square(5.0, 0.0, 0.0), unit_square(10.0, 0.0, 0.0)];
        let kept = nms(&boxes, &[0.5, 0.9, 0.7], 0.5, 100);
        assert_eq!(kept, vec![1, 2, 0]);
    }

    #[test]
    fn nms_respects_max_keep_with_duplicates() {
        let mut boxes = vec![unit_square(0.0, 0.0, 0.0); 500];
        let mut scores: Vec<f64> = (0..500).map(|i| 0.5 + (i as f64) * 1e-6).collect();
        for i in 0..10 {
            boxes.push(unit_square(10.0 + 3.0 * i as f64, 0.0, 0.0));
            scores.push(0.4);
        }
        let kept = nms(&boxes, &scores, 0.7, 400);
        assert_eq!(kept.len(), 11);
    }

    #[test]
    fn encode_zero_offset_lands_in_center_bin_with_zero_residuals() {
        let cfg = BinConfig::default();
        let gt = Box7::new(
            0.0,
            0.0,
            0.0,
            cfg.anchor_dims[0],
            cfg.anchor_dims[1],
            cfg.anchor_dims[2],
            0.5 * cfg.heading_bin_width(),
        );
        let enc = encode_box([gt.x - 0.25, gt.y - 0.25, gt.z], &gt, &cfg);
        assert_eq!(enc.x_bin, 6);
        assert_eq!(enc.y_bin, 6);
        assert!(enc.x_res.abs() < 1e-12);
        assert!(enc.y_res.abs() < 1e-12);
        assert!(enc.z_res.abs() < 1e-12);
        assert!(enc.log_l.abs() < 1e-12);
        assert!(enc.theta_res.abs() < 1e-12);
        assert!(!enc.clamped);
    }

    #[test]
    fn encode_hand_computed_bin_and_residual() {
        let cfg = BinConfig::default();
        let gt = Box7::new(0.74, 0.0, 0.0, 4.7, 2.1, 1.7, 0.0);
        let enc = encode_box([0.0, 0.0, 0.0], &gt, &cfg);
        // dx = 0.74 falls in the [0.5, 1.0) cell
        assert_eq!(enc.x_bin, 7);
        assert!((enc.x_res - (-0.02)).abs() < 1e-12);
    }

    #[test]
    fn encode_out_of_range_clamps_and_flags() {
        let cfg = BinConfig::default();
        let gt = Box7::new(5.0, 0.0, 0.0, 4.7, 2.1, 1.7, 0.0);
        let enc = encode_box([0.0, 0.0, 0.0], &gt, &cfg);
        assert!(enc.clamped);
        assert_eq!(enc.x_bin, cfg.xy_bins() - 1);
    }

    #[test]
    fn encode_decode_round_trip_over_random_boxes() {
        let cfg = BinConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let p = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0)];
            let gt = Box7::new(
                p[0] + rng.gen_range(-2.9..2.9),
                p[1] + rng.gen_range(-2.9..2.9),
                p[2] + rng.gen_range(-1.0..1.0),
                rng.gen_range(3.0..6.0),
                rng.gen_range(1.5..2.5),
                rng.gen_range(1.2..2.2),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let enc = encode_box(p, &gt, &cfg);
            assert!(!enc.clamped);
            let back = decode_box(p, &enc, &cfg);
            for (a, b) in back.as_array().iter().zip(gt.as_array()) {
                assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn iou_symmetry_and_heading_pi_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            assert!((bev_iou(&a, &b) - bev_iou(&b, &a)).abs() < 1e-12);
            let mut flipped = a;
            flipped.theta = wrap_angle(a.theta + std::f64::consts::PI);
            assert!((bev_iou(&a, &b) - bev_iou(&flipped, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let base = bev_iou(&a, &b);
            let (tx, ty) = (rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0));
            let rot: f64 = rng.gen_range(-3.0..3.0);
            let (s, c) = rot.sin_cos();
            let mv = |bx: &Box7| {
                Box7::new(
                    c * bx.x - s * bx.y + tx,
                    s * bx.x + c * bx.y + ty,
                    bx.z,
                    bx.l,
                    bx.w,
                    bx.h,
                    bx.theta + rot,
                )
            };
            assert!((bev_iou(&mv(&a), &mv(&b)) - base).abs() < 1e-9);
        }
    }

    pub(super) fn random_box(rng: &mut ChaCha8Rng) -> Box7 {
        Box7::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..6.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..2.5),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
    }
}
