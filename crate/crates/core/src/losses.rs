//! Training objectives: focal classification, bin-based box regression for
//! the proposal stage, refinement classification/regression, and the joint
//! total. Every loss exposes analytic gradients w.r.t. its predictions.

use serde::{Deserialize, Serialize};

use crate::boxgeom::BoxEncoding;

/// Score clamp applied before any logarithm.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Focal loss configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    /// Weight applied to positive (foreground) samples.
    pub alpha_fg: f64,
    /// Weight applied to negative samples.
    pub alpha_bg: f64,
    /// Focusing exponent; 0 reduces to cross-entropy.
    pub focus: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha_fg: 0.25, alpha_bg: 0.75, focus: 2.0 }
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Focal loss on one sigmoid score. Returns `(loss, d loss / d score)`.
pub fn focal_loss(score: f64, positive: bool, cfg: &FocalConfig) -> (f64, f64) {
    let s = clamp_score(score);
    let (p, dp_ds) = if positive { (s, 1.0) } else { (1.0 - s, -1.0) };
    let alpha = if positive { cfg.alpha_fg } else { cfg.alpha_bg };
    let g = cfg.focus;
    let one_minus = 1.0 - p;
    let loss = -alpha * one_minus.powf(g) * p.ln();
    let dl_dp = if g == 0.0 {
        -alpha / p
    } else {
        alpha * g * one_minus.powf(g - 1.0) * p.ln() - alpha * one_minus.powf(g) / p
    };
    let gate = if (SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&score) { 1.0 } else { 0.0 };
    (loss, dl_dp * dp_ds * gate)
}

/// Binary cross-entropy on one sigmoid score. Returns `(loss, d/d score)`.
pub fn bce_loss(score: f64, positive: bool) -> (f64, f64) {
    let s = clamp_score(score);
    let gate = if (SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&score) { 1.0 } else { 0.0 };
    if positive {
        (-s.ln(), -gate / s)
    } else {
        (-(1.0 - s).ln(), gate / (1.0 - s))
    }
}

/// Smooth L1 with delta = 1. Returns `(loss, d/d residual)`.
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() <= 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Softmax cross-entropy against a one-hot target bin.
/// Returns the loss and writes `d loss / d logits` into `dlogits`.
pub fn softmax_ce(logits: &[f64], target: usize, dlogits: &mut [f64]) -> f64 {
    debug_assert_eq!(logits.len(), dlogits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &z in logits {
        denom += (z - max).exp();
    }
    let log_denom = denom.ln() + max;
    for (i, (d, &z)) in dlogits.iter_mut().zip(logits).enumerate() {
        let p = (z - max).exp() / denom;
        *d = p - if i == target { 1.0 } else { 0.0 };
    }
    log_denom - logits[target]
}

// ---------------------------------------------------------------------------
// Proposal-stage (per-pixel) losses.
// ---------------------------------------------------------------------------

/// Classification labels for one range-image pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelClsTarget {
    pub valid: bool,
    pub foreground: bool,
    /// Label for the "same object as the top neighbor" head, if that
    /// neighbor exists and is valid.
    pub top_same: Option<bool>,
    /// Same for the left neighbor.
    pub left_same: Option<bool>,
}

/// Per-pixel classification scores for the three heads (post-sigmoid).
#[derive(Debug, Clone, Copy)]
pub struct PixelClsScores {
    pub foreground: f64,
    pub top: f64,
    pub left: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PixelClsGrad {
    pub foreground: f64,
    pub top: f64,
    pub left: f64,
}

/// Mean over valid pixels of the three-head focal sum. Pixels whose top/left
/// neighbor labels are absent contribute only the heads they carry. Returns
/// the loss value, per-pixel score gradients, and a flag set when no pixel
/// was valid (loss defined as 0).
pub fn rpn_cls_loss(
    scores: &[PixelClsScores],
    targets: &[PixelClsTarget],
    cfg: &FocalConfig,
) -> (f64, Vec<PixelClsGrad>, bool) {
    assert_eq!(scores.len(), targets.len());
    let n_valid = targets.iter().filter(|t| t.valid).count();
    let mut grads = vec![PixelClsGrad::default(); scores.len()];
    if n_valid == 0 {
        return (0.0, grads, true);
    }
    let inv = 1.0 / n_valid as f64;
    let mut total = 0.0;
    for (i, (s, t)) in scores.iter().zip(targets).enumerate() {
        if !t.valid {
            continue;
        }
        let (l, d) = focal_loss(s.foreground, t.foreground, cfg);
        total += l;
        grads[i].foreground = d * inv;
        if let Some(label) = t.top_same {
            let (l, d) = focal_loss(s.top, label, cfg);
            total += l;
            grads[i].top = d * inv;
        }
        if let Some(label) = t.left_same {
            let (l, d) = focal_loss(s.left, label, cfg);
            total += l;
            grads[i].left = d * inv;
        }
    }
    (total * inv, grads, false)
}

/// Per-pixel box prediction: bin logits plus residual regressors, matching
/// the encoding produced by [`crate::boxgeom::encode_box`].
#[derive(Debug, Clone)]
pub struct BoxPrediction {
    pub x_logits: Vec<f64>,
    pub y_logits: Vec<f64>,
    pub theta_logits: Vec<f64>,
    pub x_res: f64,
    pub y_res: f64,
    pub z_res: f64,
    pub log_l: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub theta_res: f64,
}

#[derive(Debug, Clone)]
pub struct BoxPredictionGrad {
    pub x_logits: Vec<f64>,
    pub y_logits: Vec<f64>,
    pub theta_logits: Vec<f64>,
    pub x_res: f64,
    pub y_res: f64,
    pub z_res: f64,
    pub log_l: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub theta_res: f64,
}

impl BoxPredictionGrad {
    fn zeros(xy_bins: usize, heading_bins: usize) -> BoxPredictionGrad {
        BoxPredictionGrad {
            x_logits: vec![0.0; xy_bins],
            y_logits: vec![0.0; xy_bins],
            theta_logits: vec![0.0; heading_bins],
            x_res: 0.0,
            y_res: 0.0,
            z_res: 0.0,
            log_l: 0.0,
            log_w: 0.0,
            log_h: 0.0,
            theta_res: 0.0,
        }
    }
}

/// Bin loss for one prediction/target pair: cross-entropy on the x/y/heading
/// bins plus smooth-L1 on every residual term. Returns the loss and its
/// gradient, scaled by `weight`.
pub fn bin_loss(pred: &BoxPrediction, target: &BoxEncoding, weight: f64) -> (f64, BoxPredictionGrad) {
    let mut grad = BoxPredictionGrad::zeros(pred.x_logits.len(), pred.theta_logits.len());
    let mut total = 0.0;
    total += softmax_ce(&pred.x_logits, target.x_bin, &mut grad.x_logits);
    total += softmax_ce(&pred.y_logits, target.y_bin, &mut grad.y_logits);
    total += softmax_ce(&pred.theta_logits, target.theta_bin, &mut grad.theta_logits);
    let mut reg = |p: f64, t: f64, g: &mut f64| {
        let (l, d) = smooth_l1(p - t);
        total += l;
        *g = d * weight;
    };
    reg(pred.x_res, target.x_res, &mut grad.x_res);
    reg(pred.y_res, target.y_res, &mut grad.y_res);
    reg(pred.z_res, target.z_res, &mut grad.z_res);
    reg(pred.log_l, target.log_l, &mut grad.log_l);
    reg(pred.log_w, target.log_w, &mut grad.log_w);
    reg(pred.log_h, target.log_h, &mut grad.log_h);
    reg(pred.theta_res, target.theta_res, &mut grad.theta_res);
    for g in grad
        .x_logits
        .iter_mut()
        .chain(grad.y_logits.iter_mut())
        .chain(grad.theta_logits.iter_mut())
    {
        *g *= weight;
    }
    (total * weight, grad)
}

/// One foreground pixel's regression entry.
#[derive(Debug, Clone)]
pub struct RpnBoxSample {
    pub pred: BoxPrediction,
    pub target: BoxEncoding,
    /// Point count of the assigned ground-truth box (>= 1).
    pub gt_point_count: usize,
}

/// Box-regression loss over foreground pixels: each pixel's bin loss carries
/// weight `1 / n_i` (its box's point count), and the sum is divided by the
/// number of ground-truth boxes. A box's influence is therefore independent
/// of how many points it contains.
pub fn rpn_box_loss(samples: &[RpnBoxSample], n_gt_boxes: usize) -> (f64, Vec<BoxPredictionGrad>) {
    if n_gt_boxes == 0 {
        return (0.0, Vec::new());
    }
    let inv_gt = 1.0 / n_gt_boxes as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        debug_assert!(s.gt_point_count >= 1);
        let w = inv_gt / s.gt_point_count as f64;
        let (l, g) = bin_loss(&s.pred, &s.target, w);
        total += l;
        grads.push(g);
    }
    (total, grads)
}

// ---------------------------------------------------------------------------
// Refinement-stage losses.
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy over proposal scores.
pub fn rcnn_cls_loss(scores: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), labels.len());
    if scores.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / scores.len() as f64;
    let mut total = 0.0;
    let mut grads = vec![0.0; scores.len()];
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let (l, d) = bce_loss(s, y);
        total += l;
        grads[i] = d * inv;
    }
    (total * inv, grads)
}

/// Refinement regression prediction for one positive proposal: canonical
/// center residuals, log dimension ratios, and a heading bin head.
#[derive(Debug, Clone)]
pub struct RefinePrediction {
    pub center: [f64; 3],
    pub log_dims: [f64; 3],
    pub theta_logits: Vec<f64>,
    pub theta_res: f64,
}

/// Targets in the same layout.
#[derive(Debug, Clone)]
pub struct RefineTarget {
    pub center: [f64; 3],
    pub log_dims: [f64; 3],
    pub theta_bin: usize,
    pub theta_res: f64,
}

#[derive(Debug, Clone)]
pub struct RefineGrad {
    pub pred_center: [f64; 3],
    pub pred_log_dims: [f64; 3],
    pub pred_theta_logits: Vec<f64>,
    pub pred_theta_res: f64,
    /// Gradients w.r.t. the *target* values (they depend on the proposal box
    /// and must flow back through it).
    pub target_center: [f64; 3],
    pub target_log_dims: [f64; 3],
    pub target_theta_res: f64,
}

/// Smooth-L1 on canonical centers and log dims plus a heading bin loss,
/// summed over the given (positive) proposals and averaged by `m_total`
/// (the full proposal count of the batch).
pub fn rcnn_reg_loss(
    preds: &[RefinePrediction],
    targets: &[RefineTarget],
    m_total: usize,
) -> (f64, Vec<RefineGrad>) {
    assert_eq!(preds.len(), targets.len());
    if preds.is_empty() || m_total == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / m_total as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let mut g = RefineGrad {
            pred_center: [0.0; 3],
            pred_log_dims: [0.0; 3],
            pred_theta_logits: vec![0.0; p.theta_logits.len()],
            pred_theta_res: 0.0,
            target_center: [0.0; 3],
            target_log_dims: [0.0; 3],
            target_theta_res: 0.0,
        };
        for ax in 0..3 {
            let (l, d) = smooth_l1(p.center[ax] - t.center[ax]);
            total += l;
            g.pred_center[ax] = d * inv;
            g.target_center[ax] = -d * inv;
            let (l2, d2) = smooth_l1(p.log_dims[ax] - t.log_dims[ax]);
            total += l2;
            g.pred_log_dims[ax] = d2 * inv;
            g.target_log_dims[ax] = -d2 * inv;
        }
        total += softmax_ce(&p.theta_logits, t.theta_bin, &mut g.pred_theta_logits);
        for v in &mut g.pred_theta_logits {
            *v *= inv;
        }
        let (l, d) = smooth_l1(p.theta_res - t.theta_res);
        total += l;
        g.pred_theta_res = d * inv;
        g.target_theta_res = -d * inv;
        grads.push(g);
    }
    (total * inv, grads)
}

/// Joint objective: unit-weight sum of the four parts.
pub fn total_loss(rpn_cls: f64, rpn_box: f64, rcnn_cls: f64, rcnn_reg: f64) -> f64 {
    rpn_cls + rpn_box + rcnn_cls + rcnn_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::{encode_box, BinConfig, Box7};
    use crate::numerics::gradcheck::{grad_check, Differentiable};

    #[test]
    fn focal_closed_form_value() {
        let cfg = FocalConfig { alpha_fg: 0.25, alpha_bg: 0.25, focus: 2.0 };
        let (l, _) = focal_loss(0.5, true, &cfg);
        assert!((l - 0.0433217).abs() < 1e-6);
        // perfect prediction saturates to ~0
        let (l1, _) = focal_loss(1.0, true, &cfg);
        assert!(l1 < 1e-12);
    }

    #[test]
    fn focal_focus_zero_reduces_to_cross_entropy() {
        let cfg = FocalConfig { alpha_fg: 1.0, alpha_bg: 1.0, focus: 0.0 };
        for s in [0.2, 0.5, 0.9] {
            let (l, _) = focal_loss(s, true, &cfg);
            assert!((l + s.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_is_monotone_decreasing_in_p() {
        let cfg = FocalConfig::default();
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let (l, _) = focal_loss(i as f64 / 100.0, true, &cfg);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn rpn_cls_single_pixel_three_heads() {
        let cfg = FocalConfig { alpha_fg: 0.25, alpha_bg: 0.25, focus: 2.0 };
        let scores = [PixelClsScores { foreground: 0.5, top: 0.5, left: 0.5 }];
        let targets = [PixelClsTarget {
            valid: true,
            foreground: true,
            top_same: Some(true),
            left_same: Some(true),
        }];
        let (l, _, flag) = rpn_cls_loss(&scores, &targets, &cfg);
        assert!(!flag);
        assert!((l - 0.129965).abs() < 1e-6);
    }

    #[test]
    fn rpn_cls_mean_is_width_invariant() {
        let cfg = FocalConfig::default();
        let score = PixelClsScores { foreground: 0.3, top: 0.6, left: 0.8 };
        let target = PixelClsTarget {
            valid: true,
            foreground: false,
            top_same: Some(true),
            left_same: Some(false),
        };
        let (l1, _, _) = rpn_cls_loss(&[score; 4], &[target; 4], &cfg);
        let (l2, _, _) = rpn_cls_loss(&[score; 8], &[target; 8], &cfg);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn rpn_cls_zero_valid_pixels_flags() {
        let cfg = FocalConfig::default();
        let scores = [PixelClsScores { foreground: 0.5, top: 0.5, left: 0.5 }];
        let targets = [PixelClsTarget::default()];
        let (l, _, flag) = rpn_cls_loss(&scores, &targets, &cfg);
        assert_eq!(l, 0.0);
        assert!(flag);
    }

    fn sample_pair(bins: &BinConfig, exact: bool) -> RpnBoxSample {
        let gt = Box7::new(1.0, -0.5, 0.2, 4.5, 2.0, 1.6, 0.4);
        let target = encode_box([0.0, 0.0, 0.0], &gt, bins);
        let n = bins.xy_bins();
        let mut pred = BoxPrediction {
            x_logits: vec![0.0; n],
            y_logits: vec![0.0; n],
            theta_logits: vec![0.0; bins.heading_bins],
            x_res: 0.3,
            y_res: -0.2,
            z_res: 0.4,
            log_l: 0.1,
            log_w: 0.0,
            log_h: -0.1,
            theta_res: 0.2,
        };
        if exact {
            pred.x_logits[target.x_bin] = 60.0;
            pred.y_logits[target.y_bin] = 60.0;
            pred.theta_logits[target.theta_bin] = 60.0;
            pred.x_res = target.x_res;
            pred.y_res = target.y_res;
            pred.z_res = target.z_res;
            pred.log_l = target.log_l;
            pred.log_w = target.log_w;
            pred.log_h = target.log_h;
            pred.theta_res = target.theta_res;
        }
        RpnBoxSample { pred, target, gt_point_count: 1 }
    }

    #[test]
    fn perfect_predictions_saturate_to_zero() {
        let bins = BinConfig::default();
        let s = sample_pair(&bins, true);
        let (l, _) = rpn_box_loss(&[s], 1);
        assert!(l < 1e-12, "loss {}", l);
    }

    #[test]
    fn per_box_contribution_is_independent_of_point_count() {
        let bins = BinConfig::default();
        let base = sample_pair(&bins, false);
        // one box seen by 4 pixels, each weighted 1/4
        let mut four = Vec::new();
        for _ in 0..4 {
            let mut s = base.clone();
            s.gt_point_count = 4;
            four.push(s);
        }
        let (l4, _) = rpn_box_loss(&four, 1);
        let mut one = base.clone();
        one.gt_point_count = 1;
        let (l1, _) = rpn_box_loss(&[one], 1);
        assert!((l4 - l1).abs() < 1e-12);

        // duplicating every point of the box leaves the loss unchanged
        let mut eight = Vec::new();
        for _ in 0..8 {
            let mut s = base.clone();
            s.gt_point_count = 8;
            eight.push(s);
        }
        let (l8, _) = rpn_box_loss(&eight, 1);
        assert!((l8 - l4).abs() < 1e-12);
    }

    #[test]
    fn two_boxes_with_equal_losses_average_to_one() {
        let bins = BinConfig::default();
        let a = sample_pair(&bins, false);
        let b = a.clone();
        let (l2, _) = rpn_box_loss(&[a.clone(), b], 2);
        let (l1, _) = rpn_box_loss(&[a], 1);
        assert!((l2 - l1).abs() < 1e-12);
    }

    #[test]
    fn no_gt_boxes_gives_zero() {
        let (l, g) = rpn_box_loss(&[], 0);
        assert_eq!(l, 0.0);
        assert!(g.is_empty());
    }

    #[test]
    fn rcnn_cls_closed_forms_and_symmetry() {
        let (l, _) = rcnn_cls_loss(&[0.5, 0.5], &[true, false]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        let (near_zero, _) = rcnn_cls_loss(&[1.0 - 1e-9, 1e-9], &[true, false]);
        assert!(near_zero < 1e-6);
        // label-flip symmetry
        for s in [0.1, 0.4, 0.9] {
            let (a, _) = rcnn_cls_loss(&[s], &[true]);
            let (b, _) = rcnn_cls_loss(&[1.0 - s], &[false]);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_branch_values() {
        assert!((smooth_l1(0.5).0 - 0.125).abs() < 1e-12);
        assert!((smooth_l1(2.0).0 - 1.5).abs() < 1e-12);
        assert!((smooth_l1(-2.0).0 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rcnn_reg_perfect_refinement_is_zero() {
        let mut logits = vec![0.0; 12];
        logits[3] = 60.0;
        let pred = RefinePrediction {
            center: [0.0; 3],
            log_dims: [0.0; 3],
            theta_logits: logits,
            theta_res: 0.1,
        };
        let target = RefineTarget { center: [0.0; 3], log_dims: [0.0; 3], theta_bin: 3, theta_res: 0.1 };
        let (l, _) = rcnn_reg_loss(&[pred], &[target], 1);
        assert!(l < 1e-12);
    }

    #[test]
    fn rcnn_reg_smooth_l1_contributions() {
        let mk = |dx: f64| {
            let mut logits = vec![0.0; 4];
            logits[0] = 60.0;
            let pred = RefinePrediction {
                center: [dx, 0.0, 0.0],
                log_dims: [0.0; 3],
                theta_logits: logits,
                theta_res: 0.0,
            };
            let target = RefineTarget { center: [0.0; 3], log_dims: [0.0; 3], theta_bin: 0, theta_res: 0.0 };
            rcnn_reg_loss(&[pred], &[target], 1).0
        };
        assert!((mk(0.5) - 0.125).abs() < 1e-9);
        assert!((mk(2.0) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn total_is_a_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((total_loss(0.1, 0.2, 0.3, 0.4) - 1.0).abs() < 1e-12);
    }

    // gradient checks

    struct FocalFn(FocalConfig, bool);
    impl Differentiable for FocalFn {
        fn input_len(&self) -> usize {
            1
        }
        fn output_len(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64]) -> Vec<f64> {
            vec![focal_loss(x[0], self.1, &self.0).0]
        }
        fn vjp(&self, x: &[f64], up: &[f64]) -> Vec<f64> {
            vec![focal_loss(x[0], self.1, &self.0).1 * up[0]]
        }
    }

    struct BinLossFn {
        target: BoxEncoding,
        bins: BinConfig,
    }
    impl BinLossFn {
        fn unpack(&self, x: &[f64]) -> BoxPrediction {
            let n = self.bins.xy_bins();
            let hb = self.bins.heading_bins;
            BoxPrediction {
                x_logits: x[..n].to_vec(),
                y_logits: x[n..2 * n].to_vec(),
                theta_logits: x[2 * n..2 * n + hb].to_vec(),
                x_res: x[2 * n + hb],
                y_res: x[2 * n + hb + 1],
                z_res: x[2 * n + hb + 2],
                log_l: x[2 * n + hb + 3],
                log_w: x[2 * n + hb + 4],
                log_h: x[2 * n + hb + 5],
                theta_res: x[2 * n + hb + 6],
            }
        }
    }
    impl Differentiable for BinLossFn {
        fn input_len(&self) -> usize {
            2 * self.bins.xy_bins() + self.bins.heading_bins + 7
        }
        fn output_len(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64]) -> Vec<f64> {
            vec![bin_loss(&self.unpack(x), &self.target, 0.7).0]
        }
        fn vjp(&self, x: &[f64], up: &[f64]) -> Vec<f64> {
            let (_, g) = bin_loss(&self.unpack(x), &self.target, 0.7);
            let mut out = Vec::with_capacity(self.input_len());
            out.extend(&g.x_logits);
            out.extend(&g.y_logits);
            out.extend(&g.theta_logits);
            out.extend([g.x_res, g.y_res, g.z_res, g.log_l, g.log_w, g.log_h, g.theta_res]);
            for v in &mut out {
                *v *= up[0];
            }
            out
        }
    }

    #[test]
    fn loss_gradients_pass_finite_difference_checks() {
        for seed in 0..10u64 {
            let f = FocalFn(FocalConfig::default(), seed % 2 == 0);
            let s = 0.1 + 0.08 * seed as f64;
            let report = grad_check(&f, &[s], seed, 1e-5).unwrap();
            assert!(report.passed, "focal rel err {}", report.max_rel_error);
        }

        let bins = BinConfig::default();
        let gt = Box7::new(0.8, -0.4, 0.3, 4.2, 2.2, 1.5, 1.1);
        let target = encode_box([0.0, 0.0, 0.0], &gt, &bins);
        let f = BinLossFn { target, bins };
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        // avoid the smooth-L1 kink at |d| = 1 by keeping residual preds small
        let x: Vec<f64> = (0..f.input_len()).map(|_| rng.gen_range(-0.45..0.45)).collect();
        let report = grad_check(&f, &x, 7, 1e-5).unwrap();
        assert!(report.passed, "bin loss rel err {}", report.max_rel_error);
    }

    #[test]
    fn losses_are_nonnegative_and_finite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = FocalConfig::default();
        for _ in 0..200 {
            let s: f64 = rng.gen_range(-0.5..1.5);
            let (l, d) = focal_loss(s, rng.gen_bool(0.5), &cfg);
            assert!(l >= 0.0 && l.is_finite() && d.is_finite());
            let (lb, db) = bce_loss(s, rng.gen_bool(0.5));
            assert!(lb >= 0.0 && lb.is_finite() && db.is_finite());
        }
    }
}
