//! The end-to-end trainable composite: proposal network plus refinement
//! stage under the joint objective, with a full analytic backward pass and
//! the inference path.

use rand::Rng;

use crate::boxgeom::{nms, to_canonical_point, BinConfig, Box7};
use crate::detector::layers::add_into;
use crate::detector::proposals::{select_proposals_infer, select_proposals_train, ProposalSet};
use crate::detector::rcnn::{
    apply_refinement, rcnn_backward, rcnn_forward, RcnnOutput, RcnnOutputGrad, RcnnParams, RcnnState,
};
use crate::detector::rpn::{rpn_backward, rpn_forward, RpnHeads, RpnHeadsGrad, RpnParams, RpnState};
use crate::detector::scene::SyntheticScene;
use crate::detector::targets::RpnTargets;
use crate::detector::{NetConfig, TrainerConfig};
use crate::error::{Error, Result};
use crate::losses::{
    rcnn_cls_loss, rcnn_reg_loss, rpn_box_loss, rpn_cls_loss, BoxPredictionGrad, FocalConfig,
    PixelClsGrad, PixelClsScores, RefineGrad, RefinePrediction, RefineTarget, RpnBoxSample,
};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Param, Tensor};
use crate::rangeimage::RangeImage;
use crate::rcd::AngularResolution;

#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub rpn: RpnParams,
    pub rcnn: RcnnParams,
}

impl DetectorParams {
    pub fn init(net: &NetConfig, bins: &BinConfig, rng: &mut impl Rng) -> DetectorParams {
        DetectorParams { rpn: RpnParams::init(net, bins, rng), rcnn: RcnnParams::init(net, bins, rng) }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = self.rpn.named_params();
        out.extend(self.rcnn.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = self.rpn.named_params_mut();
        out.extend(self.rcnn.named_params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, p) in self.named_params() {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_param_vector(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, p) in self.named_params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn grad_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, p) in self.named_params() {
            out.extend_from_slice(p.grad.data());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        crate::losses::total_loss(self.rpn_cls, self.rpn_box, self.rcnn_cls, self.rcnn_reg)
    }
}

/// Everything backward needs, including the loss gradients computed at
/// forward time.
pub struct ForwardState {
    pub heads: RpnHeads,
    rpn_state: RpnState,
    pub proposals: ProposalSet,
    rcnn_outs: Vec<RcnnOutput>,
    rcnn_state: RcnnState,
    cls_scores: Vec<PixelClsScores>,
    cls_grads: Vec<PixelClsGrad>,
    box_sample_pixels: Vec<usize>,
    box_grads: Vec<BoxPredictionGrad>,
    rcnn_cls_grads: Vec<f64>,
    positive_indices: Vec<usize>,
    refine_grads: Vec<RefineGrad>,
    target_centers: Vec<[f64; 3]>,
}

/// Forward pass over one scene: losses plus retained state.
pub fn forward_loss(
    scene: &SyntheticScene,
    targets: &RpnTargets,
    params: &DetectorParams,
    focal: &FocalConfig,
    bins: &BinConfig,
    trainer: &TrainerConfig,
    subsample_seed: u64,
) -> Result<(LossParts, ForwardState)> {
    let image = &scene.image;
    let (heads, rpn_state) = rpn_forward(image, &params.rpn, &scene.res)?;
    let (h, w) = (image.height(), image.width());

    // per-pixel classification
    let fg = heads.fg_logit.data();
    let top = heads.top_logit.data();
    let left = heads.left_logit.data();
    let cls_scores: Vec<PixelClsScores> = (0..h * w)
        .map(|i| PixelClsScores {
            foreground: sigmoid(fg[i]),
            top: sigmoid(top[i]),
            left: sigmoid(left[i]),
        })
        .collect();
    let (rpn_cls, cls_grads, _empty) = rpn_cls_loss(&cls_scores, &targets.cls, focal);

    // per-pixel box regression over foreground pixels
    let layout = params.rpn.layout;
    let bch = layout.channels();
    let mut samples = Vec::new();
    let mut box_sample_pixels = Vec::new();
    for pix in 0..h * w {
        let Some(enc) = &targets.box_targets[pix] else { continue };
        let raw = &heads.box_raw.data()[pix * bch..(pix + 1) * bch];
        let gt_count = targets.gt_point_count[targets.assigned_gt[pix].unwrap()];
        samples.push(RpnBoxSample {
            pred: layout.extract(raw),
            target: *enc,
            gt_point_count: gt_count,
        });
        box_sample_pixels.push(pix);
    }
    let (rpn_box, box_grads) = rpn_box_loss(&samples, targets.n_gt);

    // proposal subsampling and the refinement stage
    let proposals = select_proposals_train(
        &heads,
        image,
        targets,
        &scene.gt_boxes,
        bins,
        &layout,
        trainer.proposals_pos,
        trainer.proposals_neg,
        subsample_seed,
    );
    let (rcnn_outs, rcnn_state) =
        rcnn_forward(&proposals.proposals, image, &heads, &params.rcnn, bins, &layout);

    let labels: Vec<bool> = proposals.proposals.iter().map(|p| p.positive).collect();
    let scores: Vec<f64> = rcnn_outs.iter().map(|o| o.score).collect();
    let (rcnn_cls, rcnn_cls_grads) = rcnn_cls_loss(&scores, &labels);

    // refinement regression on positives, averaged over the full set
    let mut positive_indices = Vec::new();
    let mut preds: Vec<RefinePrediction> = Vec::new();
    let mut refine_targets = Vec::new();
    let mut target_centers = Vec::new();
    for (k, p) in proposals.proposals.iter().enumerate() {
        if !p.positive {
            continue;
        }
        let gt = &scene.gt_boxes[p.matched_gt.expect("positive proposals carry a match")];
        let (target, tc) = refine_target(gt, &p.box7, bins);
        positive_indices.push(k);
        preds.push(rcnn_outs[k].refine.clone());
        refine_targets.push(target);
        target_centers.push(tc);
    }
    let (rcnn_reg, refine_grads) = rcnn_reg_loss(&preds, &refine_targets, proposals.proposals.len());

    let parts = LossParts { rpn_cls, rpn_box, rcnn_cls, rcnn_reg };
    if !parts.total().is_finite() {
        return Err(Error::NonFinite { stage: "loss" });
    }
    Ok((
        parts,
        ForwardState {
            heads,
            rpn_state,
            proposals,
            rcnn_outs,
            rcnn_state,
            cls_scores,
            cls_grads,
            box_sample_pixels,
            box_grads,
            rcnn_cls_grads,
            positive_indices,
            refine_grads,
            target_centers,
        },
    ))
}

/// Encode a refinement target for a matched ground truth relative to its
/// proposal box; also returns the canonical target center for the backward
/// pass.
fn refine_target(gt: &Box7, proposal: &Box7, bins: &BinConfig) -> (RefineTarget, [f64; 3]) {
    let tc = to_canonical_point(gt.center(), proposal);
    let bw = bins.heading_bin_width();
    let delta = (gt.theta - proposal.theta).rem_euclid(2.0 * std::f64::consts::PI);
    let bin = ((delta / bw).floor() as usize).min(bins.heading_bins - 1);
    let res = (delta - (bin as f64 + 0.5) * bw) / bw;
    (
        RefineTarget {
            center: tc,
            log_dims: [
                (gt.l / proposal.l).ln(),
                (gt.w / proposal.w).ln(),
                (gt.h / proposal.h).ln(),
            ],
            theta_bin: bin,
            theta_res: res,
        },
        tc,
    )
}

/// Backward pass: routes the stored loss gradients through both stages,
/// accumulating into every parameter's gradient buffer. `weights` scales the
/// four loss parts (all ones for the joint objective).
pub fn backward_loss(
    weights: [f64; 4],
    scene: &SyntheticScene,
    state: &ForwardState,
    params: &mut DetectorParams,
    bins: &BinConfig,
) -> Result<()> {
    let image = &scene.image;
    let layout = params.rpn.layout;
    let mut heads_grad = RpnHeadsGrad::zeros_like(&state.heads);

    // per-pixel classification heads (chain through the sigmoids)
    {
        let fgd = heads_grad.fg_logit.data_mut();
        let topd = heads_grad.top_logit.data_mut();
        let leftd = heads_grad.left_logit.data_mut();
        for (i, g) in state.cls_grads.iter().enumerate() {
            let s = &state.cls_scores[i];
            fgd[i] += weights[0] * g.foreground * s.foreground * (1.0 - s.foreground);
            topd[i] += weights[0] * g.top * s.top * (1.0 - s.top);
            leftd[i] += weights[0] * g.left * s.left * (1.0 - s.left);
        }
    }

    // per-pixel box regression
    {
        let bch = layout.channels();
        let braw = heads_grad.box_raw.data_mut();
        for (g, &pix) in state.box_grads.iter().zip(&state.box_sample_pixels) {
            let mut scaled = g.clone();
            scale_box_grad(&mut scaled, weights[1]);
            layout.pack_grad(&scaled, &mut braw[pix * bch..(pix + 1) * bch]);
        }
    }

    // refinement outputs
    let hb = params.rcnn.heading_bins;
    let n_props = state.proposals.proposals.len();
    let mut out_grads: Vec<RcnnOutputGrad> = (0..n_props).map(|_| RcnnOutputGrad::zero(hb)).collect();
    for (k, out) in state.rcnn_outs.iter().enumerate() {
        let ds = state.rcnn_cls_grads[k] * out.score * (1.0 - out.score);
        out_grads[k].score_logit = weights[2] * ds;
    }
    let mut extra_box_grads = vec![[0.0f64; 7]; n_props];
    for (pi, &k) in state.positive_indices.iter().enumerate() {
        let g = &state.refine_grads[pi];
        for ax in 0..3 {
            out_grads[k].center[ax] = weights[3] * g.pred_center[ax];
            out_grads[k].log_dims[ax] = weights[3] * g.pred_log_dims[ax];
        }
        for (o, v) in out_grads[k].theta_logits.iter_mut().zip(&g.pred_theta_logits) {
            *o = weights[3] * v;
        }
        out_grads[k].theta_res = weights[3] * g.pred_theta_res;

        // target path: the refinement target depends on the proposal box
        let b = &state.proposals.proposals[k].box7;
        let (s_t, c_t) = b.theta.sin_cos();
        let tc = state.target_centers[pi];
        let dtc = [
            weights[3] * g.target_center[0],
            weights[3] * g.target_center[1],
            weights[3] * g.target_center[2],
        ];
        let d_box = &mut extra_box_grads[k];
        d_box[0] += -c_t * dtc[0] + s_t * dtc[1];
        d_box[1] += -s_t * dtc[0] - c_t * dtc[1];
        d_box[2] += -dtc[2];
        d_box[6] += dtc[0] * tc[1] - dtc[1] * tc[0];
        d_box[3] += weights[3] * g.target_log_dims[0] * (-1.0 / b.l);
        d_box[4] += weights[3] * g.target_log_dims[1] * (-1.0 / b.w);
        d_box[5] += weights[3] * g.target_log_dims[2] * (-1.0 / b.h);
        d_box[6] += weights[3] * g.target_theta_res * (-1.0 / bins.heading_bin_width());
    }

    rcnn_backward(
        &state.proposals.proposals,
        &out_grads,
        &extra_box_grads,
        &state.rcnn_state,
        &mut params.rcnn,
        &mut heads_grad,
        &state.heads,
        image,
        bins,
        &layout,
    );
    rpn_backward(&heads_grad, &state.rpn_state, &mut params.rpn)
}

fn scale_box_grad(g: &mut BoxPredictionGrad, s: f64) {
    for v in g
        .x_logits
        .iter_mut()
        .chain(g.y_logits.iter_mut())
        .chain(g.theta_logits.iter_mut())
    {
        *v *= s;
    }
    g.x_res *= s;
    g.y_res *= s;
    g.z_res *= s;
    g.log_l *= s;
    g.log_w *= s;
    g.log_h *= s;
    g.theta_res *= s;
}

/// Inference: proposals above the score threshold, first-stage NMS, per-box
/// refinement, and a final NMS over the refined boxes.
pub fn run_inference(
    image: &RangeImage,
    res: &AngularResolution,
    params: &DetectorParams,
    bins: &BinConfig,
    trainer: &TrainerConfig,
) -> Result<Vec<(Box7, f64)>> {
    let (heads, _) = rpn_forward(image, &params.rpn, res)?;
    let layout = params.rpn.layout;
    let set = select_proposals_infer(
        &heads,
        image,
        bins,
        &layout,
        trainer.score_threshold,
        trainer.nms_iou,
        trainer.max_proposals,
    );
    let (outs, _) = rcnn_forward(&set.proposals, image, &heads, &params.rcnn, bins, &layout);
    let refined: Vec<Box7> = set
        .proposals
        .iter()
        .zip(&outs)
        .map(|(p, o)| apply_refinement(&p.box7, &o.refine, params.rcnn.heading_bins))
        .collect();
    let scores: Vec<f64> = outs.iter().map(|o| o.score).collect();
    let kept = nms(&refined, &scores, trainer.final_nms_iou, trainer.max_proposals);
    Ok(kept.into_iter().map(|i| (refined[i], scores[i])).collect())
}

// ---------------------------------------------------------------------------
// Flat differentiable view for gradient checking.
// ---------------------------------------------------------------------------

/// The full pipeline as a function of the flattened parameter vector,
/// producing the four loss parts.
pub struct PipelineFn {
    pub scene: SyntheticScene,
    pub targets: RpnTargets,
    pub template: DetectorParams,
    pub focal: FocalConfig,
    pub bins: BinConfig,
    pub trainer: TrainerConfig,
    pub subsample_seed: u64,
}

impl crate::numerics::gradcheck::Differentiable for PipelineFn {
    fn input_len(&self) -> usize {
        self.template.named_params().iter().map(|(_, p)| p.len()).sum()
    }
    fn output_len(&self) -> usize {
        4
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut params = self.template.clone();
        params.set_param_vector(x);
        let (parts, _) = forward_loss(
            &self.scene,
            &self.targets,
            &params,
            &self.focal,
            &self.bins,
            &self.trainer,
            self.subsample_seed,
        )
        .expect("pipeline forward");
        vec![parts.rpn_cls, parts.rpn_box, parts.rcnn_cls, parts.rcnn_reg]
    }
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let mut params = self.template.clone();
        params.set_param_vector(x);
        params.zero_grads();
        let (_, state) = forward_loss(
            &self.scene,
            &self.targets,
            &params,
            &self.focal,
            &self.bins,
            &self.trainer,
            self.subsample_seed,
        )
        .expect("pipeline forward");
        backward_loss(
            [upstream[0], upstream[1], upstream[2], upstream[3]],
            &self.scene,
            &state,
            &mut params,
            &self.bins,
        )
        .expect("pipeline backward");
        params.grad_vector()
    }
}

/// Convenience: add a tensor into a mutable tensor (re-exported pattern used
/// by the trainer).
pub fn accumulate(dst: &mut Tensor, src: &Tensor) {
    add_into(dst, src);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::scene::generate_scene;
    use crate::detector::targets::build_targets;
    use crate::detector::SceneConfig;
    use crate::numerics::gradcheck::{grad_check_sampled, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_setup(seed: u64) -> PipelineFn {
        let scene_cfg = SceneConfig {
            height: 8,
            width: 16,
            min_vehicles: 1,
            max_vehicles: 2,
            min_range: 6.0,
            max_range: 18.0,
            ..Default::default()
        };
        let scene = generate_scene(&scene_cfg, seed);
        let bins = BinConfig::default();
        let net = NetConfig {
            channels: 4,
            deep_channels: 6,
            embed_channels: 3,
            rcnn_conv_channels: 2,
            rcd_pattern_rows: 2,
            rcd_pattern_cols: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let template = DetectorParams::init(&net, &bins, &mut rng);
        let targets = build_targets(&scene, &bins);
        let trainer = TrainerConfig { proposals_pos: 4, proposals_neg: 4, ..Default::default() };
        PipelineFn {
            scene,
            targets,
            template,
            focal: FocalConfig::default(),
            bins,
            trainer,
            subsample_seed: seed ^ 0x3331,
        }
    }

    #[test]
    fn forward_produces_finite_losses() {
        let f = micro_setup(21);
        let x = f.template.param_vector();
        let out = crate::numerics::gradcheck::Differentiable::eval(&f, &x);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] > 0.0);
    }

    #[test]
    fn composite_gradient_check_micro_scene() {
        let f = micro_setup(21);
        let x = f.template.param_vector();
        let report = grad_check_sampled(&f, &x, 21, 1e-4, 220).unwrap();
        assert!(
            report.passed,
            "max rel error {} at coord {} of {}",
            report.max_rel_error, report.worst_coord, report.checked_coords
        );
    }

    #[test]
    fn nominal_width_gradient_is_live() {
        // the stem's log nominal width is the second parameter group; check
        // its single coordinate explicitly against finite differences
        let f = micro_setup(33);
        let x = f.template.param_vector();
        // locate the log nominal width inside the flat vector
        let mut off = 0;
        let mut idx = None;
        for (name, p) in f.template.named_params() {
            if name == "stem.log_nominal_width" {
                idx = Some(off);
                break;
            }
            off += p.len();
        }
        let idx = idx.unwrap();
        use crate::numerics::gradcheck::Differentiable;
        let up = [1.0, 1.0, 1.0, 1.0];
        let analytic = f.vjp(&x, &up)[idx];
        let h = 1e-5;
        let mut probe = x.clone();
        probe[idx] += h;
        let plus: f64 = f.eval(&probe).iter().sum();
        probe[idx] -= 2.0 * h;
        let minus: f64 = f.eval(&probe).iter().sum();
        let numeric = (plus - minus) / (2.0 * h);
        assert!(analytic != 0.0, "nominal width gradient is dead");
        assert!(rel_error(analytic, numeric) < 1e-4, "{} vs {}", analytic, numeric);
    }

    #[test]
    fn inference_returns_scored_boxes() {
        let f = micro_setup(5);
        let dets = run_inference(
            &f.scene.image,
            &f.scene.res,
            &f.template,
            &f.bins,
            &TrainerConfig { score_threshold: 0.0, ..Default::default() },
        )
        .unwrap();
        assert!(!dets.is_empty());
        for (b, s) in &dets {
            assert!(b.l > 0.0 && *s >= 0.0 && *s <= 1.0);
        }
    }
}
