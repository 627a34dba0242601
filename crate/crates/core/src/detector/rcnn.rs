//! Per-proposal refinement: points inside each proposal box are pooled into
//! the canonical 12x8x6 grid (semantic channels averaged, embeddings
//! max-pooled), processed by a 3x3x3 convolution, downsampled, and mapped by
//! a fully connected layer to a refined box and classification score.
//!
//! The backward pass covers every smooth path, including the geometry: the
//! canonical coordinates, the per-point relative box features, and the
//! refinement targets all depend on the proposal box, whose gradient flows
//! back into the box head residuals at the proposal's source pixel.

use rand::Rng;

use crate::boxgeom::{
    cell_flat_index, from_canonical_point, grid_cell, to_canonical_point, wrap_angle, BinConfig,
    Box7, POOL_GRID,
};
use crate::detector::layers::{elu_flat, elu_flat_vjp, maxpool3d_forward, maxpool3d_vjp, Conv3dLayer, FcLayer};
use crate::detector::proposals::Proposal;
use crate::detector::rpn::{BoxHeadLayout, RpnHeads, RpnHeadsGrad};
use crate::detector::NetConfig;
use crate::losses::RefinePrediction;
use crate::numerics::ops::sigmoid;
use crate::numerics::Param;
use crate::rangeimage::RangeImage;

/// Semantic (average-pooled) channels: canonical xyz, foreground score, and
/// the pixel's own decoded box relative to the proposal frame
/// (center xyz, dims lwh, heading delta).
pub const SEMANTIC_CHANNELS: usize = 11;

#[derive(Debug, Clone)]
pub struct RcnnParams {
    pub conv: Conv3dLayer,
    pub fc: FcLayer,
    pub heading_bins: usize,
    pub embed_channels: usize,
}

impl RcnnParams {
    pub fn init(net: &NetConfig, bins: &BinConfig, rng: &mut impl Rng) -> RcnnParams {
        let cin = SEMANTIC_CHANNELS + net.embed_channels;
        let conv = Conv3dLayer::init(cin, net.rcnn_conv_channels, rng);
        let pooled_cells = (POOL_GRID[0] / 2) * (POOL_GRID[1] / 2) * (POOL_GRID[2] / 2);
        let out = 1 + 3 + 3 + bins.heading_bins + 1;
        let fc = FcLayer::init(pooled_cells * net.rcnn_conv_channels, out, rng);
        RcnnParams { conv, fc, heading_bins: bins.heading_bins, embed_channels: net.embed_channels }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        vec![
            ("rcnn.conv.w".into(), &self.conv.w),
            ("rcnn.conv.b".into(), &self.conv.b),
            ("rcnn.fc.w".into(), &self.fc.w),
            ("rcnn.fc.b".into(), &self.fc.b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("rcnn.conv.w".into(), &mut self.conv.w),
            ("rcnn.conv.b".into(), &mut self.conv.b),
            ("rcnn.fc.w".into(), &mut self.fc.w),
            ("rcnn.fc.b".into(), &mut self.fc.b),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RcnnOutput {
    pub score_logit: f64,
    pub score: f64,
    pub refine: RefinePrediction,
}

/// Loss gradients flowing into one proposal's outputs.
#[derive(Debug, Clone)]
pub struct RcnnOutputGrad {
    pub score_logit: f64,
    pub center: [f64; 3],
    pub log_dims: [f64; 3],
    pub theta_logits: Vec<f64>,
    pub theta_res: f64,
}

impl RcnnOutputGrad {
    pub fn zero(heading_bins: usize) -> RcnnOutputGrad {
        RcnnOutputGrad {
            score_logit: 0.0,
            center: [0.0; 3],
            log_dims: [0.0; 3],
            theta_logits: vec![0.0; heading_bins],
            theta_res: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ProposalForward {
    point_pixels: Vec<usize>,
    feats: Vec<f64>,
    canon: Vec<[f64; 3]>,
    rel_center: Vec<[f64; 3]>,
    pixel_boxes: Vec<Box7>,
    cell_of_point: Vec<Option<usize>>,
    counts: Vec<u32>,
    max_argmax: Vec<u32>,
    grid: Vec<f64>,
    occupied: Vec<usize>,
    conv_out: Vec<f64>,
    pooled: Vec<f64>,
    pool_argmax: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct RcnnState {
    per_proposal: Vec<ProposalForward>,
}

fn channels(params: &RcnnParams) -> usize {
    SEMANTIC_CHANNELS + params.embed_channels
}

/// Run the refinement head over every proposal.
pub fn rcnn_forward(
    proposals: &[Proposal],
    image: &RangeImage,
    heads: &RpnHeads,
    params: &RcnnParams,
    bins: &BinConfig,
    layout: &BoxHeadLayout,
) -> (Vec<RcnnOutput>, RcnnState) {
    let mut outs = Vec::with_capacity(proposals.len());
    let mut states = Vec::with_capacity(proposals.len());
    for p in proposals {
        let (out, st) = forward_one(p, image, heads, params, bins, layout);
        outs.push(out);
        states.push(st);
    }
    (outs, RcnnState { per_proposal: states })
}

fn forward_one(
    proposal: &Proposal,
    image: &RangeImage,
    heads: &RpnHeads,
    params: &RcnnParams,
    bins: &BinConfig,
    layout: &BoxHeadLayout,
) -> (RcnnOutput, ProposalForward) {
    let (h, w) = (image.height(), image.width());
    let c = channels(params);
    let e = params.embed_channels;
    let b = &proposal.box7;
    let fg = heads.fg_logit.data();
    let embed = heads.embed.data();
    let box_raw = heads.box_raw.data();
    let bch = layout.channels();

    let mut point_pixels = Vec::new();
    let mut feats = Vec::new();
    let mut canon = Vec::new();
    let mut rel_center = Vec::new();
    let mut pixel_boxes = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            if !image.is_valid(row, col) {
                continue;
            }
            let p = image.point_at(row, col);
            let cp = to_canonical_point(p, b);
            if cp[0].abs() > 0.5 * b.l || cp[1].abs() > 0.5 * b.w || cp[2].abs() > 0.5 * b.h {
                continue;
            }
            let raw = &box_raw[pix * bch..(pix + 1) * bch];
            let pb = layout.decode_raw(raw, p, bins);
            let rc = to_canonical_point(pb.center(), b);
            point_pixels.push(pix);
            canon.push(cp);
            rel_center.push(rc);
            pixel_boxes.push(pb);
            feats.extend_from_slice(&cp);
            feats.push(sigmoid(fg[pix]));
            feats.extend_from_slice(&rc);
            feats.extend_from_slice(&[pb.l, pb.w, pb.h]);
            feats.push(wrap_angle(pb.theta - b.theta));
            feats.extend_from_slice(&embed[pix * e..(pix + 1) * e]);
        }
    }

    // pool into the canonical grid
    let cells = POOL_GRID[0] * POOL_GRID[1] * POOL_GRID[2];
    let mut grid = vec![0.0; cells * c];
    let mut counts = vec![0u32; cells];
    let mut max_argmax = vec![u32::MAX; cells * e];
    let mut cell_of_point = vec![None; point_pixels.len()];
    for (pi, cp) in canon.iter().enumerate() {
        let Some(cell) = grid_cell(*cp, b) else { continue };
        let ci = cell_flat_index(cell);
        cell_of_point[pi] = Some(ci);
        let fs = &feats[pi * c..(pi + 1) * c];
        let out = &mut grid[ci * c..(ci + 1) * c];
        if counts[ci] == 0 {
            out.copy_from_slice(fs);
            for ch in 0..e {
                max_argmax[ci * e + ch] = pi as u32;
            }
        } else {
            for ch in 0..SEMANTIC_CHANNELS {
                out[ch] += fs[ch];
            }
            for ch in 0..e {
                if fs[SEMANTIC_CHANNELS + ch] > out[SEMANTIC_CHANNELS + ch] {
                    out[SEMANTIC_CHANNELS + ch] = fs[SEMANTIC_CHANNELS + ch];
                    max_argmax[ci * e + ch] = pi as u32;
                }
            }
        }
        counts[ci] += 1;
    }
    let mut occupied = Vec::new();
    for ci in 0..cells {
        if counts[ci] > 0 {
            occupied.push(ci);
            if counts[ci] > 1 {
                let inv = 1.0 / counts[ci] as f64;
                for ch in 0..SEMANTIC_CHANNELS {
                    grid[ci * c + ch] *= inv;
                }
            }
        }
    }

    let conv_out = params.conv.forward(&grid, POOL_GRID, &occupied);
    let act = elu_flat(&conv_out);
    let (pooled, pool_argmax, _) = maxpool3d_forward(&act, POOL_GRID, params.conv.cout);
    drop(act);
    let out = params.fc.forward(&pooled);

    let hb = params.heading_bins;
    let output = RcnnOutput {
        score_logit: out[0],
        score: sigmoid(out[0]),
        refine: RefinePrediction {
            center: [out[1], out[2], out[3]],
            log_dims: [out[4], out[5], out[6]],
            theta_logits: out[7..7 + hb].to_vec(),
            theta_res: out[7 + hb],
        },
    };
    let state = ProposalForward {
        point_pixels,
        feats,
        canon,
        rel_center,
        pixel_boxes,
        cell_of_point,
        counts,
        max_argmax,
        grid,
        occupied,
        conv_out,
        pooled,
        pool_argmax,
    };
    (output, state)
}

/// Backward over all proposals. `extra_box_grads` carries the per-proposal
/// gradient w.r.t. the proposal box accumulated outside this module (the
/// refinement-target path); the combined box gradient is routed through the
/// decoder into the box head at the proposal's source pixel.
pub fn rcnn_backward(
    proposals: &[Proposal],
    out_grads: &[RcnnOutputGrad],
    extra_box_grads: &[[f64; 7]],
    state: &RcnnState,
    params: &mut RcnnParams,
    heads_grad: &mut RpnHeadsGrad,
    heads: &RpnHeads,
    image: &RangeImage,
    bins: &BinConfig,
    layout: &BoxHeadLayout,
) {
    let hb = params.heading_bins;
    for (k, proposal) in proposals.iter().enumerate() {
        let st = &state.per_proposal[k];
        let og = &out_grads[k];
        let mut d_out = vec![0.0; 1 + 3 + 3 + hb + 1];
        d_out[0] = og.score_logit;
        d_out[1..4].copy_from_slice(&og.center);
        d_out[4..7].copy_from_slice(&og.log_dims);
        d_out[7..7 + hb].copy_from_slice(&og.theta_logits);
        d_out[7 + hb] = og.theta_res;

        let d_pooled = params.fc.vjp_accumulate(&st.pooled, &d_out);
        let d_act = maxpool3d_vjp(&d_pooled, &st.pool_argmax, POOL_GRID, params.conv.cout);
        let d_conv = elu_flat_vjp(&st.conv_out, &d_act);
        let d_grid = params.conv.vjp_accumulate(&st.grid, POOL_GRID, &st.occupied, &d_conv);

        // pooling backward: avg distributes, max routes to the argmax point
        let c = channels(params);
        let e = params.embed_channels;
        let mut d_feats = vec![0.0; st.feats.len()];
        for (pi, cell) in st.cell_of_point.iter().enumerate() {
            let Some(ci) = cell else { continue };
            let inv = 1.0 / st.counts[*ci] as f64;
            for ch in 0..SEMANTIC_CHANNELS {
                d_feats[pi * c + ch] += d_grid[ci * c + ch] * inv;
            }
        }
        for &ci in &st.occupied {
            for ch in 0..e {
                let pi = st.max_argmax[ci * e + ch];
                if pi != u32::MAX {
                    d_feats[pi as usize * c + SEMANTIC_CHANNELS + ch] +=
                        d_grid[ci * c + SEMANTIC_CHANNELS + ch];
                }
            }
        }

        // feature backward: geometry into the proposal box, per-pixel heads
        let b = &proposal.box7;
        let (s_t, c_t) = b.theta.sin_cos();
        let mut d_box = extra_box_grads[k];
        let fg = heads.fg_logit.data();
        let bch = layout.channels();
        for (pi, &pix) in st.point_pixels.iter().enumerate() {
            let df = &d_feats[pi * c..(pi + 1) * c];
            // canonical xyz of the raw point
            let cp = st.canon[pi];
            d_box[0] += -c_t * df[0] + s_t * df[1];
            d_box[1] += -s_t * df[0] - c_t * df[1];
            d_box[2] += -df[2];
            d_box[6] += df[0] * cp[1] - df[1] * cp[0];
            // foreground score feature
            let s = sigmoid(fg[pix]);
            heads_grad.fg_logit.data_mut()[pix] += df[3] * s * (1.0 - s);
            // pixel box relative to the proposal frame
            let rc = st.rel_center[pi];
            let mut d_pb = [0.0f64; 7];
            // relative center: d wrt pixel-box center and wrt proposal box
            d_pb[0] += c_t * df[4] - s_t * df[5];
            d_pb[1] += s_t * df[4] + c_t * df[5];
            d_pb[2] += df[6];
            d_box[0] += -c_t * df[4] + s_t * df[5];
            d_box[1] += -s_t * df[4] - c_t * df[5];
            d_box[2] += -df[6];
            d_box[6] += df[4] * rc[1] - df[5] * rc[0];
            // dims and heading delta
            d_pb[3] += df[7];
            d_pb[4] += df[8];
            d_pb[5] += df[9];
            d_pb[6] += df[10];
            d_box[6] -= df[10];
            // embeddings
            for ch in 0..e {
                heads_grad.embed.data_mut()[pix * e + ch] += df[SEMANTIC_CHANNELS + ch];
            }
            // pixel box decode pullback into the box head at this pixel
            let raw_grad =
                &mut heads_grad.box_raw.data_mut()[pix * bch..(pix + 1) * bch];
            layout.decode_raw_vjp(&d_pb, &st.pixel_boxes[pi], bins, raw_grad);
        }

        // proposal box pullback into its source pixel's box head
        let spix = proposal.row * image.width() + proposal.col;
        let raw_grad = &mut heads_grad.box_raw.data_mut()[spix * bch..(spix + 1) * bch];
        layout.decode_raw_vjp(&d_box, &proposal.box7, bins, raw_grad);
    }
}

/// Apply a refinement prediction to its proposal box.
pub fn apply_refinement(proposal: &Box7, refine: &RefinePrediction, heading_bins: usize) -> Box7 {
    let center = from_canonical_point(refine.center, proposal);
    let bw = 2.0 * std::f64::consts::PI / heading_bins as f64;
    let mut best = 0;
    for (i, &v) in refine.theta_logits.iter().enumerate() {
        if v > refine.theta_logits[best] {
            best = i;
        }
    }
    let dtheta = (best as f64 + 0.5) * bw + refine.theta_res * bw;
    Box7::new(
        center[0],
        center[1],
        center[2],
        proposal.l * refine.log_dims[0].exp(),
        proposal.w * refine.log_dims[1].exp(),
        proposal.h * refine.log_dims[2].exp(),
        proposal.theta + dtheta,
    )
}
