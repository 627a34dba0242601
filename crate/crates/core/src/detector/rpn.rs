//! The miniature proposal network: an RCD stem at full resolution, two
//! bottleneck stages under horizontal-only pooling, one aggregation stage
//! that restores full width, and per-pixel heads (foreground score, top/left
//! similarity scores, bin-coded box parameters, and a feature embedding that
//! the refinement stage reuses).

use rand::Rng;

use crate::boxgeom::{decode_box, BinConfig, Box7, BoxEncoding};
use crate::detector::layers::{
    add_into, elu_flat, elu_flat_vjp, hpool2_forward, hpool2_vjp, hpool_range, hupsample_forward,
    hupsample_vjp, LayerNormLayer, PConvLayer,
};
use crate::detector::NetConfig;
use crate::error::{Error, Result};
use crate::losses::{BoxPrediction, BoxPredictionGrad};
use crate::numerics::{Param, Tensor};
use crate::rangeimage::{Channel, RangeImage, CHANNELS};
use crate::rcd::{
    rcd_block_forward_plane, rcd_block_vjp, AngularResolution, DilationMode, RangePlane, RcdConfig,
    RcdParams, RcdState,
};

/// Fixed input normalization applied to the 8 channels.
const RANGE_SCALE: f64 = 1.0 / 75.0;
const Z_SCALE: f64 = 1.0 / 10.0;

/// Layout of the box head's channel vector:
/// `[x bin logits | y bin logits | heading bin logits | x_res, y_res, z_res,
/// log_l, log_w, log_h, theta_res]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxHeadLayout {
    pub xy_bins: usize,
    pub heading_bins: usize,
}

impl BoxHeadLayout {
    pub fn from_bins(bins: &BinConfig) -> BoxHeadLayout {
        BoxHeadLayout { xy_bins: bins.xy_bins(), heading_bins: bins.heading_bins }
    }

    pub fn channels(&self) -> usize {
        2 * self.xy_bins + self.heading_bins + 7
    }

    fn res_base(&self) -> usize {
        2 * self.xy_bins + self.heading_bins
    }

    pub fn extract(&self, raw: &[f64]) -> BoxPrediction {
        let n = self.xy_bins;
        let hb = self.heading_bins;
        let r = self.res_base();
        BoxPrediction {
            x_logits: raw[..n].to_vec(),
            y_logits: raw[n..2 * n].to_vec(),
            theta_logits: raw[2 * n..2 * n + hb].to_vec(),
            x_res: raw[r],
            y_res: raw[r + 1],
            z_res: raw[r + 2],
            log_l: raw[r + 3],
            log_w: raw[r + 4],
            log_h: raw[r + 5],
            theta_res: raw[r + 6],
        }
    }

    pub fn pack_grad(&self, grad: &BoxPredictionGrad, out: &mut [f64]) {
        let n = self.xy_bins;
        let hb = self.heading_bins;
        let r = self.res_base();
        for i in 0..n {
            out[i] += grad.x_logits[i];
            out[n + i] += grad.y_logits[i];
        }
        for i in 0..hb {
            out[2 * n + i] += grad.theta_logits[i];
        }
        out[r] += grad.x_res;
        out[r + 1] += grad.y_res;
        out[r + 2] += grad.z_res;
        out[r + 3] += grad.log_l;
        out[r + 4] += grad.log_w;
        out[r + 5] += grad.log_h;
        out[r + 6] += grad.theta_res;
    }

    /// Decode a pixel's raw head vector into a box: argmax over each bin set
    /// plus the predicted residuals.
    pub fn decode_raw(&self, raw: &[f64], point: [f64; 3], bins: &BinConfig) -> Box7 {
        let n = self.xy_bins;
        let hb = self.heading_bins;
        let r = self.res_base();
        let argmax = |s: &[f64]| {
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best
        };
        let enc = BoxEncoding {
            x_bin: argmax(&raw[..n]),
            x_res: raw[r],
            y_bin: argmax(&raw[n..2 * n]),
            y_res: raw[r + 1],
            z_res: raw[r + 2],
            log_l: raw[r + 3],
            log_w: raw[r + 4],
            log_h: raw[r + 5],
            theta_bin: argmax(&raw[2 * n..2 * n + hb]),
            theta_res: raw[r + 6],
            clamped: false,
        };
        decode_box(point, &enc, bins)
    }

    /// Pullback of `decode_raw` into the residual slots (the bin choice is
    /// locally constant). `decoded` must be the box `decode_raw` produced.
    pub fn decode_raw_vjp(&self, dbox: &[f64; 7], decoded: &Box7, bins: &BinConfig, out: &mut [f64]) {
        let r = self.res_base();
        out[r] += dbox[0] * bins.bin_size;
        out[r + 1] += dbox[1] * bins.bin_size;
        out[r + 2] += dbox[2];
        out[r + 3] += dbox[3] * decoded.l;
        out[r + 4] += dbox[4] * decoded.w;
        out[r + 5] += dbox[5] * decoded.h;
        out[r + 6] += dbox[6] * bins.heading_bin_width();
    }
}

/// Bottleneck: reduce -> elu -> expand, plus a (projected) skip, then layer
/// norm and elu.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: PConvLayer,
    pub expand: PConvLayer,
    pub proj: Option<PConvLayer>,
    pub ln: LayerNormLayer,
}

impl Bottleneck {
    fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Bottleneck {
        let mid = (cin / 2).max(1);
        Bottleneck {
            reduce: PConvLayer::init(cin, mid, rng),
            expand: PConvLayer::init(mid, cout, rng),
            proj: (cin != cout).then(|| PConvLayer::init(cin, cout, rng)),
            ln: LayerNormLayer::init(cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BottleneckState)> {
        let reduced = self.reduce.forward(x)?;
        let reduced_act = tensor_elu(&reduced);
        let expanded = self.expand.forward(&reduced_act)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        let mut summed = expanded.clone();
        add_into(&mut summed, &skip);
        let ln_out = self.ln.forward(&summed)?;
        let out = tensor_elu(&ln_out);
        Ok((out, BottleneckState { x: x.clone(), reduced, reduced_act, summed, ln_out }))
    }

    fn backward(&mut self, upstream: &Tensor, state: &BottleneckState) -> Result<Tensor> {
        let d_ln_out = tensor_elu_vjp(&state.ln_out, upstream);
        let d_sum = self.ln.vjp_accumulate(&state.summed, &d_ln_out)?;
        let d_reduced_act = self.expand.vjp_accumulate(&state.reduced_act, &d_sum)?;
        let d_reduced = tensor_elu_vjp(&state.reduced, &d_reduced_act);
        let mut dx = self.reduce.vjp_accumulate(&state.x, &d_reduced)?;
        match &mut self.proj {
            Some(p) => {
                let d_skip = p.vjp_accumulate(&state.x, &d_sum)?;
                add_into(&mut dx, &d_skip);
            }
            None => add_into(&mut dx, &d_sum),
        }
        Ok(dx)
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{}.reduce.w", prefix), &self.reduce.w));
        out.push((format!("{}.reduce.b", prefix), &self.reduce.b));
        out.push((format!("{}.expand.w", prefix), &self.expand.w));
        out.push((format!("{}.expand.b", prefix), &self.expand.b));
        if let Some(p) = &self.proj {
            out.push((format!("{}.proj.w", prefix), &p.w));
            out.push((format!("{}.proj.b", prefix), &p.b));
        }
        out.push((format!("{}.ln.gain", prefix), &self.ln.gain));
        out.push((format!("{}.ln.bias", prefix), &self.ln.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{}.reduce.w", prefix), &mut self.reduce.w));
        out.push((format!("{}.reduce.b", prefix), &mut self.reduce.b));
        out.push((format!("{}.expand.w", prefix), &mut self.expand.w));
        out.push((format!("{}.expand.b", prefix), &mut self.expand.b));
        if let Some(p) = &mut self.proj {
            out.push((format!("{}.proj.w", prefix), &mut p.w));
            out.push((format!("{}.proj.b", prefix), &mut p.b));
        }
        out.push((format!("{}.ln.gain", prefix), &mut self.ln.gain));
        out.push((format!("{}.ln.bias", prefix), &mut self.ln.bias));
    }
}

#[derive(Debug, Clone)]
pub struct BottleneckState {
    x: Tensor,
    reduced: Tensor,
    reduced_act: Tensor,
    summed: Tensor,
    ln_out: Tensor,
}

fn tensor_elu(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape(), elu_flat(x.data())).unwrap()
}

fn tensor_elu_vjp(x: &Tensor, up: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape(), elu_flat_vjp(x.data(), up.data())).unwrap()
}

#[derive(Debug, Clone)]
pub struct RpnParams {
    pub stem: RcdParams,
    pub stage1: Bottleneck,
    pub rcd1: Option<RcdParams>,
    pub stage2: Bottleneck,
    pub rcd2: Option<RcdParams>,
    pub agg_proj: PConvLayer,
    pub merge: PConvLayer,
    pub merge_ln: LayerNormLayer,
    pub head_fg: PConvLayer,
    pub head_top: PConvLayer,
    pub head_left: PConvLayer,
    pub head_box: PConvLayer,
    pub head_embed: PConvLayer,
    pub layout: BoxHeadLayout,
}

impl RpnParams {
    pub fn init(net: &NetConfig, bins: &BinConfig, rng: &mut impl Rng) -> RpnParams {
        let c = net.channels;
        let d = net.deep_channels;
        let layout = BoxHeadLayout::from_bins(bins);
        let rcd_cfg = |cin: usize, cout: usize| {
            let mut cfg = RcdConfig::new(cin, cout);
            cfg.pattern_rows = net.rcd_pattern_rows;
            cfg.pattern_cols = net.rcd_pattern_cols;
            cfg.squeeze_channels = net.rcd_squeeze_channels;
            cfg.pass_channels = cout;
            cfg.nominal_width_init = net.nominal_width_init;
            cfg.gate_scale_init = net.gate_scale_init;
            cfg.range_floor = net.range_floor;
            if let Some(rate) = net.fixed_dilation_px {
                cfg.dilation = DilationMode::Fixed { rate_px: rate };
            }
            cfg
        };
        let mut head_fg = PConvLayer::init(c, 1, rng);
        // rare foreground: bias the logit down so early training is stable
        head_fg.b.value.data_mut()[0] = -2.0;
        RpnParams {
            stem: RcdParams::init(rcd_cfg(CHANNELS, c), rng),
            stage1: Bottleneck::init(c, c, rng),
            rcd1: net.multi_scale_rcd.then(|| RcdParams::init(rcd_cfg(c, c), rng)),
            stage2: Bottleneck::init(c, d, rng),
            rcd2: net.multi_scale_rcd.then(|| RcdParams::init(rcd_cfg(d, d), rng)),
            agg_proj: PConvLayer::init(d, c, rng),
            merge: PConvLayer::init(c, c, rng),
            merge_ln: LayerNormLayer::init(c),
            head_fg,
            head_top: PConvLayer::init(c, 1, rng),
            head_left: PConvLayer::init(c, 1, rng),
            head_box: PConvLayer::init(c, layout.channels(), rng),
            head_embed: PConvLayer::init(c, net.embed_channels, rng),
            layout,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = Vec::new();
        for (name, p) in self.stem.named_params() {
            out.push((format!("stem.{}", name), p));
        }
        self.stage1.named("stage1", &mut out);
        if let Some(r) = &self.rcd1 {
            for (name, p) in r.named_params() {
                out.push((format!("rcd1.{}", name), p));
            }
        }
        self.stage2.named("stage2", &mut out);
        if let Some(r) = &self.rcd2 {
            for (name, p) in r.named_params() {
                out.push((format!("rcd2.{}", name), p));
            }
        }
        for (name, layer) in [
            ("agg_proj", &self.agg_proj),
            ("merge", &self.merge),
            ("head_fg", &self.head_fg),
            ("head_top", &self.head_top),
            ("head_left", &self.head_left),
            ("head_box", &self.head_box),
            ("head_embed", &self.head_embed),
        ] {
            out.push((format!("{}.w", name), &layer.w));
            out.push((format!("{}.b", name), &layer.b));
        }
        out.push(("merge_ln.gain".into(), &self.merge_ln.gain));
        out.push(("merge_ln.bias".into(), &self.merge_ln.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        for (name, p) in self.stem.named_params_mut() {
            out.push((format!("stem.{}", name), p));
        }
        self.stage1.named_mut("stage1", &mut out);
        if let Some(r) = &mut self.rcd1 {
            for (name, p) in r.named_params_mut() {
                out.push((format!("rcd1.{}", name), p));
            }
        }
        self.stage2.named_mut("stage2", &mut out);
        if let Some(r) = &mut self.rcd2 {
            for (name, p) in r.named_params_mut() {
                out.push((format!("rcd2.{}", name), p));
            }
        }
        for (name, layer) in [
            ("agg_proj", &mut self.agg_proj),
            ("merge", &mut self.merge),
            ("head_fg", &mut self.head_fg),
            ("head_top", &mut self.head_top),
            ("head_left", &mut self.head_left),
            ("head_box", &mut self.head_box),
            ("head_embed", &mut self.head_embed),
        ] {
            out.push((format!("{}.w", name), &mut layer.w));
            out.push((format!("{}.b", name), &mut layer.b));
        }
        out.push(("merge_ln.gain".into(), &mut self.merge_ln.gain));
        out.push(("merge_ln.bias".into(), &mut self.merge_ln.bias));
        out
    }
}

#[derive(Debug, Clone)]
pub struct RpnHeads {
    pub fg_logit: Tensor,
    pub top_logit: Tensor,
    pub left_logit: Tensor,
    pub box_raw: Tensor,
    pub embed: Tensor,
}

#[derive(Debug, Clone)]
pub struct RpnHeadsGrad {
    pub fg_logit: Tensor,
    pub top_logit: Tensor,
    pub left_logit: Tensor,
    pub box_raw: Tensor,
    pub embed: Tensor,
}

impl RpnHeadsGrad {
    pub fn zeros_like(heads: &RpnHeads) -> RpnHeadsGrad {
        RpnHeadsGrad {
            fg_logit: Tensor::zeros(heads.fg_logit.shape()),
            top_logit: Tensor::zeros(heads.top_logit.shape()),
            left_logit: Tensor::zeros(heads.left_logit.shape()),
            box_raw: Tensor::zeros(heads.box_raw.shape()),
            embed: Tensor::zeros(heads.embed.shape()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RpnState {
    pub input: Tensor,
    stem_state: RcdState,
    stem_out: Tensor,
    pool1_argmax: Vec<u8>,
    pool1_out: Tensor,
    stage1_state: BottleneckState,
    stage1_out: Tensor,
    rcd1_state: Option<(RcdState, Tensor)>,
    pool2_argmax: Vec<u8>,
    stage2_state: BottleneckState,
    rcd2_state: Option<(RcdState, Tensor)>,
    agg_in: Tensor,
    sum: Tensor,
    merge_out: Tensor,
    ln_out: Tensor,
    pub trunk: Tensor,
}

/// Normalize the 8 fixed channels into network inputs.
pub fn normalize_input(image: &RangeImage) -> Tensor {
    let (h, w) = (image.height(), image.width());
    let mut x = Tensor::zeros(&[h, w, CHANNELS]);
    let xd = x.data_mut();
    let src = image.data();
    for pix in 0..h * w {
        let s = &src[pix * CHANNELS..(pix + 1) * CHANNELS];
        let o = &mut xd[pix * CHANNELS..(pix + 1) * CHANNELS];
        o[Channel::Range as usize] = s[Channel::Range as usize] * RANGE_SCALE;
        o[Channel::Intensity as usize] = s[Channel::Intensity as usize];
        o[Channel::Elongation as usize] = s[Channel::Elongation as usize];
        o[Channel::Inclination as usize] = s[Channel::Inclination as usize];
        o[Channel::Azimuth as usize] = s[Channel::Azimuth as usize] / std::f64::consts::PI - 1.0;
        o[Channel::X as usize] = s[Channel::X as usize] * RANGE_SCALE;
        o[Channel::Y as usize] = s[Channel::Y as usize] * RANGE_SCALE;
        o[Channel::Z as usize] = s[Channel::Z as usize] * Z_SCALE;
    }
    x
}

pub fn rpn_forward(
    image: &RangeImage,
    params: &RpnParams,
    res: &AngularResolution,
) -> Result<(RpnHeads, RpnState)> {
    if params.stem.config.in_channels != CHANNELS {
        return Err(Error::Config(format!(
            "stem expects {} input channels, the range-image contract is {}",
            params.stem.config.in_channels, CHANNELS
        )));
    }
    let (h, w) = (image.height(), image.width());
    if w % 4 != 0 || w < 4 {
        return Err(Error::Config(format!("image width {} must be a positive multiple of 4", w)));
    }
    let input = normalize_input(image);
    let full_plane = RangePlane::from_image(image);

    let (stem_out, stem_state) = rcd_block_forward_plane(&input, &full_plane, &params.stem, res)?;

    let (pool1_out, pool1_argmax) = hpool2_forward(&stem_out)?;
    let (stage1_out, stage1_state) = params.stage1.forward(&pool1_out)?;
    let res1 = AngularResolution::new(res.rad_per_pixel_row, res.rad_per_pixel_col * 2.0)?;
    let plane1 = RangePlane { height: h, width: w / 2, range: hpool_range(&full_plane.range, h, w, 2) };
    let (stage1_final, rcd1_state) = match &params.rcd1 {
        Some(p) => {
            let (out, st) = rcd_block_forward_plane(&stage1_out, &plane1, p, &res1)?;
            (out.clone(), Some((st, out)))
        }
        None => (stage1_out.clone(), None),
    };

    let (pool2_out, pool2_argmax) = hpool2_forward(&stage1_final)?;
    let (stage2_out, stage2_state) = params.stage2.forward(&pool2_out)?;
    let res2 = AngularResolution::new(res.rad_per_pixel_row, res.rad_per_pixel_col * 4.0)?;
    let plane2 = RangePlane { height: h, width: w / 4, range: hpool_range(&full_plane.range, h, w, 4) };
    let (stage2_final, rcd2_state) = match &params.rcd2 {
        Some(p) => {
            let (out, st) = rcd_block_forward_plane(&stage2_out, &plane2, p, &res2)?;
            (out.clone(), Some((st, out)))
        }
        None => (stage2_out.clone(), None),
    };

    let agg_out = params.agg_proj.forward(&stage2_final)?;
    let up = hupsample_forward(&agg_out, 4);
    let mut sum = stem_out.clone();
    add_into(&mut sum, &up);
    let merge_out = params.merge.forward(&sum)?;
    let ln_out = params.merge_ln.forward(&merge_out)?;
    let trunk = tensor_elu(&ln_out);

    let heads = RpnHeads {
        fg_logit: params.head_fg.forward(&trunk)?,
        top_logit: params.head_top.forward(&trunk)?,
        left_logit: params.head_left.forward(&trunk)?,
        box_raw: params.head_box.forward(&trunk)?,
        embed: params.head_embed.forward(&trunk)?,
    };
    let state = RpnState {
        input,
        stem_state,
        stem_out,
        pool1_argmax,
        pool1_out,
        stage1_state,
        stage1_out,
        rcd1_state,
        pool2_argmax,
        stage2_state,
        rcd2_state,
        agg_in: stage2_final,
        sum,
        merge_out,
        ln_out,
        trunk,
    };
    Ok((heads, state))
}

/// Backpropagate head gradients through the whole network, accumulating into
/// every parameter's gradient buffer.
pub fn rpn_backward(grads: &RpnHeadsGrad, state: &RpnState, params: &mut RpnParams) -> Result<()> {
    let mut d_trunk = params.head_fg.vjp_accumulate(&state.trunk, &grads.fg_logit)?;
    add_into(&mut d_trunk, &params.head_top.vjp_accumulate(&state.trunk, &grads.top_logit)?);
    add_into(&mut d_trunk, &params.head_left.vjp_accumulate(&state.trunk, &grads.left_logit)?);
    add_into(&mut d_trunk, &params.head_box.vjp_accumulate(&state.trunk, &grads.box_raw)?);
    add_into(&mut d_trunk, &params.head_embed.vjp_accumulate(&state.trunk, &grads.embed)?);

    let d_ln_out = tensor_elu_vjp(&state.ln_out, &d_trunk);
    let d_merge_out = params.merge_ln.vjp_accumulate(&state.merge_out, &d_ln_out)?;
    let d_sum = params.merge.vjp_accumulate(&state.sum, &d_merge_out)?;

    // sum = stem_out + upsample(agg_out)
    let mut d_stem_out = d_sum.clone();
    let d_up = d_sum;
    let d_agg_out = hupsample_vjp(&d_up, 4);
    let d_agg_in = params.agg_proj.vjp_accumulate(&state.agg_in, &d_agg_out)?;

    let d_stage2_out = match (&state.rcd2_state, &mut params.rcd2) {
        (Some((st, _)), Some(p)) => {
            let (dx, g) = rcd_block_vjp(&d_agg_in, st, p)?;
            g.accumulate_into(p);
            dx
        }
        _ => d_agg_in,
    };
    let d_pool2 = params.stage2.backward(&d_stage2_out, &state.stage2_state)?;
    let d_stage1_final = hpool2_vjp(
        &d_pool2,
        &state.pool2_argmax,
        &[state.pool1_out.shape()[0], state.pool1_out.shape()[1], state.stage1_out.shape()[2]],
    );

    let d_stage1_out = match (&state.rcd1_state, &mut params.rcd1) {
        (Some((st, _)), Some(p)) => {
            let (dx, g) = rcd_block_vjp(&d_stage1_final, st, p)?;
            g.accumulate_into(p);
            dx
        }
        _ => d_stage1_final,
    };
    let d_pool1 = params.stage1.backward(&d_stage1_out, &state.stage1_state)?;
    let d_from_pool1 = hpool2_vjp(
        &d_pool1,
        &state.pool1_argmax,
        &[state.stem_out.shape()[0], state.stem_out.shape()[1], state.stem_out.shape()[2]],
    );
    add_into(&mut d_stem_out, &d_from_pool1);

    let (_, stem_grads) = rcd_block_vjp(&d_stem_out, &state.stem_state, &params.stem)?;
    stem_grads.accumulate_into(&mut params.stem);
    Ok(())
}
