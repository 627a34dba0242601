//! Forward and backward passes of the RCD block.

use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};
use crate::parallel;
use crate::rangeimage::{clamp_row, wrap_column, RangeImage};
use crate::rcd::{AngularResolution, DilationMode, RangePlane, RcdParams};

/// Dilation angle for a pixel with measured range `r`: `arctan(width / r)`.
/// Invalid pixels (range 0) are conditioned at `range_floor` instead.
pub fn dilation_rate(r: f64, nominal_width: f64, range_floor: f64) -> f64 {
    let r_eff = if r > 0.0 { r } else { range_floor };
    (nominal_width / r_eff).atan()
}

/// Sample locations and intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleField {
    pub height: usize,
    pub width: usize,
    pub n_samples: usize,
    /// Clamped/wrapped pixel coordinates, `[H*W*N*2]` as (row, col) pairs.
    pub locations: Vec<f64>,
    /// Pre-clamp row coordinates, for the clamp gradient gate.
    raw_rows: Vec<f64>,
    /// Dilation angle per pixel (radians).
    pub dilation: Vec<f64>,
    /// Range used to condition the dilation per pixel (floored when invalid).
    cond_range: Vec<f64>,
}

/// Scale the shared sampling pattern by the per-pixel dilation, convert
/// radians to pixels per axis, offset by the pixel grid, then apply the
/// row-clamp / column-wrap boundary rules.
pub fn transform_pattern(
    plane: &RangePlane,
    params: &RcdParams,
    res: &AngularResolution,
) -> SampleField {
    let (h, w) = (plane.height, plane.width);
    let n = params.n_samples();
    let offsets = params.pattern.offsets.value.data();
    let width = params.nominal_width();
    let floor = params.config.range_floor;

    let mut dilation = vec![0.0; h * w];
    let mut cond_range = vec![0.0; h * w];
    for (i, d) in dilation.iter_mut().enumerate() {
        let r = plane.range[i];
        let r_eff = if r > 0.0 { r } else { floor };
        cond_range[i] = r_eff;
        *d = match params.config.dilation {
            DilationMode::RangeConditioned => (width / r_eff).atan(),
            DilationMode::Fixed { .. } => 0.0, // unused in fixed mode
        };
    }

    let mut locations = vec![0.0; h * w * n * 2];
    let mut raw_rows = vec![0.0; h * w * n];
    {
        let dil = &dilation;
        parallel::for_each_row_chunk(&mut locations, n * 2, |first, chunk| {
            for (p, px) in chunk.chunks_mut(n * 2).enumerate() {
                let pixel = first + p;
                let (row, col) = ((pixel / w) as f64, (pixel % w) as f64);
                let (sr, sc) = match params.config.dilation {
                    DilationMode::RangeConditioned => {
                        (dil[pixel] / res.rad_per_pixel_row, dil[pixel] / res.rad_per_pixel_col)
                    }
                    DilationMode::Fixed { rate_px } => (rate_px, rate_px),
                };
                for k in 0..n {
                    let raw_r = row + sr * offsets[k * 2];
                    let raw_c = col + sc * offsets[k * 2 + 1];
                    px[k * 2] = clamp_row(raw_r, h);
                    px[k * 2 + 1] = wrap_column(raw_c, w);
                }
            }
        });
        parallel::for_each_row_chunk(&mut raw_rows, n, |first, chunk| {
            for (p, px) in chunk.chunks_mut(n).enumerate() {
                let pixel = first + p;
                let row = (pixel / w) as f64;
                let sr = match params.config.dilation {
                    DilationMode::RangeConditioned => dil[pixel] / res.rad_per_pixel_row,
                    DilationMode::Fixed { rate_px } => rate_px,
                };
                for k in 0..n {
                    px[k] = row + sr * offsets[k * 2];
                }
            }
        });
    }
    SampleField { height: h, width: w, n_samples: n, locations, raw_rows, dilation, cond_range }
}

/// Standard 2x2 bilinear interpolation at already clamped/wrapped locations.
/// Column neighbors are taken modulo W so interpolation across the seam
/// between the last and first column is legal. Integer locations reproduce
/// the input bitwise.
pub fn bilinear_sample(x: &Tensor, field: &SampleField) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != field.height || shape[1] != field.width {
        return Err(Error::dimension("bilinear_sample", "input is not [H, W, C]"));
    }
    let c = shape[2];
    let data = gather(x.data(), field.height, field.width, c, &field.locations);
    Tensor::from_vec(&[field.height, field.width, field.n_samples, c], data)
}

pub(crate) fn gather(x: &[f64], h: usize, w: usize, c: usize, locations: &[f64]) -> Vec<f64> {
    let total = locations.len() / 2;
    let mut out = vec![0.0; total * c];
    parallel::for_each_row_chunk(&mut out, c, |first, chunk| {
        for (s, vals) in chunk.chunks_mut(c).enumerate() {
            let li = (first + s) * 2;
            let (r, col) = (locations[li], locations[li + 1]);
            let corners = CornerWeights::at(r, col, h, w);
            if corners.exact {
                let base = (corners.r0 * w + corners.c0) * c;
                vals.copy_from_slice(&x[base..base + c]);
            } else {
                let b00 = (corners.r0 * w + corners.c0) * c;
                let b01 = (corners.r0 * w + corners.c1) * c;
                let b10 = (corners.r1 * w + corners.c0) * c;
                let b11 = (corners.r1 * w + corners.c1) * c;
                for ch in 0..c {
                    vals[ch] = corners.w00 * x[b00 + ch]
                        + corners.w01 * x[b01 + ch]
                        + corners.w10 * x[b10 + ch]
                        + corners.w11 * x[b11 + ch];
                }
            }
        }
    });
    out
}

struct CornerWeights {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: f64,
    fc: f64,
    w00: f64,
    w01: f64,
    w10: f64,
    w11: f64,
    exact: bool,
}

impl CornerWeights {
    #[inline]
    fn at(r: f64, c: f64, h: usize, w: usize) -> CornerWeights {
        let r0f = r.floor();
        let c0f = c.floor();
        let fr = r - r0f;
        let fc = c - c0f;
        let r0 = (r0f as usize).min(h - 1);
        let c0 = (c0f as usize).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1) % w;
        CornerWeights {
            r0,
            r1,
            c0,
            c1,
            fr,
            fc,
            w00: (1.0 - fr) * (1.0 - fc),
            w01: (1.0 - fr) * fc,
            w10: fr * (1.0 - fc),
            w11: fr * fc,
            exact: fr == 0.0 && fc == 0.0,
        }
    }
}

/// Pullback through the gather: scatters into `dx` and accumulates location
/// gradients (d/d row, d/d col per sample) into `dloc`.
pub(crate) fn gather_vjp(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    locations: &[f64],
    upstream: &[f64],
    dx: &mut [f64],
    dloc: &mut [f64],
) {
    let total = locations.len() / 2;
    for s in 0..total {
        let (r, col) = (locations[s * 2], locations[s * 2 + 1]);
        let cw = CornerWeights::at(r, col, h, w);
        let b00 = (cw.r0 * w + cw.c0) * c;
        let b01 = (cw.r0 * w + cw.c1) * c;
        let b10 = (cw.r1 * w + cw.c0) * c;
        let b11 = (cw.r1 * w + cw.c1) * c;
        let up = &upstream[s * c..(s + 1) * c];
        let mut dr = 0.0;
        let mut dc = 0.0;
        for (ch, &u) in up.iter().enumerate() {
            dx[b00 + ch] += cw.w00 * u;
            dx[b01 + ch] += cw.w01 * u;
            dx[b10 + ch] += cw.w10 * u;
            dx[b11 + ch] += cw.w11 * u;
            dr += u
                * ((1.0 - cw.fc) * (x[b10 + ch] - x[b00 + ch])
                    + cw.fc * (x[b11 + ch] - x[b01 + ch]));
            dc += u
                * ((1.0 - cw.fr) * (x[b01 + ch] - x[b00 + ch])
                    + cw.fr * (x[b11 + ch] - x[b10 + ch]));
        }
        dloc[s * 2] += dr;
        dloc[s * 2 + 1] += dc;
    }
}

/// Gaussian soft range gate: weight each sampled feature vector by the pdf of
/// its interpolated range under a Gaussian centered at the pixel's own range
/// with scale `gate_scale`.
pub fn soft_range_gate(
    sampled: &Tensor,
    sampled_range: &[f64],
    center_range: &[f64],
    gate_scale: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let shape = sampled.shape();
    if shape.len() != 4 {
        return Err(Error::dimension("soft_range_gate", "sampled features are not [H, W, N, C]"));
    }
    let (hw, n, c) = (shape[0] * shape[1], shape[2], shape[3]);
    if sampled_range.len() != hw * n || center_range.len() != hw {
        return Err(Error::dimension("soft_range_gate", "range buffers do not match sample field"));
    }
    let mut weights = vec![0.0; hw * n];
    for (i, wv) in weights.iter_mut().enumerate() {
        *wv = gaussian_pdf(sampled_range[i], center_range[i / n], gate_scale);
    }
    let mut gated = Tensor::zeros(shape);
    let sd = sampled.data();
    let wref = &weights;
    parallel::for_each_row_chunk(gated.data_mut(), c, |first, chunk| {
        for (s, vals) in chunk.chunks_mut(c).enumerate() {
            let wv = wref[first + s];
            let base = (first + s) * c;
            for (ch, v) in vals.iter_mut().enumerate() {
                *v = sd[base + ch] * wv;
            }
        }
    });
    Ok((gated, weights))
}

#[inline]
pub fn gaussian_pdf(x: f64, mean: f64, scale: f64) -> f64 {
    let z = (x - mean) / scale;
    (-0.5 * z * z).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt())
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct RcdState {
    pub field: SampleField,
    input: Tensor,
    squeezed: Tensor,
    sampled: Tensor,
    sampled_range: Vec<f64>,
    gate: Vec<f64>,
    center_range: Vec<f64>,
    plane: RangePlane,
    concat: Tensor,
    final_out: Tensor,
    normed: Tensor,
    res: AngularResolution,
}

/// Gradients for every learnable of the block, in tensor form.
#[derive(Debug, Clone)]
pub struct RcdGrads {
    pub pattern: Tensor,
    pub log_nominal_width: f64,
    pub log_gate_scale: f64,
    pub squeeze_w: Tensor,
    pub squeeze_b: Tensor,
    pub pass_w: Tensor,
    pub pass_b: Tensor,
    pub final_w: Tensor,
    pub final_b: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl RcdGrads {
    /// Accumulate into the parameter gradient buffers.
    pub fn accumulate_into(&self, params: &mut RcdParams) {
        let add = |dst: &mut Tensor, src: &Tensor| {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += s;
            }
        };
        add(&mut params.pattern.offsets.grad, &self.pattern);
        params.log_nominal_width.grad.data_mut()[0] += self.log_nominal_width;
        params.log_gate_scale.grad.data_mut()[0] += self.log_gate_scale;
        add(&mut params.squeeze_w.grad, &self.squeeze_w);
        add(&mut params.squeeze_b.grad, &self.squeeze_b);
        add(&mut params.pass_w.grad, &self.pass_w);
        add(&mut params.pass_b.grad, &self.pass_b);
        add(&mut params.final_w.grad, &self.final_w);
        add(&mut params.final_b.grad, &self.final_b);
        add(&mut params.ln_gain.grad, &self.ln_gain);
        add(&mut params.ln_bias.grad, &self.ln_bias);
    }
}

/// Full block forward over a range image: squeeze PConv -> sampler with soft
/// range gating -> reshape -> concat with pass-through PConv -> final PConv
/// -> layer norm -> ELU.
pub fn rcd_block_forward(
    x: &Tensor,
    ri: &RangeImage,
    params: &RcdParams,
    res: &AngularResolution,
) -> Result<(Tensor, RcdState)> {
    rcd_block_forward_plane(x, &RangePlane::from_image(ri), params, res)
}

/// Forward conditioned on a bare range plane (used by downsampled stages).
pub fn rcd_block_forward_plane(
    x: &Tensor,
    plane: &RangePlane,
    params: &RcdParams,
    res: &AngularResolution,
) -> Result<(Tensor, RcdState)> {
    let cfg = &params.config;
    let (h, w) = (plane.height, plane.width);
    if x.shape() != [h, w, cfg.in_channels] {
        return Err(Error::dimension(
            "rcd_block_forward",
            format!("input {:?} does not match [{}x{}x{}]", x.shape(), h, w, cfg.in_channels),
        ));
    }

    let check = |t: &Tensor, stage: &'static str| -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { stage })
        }
    };

    let squeezed = ops::pointwise_conv(x, &params.squeeze_w.value, &params.squeeze_b.value)?;
    check(&squeezed, "squeeze")?;

    let field = transform_pattern(plane, params, res);
    if !field.locations.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { stage: "transform" });
    }

    let sampled = bilinear_sample(&squeezed, &field)?;
    check(&sampled, "sample")?;
    let sampled_range = gather(&plane.range, h, w, 1, &field.locations);

    let (gated, gate) = soft_range_gate(&sampled, &sampled_range, &plane.range, params.gate_scale())?;
    check(&gated, "gate")?;

    let n = cfg.n_samples();
    let c = cfg.squeeze_channels;
    let pass = ops::pointwise_conv(x, &params.pass_w.value, &params.pass_b.value)?;
    check(&pass, "pass")?;

    // [H,W,N,C] flattens to [H,W,N*C] in place; append the pass-through.
    let cat_c = cfg.concat_channels();
    let mut concat = Tensor::zeros(&[h, w, cat_c]);
    {
        let gd = gated.data();
        let pd = pass.data();
        let nc = n * c;
        let cpass = cfg.pass_channels;
        parallel::for_each_row_chunk(concat.data_mut(), cat_c, |first, chunk| {
            for (p, row) in chunk.chunks_mut(cat_c).enumerate() {
                let pixel = first + p;
                row[..nc].copy_from_slice(&gd[pixel * nc..(pixel + 1) * nc]);
                row[nc..].copy_from_slice(&pd[pixel * cpass..(pixel + 1) * cpass]);
            }
        });
    }

    let final_out = ops::pointwise_conv(&concat, &params.final_w.value, &params.final_b.value)?;
    check(&final_out, "final")?;
    let normed = ops::layer_norm(&final_out, &params.ln_gain.value, &params.ln_bias.value, cfg.ln_eps)?;
    check(&normed, "layer_norm")?;
    let out = ops::elu(&normed);
    check(&out, "elu")?;

    let state = RcdState {
        field,
        input: x.clone(),
        squeezed,
        sampled,
        sampled_range,
        gate,
        center_range: plane.range.clone(),
        plane: plane.clone(),
        concat,
        final_out,
        normed,
        res: *res,
    };
    Ok((out, state))
}

/// Analytic gradients for the input tensor and every learnable of the block.
pub fn rcd_block_vjp(upstream: &Tensor, state: &RcdState, params: &RcdParams) -> Result<(Tensor, RcdGrads)> {
    let cfg = &params.config;
    let (h, w) = (state.plane.height, state.plane.width);
    let n = cfg.n_samples();
    let c = cfg.squeeze_channels;
    let cpass = cfg.pass_channels;
    if upstream.shape() != [h, w, cfg.out_channels] {
        return Err(Error::dimension("rcd_block_vjp", "upstream shape mismatch"));
    }

    // elu -> layer norm -> final PConv
    let d_normed = ops::elu_vjp(&state.normed, upstream)?;
    let (d_final, d_ln_gain, d_ln_bias) =
        ops::layer_norm_vjp(&state.final_out, &params.ln_gain.value, cfg.ln_eps, &d_normed)?;
    let (d_concat, d_final_w, d_final_b) =
        ops::pointwise_conv_vjp(&state.concat, &params.final_w.value, &d_final)?;

    // split the concat gradient
    let nc = n * c;
    let cat_c = cfg.concat_channels();
    let mut d_gated = vec![0.0; h * w * nc];
    let mut d_pass = Tensor::zeros(&[h, w, cpass]);
    {
        let dc = d_concat.data();
        parallel::for_each_row_chunk(&mut d_gated, nc, |first, chunk| {
            for (p, row) in chunk.chunks_mut(nc).enumerate() {
                let base = (first + p) * cat_c;
                row.copy_from_slice(&dc[base..base + nc]);
            }
        });
        parallel::for_each_row_chunk(d_pass.data_mut(), cpass, |first, chunk| {
            for (p, row) in chunk.chunks_mut(cpass).enumerate() {
                let base = (first + p) * cat_c + nc;
                row.copy_from_slice(&dc[base..base + cpass]);
            }
        });
    }

    let (mut dx, d_pass_w, d_pass_b) =
        ops::pointwise_conv_vjp(&state.input, &params.pass_w.value, &d_pass)?;

    // gate: gated = sampled * weight
    let gate_scale = params.gate_scale();
    let sd = state.sampled.data();
    let mut d_sampled = vec![0.0; h * w * n * c];
    let mut d_range_sample = vec![0.0; h * w * n];
    let mut d_gate_scale = 0.0;
    for s in 0..h * w * n {
        let wv = state.gate[s];
        let up = &d_gated[s * c..(s + 1) * c];
        let mut dw = 0.0;
        for ch in 0..c {
            d_sampled[s * c + ch] = up[ch] * wv;
            dw += up[ch] * sd[s * c + ch];
        }
        let diff = state.sampled_range[s] - state.center_range[s / n];
        // d pdf / d rhat and d pdf / d scale
        d_range_sample[s] = dw * wv * (-diff / (gate_scale * gate_scale));
        d_gate_scale += dw * wv * (diff * diff / (gate_scale * gate_scale * gate_scale) - 1.0 / gate_scale);
    }
    let d_log_gate_scale = d_gate_scale * gate_scale;

    // two gathers share the location gradient
    let mut d_squeezed = Tensor::zeros(&[h, w, c]);
    let mut d_loc = vec![0.0; h * w * n * 2];
    gather_vjp(
        state.squeezed.data(),
        h,
        w,
        c,
        &state.field.locations,
        &d_sampled,
        d_squeezed.data_mut(),
        &mut d_loc,
    );
    let mut d_plane_sink = vec![0.0; h * w];
    gather_vjp(
        &state.plane.range,
        h,
        w,
        1,
        &state.field.locations,
        &d_range_sample,
        &mut d_plane_sink,
        &mut d_loc,
    );

    // transform: locations -> pattern offsets and nominal width
    let offsets = params.pattern.offsets.value.data();
    let mut d_pattern = Tensor::zeros(&[n, 2]);
    let dp = d_pattern.data_mut();
    let mut d_width = 0.0;
    let width = params.nominal_width();
    let hmax = (h - 1) as f64;
    for pixel in 0..h * w {
        let (sr, sc) = match cfg.dilation {
            DilationMode::RangeConditioned => (
                state.field.dilation[pixel] / state.res.rad_per_pixel_row,
                state.field.dilation[pixel] / state.res.rad_per_pixel_col,
            ),
            DilationMode::Fixed { rate_px } => (rate_px, rate_px),
        };
        let mut d_sigma = 0.0;
        for k in 0..n {
            let s = pixel * n + k;
            let raw_r = state.field.raw_rows[s];
            let clamp_gate = if (0.0..=hmax).contains(&raw_r) { 1.0 } else { 0.0 };
            let d_raw_r = d_loc[s * 2] * clamp_gate;
            let d_raw_c = d_loc[s * 2 + 1];
            dp[k * 2] += d_raw_r * sr;
            dp[k * 2 + 1] += d_raw_c * sc;
            if matches!(cfg.dilation, DilationMode::RangeConditioned) {
                d_sigma += d_raw_r * offsets[k * 2] / state.res.rad_per_pixel_row
                    + d_raw_c * offsets[k * 2 + 1] / state.res.rad_per_pixel_col;
            }
        }
        if matches!(cfg.dilation, DilationMode::RangeConditioned) {
            let r_eff = state.field.cond_range[pixel];
            d_width += d_sigma * r_eff / (r_eff * r_eff + width * width);
        }
    }
    let d_log_nominal_width = d_width * width;

    let (dx_squeeze, d_squeeze_w, d_squeeze_b) =
        ops::pointwise_conv_vjp(&state.input, &params.squeeze_w.value, &d_squeezed)?;
    for (a, b) in dx.data_mut().iter_mut().zip(dx_squeeze.data()) {
        *a += b;
    }

    Ok((
        dx,
        RcdGrads {
            pattern: d_pattern,
            log_nominal_width: d_log_nominal_width,
            log_gate_scale: d_log_gate_scale,
            squeeze_w: d_squeeze_w,
            squeeze_b: d_squeeze_b,
            pass_w: d_pass_w,
            pass_b: d_pass_b,
            final_w: d_final_w,
            final_b: d_final_b,
            ln_gain: d_ln_gain,
            ln_bias: d_ln_bias,
        },
    ))
}
