//! The range-conditioned dilation block: pattern transformer, bilinear
//! sampler with boundary rules, soft range gating, and pointwise-conv
//! assembly, with hand-written gradients for every learnable.

pub mod block;
pub mod checkpoint;
pub mod flops;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, Tensor};
use crate::rangeimage::RangeImage;

pub use block::{
    bilinear_sample, dilation_rate, rcd_block_forward, rcd_block_forward_plane, rcd_block_vjp,
    soft_range_gate, transform_pattern, RcdGrads, RcdState, SampleField,
};

/// Angular extent of one pixel along each image axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularResolution {
    pub rad_per_pixel_row: f64,
    pub rad_per_pixel_col: f64,
}

impl AngularResolution {
    pub fn new(rad_per_pixel_row: f64, rad_per_pixel_col: f64) -> Result<AngularResolution> {
        if rad_per_pixel_row <= 0.0 || rad_per_pixel_col <= 0.0 {
            return Err(Error::Config("angular resolution must be positive".into()));
        }
        Ok(AngularResolution { rad_per_pixel_row, rad_per_pixel_col })
    }
}

/// The H x W range values conditioning the dilation (0 marks invalid pixels).
/// A lightweight view so downsampled stages can condition on pooled ranges.
#[derive(Debug, Clone)]
pub struct RangePlane {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
}

impl RangePlane {
    pub fn from_image(ri: &RangeImage) -> RangePlane {
        RangePlane {
            height: ri.height(),
            width: ri.width(),
            range: ri.channel_plane(crate::rangeimage::Channel::Range),
        }
    }
}

/// Learnable sampling offsets, unitless multipliers of the dilation angle.
/// Axis order is (row, column).
#[derive(Debug, Clone)]
pub struct SamplingPattern {
    pub offsets: Param,
    pub rows: usize,
    pub cols: usize,
}

impl SamplingPattern {
    /// Uniform rows x cols grid spanning [-0.5, 0.5]^2 with exact zero mean:
    /// axis coordinates are built as mirrored +-v pairs so they cancel
    /// exactly in floating point.
    pub fn grid(rows: usize, cols: usize) -> SamplingPattern {
        assert!(rows >= 1 && cols >= 1);
        let n = rows * cols;
        let axis = |m: usize| -> Vec<f64> {
            let mut v = vec![0.0; m];
            for i in 0..m / 2 {
                let t = 0.5 - i as f64 / (m - 1) as f64;
                v[i] = -t;
                v[m - 1 - i] = t;
            }
            v
        };
        let (rv, cv) = (axis(rows), axis(cols));
        let mut data = vec![0.0; n * 2];
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                data[k * 2] = rv[r];
                data[k * 2 + 1] = cv[c];
            }
        }
        SamplingPattern {
            offsets: Param::new(Tensor::from_vec(&[n, 2], data).unwrap()),
            rows,
            cols,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.offsets.value.shape()[0]
    }
}

/// How the sampling pattern is scaled per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DilationMode {
    /// arctan(nominal_width / range), converted to pixels per axis.
    RangeConditioned,
    /// Constant dilation in pixels on both axes; reproduces a standard
    /// dilated kernel and freezes the nominal-width gradient.
    Fixed { rate_px: f64 },
}

/// Static configuration of one RCD block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcdConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Squeeze width fed to the sampler.
    pub squeeze_channels: usize,
    /// Pass-through stream width.
    pub pass_channels: usize,
    pub pattern_rows: usize,
    pub pattern_cols: usize,
    /// Initial nominal footprint width, meters.
    pub nominal_width_init: f64,
    /// Initial gate length-scale, meters.
    pub gate_scale_init: f64,
    /// Range substituted when conditioning on an invalid pixel, meters.
    pub range_floor: f64,
    pub dilation: DilationMode,
    pub ln_eps: f64,
}

impl RcdConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> RcdConfig {
        RcdConfig {
            in_channels,
            out_channels,
            squeeze_channels: 3,
            pass_channels: out_channels,
            pattern_rows: 8,
            pattern_cols: 8,
            nominal_width_init: 1.0,
            gate_scale_init: 1.0,
            range_floor: 0.5,
            dilation: DilationMode::RangeConditioned,
            ln_eps: 1e-6,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.pattern_rows * self.pattern_cols
    }

    pub fn concat_channels(&self) -> usize {
        self.n_samples() * self.squeeze_channels + self.pass_channels
    }
}

/// Learnable state of one RCD block. The nominal width and gate scale are
/// stored as log-values so unconstrained optimizer steps keep them positive.
#[derive(Debug, Clone)]
pub struct RcdParams {
    pub config: RcdConfig,
    pub pattern: SamplingPattern,
    pub log_nominal_width: Param,
    pub log_gate_scale: Param,
    pub squeeze_w: Param,
    pub squeeze_b: Param,
    pub pass_w: Param,
    pub pass_b: Param,
    pub final_w: Param,
    pub final_b: Param,
    pub ln_gain: Param,
    pub ln_bias: Param,
}

impl RcdParams {
    pub fn init(config: RcdConfig, rng: &mut impl Rng) -> RcdParams {
        let cin = config.in_channels;
        let c = config.squeeze_channels;
        let cpass = config.pass_channels;
        let cout = config.out_channels;
        let cat = config.concat_channels();
        let pattern = SamplingPattern::grid(config.pattern_rows, config.pattern_cols);
        RcdParams {
            pattern,
            log_nominal_width: Param::new(Tensor::from_vec(&[1], vec![config.nominal_width_init.ln()]).unwrap()),
            log_gate_scale: Param::new(Tensor::from_vec(&[1], vec![config.gate_scale_init.ln()]).unwrap()),
            squeeze_w: Param::new(he_init(&[cin, c], rng)),
            squeeze_b: Param::new(Tensor::zeros(&[c])),
            pass_w: Param::new(he_init(&[cin, cpass], rng)),
            pass_b: Param::new(Tensor::zeros(&[cpass])),
            final_w: Param::new(he_init(&[cat, cout], rng)),
            final_b: Param::new(Tensor::zeros(&[cout])),
            ln_gain: Param::new(Tensor::filled(&[cout], 1.0)),
            ln_bias: Param::new(Tensor::zeros(&[cout])),
            config,
        }
    }

    pub fn nominal_width(&self) -> f64 {
        self.log_nominal_width.value.data()[0].exp()
    }

    pub fn gate_scale(&self) -> f64 {
        self.log_gate_scale.value.data()[0].exp()
    }

    pub fn n_samples(&self) -> usize {
        self.pattern.n_samples()
    }

    /// Learnables in a fixed order, for optimizers and checkpoints.
    pub fn named_params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("pattern", &self.pattern.offsets),
            ("log_nominal_width", &self.log_nominal_width),
            ("log_gate_scale", &self.log_gate_scale),
            ("squeeze_w", &self.squeeze_w),
            ("squeeze_b", &self.squeeze_b),
            ("pass_w", &self.pass_w),
            ("pass_b", &self.pass_b),
            ("final_w", &self.final_w),
            ("final_b", &self.final_b),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("pattern", &mut self.pattern.offsets),
            ("log_nominal_width", &mut self.log_nominal_width),
            ("log_gate_scale", &mut self.log_gate_scale),
            ("squeeze_w", &mut self.squeeze_w),
            ("squeeze_b", &mut self.squeeze_b),
            ("pass_w", &mut self.pass_w),
            ("pass_b", &mut self.pass_b),
            ("final_w", &mut self.final_w),
            ("final_b", &mut self.final_b),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
        ]
    }
}

pub(crate) fn he_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in = shape[0].max(1) as f64;
    let scale = (2.0 / fan_in).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_init_spans_half_unit_square_with_zero_mean() {
        let p = SamplingPattern::grid(8, 8);
        assert_eq!(p.n_samples(), 64);
        let d = p.offsets.value.data();
        let (mut min_r, mut max_r) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..64 {
            min_r = min_r.min(d[k * 2]);
            max_r = max_r.max(d[k * 2]);
        }
        assert_eq!(min_r, -0.5);
        assert_eq!(max_r, 0.5);
        // every offset has an exact mirror, so the mean is exactly zero
        for r in 0..8 {
            for c in 0..8 {
                let k = r * 8 + c;
                let mirror = (7 - r) * 8 + (7 - c);
                assert_eq!(d[k * 2], -d[mirror * 2]);
                assert_eq!(d[k * 2 + 1], -d[mirror * 2 + 1]);
            }
        }
    }

    #[test]
    fn degenerate_single_sample_grid_is_centered() {
        let p = SamplingPattern::grid(1, 1);
        assert_eq!(p.offsets.value.data(), &[0.0, 0.0]);
    }

    #[test]
    fn positivity_is_reparameterized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let mut params = RcdParams::init(RcdConfig::new(8, 16), &mut rng);
        assert!((params.nominal_width() - 1.0).abs() < 1e-12);
        // even a huge negative step keeps the width positive
        params.log_nominal_width.value.data_mut()[0] -= 50.0;
        assert!(params.nominal_width() > 0.0);
    }
}
