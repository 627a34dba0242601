//! Analytic per-pixel FLOP accounting for an RCD block versus a standard
//! dense k x k convolution.
//!
//! Convention, pinned here and used consistently: a multiply-add counts as
//! 2 FLOPs; a pointwise conv Cin -> Cout costs `2 * Cin * Cout` per pixel
//! (bias folded); one bilinear sample costs 15 FLOPs per channel (9 mul +
//! 6 add) plus 1 gate multiply per channel plus 10 FLOPs for the Gaussian
//! pdf evaluation; normalization and activation cost 6 FLOPs per output
//! channel. When the sampler is disabled (N = 0) the squeeze path costs
//! nothing and the block degenerates to two chained pointwise convs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlopConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub squeeze_channels: usize,
    pub pass_channels: usize,
    pub n_samples: usize,
}

impl Default for BlockFlopConfig {
    fn default() -> Self {
        BlockFlopConfig {
            in_channels: 64,
            out_channels: 64,
            squeeze_channels: 3,
            pass_channels: 64,
            n_samples: 64,
        }
    }
}

pub fn pconv_flops(cin: usize, cout: usize) -> u64 {
    2 * cin as u64 * cout as u64
}

/// Per-pixel cost of one RCD block under the documented convention.
pub fn rcd_flops_per_pixel(cfg: &BlockFlopConfig) -> u64 {
    let c = cfg.squeeze_channels as u64;
    let n = cfg.n_samples as u64;
    let sampler_path = if n == 0 {
        0
    } else {
        pconv_flops(cfg.in_channels, cfg.squeeze_channels) + n * (15 * c + c + 10)
    };
    let concat_in = cfg.n_samples * cfg.squeeze_channels + cfg.pass_channels;
    sampler_path
        + pconv_flops(cfg.in_channels, cfg.pass_channels)
        + pconv_flops(concat_in, cfg.out_channels)
        + 6 * cfg.out_channels as u64
}

/// Per-pixel cost of a dense k x k convolution with the same channel widths.
pub fn standard_conv_flops_per_pixel(kernel: usize, cin: usize, cout: usize) -> u64 {
    (kernel * kernel) as u64 * cin as u64 * cout as u64 * 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_conv_closed_forms() {
        assert_eq!(standard_conv_flops_per_pixel(7, 64, 64), 401_408);
        assert_eq!(standard_conv_flops_per_pixel(5, 64, 64), 204_800);
    }

    #[test]
    fn default_block_is_at_least_5x_cheaper_than_7x7() {
        let rcd = rcd_flops_per_pixel(&BlockFlopConfig::default());
        let standard = standard_conv_flops_per_pixel(7, 64, 64);
        let ratio = standard as f64 / rcd as f64;
        assert!(ratio >= 5.0, "ratio {} (rcd {})", ratio, rcd);
    }

    #[test]
    fn sampler_free_block_degenerates_to_two_pconvs() {
        let cfg = BlockFlopConfig {
            in_channels: 32,
            out_channels: 48,
            squeeze_channels: 3,
            pass_channels: 32,
            n_samples: 0,
        };
        let expected = pconv_flops(32, 32) + pconv_flops(32, 48) + 6 * 48;
        assert_eq!(rcd_flops_per_pixel(&cfg), expected);
    }
}
