//! Self-calibration of per-laser inclination and height by Hough voting.
//!
//! Every point constrains the (height, inclination) pairs satisfying
//! `z = h + sqrt(x^2 + y^2) * tan(phi)`. Lasers are extracted sequentially:
//! vote over the discretized (inclination, height) space, take the highest
//! cell, refine it by least squares over the points it captures, remove
//! those points, and repeat. A final polish reassigns every point to its
//! nearest recovered laser and refits.
//!
//! Sequential extraction is used instead of one-shot top-k peak picking
//! because the voting space carries a duality ridge per laser (a line of
//! near-equal counts) that can outvote the true peaks of weaker lasers.

use crate::error::{Error, Result};
use crate::rangeimage::{Laser, LaserCalibration, PointCloud};

/// Accumulator extents for Hough voting. Defaults cover automotive
/// roof-mounted spinners.
#[derive(Debug, Clone, PartialEq)]
pub struct HoughConfig {
    /// Height search window, meters.
    pub height_range: (f64, f64),
    /// Inclination search window, radians.
    pub incl_range: (f64, f64),
    /// Points closer than this horizontal distance are ignored: near the
    /// sensor axis the laser cones are unresolvable.
    pub min_distance: f64,
    pub azimuth_steps: usize,
}

impl Default for HoughConfig {
    fn default() -> Self {
        HoughConfig {
            height_range: (-1.0, 1.0),
            incl_range: (-0.5, 0.5),
            min_distance: 1.0,
            azimuth_steps: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    hmin: f64,
    imin: f64,
    hbw: f64,
    ibw: f64,
    height_bins: usize,
    incl_bins: usize,
}

impl Grid {
    fn new(cfg: &HoughConfig, height_bins: usize, incl_bins: usize) -> Grid {
        Grid {
            hmin: cfg.height_range.0,
            imin: cfg.incl_range.0,
            hbw: (cfg.height_range.1 - cfg.height_range.0) / height_bins as f64,
            ibw: (cfg.incl_range.1 - cfg.incl_range.0) / incl_bins as f64,
            height_bins,
            incl_bins,
        }
    }

    fn cell_center(&self, ib: usize, hb: usize) -> (f64, f64) {
        (
            self.imin + (ib as f64 + 0.5) * self.ibw,
            self.hmin + (hb as f64 + 0.5) * self.hbw,
        )
    }
}

/// Recover `n_lasers` (inclination, height) pairs from an unordered cloud.
pub fn hough_calibrate(
    cloud: &PointCloud,
    n_lasers: usize,
    height_bins: usize,
    incl_bins: usize,
) -> Result<LaserCalibration> {
    hough_calibrate_with(cloud, n_lasers, height_bins, incl_bins, &HoughConfig::default())
}

pub fn hough_calibrate_with(
    cloud: &PointCloud,
    n_lasers: usize,
    height_bins: usize,
    incl_bins: usize,
    cfg: &HoughConfig,
) -> Result<LaserCalibration> {
    if n_lasers == 0 {
        return Err(Error::Config("n_lasers must be positive".into()));
    }
    if height_bins < 32 || incl_bins < 32 {
        return Err(Error::Config("Hough bin counts must be >= 32".into()));
    }
    let samples = usable_samples(cloud, cfg);
    if samples.len() < 2 * n_lasers {
        return Err(Error::Calibration(format!(
            "only {} usable points for {} lasers",
            samples.len(),
            n_lasers
        )));
    }
    let grid = Grid::new(cfg, height_bins, incl_bins);

    // Sequential extraction.
    let mut active = vec![true; samples.len()];
    let mut params: Vec<(f64, f64)> = Vec::with_capacity(n_lasers); // (h, tan(phi))
    for k in 0..n_lasers {
        let acc = vote(&samples, &active, &grid);
        let Some((ib, hb, count)) = max_cell(&acc, &grid) else {
            return Err(Error::Calibration(format!("no votes left after {} lasers", k)));
        };
        if count < 2 {
            return Err(Error::Calibration(format!(
                "accumulator exhausted after {} lasers (peak count {})",
                k, count
            )));
        }
        let (phi, h) = grid.cell_center(ib, hb);
        let mut line = (h, phi.tan());
        // refine over the quantization capture band, twice
        for _ in 0..2 {
            if let Some(fit) = fit_within_band(&samples, &active, line, &grid) {
                line = fit;
            }
        }
        // deactivate the captured points
        let mut captured = 0usize;
        for (i, &(d, z)) in samples.iter().enumerate() {
            if active[i] && in_band(line, d, z, &grid) {
                active[i] = false;
                captured += 1;
            }
        }
        if captured < 2 {
            return Err(Error::Calibration(format!(
                "peak {} captured only {} points; cloud has fewer elevation clusters than requested",
                k, captured
            )));
        }
        params.push(line);
    }

    // Global polish: nearest-line assignment over all points, refit, repeat.
    let mut sums = vec![[0.0f64; 5]; n_lasers]; // n, sd, sdd, sz, sdz
    for _ in 0..2 {
        assign_all(&samples, &params, &mut sums);
        for (li, s) in sums.iter().enumerate() {
            let det = s[0] * s[2] - s[1] * s[1];
            if s[0] < 2.0 || det.abs() < 1e-9 {
                continue; // keep previous estimate
            }
            let h = (s[3] * s[2] - s[1] * s[4]) / det;
            let t = (s[0] * s[4] - s[1] * s[3]) / det;
            params[li] = (h, t);
        }
    }
    assign_all(&samples, &params, &mut sums);
    if let Some(li) = sums.iter().position(|s| s[0] < 2.0) {
        return Err(Error::Calibration(format!(
            "laser {} claims {} points; cloud has fewer elevation clusters than requested",
            li, sums[li][0]
        )));
    }

    let lasers: Vec<Laser> = params
        .into_iter()
        .map(|(h, t)| Laser { inclination: t.atan(), height: h })
        .collect();
    LaserCalibration::new(lasers, cfg.azimuth_steps)
}

fn usable_samples(cloud: &PointCloud, cfg: &HoughConfig) -> Vec<(f64, f64)> {
    cloud
        .points
        .iter()
        .filter_map(|p| {
            let d = p.ground_distance();
            (d >= cfg.min_distance).then_some((d, p.z))
        })
        .collect()
}

/// For each active point and each height bin, vote the inclination bin
/// consistent with `z = h + d * tan(phi)`.
fn vote(samples: &[(f64, f64)], active: &[bool], grid: &Grid) -> Vec<u32> {
    let mut acc = vec![0u32; grid.incl_bins * grid.height_bins];
    let imax = grid.imin + grid.ibw * grid.incl_bins as f64;
    for (i, &(d, z)) in samples.iter().enumerate() {
        if !active[i] {
            continue;
        }
        for hb in 0..grid.height_bins {
            let h = grid.hmin + (hb as f64 + 0.5) * grid.hbw;
            let phi = ((z - h) / d).atan();
            if phi < grid.imin || phi >= imax {
                continue;
            }
            let ib = (((phi - grid.imin) / grid.ibw) as usize).min(grid.incl_bins - 1);
            acc[ib * grid.height_bins + hb] += 1;
        }
    }
    acc
}

fn max_cell(acc: &[u32], grid: &Grid) -> Option<(usize, usize, u32)> {
    let (mut best, mut best_idx) = (0u32, usize::MAX);
    for (i, &v) in acc.iter().enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    (best > 0).then(|| (best_idx / grid.height_bins, best_idx % grid.height_bins, best))
}

/// Quantization envelope around a line: one height bin plus the inclination
/// bin width scaled by distance.
fn in_band(line: (f64, f64), d: f64, z: f64, grid: &Grid) -> bool {
    let (h, t) = line;
    (z - (h + d * t)).abs() <= grid.hbw + grid.ibw * d
}

fn fit_within_band(
    samples: &[(f64, f64)],
    active: &[bool],
    line: (f64, f64),
    grid: &Grid,
) -> Option<(f64, f64)> {
    let mut s = [0.0f64; 5];
    for (i, &(d, z)) in samples.iter().enumerate() {
        if active[i] && in_band(line, d, z, grid) {
            s[0] += 1.0;
            s[1] += d;
            s[2] += d * d;
            s[3] += z;
            s[4] += d * z;
        }
    }
    let det = s[0] * s[2] - s[1] * s[1];
    if s[0] < 2.0 || det.abs() < 1e-9 {
        return None;
    }
    Some(((s[3] * s[2] - s[1] * s[4]) / det, (s[0] * s[4] - s[1] * s[3]) / det))
}

fn assign_all(samples: &[(f64, f64)], params: &[(f64, f64)], sums: &mut [[f64; 5]]) {
    for s in sums.iter_mut() {
        *s = [0.0; 5];
    }
    for &(d, z) in samples {
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for (li, &(h, t)) in params.iter().enumerate() {
            let err = (h + d * t - z).abs();
            if err < best_err {
                best_err = err;
                best = li;
            }
        }
        let s = &mut sums[best];
        s[0] += 1.0;
        s[1] += d;
        s[2] += d * d;
        s[3] += z;
        s[4] += d * z;
    }
}

/// First extraction peak for each laser, before any least-squares
/// refinement. Test hook for the "within one accumulator bin" contract.
pub fn initial_peaks(
    cloud: &PointCloud,
    n_lasers: usize,
    height_bins: usize,
    incl_bins: usize,
    cfg: &HoughConfig,
) -> Result<Vec<(f64, f64)>> {
    let samples = usable_samples(cloud, cfg);
    let grid = Grid::new(cfg, height_bins, incl_bins);
    let mut active = vec![true; samples.len()];
    let mut out = Vec::with_capacity(n_lasers);
    for _ in 0..n_lasers {
        let acc = vote(&samples, &active, &grid);
        let Some((ib, hb, _)) = max_cell(&acc, &grid) else {
            return Err(Error::Calibration("accumulator exhausted".into()));
        };
        let (phi, h) = grid.cell_center(ib, hb);
        let mut line = (h, phi.tan());
        for _ in 0..2 {
            if let Some(fit) = fit_within_band(&samples, &active, line, &grid) {
                line = fit;
            }
        }
        for (i, &(d, z)) in samples.iter().enumerate() {
            if active[i] && in_band(line, d, z, &grid) {
                active[i] = false;
            }
        }
        out.push((phi, h));
    }
    Ok(out)
}
