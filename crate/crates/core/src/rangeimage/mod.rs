//! Dense, compact range images from raw pointclouds.
//!
//! Rows correspond to laser inclinations (sorted descending), columns to
//! azimuth. Construction uses a per-laser calibration that can either be
//! supplied or recovered from the cloud itself via Hough voting.

pub mod hough;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hough::{hough_calibrate, HoughConfig};

/// Number of channel planes in a range image, fixed order:
/// range, intensity, elongation, inclination, azimuth, x, y, z.
pub const CHANNELS: usize = 8;

/// Channel indices into a [`RangeImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Range = 0,
    Intensity = 1,
    Elongation = 2,
    Inclination = 3,
    Azimuth = 4,
    X = 5,
    Y = 6,
    Z = 7,
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Horizontal distance from the sensor axis.
    pub fn ground_distance(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

/// An unordered collection of returns; intensities are clamped to [0, 1] on
/// load and non-finite records rejected.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> PointCloud {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One laser beam: cone inclination and mount height above the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Laser {
    pub inclination: f64,
    pub height: f64,
}

impl Laser {
    /// Height of the beam at horizontal distance `d`.
    pub fn z_at(&self, d: f64) -> f64 {
        self.height + d * self.inclination.tan()
    }
}

/// Per-laser geometry plus the azimuth discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserCalibration {
    /// Lasers sorted by inclination, descending (row 0 looks up the most).
    pub lasers: Vec<Laser>,
    pub azimuth_steps: usize,
}

impl LaserCalibration {
    pub fn new(mut lasers: Vec<Laser>, azimuth_steps: usize) -> Result<LaserCalibration> {
        if lasers.is_empty() || azimuth_steps == 0 {
            return Err(Error::Config("calibration needs >= 1 laser and >= 1 azimuth step".into()));
        }
        lasers.sort_by(|a, b| b.inclination.partial_cmp(&a.inclination).unwrap());
        for pair in lasers.windows(2) {
            if pair[0].inclination <= pair[1].inclination {
                return Err(Error::Calibration("laser inclinations are not strictly monotonic".into()));
            }
        }
        Ok(LaserCalibration { lasers, azimuth_steps })
    }

    pub fn n_lasers(&self) -> usize {
        self.lasers.len()
    }
}

/// Assign a point to the laser that best predicts its height, and return its
/// azimuth in `[0, 2*pi)`. Ties pick the lower laser index.
pub fn assign_laser(p: &Point, calib: &LaserCalibration) -> (usize, f64) {
    let d = p.ground_distance();
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for (i, laser) in calib.lasers.iter().enumerate() {
        let err = (laser.z_at(d) - p.z).abs();
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let az = p.y.atan2(p.x).rem_euclid(two_pi);
    (best, az)
}

/// H x W x 8 multi-channel image plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    /// Channel-interleaved `[H, W, 8]`, row-major.
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> RangeImage {
        RangeImage {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
            valid: vec![false; height * width],
        }
    }

    pub fn from_parts(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<RangeImage> {
        if data.len() != height * width * CHANNELS || valid.len() != height * width {
            return Err(Error::dimension("RangeImage::from_parts", "buffer sizes do not match H x W"));
        }
        Ok(RangeImage { height, width, data, valid })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn get(&self, row: usize, col: usize, ch: Channel) -> f64 {
        self.data[(row * self.width + col) * CHANNELS + ch as usize]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: Channel, v: f64) {
        self.data[(row * self.width + col) * CHANNELS + ch as usize] = v;
    }

    pub fn set_valid(&mut self, row: usize, col: usize, v: bool) {
        self.valid[row * self.width + col] = v;
    }

    /// Copy of one channel plane, `[H, W]` row-major.
    pub fn channel_plane(&self, ch: Channel) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.data[i * CHANNELS + ch as usize];
        }
        out
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Cartesian point at a valid pixel.
    pub fn point_at(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.get(row, col, Channel::X),
            self.get(row, col, Channel::Y),
            self.get(row, col, Channel::Z),
        ]
    }
}

/// Build the L x A range image: each point lands in its assigned laser row
/// and azimuth column; colliding points keep the closest (earlier input index
/// on exact range ties). Pixels with no point are invalid and all-zero.
pub fn build_range_image(cloud: &PointCloud, calib: &LaserCalibration) -> RangeImage {
    let h = calib.n_lasers();
    let w = calib.azimuth_steps;
    let mut image = RangeImage::empty(h, w);
    // winning point index per pixel
    let mut winner: Vec<usize> = vec![usize::MAX; h * w];
    let mut best_range: Vec<f64> = vec![f64::INFINITY; h * w];

    let two_pi = 2.0 * std::f64::consts::PI;
    for (idx, p) in cloud.points.iter().enumerate() {
        let (laser_id, az) = assign_laser(p, calib);
        let col = ((az / two_pi * w as f64).floor() as usize).min(w - 1);
        let pix = laser_id * w + col;
        let r = p.range();
        if r < best_range[pix] || (r == best_range[pix] && idx < winner[pix]) {
            best_range[pix] = r;
            winner[pix] = idx;
        }
    }

    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            if winner[pix] == usize::MAX {
                continue;
            }
            let p = &cloud.points[winner[pix]];
            let az = p.y.atan2(p.x).rem_euclid(two_pi);
            image.set(row, col, Channel::Range, p.range());
            image.set(row, col, Channel::Intensity, p.intensity.clamp(0.0, 1.0));
            image.set(row, col, Channel::Elongation, 0.0);
            image.set(row, col, Channel::Inclination, calib.lasers[row].inclination);
            image.set(row, col, Channel::Azimuth, az);
            image.set(row, col, Channel::X, p.x);
            image.set(row, col, Channel::Y, p.y);
            image.set(row, col, Channel::Z, p.z);
            image.set_valid(row, col, true);
        }
    }
    image
}

/// Continuous column wrap: `c mod W`, so -0.5 maps to W - 0.5.
pub fn wrap_column(c: f64, w: usize) -> f64 {
    let wf = w as f64;
    let r = c.rem_euclid(wf);
    // rem_euclid can return exactly W for tiny negative inputs
    if r >= wf {
        r - wf
    } else {
        r
    }
}

/// Clamp a row coordinate to `[0, H - 1]`.
pub fn clamp_row(r: f64, h: usize) -> f64 {
    r.clamp(0.0, (h - 1) as f64)
}
