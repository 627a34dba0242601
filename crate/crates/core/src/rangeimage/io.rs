//! File formats: raw binary pointclouds, RIMG range-image files, and
//! calibration JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rangeimage::{LaserCalibration, Point, PointCloud, RangeImage, CHANNELS};

const RIMG_MAGIC: &[u8; 4] = b"RIMG";
const DTYPE_F32: u8 = 0;

/// Read a little-endian stream of (x, y, z, intensity) float32 records,
/// 16 bytes per point. Intensity is clamped to [0, 1]; non-finite
/// coordinates are rejected.
pub fn read_pointcloud(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(0, e))?;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| Error::io(0, e))?;
    parse_pointcloud(&buf)
}

pub fn parse_pointcloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::io(
            (bytes.len() / 16 * 16) as u64,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("trailing {} bytes; records are 16 bytes", bytes.len() % 16),
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        let (x, y, z, intensity) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Format(format!("non-finite coordinates in record {}", i)));
        }
        points.push(Point { x, y, z, intensity: intensity.clamp(0.0, 1.0) });
    }
    Ok(PointCloud::new(points))
}

pub fn write_pointcloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(0, e))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(0, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(0, e))
}

/// Write the RIMG container: magic, H/W/C as u32 LE, a dtype tag byte, the
/// float32 channel-interleaved payload, then one validity byte per pixel.
pub fn write_range_image(path: &Path, ri: &RangeImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(0, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(RIMG_MAGIC).map_err(|e| Error::io(0, e))?;
    for dim in [ri.height() as u32, ri.width() as u32, CHANNELS as u32] {
        w.write_all(&dim.to_le_bytes()).map_err(|e| Error::io(0, e))?;
    }
    w.write_all(&[DTYPE_F32]).map_err(|e| Error::io(0, e))?;
    for &v in ri.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(0, e))?;
    }
    for &v in ri.valid() {
        w.write_all(&[v as u8]).map_err(|e| Error::io(0, e))?;
    }
    w.flush().map_err(|e| Error::io(0, e))
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    let file = File::open(path).map_err(|e| Error::io(0, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(0, e))?;
    parse_range_image(&bytes)
}

pub fn parse_range_image(bytes: &[u8]) -> Result<RangeImage> {
    let need = |offset: usize, n: usize| -> Result<()> {
        if bytes.len() < offset + n {
            Err(Error::io(
                bytes.len() as u64,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated RIMG file"),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 17)?;
    if &bytes[0..4] != RIMG_MAGIC {
        return Err(Error::Format("bad RIMG magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (h, w, c) = (u32_at(4), u32_at(8), u32_at(12));
    if c != CHANNELS {
        return Err(Error::Format(format!("expected {} channels, file has {}", CHANNELS, c)));
    }
    if bytes[16] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", bytes[16])));
    }
    let payload = 17;
    let n_values = h * w * c;
    need(payload, n_values * 4 + h * w)?;
    let mut data = Vec::with_capacity(n_values);
    for i in 0..n_values {
        let o = payload + i * 4;
        data.push(f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64);
    }
    let vbase = payload + n_values * 4;
    let valid: Vec<bool> = bytes[vbase..vbase + h * w].iter().map(|&b| b != 0).collect();
    RangeImage::from_parts(h, w, data, valid)
}

pub fn write_calibration(path: &Path, calib: &LaserCalibration) -> Result<()> {
    let json = serde_json::to_string_pretty(calib)
        .map_err(|e| Error::Format(format!("calibration encode: {}", e)))?;
    std::fs::write(path, json).map_err(|e| Error::io(0, e))
}

pub fn read_calibration(path: &Path) -> Result<LaserCalibration> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(0, e))?;
    let raw: LaserCalibration =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("calibration decode: {}", e)))?;
    // normalize ordering and re-check invariants
    LaserCalibration::new(raw.lasers, raw.azimuth_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangeimage::{build_range_image, Laser};
    use tempfile::tempdir;

    #[test]
    fn pointcloud_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let cloud = PointCloud::new(vec![
            Point { x: 1.0, y: 2.0, z: 3.0, intensity: 0.5 },
            Point { x: -4.0, y: 0.25, z: -1.5, intensity: 1.0 },
        ]);
        write_pointcloud(&path, &cloud).unwrap();
        let back = read_pointcloud(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back.points[0].x - 1.0).abs() < 1e-6);
        assert!((back.points[1].intensity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn short_file_reports_byte_offset() {
        let err = parse_pointcloud(&[0u8; 20]).unwrap_err();
        match err {
            Error::Io { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn intensity_is_clamped_on_load() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 7.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = parse_pointcloud(&bytes).unwrap();
        assert_eq!(cloud.points[0].intensity, 1.0);
    }

    #[test]
    fn non_finite_coordinates_are_rejected()  {
        let mut bytes = Vec::new();
        for v in [f32::NAN, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(parse_pointcloud(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn range_image_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("image.rimg");
        let calib = LaserCalibration::new(
            vec![Laser { inclination: 0.1, height: 0.0 }, Laser { inclination: -0.1, height: 0.0 }],
            32,
        )
        .unwrap();
        let cloud = PointCloud::new(vec![
            Point { x: 10.0, y: 1.0, z: 1.0, intensity: 0.25 },
            Point { x: -5.0, y: 2.0, z: -0.5, intensity: 0.75 },
        ]);
        let ri = build_range_image(&cloud, &calib);
        write_range_image(&path, &ri).unwrap();
        let back = read_range_image(&path).unwrap();
        assert_eq!(back.height(), ri.height());
        assert_eq!(back.width(), ri.width());
        assert_eq!(back.valid(), ri.valid());
        for (a, b) in back.data().iter().zip(ri.data()) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn truncated_range_image_reports_offset() {
        let calib = LaserCalibration::new(vec![Laser { inclination: 0.0, height: 0.0 }], 8).unwrap();
        let ri = build_range_image(&PointCloud::default(), &calib);
        let dir = tempdir().unwrap();
        let path = dir.path().join("image.rimg");
        write_range_image(&path, &ri).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(parse_range_image(cut), Err(Error::Io { .. })));
    }

    #[test]
    fn calibration_json_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("calib.json");
        let calib = LaserCalibration::new(
            vec![Laser { inclination: 0.2, height: 0.05 }, Laser { inclination: -0.3, height: -0.01 }],
            2048,
        )
        .unwrap();
        write_calibration(&path, &calib).unwrap();
        let back = read_calibration(&path).unwrap();
        assert_eq!(back, calib);
    }
}
