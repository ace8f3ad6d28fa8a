//! Affine geotransform between pixel and geographic coordinates.
//!
//! The transform maps continuous pixel-center coordinates to planar
//! geographic coordinates:
//!
//! ```text
//! lon = a*x + b*y + c        x = col + 0.5
//! lat = d*x + e*y + f        y = row + 0.5
//! ```
//!
//! so integer pixel `(row, col)` is sampled at its center. Coordinates are
//! treated as opaque planar values; no datum or projection handling is done.
//! The transform round-trips with its inverse to better than 1e-9 and
//! serializes losslessly to a six-line world-file sidecar.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    /// The transform's 2x2 linear part is not invertible.
    #[error("geotransform is singular (|det| < 1e-15)")]
    SingularTransform,
    /// World file did not contain exactly six numeric lines.
    #[error("malformed world file: {0}")]
    MalformedWorldFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Six-coefficient affine map between pixel indices and lon/lat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl GeoTransform {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        Self { a, b, c, d, e, f }
    }

    /// Identity transform: pixel `(row, col)` center maps to `(col+0.5, row+0.5)`.
    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    }

    /// Determinant of the linear part.
    pub fn det(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() >= 1e-15
    }

    /// Continuous pixel coordinates to geographic coordinates.
    ///
    /// `(row, col)` are continuous: integer values address pixel centers, so
    /// the half-pixel offset is applied here.
    pub fn pixel_to_geo(&self, row: f64, col: f64) -> (f64, f64) {
        let x = col + 0.5;
        let y = row + 0.5;
        let lon = self.a * x + self.b * y + self.c;
        let lat = self.d * x + self.e * y + self.f;
        (lon, lat)
    }

    /// Geographic coordinates to continuous pixel coordinates `(row, col)`.
    ///
    /// Inverse of [`pixel_to_geo`](Self::pixel_to_geo); the half-pixel offset
    /// is removed so that `geo_to_pixel(pixel_to_geo(p)) == p` within 1e-9.
    pub fn geo_to_pixel(&self, lon: f64, lat: f64) -> Result<(f64, f64), GeoError> {
        let det = self.det();
        if det.abs() < 1e-15 {
            return Err(GeoError::SingularTransform);
        }
        let u = lon - self.c;
        let v = lat - self.f;
        let x = (self.e * u - self.b * v) / det;
        let y = (-self.d * u + self.a * v) / det;
        Ok((y - 0.5, x - 0.5))
    }
}

/// World-file line order: a, d, b, e, c, f.
const WORLD_FILE_LINES: usize = 6;

/// Parse a six-line world file.
pub fn parse_world_file(text: &str) -> Result<GeoTransform, GeoError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != WORLD_FILE_LINES {
        return Err(GeoError::MalformedWorldFile(format!(
            "expected {} lines, found {}",
            WORLD_FILE_LINES,
            lines.len()
        )));
    }
    let mut vals = [0.0f64; WORLD_FILE_LINES];
    for (i, line) in lines.iter().enumerate() {
        vals[i] = line.trim().parse::<f64>().map_err(|_| {
            GeoError::MalformedWorldFile(format!("line {}: not a number: {:?}", i + 1, line))
        })?;
    }
    let [a, d, b, e, c, f] = vals;
    Ok(GeoTransform::new(a, b, c, d, e, f))
}

/// Serialize to world-file text with 17 significant digits per coefficient,
/// enough for a bit-exact f64 round trip.
pub fn format_world_file(gt: &GeoTransform) -> String {
    let mut out = String::new();
    for v in [gt.a, gt.d, gt.b, gt.e, gt.c, gt.f] {
        writeln!(out, "{:.16e}", v).expect("write to string");
    }
    out
}

pub fn read_world_file(path: &Path) -> Result<GeoTransform, GeoError> {
    let text = std::fs::read_to_string(path)?;
    parse_world_file(&text)
}

pub fn write_world_file(gt: &GeoTransform, path: &Path) -> Result<(), GeoError> {
    std::fs::write(path, format_world_file(gt))?;
    Ok(())
}
