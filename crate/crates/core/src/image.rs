//! Image and sinogram containers and their binary file formats.
//!
//! * `IMG1`: magic `b"IMG1"`, little-endian `u32` height and width, then
//!   row-major `f64` values.
//! * `SIN1`: magic `b"SIN1"`, little-endian `u32` n_angles and n_bins, then
//!   `f64` values, angle-major.

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Square activity image, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    size: usize,
    values: Vec<f64>,
}

/// Projection data indexed `(angle, bin)`; row `i = angle · n_bins + bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_bins: usize,
    values: Vec<f64>,
}

impl Image2D {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(CoreError::SizeMismatch {
                what: "image",
                expected: format!("{size}x{size} values"),
                got: values.len().to_string(),
            });
        }
        Ok(Self { size, values })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            values: vec![value; size * size],
        }
    }

    pub fn zeros(size: usize) -> Self {
        Self::filled(size, 0.0)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            size: self.size,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn check_size(&self, size: usize) -> Result<()> {
        if self.size == size {
            Ok(())
        } else {
            Err(CoreError::SizeMismatch {
                what: "image",
                expected: format!("{size}x{size}"),
                got: format!("{0}x{0}", self.size),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(
            path,
            b"IMG1",
            self.size as u32,
            self.size as u32,
            &self.values,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, w, values) = read_container(path, "IMG1", b"IMG1")?;
        if h != w {
            return Err(CoreError::Format {
                kind: "IMG1",
                path: path.to_path_buf(),
                reason: format!("non-square image {h}x{w}"),
            });
        }
        Self::new(h, values)
    }

    /// Binary PGM export of the max-normalized image with a linear 8-bit ramp.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let max = self.max();
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut bytes = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        bytes.extend(
            self.values
                .iter()
                .map(|v| (v.max(0.0) * scale).round().min(255.0) as u8),
        );
        std::fs::write(path, bytes).map_err(CoreError::io(path))
    }
}

impl Sinogram {
    pub fn new(n_angles: usize, n_bins: usize, values: Vec<f64>) -> Result<Self> {
        if n_angles == 0 || n_bins == 0 || values.len() != n_angles * n_bins {
            return Err(CoreError::SizeMismatch {
                what: "sinogram",
                expected: format!("{n_angles}x{n_bins} values"),
                got: values.len().to_string(),
            });
        }
        Ok(Self {
            n_angles,
            n_bins,
            values,
        })
    }

    pub fn filled(n_angles: usize, n_bins: usize, value: f64) -> Self {
        Self {
            n_angles,
            n_bins,
            values: vec![value; n_angles * n_bins],
        }
    }

    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Self::filled(n_angles, n_bins, 0.0)
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn check_dims(&self, n_angles: usize, n_bins: usize) -> Result<()> {
        if self.n_angles == n_angles && self.n_bins == n_bins {
            Ok(())
        } else {
            Err(CoreError::SizeMismatch {
                what: "sinogram",
                expected: format!("{n_angles}x{n_bins}"),
                got: format!("{}x{}", self.n_angles, self.n_bins),
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(
            path,
            b"SIN1",
            self.n_angles as u32,
            self.n_bins as u32,
            &self.values,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (a, b, values) = read_container(path, "SIN1", b"SIN1")?;
        Self::new(a, b, values)
    }
}

fn write_container(path: &Path, magic: &[u8; 4], d0: u32, d1: u32, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * values.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&d0.to_le_bytes());
    buf.extend_from_slice(&d1.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(CoreError::io(path))?;
    file.write_all(&buf).map_err(CoreError::io(path))
}

fn read_container(
    path: &Path,
    kind: &'static str,
    magic: &[u8; 4],
) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
    let bad = |reason: String| CoreError::Format {
        kind,
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad("missing magic header".into()));
    }
    let d0 = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d1 = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * d0 * d1 {
        return Err(bad(format!(
            "expected {} values, found {} bytes",
            d0 * d1,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((d0, d1, values))
}
