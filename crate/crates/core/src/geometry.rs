//! 2D parallel-beam scanner description.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Parallel-beam scanner with `n_angles` views uniformly spanning `[0, π)`
/// and a detector of `n_bins` bins centred on a square pixel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerGeometry2D {
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_spacing_mm: f64,
    pub image_size: usize,
    pub pixel_size_mm: f64,
    /// Image-space Gaussian PSF full width at half maximum; 0 disables it.
    #[serde(default)]
    pub psf_fwhm_mm: f64,
}

impl Default for ScannerGeometry2D {
    /// 64×64 grid of 2 mm pixels, 60 angles × 95 bins of 2 mm.
    fn default() -> Self {
        Self {
            n_angles: 60,
            n_bins: 95,
            bin_spacing_mm: 2.0,
            image_size: 64,
            pixel_size_mm: 2.0,
            psf_fwhm_mm: 0.0,
        }
    }
}

impl ScannerGeometry2D {
    /// 32×32 grid of 2 mm pixels, 30 angles × 47 bins of 2 mm.
    pub fn desk_small() -> Self {
        Self {
            n_angles: 30,
            n_bins: 47,
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn with_psf(&self, fwhm_mm: f64) -> Self {
        Self {
            psf_fwhm_mm: fwhm_mm,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::Geometry(msg.to_string()));
        if self.n_angles == 0 || self.n_bins == 0 || self.image_size == 0 {
            return bad("n_angles, n_bins and image_size must be at least 1");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.bin_spacing_mm) || !positive(self.pixel_size_mm) {
            return bad("bin and pixel spacings must be positive");
        }
        if !(self.psf_fwhm_mm.is_finite() && self.psf_fwhm_mm >= 0.0) {
            return bad("psf_fwhm_mm must be non-negative");
        }
        Ok(())
    }

    /// Number of detector rows `I`.
    pub fn n_rays(&self) -> usize {
        self.n_angles * self.n_bins
    }

    /// Number of pixels `J`.
    pub fn n_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn fov_mm(&self) -> f64 {
        self.image_size as f64 * self.pixel_size_mm
    }

    pub fn angle(&self, angle_index: usize) -> f64 {
        angle_index as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    /// Signed detector offset of a bin centre from the rotation axis.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_spacing_mm
    }

    /// Centre of pixel `(row, col)` in mm; row 0 is the top (largest `y`).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = self.fov_mm() / 2.0;
        let ps = self.pixel_size_mm;
        (
            -half + (col as f64 + 0.5) * ps,
            half - (row as f64 + 0.5) * ps,
        )
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("geometry serializes");
        hex_digest(&Sha256::digest(&json))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
        let geometry: Self = serde_json::from_slice(&bytes)?;
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(CoreError::io(path))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
