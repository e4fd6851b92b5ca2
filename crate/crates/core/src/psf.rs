//! Image-space Gaussian point spread function.

use crate::image::Image2D;

/// `FWHM = 2√(2 ln 2) · σ`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Normalized 1D kernel taps `w[-R..=R]` for a Gaussian of `sigma_px`
/// pixels truncated at `R = ⌈4σ⌉`. Empty for a vanishing width.
pub fn gaussian_kernel(sigma_px: f64) -> Vec<f64> {
    if !(sigma_px > 0.0) {
        return Vec::new();
    }
    let radius = (4.0 * sigma_px).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

pub fn sigma_pixels(fwhm_mm: f64, pixel_size_mm: f64) -> f64 {
    fwhm_mm / FWHM_PER_SIGMA / pixel_size_mm
}

/// Separable blur of a row-major `n×n` buffer with zero padding. The operator
/// is symmetric, so it is its own adjoint.
pub fn blur_in_place(values: &mut [f64], n: usize, kernel: &[f64]) {
    if kernel.is_empty() {
        return;
    }
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for row in 0..n {
        let src = &values[row * n..(row + 1) * n];
        let dst = &mut tmp[row * n..(row + 1) * n];
        for (c, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let s = c as isize + k as isize - r;
                if s >= 0 && (s as usize) < n {
                    acc += w * src[s as usize];
                }
            }
            *d = acc;
        }
    }
    for row in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let s = row as isize + k as isize - r;
                if s >= 0 && (s as usize) < n {
                    acc += w * tmp[s as usize * n + c];
                }
            }
            values[row * n + c] = acc;
        }
    }
}

/// Gaussian blur of an image with the given FWHM; `fwhm_mm == 0` is the identity.
pub fn gaussian_blur(x: &Image2D, fwhm_mm: f64, pixel_size_mm: f64) -> Image2D {
    let kernel = gaussian_kernel(sigma_pixels(fwhm_mm, pixel_size_mm));
    let mut out = x.clone();
    blur_in_place(out.values_mut(), x.size(), &kernel);
    out
}
