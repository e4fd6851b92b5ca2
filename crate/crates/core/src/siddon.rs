//! Exact ray–grid intersection lengths by parametric traversal (Siddon).

use crate::error::{CoreError, Result};
use crate::geometry::ScannerGeometry2D;

/// Line `origin + λ · direction` with unit `direction`.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: (f64, f64),
    pub direction: (f64, f64),
}

/// Components this small are treated as exactly axis-parallel.
const PARALLEL_EPS: f64 = 1e-12;

impl Ray {
    /// Ray measured by detector bin `bin` at view `angle_index`. The detector
    /// axis is `(cos θ, sin θ)` and rays travel along `(-sin θ, cos θ)`.
    pub fn for_bin(geometry: &ScannerGeometry2D, angle_index: usize, bin: usize) -> Self {
        let theta = geometry.angle(angle_index);
        let (s, c) = theta.sin_cos();
        let t = geometry.bin_offset(bin);
        Self {
            origin: (t * c, t * s),
            direction: (-s, c),
        }
    }

    /// Parametric interval `[λ_in, λ_out]` inside the grid's bounding box.
    pub fn clip(&self, geometry: &ScannerGeometry2D) -> Option<(f64, f64)> {
        let half = geometry.fov_mm() / 2.0;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (o, d) in [
            (self.origin.0, self.direction.0),
            (self.origin.1, self.direction.1),
        ] {
            if d.abs() < PARALLEL_EPS {
                // half-open so a ray on the outer edge belongs to no pixel
                if o < -half || o >= half {
                    return None;
                }
            } else {
                let (a, b) = ((-half - o) / d, (half - o) / d);
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
        }
        (hi - lo > PARALLEL_EPS * geometry.fov_mm()).then_some((lo, hi))
    }
}

/// Pixel indices and intersection lengths (mm) of one detector ray, sorted
/// by pixel index. A ray that misses the grid yields an empty list.
pub fn siddon_trace(
    geometry: &ScannerGeometry2D,
    angle_index: usize,
    bin: usize,
) -> Result<Vec<(usize, f64)>> {
    if angle_index >= geometry.n_angles || bin >= geometry.n_bins {
        return Err(CoreError::invalid(format!(
            "ray ({angle_index}, {bin}) outside {}x{} detector",
            geometry.n_angles, geometry.n_bins
        )));
    }
    Ok(trace_ray(
        geometry,
        &Ray::for_bin(geometry, angle_index, bin),
    ))
}

pub fn trace_ray(geometry: &ScannerGeometry2D, ray: &Ray) -> Vec<(usize, f64)> {
    let Some((lo, hi)) = ray.clip(geometry) else {
        return Vec::new();
    };
    let n = geometry.image_size;
    let ps = geometry.pixel_size_mm;
    let half = geometry.fov_mm() / 2.0;

    let mut lambdas = Vec::with_capacity(2 * n + 2);
    lambdas.push(lo);
    for (o, d) in [
        (ray.origin.0, ray.direction.0),
        (ray.origin.1, ray.direction.1),
    ] {
        if d.abs() < PARALLEL_EPS {
            continue;
        }
        for k in 1..n {
            let plane = -half + k as f64 * ps;
            let l = (plane - o) / d;
            if l > lo && l < hi {
                lambdas.push(l);
            }
        }
    }
    lambdas.push(hi);
    lambdas.sort_by(|a, b| a.total_cmp(b));

    let mut hits: Vec<(usize, f64)> = Vec::with_capacity(lambdas.len());
    for w in lambdas.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let x = ray.origin.0 + mid * ray.direction.0;
        let y = ray.origin.1 + mid * ray.direction.1;
        let col = (((x + half) / ps).floor().max(0.0) as usize).min(n - 1);
        let row = (((half - y) / ps).floor().max(0.0) as usize).min(n - 1);
        hits.push((row * n + col, len));
    }
    hits.sort_by_key(|&(j, _)| j);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(hits.len());
    for (j, len) in hits {
        match merged.last_mut() {
            Some((last, acc)) if *last == j => *acc += len,
            _ => merged.push((j, len)),
        }
    }
    merged
}
