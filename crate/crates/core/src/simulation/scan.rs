//! Poisson scan simulation and label reconstruction.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Sinogram};
use crate::recon::{initial_image, osem_reconstruct, ReconConfig};
use crate::system::SystemModel;

/// Outcome of [`simulate_scan`].
#[derive(Clone, Debug)]
pub struct SimulatedScan {
    pub y: Sinogram,
    pub b: Sinogram,
    /// Noise-free expectation `A P (scale·x) + b`.
    pub ybar: Sinogram,
    /// Factor applied to the phantom so its projection sums to the requested
    /// true counts.
    pub scale: f64,
}

/// Draws one Poisson realisation of `y ~ Poisson(A P (c·x) + b)`.
///
/// `c` is chosen so that `Σ A P (c·x) = total_true_counts`, and `b` is
/// uniform with `Σ b = f / (1 − f) · total_true_counts` for background
/// fraction `f`.
pub fn simulate_scan<R: Rng>(
    phantom: &Image2D,
    model: &SystemModel,
    total_true_counts: f64,
    background_fraction: f64,
    rng: &mut R,
) -> Result<SimulatedScan> {
    if !(total_true_counts > 0.0 && total_true_counts.is_finite()) {
        return Err(CoreError::invalid("total true counts must be positive"));
    }
    if !(0.0..1.0).contains(&background_fraction) {
        return Err(CoreError::invalid("background fraction must lie in [0, 1)"));
    }
    if phantom.values().iter().any(|&v| !(v >= 0.0)) {
        return Err(CoreError::invalid("phantom activity must be non-negative"));
    }
    let projected = model.forward_project(phantom)?;
    let total = projected.sum();
    if !(total > 0.0) {
        return Err(CoreError::invalid("phantom projects to zero counts"));
    }
    let scale = total_true_counts / total;
    let g = model.geometry();
    let n_rays = g.n_rays();
    let b_total = background_fraction / (1.0 - background_fraction) * total_true_counts;
    let b = Sinogram::filled(g.n_angles, g.n_bins, b_total / n_rays as f64);
    let ybar_values: Vec<f64> = projected
        .values()
        .iter()
        .zip(b.values())
        .map(|(p, bi)| p * scale + bi)
        .collect();
    let y_values = ybar_values
        .iter()
        .map(|&mean| poisson_draw(mean, rng))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SimulatedScan {
        y: Sinogram::new(g.n_angles, g.n_bins, y_values)?,
        b,
        ybar: Sinogram::new(g.n_angles, g.n_bins, ybar_values)?,
        scale,
    })
}

fn poisson_draw<R: Rng>(mean: f64, rng: &mut R) -> Result<f64> {
    if mean == 0.0 {
        return Ok(0.0);
    }
    let dist =
        Poisson::new(mean).map_err(|e| CoreError::Numeric(format!("Poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng))
}

/// Number of OSEM iterations and subsets used for label images.
pub const LABEL_ITERATIONS: usize = 10;
pub const LABEL_SUBSETS: usize = 6;

/// Label image: OSEM (10 iterations, 6 subsets, all-ones start) of the
/// high-count data.
pub fn make_label(y_high: &Sinogram, b_high: &Sinogram, model: &SystemModel) -> Result<Image2D> {
    make_label_with(y_high, b_high, model, LABEL_ITERATIONS, LABEL_SUBSETS)
}

pub fn make_label_with(
    y_high: &Sinogram,
    b_high: &Sinogram,
    model: &SystemModel,
    n_iterations: usize,
    n_subsets: usize,
) -> Result<Image2D> {
    let config = ReconConfig {
        n_iterations,
        n_subsets,
        ..ReconConfig::default()
    };
    osem_reconstruct(model, y_high, b_high, &config, &initial_image(model))
}
