//! ML-EM, OSEM and De Pierro MAP-EM with a quadratic neighbourhood penalty.
//!
//! Every solver funnels through [`em_subset_step`], so OSEM with a single
//! subset and plain ML-EM execute the same floating-point operations.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Sinogram};
use crate::system::{SubsetPlan, SystemModel};

pub const DEFAULT_EPSILON_EM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    /// Quadratic penalty weight; 0 disables the prior.
    pub beta: f64,
    /// Floor applied to the expected counts in EM ratios.
    pub epsilon_em: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_iterations: 10,
            n_subsets: 6,
            beta: 0.0,
            epsilon_em: DEFAULT_EPSILON_EM,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || self.n_subsets == 0 {
            return Err(CoreError::invalid(
                "iterations and subsets must be at least 1",
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::invalid(
                "beta must be a finite non-negative number",
            ));
        }
        if !(self.epsilon_em > 0.0) {
            return Err(CoreError::invalid("epsilon_em must be positive"));
        }
        Ok(())
    }
}

/// Intermediate quantities of one EM sub-iteration, kept for differentiation.
#[derive(Clone, Debug)]
pub struct EmStep {
    pub x_em: Vec<f64>,
    /// `Pᵀ A_Sᵀ (y / ȳ)`.
    pub backprojected_ratio: Vec<f64>,
    /// Expected counts `A P x + b` on the subset rows (zero elsewhere).
    pub expected: Vec<f64>,
}

/// EM update restricted to the views of subset `k`:
/// `x̂_j = x_j / s^S_j · Σ_{i∈S} (A P)_ij y_i / ȳ_i`.
///
/// Pixels outside the model's field of view are set to zero; pixels in view
/// but missed by this subset keep their value.
pub fn em_subset_step(
    model: &SystemModel,
    plan: &SubsetPlan,
    k: usize,
    x: &[f64],
    y: &Sinogram,
    b: &Sinogram,
    epsilon_em: f64,
) -> EmStep {
    let angles = &plan.angles[k];
    let sens = &plan.sensitivity[k];
    let mut blurred = x.to_vec();
    model.blur(&mut blurred);
    let mut expected = vec![0.0; y.values().len()];
    model.project_angles(&blurred, angles, &mut expected);
    let nb = model.geometry().n_bins;
    let mut ratio = vec![0.0; expected.len()];
    for &a in angles {
        for i in a * nb..(a + 1) * nb {
            expected[i] += b.values()[i];
            ratio[i] = y.values()[i] / expected[i].max(epsilon_em);
        }
    }
    let mut bp = model.backproject_angles(&ratio, angles);
    model.blur(&mut bp);
    let mask = model.mask();
    let x_em = (0..x.len())
        .map(|j| {
            if !mask[j] {
                0.0
            } else if sens[j] > 0.0 {
                x[j] * bp[j] / sens[j]
            } else {
                x[j]
            }
        })
        .collect();
    EmStep {
        x_em,
        backprojected_ratio: bp,
        expected,
    }
}

fn check_data(model: &SystemModel, x: &Image2D, y: &Sinogram, b: &Sinogram) -> Result<()> {
    let g = model.geometry();
    x.check_size(g.image_size)?;
    y.check_dims(g.n_angles, g.n_bins)?;
    b.check_dims(g.n_angles, g.n_bins)?;
    if x.values().iter().any(|&v| !(v >= 0.0)) {
        return Err(CoreError::invalid("EM iterate must be non-negative"));
    }
    let active = x
        .values()
        .iter()
        .zip(model.mask())
        .any(|(&v, &m)| m && v > 0.0);
    if !active {
        return Err(CoreError::invalid(
            "EM iterate is zero on every pixel in view (zero is an EM fixed point)",
        ));
    }
    Ok(())
}

/// One ML-EM update using all views.
pub fn mlem_update(
    model: &SystemModel,
    x_prev: &Image2D,
    y: &Sinogram,
    b: &Sinogram,
) -> Result<Image2D> {
    check_data(model, x_prev, y, b)?;
    let plan = model.subsets(1)?;
    let step = em_subset_step(model, &plan, 0, x_prev.values(), y, b, DEFAULT_EPSILON_EM);
    Image2D::new(x_prev.size(), step.x_em)
}

pub fn mlem_reconstruct(
    model: &SystemModel,
    y: &Sinogram,
    b: &Sinogram,
    n_iterations: usize,
    x0: &Image2D,
) -> Result<Image2D> {
    osem_reconstruct(
        model,
        y,
        b,
        &ReconConfig {
            n_iterations,
            n_subsets: 1,
            ..ReconConfig::default()
        },
        x0,
    )
}

/// Ordered-subsets EM cycling the interleaved subsets in fixed order. With a
/// positive `beta` each sub-iteration is a De Pierro MAP-EM step (see
/// [`mapem_reconstruct`]).
pub fn osem_reconstruct(
    model: &SystemModel,
    y: &Sinogram,
    b: &Sinogram,
    config: &ReconConfig,
    x0: &Image2D,
) -> Result<Image2D> {
    config.validate()?;
    check_data(model, x0, y, b)?;
    let plan = model.subsets(config.n_subsets)?;
    let n = x0.size();
    let mut x = x0.values().to_vec();
    let beta_per_subset = config.beta / config.n_subsets as f64;
    for _ in 0..config.n_iterations {
        for k in 0..plan.n_subsets() {
            let step = em_subset_step(model, &plan, k, &x, y, b, config.epsilon_em);
            x = if config.beta > 0.0 {
                depierro_fusion(&step.x_em, &x, &plan.sensitivity[k], n, beta_per_subset)
            } else {
                step.x_em
            };
        }
    }
    Image2D::new(n, x)
}

/// Ordered-subsets MAP-EM; the penalty weight of each sub-iteration is
/// `beta / n_subsets` so a full pass applies `beta` once.
pub fn mapem_reconstruct(
    model: &SystemModel,
    y: &Sinogram,
    b: &Sinogram,
    config: &ReconConfig,
    x0: &Image2D,
) -> Result<Image2D> {
    osem_reconstruct(model, y, b, config, x0)
}

/// One MAP-EM update with the separable De Pierro surrogate of the
/// quadratic penalty; `beta == 0` is exactly [`mlem_update`].
pub fn mapem_update(
    model: &SystemModel,
    x_prev: &Image2D,
    y: &Sinogram,
    b: &Sinogram,
    beta: f64,
) -> Result<Image2D> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(CoreError::invalid(
            "beta must be a finite non-negative number",
        ));
    }
    check_data(model, x_prev, y, b)?;
    let plan = model.subsets(1)?;
    let step = em_subset_step(model, &plan, 0, x_prev.values(), y, b, DEFAULT_EPSILON_EM);
    if beta == 0.0 {
        return Image2D::new(x_prev.size(), step.x_em);
    }
    let x = depierro_fusion(
        &step.x_em,
        x_prev.values(),
        &plan.sensitivity[0],
        x_prev.size(),
        beta,
    );
    Image2D::new(x_prev.size(), x)
}

/// 4-neighbours of a pixel on an `n×n` grid, without wrap-around.
fn neighbours(j: usize, n: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (j / n, j % n);
    [
        (r > 0).then(|| j - n),
        (r + 1 < n).then(|| j + n),
        (c > 0).then(|| j - 1),
        (c + 1 < n).then(|| j + 1),
    ]
    .into_iter()
    .flatten()
}

/// Per pixel positive root of `2βW x² + (s − βT) x − s x̂_EM = 0`, with
/// `W = Σ_m w_jm` and `T = Σ_m w_jm (x_j + x_m)` over unit-weight 4-neighbours.
fn depierro_fusion(x_em: &[f64], x_prev: &[f64], sens: &[f64], n: usize, beta: f64) -> Vec<f64> {
    (0..x_em.len())
        .map(|j| {
            let s = sens[j];
            if !(s > 0.0) {
                return x_em[j];
            }
            let (mut w, mut t) = (0.0, 0.0);
            for m in neighbours(j, n) {
                w += 1.0;
                t += x_prev[j] + x_prev[m];
            }
            let a = 2.0 * beta * w;
            let bq = s - beta * t;
            let c = s * x_em[j];
            let disc = (bq * bq + 4.0 * a * c).sqrt();
            if bq >= 0.0 {
                // rationalized root, stable when bq > 0
                if bq + disc > 0.0 {
                    2.0 * c / (bq + disc)
                } else {
                    0.0
                }
            } else {
                (disc - bq) / (2.0 * a)
            }
        })
        .collect()
}

/// `R(x) = ¼ Σ_j Σ_{m∈N_j} (x_j − x_m)²` over 4-neighbours.
pub fn quadratic_penalty(x: &Image2D) -> f64 {
    let n = x.size();
    let v = x.values();
    let mut total = 0.0;
    for j in 0..v.len() {
        for m in neighbours(j, n) {
            total += (v[j] - v[m]).powi(2);
        }
    }
    0.25 * total
}

/// Expected counts `ȳ = A P x + b`.
pub fn expected_counts(model: &SystemModel, x: &Image2D, b: &Sinogram) -> Result<Sinogram> {
    let mut ybar = model.forward_project(x)?;
    b.check_dims(ybar.n_angles(), ybar.n_bins())?;
    for (v, bv) in ybar.values_mut().iter_mut().zip(b.values()) {
        *v += bv;
    }
    Ok(ybar)
}

/// Poisson log-likelihood `Σ_i y_i log ȳ_i − ȳ_i` (the `log y_i!` constant
/// omitted); `ȳ_i` is floored at `epsilon_em` inside the logarithm.
pub fn poisson_loglik(model: &SystemModel, x: &Image2D, y: &Sinogram, b: &Sinogram) -> Result<f64> {
    let ybar = expected_counts(model, x, b)?;
    y.check_dims(ybar.n_angles(), ybar.n_bins())?;
    Ok(loglik_from_expected(y.values(), ybar.values()))
}

pub fn loglik_from_expected(y: &[f64], ybar: &[f64]) -> f64 {
    y.iter()
        .zip(ybar)
        .map(|(&yi, &m)| {
            if yi > 0.0 {
                yi * m.max(DEFAULT_EPSILON_EM).ln() - m
            } else {
                -m
            }
        })
        .sum()
}

/// `∇_x L = Pᵀ Aᵀ (y / ȳ − 1)`.
pub fn poisson_loglik_gradient(
    model: &SystemModel,
    x: &Image2D,
    y: &Sinogram,
    b: &Sinogram,
) -> Result<Image2D> {
    let ybar = expected_counts(model, x, b)?;
    let resid: Vec<f64> = y
        .values()
        .iter()
        .zip(ybar.values())
        .map(|(&yi, &m)| yi / m.max(DEFAULT_EPSILON_EM) - 1.0)
        .collect();
    let g = model.geometry();
    model.back_project(&Sinogram::new(g.n_angles, g.n_bins, resid)?)
}

/// All-ones starting image, zero outside the field of view.
pub fn initial_image(model: &SystemModel) -> Image2D {
    model.mask_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScannerGeometry2D;

    fn unit_model() -> SystemModel {
        SystemModel::build(&ScannerGeometry2D {
            n_angles: 1,
            n_bins: 1,
            bin_spacing_mm: 1.0,
            image_size: 1,
            pixel_size_mm: 1.0,
            psf_fwhm_mm: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn identity_system_update() {
        let m = unit_model();
        let y = Sinogram::filled(1, 1, 5.0);
        let b = Sinogram::zeros(1, 1);
        let x1 = mlem_update(&m, &Image2D::filled(1, 1.0), &y, &b).unwrap();
        assert_eq!(x1.values(), &[5.0]);
    }

    #[test]
    fn zero_image_is_rejected() {
        let m = unit_model();
        let y = Sinogram::filled(1, 1, 5.0);
        let b = Sinogram::zeros(1, 1);
        assert!(mlem_update(&m, &Image2D::zeros(1), &y, &b).is_err());
        assert!(mapem_update(&m, &Image2D::zeros(1), &y, &b, 0.1).is_err());
    }

    #[test]
    fn loglik_examples() {
        let m = unit_model();
        let b = Sinogram::zeros(1, 1);
        let x = Image2D::filled(1, 2.0);
        let l = poisson_loglik(&m, &x, &Sinogram::filled(1, 1, 2.0), &b).unwrap();
        assert!((l - (2.0 * 2f64.ln() - 2.0)).abs() < 1e-15);
        let l0 = poisson_loglik(&m, &x, &Sinogram::zeros(1, 1), &b).unwrap();
        assert_eq!(l0, -2.0);
    }

    #[test]
    fn penalty_of_constant_is_zero() {
        assert_eq!(quadratic_penalty(&Image2D::filled(5, 3.0)), 0.0);
        let x = Image2D::new(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // two neighbour pairs, each counted twice, times ¼
        assert_eq!(quadratic_penalty(&x), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ReconConfig::default().validate().is_ok());
        let bad = ReconConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
