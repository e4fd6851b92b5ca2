//! Differentiable EM sub-iteration and pixelwise fusion.

use std::sync::Arc;

use transem_tensor::{BackwardContext, Function, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Sinogram};
use crate::recon::em_subset_step;
use crate::system::{SubsetPlan, SystemModel};

/// Nonnegative root of `x² + (a − r) x − a e = 0`, written with
/// `B = 1 − r/a` in whichever form avoids cancellation.
pub fn fusion_pixel(e: f64, r: f64, a: f64) -> f64 {
    let b = 1.0 - r / a;
    let sq = (b * b + 4.0 * e / a).sqrt();
    if b >= 0.0 {
        let den = b + sq;
        if den > 0.0 {
            2.0 * e / den
        } else {
            0.0
        }
    } else {
        0.5 * a * (sq - b)
    }
}

/// `(∂x/∂e, ∂x/∂r, ∂x/∂a)` at the root `x`, from implicit differentiation of
/// the quadratic; `√((a − r)² + 4ae) = a·√(B² + 4e/a)`.
fn fusion_partials(e: f64, r: f64, a: f64, x: f64) -> (f64, f64, f64) {
    let b = 1.0 - r / a;
    let disc = a * (b * b + 4.0 * e / a).sqrt();
    if !(disc > 0.0) {
        return (0.0, 0.0, 0.0);
    }
    (a / disc, x / disc, (e - x) / disc)
}

/// Closed-form fusion of an EM image with a reference image:
/// `x_j = 2e_j / (1 − r_j/(αs_j) + √((1 − r_j/(αs_j))² + 4e_j/(αs_j)))`.
/// Pixels with `s_j = 0` keep `e_j`.
pub fn fusion_update(
    x_em: &Image2D,
    r: &Image2D,
    alpha: f64,
    sensitivity: &[f64],
) -> Result<Image2D> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CoreError::invalid(format!(
            "fusion step size must be positive, got {alpha}"
        )));
    }
    r.check_size(x_em.size())?;
    if sensitivity.len() != x_em.values().len() {
        return Err(CoreError::SizeMismatch {
            what: "sensitivity",
            expected: x_em.values().len().to_string(),
            got: sensitivity.len().to_string(),
        });
    }
    if sensitivity.iter().any(|&s| !(s >= 0.0)) {
        return Err(CoreError::invalid("sensitivity must be non-negative"));
    }
    if x_em.values().iter().any(|&e| !(e >= 0.0)) {
        return Err(CoreError::invalid("EM image must be non-negative"));
    }
    Image2D::new(
        x_em.size(),
        fuse(x_em.values(), r.values(), alpha, sensitivity),
    )
}

fn fuse(e: &[f64], r: &[f64], alpha: f64, s: &[f64]) -> Vec<f64> {
    e.iter()
        .zip(r)
        .zip(s)
        .map(|((&e, &r), &s)| {
            if s > 0.0 {
                fusion_pixel(e, r, alpha * s)
            } else {
                e
            }
        })
        .collect()
}

struct FusionFn {
    sensitivity: Arc<Vec<f64>>,
    alpha: f64,
}

impl Function for FusionFn {
    fn name(&self) -> &'static str {
        "fusion"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        let (e, r, x, g) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.output.data(),
            ctx.grad_output.data(),
        );
        let n = e.len();
        let (mut de, mut dr) = (vec![0.0; n], vec![0.0; n]);
        let mut dlog_alpha = 0.0;
        for j in 0..n {
            let s = self.sensitivity[j];
            if s > 0.0 {
                let a = self.alpha * s;
                let (pe, pr, pa) = fusion_partials(e[j], r[j], a, x[j]);
                de[j] = g[j] * pe;
                dr[j] = g[j] * pr;
                dlog_alpha += g[j] * pa * a;
            } else {
                de[j] = g[j];
            }
        }
        let shape = ctx.inputs[0].shape();
        vec![
            ctx.needs_grad[0].then(|| Tensor::new(shape, de).expect("shape")),
            ctx.needs_grad[1].then(|| Tensor::new(shape, dr).expect("shape")),
            ctx.needs_grad[2].then(|| Tensor::scalar(dlog_alpha)),
        ]
    }
}

/// Recorded fusion with `α = exp(log_alpha)`; `log_alpha` has shape `[1]`.
pub fn fusion_op<'g>(
    x_em: Var<'g>,
    r: Var<'g>,
    log_alpha: Var<'g>,
    sensitivity: Arc<Vec<f64>>,
) -> Result<Var<'g>> {
    let (e, rv, la) = (x_em.value(), r.value(), log_alpha.value());
    if e.shape() != rv.shape() || e.numel() != sensitivity.len() || la.numel() != 1 {
        return Err(CoreError::invalid(format!(
            "fusion inputs {:?}, {:?}, {:?} do not match {} pixels",
            e.shape(),
            rv.shape(),
            la.shape(),
            sensitivity.len()
        )));
    }
    if !super::usable_log_alpha(la.data()[0]) {
        return Err(CoreError::Numeric(format!(
            "unusable fusion step size exp({})",
            la.data()[0]
        )));
    }
    let alpha = la.data()[0].exp();
    let out = Tensor::new(e.shape(), fuse(e.data(), rv.data(), alpha, &sensitivity))?;
    Ok(x_em.graph().record(
        Box::new(FusionFn { sensitivity, alpha }),
        &[x_em, r, log_alpha],
        out,
    ))
}

/// Measured data and operators shared by every EM node of one sample.
#[derive(Clone)]
pub struct EmContext {
    pub model: Arc<SystemModel>,
    pub plan: Arc<SubsetPlan>,
    pub y: Arc<Sinogram>,
    pub b: Arc<Sinogram>,
    pub epsilon_em: f64,
}

impl EmContext {
    pub fn new(
        model: Arc<SystemModel>,
        n_subsets: usize,
        y: Sinogram,
        b: Sinogram,
        epsilon_em: f64,
    ) -> Result<Self> {
        let g = model.geometry();
        y.check_dims(g.n_angles, g.n_bins)?;
        b.check_dims(g.n_angles, g.n_bins)?;
        let plan = model.subsets(n_subsets)?;
        Ok(Self {
            model,
            plan,
            y: Arc::new(y),
            b: Arc::new(b),
            epsilon_em,
        })
    }

    pub fn subset_sensitivity(&self, k: usize) -> Arc<Vec<f64>> {
        Arc::new(self.plan.sensitivity[k].clone())
    }
}

struct EmFn {
    ctx: EmContext,
    subset: usize,
    backprojected_ratio: Vec<f64>,
    expected: Vec<f64>,
}

impl Function for EmFn {
    fn name(&self) -> &'static str {
        "em_subset_step"
    }

    /// With `M = A_S P` and `x̂ = x ⊙ Mᵀ(y/ȳ) / s`:
    /// `∂L/∂x = g ⊙ Mᵀ(y/ȳ)/s + Mᵀ(−y/ȳ² ⊙ M(g ⊙ x/s))`, the second term
    /// vanishing on floored bins.
    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>> {
        if !ctx.needs_grad[0] {
            return vec![None];
        }
        let x = ctx.inputs[0].data();
        let g = ctx.grad_output.data();
        let model = &self.ctx.model;
        let angles = &self.ctx.plan.angles[self.subset];
        let sens = &self.ctx.plan.sensitivity[self.subset];
        let mask = model.mask();
        let mut u: Vec<f64> = (0..x.len())
            .map(|j| {
                if mask[j] && sens[j] > 0.0 {
                    g[j] * x[j] / sens[j]
                } else {
                    0.0
                }
            })
            .collect();
        model.blur(&mut u);
        let mut mu = vec![0.0; self.expected.len()];
        model.project_angles(&u, angles, &mut mu);
        let nb = model.geometry().n_bins;
        let y = self.ctx.y.values();
        let mut w = vec![0.0; mu.len()];
        for &a in angles {
            for i in a * nb..(a + 1) * nb {
                let ybar = self.expected[i];
                if ybar >= self.ctx.epsilon_em {
                    w[i] = -y[i] / (ybar * ybar) * mu[i];
                }
            }
        }
        let mut back = model.backproject_angles(&w, angles);
        model.blur(&mut back);
        let dx: Vec<f64> = (0..x.len())
            .map(|j| {
                let direct = if !mask[j] {
                    0.0
                } else if sens[j] > 0.0 {
                    g[j] * self.backprojected_ratio[j] / sens[j]
                } else {
                    g[j]
                };
                direct + back[j]
            })
            .collect();
        vec![Some(Tensor::new(ctx.inputs[0].shape(), dx).expect("shape"))]
    }
}

/// Recorded EM sub-iteration on subset `subset` for an image tensor of
/// shape `[1, H, W]` (or any shape with `H·W` elements).
pub fn em_op<'g>(x: Var<'g>, ctx: &EmContext, subset: usize) -> Result<Var<'g>> {
    let xv = x.value();
    let n = ctx.model.geometry().n_pixels();
    if xv.numel() != n {
        return Err(CoreError::SizeMismatch {
            what: "EM input",
            expected: n.to_string(),
            got: xv.numel().to_string(),
        });
    }
    if subset >= ctx.plan.n_subsets() {
        return Err(CoreError::invalid(format!("subset {subset} out of range")));
    }
    let step = em_subset_step(
        &ctx.model,
        &ctx.plan,
        subset,
        xv.data(),
        &ctx.y,
        &ctx.b,
        ctx.epsilon_em,
    );
    let out = Tensor::new(xv.shape(), step.x_em)?;
    Ok(x.graph().record(
        Box::new(EmFn {
            ctx: ctx.clone(),
            subset,
            backprojected_ratio: step.backprojected_ratio,
            expected: step.expected,
        }),
        &[x],
        out,
    ))
}
