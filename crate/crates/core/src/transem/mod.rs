//! Unrolled TransEM reconstruction.
//!
//! A model is `n_iterations × n_subsets` blocks. Block `k` runs one EM
//! sub-iteration on subset `k mod n_subsets`, passes the previous iterate
//! through a learned regularizer, and fuses the two pixelwise in closed form
//! with a learned step size `α_k = exp(log_alpha_k)`. Everything is
//! differentiable, so [`train`] fits the regularizer and the step sizes end
//! to end.

mod ops;
mod train;

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use transem_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Sinogram};
use crate::params::{ByteReader, ParamSet};
use crate::recon::{em_subset_step, initial_image, DEFAULT_EPSILON_EM};
use crate::rstr::{BoundParams, InitMode, Regularizer, RegularizerConfig};
use crate::system::SystemModel;

pub use ops::{em_op, fusion_op, fusion_pixel, fusion_update, EmContext};
pub use train::{
    adam_step, train, validation_psnr, AdamConfig, AdamState, TrainConfig, TrainLogRow,
    TrainOutcome,
};

pub(crate) fn usable_log_alpha(la: f64) -> bool {
    let a = la.exp();
    a > 0.0 && a.is_finite()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TEM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransEmConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    /// One regularizer for all blocks instead of one per block.
    pub shared_weights: bool,
    pub regularizer: RegularizerConfig,
    pub epsilon_em: f64,
    /// Test switch for the `α → ∞` limit: blocks reduce to plain subset EM.
    pub em_only: bool,
}

impl Default for TransEmConfig {
    fn default() -> Self {
        Self {
            n_iterations: 10,
            n_subsets: 6,
            shared_weights: true,
            regularizer: RegularizerConfig::default(),
            epsilon_em: DEFAULT_EPSILON_EM,
            em_only: false,
        }
    }
}

impl TransEmConfig {
    pub fn n_blocks(&self) -> usize {
        self.n_iterations * self.n_subsets
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || self.n_subsets == 0 {
            return Err(CoreError::invalid(
                "iterations and subsets must be at least 1",
            ));
        }
        if !(self.epsilon_em > 0.0) {
            return Err(CoreError::invalid("epsilon_em must be positive"));
        }
        self.regularizer.validate()
    }

    fn n_regularizers(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.n_blocks()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransEmModel {
    pub config: TransEmConfig,
    /// One entry when weights are shared, otherwise one per block.
    pub regularizers: Vec<Regularizer>,
    pub log_alpha: Vec<f64>,
}

/// A model's parameters registered on a graph.
pub struct BoundModel<'g> {
    pub regularizers: Vec<BoundParams<'g>>,
    pub log_alpha: Vec<Var<'g>>,
}

impl TransEmModel {
    /// Identity-initialized regularizers and `α = 1` in every block.
    pub fn init<R: Rng>(config: &TransEmConfig, rng: &mut R) -> Result<Self> {
        Self::init_with(config, InitMode::Identity, rng)
    }

    pub fn init_with<R: Rng>(config: &TransEmConfig, mode: InitMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let regularizers = (0..config.n_regularizers())
            .map(|_| Regularizer::init(&config.regularizer, mode, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            regularizers,
            log_alpha: vec![0.0; config.n_blocks()],
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.config.n_blocks()
    }

    pub fn regularizer(&self, block: usize) -> &Regularizer {
        &self.regularizers[if self.config.shared_weights { 0 } else { block }]
    }

    pub fn alpha(&self, block: usize) -> f64 {
        self.log_alpha[block].exp()
    }

    /// Fails with a numeric error when some `exp(log_alpha)` is zero or
    /// infinite, as after a diverged training run.
    pub fn check_step_sizes(&self) -> Result<()> {
        match self.log_alpha.iter().position(|&la| !usable_log_alpha(la)) {
            Some(k) => Err(CoreError::Numeric(format!(
                "block {k} has unusable step size exp({})",
                self.log_alpha[k]
            ))),
            None => Ok(()),
        }
    }

    /// Flat parameter list: every regularizer tensor in order, then
    /// `log_alpha` as one `[n_blocks]` tensor.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .regularizers
            .iter()
            .flat_map(|r| r.params.tensors().cloned())
            .collect();
        out.push(Tensor::new(&[self.log_alpha.len()], self.log_alpha.clone()).expect("1-d"));
        out
    }

    pub fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        let current = self.parameters();
        if params.len() != current.len()
            || params
                .iter()
                .zip(&current)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(CoreError::invalid(
                "parameter list does not match the model layout",
            ));
        }
        let mut it = params.into_iter();
        for reg in &mut self.regularizers {
            for t in reg.params.tensors_mut() {
                *t = it.next().expect("checked length");
            }
        }
        self.log_alpha = it.next().expect("checked length").into_data();
        Ok(())
    }

    pub fn n_scalar_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundModel<'g> {
        let leaf = |t: Tensor| {
            if trainable {
                graph.param(t)
            } else {
                graph.constant(t)
            }
        };
        BoundModel {
            regularizers: self
                .regularizers
                .iter()
                .map(|r| r.bind(graph, trainable))
                .collect(),
            log_alpha: self
                .log_alpha
                .iter()
                .map(|&a| leaf(Tensor::scalar(a)))
                .collect(),
        }
    }

    /// Gradients of a bound model after a backward sweep, in
    /// [`TransEmModel::parameters`] order.
    pub fn gradients(&self, bound: &BoundModel<'_>) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = bound
            .regularizers
            .iter()
            .flat_map(|b| b.vars.iter().map(|v| v.grad_or_zeros()))
            .collect();
        let ga: Vec<f64> = bound
            .log_alpha
            .iter()
            .map(|v| v.grad_or_zeros().data()[0])
            .collect();
        out.push(Tensor::new(&[ga.len()], ga).expect("1-d"));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut merged = ParamSet::new();
        for (k, reg) in self.regularizers.iter().enumerate() {
            for (name, t) in reg.params.iter() {
                let name = if self.config.shared_weights {
                    name.to_string()
                } else {
                    format!("block{k}.{name}")
                };
                merged.push(name, t.clone());
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&merged.to_bytes());
        out.extend_from_slice(&(self.log_alpha.len() as u32).to_le_bytes());
        for a in &self.log_alpha {
            out.extend_from_slice(&a.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = ByteReader::new(bytes, "TEM1", path);
        if reader.take(4)? != CHECKPOINT_MAGIC {
            return Err(reader.error("bad checkpoint magic"));
        }
        let len = reader.u32()? as usize;
        let config: TransEmConfig = serde_json::from_slice(reader.take(len)?)
            .map_err(|e| reader.error(&format!("config: {e}")))?;
        config
            .validate()
            .map_err(|e| reader.error(&e.to_string()))?;
        let merged = ParamSet::read_from(&mut reader)?;
        let mut regularizers = Vec::new();
        if config.shared_weights {
            regularizers.push(Regularizer::from_params(&config.regularizer, merged)?);
        } else {
            let mut sets = vec![ParamSet::new(); config.n_blocks()];
            for (name, t) in merged.iter() {
                let (block, rest) = name
                    .strip_prefix("block")
                    .and_then(|s| s.split_once('.'))
                    .and_then(|(k, rest)| Some((k.parse::<usize>().ok()?, rest)))
                    .filter(|(k, _)| *k < sets.len())
                    .ok_or_else(|| reader.error(&format!("unexpected parameter {name}")))?;
                sets[block].push(rest, t.clone());
            }
            for set in sets {
                regularizers.push(Regularizer::from_params(&config.regularizer, set)?);
            }
        }
        let n = reader.u32()? as usize;
        if n != config.n_blocks() {
            return Err(reader.error(&format!("{n} step sizes for {} blocks", config.n_blocks())));
        }
        let log_alpha = (0..n).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
        reader.finish()?;
        if log_alpha.iter().any(|a| !a.is_finite()) {
            return Err(CoreError::Format {
                kind: "TEM1",
                path: path.to_path_buf(),
                reason: "non-finite step size".into(),
            });
        }
        Ok(Self {
            config,
            regularizers,
            log_alpha,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(CoreError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// One inference block: subset EM from `x_prev`, regularization of
/// `x_prev`, then fusion with the subset sensitivity.
pub fn transem_block(
    x_prev: &Image2D,
    ctx: &EmContext,
    subset: usize,
    regularizer: &Regularizer,
    alpha: f64,
) -> Result<Image2D> {
    let n = ctx.model.geometry().image_size;
    x_prev.check_size(n)?;
    if subset >= ctx.plan.n_subsets() {
        return Err(CoreError::invalid(format!("subset {subset} out of range")));
    }
    let step = em_subset_step(
        &ctx.model,
        &ctx.plan,
        subset,
        x_prev.values(),
        &ctx.y,
        &ctx.b,
        ctx.epsilon_em,
    );
    let r = regularizer.apply(x_prev)?;
    fusion_update(
        &Image2D::new(n, step.x_em)?,
        &r,
        alpha,
        &ctx.plan.sensitivity[subset],
    )
}

/// Runs every block from the all-ones (in view) start image.
pub fn reconstruct(
    model: &TransEmModel,
    system: &SystemModel,
    y: &Sinogram,
    b: &Sinogram,
) -> Result<Image2D> {
    let g = system.geometry();
    y.check_dims(g.n_angles, g.n_bins)?;
    b.check_dims(g.n_angles, g.n_bins)?;
    model.check_step_sizes()?;
    let plan = system.subsets(model.config.n_subsets)?;
    let n = g.image_size;
    let mut x = initial_image(system);
    for k in 0..model.n_blocks() {
        let subset = k % model.config.n_subsets;
        let step = em_subset_step(
            system,
            &plan,
            subset,
            x.values(),
            y,
            b,
            model.config.epsilon_em,
        );
        let x_em = Image2D::new(n, step.x_em)?;
        x = if model.config.em_only {
            x_em
        } else {
            let r = model.regularizer(k).apply(&x)?;
            fusion_update(&x_em, &r, model.alpha(k), &plan.sensitivity[subset])?
        };
    }
    Ok(x)
}

/// Recorded forward pass from `x0` (shape `[1, H, W]`).
pub fn forward<'g>(
    model: &TransEmModel,
    bound: &BoundModel<'g>,
    ctx: &EmContext,
    x0: Var<'g>,
) -> Result<Var<'g>> {
    let n_subsets = model.config.n_subsets;
    if ctx.plan.n_subsets() != n_subsets {
        return Err(CoreError::invalid(
            "EM context was built for a different subset count",
        ));
    }
    let sens: Vec<Arc<Vec<f64>>> = (0..n_subsets).map(|k| ctx.subset_sensitivity(k)).collect();
    let mut x = x0;
    for k in 0..model.n_blocks() {
        let subset = k % n_subsets;
        let x_em = em_op(x, ctx, subset)?;
        x = if model.config.em_only {
            x_em
        } else {
            let reg_index = if model.config.shared_weights { 0 } else { k };
            let r = model
                .regularizer(k)
                .forward(x, &bound.regularizers[reg_index])?;
            fusion_op(x_em, r, bound.log_alpha[k], sens[subset].clone())?
        };
    }
    Ok(x)
}

/// Masked MSE between the reconstruction of `(y, b)` and `label`, with the
/// gradient of every parameter.
pub fn loss_and_gradients(
    model: &TransEmModel,
    system: &Arc<SystemModel>,
    y: &Sinogram,
    b: &Sinogram,
    label: &Image2D,
) -> Result<(f64, Vec<Tensor>)> {
    let n = system.geometry().image_size;
    label.check_size(n)?;
    let ctx = EmContext::new(
        system.clone(),
        model.config.n_subsets,
        y.clone(),
        b.clone(),
        model.config.epsilon_em,
    )?;
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let x0 = g.constant(Tensor::new(
        &[1, n, n],
        initial_image(system).into_values(),
    )?);
    let out = forward(model, &bound, &ctx, x0)?;
    let target = g.constant(Tensor::new(&[1, n, n], label.values().to_vec())?);
    let mask = Tensor::new(
        &[1, n, n],
        system
            .mask()
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let loss = out.mse(target, Some(&mask))?;
    g.backward(loss)?;
    let value = loss.value().data()[0];
    Ok((value, model.gradients(&bound)))
}
