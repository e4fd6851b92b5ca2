//! Adam and the end-to-end training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use transem_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::metrics::{normalize_max1, psnr};
use crate::rng::{stream, Purpose};
use crate::simulation::ScanSample;
use crate::system::SystemModel;

use super::{loss_and_gradients, reconstruct, TransEmModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place; advances `state.t`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(CoreError::invalid(
            "Adam: parameter, gradient and state counts differ",
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape()
            || p.shape() != state.m[i].shape()
            || p.shape() != state.v[i].shape()
        {
            return Err(CoreError::SizeMismatch {
                what: "Adam gradient",
                expected: format!("{:?}", p.shape()),
                got: format!("{:?}", g.shape()),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub validate_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            learning_rate: 5e-5,
            batch_size: 4,
            seed: 0,
            validate_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::invalid(
                "learning rate must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean batch loss of this step; absent on the step-0 validation row.
    pub train_loss: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the highest validation PSNR (the final ones when
    /// there is no validation split).
    pub best: TransEmModel,
    pub last: TransEmModel,
    pub best_step: usize,
    pub best_val_psnr: Option<f64>,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
        let mut out = String::from("step,train_loss,val_psnr\n");
        for row in &self.log {
            let _ = writeln!(
                out,
                "{},{},{}",
                row.step,
                fmt(row.train_loss),
                fmt(row.val_psnr)
            );
        }
        out
    }
}

/// Mean PSNR of reconstructions against labels, both scaled to max 1.
pub fn validation_psnr(
    model: &TransEmModel,
    system: &SystemModel,
    samples: &[ScanSample],
) -> Result<f64> {
    let values = samples
        .par_iter()
        .map(|s| {
            let recon = reconstruct(model, system, &s.y_low, &s.b)?;
            psnr(&normalize_max1(&s.label)?, &normalize_max1(&recon)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains with Adam on the masked MSE to the labels. Each epoch visits the
/// training samples in a seeded random order; per-sample gradients are
/// computed in parallel and summed in batch order. On a non-finite loss the
/// pre-step model is written to `dump_dir` and training aborts.
pub fn train(
    model: TransEmModel,
    system: &Arc<SystemModel>,
    train_set: &[ScanSample],
    val_set: &[ScanSample],
    config: &TrainConfig,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::invalid("training set is empty"));
    }
    let mut model = model;
    let mut params = model.parameters();
    let mut state = AdamState::new(&params);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, TransEmModel)> = None;

    let mut validate = |model: &TransEmModel,
                        step: usize,
                        loss: Option<f64>,
                        log: &mut Vec<TrainLogRow>|
     -> Result<()> {
        let val = if val_set.is_empty() {
            None
        } else {
            Some(validation_psnr(model, system, val_set)?)
        };
        if let Some(v) = val {
            log::info!("step {step}: validation PSNR {v:.3} dB");
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, step, model.clone()));
            }
        }
        log.push(TrainLogRow {
            step,
            train_loss: loss,
            val_psnr: val,
        });
        Ok(())
    };
    validate(&model, 0, None, &mut log)?;

    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(config.seed, epoch as u64, Purpose::Shuffle));
        let n_batches = order.len().div_ceil(config.batch_size);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            if step >= max_steps {
                break 'epochs;
            }
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    loss_and_gradients(&model, system, &s.y_low, &s.b, &s.label)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi)?;
                }
            }
            loss *= scale;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let dump = |model: &TransEmModel| -> Result<String> {
                Ok(match dump_dir {
                    Some(dir) => {
                        let path = dir.join(format!("nan_step{}.tem1", step + 1));
                        model.save(&path)?;
                        format!("; pre-step model written to {}", path.display())
                    }
                    None => String::new(),
                })
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let ids: Vec<usize> = batch.iter().map(|&i| train_set[i].sample_id).collect();
                return Err(CoreError::Numeric(format!(
                    "non-finite loss {loss} at step {} (epoch {epoch}, samples {ids:?}){}",
                    step + 1,
                    dump(&model)?
                )));
            }
            adam_step(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                &config.adam,
            )?;
            let alphas_ok = params
                .last()
                .is_some_and(|la| la.data().iter().all(|&v| super::usable_log_alpha(v)));
            if !alphas_ok || params.iter().any(|p| !p.is_finite()) {
                return Err(CoreError::Numeric(format!(
                    "parameters overflowed at step {}{}",
                    step + 1,
                    dump(&model)?
                )));
            }
            model.set_parameters(params.clone())?;
            step += 1;
            log::debug!("step {step}: loss {loss:.6e}");
            let epoch_end = bi + 1 == n_batches;
            let due = if config.validate_every == 0 {
                epoch_end
            } else {
                step % config.validate_every == 0
            };
            if due || step == max_steps {
                validate(&model, step, Some(loss), &mut log)?;
            } else {
                log.push(TrainLogRow {
                    step,
                    train_loss: Some(loss),
                    val_psnr: None,
                });
            }
        }
    }
    let (best_val_psnr, best_step, best_model) = match best {
        Some((v, s, m)) => (Some(v), s, m),
        None => (None, step, model.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_step,
        best_val_psnr,
        log,
    })
}
