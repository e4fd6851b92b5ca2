//! Reconstruction methods, evaluation, and the desk-scale training studies.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use transem_core::metrics::{evaluate_sample, normalize_max1, psnr, MetricsReport, SampleMetrics};
use transem_core::recon::{initial_image, mlem_reconstruct, osem_reconstruct, ReconConfig};
use transem_core::rng::{stream, Purpose};
use transem_core::rstr::{RegularizerConfig, RegularizerKind};
use transem_core::simulation::{generate_samples, DatasetConfig, DatasetModels, ScanSample, Split};
use transem_core::transem::{
    self, validation_psnr, TrainConfig, TrainOutcome, TransEmConfig, TransEmModel,
};
use transem_core::{Image2D, Result, ScannerGeometry2D, SystemModel};

pub const MAPEM_BETA: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mlem,
    Osem,
    Mapem,
    Transem,
    FbsemCnn,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mlem => "mlem",
            Method::Osem => "osem",
            Method::Mapem => "mapem",
            Method::Transem => "transem",
            Method::FbsemCnn => "fbsem-cnn",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Transem | Method::FbsemCnn)
    }
}

/// Iteration settings of the non-learned methods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalOptions {
    pub iterations: usize,
    pub subsets: usize,
    pub beta: f64,
}

impl ClassicalOptions {
    /// MLEM 10 iterations; OSEM 10 × 6; MAPEM 10 × 6 with β = 0.005.
    pub fn defaults(method: Method) -> Self {
        let (subsets, beta) = match method {
            Method::Mlem => (1, 0.0),
            Method::Mapem => (6, MAPEM_BETA),
            _ => (6, 0.0),
        };
        Self {
            iterations: 10,
            subsets,
            beta,
        }
    }
}

pub fn reconstruct_sample(
    method: Method,
    system: &SystemModel,
    sample: &ScanSample,
    options: &ClassicalOptions,
    learned: Option<&TransEmModel>,
) -> Result<Image2D> {
    let x0 = initial_image(system);
    match method {
        Method::Mlem => mlem_reconstruct(system, &sample.y_low, &sample.b, options.iterations, &x0),
        Method::Osem | Method::Mapem => {
            let config = ReconConfig {
                n_iterations: options.iterations,
                n_subsets: options.subsets,
                beta: options.beta,
                ..ReconConfig::default()
            };
            osem_reconstruct(system, &sample.y_low, &sample.b, &config, &x0)
        }
        Method::Transem | Method::FbsemCnn => {
            let model = learned.ok_or_else(|| {
                transem_core::CoreError::InvalidArgument(format!(
                    "{} needs a trained model",
                    method.as_str()
                ))
            })?;
            transem::reconstruct(model, system, &sample.y_low, &sample.b)
        }
    }
}

pub fn reconstruct_all(
    method: Method,
    system: &SystemModel,
    samples: &[ScanSample],
    options: &ClassicalOptions,
    learned: Option<&TransEmModel>,
) -> Result<Vec<Image2D>> {
    samples
        .par_iter()
        .map(|s| reconstruct_sample(method, system, s, options, learned))
        .collect()
}

/// PSNR/SSIM against the label and CRC against the phantom, per sample.
pub fn evaluate_recons(
    method: &str,
    samples: &[ScanSample],
    recons: &[Image2D],
) -> Result<Vec<SampleMetrics>> {
    samples
        .iter()
        .zip(recons)
        .map(|(s, r)| {
            evaluate_sample(
                method,
                s.count_level,
                s.sample_id,
                r,
                &s.label,
                &s.true_phantom,
                &s.lesion_pixels(),
            )
        })
        .collect()
}

/// Mean PSNR against the labels, both scaled to max 1.
pub fn mean_psnr(samples: &[ScanSample], recons: &[Image2D]) -> Result<f64> {
    let mut total = 0.0;
    for (s, r) in samples.iter().zip(recons) {
        total += psnr(&normalize_max1(&s.label)?, &normalize_max1(r)?)?;
    }
    Ok(total / samples.len() as f64)
}

/// In-memory dataset with its reconstruction model.
pub struct DeskData {
    pub system: Arc<SystemModel>,
    pub train: Vec<ScanSample>,
    pub val: Vec<ScanSample>,
    pub test: Vec<ScanSample>,
}

impl DeskData {
    pub fn simulate(config: &DatasetConfig) -> Result<Self> {
        let models = DatasetModels::build(config)?;
        let samples = generate_samples(config, &models)?;
        let pick = |split: Split| -> Vec<ScanSample> {
            samples
                .iter()
                .filter(|(s, _)| s.split == split)
                .map(|(s, _)| s.clone())
                .collect()
        };
        Ok(Self {
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
            system: Arc::new(models.low),
        })
    }
}

/// Feature channels of the desk regularizers.
pub const DESK_CHANNELS: usize = 16;
pub const DESK_MAX_STEPS: usize = 1000;
/// Per-variant budget of the ablation sweep, which only compares variants
/// with each other.
pub const DESK_ABLATION_STEPS: usize = 200;
pub const DESK_LEARNING_RATE: f64 = 2e-3;
pub const DESK_VALIDATE_EVERY: usize = 20;

/// Settings of one desk training study at one count level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskStudy {
    pub dataset: DatasetConfig,
    pub transem: TransEmConfig,
    pub cnn: TransEmConfig,
    pub train: TrainConfig,
}

impl DeskStudy {
    /// 24 phantoms split 20/2/2 on a 32×32 grid, low-count scans at
    /// `1/count_divisor` of the label counts, 24-block models.
    pub fn new(count_divisor: f64, seed: u64) -> Self {
        let base = DatasetConfig::default();
        let dataset = DatasetConfig {
            geometry: ScannerGeometry2D::desk_small(),
            n_phantoms: 24,
            split: [20.0 / 24.0, 2.0 / 24.0, 2.0 / 24.0],
            low_counts: base.high_counts / count_divisor,
            seed,
            ..base
        };
        let regularizer = RegularizerConfig {
            channels: DESK_CHANNELS,
            ..RegularizerConfig::default()
        };
        let transem = TransEmConfig {
            n_iterations: 4,
            n_subsets: 6,
            regularizer: regularizer.clone(),
            ..TransEmConfig::default()
        };
        let cnn = TransEmConfig {
            regularizer: RegularizerConfig {
                kind: RegularizerKind::Cnn,
                ..regularizer
            },
            ..transem.clone()
        };
        let train = TrainConfig {
            epochs: usize::MAX,
            max_steps: Some(DESK_MAX_STEPS),
            learning_rate: DESK_LEARNING_RATE,
            batch_size: 4,
            seed,
            validate_every: DESK_VALIDATE_EVERY,
            ..TrainConfig::default()
        };
        Self {
            dataset,
            transem,
            cnn,
            train,
        }
    }
}

pub fn train_model(
    data: &DeskData,
    config: &TransEmConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = TransEmModel::init(config, &mut stream(train.seed, 0, Purpose::Init))?;
    log::info!(
        "training {} blocks, {} parameters",
        model.n_blocks(),
        model.n_scalar_parameters()
    );
    transem::train(model, &data.system, &data.train, &data.val, train, None)
}

pub struct LevelOutcome {
    pub count_level: f64,
    pub report: MetricsReport,
    pub transem: TrainOutcome,
    pub cnn: Option<TrainOutcome>,
}

/// Trains on one count level and evaluates every method on the test split.
pub fn run_desk_level(study: &DeskStudy, with_cnn: bool) -> Result<LevelOutcome> {
    let data = DeskData::simulate(&study.dataset)?;
    let transem_run = train_model(&data, &study.transem, &study.train)?;
    let cnn_run = if with_cnn {
        Some(train_model(&data, &study.cnn, &study.train)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for method in [
        Method::Mlem,
        Method::Osem,
        Method::Mapem,
        Method::FbsemCnn,
        Method::Transem,
    ] {
        let learned = match method {
            Method::Transem => Some(&transem_run.best),
            Method::FbsemCnn => match &cnn_run {
                Some(run) => Some(&run.best),
                None => continue,
            },
            _ => None,
        };
        let recons = reconstruct_all(
            method,
            &data.system,
            &data.test,
            &ClassicalOptions::defaults(method),
            learned,
        )?;
        rows.extend(evaluate_recons(method.as_str(), &data.test, &recons)?);
    }
    Ok(LevelOutcome {
        count_level: study.dataset.low_counts,
        report: MetricsReport::from_samples(rows)?,
        transem: transem_run,
        cnn: cnn_run,
    })
}

pub struct AblationVariant {
    pub name: String,
    pub config: TransEmConfig,
}

/// Block-count sweep {6, 24, 60} at six subsets plus the 24-block model
/// without the regularizer's outer residual.
pub fn ablation_variants(base: &TransEmConfig) -> Vec<AblationVariant> {
    let mut out: Vec<AblationVariant> = [1, 4, 10]
        .into_iter()
        .map(|iterations| AblationVariant {
            name: format!("blocks-{}", iterations * 6),
            config: TransEmConfig {
                n_iterations: iterations,
                n_subsets: 6,
                ..base.clone()
            },
        })
        .collect();
    let mut no_rc = base.clone();
    no_rc.n_iterations = 4;
    no_rc.n_subsets = 6;
    no_rc.regularizer.outer_residual = false;
    out.push(AblationVariant {
        name: "no-outer-residual".into(),
        config: no_rc,
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub n_blocks: usize,
    pub outer_residual: bool,
    pub steps: usize,
    pub best_val_psnr: Option<f64>,
    pub final_val_psnr: Option<f64>,
    pub test_psnr: f64,
}

pub fn run_ablation(
    data: &DeskData,
    variants: &[AblationVariant],
    train: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        log::info!("ablation variant {}", v.name);
        let run = train_model(data, &v.config, train)?;
        let final_val = if data.val.is_empty() {
            None
        } else {
            Some(validation_psnr(&run.last, &data.system, &data.val)?)
        };
        let recons = reconstruct_all(
            Method::Transem,
            &data.system,
            &data.test,
            &ClassicalOptions::defaults(Method::Transem),
            Some(&run.best),
        )?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            n_blocks: v.config.n_blocks(),
            outer_residual: v.config.regularizer.outer_residual,
            steps: run.log.iter().filter(|r| r.train_loss.is_some()).count(),
            best_val_psnr: run.best_val_psnr,
            final_val_psnr: final_val,
            test_psnr: mean_psnr(&data.test, &recons)?,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut out = String::from(
        "variant,n_blocks,outer_residual,steps,best_val_psnr,final_val_psnr,test_psnr\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.4}",
            r.variant,
            r.n_blocks,
            r.outer_residual,
            r.steps,
            fmt(r.best_val_psnr),
            fmt(r.final_val_psnr),
            r.test_psnr
        );
    }
    out
}
