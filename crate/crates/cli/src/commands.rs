//! Subcommand implementations. Every command validates its options before
//! any computation and writes its output into a staging directory that is
//! renamed into place only on success.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use transem_core::metrics::MetricsReport;
use transem_core::rng::{stream, Purpose};
use transem_core::rstr::{RegularizerConfig, RegularizerKind};
use transem_core::simulation::dataset::{file_sha256, GEOMETRY_FILE, MANIFEST_FILE};
use transem_core::simulation::{
    generate_dataset, load_split, DatasetConfig, Manifest, ScanSample, Split,
};
use transem_core::transem::{self, TrainConfig, TransEmConfig, TransEmModel};
use transem_core::{Image2D, ScannerGeometry2D, SystemModel};

use crate::args::{required, AblateArgs, EvalArgs, ReconArgs, SimulateArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::experiments::{
    ablation_csv, ablation_variants, evaluate_recons, reconstruct_all, run_ablation,
    ClassicalOptions, DeskData, Method, DESK_ABLATION_STEPS, DESK_CHANNELS, DESK_LEARNING_RATE,
    DESK_VALIDATE_EVERY,
};

pub const RECON_FILE: &str = "recon.json";

fn staging_dir(out: &Path, tag: &str) -> PathBuf {
    let name = out
        .file_name()
        .map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

fn check_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() {
        let empty = std::fs::read_dir(out)?.next().is_none();
        if !empty {
            return Err(CliError::config(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
    }
    Ok(())
}

/// Runs `body` against a fresh staging directory next to `out` and renames
/// it to `out` on success. On a numeric failure the staging directory is kept
/// as `<out>.failed` for inspection; on any other failure it is removed.
fn staged<T>(out: &Path, body: impl FnOnce(&Path) -> CliResult<T>) -> CliResult<T> {
    check_out_dir(out)?;
    let staging = staging_dir(out, "partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    match body(&staging) {
        Ok(value) => {
            if out.exists() {
                std::fs::remove_dir(out)?;
            }
            std::fs::rename(&staging, out)?;
            Ok(value)
        }
        Err(CliError::Numeric(msg)) => {
            let failed = out.with_extension("failed");
            let _ = std::fs::remove_dir_all(&failed);
            let kept = std::fs::rename(&staging, &failed).is_ok();
            let msg = if kept {
                format!("{msg}; state kept in {}", failed.display())
            } else {
                msg
            };
            Err(CliError::Numeric(msg))
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))
}

fn parse_split_name(name: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.as_str() == name)
        .ok_or_else(|| {
            CliError::config(format!(
                "unknown split {name:?} (expected train, val or test)"
            ))
        })
}

/// `"a,b,c"` as fractions (summing to 1) or as phantom counts (summing to
/// `n_phantoms`).
fn parse_split_ratios(text: &str, n_phantoms: usize) -> CliResult<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| {
            CliError::config(format!(
                "--split {text:?}: expected three comma-separated numbers"
            ))
        })?;
    let [a, b, c] = parts[..] else {
        return Err(CliError::config(format!(
            "--split {text:?}: expected three values"
        )));
    };
    let sum = a + b + c;
    if (sum - 1.0).abs() < 1e-9 {
        Ok([a, b, c])
    } else if (sum - n_phantoms as f64).abs() < 1e-9 {
        let n = n_phantoms as f64;
        Ok([a / n, b / n, c / n])
    } else {
        Err(CliError::config(format!(
            "--split {text:?} sums to {sum}; expected 1 or the phantom count {n_phantoms}"
        )))
    }
}

pub fn simulate_config(args: &SimulateArgs) -> CliResult<DatasetConfig> {
    let base = DatasetConfig::default();
    let geometry = match &args.geometry {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Missing {
                    what: "geometry file",
                    path: path.clone(),
                });
            }
            ScannerGeometry2D::load(path)?
        }
        None => {
            let d = ScannerGeometry2D::default();
            let n = args.image_size.unwrap_or(d.image_size);
            ScannerGeometry2D {
                image_size: n,
                n_angles: args.angles.unwrap_or(d.n_angles),
                n_bins: args.bins.unwrap_or((3 * n / 2).saturating_sub(1).max(1)),
                ..d
            }
        }
    };
    let n_phantoms = args.phantoms.unwrap_or(base.n_phantoms);
    let split = match &args.split {
        Some(text) => parse_split_ratios(text, n_phantoms)?,
        None => base.split,
    };
    let config = DatasetConfig {
        geometry,
        n_phantoms,
        slices_per_phantom: args.slices.unwrap_or(base.slices_per_phantom),
        split,
        high_counts: args.high_counts.unwrap_or(base.high_counts),
        low_counts: args.counts.unwrap_or(base.low_counts),
        background_fraction: args.background.unwrap_or(base.background_fraction),
        psf_high_mm: args.psf_high.unwrap_or(base.psf_high_mm),
        psf_low_mm: args.psf_low.unwrap_or(base.psf_low_mm),
        seed: args.seed.unwrap_or(base.seed),
        holdout_family: args.holdout_style,
    };
    config.validate()?;
    Ok(config)
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let out = required(&args.out, "out")?;
    let config = simulate_config(args)?;
    check_out_dir(&out)?;
    let manifest = generate_dataset(&config, &out)?;
    let hash = file_sha256(&out.join(MANIFEST_FILE))?;
    println!(
        "simulated {} samples ({} train / {} val / {} test) into {}; manifest sha256 {hash}",
        manifest.samples.len(),
        manifest.entries(Split::Train).count(),
        manifest.entries(Split::Val).count(),
        manifest.entries(Split::Test).count(),
        out.display()
    );
    Ok(())
}

/// A dataset directory with its manifest hash and reconstruction model.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub manifest_sha256: String,
    pub system: Arc<SystemModel>,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(CliError::Missing {
                what: "dataset manifest",
                path: manifest_path,
            });
        }
        let manifest = Manifest::load(root)?;
        let geometry = ScannerGeometry2D::load(&root.join(GEOMETRY_FILE))?;
        if geometry.hash_hex() != manifest.geometry_hash {
            return Err(CliError::Io(format!(
                "{}: geometry does not match the manifest",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest_sha256: file_sha256(&manifest_path)?,
            manifest,
            system: Arc::new(SystemModel::build(&geometry)?),
        })
    }

    pub fn split(&self, split: Split) -> CliResult<Vec<ScanSample>> {
        Ok(load_split(&self.root, split)?)
    }
}

fn load_checkpoint(path: &Option<PathBuf>, method: Method) -> CliResult<TransEmModel> {
    let path = path.clone().ok_or_else(|| {
        CliError::config(format!("--checkpoint is required for {}", method.as_str()))
    })?;
    if !path.is_file() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path,
        });
    }
    let model = TransEmModel::load(&path)?;
    let expected = if method == Method::Transem {
        RegularizerKind::Rstr
    } else {
        RegularizerKind::Cnn
    };
    if model.config.regularizer.kind != expected {
        return Err(CliError::config(format!(
            "checkpoint {} holds a {:?} regularizer, not one for {}",
            path.display(),
            model.config.regularizer.kind,
            method.as_str()
        )));
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub method: String,
    pub split: Split,
    pub count_level: f64,
    pub dataset_manifest_sha256: String,
    pub options: Option<ClassicalOptions>,
    pub checkpoint_sha256: Option<String>,
    /// Sample id → image file name.
    pub images: BTreeMap<usize, String>,
}

pub fn cmd_recon(args: &ReconArgs) -> CliResult<()> {
    let method = required(&args.method, "method")?;
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let split = parse_split_name(args.split.as_deref().unwrap_or("test"))?;
    let mut options = ClassicalOptions::defaults(method);
    if let Some(i) = args.iters {
        options.iterations = i;
    }
    if let Some(s) = args.subsets {
        options.subsets = s;
    }
    if let Some(b) = args.beta {
        if method != Method::Mapem {
            return Err(CliError::config("--beta only applies to mapem"));
        }
        options.beta = b;
    }
    if options.iterations == 0
        || options.subsets == 0
        || !(options.beta >= 0.0 && options.beta.is_finite())
    {
        return Err(CliError::config(
            "iterations and subsets must be positive and beta non-negative",
        ));
    }
    if method == Method::Mlem && options.subsets != 1 {
        return Err(CliError::config(
            "mlem uses all views at once; use --method osem for subsets",
        ));
    }
    let learned_flags = args.iters.is_some() || args.subsets.is_some() || args.beta.is_some();
    if method.is_learned() && learned_flags {
        return Err(CliError::config(
            "iteration flags do not apply to learned methods",
        ));
    }
    check_out_dir(&out)?;
    let dataset = Dataset::open(&data)?;
    let model = if method.is_learned() {
        Some(load_checkpoint(&args.checkpoint, method)?)
    } else {
        None
    };
    let samples = dataset.split(split)?;
    if samples.is_empty() {
        return Err(CliError::config(format!(
            "split {split} of {} is empty",
            data.display()
        )));
    }
    let recons = reconstruct_all(method, &dataset.system, &samples, &options, model.as_ref())?;
    let metrics =
        MetricsReport::from_samples(evaluate_recons(method.as_str(), &samples, &recons)?)?;
    staged(&out, |dir| {
        let mut images = BTreeMap::new();
        for (s, r) in samples.iter().zip(&recons) {
            let name = format!("{:05}.img1", s.sample_id);
            r.save(&dir.join(&name))?;
            r.save_pgm(&dir.join(format!("{:05}.pgm", s.sample_id)))?;
            images.insert(s.sample_id, name);
        }
        metrics.write(&dir.join("metrics.csv"), &dir.join("metrics.json"))?;
        let record = ReconRecord {
            method: method.as_str().into(),
            split,
            count_level: dataset.manifest.config.low_counts,
            dataset_manifest_sha256: dataset.manifest_sha256.clone(),
            options: (!method.is_learned()).then_some(options),
            checkpoint_sha256: match (&model, &args.checkpoint) {
                (Some(_), Some(p)) => Some(file_sha256(p)?),
                _ => None,
            },
            images,
        };
        write(&dir.join(RECON_FILE), to_json(&record)?)
    })?;
    for agg in &metrics.aggregates {
        println!(
            "{} on {} {split} samples: PSNR {:.2}±{:.2} dB, SSIM {:.4}±{:.4}, MCRC {:.4}",
            agg.method,
            agg.n_samples,
            agg.psnr.mean,
            agg.psnr.std,
            agg.ssim.mean,
            agg.ssim.std,
            agg.mcrc
        );
    }
    Ok(())
}

pub fn transem_config(args: &TrainArgs) -> CliResult<TransEmConfig> {
    let method = args.method.unwrap_or(Method::Transem);
    let kind = match method {
        Method::Transem => RegularizerKind::Rstr,
        Method::FbsemCnn => RegularizerKind::Cnn,
        other => return Err(CliError::config(format!("cannot train {}", other.as_str()))),
    };
    let defaults = TransEmConfig::default();
    let n_subsets = args.subsets.unwrap_or(defaults.n_subsets);
    if n_subsets == 0 {
        return Err(CliError::config("--subsets must be positive"));
    }
    let n_iterations = match (args.blocks, args.iters) {
        (Some(b), iters) => {
            if b == 0 || b % n_subsets != 0 {
                return Err(CliError::config(format!(
                    "--blocks {b} is not a positive multiple of {n_subsets} subsets"
                )));
            }
            if iters.is_some_and(|i| i * n_subsets != b) {
                return Err(CliError::config(
                    "--blocks disagrees with --iters × --subsets",
                ));
            }
            b / n_subsets
        }
        (None, Some(i)) => i,
        (None, None) => defaults.n_iterations,
    };
    let r = RegularizerConfig::default();
    let config = TransEmConfig {
        n_iterations,
        n_subsets,
        shared_weights: !args.unshared,
        regularizer: RegularizerConfig {
            kind,
            channels: args.channels.unwrap_or(r.channels),
            n_heads: args.heads.unwrap_or(r.n_heads),
            mlp_ratio: args.mlp_ratio.unwrap_or(r.mlp_ratio),
            window_size: args.window.unwrap_or(r.window_size),
            shift_windows: args.shift_windows,
            relative_position_bias: args.rel_bias,
            outer_residual: !args.no_outer_residual,
        },
        ..defaults
    };
    config.validate()?;
    Ok(config)
}

pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        max_steps: args.max_steps,
        learning_rate: args.lr.unwrap_or(d.learning_rate),
        batch_size: args.batch.unwrap_or(d.batch_size),
        seed: args.seed.unwrap_or(d.seed),
        validate_every: args.validate_every.unwrap_or(d.validate_every),
        adam: d.adam,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    dataset_manifest_sha256: &'a str,
    model: &'a TransEmConfig,
    training: &'a TrainConfig,
    steps: usize,
    best_step: usize,
    best_val_psnr: Option<f64>,
    final_train_loss: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let model_config = transem_config(args)?;
    let train_cfg = train_config(args)?;
    check_out_dir(&out)?;
    let dataset = Dataset::open(&data)?;
    let train_set = dataset.split(Split::Train)?;
    let val_set = dataset.split(Split::Val)?;
    if train_set.is_empty() {
        return Err(CliError::config(format!(
            "{} has no training samples",
            data.display()
        )));
    }
    if model_config.n_subsets > dataset.system.geometry().n_angles {
        return Err(CliError::config("more subsets than projection angles"));
    }
    let model = TransEmModel::init(&model_config, &mut stream(train_cfg.seed, 0, Purpose::Init))?;
    log::info!(
        "training {} blocks ({} parameters) on {} samples",
        model.n_blocks(),
        model.n_scalar_parameters(),
        train_set.len()
    );
    let outcome = staged(&out, |dir| {
        let outcome = transem::train(
            model,
            &dataset.system,
            &train_set,
            &val_set,
            &train_cfg,
            Some(dir),
        )?;
        outcome.best.save(&dir.join("model.tem1"))?;
        outcome.last.save(&dir.join("last.tem1"))?;
        write(&dir.join("train_log.csv"), outcome.log_csv())?;
        let summary = TrainSummary {
            dataset_manifest_sha256: &dataset.manifest_sha256,
            model: &model_config,
            training: &train_cfg,
            steps: outcome
                .log
                .iter()
                .filter(|r| r.train_loss.is_some())
                .count(),
            best_step: outcome.best_step,
            best_val_psnr: outcome.best_val_psnr,
            final_train_loss: outcome.log.iter().rev().find_map(|r| r.train_loss),
        };
        write(&dir.join("train.json"), to_json(&summary)?)?;
        Ok(outcome)
    })?;
    match outcome.best_val_psnr {
        Some(v) => println!(
            "best validation PSNR {v:.3} dB at step {}; model written to {}",
            outcome.best_step,
            out.display()
        ),
        None => println!("model written to {}", out.display()),
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let out = required(&args.out, "out")?;
    if args.recon.is_empty() {
        return Err(CliError::config(
            "no reconstructions given (use --recon DIR)",
        ));
    }
    if args.data.is_empty() {
        return Err(CliError::config("no datasets given (use --data DIR)"));
    }
    check_out_dir(&out)?;
    let mut datasets = BTreeMap::new();
    for root in &args.data {
        let ds = Dataset::open(root)?;
        datasets.insert(ds.manifest_sha256.clone(), ds);
    }
    let mut rows = Vec::new();
    for dir in &args.recon {
        let path = dir.join(RECON_FILE);
        if !path.is_file() {
            return Err(CliError::Missing {
                what: "reconstruction record",
                path,
            });
        }
        let bytes = std::fs::read(&path)?;
        let record: ReconRecord = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let ds = datasets
            .get(&record.dataset_manifest_sha256)
            .ok_or_else(|| {
                CliError::config(format!(
                    "{} was made from a dataset not given with --data",
                    dir.display()
                ))
            })?;
        let samples = ds.split(record.split)?;
        let mut picked = Vec::new();
        let mut recons = Vec::new();
        for s in samples {
            if let Some(name) = record.images.get(&s.sample_id) {
                recons.push(Image2D::load(&dir.join(name))?);
                picked.push(s);
            }
        }
        if picked.len() != record.images.len() {
            return Err(CliError::Io(format!(
                "{}: images do not match the dataset split",
                dir.display()
            )));
        }
        rows.extend(evaluate_recons(&record.method, &picked, &recons)?);
    }
    let report = MetricsReport::from_samples(rows)?;
    staged(&out, |dir| {
        Ok(report.write(&dir.join("metrics.csv"), &dir.join("metrics.json"))?)
    })?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let seed = args.seed.unwrap_or(0);
    let train_cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(args.max_steps.unwrap_or(DESK_ABLATION_STEPS)),
        learning_rate: args.lr.unwrap_or(DESK_LEARNING_RATE),
        batch_size: args.batch.unwrap_or(4),
        seed,
        validate_every: args.validate_every.unwrap_or(DESK_VALIDATE_EVERY),
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let base = TransEmConfig {
        regularizer: RegularizerConfig {
            channels: args.channels.unwrap_or(DESK_CHANNELS),
            ..RegularizerConfig::default()
        },
        ..TransEmConfig::default()
    };
    let variants = ablation_variants(&base);
    for v in &variants {
        v.config.validate()?;
    }
    check_out_dir(&out)?;
    let dataset = Dataset::open(&data)?;
    let desk = DeskData {
        system: dataset.system.clone(),
        train: dataset.split(Split::Train)?,
        val: dataset.split(Split::Val)?,
        test: dataset.split(Split::Test)?,
    };
    if desk.train.is_empty() || desk.test.is_empty() {
        return Err(CliError::config("ablation needs training and test samples"));
    }
    let rows = run_ablation(&desk, &variants, &train_cfg)?;
    let csv = ablation_csv(&rows);
    staged(&out, |dir| {
        write(&dir.join("ablation.csv"), &csv)?;
        write(&dir.join("ablation.json"), to_json(&rows)?)
    })?;
    print!("{csv}");
    Ok(())
}
