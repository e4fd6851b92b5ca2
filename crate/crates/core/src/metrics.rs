//! Image quality metrics and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::Image2D;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `x / max(x)`.
pub fn normalize_max1(x: &Image2D) -> Result<Image2D> {
    let max = x.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(CoreError::invalid(
            "cannot normalize an image without a positive finite maximum",
        ));
    }
    Ok(x.scaled(1.0 / max))
}

fn check_pair(a: &Image2D, b: &Image2D) -> Result<()> {
    b.check_size(a.size())
}

/// `10 log₁₀(1 / MSE)` for images with data range 1; `+∞` when identical.
pub fn psnr(reference: &Image2D, test: &Image2D) -> Result<f64> {
    check_pair(reference, test)?;
    let n = reference.values().len() as f64;
    let mse = reference
        .values()
        .iter()
        .zip(test.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable weighted sum over every fully contained 11×11 window.
fn filter_valid(values: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let m = n - k + 1;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = (0..k).map(|t| w[t] * values[r * n + c + t]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..k).map(|t| w[t] * rows[(r + t) * m + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows
/// (σ = 1.5, K₁ = 0.01, K₂ = 0.03, data range 1).
pub fn ssim(reference: &Image2D, test: &Image2D) -> Result<f64> {
    check_pair(reference, test)?;
    let n = reference.size();
    if n < SSIM_WINDOW {
        return Err(CoreError::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {n}x{n}"
        )));
    }
    let w = gaussian_window();
    let (a, b) = (reference.values(), test.values());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, n, &w);
    let mu_b = filter_valid(b, n, &w);
    let aa = filter_valid(&prod(&|x, _| x * x), n, &w);
    let bb = filter_valid(&prod(&|_, y| y * y), n, &w);
    let ab = filter_valid(&prod(&|x, y| x * y), n, &w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean over samples of `mean(recon on lesion) / mean(truth on lesion)`.
/// Samples with an empty lesion mask are skipped with a warning.
pub fn mcrc(recons: &[Image2D], truths: &[Image2D], lesion_masks: &[Vec<bool>]) -> Result<f64> {
    if recons.len() != truths.len() || recons.len() != lesion_masks.len() {
        return Err(CoreError::invalid(
            "mcrc needs one truth and one mask per reconstruction",
        ));
    }
    let mut ratios = Vec::with_capacity(recons.len());
    for (i, ((r, t), m)) in recons.iter().zip(truths).zip(lesion_masks).enumerate() {
        check_pair(t, r)?;
        if m.len() != r.values().len() {
            return Err(CoreError::SizeMismatch {
                what: "lesion mask",
                expected: r.values().len().to_string(),
                got: m.len().to_string(),
            });
        }
        let count = m.iter().filter(|&&k| k).count();
        if count == 0 {
            log::warn!("sample {i} has no lesion pixels; skipped in MCRC");
            continue;
        }
        let masked_mean = |img: &Image2D| -> f64 {
            img.values()
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| v)
                .sum::<f64>()
                / count as f64
        };
        let truth = masked_mean(t);
        if !(truth > 0.0) {
            return Err(CoreError::invalid(format!(
                "sample {i} has no true lesion uptake"
            )));
        }
        ratios.push(masked_mean(r) / truth);
    }
    if ratios.is_empty() {
        return Err(CoreError::invalid("no sample with lesions for MCRC"));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub method: String,
    pub count_level: f64,
    pub sample_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Lesion uptake ratio of this sample (`None` without lesions).
    pub crc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n−1) standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub method: String,
    pub count_level: f64,
    pub n_samples: usize,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub mcrc: f64,
}

/// Per-sample rows and per (method, count level) aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregates: Vec<AggregateMetrics>,
}

/// Table order of known methods; unknown methods sort after them by name.
pub const METHOD_ORDER: [&str; 5] = ["mlem", "osem", "mapem", "fbsem-cnn", "transem"];

fn method_rank(m: &str) -> (usize, String) {
    (
        METHOD_ORDER
            .iter()
            .position(|k| *k == m)
            .unwrap_or(METHOD_ORDER.len()),
        m.to_string(),
    )
}

/// Scores one reconstruction. PSNR and SSIM compare max-normalized images
/// with the reference; the lesion ratio uses raw values against `truth`.
pub fn evaluate_sample(
    method: &str,
    count_level: f64,
    sample_id: usize,
    recon: &Image2D,
    reference: &Image2D,
    truth: &Image2D,
    lesion_mask: &[bool],
) -> Result<SampleMetrics> {
    let r = normalize_max1(reference)?;
    let x = normalize_max1(recon)?;
    let crc = match mcrc(
        std::slice::from_ref(recon),
        std::slice::from_ref(truth),
        &[lesion_mask.to_vec()],
    ) {
        Ok(v) => Some(v),
        Err(_) if !lesion_mask.iter().any(|&m| m) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleMetrics {
        method: method.to_string(),
        count_level,
        sample_id,
        psnr: psnr(&r, &x)?,
        ssim: ssim(&r, &x)?,
        crc,
    })
}

impl MetricsReport {
    /// Builds the report from per-sample rows; the dataset MCRC is the mean
    /// of the per-sample ratios.
    pub fn from_samples(mut samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::invalid("no samples to report"));
        }
        samples.sort_by(|a, b| {
            method_rank(&a.method)
                .cmp(&method_rank(&b.method))
                .then(b.count_level.total_cmp(&a.count_level))
                .then(a.sample_id.cmp(&b.sample_id))
        });
        let mut groups: BTreeMap<((usize, String), u64), Vec<&SampleMetrics>> = BTreeMap::new();
        for s in &samples {
            // descending count level within each method
            let key = (method_rank(&s.method), u64::MAX - s.count_level.to_bits());
            groups.entry(key).or_default().push(s);
        }
        let aggregates = groups
            .into_values()
            .map(|rows| {
                let crcs: Vec<f64> = rows.iter().filter_map(|r| r.crc).collect();
                AggregateMetrics {
                    method: rows[0].method.clone(),
                    count_level: rows[0].count_level,
                    n_samples: rows.len(),
                    psnr: MeanStd::of(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>()),
                    ssim: MeanStd::of(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
                    mcrc: if crcs.is_empty() {
                        f64::NAN
                    } else {
                        crcs.iter().sum::<f64>() / crcs.len() as f64
                    },
                }
            })
            .collect();
        Ok(Self {
            samples,
            aggregates,
        })
    }

    pub fn aggregate(&self, method: &str, count_level: f64) -> Option<&AggregateMetrics> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.count_level == count_level)
    }

    /// Per-sample rows followed by `mean±std` aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,count_level,sample,psnr,ssim,mcrc\n");
        for s in &self.samples {
            let crc = s.crc.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{},{:e},{},{:.6},{:.6},{}",
                s.method, s.count_level, s.sample_id, s.psnr, s.ssim, crc
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{:e},mean±std,{:.2}±{:.2},{:.4}±{:.4},{:.4}",
                a.method, a.count_level, a.psnr.mean, a.psnr.std, a.ssim.mean, a.ssim.std, a.mcrc
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        // infinite PSNR is not representable in JSON; serialize as a string
        let value = serde_json::to_value(self.with_finite_psnr())?;
        Ok(serde_json::to_string_pretty(&value)?)
    }

    fn with_finite_psnr(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            if s.psnr.is_infinite() {
                s.psnr = f64::MAX;
            }
        }
        for a in &mut out.aggregates {
            if a.psnr.mean.is_infinite() {
                a.psnr.mean = f64::MAX;
            }
            if !a.psnr.std.is_finite() {
                a.psnr.std = 0.0;
            }
        }
        out
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(CoreError::io(csv_path))?;
        std::fs::write(json_path, self.to_json()?).map_err(CoreError::io(json_path))
    }
}
