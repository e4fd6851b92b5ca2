//! Dataset assembly: phantom-level splits, per-sample simulation and the
//! on-disk layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{hex_digest, ScannerGeometry2D};
use crate::image::{Image2D, Sinogram};
use crate::rng::{stream, Purpose};
use crate::system::SystemModel;

use super::phantom::{render_phantom, PhantomFamily, PhantomSpec};
use super::scan::{make_label, simulate_scan};

/// Reference count levels of the full-size scanner.
pub const REFERENCE_HIGH_COUNTS: f64 = 5e6;
/// Default reduction applied for the desk geometry.
pub const DESK_FACTOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Scanner layout; its PSF field is ignored in favour of the two below.
    pub geometry: ScannerGeometry2D,
    pub n_phantoms: usize,
    pub slices_per_phantom: usize,
    /// Train / validation / test fractions of the phantoms.
    pub split: [f64; 3],
    /// Expected true counts of the high-count scan used for labels.
    pub high_counts: f64,
    /// Expected true counts of the low-count scan given to reconstructors.
    pub low_counts: f64,
    pub background_fraction: f64,
    pub psf_high_mm: f64,
    pub psf_low_mm: f64,
    pub seed: u64,
    /// Draw test-split phantoms from the alternate family.
    pub holdout_family: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let high = REFERENCE_HIGH_COUNTS * DESK_FACTOR;
        Self {
            geometry: ScannerGeometry2D::default(),
            n_phantoms: 20,
            slices_per_phantom: 1,
            split: [0.85, 0.05, 0.10],
            high_counts: high,
            low_counts: high / 10.0,
            background_fraction: 0.2,
            psf_high_mm: 2.5,
            psf_low_mm: 4.0,
            seed: 0,
            holdout_family: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_phantoms == 0 || self.slices_per_phantom == 0 {
            return Err(CoreError::invalid(
                "need at least one phantom and one slice",
            ));
        }
        if self.split.iter().any(|&r| !(r >= 0.0))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CoreError::invalid(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                self.split
            )));
        }
        if !(self.high_counts > 0.0 && self.low_counts > 0.0) {
            return Err(CoreError::invalid("count levels must be positive"));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(CoreError::invalid("background fraction must lie in [0, 1)"));
        }
        if !(self.psf_high_mm >= 0.0 && self.psf_low_mm >= 0.0) {
            return Err(CoreError::invalid("PSF widths must be non-negative"));
        }
        Ok(())
    }

    /// Geometry of the reconstruction model (low-count PSF).
    pub fn low_geometry(&self) -> ScannerGeometry2D {
        self.geometry.with_psf(self.psf_low_mm)
    }

    pub fn high_geometry(&self) -> ScannerGeometry2D {
        self.geometry.with_psf(self.psf_high_mm)
    }

    /// Phantom counts per split, rounding train and validation.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_phantoms;
        let train = ((self.split[0] * n as f64).round() as usize).min(n);
        let val = ((self.split[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }

    /// Split of every phantom id, from a seeded shuffle.
    pub fn phantom_splits(&self) -> Vec<Split> {
        let mut ids: Vec<usize> = (0..self.n_phantoms).collect();
        ids.shuffle(&mut stream(self.seed, 0, Purpose::Split));
        let [train, val, _] = self.split_sizes();
        let mut splits = vec![Split::Test; self.n_phantoms];
        for (rank, &id) in ids.iter().enumerate() {
            splits[id] = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
        splits
    }
}

/// One simulated slice. Images are in low-count units: the phantom is scaled
/// by the low-count calibration factor and the label is rescaled from
/// high-count to low-count units.
#[derive(Clone, Debug)]
pub struct ScanSample {
    pub sample_id: usize,
    pub phantom_id: usize,
    pub slice: usize,
    pub split: Split,
    pub label: Image2D,
    pub y_low: Sinogram,
    pub b: Sinogram,
    pub true_phantom: Image2D,
    /// 1 on hot-disk pixels, 0 elsewhere.
    pub lesion_mask: Image2D,
    pub count_level: f64,
}

impl ScanSample {
    pub fn lesion_pixels(&self) -> Vec<bool> {
        self.lesion_mask.values().iter().map(|&v| v > 0.5).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: usize,
    pub phantom_id: usize,
    pub slice: usize,
    pub split: Split,
    pub seed: u64,
    pub count_level: f64,
    pub high_counts: f64,
    pub background_fraction: f64,
    pub psf_low_mm: f64,
    pub psf_high_mm: f64,
    pub geometry_hash: String,
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub phantom_id: usize,
    pub slice: usize,
    pub split: Split,
    /// SHA-256 of every file in the sample directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub geometry_hash: String,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GEOMETRY_FILE: &str = "geometry.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(CoreError::io(&path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// System models for the two simulated PSFs.
pub struct DatasetModels {
    pub high: SystemModel,
    pub low: SystemModel,
}

impl DatasetModels {
    pub fn build(config: &DatasetConfig) -> Result<Self> {
        let low = SystemModel::build(&config.low_geometry())?;
        let high = SystemModel::from_matrix(&config.high_geometry(), low.matrix().clone())?;
        Ok(Self { high, low })
    }
}

fn slice_spec(
    config: &DatasetConfig,
    phantom_id: usize,
    slice: usize,
    family: PhantomFamily,
) -> PhantomSpec {
    let mut rng = stream(config.seed, phantom_id as u64, Purpose::Phantom);
    let base = PhantomSpec::random_brain(&mut rng, &config.geometry, family, config.seed);
    base.scaled((1.0 - 0.04 * slice as f64).max(0.5))
}

/// Simulates one slice. High- and low-count scans use independent streams
/// keyed by the sample id.
pub fn simulate_sample(
    config: &DatasetConfig,
    models: &DatasetModels,
    phantom_id: usize,
    slice: usize,
    split: Split,
) -> Result<(ScanSample, SampleMeta)> {
    let family = if config.holdout_family && split == Split::Test {
        PhantomFamily::Alternate
    } else {
        PhantomFamily::Standard
    };
    let spec = slice_spec(config, phantom_id, slice, family);
    let (phantom, lesion_mask) = render_phantom(&spec, &config.geometry)?;
    let sample_id = phantom_id * config.slices_per_phantom + slice;
    let id = sample_id as u64;
    let high = simulate_scan(
        &phantom,
        &models.high,
        config.high_counts,
        config.background_fraction,
        &mut stream(config.seed, id, Purpose::HighCountScan),
    )?;
    let low = simulate_scan(
        &phantom,
        &models.low,
        config.low_counts,
        config.background_fraction,
        &mut stream(config.seed, id, Purpose::LowCountScan),
    )?;
    let label = make_label(&high.y, &high.b, &models.high)?.scaled(low.scale / high.scale);
    let meta = SampleMeta {
        sample_id,
        phantom_id,
        slice,
        split,
        seed: config.seed,
        count_level: config.low_counts,
        high_counts: config.high_counts,
        background_fraction: config.background_fraction,
        psf_low_mm: config.psf_low_mm,
        psf_high_mm: config.psf_high_mm,
        geometry_hash: config.low_geometry().hash_hex(),
        phantom: spec,
    };
    let sample = ScanSample {
        sample_id,
        phantom_id,
        slice,
        split,
        label,
        y_low: low.y,
        b: low.b,
        true_phantom: phantom.scaled(low.scale),
        lesion_mask,
        count_level: config.low_counts,
    };
    Ok((sample, meta))
}

/// Simulates every sample in id order (in parallel, deterministically).
pub fn generate_samples(
    config: &DatasetConfig,
    models: &DatasetModels,
) -> Result<Vec<(ScanSample, SampleMeta)>> {
    config.validate()?;
    let splits = config.phantom_splits();
    let spp = config.slices_per_phantom;
    (0..config.n_phantoms * spp)
        .into_par_iter()
        .map(|sid| simulate_sample(config, models, sid / spp, sid % spp, splits[sid / spp]))
        .collect()
}

const SAMPLE_FILES: [&str; 6] = [
    "phantom.img1",
    "label.img1",
    "y_low.sin1",
    "b.sin1",
    "lesion_mask.img1",
    "meta.json",
];

fn write_sample(
    dir: &Path,
    sample: &ScanSample,
    meta: &SampleMeta,
) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).map_err(CoreError::io(dir))?;
    sample.true_phantom.save(&dir.join(SAMPLE_FILES[0]))?;
    sample.label.save(&dir.join(SAMPLE_FILES[1]))?;
    sample.y_low.save(&dir.join(SAMPLE_FILES[2]))?;
    sample.b.save(&dir.join(SAMPLE_FILES[3]))?;
    sample.lesion_mask.save(&dir.join(SAMPLE_FILES[4]))?;
    let meta_path = dir.join(SAMPLE_FILES[5]);
    std::fs::write(&meta_path, serde_json::to_string_pretty(meta)?)
        .map_err(CoreError::io(&meta_path))?;
    SAMPLE_FILES
        .iter()
        .map(|name| Ok((name.to_string(), file_sha256(&dir.join(name))?)))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
    Ok(hex_digest(&Sha256::digest(&bytes)))
}

pub fn sample_dir(root: &Path, split: Split, sample_id: usize) -> PathBuf {
    root.join(split.as_str()).join(format!("{sample_id:05}"))
}

/// Simulates the dataset and writes it under `out_dir`. Everything is first
/// written to a sibling staging directory that is renamed into place once
/// complete; an existing non-empty `out_dir` is refused.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    if out_dir.exists() {
        let mut entries = std::fs::read_dir(out_dir).map_err(CoreError::io(out_dir))?;
        if entries.next().is_some() {
            return Err(CoreError::invalid(format!(
                "output directory {} is not empty",
                out_dir.display()
            )));
        }
        std::fs::remove_dir(out_dir).map_err(CoreError::io(out_dir))?;
    }
    let models = DatasetModels::build(config)?;
    let samples = generate_samples(config, &models)?;
    let staging = staging_path(out_dir);
    let result = (|| {
        std::fs::create_dir_all(&staging).map_err(CoreError::io(&staging))?;
        let mut entries = Vec::with_capacity(samples.len());
        for (sample, meta) in &samples {
            let dir = sample_dir(&staging, sample.split, sample.sample_id);
            let files = write_sample(&dir, sample, meta)?;
            entries.push(ManifestEntry {
                sample_id: sample.sample_id,
                phantom_id: sample.phantom_id,
                slice: sample.slice,
                split: sample.split,
                files,
            });
        }
        let geometry = config.low_geometry();
        geometry.save(&staging.join(GEOMETRY_FILE))?;
        let manifest = Manifest {
            config: config.clone(),
            geometry_hash: geometry.hash_hex(),
            samples: entries,
        };
        let path = staging.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(CoreError::io(&path))?;
        Ok(manifest)
    })();
    match result {
        Ok(manifest) => {
            std::fs::rename(&staging, out_dir).map_err(CoreError::io(out_dir))?;
            log::info!(
                "wrote {} samples to {}",
                manifest.samples.len(),
                out_dir.display()
            );
            Ok(manifest)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

pub(crate) fn staging_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Reads every sample of one split, in sample-id order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<ScanSample>> {
    let manifest = Manifest::load(root)?;
    manifest
        .entries(split)
        .map(|e| load_sample(root, e))
        .collect()
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<ScanSample> {
    let dir = sample_dir(root, entry.split, entry.sample_id);
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta =
        serde_json::from_slice(&std::fs::read(&meta_path).map_err(CoreError::io(&meta_path))?)?;
    Ok(ScanSample {
        sample_id: entry.sample_id,
        phantom_id: entry.phantom_id,
        slice: entry.slice,
        split: entry.split,
        true_phantom: Image2D::load(&dir.join("phantom.img1"))?,
        label: Image2D::load(&dir.join("label.img1"))?,
        y_low: Sinogram::load(&dir.join("y_low.sin1"))?,
        b: Sinogram::load(&dir.join("b.sin1"))?,
        lesion_mask: Image2D::load(&dir.join("lesion_mask.img1"))?,
        count_level: meta.count_level,
    })
}
