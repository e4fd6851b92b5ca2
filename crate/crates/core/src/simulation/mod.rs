//! Synthetic phantoms, Poisson scans and dataset generation.

pub mod dataset;
pub mod phantom;
pub mod scan;

pub use dataset::{
    generate_dataset, generate_samples, load_split, DatasetConfig, DatasetModels, Manifest,
    ScanSample, Split,
};
pub use phantom::{render_phantom, Ellipse, HotDisk, PhantomFamily, PhantomSpec};
pub use scan::{make_label, simulate_scan, SimulatedScan};
