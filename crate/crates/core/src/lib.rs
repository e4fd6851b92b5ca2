//! Emission tomography toolkit built around unrolled, learned EM
//! reconstruction.
//!
//! The crate covers the whole desk-scale pipeline: a 2D parallel-beam
//! scanner with a Siddon-traced system matrix ([`system`]), phantom and
//! Poisson scan simulation ([`simulation`]), classical EM solvers
//! ([`recon`]), the windowed-attention image regularizer ([`rstr`]), the
//! unrolled TransEM reconstructor and its training loop ([`transem`]), and
//! image-quality metrics ([`metrics`]).

pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod params;
pub mod psf;
pub mod recon;
pub mod rng;
pub mod rstr;
pub mod siddon;
pub mod simulation;
pub mod system;
pub mod transem;

pub use error::{CoreError, Result};
pub use geometry::ScannerGeometry2D;
pub use image::{Image2D, Sinogram};
pub use system::{SparseSystemMatrix, SubsetPlan, SystemModel};
