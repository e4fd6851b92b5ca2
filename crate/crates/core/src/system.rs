//! Sparse system matrix, PSF composition, projection and sensitivity.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::error::{CoreError, Result};
use crate::geometry::ScannerGeometry2D;
use crate::image::{Image2D, Sinogram};
use crate::psf::{blur_in_place, gaussian_kernel, sigma_pixels};
use crate::siddon::siddon_trace;

/// Row-compressed `I × J` matrix of ray–pixel intersection lengths (mm).
/// Columns within a row are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSystemMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<u64>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseSystemMatrix {
    /// Row `angle · n_bins + bin` holds the Siddon trace of that detector ray.
    pub fn build(geometry: &ScannerGeometry2D) -> Result<Self> {
        geometry.validate()?;
        let mut row_offsets = Vec::with_capacity(geometry.n_rays() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for a in 0..geometry.n_angles {
            for b in 0..geometry.n_bins {
                for (j, len) in siddon_trace(geometry, a, b)? {
                    col_indices.push(j as u32);
                    values.push(len);
                }
                row_offsets.push(values.len() as u64);
            }
        }
        Ok(Self {
            n_rows: geometry.n_rays(),
            n_cols: geometry.n_pixels(),
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (s, e) = (
            self.row_offsets[i] as usize,
            self.row_offsets[i + 1] as usize,
        );
        (&self.col_indices[s..e], &self.values[s..e])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter()
            .zip(vals)
            .map(|(&j, &a)| a * x[j as usize])
            .sum()
    }

    /// `out[j] += v · A[i, j]`.
    pub fn row_scatter(&self, i: usize, v: f64, out: &mut [f64]) {
        let (cols, vals) = self.row(i);
        for (&j, &a) in cols.iter().zip(vals) {
            out[j as usize] += a * v;
        }
    }

    fn check_canonical(&self) -> std::result::Result<(), String> {
        if self.row_offsets.len() != self.n_rows + 1 || self.row_offsets[0] != 0 {
            return Err("row offsets do not match the row count".into());
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1])
            || *self.row_offsets.last().unwrap() as usize != self.values.len()
            || self.col_indices.len() != self.values.len()
        {
            return Err("row offsets are not monotone or do not cover the nonzeros".into());
        }
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            if cols.windows(2).any(|w| w[0] >= w[1])
                || cols.iter().any(|&j| j as usize >= self.n_cols)
            {
                return Err(format!("row {i} columns are not sorted or out of range"));
            }
            if vals.iter().any(|&v| !(v > 0.0)) {
                return Err(format!("row {i} has a non-positive value"));
            }
        }
        Ok(())
    }

    /// `SSM1` container: magic, little-endian `u64` I, J, nnz, then
    /// `u64` row offsets, `u32` column indices and `f64` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 8 * self.row_offsets.len() + 12 * self.nnz());
        buf.extend_from_slice(b"SSM1");
        for v in [self.n_rows as u64, self.n_cols as u64, self.nnz() as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.row_offsets {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.col_indices {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(CoreError::io(path))?;
        f.write_all(&buf).map_err(CoreError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CoreError::io(path))?;
        let bad = |reason: String| CoreError::Format {
            kind: "SSM1",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 28 || &bytes[..4] != b"SSM1" {
            return Err(bad("missing magic header".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (n_rows, n_cols, nnz) = (u64_at(4) as usize, u64_at(12) as usize, u64_at(20) as usize);
        let expected = 28 + 8 * (n_rows + 1) + 4 * nnz + 8 * nnz;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut o = 28;
        let row_offsets = (0..=n_rows).map(|k| u64_at(o + 8 * k)).collect();
        o += 8 * (n_rows + 1);
        let col_indices = (0..nnz)
            .map(|k| u32::from_le_bytes(bytes[o + 4 * k..o + 4 * k + 4].try_into().unwrap()))
            .collect();
        o += 4 * nnz;
        let values = (0..nnz)
            .map(|k| f64::from_le_bytes(bytes[o + 8 * k..o + 8 * k + 8].try_into().unwrap()))
            .collect();
        let m = Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        };
        m.check_canonical().map_err(bad)?;
        Ok(m)
    }
}

/// Interleaved ordered-subset partition of the views: angle `a` belongs to
/// subset `a mod n_subsets`.
#[derive(Debug)]
pub struct SubsetPlan {
    pub angles: Vec<Vec<usize>>,
    /// Per-subset sensitivity `Pᵀ Σ_{i∈S} A_ij`.
    pub sensitivity: Vec<Vec<f64>>,
}

impl SubsetPlan {
    pub fn n_subsets(&self) -> usize {
        self.angles.len()
    }
}

/// Scanner physics: `ȳ = A · P · x (+ b)`, with `P` the image-space PSF.
#[derive(Debug)]
pub struct SystemModel {
    geometry: ScannerGeometry2D,
    matrix: SparseSystemMatrix,
    psf_kernel: Vec<f64>,
    sensitivity: Image2D,
    mask: Vec<bool>,
    subsets: Mutex<BTreeMap<usize, Arc<SubsetPlan>>>,
}

impl SystemModel {
    pub fn build(geometry: &ScannerGeometry2D) -> Result<Self> {
        let matrix = SparseSystemMatrix::build(geometry)?;
        Self::from_matrix(geometry, matrix)
    }

    pub fn from_matrix(geometry: &ScannerGeometry2D, matrix: SparseSystemMatrix) -> Result<Self> {
        geometry.validate()?;
        if matrix.n_rows() != geometry.n_rays() || matrix.n_cols() != geometry.n_pixels() {
            return Err(CoreError::SizeMismatch {
                what: "system matrix",
                expected: format!("{}x{}", geometry.n_rays(), geometry.n_pixels()),
                got: format!("{}x{}", matrix.n_rows(), matrix.n_cols()),
            });
        }
        let psf_kernel =
            gaussian_kernel(sigma_pixels(geometry.psf_fwhm_mm, geometry.pixel_size_mm));
        let mut model = Self {
            geometry: geometry.clone(),
            matrix,
            psf_kernel,
            sensitivity: Image2D::zeros(geometry.image_size),
            mask: Vec::new(),
            subsets: Mutex::new(BTreeMap::new()),
        };
        let ones = Sinogram::filled(geometry.n_angles, geometry.n_bins, 1.0);
        model.sensitivity = model.back_project(&ones)?;
        model.mask = model
            .sensitivity
            .values()
            .iter()
            .map(|&s| s > 0.0)
            .collect();
        Ok(model)
    }

    pub fn geometry(&self) -> &ScannerGeometry2D {
        &self.geometry
    }

    pub fn matrix(&self) -> &SparseSystemMatrix {
        &self.matrix
    }

    /// `s_j = Σ_i (A P)_ij`, computed once as the back projection of ones.
    pub fn sensitivity(&self) -> &Image2D {
        &self.sensitivity
    }

    /// `true` for pixels seen by at least one ray.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_image(&self) -> Image2D {
        let v = self
            .mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Image2D::new(self.geometry.image_size, v).expect("mask has image size")
    }

    pub fn all_angles(&self) -> Vec<usize> {
        (0..self.geometry.n_angles).collect()
    }

    /// Applies the PSF blur in place.
    pub fn blur(&self, values: &mut [f64]) {
        blur_in_place(values, self.geometry.image_size, &self.psf_kernel);
    }

    /// `(A_S · x_blurred)` written into the rows of `out` belonging to `angles`.
    pub fn project_angles(&self, blurred: &[f64], angles: &[usize], out: &mut [f64]) {
        let nb = self.geometry.n_bins;
        for &a in angles {
            for i in a * nb..(a + 1) * nb {
                out[i] = self.matrix.row_dot(i, blurred);
            }
        }
    }

    /// `A_Sᵀ · y` over the rows of `angles`, without the PSF.
    pub fn backproject_angles(&self, y: &[f64], angles: &[usize]) -> Vec<f64> {
        let nb = self.geometry.n_bins;
        let mut out = vec![0.0; self.geometry.n_pixels()];
        for &a in angles {
            for i in a * nb..(a + 1) * nb {
                if y[i] != 0.0 {
                    self.matrix.row_scatter(i, y[i], &mut out);
                }
            }
        }
        out
    }

    pub fn forward_project(&self, x: &Image2D) -> Result<Sinogram> {
        x.check_size(self.geometry.image_size)?;
        let mut blurred = x.values().to_vec();
        self.blur(&mut blurred);
        let mut out = vec![0.0; self.geometry.n_rays()];
        self.project_angles(&blurred, &self.all_angles(), &mut out);
        Sinogram::new(self.geometry.n_angles, self.geometry.n_bins, out)
    }

    /// Exact adjoint of [`SystemModel::forward_project`].
    pub fn back_project(&self, y: &Sinogram) -> Result<Image2D> {
        y.check_dims(self.geometry.n_angles, self.geometry.n_bins)?;
        let mut out = self.backproject_angles(y.values(), &self.all_angles());
        self.blur(&mut out);
        Image2D::new(self.geometry.image_size, out)
    }

    /// Cached interleaved subset partition.
    pub fn subsets(&self, n_subsets: usize) -> Result<Arc<SubsetPlan>> {
        if n_subsets == 0 || n_subsets > self.geometry.n_angles {
            return Err(CoreError::invalid(format!(
                "{n_subsets} subsets would leave a subset without views ({} angles)",
                self.geometry.n_angles
            )));
        }
        let mut cache = self.subsets.lock().expect("subset cache poisoned");
        if let Some(plan) = cache.get(&n_subsets) {
            return Ok(Arc::clone(plan));
        }
        let angles: Vec<Vec<usize>> = (0..n_subsets)
            .map(|k| (k..self.geometry.n_angles).step_by(n_subsets).collect())
            .collect();
        let ones = vec![1.0; self.geometry.n_rays()];
        let sensitivity = angles
            .iter()
            .map(|subset| {
                let mut s = self.backproject_angles(&ones, subset);
                self.blur(&mut s);
                s
            })
            .collect();
        let plan = Arc::new(SubsetPlan {
            angles,
            sensitivity,
        });
        cache.insert(n_subsets, Arc::clone(&plan));
        Ok(plan)
    }
}
