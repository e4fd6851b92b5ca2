//! Synthetic brain-like phantoms made of nested ellipses and hot disks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::ScannerGeometry2D;
use crate::image::Image2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_mm: (f64, f64),
    pub semi_axes_mm: (f64, f64),
    pub rotation_rad: f64,
    pub activity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotDisk {
    pub center_mm: (f64, f64),
    pub radius_mm: f64,
    pub activity: f64,
}

/// Shapes are painted in order (ellipses, then disks); later shapes
/// overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
    pub hot_disks: Vec<HotDisk>,
    pub seed: u64,
}

/// Parameter family of the random generator. `Alternate` draws flatter,
/// more strongly rotated heads with displaced white matter and serves as a
/// held-out test population.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomFamily {
    #[default]
    Standard,
    Alternate,
}

/// Lesion-to-surrounding-tissue activity ratio.
pub const LESION_CONTRAST: f64 = 2.0;

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center_mm.0, y - self.center_mm.1);
        let (s, c) = self.rotation_rad.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes_mm.0).powi(2) + (v / self.semi_axes_mm.1).powi(2) <= 1.0
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            center_mm: (self.center_mm.0 * f, self.center_mm.1 * f),
            semi_axes_mm: (self.semi_axes_mm.0 * f, self.semi_axes_mm.1 * f),
            ..self.clone()
        }
    }
}

impl HotDisk {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center_mm.0, y - self.center_mm.1);
        dx * dx + dy * dy <= self.radius_mm * self.radius_mm
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad_e = self
            .ellipses
            .iter()
            .any(|e| !(e.activity >= 0.0) || !(e.semi_axes_mm.0 > 0.0 && e.semi_axes_mm.1 > 0.0));
        let bad_d = self
            .hot_disks
            .iter()
            .any(|d| !(d.activity >= 0.0) || !(d.radius_mm > 0.0));
        if bad_e || bad_d {
            return Err(CoreError::invalid(
                "phantom shapes need non-negative activity and positive size",
            ));
        }
        Ok(())
    }

    /// Background tissue activity at a point (ellipses only).
    pub fn tissue_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses
            .iter()
            .rfind(|e| e.contains(x, y))
            .map_or(0.0, |e| e.activity)
    }

    /// Uniform shrink of every shape towards the origin, used to derive
    /// neighbouring slices of the same phantom.
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            ellipses: self.ellipses.iter().map(|e| e.scaled(f)).collect(),
            hot_disks: self
                .hot_disks
                .iter()
                .map(|d| HotDisk {
                    center_mm: (d.center_mm.0 * f, d.center_mm.1 * f),
                    radius_mm: d.radius_mm * f,
                    activity: d.activity,
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Random brain-like phantom: a low-activity head outline, a grey-matter
    /// ellipse, optional white matter and a cold ventricle, then 3–6 hot
    /// disks of radius 2–8 mm at twice the local tissue activity.
    pub fn random_brain<R: Rng>(
        rng: &mut R,
        geometry: &ScannerGeometry2D,
        family: PhantomFamily,
        seed: u64,
    ) -> Self {
        let half = geometry.fov_mm() / 2.0;
        let (ax, ay, rot) = match family {
            PhantomFamily::Standard => (
                rng.random_range(0.72..0.84) * half,
                rng.random_range(0.80..0.90) * half,
                rng.random_range(-0.25..0.25),
            ),
            PhantomFamily::Alternate => (
                rng.random_range(0.84..0.92) * half,
                rng.random_range(0.58..0.68) * half,
                rng.random_range(-0.5..0.5),
            ),
        };
        let mut ellipses = vec![
            Ellipse {
                center_mm: (0.0, 0.0),
                semi_axes_mm: (ax, ay),
                rotation_rad: rot,
                activity: 0.25,
            },
            Ellipse {
                center_mm: (0.0, 0.0),
                semi_axes_mm: (0.88 * ax, 0.88 * ay),
                rotation_rad: rot,
                activity: 1.0,
            },
        ];
        if rng.random_bool(0.8) {
            let shift = match family {
                PhantomFamily::Standard => 0.05,
                PhantomFamily::Alternate => 0.15,
            } * half;
            ellipses.push(Ellipse {
                center_mm: (
                    rng.random_range(-shift..=shift),
                    rng.random_range(-shift..=shift),
                ),
                semi_axes_mm: (
                    rng.random_range(0.5..0.65) * ax,
                    rng.random_range(0.5..0.65) * ay,
                ),
                rotation_rad: rot + rng.random_range(-0.2..0.2),
                activity: 0.3,
            });
        }
        if rng.random_bool(0.5) {
            ellipses.push(Ellipse {
                center_mm: (
                    rng.random_range(-0.1..0.1) * half,
                    rng.random_range(-0.1..0.1) * half,
                ),
                semi_axes_mm: (
                    rng.random_range(0.08..0.15) * half,
                    rng.random_range(0.12..0.22) * half,
                ),
                rotation_rad: rot,
                activity: 0.05,
            });
        }
        let brain = ellipses[1].clone();
        let inner = Ellipse {
            semi_axes_mm: (0.85 * brain.semi_axes_mm.0, 0.85 * brain.semi_axes_mm.1),
            ..brain
        };
        let mut spec = Self {
            ellipses,
            hot_disks: Vec::new(),
            seed,
        };
        let n_disks = rng.random_range(3..=6);
        while spec.hot_disks.len() < n_disks {
            let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
            if !inner.contains(x, y) {
                continue;
            }
            let radius = rng.random_range(2.0..=8.0);
            let tissue = spec.tissue_at(x, y);
            spec.hot_disks.push(HotDisk {
                center_mm: (x, y),
                radius_mm: radius,
                activity: LESION_CONTRAST * tissue,
            });
        }
        spec
    }
}

/// Rasterizes by pixel-centre inclusion. Returns the activity image and the
/// lesion mask (1 on hot-disk pixels).
pub fn render_phantom(
    spec: &PhantomSpec,
    geometry: &ScannerGeometry2D,
) -> Result<(Image2D, Image2D)> {
    spec.validate()?;
    let n = geometry.image_size;
    let mut img = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = geometry.pixel_center(row, col);
            let j = row * n + col;
            for e in &spec.ellipses {
                if e.contains(x, y) {
                    img[j] = e.activity;
                }
            }
            for d in &spec.hot_disks {
                if d.contains(x, y) {
                    img[j] = d.activity;
                    mask[j] = 1.0;
                }
            }
        }
    }
    Ok((Image2D::new(n, img)?, Image2D::new(n, mask)?))
}
