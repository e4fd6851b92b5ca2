use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transem_core::recon::{initial_image, osem_reconstruct, ReconConfig};
use transem_core::rng::{stream, Purpose};
use transem_core::simulation::dataset::{generate_samples, Manifest};
use transem_core::simulation::{
    generate_dataset, load_split, make_label, render_phantom, simulate_scan, DatasetConfig,
    DatasetModels, Ellipse, HotDisk, PhantomFamily, PhantomSpec, Split,
};
use transem_core::{Image2D, ScannerGeometry2D, SystemModel};

fn brain(g: &ScannerGeometry2D, seed: u64) -> Image2D {
    let spec = PhantomSpec::random_brain(
        &mut stream(seed, 0, Purpose::Phantom),
        g,
        PhantomFamily::Standard,
        seed,
    );
    render_phantom(&spec, g).unwrap().0
}

fn tiny_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        geometry: ScannerGeometry2D {
            n_angles: 12,
            n_bins: 23,
            bin_spacing_mm: 2.0,
            image_size: 16,
            pixel_size_mm: 2.0,
            psf_fwhm_mm: 0.0,
        },
        n_phantoms: 20,
        split: [0.85, 0.05, 0.10],
        seed,
        ..DatasetConfig::default()
    }
}

#[test]
fn disk_rasterization_matches_pixel_center_oracle() {
    let g = ScannerGeometry2D::desk_small();
    let (cx, cy, r) = (3.0, -5.0, 8.0);
    let spec = PhantomSpec {
        hot_disks: vec![HotDisk {
            center_mm: (cx, cy),
            radius_mm: r,
            activity: 2.0,
        }],
        ..Default::default()
    };
    let (img, mask) = render_phantom(&spec, &g).unwrap();
    let mut expected = 0;
    for row in 0..32 {
        for col in 0..32 {
            // pixel centres on a 2 mm grid spanning [-32, 32] mm
            let x = -31.0 + 2.0 * col as f64;
            let y = 31.0 - 2.0 * row as f64;
            let inside = (x - cx).powi(2) + (y - cy).powi(2) <= r * r;
            expected += inside as usize;
            assert_eq!(mask.get(row, col), if inside { 1.0 } else { 0.0 });
            assert_eq!(img.get(row, col), if inside { 2.0 } else { 0.0 });
        }
    }
    assert_eq!(mask.sum() as usize, expected);
    assert!(expected > 40);
}

#[test]
fn lesion_mask_marks_exactly_the_disks() {
    let g = ScannerGeometry2D::desk_small();
    let spec = PhantomSpec {
        ellipses: vec![Ellipse {
            center_mm: (0.0, 0.0),
            semi_axes_mm: (25.0, 25.0),
            rotation_rad: 0.0,
            activity: 1.0,
        }],
        hot_disks: vec![HotDisk {
            center_mm: (0.0, 0.0),
            radius_mm: 4.0,
            activity: 2.0,
        }],
        seed: 0,
    };
    let (img, mask) = render_phantom(&spec, &g).unwrap();
    for (v, m) in img.values().iter().zip(mask.values()) {
        assert_eq!(*m == 1.0, *v == 2.0);
    }
}

#[test]
fn expected_total_counts_match_monte_carlo() {
    let g = ScannerGeometry2D::desk_small().with_psf(4.0);
    let model = SystemModel::build(&g).unwrap();
    let x = brain(&g, 1);
    let (t, f) = (2e4, 0.2);
    let totals: Vec<f64> = (0..200)
        .map(|s| {
            simulate_scan(&x, &model, t, f, &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap()
                .y
                .sum()
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / 200.0;
    let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0;
    let expect = t / (1.0 - f);
    assert!(
        (mean - expect).abs() < 3.0 * (var / 200.0).sqrt(),
        "{mean} vs {expect}"
    );
}

#[test]
fn total_count_variance_equals_mean() {
    let g = ScannerGeometry2D::desk_small().with_psf(2.5);
    let model = SystemModel::build(&g).unwrap();
    let x = brain(&g, 2);
    let totals: Vec<f64> = (0..500)
        .map(|s| {
            simulate_scan(
                &x,
                &model,
                5e3,
                0.2,
                &mut ChaCha8Rng::seed_from_u64(1000 + s),
            )
            .unwrap()
            .y
            .sum()
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / 500.0;
    let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 499.0;
    assert!(
        (var - mean).abs() < 0.1 * mean,
        "variance {var}, mean {mean}"
    );
}

#[test]
fn noiseless_label_converges_to_phantom() {
    let g = ScannerGeometry2D::desk_small().with_psf(2.5);
    let model = SystemModel::build(&g).unwrap();
    let x = brain(&g, 3);
    let scan = simulate_scan(&x, &model, 1e6, 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let config = ReconConfig {
        n_iterations: 300,
        ..ReconConfig::default()
    };
    let recon = osem_reconstruct(&model, &scan.ybar, &scan.b, &config, &initial_image(&model))
        .unwrap()
        .scaled(1.0 / scan.scale);
    let err: f64 = recon
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    // RMSE as a fraction of the phantom's peak activity
    let nrmse = (err / x.values().len() as f64).sqrt() / x.max();
    assert!(nrmse < 0.05, "normalized RMSE {nrmse}");
}

#[test]
fn label_is_deterministic() {
    let g = ScannerGeometry2D::desk_small().with_psf(2.5);
    let model = SystemModel::build(&g).unwrap();
    let x = brain(&g, 4);
    let scan = simulate_scan(&x, &model, 1e5, 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(
        make_label(&scan.y, &scan.b, &model).unwrap(),
        make_label(&scan.y, &scan.b, &model).unwrap()
    );
}

#[test]
fn phantom_split_is_disjoint_and_sized() {
    let c = tiny_config(11);
    let splits = c.phantom_splits();
    let ids = |s: Split| -> BTreeSet<usize> { (0..20).filter(|&p| splits[p] == s).collect() };
    let (train, val, test) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert_eq!((train.len(), val.len(), test.len()), (17, 1, 2));
    assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    let multi = DatasetConfig {
        n_phantoms: 5,
        slices_per_phantom: 3,
        split: [0.6, 0.2, 0.2],
        ..c
    };
    let models = DatasetModels::build(&multi).unwrap();
    let samples = generate_samples(&multi, &models).unwrap();
    assert_eq!(samples.len(), 15);
    for (s, _) in &samples {
        for (o, _) in &samples {
            if s.phantom_id == o.phantom_id {
                assert_eq!(s.split, o.split);
            }
        }
    }
}

#[test]
fn low_count_level_matches_config() {
    let c = DatasetConfig {
        n_phantoms: 6,
        ..tiny_config(5)
    };
    let models = DatasetModels::build(&c).unwrap();
    for (s, meta) in generate_samples(&c, &models).unwrap() {
        let expect = c.low_counts / (1.0 - c.background_fraction);
        let total = s.y_low.sum();
        assert!(
            (total - expect).abs() < 4.0 * expect.sqrt(),
            "{total} vs {expect}"
        );
        assert!(
            (s.b.sum() - c.background_fraction / (1.0 - c.background_fraction) * c.low_counts)
                .abs()
                < 1e-6
        );
        assert_eq!(meta.count_level, c.low_counts);
        assert!(s
            .y_low
            .values()
            .iter()
            .all(|&v| v >= 0.0 && v.fract() == 0.0));
        // the scaled phantom projects to the requested true counts
        let proj = models.low.forward_project(&s.true_phantom).unwrap().sum();
        assert!((proj - c.low_counts).abs() < 1e-6 * c.low_counts);
    }
}

#[test]
fn dataset_round_trips_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = DatasetConfig {
        n_phantoms: 4,
        split: [0.5, 0.25, 0.25],
        ..tiny_config(9)
    };
    let a = generate_dataset(&c, &dir.path().join("a")).unwrap();
    let b = generate_dataset(&c, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(Manifest::load(&dir.path().join("a")).unwrap(), a);
    let other = generate_dataset(
        &DatasetConfig {
            seed: 10,
            ..c.clone()
        },
        &dir.path().join("c"),
    )
    .unwrap();
    assert_ne!(a.samples[0].files, other.samples[0].files);

    let models = DatasetModels::build(&c).unwrap();
    let fresh = generate_samples(&c, &models).unwrap();
    for split in Split::ALL {
        for s in load_split(&dir.path().join("a"), split).unwrap() {
            let (f, _) = &fresh[s.sample_id];
            assert_eq!(s.split, split);
            assert_eq!(s.label, f.label);
            assert_eq!(s.y_low, f.y_low);
            assert_eq!(s.true_phantom, f.true_phantom);
        }
    }
    assert!(
        generate_dataset(&c, &dir.path().join("a")).is_err(),
        "non-empty output must be refused"
    );
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains("partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn holdout_family_changes_only_test_phantoms() {
    let c = DatasetConfig {
        n_phantoms: 6,
        split: [0.5, 0.0, 0.5],
        ..tiny_config(2)
    };
    let h = DatasetConfig {
        holdout_family: true,
        ..c.clone()
    };
    let models = DatasetModels::build(&c).unwrap();
    let plain = generate_samples(&c, &models).unwrap();
    let held = generate_samples(&h, &models).unwrap();
    for ((p, _), (q, _)) in plain.iter().zip(&held) {
        if p.split == Split::Test {
            assert_ne!(p.true_phantom, q.true_phantom);
        } else {
            assert_eq!(p.true_phantom, q.true_phantom);
        }
    }
}
