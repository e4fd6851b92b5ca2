use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transem_core::recon::{initial_image, osem_reconstruct, ReconConfig};
use transem_core::rstr::{BoundParams, InitMode, Regularizer, RegularizerConfig, RegularizerKind};
use transem_core::simulation::{make_label, simulate_scan, ScanSample, Split};
use transem_core::transem::{
    adam_step, em_op, forward, fusion_op, fusion_update, reconstruct, train, transem_block,
    AdamConfig, AdamState, BoundModel, EmContext, TrainConfig, TransEmConfig, TransEmModel,
};
use transem_core::{CoreError, Image2D, ScannerGeometry2D, Sinogram, SystemModel};
use transem_tensor::gradcheck::check_gradients;
use transem_tensor::{Graph, Tensor};

fn geometry(n: usize, psf: f64) -> ScannerGeometry2D {
    ScannerGeometry2D {
        n_angles: 12,
        n_bins: n + n / 2,
        bin_spacing_mm: 2.0,
        image_size: n,
        pixel_size_mm: 2.0,
        psf_fwhm_mm: psf,
    }
}

fn smooth_phantom(n: usize) -> Image2D {
    let c = (n as f64 - 1.0) / 2.0;
    Image2D::new(
        n,
        (0..n * n)
            .map(|i| {
                let (r, q) = ((i / n) as f64 - c, (i % n) as f64 - c);
                let d2 = (r * r + q * q) / (c * c);
                let hot = ((r - 2.0).powi(2) + (q + 1.0).powi(2) < 4.0) as u8 as f64;
                if d2 < 0.8 {
                    1.0 + hot
                } else {
                    0.0
                }
            })
            .collect(),
    )
    .unwrap()
}

fn scan(model: &SystemModel, counts: f64, seed: u64) -> (Image2D, Sinogram, Sinogram) {
    let phantom = smooth_phantom(model.geometry().image_size);
    let s = simulate_scan(
        &phantom,
        model,
        counts,
        0.2,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    (phantom.scaled(s.scale), s.y, s.b)
}

fn tiny_rstr() -> RegularizerConfig {
    RegularizerConfig {
        channels: 4,
        n_heads: 2,
        mlp_ratio: 2,
        window_size: 4,
        ..RegularizerConfig::default()
    }
}

fn config(iterations: usize, subsets: usize, regularizer: RegularizerConfig) -> TransEmConfig {
    TransEmConfig {
        n_iterations: iterations,
        n_subsets: subsets,
        regularizer,
        ..TransEmConfig::default()
    }
}

/// Root of `x²/a + (1 − r/a) x − e` on `[0, ∞)` by bisection.
fn bisection_root(e: f64, r: f64, a: f64) -> f64 {
    let f = |x: f64| x * x / a + (1.0 - r / a) * x - e;
    let mut hi = 1.0f64.max(e).max(r);
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn fusion_matches_bisection_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let e = 10f64.powf(rng.random_range(-3.0..3.0));
        let r = rng.random_range(-0.5..1.0) * 10f64.powf(rng.random_range(-3.0..3.0));
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let out = fusion_update(&Image2D::filled(1, e), &Image2D::filled(1, r), a, &[1.0])
            .unwrap()
            .values()[0];
        let oracle = bisection_root(e, r, a);
        assert!(out >= 0.0);
        worst = worst.max((out - oracle).abs() / oracle);
    }
    assert!(worst < 1e-10, "worst relative error {worst}");
}

#[test]
fn fusion_reference_cases() {
    let one = |e: f64, r: f64, alpha: f64, s: f64| {
        fusion_update(&Image2D::filled(1, e), &Image2D::filled(1, r), alpha, &[s])
            .unwrap()
            .values()[0]
    };
    assert!((one(2.0, 1.0, 1.0, 1.0) - 2f64.sqrt()).abs() < 1e-12);
    assert!((one(2.0, 1.0, 0.5, 2.0) - 2f64.sqrt()).abs() < 1e-12);
    for c in [1e-3, 0.7, 40.0] {
        assert!((one(c, c, 0.3, 2.0) - c).abs() <= 1e-12 * c);
    }
    let e = 5.0;
    assert!((one(e, 3.0, 1e9, 1.0) - e).abs() < 1e-6 * e);
    assert!(fusion_update(
        &Image2D::filled(1, 1.0),
        &Image2D::filled(1, 1.0),
        -1.0,
        &[1.0]
    )
    .is_err());
}

fn weights(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, n, n], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn em_op_gradient_matches_finite_differences() {
    for psf in [0.0, 3.0] {
        let model = Arc::new(SystemModel::build(&geometry(8, psf)).unwrap());
        let (_, y, b) = scan(&model, 500.0, 1);
        let ctx = EmContext::new(model.clone(), 3, y, b, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(0.5..2.0));
        let w = weights(8, 3);
        let report = check_gradients(&[x], 1e-6, 1e-8, |g, v| {
            let out = em_op(v[0], &ctx, 1)?;
            Ok::<_, CoreError>(out.mul(g.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "psf {psf}: {report:?}");
    }
}

#[test]
fn fusion_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(0.1..3.0));
    let r = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(-1.0..3.0));
    let la = Tensor::scalar(0.3);
    let sens: Arc<Vec<f64>> = Arc::new(
        (0..16)
            .map(|j| {
                if j == 5 {
                    0.0
                } else {
                    rng.random_range(0.2..2.0)
                }
            })
            .collect(),
    );
    let w = weights(4, 5);
    let report = check_gradients(&[e, r, la], 1e-6, 1e-8, |g, v| {
        let out = fusion_op(v[0], v[1], v[2], sens.clone())?;
        Ok::<_, CoreError>(out.mul(g.constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

fn bind_from_vars<'g>(model: &TransEmModel, vars: &[transem_tensor::Var<'g>]) -> BoundModel<'g> {
    let mut at = 0;
    let regularizers = model
        .regularizers
        .iter()
        .map(|r| {
            let names: Vec<String> = r.params.names().map(str::to_string).collect();
            let n = names.len();
            at += n;
            BoundParams::from_vars(names, vars[at - n..at].to_vec())
        })
        .collect();
    BoundModel {
        regularizers,
        log_alpha: vars[at..].to_vec(),
    }
}

/// Gradient check of a whole unrolled model on a 16×16 image. Inputs are the
/// regularizer tensors followed by one `[1]` tensor per block step size.
fn end_to_end_error(cfg: &TransEmConfig, seed: u64) -> f64 {
    let model_sys = Arc::new(SystemModel::build(&geometry(16, 3.0)).unwrap());
    let (truth, y, b) = scan(&model_sys, 2e3, seed);
    let mut model =
        TransEmModel::init_with(cfg, InitMode::Generic, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
    model.log_alpha = vec![0.2, -0.4][..model.n_blocks()].to_vec();
    let ctx = EmContext::new(model_sys.clone(), cfg.n_subsets, y, b, cfg.epsilon_em).unwrap();
    let x0 = Tensor::new(&[1, 16, 16], initial_image(&model_sys).into_values()).unwrap();
    let target = Tensor::new(&[1, 16, 16], truth.values().to_vec()).unwrap();
    let mut inputs: Vec<Tensor> = model
        .regularizers
        .iter()
        .flat_map(|r| r.params.tensors().cloned())
        .collect();
    inputs.extend(model.log_alpha.iter().map(|&a| Tensor::scalar(a)));
    let report = check_gradients(&inputs, 1e-5, 1e-7, |g, v| {
        let bound = bind_from_vars(&model, v);
        let out = forward(&model, &bound, &ctx, g.constant(x0.clone()))?;
        Ok::<_, CoreError>(out.mse(g.constant(target.clone()), None)?)
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn two_block_model_gradients_match_finite_differences() {
    let shared = config(1, 2, tiny_rstr());
    let err = end_to_end_error(&shared, 6);
    assert!(err < 1e-3, "shared: {err}");
    let unshared = TransEmConfig {
        shared_weights: false,
        regularizer: RegularizerConfig {
            kind: RegularizerKind::Cnn,
            channels: 3,
            ..RegularizerConfig::default()
        },
        ..config(1, 2, tiny_rstr())
    };
    let err = end_to_end_error(&unshared, 7);
    assert!(err < 1e-3, "unshared cnn: {err}");
}

#[test]
fn log_alpha_gradient_of_one_block() {
    let sys = Arc::new(SystemModel::build(&geometry(8, 2.0)).unwrap());
    let (truth, y, b) = scan(&sys, 1e3, 8);
    let cfg = config(
        1,
        1,
        RegularizerConfig {
            channels: 2,
            n_heads: 1,
            ..tiny_rstr()
        },
    );
    let mut model =
        TransEmModel::init_with(&cfg, InitMode::Generic, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
    let ctx = EmContext::new(sys.clone(), 1, y, b, cfg.epsilon_em).unwrap();
    let loss_at = |model: &TransEmModel| {
        let g = Graph::new();
        let bound = model.bind(&g, true);
        let x0 = g.constant(Tensor::new(&[1, 8, 8], initial_image(&sys).into_values()).unwrap());
        let out = forward(model, &bound, &ctx, x0).unwrap();
        let loss = out
            .mse(
                g.constant(Tensor::new(&[1, 8, 8], truth.values().to_vec()).unwrap()),
                None,
            )
            .unwrap();
        g.backward(loss).unwrap();
        (
            loss.value().data()[0],
            bound.log_alpha[0].grad().unwrap().data()[0],
        )
    };
    let (_, analytic) = loss_at(&model);
    let h = 1e-6;
    model.log_alpha[0] = h;
    let plus = loss_at(&model).0;
    model.log_alpha[0] = -h;
    let minus = loss_at(&model).0;
    let numeric = (plus - minus) / (2.0 * h);
    assert!(
        (analytic - numeric).abs() / numeric.abs() < 1e-4,
        "{analytic} vs {numeric}"
    );
}

#[test]
fn em_only_model_equals_osem_bitwise() {
    let sys = SystemModel::build(&geometry(16, 3.0)).unwrap();
    let (_, y, b) = scan(&sys, 5e3, 9);
    let cfg = TransEmConfig {
        em_only: true,
        ..config(10, 6, tiny_rstr())
    };
    let model = TransEmModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ours = reconstruct(&model, &sys, &y, &b).unwrap();
    let osem =
        osem_reconstruct(&sys, &y, &b, &ReconConfig::default(), &initial_image(&sys)).unwrap();
    assert_eq!(ours, osem);
}

#[test]
fn identity_regularizer_approaches_osem_as_alpha_grows() {
    let sys = SystemModel::build(&geometry(16, 3.0)).unwrap();
    let (_, y, b) = scan(&sys, 5e3, 10);
    let osem = osem_reconstruct(
        &sys,
        &y,
        &b,
        &ReconConfig {
            n_iterations: 2,
            ..ReconConfig::default()
        },
        &initial_image(&sys),
    )
    .unwrap();
    let mut model = TransEmModel::init(
        &config(2, 6, tiny_rstr()),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let mut last = f64::INFINITY;
    for log_alpha in [0.0, 5.0, 10.0, 25.0] {
        model.log_alpha.iter_mut().for_each(|a| *a = log_alpha);
        let x = reconstruct(&model, &sys, &y, &b).unwrap();
        assert!(x.values().iter().all(|&v| v >= 0.0));
        assert!(x.sum() <= 2.0 * y.sum());
        let dev = x
            .values()
            .iter()
            .zip(osem.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < last, "alpha e^{log_alpha}: {dev} vs {last}");
        last = dev;
    }
    assert!(last < 1e-6 * osem.max());
}

#[test]
fn block_fixed_point_with_consistent_data() {
    let sys = Arc::new(SystemModel::build(&geometry(8, 2.0)).unwrap());
    let x = smooth_phantom(8).scaled(3.0);
    let mut y = sys.forward_project(&x).unwrap();
    let b = Sinogram::filled(12, 12, 0.5);
    y.values_mut()
        .iter_mut()
        .zip(b.values())
        .for_each(|(v, bb)| *v += bb);
    let ctx = EmContext::new(sys.clone(), 3, y, b, 1e-12).unwrap();
    let reg = Regularizer::init(
        &tiny_rstr(),
        InitMode::Identity,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for k in 0..3 {
        let out = transem_block(&x, &ctx, k, &reg, 0.7).unwrap();
        for (a, b) in out.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b), "{a} vs {b}");
        }
    }
}

#[test]
fn adam_matches_hand_rolled_steps() {
    // f(θ) = θ², g = 2θ, lr = 0.1, from θ = 1.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let mut theta = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut expected = Vec::new();
    for t in 1..=3 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        expected.push(theta);
    }
    // First step moves by lr·sign(g) up to ε: θ₁ = 1 − 0.1·2/(2 + 1e-8).
    assert!((expected[0] - (1.0 - 0.2 / (2.0 + 1e-8))).abs() < 1e-15);

    let mut params = vec![Tensor::scalar(1.0)];
    let mut state = AdamState::new(&params);
    for (t, want) in expected.iter().enumerate() {
        let grads = vec![params[0].map(|p| 2.0 * p)];
        adam_step(&mut params, &grads, &mut state, lr, &AdamConfig::default()).unwrap();
        assert_eq!(state.t, t as u64 + 1);
        assert!((params[0].data()[0] - want).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut params = vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()];
    let mut state = AdamState::new(&params);
    let grads = vec![Tensor::new(&[3], vec![3.0, -0.2, 1e3]).unwrap()];
    let lr = 1e-3;
    adam_step(&mut params, &grads, &mut state, lr, &AdamConfig::default()).unwrap();
    for ((p, p0), g) in params[0]
        .data()
        .iter()
        .zip([0.5, -1.0, 2.0])
        .zip(grads[0].data())
    {
        assert!((p0 - p - lr * g.signum()).abs() < 1e-6 * lr);
    }
    let before = params.clone();
    let (m0, v0) = (state.m[0].clone(), state.v[0].clone());
    adam_step(
        &mut params,
        &[Tensor::zeros(&[3])],
        &mut state,
        lr,
        &AdamConfig::default(),
    )
    .unwrap();
    for j in 0..3 {
        assert!((state.m[0].data()[j] - 0.9 * m0.data()[j]).abs() < 1e-15);
        assert!((state.v[0].data()[j] - 0.999 * v0.data()[j]).abs() < 1e-15);
    }
    // Zero gradient with fresh moments leaves parameters unchanged.
    let mut fresh = AdamState::new(&before);
    let mut p = before.clone();
    adam_step(
        &mut p,
        &[Tensor::zeros(&[3])],
        &mut fresh,
        lr,
        &AdamConfig::default(),
    )
    .unwrap();
    assert_eq!(p, before);
    assert!(adam_step(
        &mut p,
        &[Tensor::zeros(&[2])],
        &mut fresh,
        lr,
        &AdamConfig::default()
    )
    .is_err());
}

fn training_sample(sys: &SystemModel, id: usize, seed: u64) -> ScanSample {
    let (truth, y, b) = scan(sys, 3e3, seed);
    let (_, y_hi, b_hi) = scan(sys, 3e4, seed + 1000);
    let label = make_label(&y_hi, &b_hi, sys).unwrap().scaled(0.1);
    let n = sys.geometry().image_size;
    ScanSample {
        sample_id: id,
        phantom_id: id,
        slice: 0,
        split: Split::Train,
        label,
        y_low: y,
        b,
        true_phantom: truth,
        lesion_mask: Image2D::zeros(n),
        count_level: 3e3,
    }
}

fn small_setup() -> (Arc<SystemModel>, TransEmModel, Vec<ScanSample>) {
    let sys = Arc::new(SystemModel::build(&geometry(16, 3.0)).unwrap());
    let model = TransEmModel::init(
        &config(1, 3, tiny_rstr()),
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let samples = (0..3)
        .map(|i| training_sample(&sys, i, 20 + i as u64))
        .collect();
    (sys, model, samples)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (sys, model, samples) = small_setup();
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.0,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(model.clone(), &sys, &samples, &[], &cfg, None).unwrap();
    assert_eq!(out.last, model);
    assert_eq!(out.log.iter().filter(|r| r.train_loss.is_some()).count(), 4);
}

#[test]
fn overfits_a_single_sample() {
    let (sys, _, samples) = small_setup();
    let one = vec![samples[0].clone()];
    let rc = RegularizerConfig {
        channels: 8,
        ..tiny_rstr()
    };
    let model = TransEmModel::init(&config(2, 3, rc), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1.2e-2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(model, &sys, &one, &[], &cfg, None).unwrap();
    let losses: Vec<f64> = out.log.iter().filter_map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 50);
    for w in losses.windows(2) {
        assert!(w[1] <= 1.05 * w[0], "uptick {} -> {}", w[0], w[1]);
    }
    assert!(
        losses[49] <= 0.5 * losses[0],
        "{} -> {}",
        losses[0],
        losses[49]
    );
}

#[test]
fn training_is_deterministic_and_keeps_best_checkpoint() {
    let (sys, model, samples) = small_setup();
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 3e-3,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train(
        model.clone(),
        &sys,
        &samples[..2],
        &samples[2..],
        &cfg,
        None,
    )
    .unwrap();
    let b = train(model, &sys, &samples[..2], &samples[2..], &cfg, None).unwrap();
    assert_eq!(a.log_csv(), b.log_csv());
    assert_eq!(a.last, b.last);
    let best = a
        .log
        .iter()
        .filter_map(|r| r.val_psnr)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_val_psnr, Some(best));
    assert!(a.log_csv().starts_with("step,train_loss,val_psnr\n"));
}

#[test]
fn inference_is_a_pure_function_of_one_sample() {
    let (sys, model, samples) = small_setup();
    let alone = reconstruct(&model, &sys, &samples[1].y_low, &samples[1].b).unwrap();
    let _ = reconstruct(&model, &sys, &samples[0].y_low, &samples[0].b).unwrap();
    let again = reconstruct(&model, &sys, &samples[1].y_low, &samples[1].b).unwrap();
    assert_eq!(alone, again);
}

#[test]
fn overflowing_step_size_is_a_numeric_error() {
    let (sys, mut model, samples) = small_setup();
    for la in [800.0, -800.0] {
        model.log_alpha[1] = la;
        let err = reconstruct(&model, &sys, &samples[0].y_low, &samples[0].b).unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)), "{err}");
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for shared in [true, false] {
        let cfg = TransEmConfig {
            shared_weights: shared,
            ..config(1, 2, tiny_rstr())
        };
        let mut model =
            TransEmModel::init_with(&cfg, InitMode::Generic, &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        model.log_alpha = vec![0.1f64.ln(), 1.0 / 3.0];
        let path = dir.path().join(format!("m{shared}.tem1"));
        model.save(&path).unwrap();
        let back = TransEmModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes().unwrap(), model.to_bytes().unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert!(TransEmModel::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TransEmModel::from_bytes(&bad, Path::new("x")).is_err());
    }
}
