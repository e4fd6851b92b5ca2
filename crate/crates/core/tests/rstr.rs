use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transem_core::params::ParamSet;
use transem_core::rstr::{
    rstr_forward, stl_forward, window_merge, window_msa, window_partition, BoundParams, InitMode,
    Regularizer, RegularizerConfig, RegularizerKind, WindowLayout,
};
use transem_core::{CoreError, Image2D};
use transem_tensor::gradcheck::check_gradients;
use transem_tensor::{Graph, Tensor};

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny(kind: RegularizerKind) -> RegularizerConfig {
    RegularizerConfig {
        kind,
        channels: 4,
        n_heads: 2,
        mlp_ratio: 2,
        window_size: 2,
        ..RegularizerConfig::default()
    }
}

fn generic(config: &RegularizerConfig, seed: u64) -> Regularizer {
    Regularizer::init(
        config,
        InitMode::Generic,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn partition_roundtrip(
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    shifted: bool,
    seed: u64,
) -> (Tensor, Tensor) {
    let x = random_tensor(&[c, h, w], &mut ChaCha8Rng::seed_from_u64(seed));
    let g = Graph::new();
    let layout = WindowLayout::new(c, h, w, m, shifted);
    let tokens = window_partition(g.constant(x.clone()), &layout).unwrap();
    let back = window_merge(tokens, &layout).unwrap();
    (x, (*back.value()).clone())
}

#[test]
fn partition_shapes() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[3, 8, 8], |i| i as f64));
    let tokens = window_partition(x, &WindowLayout::new(3, 8, 8, 4, false)).unwrap();
    assert_eq!(tokens.shape(), vec![4, 16, 3]);
    // token 5 of window 1 is pixel (1, 4 + 1)
    let t = tokens.value();
    for ch in 0..3 {
        assert_eq!(t.data()[(16 + 5) * 3 + ch], (ch * 64 + 8 + 5) as f64);
    }
    let one = window_partition(x, &WindowLayout::new(3, 8, 8, 8, false)).unwrap();
    assert_eq!(one.shape(), vec![1, 64, 3]);
}

#[test]
fn shifted_partition_rolls_the_grid() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
    let tokens = window_partition(x, &WindowLayout::new(1, 4, 4, 2, true)).unwrap();
    // first window starts at pixel (1, 1) after a shift of M/2 = 1
    assert_eq!(&tokens.value().data()[..4], &[5.0, 6.0, 9.0, 10.0]);
    // last window wraps around to the first row and column
    assert_eq!(&tokens.value().data()[12..], &[15.0, 12.0, 3.0, 0.0]);
}

#[test]
fn merge_inverts_partition_with_padding() {
    for (h, w, m, shifted) in [
        (8, 8, 4, false),
        (7, 5, 4, false),
        (6, 9, 4, true),
        (3, 3, 2, true),
        (5, 5, 5, false),
    ] {
        let (x, back) = partition_roundtrip(2, h, w, m, shifted, 1);
        assert_eq!(x, back, "{h}x{w} M={m} shift={shifted}");
    }
}

proptest! {
    #[test]
    fn merge_partition_identity(c in 1usize..4, h in 1usize..10, w in 1usize..10, m in 1usize..5, shifted: bool, seed: u64) {
        let (x, back) = partition_roundtrip(c, h, w, m, shifted, seed);
        prop_assert_eq!(x, back);
    }
}

fn msa_params<'g>(g: &'g Graph, c: usize, rng: &mut ChaCha8Rng) -> (BoundParams<'g>, Vec<Tensor>) {
    let names = [
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.proj.weight",
        "attn.proj.bias",
    ];
    let tensors: Vec<Tensor> = names
        .iter()
        .map(|n| {
            let shape = if n.ends_with("weight") {
                vec![c, c]
            } else {
                vec![c]
            };
            random_tensor(&shape, rng)
        })
        .collect();
    let vars = tensors.iter().map(|t| g.constant(t.clone())).collect();
    (
        BoundParams::from_vars(names.iter().map(|s| s.to_string()).collect(), vars),
        tensors,
    )
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let c = b.numel();
    (0..c)
        .map(|o| {
            b.data()[o]
                + (0..x.len())
                    .map(|i| x[i] * w.data()[i * c + o])
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn window_msa_matches_direct_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new();
    let (p, w) = msa_params(&g, 2, &mut rng);
    let x = random_tensor(&[2, 4, 2], &mut rng);
    let out = window_msa(g.constant(x.clone()), &p, 1).unwrap().value();
    for win in 0..2 {
        let tok = |t: usize| &x.data()[(win * 4 + t) * 2..(win * 4 + t) * 2 + 2];
        let q: Vec<Vec<f64>> = (0..4).map(|t| affine(tok(t), &w[0], &w[1])).collect();
        let k: Vec<Vec<f64>> = (0..4).map(|t| affine(tok(t), &w[2], &w[3])).collect();
        let v: Vec<Vec<f64>> = (0..4).map(|t| affine(tok(t), &w[4], &w[5])).collect();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut o = [0.0; 2];
            for j in 0..4 {
                let a = logits[j].exp() / z;
                o[0] += a * v[j][0];
                o[1] += a * v[j][1];
            }
            let expect = affine(&o, &w[6], &w[7]);
            for ch in 0..2 {
                let got = out.data()[(win * 4 + i) * 2 + ch];
                assert!(
                    (got - expect[ch]).abs() < 1e-12,
                    "window {win} token {i}: {got} vs {}",
                    expect[ch]
                );
            }
        }
    }
}

#[test]
fn single_token_windows_reduce_to_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    let (p, w) = msa_params(&g, 4, &mut rng);
    let x = random_tensor(&[3, 1, 4], &mut rng);
    let out = window_msa(g.constant(x.clone()), &p, 2).unwrap().value();
    for t in 0..3 {
        let v = affine(&x.data()[t * 4..t * 4 + 4], &w[4], &w[5]);
        let expect = affine(&v, &w[6], &w[7]);
        for ch in 0..4 {
            assert!((out.data()[t * 4 + ch] - expect[ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_windows_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let (p, _) = msa_params(&g, 4, &mut rng);
    let x = random_tensor(&[3, 4, 4], &mut rng);
    let perm = [2, 0, 1];
    let mut xp = Vec::new();
    for &w in &perm {
        xp.extend_from_slice(&x.data()[w * 16..(w + 1) * 16]);
    }
    let out = window_msa(g.constant(x), &p, 2).unwrap().value();
    let outp = window_msa(g.constant(Tensor::new(&[3, 4, 4], xp).unwrap()), &p, 2)
        .unwrap()
        .value();
    for (i, &w) in perm.iter().enumerate() {
        assert_eq!(
            &outp.data()[i * 16..(i + 1) * 16],
            &out.data()[w * 16..(w + 1) * 16]
        );
    }
}

#[test]
fn stl_changes_stay_inside_their_window() {
    let config = tiny(RegularizerKind::Rstr);
    let reg = generic(&config, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[4, 6, 6], &mut rng);
    let mut y = x.clone();
    y.data_mut()[6 + 1] += 0.7; // channel 0, pixel (1, 1): window (0, 0)
    let g = Graph::new();
    let p = reg.bind(&g, false);
    let a = stl_forward(g.constant(x), &p, &config).unwrap().value();
    let b = stl_forward(g.constant(y), &p, &config).unwrap().value();
    for ch in 0..4 {
        for r in 0..6 {
            for c in 0..6 {
                let i = ch * 36 + r * 6 + c;
                if r < 2 && c < 2 {
                    continue;
                }
                assert_eq!(a.data()[i], b.data()[i], "pixel ({r},{c}) changed");
            }
        }
    }
    assert_ne!(a.data()[7], b.data()[7]);
}

#[test]
fn zero_output_projections_make_stl_identity() {
    let config = tiny(RegularizerKind::Rstr);
    let mut reg = generic(&config, 7);
    for name in [
        "attn.proj.weight",
        "attn.proj.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ] {
        let t = reg.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let x = random_tensor(&[4, 5, 7], &mut ChaCha8Rng::seed_from_u64(7));
    let g = Graph::new();
    let p = reg.bind(&g, false);
    assert_eq!(
        *stl_forward(g.constant(x.clone()), &p, &config)
            .unwrap()
            .value(),
        x
    );
}

#[test]
fn zero_last_conv_makes_regularizers_identity() {
    for kind in [RegularizerKind::Rstr, RegularizerKind::Cnn] {
        let config = tiny(kind);
        let mut reg = generic(&config, 8);
        let last = if kind == RegularizerKind::Rstr {
            "conv_out"
        } else {
            "conv3"
        };
        for suffix in ["weight", "bias"] {
            let t = reg.params.get_mut(&format!("{last}.{suffix}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let x = Image2D::new(9, (0..81).map(|v| (v as f64).cos()).collect()).unwrap();
        assert_eq!(reg.apply(&x).unwrap(), x);
        let y = Regularizer::init(
            &RegularizerConfig {
                channels: 8,
                ..config
            },
            InitMode::Generic,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
        .apply(&Image2D::filled(64, 1.0))
        .unwrap();
        assert_eq!(y.size(), 64);
    }
}

#[test]
fn shape_errors_are_reported() {
    let config = tiny(RegularizerKind::Rstr);
    let reg = generic(&config, 9);
    let g = Graph::new();
    let p = reg.bind(&g, false);
    assert!(rstr_forward(g.constant(Tensor::zeros(&[2, 4, 4])), &p, &config).is_err());
}

/// Gradient check of `Σ w ⊙ f(x)` wrt the input and every parameter.
fn check_regularizer(config: &RegularizerConfig, size: usize, seed: u64, stl_only: bool) -> f64 {
    let reg = generic(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let channels = if stl_only { config.channels } else { 1 };
    let x = random_tensor(&[channels, size, size], &mut rng);
    let weights = random_tensor(&[channels, size, size], &mut rng);
    let names: Vec<String> = reg.params.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(reg.params.tensors().cloned());
    let report = check_gradients(&inputs, 1e-5, 1e-6, |g, vars| {
        let p = BoundParams::from_vars(names.clone(), vars[1..].to_vec());
        let out = if stl_only {
            stl_forward(vars[0], &p, config)?
        } else {
            reg.forward(vars[0], &p)?
        };
        Ok::<_, CoreError>(out.mul(g.constant(weights.clone()))?.sum())
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn stl_gradients_match_finite_differences() {
    let base = tiny(RegularizerKind::Rstr);
    for config in [
        base.clone(),
        RegularizerConfig {
            shift_windows: true,
            relative_position_bias: true,
            ..base.clone()
        },
    ] {
        let err = check_regularizer(&config, 3, 10, true);
        assert!(err < 1e-4, "{config:?}: {err}");
    }
}

#[test]
fn rstr_gradients_match_finite_differences() {
    let base = tiny(RegularizerKind::Rstr);
    for config in [
        base.clone(),
        RegularizerConfig {
            shift_windows: true,
            relative_position_bias: true,
            outer_residual: false,
            ..base
        },
    ] {
        let err = check_regularizer(&config, 4, 11, false);
        assert!(err < 1e-4, "{config:?}: {err}");
    }
}

#[test]
fn rstr_mse_gradients_match_finite_differences() {
    let config = tiny(RegularizerKind::Rstr);
    let reg = generic(&config, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&[1, 4, 4], &mut rng);
    let target = random_tensor(&[1, 4, 4], &mut rng);
    let names: Vec<String> = reg.params.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(reg.params.tensors().cloned());
    let report = check_gradients(&inputs, 1e-5, 1e-6, |g, vars| {
        let p = BoundParams::from_vars(names.clone(), vars[1..].to_vec());
        let out = rstr_forward(vars[0], &p, &config)?;
        Ok::<_, CoreError>(out.mse(g.constant(target.clone()), None)?)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn residual_cnn_gradients_match_finite_differences() {
    let err = check_regularizer(&tiny(RegularizerKind::Cnn), 4, 13, false);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in [RegularizerKind::Rstr, RegularizerKind::Cnn] {
        let config = RegularizerConfig {
            relative_position_bias: kind == RegularizerKind::Rstr,
            ..tiny(kind)
        };
        let reg = generic(&config, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = Graph::new();
        let p = reg.bind(&g, true);
        let x = g.constant(random_tensor(&[1, 6, 6], &mut rng));
        let target = g.constant(random_tensor(&[1, 6, 6], &mut rng));
        let loss = reg.forward(x, &p).unwrap().mse(target, None).unwrap();
        g.backward(loss).unwrap();
        for (name, v) in p.names().iter().zip(&p.vars) {
            let grad = v
                .grad()
                .unwrap_or_else(|| panic!("{name} received no gradient"));
            assert!(
                grad.data().iter().any(|&d| d != 0.0),
                "{name} gradient is zero"
            );
        }
    }
}

#[test]
fn forward_is_deterministic_and_checkpoints_round_trip() {
    let config = RegularizerConfig {
        relative_position_bias: true,
        ..tiny(RegularizerKind::Rstr)
    };
    let reg = generic(&config, 15);
    let x = Image2D::new(8, (0..64).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();
    assert_eq!(reg.apply(&x).unwrap(), reg.apply(&x).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.rstr");
    reg.params.save(&path).unwrap();
    let loaded = Regularizer::from_params(&config, ParamSet::load(&path).unwrap()).unwrap();
    assert_eq!(loaded, reg);
    assert_eq!(loaded.apply(&x).unwrap(), reg.apply(&x).unwrap());
}
