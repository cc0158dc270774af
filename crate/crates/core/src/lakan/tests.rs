use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ndiff::{sigmoid, silu};
use crate::params::gradcheck_params;

fn landmarks(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet {
    LandmarkSet::new((0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap()
}

fn small_config(channels: usize) -> LakanConfig {
    LakanConfig {
        pos_freqs: 3,
        guide_dim: 4,
        mlp_hidden: 6,
        num_landmarks: 5,
        ..LakanConfig::new(channels)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Overwrites every parameter with small random values.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, random_tensor(rng, &shape, scale)).unwrap();
    }
}

#[test]
fn pos_embed_at_origin_and_corner() {
    let l = LandmarkSet::new(vec![[0.0, 0.0]]).unwrap();
    let e: Vec<f64> = pos_embed(&l, 4);
    assert_eq!(e.len(), 16);
    for pair in e.chunks(2) {
        assert_eq!(pair, &[0.0, 1.0]);
    }
    let l = LandmarkSet::new(vec![[1.0, 0.0]]).unwrap();
    let e: Vec<f64> = pos_embed(&l, 4);
    // x slots, band 0
    assert!(e[0].abs() < 1e-15);
    assert_eq!(e[1], -1.0);
}

#[test]
fn pos_embed_matches_scalar_oracle() {
    let l = LandmarkSet::new(vec![[0.25, 0.5]]).unwrap();
    let e: Vec<f64> = pos_embed(&l, 2);
    let pi = std::f64::consts::PI;
    let want = [
        (pi * 0.25).sin(), (pi * 0.25).cos(), (2.0 * pi * 0.25).sin(), (2.0 * pi * 0.25).cos(),
        (pi * 0.5).sin(), (pi * 0.5).cos(), (2.0 * pi * 0.5).sin(), (2.0 * pi * 0.5).cos(),
    ];
    for (a, b) in e.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn landmark_outside_unit_square_is_rejected() {
    let err = LandmarkSet::new(vec![[0.1, 0.2], [0.5, 1.2]]).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(err.to_string().contains("landmark 1"));
}

#[test]
fn config_validation() {
    assert!(LakanConfig::new(8).validate().is_ok());
    let bad = LakanConfig { dyn_kan_dims: vec![8, 4], ..LakanConfig::new(8) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = LakanConfig { pooled_size: 0, ..LakanConfig::new(8) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert!(matches!("nonsense".parse::<FusionMode>(), Err(Error::Config(_))));
    for m in FusionMode::ALL {
        assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
    }
}

#[test]
fn zero_heads_generate_zero_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(3), &mut rng).unwrap();
    let Transform::Dynamic(layers) = &m.transform else { panic!() };
    store.set(layers[0].scaler_head.bias, Tensor::zeros([9])).unwrap();
    for _ in 0..3 {
        let l = landmarks(&mut rng, 5);
        let mut g = Graph::new(&store);
        let params = m.generate_params(&mut g, &l).unwrap();
        let (coeffs, scaler) = params[0];
        assert_eq!(g.shape(coeffs), &[3, 3, 8]);
        assert_eq!(g.shape(scaler), &[3, 3]);
        assert!(g.value(coeffs).data().iter().chain(g.value(scaler).data()).all(|&v| v == 0.0));
    }
}

#[test]
fn generated_parameters_are_instance_specific() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(3), &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let (a, b) = (landmarks(&mut rng, 5), landmarks(&mut rng, 5));
    let mut g = Graph::new(&store);
    let pa = m.generate_params(&mut g, &a).unwrap()[0];
    let pb = m.generate_params(&mut g, &b).unwrap()[0];
    assert_ne!(g.value(pa.0), g.value(pb.0));
    assert_ne!(g.value(pa.1), g.value(pb.1));
}

#[test]
fn landmark_count_mismatch_is_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(3), &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let l = landmarks(&mut rng, 6);
    assert!(matches!(m.generate_params(&mut g, &l), Err(Error::Dimension(_))));
    let x = g.constant(Tensor::zeros([3, 4, 4]));
    assert!(matches!(m.forward(&mut g, x, &l), Err(Error::Dimension(_))));
}

#[test]
fn generation_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(2), &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let l = landmarks(&mut rng, 5);
    let (first, second) = m.guide.unwrap();
    let ids = [first.weight, first.bias, second.weight, second.bias];
    let report = gradcheck_params(
        &store,
        &ids,
        |g| {
            let (coeffs, _) = m.generate_params(g, &l)?[0];
            let sq = g.mul(coeffs, coeffs)?;
            Ok(g.sum(sq))
        },
        1e-5,
        Some(40),
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn neutral_start_scales_features_by_one_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(4), &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[4, 8, 8], 3.0);
    let l = landmarks(&mut rng, 5);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let t = m.forward_traced(&mut g, xv, &l).unwrap();
    assert!(g.value(t.gate).data().iter().all(|&v| v == 0.5));
    assert!(g.value(t.output).bitwise_eq(&x.map(|v| v * 1.5)));
}

#[test]
fn addition_with_half_gate_adds_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let cfg = LakanConfig { fusion: FusionMode::Addition, ..small_config(2) };
    let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[2, 4, 6], 1.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, xv, &landmarks(&mut rng, 5)).unwrap();
    assert!(g.value(y).bitwise_eq(&x.map(|v| v + 0.5)));
}

/// Textbook recursion, independent of the production basis code.
fn naive_basis(grid: &SplineGrid, i: usize, k: usize, x: f64) -> f64 {
    let t = grid.knots();
    if k == 0 {
        return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
    }
    (x - t[i]) / (t[i + k] - t[i]) * naive_basis(grid, i, k - 1, x)
        + (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * naive_basis(grid, i + 1, k - 1, x)
}

fn naive_linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|o| b.data()[o] + (0..n_in).map(|i| x[i] * w.at(&[i, o])).sum::<f64>())
        .collect()
}

/// Step-by-step recomputation of the full module with plain loops.
fn naive_lakan(m: &LakanModule, store: &ParamStore<f64>, x: &Tensor<f64>, l: &LandmarkSet) -> Tensor<f64> {
    let cfg = &m.config;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = cfg.pooled_size;
    let (bh, bw) = (h / s, w / s);
    // pool (divisible sizes only)
    let mut pooled = vec![vec![0.0; c]; s * s];
    for ch in 0..c {
        for py in 0..s {
            for px in 0..s {
                let mut acc = 0.0;
                for y in py * bh..(py + 1) * bh {
                    for xx in px * bw..(px + 1) * bw {
                        acc += x.at(&[ch, y, xx]);
                    }
                }
                pooled[py * s + px][ch] = (acc / (bh * bw) as f64).tanh();
            }
        }
    }
    // guidance
    let mut embed = Vec::new();
    for p in l.coords() {
        for &cc in p {
            for j in 0..cfg.pos_freqs {
                let a = 2f64.powi(j as i32) * std::f64::consts::PI * cc as f64;
                embed.push(a.sin());
                embed.push(a.cos());
            }
        }
    }
    let (g0, g1) = m.guide.unwrap();
    let hidden: Vec<f64> = naive_linear(&embed, store.get(g0.weight), store.get(g0.bias)).into_iter().map(silu).collect();
    let v = naive_linear(&hidden, store.get(g1.weight), store.get(g1.bias));
    let Transform::Dynamic(layers) = &m.transform else { panic!() };
    let d = &layers[0];
    let coeffs = naive_linear(&v, store.get(d.coeff_head.weight), store.get(d.coeff_head.bias));
    let scaler = naive_linear(&v, store.get(d.scaler_head.weight), store.get(d.scaler_head.bias));
    let wb = store.get(d.layer.base_weight);
    let nb = cfg.grid.n_basis();
    // KAN + sigmoid per pooled position
    let mut gate = vec![0.0; c * s * s];
    for (pos, vec_in) in pooled.iter().enumerate() {
        for o in 0..c {
            let mut acc = 0.0;
            for i in 0..c {
                let xi = vec_in[i];
                let spline: f64 = (0..nb).map(|j| coeffs[(o * c + i) * nb + j] * naive_basis(&cfg.grid, j, 3, xi)).sum();
                acc += wb.at(&[o, i]) * silu(xi) + scaler[o * c + i] * spline;
            }
            gate[o * s * s + pos] = sigmoid(acc);
        }
    }
    // upsample + gating
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let gv = gate[ch * s * s + (y / bh) * s + xx / bw];
                out[(ch * h + y) * w + xx] = x.at(&[ch, y, xx]) * (1.0 + gv);
            }
        }
    }
    Tensor::new([c, h, w], out).unwrap()
}

#[test]
fn forward_matches_naive_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(8), &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.3);
    let x = random_tensor(&mut rng, &[8, 8, 8], 2.0);
    let l = landmarks(&mut rng, 5);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, xv, &l).unwrap();
    let want = naive_lakan(&m, &store, &x, &l);
    assert!(g.value(y).max_abs_diff(&want) < 1e-12, "{}", g.value(y).max_abs_diff(&want));
}

#[test]
fn ablating_landmarks_ignores_them() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let cfg = LakanConfig { ablate_landmarks: true, ..small_config(3) };
    let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
    assert!(m.guide.is_none());
    randomize(&mut store, &mut rng, 0.5);
    let x = random_tensor(&mut rng, &[3, 8, 8], 1.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let a = m.forward(&mut g, xv, &landmarks(&mut rng, 5)).unwrap();
    let b = m.forward(&mut g, xv, &landmarks(&mut rng, 5)).unwrap();
    assert!(g.value(a).bitwise_eq(g.value(b)));
    assert!(store.iter().all(|(name, _)| !name.contains("guide") && !name.contains("head")));
}

#[test]
fn ablated_variants_start_neutral() {
    for (ablate_kan, ablate_landmarks) in [(true, false), (false, true), (true, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let cfg = LakanConfig { ablate_kan, ablate_landmarks, ..small_config(3) };
        let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[3, 8, 8], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let t = m.forward_traced(&mut g, xv, &landmarks(&mut rng, 5)).unwrap();
        assert!(g.value(t.gate).data().iter().all(|&v| v == 0.5));
        assert!(g.value(t.output).bitwise_eq(&x.map(|v| v * 1.5)));
    }
}

#[test]
fn gate_is_bounded_and_every_mode_keeps_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for fusion in FusionMode::ALL {
        for (ablate_kan, ablate_landmarks) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut store = ParamStore::<f64>::new();
            let cfg = LakanConfig { fusion, ablate_kan, ablate_landmarks, ..small_config(4) };
            let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
            randomize(&mut store, &mut rng, 1.0);
            let x = random_tensor(&mut rng, &[4, 7, 5], 3.0);
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let t = m.forward_traced(&mut g, xv, &landmarks(&mut rng, 5)).unwrap();
            assert_eq!(g.shape(t.output), &[4, 7, 5], "{fusion}");
            assert!(g.value(t.gate).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            if fusion == FusionMode::Gating {
                for (o, i) in g.value(t.output).data().iter().zip(x.data()) {
                    assert!(o.abs() <= 2.0 * i.abs());
                }
            }
        }
    }
}

#[test]
fn channel_mismatch_is_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let m = LakanModule::new(&mut store, "m", small_config(4), &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros([3, 8, 8]));
    assert!(matches!(m.forward(&mut g, x, &landmarks(&mut rng, 5)), Err(Error::Dimension(_))));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for fusion in FusionMode::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let cfg = LakanConfig { fusion, ..small_config(3) };
        let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.4);
        let x = random_tensor(&mut rng, &[3, 8, 8], 1.5);
        let l = landmarks(&mut rng, 5);
        let weights = random_tensor(&mut rng, &[3, 8, 8], 1.0);
        let ids: Vec<_> = store.ids().collect();
        let report = gradcheck_params(
            &store,
            &ids,
            |g| {
                let xv = g.constant(x.clone());
                let y = m.forward(g, xv, &l)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            1e-5,
            Some(12),
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{fusion}: {report:?}");
    }
}

#[test]
fn multi_layer_dynamic_kan() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let cfg = LakanConfig { dyn_kan_dims: vec![3, 5, 3], ..small_config(3) };
    let m = LakanModule::new(&mut store, "m", cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.4);
    let l = landmarks(&mut rng, 5);
    let mut g = Graph::new(&store);
    let params = m.generate_params(&mut g, &l).unwrap();
    assert_eq!(g.shape(params[0].0), &[5, 3, 8]);
    assert_eq!(g.shape(params[1].0), &[3, 5, 8]);
    let x = g.constant(random_tensor(&mut rng, &[3, 8, 8], 1.0));
    let y = m.forward(&mut g, x, &l).unwrap();
    assert_eq!(g.shape(y), &[3, 8, 8]);
}
