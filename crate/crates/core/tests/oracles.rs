mod common;

use bm_core::attack::{deepfool, AttackConfig, DeepfoolNorm};
use bm_core::data::{gen_neighbors, gen_unlabeled, load_mnist, mu_pair_flat, LabeledSet, MnistOptions, NoiseConfig};
use bm_core::loss::input_gradient_reg;
use bm_core::model::{mlp_spec, Model};
use bm_core::rng::RngStream;
use bm_core::tensor::{Activation, Tensor};
use bm_core::train::{adam_step, sgd_step};

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn deepfool_reaches_linear_boundaries_in_one_step() {
    let cases = common::deepfool_oracle::run(50, 3);
    assert_eq!(cases.len(), 50);
    for c in &cases {
        assert!((c.ratio - 1.0).abs() < 0.01, "{c:?}");
        assert!(c.flipped, "{c:?}");
        assert_eq!(c.iterations, 1, "{c:?}");
    }
}

#[test]
fn binary_deepfool_step_is_the_projection_onto_the_hyperplane() {
    let mut m = Model::new(mlp_spec(&[2, 2], Activation::Tanh).unwrap(), 0).unwrap();
    // logits: z0 = 0, z1 = x0 + 2·x1 − 1
    m.params_mut()[0].data_mut().copy_from_slice(&[0.0, 1.0, 0.0, 2.0]);
    m.params_mut()[1].data_mut().copy_from_slice(&[0.0, -1.0]);
    let x = [2.0, 1.0];
    let cfg = AttackConfig::deepfool(DeepfoolNorm::L2);
    let r = deepfool(&m, &x, None, &cfg).unwrap();
    let f = 2.0 + 2.0 - 1.0;
    let s = (1.0 + cfg.deepfool_overshoot) * (f + 1e-4) / 5.0;
    let expect = [-s, -2.0 * s];
    for (a, b) in r.delta.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{:?}", r.delta);
    }
    assert!(r.success);
}

#[test]
fn mu_pair_matches_the_gaussian_pair_distance() {
    // E||X − Y|| for X, Y ~ N(0, I₂) is √π.
    let mut rng = RngStream::new(5, "mu-oracle", 0);
    let pts: Vec<f64> = (0..2000).map(|_| rng.gaussian()).collect();
    let mu = mu_pair_flat(&pts, 2, 2000, &mut rng).unwrap();
    let expect = std::f64::consts::PI.sqrt();
    assert!((mu / expect - 1.0).abs() < 0.02, "μ = {mu}");
}

#[test]
fn mu_pair_subsamples_above_the_cap() {
    let mut rng = RngStream::new(6, "mu-oracle", 0);
    let pts: Vec<f64> = (0..6000).map(|_| rng.gaussian()).collect();
    let mu = mu_pair_flat(&pts, 2, 500, &mut rng).unwrap();
    assert!((mu / std::f64::consts::PI.sqrt() - 1.0).abs() < 0.05, "μ = {mu}");
}

#[test]
fn unlabeled_offspring_have_the_requested_spread() {
    let x = LabeledSet::new(vec![2], vec![1.0, -2.0], vec![0], 2).unwrap();
    let cfg = NoiseConfig {
        sigma_u: 0.7,
        sigma_b: 0.07,
        n_u: 50_000,
        n_b: 1,
    };
    let u = gen_unlabeled(&x, &cfg, &mut RngStream::new(1, "unlabeled", 0)).unwrap();
    let offsets: Vec<f64> = u.points().iter().enumerate().map(|(i, v)| v - x.point(0)[i % 2]).collect();
    let sd = sample_std(&offsets);
    assert!((sd / 0.7 - 1.0).abs() < 0.02, "σ̂ = {sd}");
}

#[test]
fn neighbors_have_the_requested_spread() {
    let psi = [0.5, 0.5, -1.0, 3.0];
    let nb = gen_neighbors(&psi, 0.03, 25_000, &mut RngStream::new(2, "neighbors", 0)).unwrap();
    assert_eq!(nb.len(), 100_000);
    let offsets: Vec<f64> = nb.iter().enumerate().map(|(i, v)| v - psi[i % 4]).collect();
    let sd = sample_std(&offsets);
    assert!((sd / 0.03 - 1.0).abs() < 0.02, "σ̂ = {sd}");
}

#[test]
fn normalized_training_images_are_standardized() {
    let dir = tempfile::tempdir().unwrap();
    common::idx::write_digits(dir.path(), "train", 60, 4);
    let (set, norm) = load_mnist(
        &dir.path().join("train-images-idx3-ubyte"),
        &dir.path().join("train-labels-idx1-ubyte"),
        &MnistOptions::default(),
    )
    .unwrap();
    assert_eq!(set.shape(), &[1, 32, 32]);
    let v = set.points();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((std - 1.0).abs() < 1e-6, "std {std}");
    assert!(norm.std > 0.0);
}

#[test]
fn input_gradient_matches_logistic_closed_form() {
    // Two-class 1-D model: p1 = σ(Δ), Δ = (w1 − w0)x + (b1 − b0).
    let mut m = Model::new(mlp_spec(&[1, 2], Activation::Tanh).unwrap(), 0).unwrap();
    let (w0, w1, b0, b1) = (0.3, -1.7, 0.2, 0.5);
    m.params_mut()[0].data_mut().copy_from_slice(&[w0, w1]);
    m.params_mut()[1].data_mut().copy_from_slice(&[b0, b1]);
    for &x in &[-2.0, -0.3, 0.0, 0.8, 3.1] {
        for y in 0..2 {
            let delta = (w1 - w0) * x + (b1 - b0);
            let p1 = 1.0 / (1.0 + (-delta).exp());
            let dh = if y == 1 { -(1.0 - p1) } else { p1 };
            let expect = (dh * (w1 - w0)).powi(2);
            let got = input_gradient_reg(&m, &[x], y).unwrap();
            assert!((got - expect).abs() <= 1e-6 * expect, "x={x} y={y}: {got} vs {expect}");
        }
    }
}

#[test]
fn input_gradient_reg_is_quadratic_in_the_field() {
    let mut m = Model::new(mlp_spec(&[1, 2], Activation::Tanh).unwrap(), 0).unwrap();
    let x = [0.4];
    m.params_mut()[0].data_mut().copy_from_slice(&[0.0, 1e-3]);
    let a = input_gradient_reg(&m, &x, 1).unwrap();
    m.params_mut()[0].data_mut().copy_from_slice(&[0.0, 2e-3]);
    let b = input_gradient_reg(&m, &x, 1).unwrap();
    assert!((b / a - 4.0).abs() < 1e-2, "{}", b / a);
}

#[test]
fn first_adam_step_moves_each_weight_by_the_learning_rate() {
    let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let g = vec![vec![0.3, -40.0, 1e-3]];
    let (mut m, mut v, mut t) = (vec![vec![0.0; 3]], vec![vec![0.0; 3]], 0u64);
    adam_step(&mut p, &g, &mut m, &mut v, &mut t, 1e-3, 0.9, 0.999, 1e-8, 0.0);
    let moved: Vec<f64> = p[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
    for (d, gi) in moved.iter().zip(&g[0]) {
        assert!((d + 1e-3 * gi.signum()).abs() < 1e-8, "{moved:?}");
    }
}

#[test]
fn sgd_with_momentum_matches_hand_iteration() {
    let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
    let mut vel = vec![vec![0.0]];
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let (mut w, mut b) = (1.0f64, 0.0f64);
    for g in [0.5, -0.2, 0.1] {
        sgd_step(&mut p, &[vec![g]], &mut vel, lr, mu, wd);
        b = mu * b + g + wd * w;
        w -= lr * b;
        assert!((p[0].data()[0] - w).abs() < 1e-15);
    }
}
