//! ℓ2 DeepFool on linear classifiers against the closed-form distance to
//! the nearest pairwise class boundary.

use bm_core::attack::{deepfool, AttackConfig, DeepfoolNorm};
use bm_core::model::{argmax, mlp_spec, Model};
use bm_core::rng::RngStream;
use bm_core::tensor::{Activation, Tensor};

#[derive(Clone, Debug)]
pub struct LinearCase {
    pub classes: usize,
    pub dim: usize,
    /// `||Δ||₂ / ((1 + overshoot) · distance)`.
    pub ratio: f64,
    pub iterations: usize,
    pub flipped: bool,
}

/// A random `dim → classes` affine model.
pub fn linear_model(dim: usize, classes: usize, rng: &mut RngStream) -> Model {
    let mut m = Model::new(mlp_spec(&[dim, classes], Activation::Tanh).unwrap(), 0).unwrap();
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = rng.gaussian());
    }
    m
}

/// `min_l (z_k − z_l) / ||w_k − w_l||` for the predicted class `k`.
pub fn closed_form_distance(m: &Model, x: &[f64]) -> f64 {
    let (dim, n) = (x.len(), m.class_count());
    let w = m.params()[0].data();
    let z = m.forward(&Tensor::new(vec![1, dim], x.to_vec()).unwrap()).unwrap().into_data();
    let k = argmax(&z);
    (0..n)
        .filter(|&l| l != k)
        .map(|l| {
            let norm = (0..dim).map(|i| (w[i * n + k] - w[i * n + l]).powi(2)).sum::<f64>().sqrt();
            (z[k] - z[l]) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn run(count: usize, seed: u64) -> Vec<LinearCase> {
    let mut rng = RngStream::new(seed, "deepfool-oracle", 0);
    let cfg = AttackConfig::deepfool(DeepfoolNorm::L2);
    (0..count)
        .map(|i| {
            let classes = 2 + i % 5;
            let dim = 2 + (i * 7) % 9;
            let m = linear_model(dim, classes, &mut rng);
            let x: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            let dist = closed_form_distance(&m, &x);
            let r = deepfool(&m, &x, None, &cfg).unwrap();
            let before = m.predict(&Tensor::new(vec![1, dim], x.clone()).unwrap()).unwrap()[0];
            let after = m.predict(&Tensor::new(vec![1, dim], r.x_adv.clone()).unwrap()).unwrap()[0];
            LinearCase {
                classes,
                dim,
                ratio: r.l2() / ((1.0 + cfg.deepfool_overshoot) * dist),
                iterations: r.iterations,
                flipped: r.success && before != after,
            }
        })
        .collect()
}
