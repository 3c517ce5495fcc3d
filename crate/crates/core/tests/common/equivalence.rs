//! λ = 0, N_u = 0 training against a hand-written supervised loop.

use bm_core::data::{assemble, default_2d_clusters, gen_2d_points, LabeledSet, NoiseConfig, UnlabeledSet};
use bm_core::model::{mlp_spec, Model};
use bm_core::rng::RngStream;
use bm_core::tensor::{Activation, Tape};
use bm_core::train::{sgd_step, OptimizerConfig, TrainConfig, Trainer};

pub const LR: f64 = 1e-3;
pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 5e-4;

pub fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda: 0.0,
        epochs,
        optimizer: OptimizerConfig::Sgd {
            lr: LR,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
        },
        groups_per_step: 32,
        adversarial: None,
        injection: None,
        seed,
        noise: NoiseConfig {
            sigma_u: 3.0,
            sigma_b: 0.3,
            n_u: 0,
            n_b: 1,
        },
    }
}

/// Mean cross-entropy SGD over seeded shuffles, one epoch.
pub fn plain_epoch(model: &mut Model, x: &LabeledSet, seed: u64, epoch: u64, velocity: &mut [Vec<f64>]) {
    let order = RngStream::new(seed, "shuffle", epoch).permutation(x.len());
    for step in order.chunks(32) {
        let tape = Tape::new();
        let params = model.bind(&tape);
        let mut shape = vec![step.len()];
        shape.extend(x.shape());
        let xb = tape.constant(shape, x.batch(step).into_data()).unwrap();
        let labels: Vec<usize> = step.iter().map(|&i| x.label(i)).collect();
        let loss = model
            .forward_vars(&params, xb)
            .unwrap()
            .softmax()
            .unwrap()
            .cross_entropy(&labels)
            .unwrap()
            .sum()
            .unwrap()
            .scale(1.0 / step.len() as f64)
            .unwrap();
        let g = tape.vjp(loss, &[1.0]).unwrap();
        let grads: Vec<Vec<f64>> = params.iter().map(|p| g.wrt(*p)).collect();
        sgd_step(model.params_mut(), &grads, velocity, LR, MOMENTUM, WEIGHT_DECAY);
    }
}

/// Epochs at which the trainer's parameters differ bitwise from the plain
/// loop's (empty when identical throughout).
pub fn mismatched_epochs(seed: u64, epochs: usize) -> Vec<usize> {
    let x = gen_2d_points(&default_2d_clusters(), seed).unwrap();
    let u = UnlabeledSet::new(x.shape().to_vec(), Vec::new()).unwrap();
    let data = assemble(&x, &u).unwrap();
    let spec = mlp_spec(&[2, 8, 8, 2], Activation::Tanh).unwrap();
    let mut plain = Model::new(spec.clone(), seed).unwrap();
    let mut velocity: Vec<Vec<f64>> = plain.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut t = Trainer::new(Model::new(spec, seed).unwrap(), config(seed, epochs)).unwrap();
    let mut bad = Vec::new();
    for e in 0..epochs {
        plain_epoch(&mut plain, &x, seed, e as u64, &mut velocity);
        t.run(&data, None, 1).unwrap();
        let same = plain
            .flat_params()
            .iter()
            .zip(t.model.flat_params())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            bad.push(e);
        }
    }
    bad
}
