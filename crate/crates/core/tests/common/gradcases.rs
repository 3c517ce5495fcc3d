//! Central finite differences against reverse-mode gradients, for every
//! differentiable op and for whole regularized losses.

use bm_core::data::gen_neighbors;
use bm_core::loss::{batch_loss, input_gradient, GroupSlice};
use bm_core::model::{lenet_spec, mlp_spec, Model};
use bm_core::rng::RngStream;
use bm_core::tensor::{Activation, PoolKind, Tape, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that vanish compare absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn gaussians(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian() * scale).collect()
}

fn pick_coords(rng: &mut RngStream, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut p = rng.permutation(n);
        p.truncate(max);
        p.sort_unstable();
        p
    }
}

type OpFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// Checks `f` on `inputs` by contracting its output with a random
/// cotangent and differencing that scalar.
pub fn check_op(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], f: &OpFn, rng: &mut RngStream) -> CaseResult {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.variable(s.clone(), d.clone()).unwrap()).collect();
    let out = f(&tape, &vars);
    let w = gaussians(rng, out.numel(), 1.0);
    let g = tape.vjp(out, &w).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.wrt(*v)).collect();

    let eval = |xs: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|(s, d)| t.variable(s.clone(), d.clone()).unwrap()).collect();
        f(&t, &vs).to_vec().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in pick_coords(rng, xs[i].1.len(), 40) {
            let orig = xs[i].1[k];
            xs[i].1[k] = orig + STEP;
            let up = eval(&xs);
            xs[i].1[k] = orig - STEP;
            let down = eval(&xs);
            xs[i].1[k] = orig;
            worst = worst.max(rel_error((up - down) / (2.0 * STEP), analytic[i][k]));
            checked += 1;
        }
    }
    CaseResult {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    }
}

fn dims(rng: &mut RngStream, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

/// Every op, `reps` randomized cases each.
pub fn op_cases(seed: u64, reps: usize) -> Vec<CaseResult> {
    let mut rng = RngStream::new(seed, "gradcheck-ops", 0);
    let mut out = Vec::new();
    for _ in 0..reps {
        let (m, k, n) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 5), dims(&mut rng, 2, 5));
        let a = (vec![m, k], gaussians(&mut rng, m * k, 1.0));
        let b = (vec![k, n], gaussians(&mut rng, k * n, 1.0));
        let x = (vec![m, n], gaussians(&mut rng, m * n, 1.0));
        let y = (vec![m, n], gaussians(&mut rng, m * n, 1.0));
        let bias = (vec![n], gaussians(&mut rng, n, 1.0));
        let r = &mut rng;

        out.push(check_op("matmul", &[a.clone(), b.clone()], &|_, v| v[0].matmul(v[1]).unwrap(), r));
        out.push(check_op("add_bias", &[x.clone(), bias.clone()], &|_, v| v[0].add_bias(v[1]).unwrap(), r));
        out.push(check_op("add", &[x.clone(), y.clone()], &|_, v| v[0].add(v[1]).unwrap(), r));
        out.push(check_op("sub", &[x.clone(), y.clone()], &|_, v| v[0].sub(v[1]).unwrap(), r));
        out.push(check_op("mul", &[x.clone(), y.clone()], &|_, v| v[0].mul(v[1]).unwrap(), r));
        out.push(check_op("scale", &[x.clone()], &|_, v| v[0].scale(-1.7).unwrap(), r));
        out.push(check_op("sum", &[x.clone()], &|_, v| v[0].sum().unwrap(), r));
        out.push(check_op("mean", &[x.clone()], &|_, v| v[0].mean().unwrap(), r));
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
            out.push(check_op(&format!("activation:{act:?}"), &[x.clone()], &move |_, v| v[0].activation(act).unwrap(), r));
        }
        out.push(check_op("softmax", &[x.clone()], &|_, v| v[0].softmax().unwrap(), r));
        let labels: Vec<usize> = (0..m).map(|_| r.below(n as u64) as usize).collect();
        let probs = (vec![m, n], (0..m * n).map(|_| r.uniform_in(0.05, 1.0)).collect());
        let l2 = labels.clone();
        out.push(check_op("cross_entropy", &[probs], &move |_, v| v[0].cross_entropy(&l2).unwrap(), r));
        out.push(check_op(
            "softmax+cross_entropy",
            &[x.clone()],
            &move |_, v| v[0].softmax().unwrap().cross_entropy(&labels).unwrap(),
            r,
        ));
        out.push(check_op("row_norm", &[x.clone()], &|_, v| v[0].row_norm().unwrap(), r));
        let rows: Vec<usize> = (0..m + 2).map(|_| r.below(m as u64) as usize).collect();
        out.push(check_op("select_rows", &[x.clone()], &move |_, v| v[0].select_rows(&rows).unwrap(), r));
        out.push(check_op("concat_rows", &[x.clone(), y.clone()], &|t, v| t.concat_rows(&[v[0], v[1]]).unwrap(), r));
        out.push(check_op("reshape", &[x.clone()], &move |_, v| v[0].reshape(vec![n, m]).unwrap(), r));

        let (c, f, h) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 4, 7));
        let img = (vec![2, c, h, h], gaussians(r, 2 * c * h * h, 1.0));
        let ker = (vec![f, c, 3, 3], gaussians(r, f * c * 9, 0.5));
        let kb = (vec![f], gaussians(r, f, 0.5));
        out.push(check_op(
            "conv2d:s1p0+bias",
            &[img.clone(), ker.clone(), kb],
            &|_, v| v[0].conv2d(v[1], Some(v[2]), 1, 0).unwrap(),
            r,
        ));
        out.push(check_op("conv2d:s2p1", &[img.clone(), ker], &|_, v| v[0].conv2d(v[1], None, 2, 1).unwrap(), r));
        out.push(check_op("pool2d:max2", &[img.clone()], &|_, v| v[0].pool2d(PoolKind::Max, 2, 2).unwrap(), r));
        out.push(check_op("pool2d:avg2", &[img.clone()], &|_, v| v[0].pool2d(PoolKind::Avg, 2, 2).unwrap(), r));
        out.push(check_op("pool2d:max3s1", &[img], &|_, v| v[0].pool2d(PoolKind::Max, 3, 1).unwrap(), r));
    }
    out
}

/// Differences the full regularized loss with respect to sampled
/// parameters of `model` on a mixed labeled/unlabeled step.
pub fn model_loss_case(name: &str, mut model: Model, groups: usize, n_b: usize, lambda: f64, seed: u64, per_tensor: usize) -> CaseResult {
    let mut rng = RngStream::new(seed, "gradcheck-model", 0);
    let d = model.spec().input_numel();
    let psis: Vec<Vec<f64>> = (0..groups).map(|_| gaussians(&mut rng, d, 1.0)).collect();
    let labels: Vec<Option<usize>> = (0..groups)
        .map(|g| (g % 2 == 0).then(|| rng.below(model.class_count() as u64) as usize))
        .collect();
    let nbs: Vec<Vec<f64>> = psis.iter().map(|p| gen_neighbors(p, 0.3, n_b, &mut rng).unwrap()).collect();
    let slices: Vec<GroupSlice> = (0..groups)
        .map(|g| GroupSlice {
            psi: &psis[g],
            label: labels[g],
            neighbors: &nbs[g],
            with_sup: true,
        })
        .collect();
    let scale = 1.0 / groups as f64;
    let loss = |m: &Model| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let params = m.bind(&tape);
        let (l, _) = batch_loss(m, &tape, &params, &slices, lambda, scale).unwrap();
        let g = tape.vjp(l, &[1.0]).unwrap();
        (l.item().unwrap(), params.iter().map(|p| g.wrt(*p)).collect())
    };
    let (_, analytic) = loss(&model);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..model.params().len() {
        for k in pick_coords(&mut rng, model.params()[i].numel(), per_tensor) {
            let orig = model.params()[i].data()[k];
            model.params_mut()[i].data_mut()[k] = orig + STEP;
            let up = loss(&model).0;
            model.params_mut()[i].data_mut()[k] = orig - STEP;
            let down = loss(&model).0;
            model.params_mut()[i].data_mut()[k] = orig;
            worst = worst.max(rel_error((up - down) / (2.0 * STEP), analytic[i][k]));
            checked += 1;
        }
    }
    CaseResult {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    }
}

/// Differences the summed cross-entropy with respect to the input.
pub fn input_gradient_case(name: &str, model: &Model, seed: u64, coords: usize) -> CaseResult {
    let mut rng = RngStream::new(seed, "gradcheck-input", 0);
    let d = model.spec().input_numel();
    let mut x = gaussians(&mut rng, 2 * d, 1.0);
    let labels = vec![0, model.class_count() - 1];
    let g = input_gradient(model, &x, &labels).unwrap();
    let value = |x: &[f64]| -> f64 {
        let t = Tape::new();
        let p = model.bind_frozen(&t);
        let mut shape = vec![2];
        shape.extend(&model.spec().input_shape);
        let xv = t.constant(shape, x.to_vec()).unwrap();
        model.forward_vars(&p, xv).unwrap().softmax().unwrap().cross_entropy(&labels).unwrap().sum().unwrap().item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let idx = pick_coords(&mut rng, 2 * d, coords);
    for &k in &idx {
        let orig = x[k];
        x[k] = orig + STEP;
        let up = value(&x);
        x[k] = orig - STEP;
        let down = value(&x);
        x[k] = orig;
        worst = worst.max(rel_error((up - down) / (2.0 * STEP), g[k]));
    }
    CaseResult {
        name: name.to_string(),
        max_rel_error: worst,
        checked: idx.len(),
    }
}

pub fn model_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();
    for seed in 0..3 {
        let mlp = Model::new(mlp_spec(&[2, 8, 8, 2], Activation::Tanh).unwrap(), seed).unwrap();
        out.push(model_loss_case("mlp[2,8,8,2]:loss", mlp.clone(), 6, 3, 10.0, seed, 200));
        out.push(input_gradient_case("mlp[2,8,8,2]:input", &mlp, seed, 4));
        let deep = Model::new(mlp_spec(&[5, 7, 6, 4], Activation::Sigmoid).unwrap(), seed).unwrap();
        out.push(model_loss_case("mlp[5,7,6,4]:loss", deep, 5, 2, 3.0, seed, 200));
    }
    for (seed, act) in [(0, Activation::Sigmoid), (1, Activation::Relu), (2, Activation::Tanh)] {
        let lenet = Model::new(lenet_spec(&[1, 32, 32], act).unwrap(), seed).unwrap();
        out.push(model_loss_case(&format!("lenet:{act:?}:loss"), lenet.clone(), 3, 1, 100.0, seed, 6));
        out.push(input_gradient_case(&format!("lenet:{act:?}:input"), &lenet, seed, 20));
    }
    out
}
