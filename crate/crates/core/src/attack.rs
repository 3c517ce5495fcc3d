//! White-box attacks (FGSM, PGD, DeepFool), robust accuracy and the mean
//! relative DeepFool distance `ρ_adv`.
//!
//! All attacks work in the model's input space. FGSM and PGD keep a
//! perturbation `delta` clamped to `[-ε, ε]` and return `x + delta`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::loss::input_gradient;
use crate::model::{argmax, Model};
use crate::rng::RngStream;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Deepfool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeepfoolNorm {
    L2,
    Linf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub pgd_steps: usize,
    /// Step size; `None` means ε/4.
    pub pgd_alpha: Option<f64>,
    pub random_start: bool,
    pub deepfool_norm: DeepfoolNorm,
    pub deepfool_overshoot: f64,
    pub deepfool_max_iter: usize,
    /// Clamp adversarial inputs to `pixel_range`.
    pub clamp_pixel_range: bool,
    pub pixel_range: [f64; 2],
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 0.1,
            pgd_steps: 40,
            pgd_alpha: None,
            random_start: true,
            deepfool_norm: DeepfoolNorm::L2,
            deepfool_overshoot: 0.02,
            deepfool_max_iter: 50,
            clamp_pixel_range: false,
            pixel_range: [0.0, 1.0],
        }
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            ..Default::default()
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            ..Default::default()
        }
    }

    pub fn deepfool(norm: DeepfoolNorm) -> Self {
        AttackConfig {
            kind: AttackKind::Deepfool,
            deepfool_norm: norm,
            ..Default::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.pgd_alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if let Some(a) = self.pgd_alpha {
            if !(a > 0.0) {
                return Err(Error::Config(format!("pgd_alpha must be > 0, got {a}")));
            }
        }
        if self.deepfool_max_iter < 1 {
            return Err(Error::Config("deepfool_max_iter must be ≥ 1".into()));
        }
        if !(self.deepfool_overshoot >= 0.0) {
            return Err(Error::Config("deepfool_overshoot must be ≥ 0".into()));
        }
        if self.clamp_pixel_range && !(self.pixel_range[0] < self.pixel_range[1]) {
            return Err(Error::Config("pixel_range must be increasing".into()));
        }
        Ok(())
    }
}

/// Why an attack stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The prediction differs from the reference label.
    Flipped,
    /// The model already mispredicts the clean input.
    AlreadyMisclassified,
    /// Iterations ran out, the iterate diverged, or the single step did
    /// not flip the label.
    Exhausted,
    /// Every class-difference gradient vanished.
    ZeroGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub delta: Vec<f64>,
    pub success: bool,
    pub iterations: usize,
    pub outcome: Outcome,
}

impl AttackResult {
    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Rows per forward pass when attacking many points.
const CHUNK_ROWS: usize = 256;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_delta(cfg: &AttackConfig, x: &[f64], delta: &mut [f64]) {
    let e = cfg.epsilon;
    for (d, &xv) in delta.iter_mut().zip(x) {
        *d = d.clamp(-e, e);
        if cfg.clamp_pixel_range {
            let [lo, hi] = cfg.pixel_range;
            *d = (xv + *d).clamp(lo, hi) - xv;
        }
    }
}

fn finish(model: &Model, x: &[f64], delta: Vec<f64>, labels: &[usize], clean: &[usize], iterations: usize) -> Result<Vec<AttackResult>> {
    let d = model.spec().input_numel();
    let x_adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let pred = predict_flat(model, &x_adv)?;
    Ok((0..labels.len())
        .map(|i| {
            let success = pred[i] != labels[i];
            let outcome = if clean[i] != labels[i] {
                Outcome::AlreadyMisclassified
            } else if success {
                Outcome::Flipped
            } else {
                Outcome::Exhausted
            };
            AttackResult {
                x_adv: x_adv[i * d..(i + 1) * d].to_vec(),
                delta: delta[i * d..(i + 1) * d].to_vec(),
                success,
                iterations,
                outcome,
            }
        })
        .collect())
}

/// Predictions for a flat batch.
pub fn predict_flat(model: &Model, x: &[f64]) -> Result<Vec<usize>> {
    let d = model.spec().input_numel();
    let mut out = Vec::with_capacity(x.len() / d);
    for chunk in x.chunks(CHUNK_ROWS * d) {
        let mut shape = vec![chunk.len() / d];
        shape.extend(&model.spec().input_shape);
        out.extend(model.predict(&crate::tensor::Tensor::new(shape, chunk.to_vec())?)?);
    }
    Ok(out)
}

/// FGSM on a flat batch of `labels.len()` points.
pub fn fgsm_batch(model: &Model, x: &[f64], labels: &[usize], epsilon: f64) -> Result<Vec<AttackResult>> {
    let cfg = AttackConfig {
        clamp_pixel_range: false,
        ..AttackConfig::fgsm(epsilon)
    };
    fgsm_batch_with(model, x, labels, &cfg)
}

/// FGSM honoring the clamp settings of `cfg`.
pub fn fgsm_batch_with(model: &Model, x: &[f64], labels: &[usize], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let clean = predict_flat(model, x)?;
    let g = chunked_input_gradient(model, x, labels)?;
    let mut delta: Vec<f64> = g.iter().map(|&v| cfg.epsilon * sign(v)).collect();
    clamp_delta(cfg, x, &mut delta);
    finish(model, x, delta, labels, &clean, 1)
}

pub fn fgsm(model: &Model, x: &[f64], y: usize, epsilon: f64) -> Result<AttackResult> {
    Ok(fgsm_batch(model, x, &[y], epsilon)?.remove(0))
}

fn chunked_input_gradient(model: &Model, x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let d = model.spec().input_numel();
    if x.len() != labels.len() * d {
        return Err(Error::dim("attack", format!("{} values for {} labels", x.len(), labels.len())));
    }
    let mut g = Vec::with_capacity(x.len());
    for (xc, yc) in x.chunks(CHUNK_ROWS * d).zip(labels.chunks(CHUNK_ROWS)) {
        g.extend(input_gradient(model, xc, yc)?);
    }
    Ok(g)
}

/// PGD on a flat batch. Random starts are drawn point by point from `rng`.
pub fn pgd_batch(model: &Model, x: &[f64], labels: &[usize], cfg: &AttackConfig, rng: &mut RngStream) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let clean = predict_flat(model, x)?;
    let e = cfg.epsilon;
    let mut delta = vec![0.0; x.len()];
    if e == 0.0 {
        return finish(model, x, delta, labels, &clean, 0);
    }
    if cfg.random_start {
        delta.iter_mut().for_each(|d| *d = rng.uniform_in(-e, e));
        clamp_delta(cfg, x, &mut delta);
    }
    let alpha = cfg.alpha();
    for _ in 0..cfg.pgd_steps {
        let xt: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let g = chunked_input_gradient(model, &xt, labels)?;
        for (d, gv) in delta.iter_mut().zip(&g) {
            *d += alpha * sign(*gv);
        }
        clamp_delta(cfg, x, &mut delta);
    }
    finish(model, x, delta, labels, &clean, cfg.pgd_steps)
}

pub fn pgd(model: &Model, x: &[f64], y: usize, cfg: &AttackConfig, rng: &mut RngStream) -> Result<AttackResult> {
    Ok(pgd_batch(model, x, &[y], cfg, rng)?.remove(0))
}

/// Logits and full logit-Jacobians for a flat batch of points.
///
/// Each point is replicated once per class and the sweep is seeded with
/// the identity, so one reverse pass yields every row of every Jacobian.
/// Returns `(logits [P×n], jacobians [P×n×d])`.
pub fn logit_jacobians(model: &Model, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.spec().input_numel();
    let n = model.class_count();
    let p = x.len() / d;
    let mut logits = Vec::with_capacity(p * n);
    let mut jac = Vec::with_capacity(p * n * d);
    let per_chunk = (CHUNK_ROWS / n).max(1);
    for xc in x.chunks(per_chunk * d) {
        let pc = xc.len() / d;
        let mut rep = Vec::with_capacity(pc * n * d);
        for pt in xc.chunks(d) {
            for _ in 0..n {
                rep.extend_from_slice(pt);
            }
        }
        let tape = Tape::new();
        let params = model.bind_frozen(&tape);
        let mut shape = vec![pc * n];
        shape.extend(&model.spec().input_shape);
        let xv = tape.variable(shape, rep)?;
        let z = model.forward_vars(&params, xv)?;
        let zv = z.to_vec();
        for i in 0..pc {
            logits.extend_from_slice(&zv[i * n * n..i * n * n + n]);
        }
        let mut cot = vec![0.0; pc * n * n];
        for r in 0..pc * n {
            cot[r * n + r % n] = 1.0;
        }
        jac.extend(tape.vjp(z, &cot)?.wrt(xv));
    }
    Ok((logits, jac))
}

/// DeepFool on a flat batch. With `labels` the reference class is the
/// true label (already-mispredicted points are returned untouched);
/// without, it is the clean prediction.
pub fn deepfool_batch(model: &Model, x: &[f64], labels: Option<&[usize]>, cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let d = model.spec().input_numel();
    let n = model.class_count();
    let p = x.len() / d;
    if x.len() != p * d || labels.is_some_and(|l| l.len() != p) {
        return Err(Error::dim("deepfool", "batch and labels disagree"));
    }
    let over = 1.0 + cfg.deepfool_overshoot;
    let clean = predict_flat(model, x)?;
    let reference: Vec<usize> = labels.map(|l| l.to_vec()).unwrap_or_else(|| clean.clone());

    let mut r_tot = vec![0.0; p * d];
    let mut iterations = vec![0usize; p];
    let mut outcome: Vec<Option<Outcome>> = (0..p)
        .map(|i| (clean[i] != reference[i]).then_some(Outcome::AlreadyMisclassified))
        .collect();

    loop {
        let active: Vec<usize> = (0..p).filter(|&i| outcome[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut xs = Vec::with_capacity(active.len() * d);
        for &i in &active {
            let xi = &x[i * d..(i + 1) * d];
            xs.extend(xi.iter().zip(&r_tot[i * d..(i + 1) * d]).map(|(a, r)| a + over * r));
        }
        let (logits, jac) = logit_jacobians(model, &xs)?;
        for (a, &i) in active.iter().enumerate() {
            let z = &logits[a * n..(a + 1) * n];
            let k0 = reference[i];
            if argmax(z) != k0 {
                outcome[i] = Some(Outcome::Flipped);
                continue;
            }
            if iterations[i] >= cfg.deepfool_max_iter {
                outcome[i] = Some(Outcome::Exhausted);
                continue;
            }
            let jrow = |k: usize| &jac[(a * n + k) * d..(a * n + k + 1) * d];
            let g0 = jrow(k0);
            let mut best: Option<(f64, usize, f64)> = None;
            for k in (0..n).filter(|&k| k != k0) {
                let gk = jrow(k);
                let wnorm = match cfg.deepfool_norm {
                    DeepfoolNorm::L2 => gk.iter().zip(g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                    DeepfoolNorm::Linf => gk.iter().zip(g0).map(|(a, b)| (a - b).abs()).sum::<f64>(),
                };
                if wnorm == 0.0 {
                    continue;
                }
                let fk = (z[k] - z[k0]).abs();
                let dist = fk / wnorm;
                if best.is_none_or(|(bd, _, _)| dist < bd) {
                    best = Some((dist, k, wnorm));
                }
            }
            let Some((_, l, wnorm)) = best else {
                outcome[i] = Some(Outcome::ZeroGradient);
                r_tot[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                continue;
            };
            let fl = (z[l] - z[k0]).abs();
            let gl = jrow(l);
            let step: Vec<f64> = match cfg.deepfool_norm {
                DeepfoolNorm::L2 => {
                    let s = (fl + 1e-4) / (wnorm * wnorm);
                    gl.iter().zip(g0).map(|(a, b)| s * (a - b)).collect()
                }
                DeepfoolNorm::Linf => {
                    let s = (fl + 1e-4) / wnorm;
                    gl.iter().zip(g0).map(|(a, b)| s * sign(a - b)).collect()
                }
            };
            let r = &mut r_tot[i * d..(i + 1) * d];
            let next: Vec<f64> = r.iter().zip(&step).map(|(a, b)| a + b).collect();
            let xi = &x[i * d..(i + 1) * d];
            if next.iter().zip(xi).any(|(rv, xv)| !(xv + over * rv).is_finite() || !(over * rv).is_finite()) {
                outcome[i] = Some(Outcome::Exhausted);
                continue;
            }
            r.copy_from_slice(&next);
            iterations[i] += 1;
        }
    }

    let mut out = Vec::with_capacity(p);
    let mut x_adv_all = Vec::with_capacity(p * d);
    let mut deltas = Vec::with_capacity(p);
    for i in 0..p {
        let delta: Vec<f64> = r_tot[i * d..(i + 1) * d].iter().map(|r| over * r).collect();
        x_adv_all.extend(x[i * d..(i + 1) * d].iter().zip(&delta).map(|(a, b)| a + b));
        deltas.push(delta);
    }
    let pred = predict_flat(model, &x_adv_all)?;
    for (i, delta) in deltas.into_iter().enumerate() {
        let oc = outcome[i].unwrap();
        let success = oc != Outcome::AlreadyMisclassified && pred[i] != reference[i];
        out.push(AttackResult {
            x_adv: x_adv_all[i * d..(i + 1) * d].to_vec(),
            delta,
            success,
            iterations: iterations[i],
            outcome: oc,
        });
    }
    Ok(out)
}

pub fn deepfool(model: &Model, x: &[f64], label: Option<usize>, cfg: &AttackConfig) -> Result<AttackResult> {
    let labels = label.map(|y| vec![y]);
    Ok(deepfool_batch(model, x, labels.as_deref(), cfg)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub robust_accuracy: f64,
    /// PGD step size used at this budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgd_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_index: usize,
    pub l2_delta: f64,
    /// `||Δx||₂ / ||x||₂`; absent when `||x||₂ = 0`.
    pub rel_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub format_version: u32,
    pub model_hash: String,
    pub attack: AttackConfig,
    /// Seed of the PGD random-start streams.
    pub seed: u64,
    pub table: Vec<EpsilonRow>,
    pub rho_adv: Option<f64>,
    pub samples: Vec<SampleRow>,
}

impl RobustnessReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("epsilon,robust_accuracy\n");
        for r in &self.table {
            s.push_str(&format!("{},{}\n", r.epsilon, r.robust_accuracy));
        }
        s
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("sample_index,l2_delta,rel_rho\n");
        for r in &self.samples {
            let rho = r.rel_rho.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.sample_index, r.l2_delta, rho));
        }
        s
    }
}

/// Fraction of points still classified correctly after attacking them at
/// each budget.
///
/// For DeepFool one unbounded attack is run per point and a point counts
/// as broken at ε when the attack flipped it with `||Δx||_∞ ≤ ε`.
pub fn robust_accuracy(model: &Model, set: &LabeledSet, cfg: &AttackConfig, epsilons: &[f64], seed: u64) -> Result<RobustnessReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("robust accuracy on an empty set".into()));
    }
    let x = set.points();
    let y = set.labels();
    let n = y.len() as f64;
    let mut table = Vec::new();
    let mut samples = Vec::new();
    match cfg.kind {
        AttackKind::Fgsm | AttackKind::Pgd => {
            for (k, &eps) in epsilons.iter().enumerate() {
                let c = AttackConfig { epsilon: eps, ..cfg.clone() };
                let res = if cfg.kind == AttackKind::Fgsm {
                    fgsm_batch_with(model, x, y, &c)?
                } else {
                    pgd_batch(model, x, y, &c, &mut RngStream::new(seed, "pgd-start", k as u64))?
                };
                let correct = res.iter().filter(|r| !r.success).count();
                table.push(EpsilonRow {
                    epsilon: eps,
                    robust_accuracy: correct as f64 / n,
                    pgd_alpha: (cfg.kind == AttackKind::Pgd).then(|| c.alpha()),
                });
            }
        }
        AttackKind::Deepfool => {
            let res = deepfool_batch(model, x, Some(y), cfg)?;
            for &eps in epsilons {
                let correct = res
                    .iter()
                    .filter(|r| r.outcome != Outcome::AlreadyMisclassified && !(r.success && r.linf() <= eps))
                    .count();
                table.push(EpsilonRow {
                    epsilon: eps,
                    robust_accuracy: correct as f64 / n,
                    pgd_alpha: None,
                });
            }
            for (i, r) in res.iter().enumerate() {
                samples.push(sample_row(i, set.point(i), r));
            }
        }
    }
    Ok(RobustnessReport {
        format_version: 1,
        model_hash: model.hash(),
        attack: cfg.clone(),
        seed,
        table,
        rho_adv: None,
        samples,
    })
}

fn sample_row(i: usize, x: &[f64], r: &AttackResult) -> SampleRow {
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    SampleRow {
        sample_index: i,
        l2_delta: r.l2(),
        rel_rho: (xn > 0.0).then(|| r.l2() / xn),
    }
}

/// `ρ_adv` with per-sample rows. The reference class is the model's own
/// prediction, so every point gets a boundary distance.
pub fn rho_adv_report(model: &Model, set: &LabeledSet, cfg: &AttackConfig) -> Result<(f64, Vec<SampleRow>)> {
    let cfg = AttackConfig {
        kind: AttackKind::Deepfool,
        deepfool_norm: DeepfoolNorm::L2,
        ..cfg.clone()
    };
    if set.is_empty() {
        return Err(Error::Contract("ρ_adv of an empty set".into()));
    }
    let res = deepfool_batch(model, set.points(), None, &cfg)?;
    let rows: Vec<SampleRow> = res.iter().enumerate().map(|(i, r)| sample_row(i, set.point(i), r)).collect();
    let used: Vec<f64> = rows.iter().filter_map(|r| r.rel_rho).collect();
    if used.is_empty() {
        return Err(Error::Contract("every point has zero norm; ρ_adv undefined".into()));
    }
    Ok((used.iter().sum::<f64>() / used.len() as f64, rows))
}

pub fn rho_adv(model: &Model, set: &LabeledSet, cfg: &AttackConfig) -> Result<f64> {
    Ok(rho_adv_report(model, set, cfg)?.0)
}

/// Mean of `||Δx_k||₂ / ||x_k||₂`, skipping zero-norm points; returns the
/// mean and the number skipped.
pub fn rho_from_deltas(points: &[&[f64]], deltas: &[&[f64]]) -> Result<(f64, usize)> {
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (x, dx) in points.iter().zip(deltas) {
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xn == 0.0 {
            skipped += 1;
            continue;
        }
        total += dx.iter().map(|v| v * v).sum::<f64>().sqrt() / xn;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Contract("every point has zero norm; ρ_adv undefined".into()));
    }
    Ok((total / used as f64, skipped))
}
