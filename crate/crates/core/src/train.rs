//! Training loops and optimizers.
//!
//! An epoch shuffles the combined dataset, walks it in steps of
//! `groups_per_step` entries, draws fresh neighbors for every entry, and
//! averages the group losses of a step before one optimizer update. Every
//! random draw comes from a stream keyed by `(seed, purpose, epoch)`, so a
//! run paused at an epoch boundary resumes bit-exactly.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attack::{pgd_batch, predict_flat, AttackConfig};
use crate::data::{gen_neighbors, mu_pair_flat, CombinedDataset, LabeledSet, NoiseConfig, MU_PAIR_SAMPLE_CAP};
use crate::error::{Error, Result};
use crate::io;
use crate::loss::{batch_loss, measure_reg, GroupSlice, LossBreakdown};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

/// Most input rows evaluated in one forward pass; larger steps are
/// accumulated over several passes.
pub const MAX_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    /// Layer boundary; defaults to just after the last conv/pool layer.
    #[serde(default)]
    pub at_layer: Option<usize>,
    /// Fixed neighbor scale at the boundary instead of the μ_pair rule.
    #[serde(default)]
    pub sigma_b: Option<f64>,
}

fn default_groups() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_groups")]
    pub groups_per_step: usize,
    #[serde(default)]
    pub adversarial: Option<AttackConfig>,
    #[serde(default)]
    pub injection: Option<InjectionConfig>,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.groups_per_step < 1 {
            return Err(Error::Config("groups_per_step must be ≥ 1".into()));
        }
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        self.noise.validate()
    }
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Vec<f64>], velocity: &mut [Vec<f64>], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *w);
            *w -= lr * *vi;
        }
    }
}

/// Bias-corrected Adam with weight decay folded into the gradient. `t` is
/// the number of steps taken before this one.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    t: &mut u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    *t += 1;
    let c1 = 1.0 - beta1.powf(*t as f64);
    let c2 = 1.0 - beta2.powf(*t as f64);
    for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        for (((w, &gi), mj), vj) in p.data_mut().iter_mut().zip(g).zip(mi.iter_mut()).zip(vi.iter_mut()) {
            let gd = gi + weight_decay * *w;
            *mj = beta1 * *mj + (1.0 - beta1) * gd;
            *vj = beta2 * *vj + (1.0 - beta2) * gd * gd;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Optimizer configuration plus its running state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// SGD velocity or Adam first moment.
    pub first: Vec<Vec<f64>>,
    /// Adam second moment (empty for SGD).
    pub second: Vec<Vec<f64>>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            config,
            first: zeros,
            second,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        match self.config {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => sgd_step(model.params_mut(), grads, &mut self.first, lr, momentum, weight_decay),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => adam_step(
                model.params_mut(),
                grads,
                &mut self.first,
                &mut self.second,
                &mut self.t,
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            ),
        }
    }

    fn tensors(&self, model: &Model) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (tag, bufs) in [("first", &self.first), ("second", &self.second)] {
            for ((name, p), b) in model.param_names().iter().zip(model.params()).zip(bufs) {
                let t = Tensor::new(p.shape().to_vec(), b.clone()).expect("state mirrors parameter shapes");
                out.push((format!("optimizer.{tag}.{name}"), t));
            }
        }
        out
    }

    fn from_tensors(config: OptimizerConfig, t: u64, model: &Model, extra: &[(String, Tensor)]) -> Result<Self> {
        let mut opt = Optimizer::new(config, model);
        opt.t = t;
        let names = model.param_names();
        for (tag, bufs) in [("first", &mut opt.first), ("second", &mut opt.second)] {
            for (name, b) in names.iter().zip(bufs.iter_mut()) {
                let key = format!("optimizer.{tag}.{name}");
                let t = extra
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if t.1.numel() != b.len() {
                    return Err(Error::Format(format!("{key} has the wrong length")));
                }
                b.copy_from_slice(t.1.data());
            }
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Per-step means.
    pub loss: LossBreakdown,
    pub val_accuracy: Option<f64>,
    /// Kept in memory only so logs stay byte-stable across reruns.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub metadata: Value,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// JSON lines: a header with the config echo, then one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&json!({
            "format_version": 1,
            "config": self.config,
            "metadata": self.metadata,
        }))
        .unwrap();
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).unwrap());
            s.push('\n');
        }
        s
    }

    pub fn total_wall_time_s(&self) -> f64 {
        self.records.iter().map(|r| r.wall_time_s).sum()
    }
}

/// A model mid-training: resumable at any epoch boundary.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub next_epoch: usize,
    pub log: TrainLog,
}

fn describe(cfg: &TrainConfig) -> Value {
    let mut m = serde_json::Map::new();
    if cfg.lambda == 0.0 && cfg.adversarial.is_none() {
        m.insert("label".into(), "no defence".into());
    }
    if let Some(a) = &cfg.adversarial {
        m.insert(
            "adversarial_recipe".into(),
            json!({
                "attack": "pgd",
                "replace_probability": 0.5,
                "epsilon": a.epsilon,
                "steps": a.pgd_steps,
                "alpha": a.alpha(),
                "random_start": a.random_start,
            }),
        );
    }
    Value::Object(m)
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer.clone(), &model);
        Ok(Trainer {
            model,
            optimizer,
            next_epoch: 0,
            log: TrainLog {
                metadata: describe(&cfg),
                config: cfg,
                records: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.log.config
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.log.config.epochs
    }

    /// Runs up to `max_epochs` more epochs of the proposed objective (with
    /// adversarial replacement when configured).
    pub fn run(&mut self, data: &CombinedDataset, val: Option<&LabeledSet>, max_epochs: usize) -> Result<()> {
        let stop = (self.next_epoch + max_epochs).min(self.log.config.epochs);
        while self.next_epoch < stop {
            let t0 = Instant::now();
            let (loss, steps) = self.epoch(data)?;
            self.finish_epoch(loss, steps, val, t0)?;
        }
        Ok(())
    }

    /// Like [`Trainer::run`] with noise added at an intermediate layer.
    pub fn run_injected(&mut self, data: &LabeledSet, val: Option<&LabeledSet>, max_epochs: usize) -> Result<()> {
        let stop = (self.next_epoch + max_epochs).min(self.log.config.epochs);
        while self.next_epoch < stop {
            let t0 = Instant::now();
            let (loss, steps) = self.injected_epoch(data)?;
            self.finish_epoch(loss, steps, val, t0)?;
        }
        Ok(())
    }

    fn finish_epoch(&mut self, loss: LossBreakdown, steps: usize, val: Option<&LabeledSet>, t0: Instant) -> Result<()> {
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&self.model, v)?),
            _ => None,
        };
        self.log.records.push(EpochRecord {
            epoch: self.next_epoch,
            steps,
            loss,
            val_accuracy,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        self.next_epoch += 1;
        Ok(())
    }

    fn epoch(&mut self, data: &CombinedDataset) -> Result<(LossBreakdown, usize)> {
        let cfg = self.log.config.clone();
        let e = self.next_epoch as u64;
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let d = data.dim();
        let order = RngStream::new(cfg.seed, "shuffle", e).permutation(data.len());
        let mut nb_rng = RngStream::new(cfg.seed, "neighbors", e);
        let mut adv_rng = RngStream::new(cfg.seed, "adversarial", e);
        let mut sums = LossBreakdown::default();
        let mut steps = 0;

        for step in order.chunks(cfg.groups_per_step) {
            let mut psis: Vec<Vec<f64>> = step.iter().map(|&k| data.entry(k).psi.to_vec()).collect();
            let labels: Vec<Option<usize>> = step.iter().map(|&k| data.entry(k).label_opt()).collect();
            if let Some(adv) = &cfg.adversarial {
                self.replace_adversarial(adv, &mut psis, &labels, &mut adv_rng)?;
            }
            let neighbors: Vec<Vec<f64>> = psis
                .iter()
                .map(|p| gen_neighbors(p, cfg.noise.sigma_b, cfg.noise.n_b, &mut nb_rng))
                .collect::<Result<_>>()?;

            let slices = plan_slices(&psis, &labels, &neighbors, d, cfg.lambda != 0.0);
            let scale = 1.0 / step.len() as f64;
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut step_loss = LossBreakdown::default();
            for chunk in &slices {
                let tape = Tape::new();
                let params = self.model.bind(&tape);
                let (total, br) = batch_loss(&self.model, &tape, &params, chunk, cfg.lambda, scale)?;
                if !br.is_finite() {
                    return Err(abort(self.next_epoch, step[0], &br));
                }
                accumulate(&mut grads, &tape, total, &params)?;
                step_loss = add_breakdown(step_loss, br);
            }
            if cfg.lambda == 0.0 {
                let mut reg = 0.0;
                for chunk in plan_slices(&psis, &labels, &neighbors, d, true) {
                    reg += measure_reg(&self.model, &chunk, d)?;
                }
                step_loss = LossBreakdown::new(step_loss.sup, reg * scale, 0.0);
            }
            if !step_loss.is_finite() {
                return Err(abort(self.next_epoch, step[0], &step_loss));
            }
            self.optimizer.step(&mut self.model, &grads.unwrap());
            self.check_params(step[0])?;
            sums = add_breakdown(sums, step_loss);
            steps += 1;
        }
        Ok((mean_breakdown(sums, steps, cfg.lambda), steps))
    }

    fn check_params(&self, entry: usize) -> Result<()> {
        for (name, p) in self.model.param_names().iter().zip(self.model.params()) {
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Abort(format!(
                    "non-finite parameter {name} after the step at epoch {}, entry {entry}",
                    self.next_epoch
                )));
            }
        }
        Ok(())
    }

    /// Replaces each labeled point by its PGD example with probability ½.
    fn replace_adversarial(
        &self,
        adv: &AttackConfig,
        psis: &mut [Vec<f64>],
        labels: &[Option<usize>],
        rng: &mut RngStream,
    ) -> Result<()> {
        let mut chosen = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if l.is_some() && rng.uniform() < 0.5 {
                chosen.push(i);
            }
        }
        if chosen.is_empty() {
            return Ok(());
        }
        let x: Vec<f64> = chosen.iter().flat_map(|&i| psis[i].iter().copied()).collect();
        let y: Vec<usize> = chosen.iter().map(|&i| labels[i].unwrap()).collect();
        let res = pgd_batch(&self.model, &x, &y, adv, rng)?;
        for (&i, r) in chosen.iter().zip(res) {
            psis[i] = r.x_adv;
        }
        Ok(())
    }

    fn injected_epoch(&mut self, data: &LabeledSet) -> Result<(LossBreakdown, usize)> {
        let cfg = self.log.config.clone();
        let inj = cfg.injection.clone().unwrap_or(InjectionConfig {
            at_layer: None,
            sigma_b: None,
        });
        let at = match inj.at_layer {
            Some(b) => b,
            None => self
                .model
                .last_conv_boundary()
                .ok_or_else(|| Error::Config("model has no conv/pool layer to inject after".into()))?,
        };
        self.model.boundary_shape(at)?;
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let e = self.next_epoch as u64;
        let sigma_b = match inj.sigma_b {
            Some(s) if s > 0.0 => s,
            Some(s) => return Err(Error::Config(format!("injection σ_b must be > 0, got {s}"))),
            None => {
                let h = intermediate(&self.model, data, at)?;
                let dm = h.len() / data.len();
                let mu = mu_pair_flat(&h, dm, MU_PAIR_SAMPLE_CAP, &mut RngStream::new(cfg.seed, "inject-mu", e))?;
                crate::data::derive_sigmas(mu).1
            }
        };
        let sigma_u = 10.0 * sigma_b;
        let order = RngStream::new(cfg.seed, "shuffle", e).permutation(data.len());
        let mut noise_rng = RngStream::new(cfg.seed, "inject-noise", e);
        let mut sums = LossBreakdown::default();
        let mut steps = 0;
        let per_chunk = (MAX_ROWS / 4).max(1);
        for step in order.chunks(cfg.groups_per_step) {
            let scale = 1.0 / (2 * step.len()) as f64;
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut step_loss = LossBreakdown::default();
            for chunk in step.chunks(per_chunk) {
                let tape = Tape::new();
                let params = self.model.bind(&tape);
                let (total, br) =
                    self.injected_loss(&tape, &params, data, chunk, at, sigma_u, sigma_b, cfg.lambda, scale, &mut noise_rng)?;
                if !br.is_finite() {
                    return Err(abort(self.next_epoch, chunk[0], &br));
                }
                accumulate(&mut grads, &tape, total, &params)?;
                step_loss = add_breakdown(step_loss, br);
            }
            self.optimizer.step(&mut self.model, &grads.unwrap());
            self.check_params(step[0])?;
            sums = add_breakdown(sums, step_loss);
            steps += 1;
        }
        Ok((mean_breakdown(sums, steps, cfg.lambda), steps))
    }

    /// Two groups per image at layer `at`: the labeled intermediate with
    /// one neighbor, and an unlabeled offspring (σ_u) with its neighbor.
    #[allow(clippy::too_many_arguments)]
    fn injected_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        data: &LabeledSet,
        idx: &[usize],
        at: usize,
        sigma_u: f64,
        sigma_b: f64,
        lambda: f64,
        scale: f64,
        rng: &mut RngStream,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        let b = idx.len();
        let x = data.batch(idx);
        let xv = tape.constant(x.shape().to_vec(), x.into_data())?;
        let h = self.model.forward_range(params, xv, 0, at)?;
        let hshape = h.shape();
        let dm = h.numel() / b;
        let mut noise = |sigma: f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut v = Vec::with_capacity(b * dm);
            let mut norms = Vec::with_capacity(b);
            for _ in 0..b {
                let mut n2 = 0.0;
                loop {
                    let start = v.len();
                    for _ in 0..dm {
                        let e = sigma * rng.gaussian();
                        n2 += e * e;
                        v.push(e);
                    }
                    if n2.sqrt() >= crate::data::MIN_NEIGHBOR_DISTANCE {
                        break;
                    }
                    v.truncate(start);
                    n2 = 0.0;
                }
                norms.push(n2.sqrt());
            }
            Ok((v, norms))
        };
        let (nb1, d1) = noise(sigma_b)?;
        let (nu, _) = noise(sigma_u)?;
        let (nb2, d2) = noise(sigma_b)?;
        let c = |v: Vec<f64>| tape.constant(hshape.clone(), v);
        let h_nb = h.add(c(nb1)?)?;
        let u = h.add(c(nu)?)?;
        let u_nb = u.add(c(nb2)?)?;
        let stacked = tape.concat_rows(&[h, h_nb, u, u_nb])?;
        let n = self.model.spec().layers.len();
        let p = self.model.forward_range(params, stacked, at, n)?.softmax()?;
        let rows = |k: usize| (k * b..(k + 1) * b).collect::<Vec<_>>();
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let sup = p.select_rows(&rows(0))?.cross_entropy(&labels)?.sum()?.scale(scale)?;
        let inv: Vec<f64> = d1.iter().chain(&d2).map(|d| 1.0 / d).collect();
        let centers = p.select_rows(&[rows(0), rows(2)].concat())?;
        let nbrs = p.select_rows(&[rows(1), rows(3)].concat())?;
        let w = tape.constant(vec![2 * b], inv)?;
        let reg = nbrs.sub(centers)?.row_norm()?.mul(w)?.sum()?;
        let br = LossBreakdown::new(sup.item()?, reg.item()? * scale, lambda);
        let total = sup.add(reg.scale(lambda * scale)?)?;
        Ok((total, br))
    }

    /// Serializes model, optimizer state, epoch counter and log.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = json!({
            "kind": "train_state",
            "next_epoch": self.next_epoch,
            "optimizer_t": self.optimizer.t,
            "log": self.log,
        });
        self.model.to_container(meta, &self.optimizer.tensors(&self.model))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (model, meta, extra) = Model::from_container(bytes)?;
        if meta.get("kind").and_then(Value::as_str) != Some("train_state") {
            return Err(Error::Format("checkpoint carries no training state".into()));
        }
        let Value::Object(meta) = meta else {
            return Err(Error::Format("training state metadata is not an object".into()));
        };
        let next_epoch: usize = io::field(&meta, "next_epoch")?;
        let t: u64 = io::field(&meta, "optimizer_t")?;
        let log: TrainLog = io::field(&meta, "log")?;
        let optimizer = Optimizer::from_tensors(log.config.optimizer.clone(), t, &model, &extra)?;
        Ok(Trainer {
            model,
            optimizer,
            next_epoch,
            log,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trainer::from_bytes(&std::fs::read(path)?)
    }
}

/// Splits a step into forward passes of at most [`MAX_ROWS`] rows. A group
/// whose neighbors do not fit is cut into several slices that each repeat
/// the center; only the first slice carries the supervised term.
fn plan_slices<'a>(
    psis: &'a [Vec<f64>],
    labels: &[Option<usize>],
    neighbors: &'a [Vec<f64>],
    d: usize,
    with_neighbors: bool,
) -> Vec<Vec<GroupSlice<'a>>> {
    let mut chunks = Vec::new();
    let mut cur: Vec<GroupSlice<'a>> = Vec::new();
    let mut rows = 0;
    for ((psi, &label), nb) in psis.iter().zip(labels).zip(neighbors) {
        let nb: &[f64] = if with_neighbors { nb } else { &[] };
        let mut first = true;
        let mut rest = nb;
        loop {
            let room = MAX_ROWS - rows;
            let need = if rest.is_empty() { 1 } else { 2 };
            if room < need {
                chunks.push(std::mem::take(&mut cur));
                rows = 0;
                continue;
            }
            let take = (rest.len() / d).min(room - 1);
            cur.push(GroupSlice {
                psi,
                label,
                neighbors: &rest[..take * d],
                with_sup: first,
            });
            rows += 1 + take;
            first = false;
            rest = &rest[take * d..];
            if rest.is_empty() {
                break;
            }
        }
    }
    if !cur.is_empty() {
        chunks.push(cur);
    }
    chunks
}

fn accumulate<'t>(grads: &mut Option<Vec<Vec<f64>>>, tape: &'t Tape, total: Var<'t>, params: &[Var<'t>]) -> Result<()> {
    let g = tape.vjp(total, &[1.0])?;
    match grads {
        None => *grads = Some(params.iter().map(|p| g.wrt(*p)).collect()),
        Some(acc) => {
            for (a, p) in acc.iter_mut().zip(params) {
                if let Some(gp) = g.get(*p) {
                    a.iter_mut().zip(gp).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok(())
}

fn add_breakdown(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        sup: a.sup + b.sup,
        reg: a.reg + b.reg,
        total: a.total + b.total,
        lambda: b.lambda,
    }
}

fn mean_breakdown(s: LossBreakdown, steps: usize, lambda: f64) -> LossBreakdown {
    let n = steps.max(1) as f64;
    LossBreakdown::new(s.sup / n, s.reg / n, lambda)
}

fn abort(epoch: usize, entry: usize, br: &LossBreakdown) -> Error {
    Error::Abort(format!(
        "non-finite loss at epoch {epoch}, entry {entry}: sup={} reg={} total={} lambda={}",
        br.sup, br.reg, br.total, br.lambda
    ))
}

/// Activations of every point at layer boundary `at`, flattened.
fn intermediate(model: &Model, data: &LabeledSet, at: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(MAX_ROWS) {
        let (h, _) = model.forward_split(&data.batch(c), at)?;
        out.extend(h.into_data());
    }
    Ok(out)
}

pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<f64> {
    let pred = predict_flat(model, set.points())?;
    let ok = pred.iter().zip(set.labels()).filter(|(p, y)| p == y).count();
    Ok(ok as f64 / set.len().max(1) as f64)
}

/// Builds a group: `(ψ_k, N_b fresh neighbors)` as flat vectors.
pub fn make_group(psi: &[f64], noise: &NoiseConfig, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    noise.validate()?;
    Ok((psi.to_vec(), gen_neighbors(psi, noise.sigma_b, noise.n_b, rng)?))
}

pub fn fit(model: Model, data: &CombinedDataset, val: Option<&LabeledSet>, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(data, val, cfg.epochs)?;
    Ok((t.model, t.log))
}

pub fn fit_adversarial(model: Model, data: &CombinedDataset, val: Option<&LabeledSet>, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if cfg.adversarial.is_none() {
        return Err(Error::Config("adversarial training needs an attack config".into()));
    }
    fit(model, data, val, cfg)
}

pub fn fit_injected(model: Model, data: &LabeledSet, val: Option<&LabeledSet>, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run_injected(data, val, cfg.epochs)?;
    Ok((t.model, t.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![w]).unwrap()]
    }

    #[test]
    fn sgd_examples() {
        let mut p = one_param(1.0);
        let mut v = vec![vec![0.0]];
        sgd_step(&mut p, &[vec![2.0]], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);

        let mut p = one_param(1.0);
        sgd_step(&mut p, &[vec![0.0]], &mut v.clone(), 0.1, 0.0, 0.0);
        assert_eq!(p[0].data()[0], 1.0);

        let mut p = one_param(0.0);
        let mut v = vec![vec![0.0]];
        sgd_step(&mut p, &[vec![1.0]], &mut v, 0.1, 0.9, 0.0);
        let w1 = p[0].data()[0];
        sgd_step(&mut p, &[vec![1.0]], &mut v, 0.1, 0.9, 0.0);
        assert!(((w1 - p[0].data()[0]) - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = one_param(0.5);
        let (mut m, mut v, mut t) = (vec![vec![0.0]], vec![vec![0.0]], 0);
        adam_step(&mut p, &[vec![3.0]], &mut m, &mut v, &mut t, 1e-3, 0.9, 0.999, 1e-8, 0.0);
        assert!((0.5 - p[0].data()[0] - 1e-3).abs() < 1e-10);
        let mut p = one_param(0.5);
        adam_step(&mut p, &[vec![0.0]], &mut vec![vec![0.0]], &mut vec![vec![0.0]], &mut 0, 1e-3, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(p[0].data()[0], 0.5);
    }

    #[test]
    fn slices_respect_row_cap() {
        let psis = vec![vec![0.0]; 3];
        let labels = vec![Some(0), None, Some(1)];
        let nbs = vec![vec![1.0; 300], vec![1.0; 10], vec![1.0; 5]];
        let plan = plan_slices(&psis, &labels, &nbs, 1, true);
        let mut total_nb = 0;
        let mut sup = 0;
        for chunk in &plan {
            let rows: usize = chunk.iter().map(|s| 1 + s.neighbors.len()).sum();
            assert!(rows <= MAX_ROWS);
            total_nb += chunk.iter().map(|s| s.neighbors.len()).sum::<usize>();
            sup += chunk.iter().filter(|s| s.with_sup).count();
        }
        assert_eq!(total_nb, 315);
        assert_eq!(sup, 3);
    }
}
