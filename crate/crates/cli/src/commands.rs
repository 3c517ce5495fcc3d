//! Subcommand implementations. Commands share state only through files
//! under the output directory.

use std::path::{Path, PathBuf};

use bm_core::attack::{rho_adv_report, robust_accuracy, RobustnessReport};
use bm_core::data::{
    assemble, gen_2d_points, gen_unlabeled, load_idx_unlabeled, load_mnist, mu_pair, CombinedDataset, LabeledSet,
    MnistOptions, NoiseConfig, Normalization, UnlabeledSet,
};
use bm_core::io;
use bm_core::model::Model;
use bm_core::rng::RngStream;
use bm_core::tensor::Tensor;
use bm_core::train::{accuracy, TrainConfig, Trainer};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{DatasetConfig, Experiment, RhoSpec};
use crate::error::{CliError, Result};
use crate::output::{mean_stderr, read_csv, read_json, seed_list, write_bytes, write_json, write_text, Csv};
use crate::svg;

/// Everything a training run consumes for one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub eval: LabeledSet,
    pub noise: NoiseConfig,
    pub normalization: Normalization,
    pub mu_pair: Option<f64>,
}

impl SeedData {
    pub fn combined(&self) -> Result<CombinedDataset> {
        Ok(assemble(&self.labeled, &self.unlabeled)?)
    }
}

pub fn data_dir(exp: &Experiment, seed: u64) -> PathBuf {
    exp.out.join("data").join(format!("seed-{seed}"))
}

pub fn run_dir(exp: &Experiment, seed: u64) -> PathBuf {
    exp.out.join("runs").join(format!("seed-{seed}"))
}

pub fn report_dir(exp: &Experiment, seed: u64) -> PathBuf {
    exp.out.join("reports").join(format!("seed-{seed}"))
}

fn for_seeds<T: Send>(exp: &Experiment, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    exp.config.seeds.par_iter().map(|&s| f(s)).collect()
}

/// Labeled, evaluation and (unscaled) unlabeled data for `seed`, with σ
/// multiplied by `sigma_mult`.
pub fn generate(exp: &Experiment, seed: u64, sigma_mult: f64) -> Result<SeedData> {
    let c = &exp.config;
    let (labeled, eval, normalization) = match &c.dataset {
        DatasetConfig::Points2d { .. } => {
            let x = gen_2d_points(&exp.clusters(), seed)?;
            (x.clone(), x, Normalization::identity())
        }
        DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subset_per_class,
            test_limit,
        } => {
            let norm = Normalization::from_idx(&exp.resolve(train_images))?;
            let opts = MnistOptions {
                subset_per_class: *subset_per_class,
                seed,
                normalization: Some(norm),
            };
            let (x, _) = load_mnist(&exp.resolve(train_images), &exp.resolve(train_labels), &opts)?;
            let test_opts = MnistOptions {
                normalization: Some(norm),
                ..Default::default()
            };
            let (t, _) = load_mnist(&exp.resolve(test_images), &exp.resolve(test_labels), &test_opts)?;
            let t = match test_limit {
                Some(n) => t.subset(&(0..(*n).min(t.len())).collect::<Vec<_>>()),
                None => t,
            };
            (x, t, norm)
        }
    };
    let (noise, mu) = resolve_noise(exp, &labeled, seed)?;
    let noise = NoiseConfig {
        sigma_u: noise.sigma_u * sigma_mult,
        sigma_b: noise.sigma_b * sigma_mult,
        ..noise
    };
    let unlabeled = gen_unlabeled(&labeled, &noise, &mut RngStream::new(seed, "unlabeled", 0))?;
    Ok(SeedData {
        labeled,
        unlabeled,
        eval,
        noise,
        normalization,
        mu_pair: mu,
    })
}

fn resolve_noise(exp: &Experiment, x: &LabeledSet, seed: u64) -> Result<(NoiseConfig, Option<f64>)> {
    let n = &exp.config.noise;
    let (cfg, mu) = match (n.sigma_u, n.sigma_b) {
        (Some(u), b) => (
            NoiseConfig {
                sigma_u: u,
                sigma_b: b.unwrap_or(u / 10.0),
                n_u: n.n_u,
                n_b: n.n_b,
            },
            None,
        ),
        (None, _) => {
            let mu = mu_pair(x, n.mu_sample_cap, &mut RngStream::new(seed, "mu-pair", 0))?;
            (NoiseConfig::from_mu(mu, n.n_u, n.n_b), Some(mu))
        }
    };
    cfg.validate()?;
    Ok((cfg, mu))
}

fn stamp(exp: &Experiment, seed: u64) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config_sha256".into(), exp.hash.clone().into());
    m.insert("seed".into(), seed.into());
    m
}

fn data_manifest(exp: &Experiment, seed: u64, d: &SeedData) -> Map<String, Value> {
    let mut m = stamp(exp, seed);
    m.insert("noise".into(), json!(d.noise));
    m.insert("sigma_u".into(), d.noise.sigma_u.into());
    m.insert("sigma_b".into(), d.noise.sigma_b.into());
    m.insert("n_u".into(), d.noise.n_u.into());
    m.insert("n_b".into(), d.noise.n_b.into());
    m.insert("normalization".into(), json!(d.normalization));
    m.insert("mu_pair".into(), json!(d.mu_pair));
    m.insert("dataset".into(), json!(exp.config.dataset));
    m
}

/// `gen`: writes the labeled, unlabeled (when `N_u > 0`) and evaluation
/// caches for every seed.
pub fn cmd_gen(exp: &Experiment) -> Result<()> {
    for_seeds(exp, |seed| {
        let d = generate(exp, seed, 1.0)?;
        let dir = data_dir(exp, seed);
        let m = data_manifest(exp, seed, &d);
        write_bytes(&dir.join("labeled.bmck"), &bm_core::data::encode_labeled(&d.labeled, m.clone()))?;
        write_bytes(&dir.join("eval.bmck"), &bm_core::data::encode_labeled(&d.eval, m.clone()))?;
        let upath = dir.join("unlabeled.bmck");
        if d.noise.n_u > 0 {
            write_bytes(&upath, &bm_core::data::encode_unlabeled(&d.unlabeled, m))?;
        } else if upath.exists() {
            std::fs::remove_file(&upath)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Map<String, Value>, Vec<f64>)> {
    if !path.is_file() {
        return Err(CliError::Io(format!("missing {}; run `bm gen` first", path.display())));
    }
    Ok(io::read(path)?)
}

fn labeled_from(m: &Map<String, Value>, values: Vec<f64>) -> Result<LabeledSet> {
    Ok(LabeledSet::new(
        io::field(m, "shape")?,
        values,
        io::field(m, "labels")?,
        io::field(m, "class_count")?,
    )
    .map_err(|e| CliError::Io(e.to_string()))?)
}

fn check_hash(exp: &Experiment, m: &Map<String, Value>, path: &Path) -> Result<()> {
    if m.get("config_sha256").and_then(Value::as_str) != Some(exp.hash.as_str()) {
        return Err(CliError::Config(format!(
            "{} was produced by a different config; rerun the producing command",
            path.display()
        )));
    }
    Ok(())
}

/// Loads the caches written by `gen`.
pub fn load_seed_data(exp: &Experiment, seed: u64) -> Result<SeedData> {
    let dir = data_dir(exp, seed);
    let lpath = dir.join("labeled.bmck");
    let (m, values) = read_container(&lpath)?;
    check_hash(exp, &m, &lpath)?;
    let labeled = labeled_from(&m, values)?;
    let (em, evalues) = read_container(&dir.join("eval.bmck"))?;
    let eval = labeled_from(&em, evalues)?;
    let noise: NoiseConfig = io::field(&m, "noise")?;
    let normalization: Normalization = io::field(&m, "normalization")?;
    let mu_pair: Option<f64> = io::field(&m, "mu_pair")?;
    let unlabeled = if noise.n_u > 0 {
        bm_core::data::load_external_unlabeled(&dir.join("unlabeled.bmck"), labeled.shape())?
    } else {
        UnlabeledSet::new(labeled.shape().to_vec(), Vec::new())?
    };
    Ok(SeedData {
        labeled,
        unlabeled,
        eval,
        noise,
        normalization,
        mu_pair,
    })
}

pub fn train_config(exp: &Experiment, seed: u64, noise: NoiseConfig, lambda: f64) -> TrainConfig {
    let t = &exp.config.train;
    TrainConfig {
        lambda,
        epochs: t.epochs,
        optimizer: t.optimizer.clone(),
        groups_per_step: t.groups_per_step,
        adversarial: t.adversarial.clone(),
        injection: t.injection.clone(),
        seed,
        noise,
    }
}

/// Trains one model in `dir`, resuming from `state.bmck` when it holds a
/// run of the same config. Writes `model.bmck` and `log.jsonl`.
pub fn train_in(exp: &Experiment, seed: u64, data: &SeedData, cfg: TrainConfig, dir: &Path) -> Result<Trainer> {
    let spec = exp.config.model.spec(data.labeled.shape())?;
    let state = dir.join("state.bmck");
    let resumed = if state.is_file() {
        let t = Trainer::load(&state)?;
        (t.config() == &cfg && t.model.spec() == &spec).then_some(t)
    } else {
        None
    };
    let mut t = match resumed {
        Some(t) => t,
        None => {
            let mut t = Trainer::new(Model::new(spec, seed)?, cfg.clone())?;
            if let Value::Object(m) = &mut t.log.metadata {
                m.extend(stamp(exp, seed));
            }
            t
        }
    };
    let every = exp.config.train.checkpoint_every.unwrap_or(cfg.epochs).max(1);
    let combined = data.combined()?;
    while !t.is_done() {
        if cfg.injection.is_some() {
            t.run_injected(&data.labeled, None, every)?;
        } else {
            t.run(&combined, None, every)?;
        }
        write_bytes(&state, &t.to_bytes())?;
    }
    let meta = json!({
        "config_sha256": exp.hash,
        "seed": seed,
        "train": t.log.config,
        "label": t.log.metadata.get("label"),
    });
    write_bytes(&dir.join("model.bmck"), &t.model.to_container(meta, &[]))?;
    write_text(&dir.join("log.jsonl"), &t.log.to_jsonl())?;
    Ok(t)
}

/// `train`: one checkpoint and log per seed.
pub fn cmd_train(exp: &Experiment) -> Result<()> {
    for_seeds(exp, |seed| {
        let data = load_seed_data(exp, seed)?;
        let cfg = train_config(exp, seed, data.noise, exp.config.train.lambda);
        train_in(exp, seed, &data, cfg, &run_dir(exp, seed))?;
        Ok(())
    })?;
    Ok(())
}

pub fn load_model(exp: &Experiment, seed: u64) -> Result<Model> {
    let path = run_dir(exp, seed).join("model.bmck");
    if !path.is_file() {
        return Err(CliError::Io(format!("missing {}; run `bm train` first", path.display())));
    }
    let (model, meta, _) = Model::from_container(&std::fs::read(&path)?)?;
    if meta.get("config_sha256").and_then(Value::as_str) != Some(exp.hash.as_str()) {
        return Err(CliError::Config(format!("{} was trained under a different config", path.display())));
    }
    Ok(model)
}

fn head(set: &LabeledSet, limit: Option<usize>) -> LabeledSet {
    match limit {
        Some(n) if n < set.len() => set.subset(&(0..n).collect::<Vec<_>>()),
        _ => set.clone(),
    }
}

fn check_shapes(model: &Model, set: &LabeledSet) -> Result<()> {
    if model.spec().input_shape != set.shape() || model.class_count() < set.class_count() {
        return Err(CliError::Config(format!(
            "model input {:?} with {} classes cannot evaluate data of shape {:?} with {} classes",
            model.spec().input_shape,
            model.class_count(),
            set.shape(),
            set.class_count()
        )));
    }
    Ok(())
}

/// Clean accuracy and, when configured, `ρ_adv` of one model.
pub fn evaluate(exp: &Experiment, seed: u64, model: &Model, eval: &LabeledSet) -> Result<(Value, Option<Csv>)> {
    check_shapes(model, eval)?;
    let acc = accuracy(model, eval)?;
    let mut v = stamp(exp, seed);
    v.insert("format_version".into(), 1.into());
    v.insert("model_hash".into(), model.hash().into());
    v.insert("accuracy".into(), acc.into());
    v.insert("eval_points".into(), eval.len().into());
    let mut samples = None;
    match &exp.config.rho_adv {
        Some(spec) => {
            let (rho, rows, n) = rho_of(model, eval, spec)?;
            v.insert(
                "rho_adv".into(),
                json!({"value": rho, "points": n, "skipped": rows.iter().filter(|r| r.rel_rho.is_none()).count(), "deepfool": spec.deepfool}),
            );
            let mut c = Csv::new(&exp.hash, &seed.to_string(), &["sample_index", "l2_delta", "rel_rho"]);
            for r in rows {
                c.row(&[
                    r.sample_index.to_string(),
                    r.l2_delta.to_string(),
                    r.rel_rho.map(|x| x.to_string()).unwrap_or_default(),
                ]);
            }
            samples = Some(c);
        }
        None => {
            v.insert("rho_adv".into(), Value::Null);
        }
    }
    Ok((Value::Object(v), samples))
}

fn rho_of(model: &Model, eval: &LabeledSet, spec: &RhoSpec) -> Result<(f64, Vec<bm_core::attack::SampleRow>, usize)> {
    let set = head(eval, spec.limit);
    let (rho, rows) = rho_adv_report(model, &set, &spec.deepfool)?;
    Ok((rho, rows, set.len()))
}

fn report_json(exp: &Experiment, seed: u64, r: &RobustnessReport, name: &str, points: usize) -> Value {
    let mut v = match serde_json::to_value(r).expect("report serializes") {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    v.extend(stamp(exp, seed));
    v.insert("name".into(), name.into());
    v.insert("points".into(), points.into());
    Value::Object(v)
}

/// `attack`: per-seed robustness reports plus cross-seed aggregates.
pub fn cmd_attack(exp: &Experiment) -> Result<()> {
    let per_seed = for_seeds(exp, |seed| {
        let model = load_model(exp, seed)?;
        let data = load_seed_data(exp, seed)?;
        let dir = report_dir(exp, seed);
        let (ev, samples) = evaluate(exp, seed, &model, &data.eval)?;
        write_json(&dir.join("evaluation.json"), &ev)?;
        if let Some(c) = samples {
            c.write(&dir.join("rho_adv-samples.csv"))?;
        }
        let mut tables = Vec::new();
        for sweep in &exp.config.attacks {
            let set = head(&data.eval, sweep.limit);
            let r = robust_accuracy(&model, &set, &sweep.attack, &sweep.epsilons, seed)?;
            write_json(&dir.join(format!("{}.json", sweep.name)), &report_json(exp, seed, &r, &sweep.name, set.len()))?;
            let mut c = Csv::new(&exp.hash, &seed.to_string(), &["epsilon", "robust_accuracy"]);
            for row in &r.table {
                c.row(&[row.epsilon.to_string(), row.robust_accuracy.to_string()]);
            }
            c.write(&dir.join(format!("{}.csv", sweep.name)))?;
            if !r.samples.is_empty() {
                let mut c = Csv::new(&exp.hash, &seed.to_string(), &["sample_index", "l2_delta", "rel_rho"]);
                for s in &r.samples {
                    c.row(&[
                        s.sample_index.to_string(),
                        s.l2_delta.to_string(),
                        s.rel_rho.map(|x| x.to_string()).unwrap_or_default(),
                    ]);
                }
                c.write(&dir.join(format!("{}-samples.csv", sweep.name)))?;
            }
            tables.push(r.table);
        }
        Ok((ev, tables))
    })?;

    let seeds = seed_list(&exp.config.seeds);
    let agg_dir = exp.out.join("reports");
    for (k, sweep) in exp.config.attacks.iter().enumerate() {
        let mut c = Csv::new(&exp.hash, &seeds, &["epsilon", "mean_robust_acc", "stderr", "n_seeds"]);
        for (i, &eps) in sweep.epsilons.iter().enumerate() {
            let v: Vec<f64> = per_seed.iter().map(|(_, t)| t[k][i].robust_accuracy).collect();
            let (m, se) = mean_stderr(&v);
            c.row(&[eps.to_string(), m.to_string(), se.to_string(), v.len().to_string()]);
        }
        c.write(&agg_dir.join(format!("{}-aggregate.csv", sweep.name)))?;
    }
    let mut c = Csv::new(&exp.hash, &seeds, &["metric", "mean", "stderr", "n_seeds"]);
    let acc: Vec<f64> = per_seed.iter().map(|(e, _)| e["accuracy"].as_f64().unwrap()).collect();
    let (m, se) = mean_stderr(&acc);
    c.row(&["accuracy".into(), m.to_string(), se.to_string(), acc.len().to_string()]);
    if exp.config.rho_adv.is_some() {
        let rho: Vec<f64> = per_seed.iter().map(|(e, _)| e["rho_adv"]["value"].as_f64().unwrap()).collect();
        let (m, se) = mean_stderr(&rho);
        c.row(&["rho_adv".into(), m.to_string(), se.to_string(), rho.len().to_string()]);
    }
    c.write(&agg_dir.join("evaluation-aggregate.csv"))?;
    Ok(())
}

/// Class-`class` SoftMax scores on the configured grid, `y`-major.
pub fn surface_grid(model: &Model, xs: &[f64], ys: &[f64], class: usize) -> Result<Vec<f64>> {
    if model.spec().input_numel() != 2 {
        return Err(CliError::Config(format!(
            "surface needs a 2-input model, got input {:?}",
            model.spec().input_shape
        )));
    }
    if class >= model.class_count() {
        return Err(CliError::Config(format!("class {class} out of range")));
    }
    let mut pts = Vec::with_capacity(xs.len() * ys.len() * 2);
    for &y in ys {
        for &x in xs {
            pts.extend([x, y]);
        }
    }
    let n = model.class_count();
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for chunk in pts.chunks(2 * 4096) {
        let p = model.predict_proba(&Tensor::new(vec![chunk.len() / 2, 2], chunk.to_vec())?)?;
        out.extend(p.data().chunks(n).map(|r| r[class]));
    }
    Ok(out)
}

fn axis(range: [f64; 2], n: usize) -> Vec<f64> {
    (0..n).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64).collect()
}

/// `surface`: grid CSV and SVG contour plot per seed.
pub fn cmd_surface(exp: &Experiment) -> Result<()> {
    let spec = exp
        .config
        .surface
        .clone()
        .ok_or_else(|| CliError::Config("no `surface` section in config".into()))?;
    for_seeds(exp, |seed| {
        let model = load_model(exp, seed)?;
        let data = load_seed_data(exp, seed)?;
        let xs = axis(spec.x_range, spec.resolution[0]);
        let ys = axis(spec.y_range, spec.resolution[1]);
        let score = surface_grid(&model, &xs, &ys, spec.class)?;
        let dir = exp.out.join("surface");
        let mut c = Csv::new(&exp.hash, &seed.to_string(), &["x", "y", "score"]);
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                c.row(&[x.to_string(), y.to_string(), score[j * xs.len() + i].to_string()]);
            }
        }
        c.write(&dir.join(format!("seed-{seed}.csv")))?;
        let points: Vec<(f64, f64, usize)> = (0..data.labeled.len())
            .map(|k| {
                let p = data.labeled.point(k);
                (p[0], p[1], data.labeled.label(k))
            })
            .collect();
        let grid = svg::Grid {
            xs: &xs,
            ys: &ys,
            score: &score,
        };
        let comment = format!("config_sha256={} seed={seed} class={}", exp.hash, spec.class);
        write_text(&dir.join(format!("seed-{seed}.svg")), &svg::render(&grid, &points, &comment))?;
        Ok(())
    })?;
    Ok(())
}

/// `sigma-sweep`: retrains at each σ multiplier and tabulates `ρ_adv` and
/// accuracy.
pub fn cmd_sigma_sweep(exp: &Experiment) -> Result<()> {
    let spec = exp
        .config
        .sigma_sweep
        .clone()
        .ok_or_else(|| CliError::Config("no `sigma_sweep` section in config".into()))?;
    let rho = exp.config.rho_adv.clone().unwrap_or_default();
    for_seeds(exp, |seed| {
        let mut c = Csv::new(
            &exp.hash,
            &seed.to_string(),
            &["multiplier", "sigma_u", "sigma_b", "rho_adv", "test_accuracy"],
        );
        for &m in &spec.multipliers {
            let data = generate(exp, seed, m)?;
            let cfg = train_config(exp, seed, data.noise, exp.config.train.lambda);
            let dir = exp.out.join("sigma_sweep").join(format!("x{m}")).join(format!("seed-{seed}"));
            let t = train_in(exp, seed, &data, cfg, &dir)?;
            let (r, _, _) = rho_of(&t.model, &data.eval, &rho)?;
            let acc = accuracy(&t.model, &data.eval)?;
            c.row(&[
                m.to_string(),
                data.noise.sigma_u.to_string(),
                data.noise.sigma_b.to_string(),
                r.to_string(),
                acc.to_string(),
            ]);
        }
        c.write(&exp.out.join("sigma_sweep").join(format!("seed-{seed}.csv")))
    })?;
    Ok(())
}

/// `lambda-sweep`: validation accuracy per λ on a held-out split of the
/// labeled set. Reports the frontier; does not pick a value.
pub fn cmd_lambda_sweep(exp: &Experiment) -> Result<()> {
    let spec = exp
        .config
        .lambda_sweep
        .clone()
        .ok_or_else(|| CliError::Config("no `lambda_sweep` section in config".into()))?;
    for_seeds(exp, |seed| {
        let full = generate(exp, seed, 1.0)?;
        let (train, val) = full.labeled.split_validation(spec.validation_fraction, seed)?;
        let unlabeled = gen_unlabeled(&train, &full.noise, &mut RngStream::new(seed, "unlabeled", 0))?;
        let data = SeedData {
            labeled: train,
            unlabeled,
            eval: val.clone(),
            ..full
        };
        let mut c = Csv::new(
            &exp.hash,
            &seed.to_string(),
            &["lambda", "val_accuracy", "final_sup", "final_reg"],
        );
        for &lambda in &spec.lambdas {
            let cfg = train_config(exp, seed, data.noise, lambda);
            let dir = exp.out.join("lambda_sweep").join(format!("l{lambda}")).join(format!("seed-{seed}"));
            let t = train_in(exp, seed, &data, cfg, &dir)?;
            let last = t.log.records.last().map(|r| r.loss).unwrap_or_default();
            c.row(&[
                lambda.to_string(),
                accuracy(&t.model, &val)?.to_string(),
                last.sup.to_string(),
                last.reg.to_string(),
            ]);
        }
        c.write(&exp.out.join("lambda_sweep").join(format!("seed-{seed}.csv")))
    })?;
    Ok(())
}

/// Per-class mean and spread of the predicted probabilities over a set of
/// points, and the standard deviation across the class means.
#[derive(Clone, Debug, PartialEq)]
pub struct UucStats {
    pub class_mean: Vec<f64>,
    pub class_std: Vec<f64>,
    pub std_of_means: f64,
}

pub fn uuc_stats(model: &Model, points: &Tensor) -> Result<UucStats> {
    let n = model.class_count();
    let rows = points.shape()[0];
    if rows == 0 {
        return Err(CliError::Config("no foreign points to evaluate".into()));
    }
    let d: usize = points.shape()[1..].iter().product();
    let mut probs = Vec::with_capacity(rows * n);
    for chunk in points.data().chunks(d * 256) {
        let mut shape = points.shape().to_vec();
        shape[0] = chunk.len() / d;
        probs.extend(model.predict_proba(&Tensor::new(shape, chunk.to_vec())?)?.into_data());
    }
    let r = rows as f64;
    let class_mean: Vec<f64> = (0..n).map(|c| probs.iter().skip(c).step_by(n).sum::<f64>() / r).collect();
    let class_std: Vec<f64> = (0..n)
        .map(|c| {
            let m = class_mean[c];
            (probs.iter().skip(c).step_by(n).map(|p| (p - m) * (p - m)).sum::<f64>() / r).sqrt()
        })
        .collect();
    let mm = class_mean.iter().sum::<f64>() / n as f64;
    let std_of_means = (class_mean.iter().map(|m| (m - mm) * (m - mm)).sum::<f64>() / n as f64).sqrt();
    Ok(UucStats {
        class_mean,
        class_std,
        std_of_means,
    })
}

/// `uuc`: prediction statistics on a foreign image set.
pub fn cmd_uuc(exp: &Experiment) -> Result<()> {
    let spec = exp
        .config
        .uuc
        .clone()
        .ok_or_else(|| CliError::Config("no `uuc` section in config".into()))?;
    let stats = for_seeds(exp, |seed| {
        let model = load_model(exp, seed)?;
        let data = load_seed_data(exp, seed)?;
        let u = load_idx_unlabeled(&exp.resolve(&spec.images), &data.normalization)?;
        if u.shape() != model.spec().input_shape.as_slice() {
            return Err(CliError::Config(format!(
                "foreign images of shape {:?} do not fit model input {:?}",
                u.shape(),
                model.spec().input_shape
            )));
        }
        let n = spec.limit.unwrap_or(u.len()).min(u.len());
        let t = u.batch(&(0..n).collect::<Vec<_>>());
        let s = uuc_stats(&model, &t)?;
        let mut c = Csv::new(&exp.hash, &seed.to_string(), &["class", "mean_probability", "std_probability"]);
        for (k, (m, sd)) in s.class_mean.iter().zip(&s.class_std).enumerate() {
            c.row(&[k.to_string(), m.to_string(), sd.to_string()]);
        }
        c.write(&exp.out.join("uuc").join(format!("seed-{seed}.csv")))?;
        Ok(s)
    })?;
    let mut c = Csv::new(&exp.hash, &seed_list(&exp.config.seeds), &["seed", "std_of_class_means"]);
    for (seed, s) in exp.config.seeds.iter().zip(&stats) {
        c.row(&[seed.to_string(), s.std_of_means.to_string()]);
    }
    c.write(&exp.out.join("uuc").join("summary.csv"))
}

/// `report`: collects whatever results exist into `report.json` and
/// returns a short text summary.
pub fn cmd_report(exp: &Experiment) -> Result<String> {
    let mut seeds = Vec::new();
    let mut text = format!("config {}\n", exp.hash);
    for &seed in &exp.config.seeds {
        let mut s = Map::new();
        s.insert("seed".into(), seed.into());
        let log = run_dir(exp, seed).join("log.jsonl");
        if log.is_file() {
            let body = std::fs::read_to_string(&log)?;
            let last: Option<Value> = body.lines().last().and_then(|l| serde_json::from_str(l).ok());
            s.insert("epochs_logged".into(), (body.lines().count().saturating_sub(1)).into());
            s.insert("final_epoch".into(), last.unwrap_or(Value::Null));
        }
        let dir = report_dir(exp, seed);
        let ev = dir.join("evaluation.json");
        if ev.is_file() {
            let v = read_json(&ev)?;
            text.push_str(&format!(
                "seed {seed}: accuracy {} rho_adv {}\n",
                v["accuracy"],
                v["rho_adv"].get("value").cloned().unwrap_or(Value::Null)
            ));
            s.insert("evaluation".into(), v);
        }
        let mut attacks = Map::new();
        for sweep in &exp.config.attacks {
            let p = dir.join(format!("{}.csv", sweep.name));
            if p.is_file() {
                let (_, rows) = read_csv(&p)?;
                attacks.insert(sweep.name.clone(), json!(rows));
            }
        }
        s.insert("attacks".into(), Value::Object(attacks));
        seeds.push(Value::Object(s));
    }
    let mut aggregates = Map::new();
    for name in exp.config.attacks.iter().map(|a| a.name.clone()).chain(["evaluation".to_string()]) {
        let p = exp.out.join("reports").join(format!("{name}-aggregate.csv"));
        if p.is_file() {
            let (header, rows) = read_csv(&p)?;
            text.push_str(&format!("{name}: {} rows\n", rows.len()));
            aggregates.insert(name, json!({"header": header, "rows": rows}));
        }
    }
    let uuc = exp.out.join("uuc").join("summary.csv");
    if uuc.is_file() {
        let (header, rows) = read_csv(&uuc)?;
        aggregates.insert("uuc".into(), json!({"header": header, "rows": rows}));
    }
    let v = json!({
        "format_version": 1,
        "config_sha256": exp.hash,
        "description": exp.config.description,
        "seeds": seeds,
        "aggregates": aggregates,
    });
    write_json(&exp.out.join("report.json"), &v)?;
    Ok(text)
}
