//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use bm_core::attack::AttackConfig;
use bm_core::data::{default_2d_clusters, Cluster, NoiseConfig, MU_PAIR_SAMPLE_CAP};
use bm_core::model::{lenet_spec, mlp_spec, ModelSpec};
use bm_core::tensor::Activation;
use bm_core::train::{InjectionConfig, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free text; JSON has no comments.
    #[serde(default)]
    pub description: String,
    pub dataset: DatasetConfig,
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
    #[serde(default)]
    pub attacks: Vec<AttackSweep>,
    #[serde(default)]
    pub rho_adv: Option<RhoSpec>,
    #[serde(default)]
    pub surface: Option<SurfaceSpec>,
    #[serde(default)]
    pub sigma_sweep: Option<SigmaSweepSpec>,
    #[serde(default)]
    pub lambda_sweep: Option<LambdaSweepSpec>,
    #[serde(default)]
    pub uuc: Option<UucSpec>,
    pub seeds: Vec<u64>,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Points2d {
        #[serde(default)]
        clusters: Option<Vec<Cluster>>,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        subset_per_class: Option<usize>,
        /// Evaluate on the first this-many test points.
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub n_u: usize,
    pub n_b: usize,
    /// Fixed σ_u; derived from μ_pair when absent.
    #[serde(default)]
    pub sigma_u: Option<f64>,
    /// Fixed σ_b; σ_u/10 when absent.
    #[serde(default)]
    pub sigma_b: Option<f64>,
    #[serde(default = "default_cap")]
    pub mu_sample_cap: usize,
}

fn default_cap() -> usize {
    MU_PAIR_SAMPLE_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp { widths: Vec<usize>, activation: Activation },
    Lenet { activation: Activation },
    Custom { spec: ModelSpec },
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize]) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Mlp { widths, activation } => mlp_spec(widths, *activation)?,
            ModelConfig::Lenet { activation } => lenet_spec(input_shape, *activation)?,
            ModelConfig::Custom { spec } => spec.clone(),
        };
        if spec.input_shape != input_shape {
            return Err(CliError::Config(format!(
                "model input {:?} does not match data shape {input_shape:?}",
                spec.input_shape
            )));
        }
        spec.shapes()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub lambda: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_groups")]
    pub groups_per_step: usize,
    #[serde(default)]
    pub adversarial: Option<AttackConfig>,
    #[serde(default)]
    pub injection: Option<InjectionConfig>,
    /// Save resumable state every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_groups() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSweep {
    pub name: String,
    pub attack: AttackConfig,
    pub epsilons: Vec<f64>,
    /// Attack only the first this-many evaluation points.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoSpec {
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "deepfool_l2")]
    pub deepfool: AttackConfig,
}

fn deepfool_l2() -> AttackConfig {
    AttackConfig::deepfool(bm_core::attack::DeepfoolNorm::L2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub resolution: [usize; 2],
    #[serde(default)]
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSweepSpec {
    pub multipliers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSweepSpec {
    pub lambdas: Vec<f64>,
    #[serde(default = "default_val")]
    pub validation_fraction: f64,
}

fn default_val() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UucSpec {
    /// IDX image file of out-of-distribution images.
    pub images: PathBuf,
    #[serde(default)]
    pub limit: Option<usize>,
}

/// A parsed config with its paths resolved.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub hash: String,
}

impl Experiment {
    pub fn load(path: &Path, out: Option<&Path>, seeds: Option<&[u64]>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Experiment::from_str(&text, &base, out, seeds)
    }

    pub fn from_str(text: &str, base: &Path, out: Option<&Path>, seeds: Option<&[u64]>) -> Result<Self> {
        let mut config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(s) = seeds {
            config.seeds = s.to_vec();
        }
        let out = match (out, &config.out) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => base.join(o),
            (None, None) => base.join("out"),
        };
        let hash = config_hash(&config);
        let exp = Experiment {
            config,
            base: base.to_path_buf(),
            out,
            hash,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        let mut seen = c.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != c.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        let mut paths: Vec<&PathBuf> = Vec::new();
        if let DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &c.dataset
        {
            paths.extend([train_images, train_labels, test_images, test_labels]);
        }
        if let Some(u) = &c.uuc {
            paths.push(&u.images);
        }
        for p in paths {
            let r = self.resolve(p);
            if !r.is_file() {
                return Err(CliError::Config(format!("referenced file not found: {}", r.display())));
            }
        }
        if let (Some(u), Some(b)) = (c.noise.sigma_u, c.noise.sigma_b) {
            if !(u > 0.0 && b > 0.0) {
                return Err(CliError::Config("sigma_u and sigma_b must be > 0".into()));
            }
        }
        if c.noise.sigma_u.is_none() && c.noise.sigma_b.is_some() {
            return Err(CliError::Config("sigma_b needs sigma_u".into()));
        }
        if c.noise.n_b < 1 {
            return Err(CliError::Config("n_b must be ≥ 1".into()));
        }
        TrainConfig {
            lambda: c.train.lambda,
            epochs: c.train.epochs,
            optimizer: c.train.optimizer.clone(),
            groups_per_step: c.train.groups_per_step,
            adversarial: c.train.adversarial.clone(),
            injection: c.train.injection.clone(),
            seed: 0,
            noise: NoiseConfig {
                sigma_u: 1.0,
                sigma_b: 0.1,
                n_u: c.noise.n_u,
                n_b: c.noise.n_b,
            },
        }
        .validate()?;
        if c.train.checkpoint_every == Some(0) {
            return Err(CliError::Config("checkpoint_every must be ≥ 1".into()));
        }
        if let Some(s) = &c.surface {
            if s.resolution[0] < 2 || s.resolution[1] < 2 {
                return Err(CliError::Config("surface resolution must be ≥ 2 per axis".into()));
            }
            if !(s.x_range[0] < s.x_range[1] && s.y_range[0] < s.y_range[1]) {
                return Err(CliError::Config("surface ranges must be increasing".into()));
            }
        }
        if let Some(s) = &c.sigma_sweep {
            if s.multipliers.is_empty() || s.multipliers.iter().any(|m| !(*m > 0.0)) {
                return Err(CliError::Config("sigma multipliers must be > 0".into()));
            }
        }
        if let Some(s) = &c.lambda_sweep {
            if s.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(CliError::Config("sweep lambdas must be finite and ≥ 0".into()));
            }
            if s.lambdas.is_empty() || !(s.validation_fraction > 0.0 && s.validation_fraction < 1.0) {
                return Err(CliError::Config("lambda sweep needs lambdas and a fraction in (0, 1)".into()));
            }
        }
        for a in &c.attacks {
            a.attack.validate()?;
            if a.name.is_empty() || !a.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
                return Err(CliError::Config(format!("attack name {:?} must be [A-Za-z0-9_-]+", a.name)));
            }
        }
        let mut names: Vec<&str> = c.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != c.attacks.len() {
            return Err(CliError::Config("attack names must be distinct".into()));
        }
        Ok(())
    }

    pub fn clusters(&self) -> Vec<Cluster> {
        match &self.config.dataset {
            DatasetConfig::Points2d { clusters: Some(c) } => c.clone(),
            _ => default_2d_clusters(),
        }
    }
}

/// SHA-256 of the canonical JSON form with the seed list and output
/// directory removed, so per-seed files agree across seed selections.
pub fn config_hash(c: &ExperimentConfig) -> String {
    let mut c = c.clone();
    c.seeds.clear();
    c.out = None;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}
