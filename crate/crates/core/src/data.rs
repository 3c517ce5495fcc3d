//! Datasets: labeled sets, Gaussian unlabeled offspring, neighbors and the
//! combined training set, plus 2D blobs and IDX (MNIST) ingestion.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Labeled points stored row-major: point `i` is `points[i*d..(i+1)*d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    shape: Vec<usize>,
    points: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledSet {
    pub fn new(shape: Vec<usize>, points: Vec<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let d: usize = shape.iter().product();
        if shape.is_empty() || d == 0 {
            return Err(Error::Config(format!("invalid point shape {shape:?}")));
        }
        if points.len() != labels.len() * d {
            return Err(Error::Config(format!(
                "{} values for {} points of size {d}",
                points.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Config(format!("label {bad} ≥ class count {class_count}")));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("labeled set"));
        }
        Ok(LabeledSet {
            shape,
            points,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Batch tensor `[B, ..shape]` of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        batch_of(&self.shape, indices.iter().map(|&i| self.point(i)))
    }

    /// The whole set as one batch tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend(&self.shape);
        Tensor::new(shape, self.points.clone()).expect("validated on construction")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let points = indices.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledSet {
            shape: self.shape.clone(),
            points,
            labels,
            class_count: self.class_count,
        }
    }

    /// Seeded split into (train, validation) with `round(fraction·N)`
    /// validation points.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let perm = RngStream::new(seed, "validation", 0).permutation(self.len());
        let n_val = (fraction * self.len() as f64).round() as usize;
        let (val, train) = perm.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

fn batch_of<'a>(shape: &[usize], rows: impl Iterator<Item = &'a [f64]>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    let mut s = vec![n];
    s.extend(shape);
    Tensor::new(s, data).expect("rows come from a validated set")
}

/// Points without labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    shape: Vec<usize>,
    points: Vec<f64>,
}

impl UnlabeledSet {
    pub fn new(shape: Vec<usize>, points: Vec<f64>) -> Result<Self> {
        let d: usize = shape.iter().product();
        if shape.is_empty() || d == 0 || points.len() % d != 0 {
            return Err(Error::Config(format!("{} values do not tile shape {shape:?}", points.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unlabeled set"));
        }
        Ok(UnlabeledSet { shape, points })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        batch_of(&self.shape, indices.iter().map(|&i| self.point(i)))
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut shape = vec![self.len()];
        shape.extend(&self.shape);
        Tensor::new(shape, self.points.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_u: f64,
    pub sigma_b: f64,
    pub n_u: usize,
    pub n_b: usize,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) || !(self.sigma_b > 0.0 && self.sigma_b.is_finite()) {
            return Err(Error::Config(format!(
                "noise scales must be positive, got σ_u={} σ_b={}",
                self.sigma_u, self.sigma_b
            )));
        }
        if self.n_b < 1 {
            return Err(Error::Config("N_b must be ≥ 1".into()));
        }
        Ok(())
    }

    /// σ_u = 3·μ, σ_b = σ_u/10.
    pub fn from_mu(mu: f64, n_u: usize, n_b: usize) -> Self {
        let (sigma_u, sigma_b) = derive_sigmas(mu);
        NoiseConfig {
            sigma_u,
            sigma_b,
            n_u,
            n_b,
        }
    }
}

pub const MU_PAIR_SAMPLE_CAP: usize = 2000;

/// Mean Euclidean distance over all pairs of rows of a flat `[n × d]`
/// array; above `sample_cap` rows, over all pairs of a random subset of
/// `sample_cap` rows.
pub fn mu_pair_flat(points: &[f64], d: usize, sample_cap: usize, rng: &mut RngStream) -> Result<f64> {
    let n = points.len() / d;
    if n < 2 {
        return Err(Error::Config(format!("μ_pair needs at least 2 points, got {n}")));
    }
    if sample_cap < 2 {
        return Err(Error::Config("μ_pair sample cap must be ≥ 2".into()));
    }
    let rows: Vec<usize> = if n <= sample_cap {
        (0..n).collect()
    } else {
        let mut p = rng.permutation(n);
        p.truncate(sample_cap);
        p
    };
    let mut total = 0.0;
    for (a, &i) in rows.iter().enumerate() {
        let pi = &points[i * d..(i + 1) * d];
        for &j in &rows[a + 1..] {
            let pj = &points[j * d..(j + 1) * d];
            total += pi.iter().zip(pj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    let m = rows.len();
    let mu = total / (m * (m - 1) / 2) as f64;
    if !(mu > 0.0) {
        return Err(Error::Config("all points coincide; μ_pair is zero".into()));
    }
    Ok(mu)
}

pub fn mu_pair(x: &LabeledSet, sample_cap: usize, rng: &mut RngStream) -> Result<f64> {
    mu_pair_flat(&x.points, x.dim(), sample_cap, rng)
}

/// `(σ_u, σ_b) = (3μ, 3μ/10)`.
pub fn derive_sigmas(mu: f64) -> (f64, f64) {
    let sigma_u = 3.0 * mu;
    (sigma_u, sigma_u / 10.0)
}

/// `N_u` isotropic Gaussian offspring per labeled point, point-major.
pub fn gen_unlabeled(x: &LabeledSet, cfg: &NoiseConfig, rng: &mut RngStream) -> Result<UnlabeledSet> {
    cfg.validate()?;
    let mut points = Vec::with_capacity(x.points.len() * cfg.n_u);
    for i in 0..x.len() {
        let p = x.point(i);
        for _ in 0..cfg.n_u {
            points.extend(p.iter().map(|&v| v + cfg.sigma_u * rng.gaussian()));
        }
    }
    UnlabeledSet::new(x.shape.clone(), points)
}

/// Distances below this are treated as coincident and redrawn.
pub const MIN_NEIGHBOR_DISTANCE: f64 = 1e-12;

/// `n_b` neighbors `psi + N(0, sigma_b²·I)` as a flat `[n_b × d]` array.
pub fn gen_neighbors(psi: &[f64], sigma_b: f64, n_b: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(sigma_b > 0.0) {
        return Err(Error::Config(format!("σ_b must be positive, got {sigma_b}")));
    }
    let mut out = Vec::with_capacity(psi.len() * n_b);
    let mut buf = vec![0.0; psi.len()];
    for _ in 0..n_b {
        loop {
            let mut d2 = 0.0;
            for (b, &p) in buf.iter_mut().zip(psi) {
                let e = sigma_b * rng.gaussian();
                *b = p + e;
                d2 += (*b - p) * (*b - p);
            }
            if d2.sqrt() >= MIN_NEIGHBOR_DISTANCE {
                break;
            }
        }
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// `D_new`: labeled entries first, then unlabeled ones.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedDataset {
    shape: Vec<usize>,
    points: Vec<f64>,
    labels: Vec<Option<usize>>,
    class_count: usize,
}

/// One entry `(ψ, l, y)` of a [`CombinedDataset`].
#[derive(Clone, Copy, Debug)]
pub struct Entry<'a> {
    pub psi: &'a [f64],
    label: Option<usize>,
}

impl Entry<'_> {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    pub fn label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::Contract("label requested for an unlabeled entry".into()))
    }

    pub fn label_opt(&self) -> Option<usize> {
        self.label
    }
}

pub fn assemble(x: &LabeledSet, u: &UnlabeledSet) -> Result<CombinedDataset> {
    if !u.is_empty() && u.shape != x.shape {
        return Err(Error::Config(format!(
            "unlabeled shape {:?} differs from labeled {:?}",
            u.shape, x.shape
        )));
    }
    let mut points = x.points.clone();
    points.extend_from_slice(&u.points);
    let mut labels: Vec<Option<usize>> = x.labels.iter().map(|&y| Some(y)).collect();
    labels.extend(std::iter::repeat(None).take(u.len()));
    Ok(CombinedDataset {
        shape: x.shape.clone(),
        points,
        labels,
        class_count: x.class_count,
    })
}

impl CombinedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn entry(&self, k: usize) -> Entry<'_> {
        let d = self.dim();
        Entry {
            psi: &self.points[k * d..(k + 1) * d],
            label: self.labels[k],
        }
    }

    /// The labeled portion as a [`LabeledSet`].
    pub fn labeled(&self) -> LabeledSet {
        let n = self.labeled_count();
        LabeledSet {
            shape: self.shape.clone(),
            points: self.points[..n * self.dim()].to_vec(),
            labels: self.labels[..n].iter().map(|l| l.unwrap()).collect(),
            class_count: self.class_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub stdev: f64,
    pub count: usize,
    pub label: usize,
}

/// Two blobs at (±1, 0) with stdev 0.25, 100 points each.
pub fn default_2d_clusters() -> Vec<Cluster> {
    vec![
        Cluster {
            center: vec![-1.0, 0.0],
            stdev: 0.25,
            count: 100,
            label: 0,
        },
        Cluster {
            center: vec![1.0, 0.0],
            stdev: 0.25,
            count: 100,
            label: 1,
        },
    ]
}

/// Isotropic Gaussian blobs, cluster by cluster.
pub fn gen_2d_points(clusters: &[Cluster], seed: u64) -> Result<LabeledSet> {
    if clusters.len() < 2 {
        return Err(Error::Config("need at least two clusters".into()));
    }
    let d = clusters[0].center.len();
    if d == 0 || clusters.iter().any(|c| c.center.len() != d) {
        return Err(Error::Config("cluster centers must share a positive dimension".into()));
    }
    if clusters.iter().any(|c| !(c.stdev >= 0.0)) {
        return Err(Error::Config("cluster stdev must be ≥ 0".into()));
    }
    let class_count = clusters.iter().map(|c| c.label).max().unwrap() + 1;
    let mut distinct: Vec<usize> = clusters.iter().map(|c| c.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("clusters must cover at least two labels".into()));
    }
    let mut rng = RngStream::new(seed, "points", 0);
    let (mut points, mut labels) = (Vec::new(), Vec::new());
    for c in clusters {
        for _ in 0..c.count {
            points.extend(c.center.iter().map(|&m| m + c.stdev * rng.gaussian()));
            labels.push(c.label);
        }
    }
    LabeledSet::new(vec![d], points, labels, class_count)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads a file, inflating it when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, r, c) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(Error::Format(format!(
            "image payload {} bytes, header declares {n}×{r}×{c}",
            body.len()
        )));
    }
    Ok((n, r, c, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("label payload {} bytes, header declares {n}", body.len())));
    }
    Ok(body.to_vec())
}

/// Side length after zero padding.
pub const PADDED_SIDE: usize = 32;

/// Scales to [0, 1] and zero-pads each image to 32×32, centered.
fn pad_and_scale(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<f64>> {
    if rows > PADDED_SIDE || cols > PADDED_SIDE {
        return Err(Error::Format(format!("images of {rows}×{cols} exceed {PADDED_SIDE}×{PADDED_SIDE}")));
    }
    let (top, left) = ((PADDED_SIDE - rows) / 2, (PADDED_SIDE - cols) / 2);
    let mut out = vec![0.0; n * PADDED_SIDE * PADDED_SIDE];
    for i in 0..n {
        let img = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let dst = &mut out[i * PADDED_SIDE * PADDED_SIDE..(i + 1) * PADDED_SIDE * PADDED_SIDE];
        for r in 0..rows {
            for c in 0..cols {
                dst[(r + top) * PADDED_SIDE + c + left] = img[r * cols + c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Global scalar mean and standard deviation of the padded, rescaled
/// training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }

    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Normalization {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    /// Statistics of an IDX image file.
    pub fn from_idx(images_path: &Path) -> Result<Self> {
        let (n, r, c, px) = parse_idx_images(&read_maybe_gz(images_path)?)?;
        Ok(Normalization::from_values(&pad_and_scale(n, r, c, &px)?))
    }

    pub fn apply(&self, v: &mut [f64]) {
        for x in v {
            *x = (*x - self.mean) / self.std;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MnistOptions {
    /// Keep this many images per class.
    pub subset_per_class: Option<usize>,
    /// Seed of the subsampling shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Statistics to normalize with; computed from these images if absent.
    pub normalization: Option<Normalization>,
}

/// Loads an IDX image/label pair as `1×32×32` points.
///
/// Returns the set and the normalization that was applied.
pub fn load_mnist(images_path: &Path, labels_path: &Path, opts: &MnistOptions) -> Result<(LabeledSet, Normalization)> {
    let (n, r, c, px) = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= 10) {
        return Err(Error::Format(format!("label {bad} outside 0..10")));
    }
    let mut points = pad_and_scale(n, r, c, &px)?;
    let norm = opts.normalization.unwrap_or_else(|| Normalization::from_values(&points));
    norm.apply(&mut points);
    let set = LabeledSet::new(vec![1, PADDED_SIDE, PADDED_SIDE], points, labels, 10)?;
    let set = match opts.subset_per_class {
        Some(k) => balanced_subset(&set, k, opts.seed)?,
        None => set,
    };
    Ok((set, norm))
}

/// First `per_class` points of every class in seeded shuffled order; the
/// result keeps that shuffled order.
pub fn balanced_subset(x: &LabeledSet, per_class: usize, seed: u64) -> Result<LabeledSet> {
    let counts = x.class_counts();
    if let Some(c) = counts.iter().position(|&c| c < per_class) {
        return Err(Error::Config(format!(
            "class {c} has {} points, {per_class} requested",
            counts[c]
        )));
    }
    let perm = RngStream::new(seed, "subsample", 0).permutation(x.len());
    let mut taken = vec![0; x.class_count];
    let mut keep = Vec::with_capacity(per_class * x.class_count);
    for i in perm {
        let y = x.labels[i];
        if taken[y] < per_class {
            taken[y] += 1;
            keep.push(i);
        }
    }
    Ok(x.subset(&keep))
}

/// IDX images without labels, preprocessed like [`load_mnist`].
pub fn load_idx_unlabeled(images_path: &Path, norm: &Normalization) -> Result<UnlabeledSet> {
    let (n, r, c, px) = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let mut points = pad_and_scale(n, r, c, &px)?;
    norm.apply(&mut points);
    UnlabeledSet::new(vec![1, PADDED_SIDE, PADDED_SIDE], points)
}

/// Writes unlabeled points in the container format. `extra` fields are
/// merged into the manifest.
pub fn save_unlabeled(path: &Path, u: &UnlabeledSet, extra: Map<String, Value>) -> Result<()> {
    io::write_atomic(path, &encode_unlabeled(u, extra))
}

pub fn encode_unlabeled(u: &UnlabeledSet, extra: Map<String, Value>) -> Vec<u8> {
    let mut m = extra;
    m.insert("kind".into(), "unlabeled".into());
    m.insert("shape".into(), serde_json::json!(u.shape));
    m.insert("count".into(), u.len().into());
    io::encode(m, &u.points)
}

/// Reads a container written by [`save_unlabeled`] (or any producer of
/// the same manifest). A zero-length file is an empty set of
/// `expected_shape`.
pub fn load_external_unlabeled(path: &Path, expected_shape: &[usize]) -> Result<UnlabeledSet> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return UnlabeledSet::new(expected_shape.to_vec(), Vec::new());
    }
    let (m, values) = io::decode(&bytes)?;
    let shape: Vec<usize> = io::field(&m, "shape")?;
    let count: usize = io::field(&m, "count")?;
    if shape != expected_shape {
        return Err(Error::Format(format!(
            "unlabeled points of shape {shape:?}, expected {expected_shape:?}"
        )));
    }
    if values.len() != count * shape.iter().product::<usize>() {
        return Err(Error::Format("unlabeled count does not match blob".into()));
    }
    UnlabeledSet::new(shape, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_labeled(x: &LabeledSet, extra: Map<String, Value>) -> Vec<u8> {
    let mut m = extra;
    m.insert("kind".into(), "labeled".into());
    m.insert("shape".into(), serde_json::json!(x.shape));
    m.insert("count".into(), x.len().into());
    m.insert("class_count".into(), x.class_count.into());
    m.insert("labels".into(), serde_json::json!(x.labels));
    io::encode(m, &x.points)
}

pub fn save_labeled(path: &Path, x: &LabeledSet, extra: Map<String, Value>) -> Result<()> {
    io::write_atomic(path, &encode_labeled(x, extra))
}

pub fn load_labeled(path: &Path) -> Result<LabeledSet> {
    let (m, values) = io::read(path)?;
    if m.get("kind").and_then(Value::as_str) != Some("labeled") {
        return Err(Error::Format("container is not a labeled set".into()));
    }
    LabeledSet::new(
        io::field(&m, "shape")?,
        values,
        io::field(&m, "labels")?,
        io::field(&m, "class_count")?,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set2(points: Vec<f64>) -> LabeledSet {
        let n = points.len() / 2;
        LabeledSet::new(vec![2], points, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn mu_pair_examples() {
        let mut r = RngStream::new(0, "mu", 0);
        assert_eq!(mu_pair(&set2(vec![0.0, 0.0, 3.0, 4.0]), 2000, &mut r).unwrap(), 5.0);
        let mu = mu_pair(&set2(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]), 2000, &mut r).unwrap();
        assert!((mu - (2.0 + 2f64.sqrt()) / 3.0).abs() < 1e-15);
        assert!(matches!(mu_pair(&set2(vec![0.0, 0.0]), 2000, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn sigma_rule() {
        assert_eq!(derive_sigmas(5.0), (15.0, 1.5));
        let (u, b) = derive_sigmas(0.1);
        assert!((u - 0.3).abs() < 1e-15 && (b - 0.03).abs() < 1e-15);
    }

    #[test]
    fn counts() {
        let x = set2(vec![0.0; 6]);
        let mut r = RngStream::new(0, "u", 0);
        let cfg = |n_u| NoiseConfig {
            sigma_u: 1.0,
            sigma_b: 0.1,
            n_u,
            n_b: 1,
        };
        assert!(gen_unlabeled(&x, &cfg(0), &mut r).unwrap().is_empty());
        let u = gen_unlabeled(&x, &cfg(2), &mut r).unwrap();
        assert_eq!(u.len(), 6);
        let d = assemble(&x, &u).unwrap();
        assert_eq!((d.len(), d.labeled_count()), (9, 3));
        assert!(d.entry(0).label().is_ok());
        assert!(matches!(d.entry(3).label(), Err(Error::Contract(_))));
    }

    #[test]
    fn neighbors_are_distinct() {
        let mut r = RngStream::new(0, "nb", 0);
        let nb = gen_neighbors(&[0.0, 0.0], 0.01, 1, &mut r).unwrap();
        assert_eq!(nb.len(), 2);
        assert!(nb.iter().any(|&v| v != 0.0));
        assert!(gen_neighbors(&[0.0], 0.0, 1, &mut r).is_err());
    }

    #[test]
    fn blobs() {
        let x = gen_2d_points(&default_2d_clusters(), 1).unwrap();
        assert_eq!(x.len(), 200);
        assert_eq!(x.class_counts(), vec![100, 100]);
        assert_eq!(x, gen_2d_points(&default_2d_clusters(), 1).unwrap());
        let mut c = default_2d_clusters();
        c[0].stdev = 0.0;
        let x = gen_2d_points(&c, 1).unwrap();
        assert!((0..100).all(|i| x.point(i) == [-1.0, 0.0]));
    }

    #[test]
    fn idx_header_checks() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 0, 0]);
        let (n, r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((n, r, c, px.len()), (1, 2, 2, 4));
        assert!(parse_idx_images(&img[..19]).is_err());
        img[3] = 1;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
        assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 3]).is_err());
    }
}
