//! Layered classifiers: layer lists, construction, evaluation and
//! checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;
use crate::tensor::{Activation, PoolKind, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Pool {
        pool: PoolKind,
        window: usize,
        stride: usize,
    },
    Activation {
        activation: Activation,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Err(Error::Config(detail));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return bad("dense layer widths must be ≥ 1".into());
                }
                if input != [inputs] {
                    return bad(format!("dense layer expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(format!("conv expects [{in_channels}, H, W], got {input:?}"));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("conv extents must be ≥ 1".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if kernel > h || kernel > w {
                    return bad(format!("conv kernel {kernel} exceeds padded input {h}×{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Pool { window, stride, .. } => {
                if input.len() != 3 {
                    return bad(format!("pool expects [C, H, W], got {input:?}"));
                }
                if window == 0 || stride == 0 || window > input[1] || window > input[2] {
                    return bad(format!("pool window {window} invalid for {input:?}"));
                }
                Ok(vec![input[0], (input[1] - window) / stride + 1, (input[2] - window) / stride + 1])
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Shapes of the (weight, bias) pair, if the layer has parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs], inputs, outputs)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl ModelSpec {
    /// Per-sample shapes at every boundary: `shapes[0]` is the input and
    /// `shapes[i + 1]` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be ≥ 2".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        if shapes.last().unwrap() != &[self.class_count] {
            return Err(Error::Config(format!(
                "final layer emits {:?}, expected [{}]",
                shapes.last().unwrap(),
                self.class_count
            )));
        }
        Ok(shapes)
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

pub fn mlp_spec(widths: &[usize], activation: Activation) -> Result<ModelSpec> {
    if widths.len() < 2 {
        return Err(Error::Config("an MLP needs at least two widths".into()));
    }
    if widths.contains(&0) {
        return Err(Error::Config(format!("MLP widths must be ≥ 1, got {widths:?}")));
    }
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::Activation { activation });
        }
        layers.push(LayerSpec::Dense {
            inputs: w[0],
            outputs: w[1],
        });
    }
    Ok(ModelSpec {
        input_shape: vec![widths[0]],
        layers,
        class_count: *widths.last().unwrap(),
    })
}

pub fn lenet_spec(input_shape: &[usize], activation: Activation) -> Result<ModelSpec> {
    if input_shape != [1, 32, 32] {
        return Err(Error::Config(format!("LeNet expects input 1×32×32, got {input_shape:?}")));
    }
    let act = LayerSpec::Activation { activation };
    let pool = LayerSpec::Pool {
        pool: PoolKind::Max,
        window: 2,
        stride: 2,
    };
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 5,
        stride: 1,
        padding: 0,
    };
    let dense = |i, o| LayerSpec::Dense { inputs: i, outputs: o };
    Ok(ModelSpec {
        input_shape: input_shape.to_vec(),
        layers: vec![
            conv(1, 6),
            act.clone(),
            pool.clone(),
            conv(6, 16),
            act.clone(),
            pool,
            LayerSpec::Flatten,
            dense(400, 120),
            act.clone(),
            dense(120, 84),
            act,
            dense(84, 10),
        ],
        class_count: 10,
    })
}

/// A classifier together with its parameters.
///
/// Parameters are stored flat in layer order, weight before bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Tensor>,
    /// For every layer, the index of its weight in `params`.
    slots: Vec<Option<usize>>,
}

impl Model {
    /// Glorot-uniform weights, zero biases, drawn from the `init` stream.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.shapes()?;
        let mut rng = RngStream::new(seed, "init", 0);
        let mut params = Vec::new();
        let mut slots = Vec::new();
        for layer in &spec.layers {
            match layer.param_shapes() {
                Some((ws, bs, fan_in, fan_out)) => {
                    slots.push(Some(params.len()));
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = ws.iter().product();
                    let w = (0..n).map(|_| rng.uniform_in(-limit, limit)).collect();
                    params.push(Tensor::new(ws, w)?.with_requires_grad(true));
                    params.push(Tensor::zeros(bs).with_requires_grad(true));
                }
                None => slots.push(None),
            }
        }
        Ok(Model {
            spec,
            seed,
            params,
            slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            if s.is_some() {
                names.push(format!("layer{i}.weight"));
                names.push(format!("layer{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    /// All parameters concatenated, for hashing and comparisons.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// Records the parameters on `tape` as gradient-requiring leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Records the parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(&p.clone().with_requires_grad(false)))
            .collect()
    }

    /// Checks `shape` is `[B, ..shapes[boundary]]` and returns `B`.
    fn batch_rows(&self, shape: &[usize], boundary: usize) -> Result<usize> {
        let shapes = self.spec.shapes()?;
        let want = &shapes[boundary];
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::dim(
                "forward",
                format!("batch {shape:?} does not match per-sample shape {want:?}"),
            ));
        }
        Ok(shape[0])
    }

    /// Applies layers `from..to` to `x`.
    pub fn forward_range<'t>(&self, params: &[Var<'t>], x: Var<'t>, from: usize, to: usize) -> Result<Var<'t>> {
        let rows = self.batch_rows(&x.shape(), from)?;
        let mut h = x;
        for i in from..to {
            h = match &self.spec.layers[i] {
                LayerSpec::Dense { .. } => {
                    let k = self.slots[i].unwrap();
                    h.matmul(params[k])?.add_bias(params[k + 1])?
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let k = self.slots[i].unwrap();
                    h.conv2d(params[k], Some(params[k + 1]), *stride, *padding)?
                }
                LayerSpec::Pool { pool, window, stride } => h.pool2d(*pool, *window, *stride)?,
                LayerSpec::Activation { activation } => h.activation(*activation)?,
                LayerSpec::Flatten => {
                    let n = h.numel() / rows;
                    h.reshape(vec![rows, n])?
                }
            };
        }
        Ok(h)
    }

    /// Logits `[B × n]` for a batch shaped `[B, ..input_shape]`.
    pub fn forward_vars<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.forward_range(params, x, 0, self.spec.layers.len())
    }

    /// Gradient-free evaluation.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind_frozen(&tape);
        let x = tape.constant(batch.shape().to_vec(), batch.data().to_vec())?;
        Ok(self.forward_vars(&params, x)?.value())
    }

    /// SoftMax scores `[B × n]`.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind_frozen(&tape);
        let x = tape.constant(batch.shape().to_vec(), batch.data().to_vec())?;
        Ok(self.forward_vars(&params, x)?.softmax()?.value())
    }

    /// Predicted class per row.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.data().chunks(self.class_count()).map(argmax).collect())
    }

    fn check_boundary(&self, at_layer: usize) -> Result<()> {
        if at_layer == 0 || at_layer >= self.spec.layers.len() {
            return Err(Error::Config(format!(
                "layer boundary {at_layer} outside 1..{}",
                self.spec.layers.len()
            )));
        }
        Ok(())
    }

    /// Evaluates up to `at_layer` and returns the intermediate activation
    /// with a handle that finishes the forward pass from there.
    pub fn forward_split(&self, batch: &Tensor, at_layer: usize) -> Result<(Tensor, Continuation<'_>)> {
        self.check_boundary(at_layer)?;
        let tape = Tape::new();
        let params = self.bind_frozen(&tape);
        let x = tape.constant(batch.shape().to_vec(), batch.data().to_vec())?;
        let mid = self.forward_range(&params, x, 0, at_layer)?.value();
        Ok((
            mid,
            Continuation {
                model: self,
                at_layer,
            },
        ))
    }

    /// Per-sample shape at a layer boundary.
    pub fn boundary_shape(&self, at_layer: usize) -> Result<Vec<usize>> {
        self.check_boundary(at_layer)?;
        Ok(self.spec.shapes()?[at_layer].clone())
    }

    /// Index just past the last conv or pool layer.
    pub fn last_conv_boundary(&self) -> Option<usize> {
        self.spec
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Pool { .. }))
            .map(|i| i + 1)
            .filter(|&b| b < self.spec.layers.len())
    }

    fn manifest(&self) -> Map<String, Value> {
        let mut params = Vec::new();
        let mut offset = 0;
        for (name, p) in self.param_names().into_iter().zip(&self.params) {
            params.push(serde_json::json!({
                "name": name,
                "shape": p.shape(),
                "offset": offset,
                "length": p.numel(),
            }));
            offset += p.numel();
        }
        let mut m = Map::new();
        m.insert("kind".into(), "model".into());
        m.insert("spec".into(), serde_json::to_value(&self.spec).unwrap());
        m.insert("seed".into(), self.seed.into());
        m.insert("params".into(), Value::Array(params));
        m
    }

    /// Serializes to container bytes with extra manifest fields and extra
    /// trailing named tensors (e.g. optimizer state).
    pub fn to_container(&self, metadata: Value, extra: &[(String, Tensor)]) -> Vec<u8> {
        let mut m = self.manifest();
        let mut values = self.flat_params();
        let mut extras = Vec::new();
        for (name, t) in extra {
            extras.push(serde_json::json!({
                "name": name,
                "shape": t.shape(),
                "offset": values.len(),
                "length": t.numel(),
            }));
            values.extend_from_slice(t.data());
        }
        m.insert("metadata".into(), metadata);
        m.insert("extra".into(), Value::Array(extras));
        io::encode(m, &values)
    }

    /// SHA-256 over the spec, seed and parameter bytes.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_container(Value::Null, &[])))
    }

    pub fn save(&self, path: &Path, metadata: Value) -> Result<()> {
        io::write_atomic(path, &self.to_container(metadata, &[]))
    }

    /// Parses container bytes into the model, its metadata and any extra
    /// named tensors.
    pub fn from_container(bytes: &[u8]) -> Result<(Model, Value, Vec<(String, Tensor)>)> {
        let (m, values) = io::decode(bytes)?;
        if m.get("kind").and_then(Value::as_str) != Some("model") {
            return Err(Error::Format("container is not a model checkpoint".into()));
        }
        let spec: ModelSpec = io::field(&m, "spec")?;
        let seed: u64 = io::field(&m, "seed")?;
        let mut model = Model::new(spec, seed).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let entries: Vec<BlobEntry> = io::field(&m, "params")?;
        let names = model.param_names();
        if entries.len() != names.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, spec needs {}",
                entries.len(),
                names.len()
            )));
        }
        for ((entry, name), p) in entries.iter().zip(&names).zip(model.params.iter_mut()) {
            if &entry.name != name || entry.shape != p.shape() {
                return Err(Error::Format(format!("parameter {} does not match spec", entry.name)));
            }
            p.data_mut().copy_from_slice(entry.slice(&values)?);
        }
        let extra_entries: Vec<BlobEntry> = match m.get("extra") {
            Some(_) => io::field(&m, "extra")?,
            None => Vec::new(),
        };
        let mut extra = Vec::new();
        for e in extra_entries {
            let t = Tensor::new(e.shape.clone(), e.slice(&values)?.to_vec())
                .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
            extra.push((e.name, t));
        }
        let metadata = m.get("metadata").cloned().unwrap_or(Value::Null);
        Ok((model, metadata, extra))
    }

    pub fn load(path: &Path) -> Result<Model> {
        Ok(Model::from_container(&std::fs::read(path)?)?.0)
    }
}

#[derive(Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

impl BlobEntry {
    fn slice<'a>(&self, values: &'a [f64]) -> Result<&'a [f64]> {
        let n: usize = self.shape.iter().product();
        if n != self.length || self.offset + self.length > values.len() {
            return Err(Error::Format(format!("blob entry {} out of range", self.name)));
        }
        Ok(&values[self.offset..self.offset + self.length])
    }
}

/// Tail of a split forward pass.
pub struct Continuation<'m> {
    model: &'m Model,
    at_layer: usize,
}

impl Continuation<'_> {
    pub fn at_layer(&self) -> usize {
        self.at_layer
    }

    /// Logits from a (possibly modified) intermediate activation.
    pub fn resume(&self, intermediate: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.model.bind_frozen(&tape);
        let h = tape.constant(intermediate.shape().to_vec(), intermediate.data().to_vec())?;
        let n = self.model.spec.layers.len();
        Ok(self.model.forward_range(&params, h, self.at_layer, n)?.value())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
