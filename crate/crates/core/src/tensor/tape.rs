use std::cell::RefCell;

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{check_shape, Activation, PoolKind, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddBias { x: usize, bias: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Act { x: usize, kind: Activation },
    Softmax { x: usize },
    CrossEntropy { p: usize, labels: Vec<usize> },
    RowNorm { x: usize },
    SelectRows { x: usize, rows: Vec<usize> },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry, cols: Vec<f64> },
    Pool2d { x: usize, geom: PoolGeometry, kind: PoolKind, argmax: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    /// Length of the trailing row for row-wise ops (last extent).
    fn width(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

/// Append-only record of one forward evaluation.
///
/// A tape is single-threaded (`!Sync`); build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Adjoints from one reverse sweep, indexed by node.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence
    /// the output or does not require gradients.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.adj.get(v.id).and_then(|a| a.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for absent entries.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `tensor` as a leaf; it participates in gradients iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let shape = shape.into();
        check_shape("constant", &shape, data.len())?;
        self.push(shape, data, Op::Leaf, false, "constant")
    }

    /// Leaf that receives gradients.
    pub fn variable(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let shape = shape.into();
        check_shape("variable", &shape, data.len())?;
        self.push(shape, data, Op::Leaf, true, "variable")
    }

    /// Stacks tensors along the first axis. Trailing extents must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?
            .shape();
        let tail = first[1..].to_vec();
        let (mut rows, mut data, mut rg) = (0, Vec::new(), false);
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let n = &nodes[p.id];
                if n.shape[1..] != tail[..] {
                    return Err(Error::dim(
                        "concat_rows",
                        format!("trailing shape {:?} vs {:?}", &n.shape[1..], tail),
                    ));
                }
                rows += n.shape[0];
                data.extend_from_slice(&n.value);
                rg |= n.requires_grad;
            }
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push_unchecked(shape, data, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Reverse sweep seeded with `cotangent` at `output` (a vector-Jacobian
    /// product). Does not touch accumulated gradients.
    pub fn vjp(&self, output: Var<'_>, cotangent: &[f64]) -> Result<Gradients> {
        if cotangent.len() != output.numel() {
            return Err(Error::dim(
                "vjp",
                format!("cotangent of {} for output of {}", cotangent.len(), output.numel()),
            ));
        }
        Ok(self.sweep(output.id, cotangent.to_vec()))
    }

    /// Accumulated gradient of a node after one or more [`Var::backward`] calls.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    fn push_unchecked(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn sweep(&self, root: usize, seed: Vec<f64>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root + 1);
        adj.resize_with(root + 1, || None);
        if !nodes[root].requires_grad {
            return Gradients { adj };
        }
        adj[root] = Some(seed);

        // Adds a contribution into operand `j`'s adjoint if it needs one.
        fn acc(
            nodes: &[Node],
            adj: &mut [Option<Vec<f64>>],
            j: usize,
            f: impl FnOnce(&mut [f64], &Node),
        ) {
            let n = &nodes[j];
            if n.requires_grad {
                let buf = adj[j].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf, n);
            }
        }

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    let bv = &nodes[b].value;
                    acc(&nodes, &mut adj, a, |d, _| kernels::gemm(m, n, k, &g, false, bv, true, 1.0, d));
                    let av = &nodes[a].value;
                    acc(&nodes, &mut adj, b, |d, _| kernels::gemm(k, m, n, av, true, &g, false, 1.0, d));
                }
                &Op::AddBias { x, bias } => {
                    acc(&nodes, &mut adj, x, |d, _| add_into(d, &g));
                    let w = node.width();
                    acc(&nodes, &mut adj, bias, |d, _| {
                        for row in g.chunks(w) {
                            add_into(d, row);
                        }
                    });
                }
                &Op::Add(a, b) => {
                    acc(&nodes, &mut adj, a, |d, _| add_into(d, &g));
                    acc(&nodes, &mut adj, b, |d, _| add_into(d, &g));
                }
                &Op::Sub(a, b) => {
                    acc(&nodes, &mut adj, a, |d, _| add_into(d, &g));
                    acc(&nodes, &mut adj, b, |d, _| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
                }
                &Op::Mul(a, b) => {
                    let bv = &nodes[b].value;
                    acc(&nodes, &mut adj, a, |d, _| {
                        d.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y)
                    });
                    let av = &nodes[a].value;
                    acc(&nodes, &mut adj, b, |d, _| {
                        d.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x)
                    });
                }
                &Op::Scale(a, c) => {
                    acc(&nodes, &mut adj, a, |d, _| d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g));
                }
                &Op::Sum(a) => {
                    let s = g[0];
                    acc(&nodes, &mut adj, a, |d, _| d.iter_mut().for_each(|d| *d += s));
                }
                &Op::Act { x, kind } => {
                    let y = &node.value;
                    acc(&nodes, &mut adj, x, |d, xn| {
                        for (((d, g), xv), yv) in d.iter_mut().zip(&g).zip(&xn.value).zip(y) {
                            *d += g * kind.derivative(*xv, *yv);
                        }
                    });
                }
                &Op::Softmax { x } => {
                    let (y, w) = (&node.value, node.width());
                    acc(&nodes, &mut adj, x, |d, _| {
                        for ((d, g), y) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                            let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
                Op::CrossEntropy { p, labels } => {
                    acc(&nodes, &mut adj, *p, |d, pn| {
                        let w = pn.width();
                        for (r, &y) in labels.iter().enumerate() {
                            let pv = pn.value[r * w + y];
                            if pv > PROB_FLOOR {
                                d[r * w + y] -= g[r] / pv;
                            }
                        }
                    });
                }
                &Op::RowNorm { x } => {
                    let norms = &node.value;
                    acc(&nodes, &mut adj, x, |d, xn| {
                        let w = xn.value.len() / norms.len();
                        for (r, (&nr, &gr)) in norms.iter().zip(&g).enumerate() {
                            if nr > 0.0 {
                                let s = gr / nr;
                                for (d, x) in d[r * w..(r + 1) * w].iter_mut().zip(&xn.value[r * w..(r + 1) * w]) {
                                    *d += s * x;
                                }
                            }
                        }
                    });
                }
                Op::SelectRows { x, rows } => {
                    let w = g.len() / rows.len();
                    acc(&nodes, &mut adj, *x, |d, _| {
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut d[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        acc(&nodes, &mut adj, p, |d, _| add_into(d, &g[off..off + len]));
                        off += len;
                    }
                }
                &Op::Reshape(x) => {
                    acc(&nodes, &mut adj, x, |d, _| add_into(d, &g));
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let want = (
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                        b.is_some_and(|b| nodes[b].requires_grad),
                    );
                    let (dx, dw, db) = kernels::conv2d_backward(geom, &nodes[*w].value, cols, &g, want);
                    if let Some(dx) = dx {
                        acc(&nodes, &mut adj, *x, |d, _| add_into(d, &dx));
                    }
                    if let Some(dw) = dw {
                        acc(&nodes, &mut adj, *w, |d, _| add_into(d, &dw));
                    }
                    if let (Some(db), Some(b)) = (db, b) {
                        acc(&nodes, &mut adj, *b, |d, _| add_into(d, &db));
                    }
                }
                Op::Pool2d { x, geom, kind, argmax } => {
                    let dx = kernels::pool2d_backward(geom, *kind, argmax, &g);
                    acc(&nodes, &mut adj, *x, |d, _| add_into(d, &dx));
                }
            }
            adj[i] = Some(g);
        }
        Gradients { adj }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value as a standalone tensor (no gradient).
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        if v.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of {} elements", v.len())));
        }
        Ok(v[0])
    }

    /// Runs a reverse sweep from this scalar and adds the result into the
    /// accumulated gradient of every node that requires one. Calling it
    /// twice without [`Tape::zero_grad`] doubles the gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        let grads = self.tape.sweep(self.id, vec![1.0]);
        let mut nodes = self.tape.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads.adj) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn unary(
        self,
        name: &'static str,
        shape: Vec<usize>,
        f: impl FnOnce(&Node) -> Vec<f64>,
        op: Op,
    ) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (f(n), n.requires_grad)
        };
        self.tape.push(shape, value, op, rg, name)
    }

    fn binary_same_shape(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::dim(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let v = a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        self.tape.push(shape, value, op, rg, name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        self.unary("scale", shape, |n| n.value.iter().map(|v| v * c).collect(), Op::Scale(self.id, c))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", vec![1], |n| vec![n.value.iter().sum()], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::dim("matmul", format!("{:?} · {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, &a.value, false, &b.value, false, 0.0, &mut c);
            (m, k, n, c, a.requires_grad || b.requires_grad)
        };
        self.tape.push(
            vec![m, n],
            value,
            Op::MatMul { a: self.id, b: other.id, m, k, n },
            rg,
            "matmul",
        )
    }

    /// Adds a vector along the last axis to every row.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            if b.value.len() != x.width() {
                return Err(Error::dim("add_bias", format!("{:?} + {:?}", x.shape, b.shape)));
            }
            let mut v = x.value.clone();
            for row in v.chunks_mut(b.value.len()) {
                add_into(row, &b.value);
            }
            (x.shape.clone(), v, x.requires_grad || b.requires_grad)
        };
        self.tape.push(shape, value, Op::AddBias { x: self.id, bias: bias.id }, rg, "add_bias")
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let shape = self.shape();
        self.unary(
            "activation",
            shape,
            |n| n.value.iter().map(|&v| kind.apply(v)).collect(),
            Op::Act { x: self.id, kind },
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if *shape.last().unwrap() < 2 {
            return Err(Error::dim("softmax", "needs at least two classes"));
        }
        self.unary(
            "softmax",
            shape,
            |n| {
                let w = n.width();
                let mut out = Vec::with_capacity(n.value.len());
                for row in n.value.chunks(w) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let start = out.len();
                    let mut z = 0.0;
                    for &v in row {
                        let e = (v - mx).exp();
                        z += e;
                        out.push(e);
                    }
                    out[start..].iter_mut().for_each(|e| *e /= z);
                }
                out
            },
            Op::Softmax { x: self.id },
        )
    }

    /// Per-row `-ln max(p[label], 1e-12)` for a `[rows × n]` (or `[n]`)
    /// probability tensor; returns `[rows]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (w, rows) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.width(), n.value.len() / n.width())
        };
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= w) {
            return Err(Error::Index(format!("label {bad} out of range for {w} classes")));
        }
        self.unary(
            "cross_entropy",
            vec![rows],
            |n| {
                labels
                    .iter()
                    .enumerate()
                    .map(|(r, &y)| -n.value[r * w + y].max(PROB_FLOOR).ln())
                    .collect()
            },
            Op::CrossEntropy { p: self.id, labels: labels.to_vec() },
        )
    }

    /// Euclidean norm of each slice along the first axis; returns `[rows]`.
    pub fn row_norm(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let rows = shape[0];
        self.unary(
            "row_norm",
            vec![rows],
            |n| {
                let w = n.value.len() / rows;
                n.value.chunks(w).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
            },
            Op::RowNorm { x: self.id },
        )
    }

    /// Gathers slices along the first axis (repeats allowed).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let mut shape = self.shape();
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "empty selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::Index(format!("row {bad} of {}", shape[0])));
        }
        shape[0] = rows.len();
        self.unary(
            "select_rows",
            shape,
            |n| {
                let w = n.value.len() / n.shape[0];
                rows.iter().flat_map(|&r| n.value[r * w..(r + 1) * w].iter().copied()).collect()
            },
            Op::SelectRows { x: self.id, rows: rows.to_vec() },
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        check_shape("reshape", &shape, self.numel())?;
        self.unary("reshape", shape, |n| n.value.clone(), Op::Reshape(self.id))
    }

    /// Cross-correlation of `[N×C×H×W]` with `[F×C×kh×kw]` (+ optional `[F]` bias).
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (geom, out, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, k) = (&nodes[self.id], &nodes[kernel.id]);
            let geom = ConvGeometry::new(&x.shape, &k.shape, stride, padding)?;
            let b = match bias {
                Some(b) => {
                    let bn = &nodes[b.id];
                    if bn.value.len() != geom.filters {
                        return Err(Error::dim("conv2d", format!("bias {:?} for {} filters", bn.shape, geom.filters)));
                    }
                    Some(bn)
                }
                None => None,
            };
            let (out, cols) = kernels::conv2d_forward(&geom, &x.value, &k.value, b.map(|b| b.value.as_slice()));
            let rg = x.requires_grad || k.requires_grad || b.is_some_and(|b| b.requires_grad);
            (geom, out, if rg { cols } else { Vec::new() }, rg)
        };
        self.tape.push(
            geom.out_shape(),
            out,
            Op::Conv2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom, cols },
            rg,
            "conv2d",
        )
    }

    pub fn pool2d(self, kind: PoolKind, window: usize, stride: usize) -> Result<Var<'t>> {
        let geom = PoolGeometry::new(&self.shape(), window, stride)?;
        let (out, argmax, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (o, a) = kernels::pool2d_forward(&geom, kind, &x.value);
            (o, a, x.requires_grad)
        };
        self.tape.push(geom.out_shape(), out, Op::Pool2d { x: self.id, geom, kind, argmax }, rg, "pool2d")
    }
}
