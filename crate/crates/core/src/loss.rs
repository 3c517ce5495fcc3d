//! Training objectives: cross-entropy, the SoftMax slope regularizer, their
//! weighted sum, and two gradient-norm baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Tensor, Var, PROB_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(sup: f64, reg: f64, lambda: f64) -> Self {
        LossBreakdown {
            sup,
            reg,
            total: sup + lambda * reg,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sup.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// `-ln p[y]`, with `p[y]` clamped below at 1e-12.
pub fn loss_sup(p: &[f64], y: usize) -> Result<f64> {
    let py = p
        .get(y)
        .ok_or_else(|| Error::Index(format!("label {y} for {} classes", p.len())))?;
    Ok(-py.max(PROB_FLOOR).ln())
}

/// `Σ_m ||f_m − f_c||₂ / ||ψ_m − ψ_c||₂` over flat neighbor arrays.
pub fn loss_reg(f_center: &[f64], f_neighbors: &[f64], center: &[f64], neighbors: &[f64]) -> Result<f64> {
    let (n, d) = (f_center.len(), center.len());
    if n == 0 || d == 0 || f_neighbors.len() % n != 0 || neighbors.len() % d != 0 {
        return Err(Error::dim("loss_reg", "ragged inputs"));
    }
    let nb = f_neighbors.len() / n;
    if nb == 0 || nb != neighbors.len() / d {
        return Err(Error::dim(
            "loss_reg",
            format!("{nb} neighbor predictions for {} neighbors", neighbors.len() / d),
        ));
    }
    let mut total = 0.0;
    for m in 0..nb {
        let df = dist(&f_neighbors[m * n..(m + 1) * n], f_center);
        let dx = dist(&neighbors[m * d..(m + 1) * d], center);
        if dx == 0.0 {
            return Err(Error::Contract("neighbor coincides with its center".into()));
        }
        total += df / dx;
    }
    Ok(total)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One `(ψ_k, neighbors)` group, or a slice of one.
#[derive(Clone, Copy, Debug)]
pub struct GroupSlice<'a> {
    pub psi: &'a [f64],
    pub label: Option<usize>,
    /// Flat `[m × d]` neighbor points.
    pub neighbors: &'a [f64],
    /// Whether this slice carries the group's supervised term.
    pub with_sup: bool,
}

/// Builds `scale · Σ_g ([l_g]·H + λ·Loss_reg)` for a set of group slices
/// over one forward pass of the stacked centers and neighbors.
///
/// Returns the scalar on the tape plus the unscaled-by-λ components
/// (each multiplied by `scale`). With `lambda == 0` the neighbor rows are
/// left out of the differentiated graph; the regularizer value is still
/// measured on a separate gradient-free pass.
pub fn batch_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    params: &[Var<'t>],
    groups: &[GroupSlice<'_>],
    lambda: f64,
    scale: f64,
) -> Result<(Var<'t>, LossBreakdown)> {
    if groups.is_empty() {
        return Err(Error::Contract("empty group list".into()));
    }
    let shape = model.spec().input_shape.clone();
    let d = model.spec().input_numel();
    let with_neighbors = lambda != 0.0;

    let g = groups.len();
    let mut rows = Vec::new();
    for gr in groups {
        if gr.psi.len() != d || gr.neighbors.len() % d != 0 {
            return Err(Error::dim("batch_loss", format!("group point size {} for input size {d}", gr.psi.len())));
        }
        rows.extend_from_slice(gr.psi);
    }
    let mut center_of = Vec::new();
    let mut inv_dist = Vec::new();
    if with_neighbors {
        for (i, gr) in groups.iter().enumerate() {
            for nb in gr.neighbors.chunks(d) {
                rows.extend_from_slice(nb);
                center_of.push(i);
                inv_dist.push(1.0 / checked_dist(nb, gr.psi)?);
            }
        }
    }
    let n_rows = rows.len() / d;
    let mut bshape = vec![n_rows];
    bshape.extend(&shape);
    let x = tape.constant(bshape, rows)?;
    let p = model.forward_vars(params, x)?.softmax()?;

    let (sup_idx, sup_lab): (Vec<usize>, Vec<usize>) = groups
        .iter()
        .enumerate()
        .filter(|(_, gr)| gr.with_sup)
        .filter_map(|(i, gr)| gr.label.map(|y| (i, y)))
        .unzip();
    let sup = if sup_idx.is_empty() {
        None
    } else {
        let s = p.select_rows(&sup_idx)?.cross_entropy(&sup_lab)?.sum()?.scale(scale)?;
        Some(s)
    };

    let (reg, reg_value) = if with_neighbors && !center_of.is_empty() {
        let pn = p.select_rows(&(g..n_rows).collect::<Vec<_>>())?;
        let pc = p.select_rows(&center_of)?;
        let w = tape.constant(vec![inv_dist.len()], inv_dist)?;
        let r = pn.sub(pc)?.row_norm()?.mul(w)?.sum()?;
        let rv = r.item()? * scale;
        (Some(r.scale(lambda * scale)?), rv)
    } else if groups.iter().any(|gr| !gr.neighbors.is_empty()) {
        (None, measure_reg(model, groups, d)? * scale)
    } else {
        (None, 0.0)
    };

    let sup_value = match sup {
        Some(s) => s.item()?,
        None => 0.0,
    };
    let total = match (sup, reg) {
        (Some(s), Some(r)) => s.add(r)?,
        (Some(s), None) => s,
        (None, Some(r)) => r,
        (None, None) => tape.constant(vec![1], vec![0.0])?,
    };
    Ok((total, LossBreakdown::new(sup_value, reg_value, lambda)))
}

fn checked_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    let dx = dist(a, b);
    if dx < crate::data::MIN_NEIGHBOR_DISTANCE {
        return Err(Error::Contract("neighbor coincides with its center".into()));
    }
    Ok(dx)
}

/// Unscaled regularizer value of the groups, without gradients.
pub fn measure_reg(model: &Model, groups: &[GroupSlice<'_>], d: usize) -> Result<f64> {
    let mut rows = Vec::new();
    for gr in groups {
        rows.extend_from_slice(gr.psi);
        rows.extend_from_slice(gr.neighbors);
    }
    let mut shape = vec![rows.len() / d];
    shape.extend(&model.spec().input_shape);
    let p = model.predict_proba(&Tensor::new(shape, rows)?)?;
    let n = model.class_count();
    let (mut total, mut at) = (0.0, 0);
    for gr in groups {
        let m = gr.neighbors.len() / d;
        if m > 0 {
            let pc = &p.data()[at * n..(at + 1) * n];
            let pn = &p.data()[(at + 1) * n..(at + 1 + m) * n];
            total += loss_reg(pc, pn, gr.psi, gr.neighbors)?;
        }
        at += 1 + m;
    }
    Ok(total)
}

/// Frobenius norm of the logits-Jacobian at `x`, one reverse sweep per
/// logit.
pub fn jacobian_reg(model: &Model, x: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let params = model.bind_frozen(&tape);
    let mut shape = vec![1];
    shape.extend(&model.spec().input_shape);
    let xv = tape.variable(shape, x.to_vec())?;
    let z = model.forward_vars(&params, xv)?;
    let n = model.class_count();
    let mut total = 0.0;
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let g = tape.vjp(z, &e)?;
        total += g.wrt(xv).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// `||∇_x H(y, softmax(f(x)))||₂²`.
pub fn input_gradient_reg(model: &Model, x: &[f64], y: usize) -> Result<f64> {
    let g = input_gradient(model, x, &[y])?;
    Ok(g.iter().map(|v| v * v).sum())
}

/// Gradient of the summed cross-entropy with respect to a batch of inputs
/// (flat, `labels.len()` rows).
pub fn input_gradient(model: &Model, x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = model.bind_frozen(&tape);
    let mut shape = vec![labels.len()];
    shape.extend(&model.spec().input_shape);
    let xv = tape.variable(shape, x.to_vec())?;
    let h = model.forward_vars(&params, xv)?.softmax()?.cross_entropy(labels)?.sum()?;
    Ok(tape.vjp(h, &[1.0])?.wrt(xv))
}
