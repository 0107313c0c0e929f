//! Training losses and their gradients w.r.t. student logits and unit embeddings.
//!
//! Priors are fixed targets; no gradient flows into them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SymmetricGraph;
use crate::matrix::{self, Matrix};

const UNIT_TOLERANCE: f64 = 1e-6;
const REL_NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub prior: f64,
    pub rel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            prior: 1.0,
            rel: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.prior, self.rel].iter().any(|w| !(0.0..f64::INFINITY).contains(w)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub cls: f64,
    pub prior: f64,
    pub rel: f64,
}

pub fn total_loss(parts: LossParts, weights: LossWeights) -> f64 {
    weights.cls * parts.cls + weights.prior * parts.prior + weights.rel * parts.rel
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on raw logits, `max(l, 0) - l*y + ln(1 + e^{-|l|})`, with the
/// per-logit gradient `(sigmoid(l) - y) / |B|`.
pub fn cls_loss(logits: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let y = f64::from(y);
        loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        grad.push((sigmoid(l) - y) / b);
    }
    Ok((loss / b, grad))
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        let n = matrix::norm(row);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Validation(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Mean cosine distance between unit embeddings and their unit priors. The gradient is
/// w.r.t. the unit embedding, `-prior / |B|`; the model's normalization Jacobian takes it
/// the rest of the way.
pub fn prior_loss(z: &Matrix, priors: &Matrix) -> Result<(f64, Matrix)> {
    if z.rows() != priors.rows() || z.cols() != priors.cols() {
        return Err(Error::Shape(format!(
            "embeddings {}x{} vs priors {}x{}",
            z.rows(),
            z.cols(),
            priors.rows(),
            priors.cols()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    check_unit_rows(z, "embedding")?;
    check_unit_rows(priors, "prior")?;
    let b = z.rows() as f64;
    let loss = z
        .iter_rows()
        .zip(priors.iter_rows())
        .map(|(a, p)| 1.0 - matrix::dot(a, p))
        .sum::<f64>()
        / b;
    let mut grad = priors.clone();
    grad.as_mut_slice().iter_mut().for_each(|g| *g = -*g / b);
    Ok((loss, grad))
}

/// Same-label graph edges inside one minibatch, as batch positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchRelEdges {
    pub pairs: Vec<(usize, usize, f64)>,
}

impl BatchRelEdges {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Keeps exactly the graph edges whose endpoints are both in the batch and share a label.
/// `batch` holds graph node indices; `labels` is indexed by graph node.
pub fn collect_batch_edges(batch: &[usize], labels: &[u8], graph: &SymmetricGraph) -> Result<BatchRelEdges> {
    if labels.len() != graph.n_nodes {
        return Err(Error::Shape(format!(
            "{} labels for a {}-node graph",
            labels.len(),
            graph.n_nodes
        )));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= graph.n_nodes) {
        return Err(Error::Shape(format!("batch index {bad} outside a {}-node graph", graph.n_nodes)));
    }
    let position: HashMap<usize, usize> = batch.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let pairs = graph
        .edges
        .iter()
        .filter(|(u, v, _)| labels[*u] == labels[*v])
        .filter_map(|&(u, v, w)| Some((*position.get(&u)?, *position.get(&v)?, w)))
        .collect();
    Ok(BatchRelEdges { pairs })
}

/// `d cos(a, b) / d a = b/(|a||b|) - cos(a, b) a/|a|^2`.
fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = matrix::norm(a);
    let nb = matrix::norm(b);
    let cos = matrix::dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    (cos, g)
}

/// Weighted mean over edges of `π (cos(z_u, z_v) - cos(p_u, p_v))^2`, normalized by the
/// edge-weight total. Zero loss and gradient when there are no edges.
pub fn rel_loss(z: &Matrix, priors: &Matrix, edges: &BatchRelEdges) -> Result<(f64, Matrix)> {
    if z.rows() != priors.rows() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} priors",
            z.rows(),
            priors.rows()
        )));
    }
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    if edges.is_empty() {
        return Ok((0.0, grad));
    }
    if let Some(&(u, v, _)) = edges.pairs.iter().find(|(u, v, _)| *u >= z.rows() || *v >= z.rows()) {
        return Err(Error::Shape(format!("edge ({u}, {v}) outside a batch of {}", z.rows())));
    }
    let total: f64 = edges.pairs.iter().map(|e| e.2).sum::<f64>().max(REL_NORMALIZER_FLOOR);
    let mut loss = 0.0;
    for &(u, v, w) in &edges.pairs {
        let (cs, gu) = cosine_grad(z.row(u), z.row(v));
        let (_, gv) = cosine_grad(z.row(v), z.row(u));
        let ct = matrix::cosine_similarity(priors.row(u), priors.row(v));
        let r = cs - ct;
        loss += w * r * r;
        let scale = 2.0 * w * r / total;
        grad.row_mut(u).iter_mut().zip(&gu).for_each(|(g, d)| *g += scale * d);
        grad.row_mut(v).iter_mut().zip(&gv).for_each(|(g, d)| *g += scale * d);
    }
    Ok((loss / total, grad))
}
