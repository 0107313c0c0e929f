//! Minibatch training of the student, stratified fold assignment and threshold selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeWeightSource, SymmetricGraph};
use crate::losses::{cls_loss, collect_batch_edges, prior_loss, rel_loss, total_loss, LossParts, LossWeights};
use crate::matrix::Matrix;
use crate::metrics::youden_threshold;
use crate::prior::PriorMode;
use crate::student::{Gradients, StudentDims, StudentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam with the usual moment decay rates (0.9, 0.999) and eps 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda_cls: f64,
    pub lambda_prior: f64,
    pub lambda_rel: f64,
    /// Neighbors per teacher-cohort node, also used for cross-cohort retrieval.
    pub k_mri: usize,
    /// Neighbors per node in the student-cohort relational graph.
    pub k_fundus: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub seed: u64,
    pub n_folds: usize,
    /// Prior distillation on/off. Off means a purely supervised student; relational
    /// distillation then has no priors to match and is skipped too.
    pub distill: bool,
    /// Smooth teacher embeddings over the teacher graph before imputation.
    pub smooth: bool,
    /// Relational distillation on/off.
    pub rel: bool,
    pub prior_mode: PriorMode,
    /// Student embedding width when no priors fix it.
    pub embed_dim: usize,
    pub bio_hidden: usize,
    /// Standardize numeric biomarkers (otherwise only mean-impute them).
    pub standardize: bool,
    /// Fit one scaler on teacher cohort plus student train split; otherwise one per cohort.
    pub shared_scaler: bool,
    pub fundus_edge_weight: EdgeWeightSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            lambda_cls: 1.0,
            lambda_prior: 1.0,
            lambda_rel: 1.0,
            k_mri: 20,
            k_fundus: 5,
            sigma: 1.0,
            alpha: 0.9,
            seed: 0,
            n_folds: 5,
            distill: true,
            smooth: true,
            rel: true,
            prior_mode: PriorMode::GatedKnn,
            embed_dim: 64,
            bio_hidden: 16,
            standardize: true,
            shared_scaler: true,
            fundus_edge_weight: EdgeWeightSource::Raw,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda_cls,
            prior: self.lambda_prior,
            rel: self.lambda_rel,
        }
    }

    /// Whether the relational term actually runs.
    pub fn uses_rel(&self) -> bool {
        self.distill && self.rel
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.k_mri == 0 || self.k_fundus == 0 {
            return Err(Error::Config("k_mri and k_fundus must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.embed_dim == 0 || self.bio_hidden == 0 {
            return Err(Error::Config("embed_dim and bio_hidden must be positive".into()));
        }
        self.weights().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `key=value` override using the same syntax as the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config field {key:?}")));
        }
        table.insert(key.to_string(), parse_override(value));
        *self = Self::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        Ok(())
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
pub(crate) fn parse_override(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    /// Row indices into the student cohort, ascending.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded per-class shuffle, then round-robin fold assignment continuing across classes.
pub fn stratified_kfold(labels: &[u8], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut cursor = 0;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < n_folds {
            return Err(Error::Validation(format!(
                "class {class} has {} patients, fewer than {n_folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = cursor % n_folds;
            cursor += 1;
        }
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    Ok((0..n_folds)
        .map(|fold_id| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| fold_of[i] == fold_id);
            FoldSplit { fold_id, train, val }
        })
        .collect())
}

/// Everything the student sees for one training split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub features: &'a Matrix,
    pub biomarkers: &'a Matrix,
    pub labels: &'a [u8],
    /// Unit priors, one per training row; required when distilling.
    pub priors: Option<&'a Matrix>,
    /// Relational graph over the training rows; required for relational distillation.
    pub graph: Option<&'a SymmetricGraph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: StudentParams,
    /// Youden-optimal threshold on training-split scores.
    pub threshold: f64,
    /// Mean total loss per epoch, weighted by batch size.
    pub train_loss_curve: Vec<f64>,
}

pub fn predict_scores(params: &StudentParams, features: &Matrix, biomarkers: &Matrix) -> Result<Vec<f64>> {
    features
        .iter_rows()
        .zip(biomarkers.iter_rows())
        .map(|(x, c)| params.forward(x, c).map(|t| sigmoid(t.logit)))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted objective on one minibatch of row indices. Adds the parameter gradient into
/// `grads` and returns the unweighted loss terms. The prior term is used when
/// `data.priors` is set, the relational term when `data.graph` is also set.
pub fn batch_objective(
    params: &StudentParams,
    data: &TrainData<'_>,
    batch: &[usize],
    weights: LossWeights,
    grads: &mut Gradients,
) -> Result<LossParts> {
    let traces = batch
        .iter()
        .map(|&i| params.forward(data.features.row(i), data.biomarkers.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = traces.iter().map(|t| t.logit).collect();
    let labels: Vec<u8> = batch.iter().map(|&i| data.labels[i]).collect();
    let (cls, d_logit) = cls_loss(&logits, &labels)?;
    let mut parts = LossParts {
        cls,
        ..Default::default()
    };
    let mut d_embed = Matrix::zeros(batch.len(), params.dims.embed);
    if let Some(all_priors) = data.priors {
        let z = Matrix::from_rows(&traces.iter().map(|t| t.embedding.as_slice()).collect::<Vec<_>>())?;
        let p = all_priors.select_rows(batch);
        let (lp, dp) = prior_loss(&z, &p)?;
        parts.prior = lp;
        d_embed = d_embed.lin_comb(1.0, &dp, weights.prior)?;
        if let Some(g) = data.graph {
            let edges = collect_batch_edges(batch, data.labels, g)?;
            let (lr, dr) = rel_loss(&z, &p, &edges)?;
            parts.rel = lr;
            d_embed = d_embed.lin_comb(1.0, &dr, weights.rel)?;
        }
    }
    for (b, trace) in traces.iter().enumerate() {
        params.backward_into(trace, d_embed.row(b), weights.cls * d_logit[b], grads)?;
    }
    Ok(parts)
}

pub fn fit_fold(data: TrainData<'_>, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let n = data.labels.len();
    if data.features.rows() != n || data.biomarkers.rows() != n {
        return Err(Error::Shape(format!(
            "{n} labels, {} feature rows, {} biomarker rows",
            data.features.rows(),
            data.biomarkers.rows()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("empty training split".into()));
    }
    let priors = match (cfg.distill, data.priors) {
        (true, Some(p)) if p.rows() == n => Some(p),
        (true, Some(p)) => {
            return Err(Error::Shape(format!("{} priors for {n} training rows", p.rows())))
        }
        (true, None) => return Err(Error::Validation("distillation requires priors".into())),
        (false, _) => None,
    };
    let graph = match (cfg.uses_rel(), data.graph) {
        (true, Some(g)) if g.n_nodes == n => Some(g),
        (true, Some(g)) => {
            return Err(Error::Shape(format!("graph over {} nodes for {n} training rows", g.n_nodes)))
        }
        (true, None) => return Err(Error::Validation("relational distillation requires a graph".into())),
        (false, _) => None,
    };

    let embed = priors.map_or(cfg.embed_dim, Matrix::cols);
    let dims = StudentDims::new(data.features.cols(), embed, data.biomarkers.cols(), cfg.bio_hidden);
    let mut params = StudentParams::init(dims, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.values().len());
    let weights = cfg.weights();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut grads = Gradients::zeros_like(&params);
    let view = TrainData { priors, graph, ..data };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.values.iter_mut().for_each(|g| *g = 0.0);
            let parts = batch_objective(&params, &view, batch, weights, &mut grads)?;
            let loss = total_loss(parts, weights);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{parts:?}"),
                });
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            optimizer.step(params.values_mut(), &grads.values);
            epoch_loss += loss * batch.len() as f64;
        }
        curve.push(epoch_loss / n as f64);
    }

    let scores = predict_scores(&params, data.features, data.biomarkers)?;
    let threshold = youden_threshold(&scores, data.labels)?;
    Ok(FitResult {
        params,
        threshold,
        train_loss_curve: curve,
    })
}
