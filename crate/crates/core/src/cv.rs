//! Per-fold pipeline and cross-validation driver.

use log::info;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, symmetrize, KnnGraph, SymmetricGraph};
use crate::ingest::{apply_preprocessor, assert_disjoint_ids, CohortTable, RawCohortFile, Scaler};
use crate::matrix::{mean, population_std, Matrix};
use crate::metrics::{evaluate, EvalReport};
use crate::prior::{build_priors, smooth_embeddings, CrossCohort, PriorMode, PriorSet};
use crate::trainer::{fit_fold, predict_scores, stratified_kfold, FitResult, FoldSplit, TrainConfig, TrainData};

/// Teacher cohort with embeddings and student cohort with features, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohorts {
    pub teacher: RawCohortFile,
    pub student: RawCohortFile,
}

impl Cohorts {
    pub fn new(teacher: RawCohortFile, student: RawCohortFile) -> Result<Self> {
        assert_disjoint_ids(&teacher.ids(), &student.ids())?;
        if teacher.embedding_names.is_empty() {
            return Err(Error::Validation("teacher cohort has no embedding columns".into()));
        }
        if student.feature_names.is_empty() {
            return Err(Error::Validation("student cohort has no feature columns".into()));
        }
        if teacher.numeric_names != student.numeric_names || teacher.categorical_names != student.categorical_names {
            return Err(Error::Schema("cohorts must share the same biomarker columns".into()));
        }
        Ok(Self { teacher, student })
    }

    pub fn splits(&self, cfg: &TrainConfig) -> Result<Vec<FoldSplit>> {
        stratified_kfold(&self.student.labels(), cfg.n_folds, cfg.seed)
    }
}

/// Every intermediate of one fold, in the order the pipeline produces them.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub split: FoldSplit,
    pub teacher: CohortTable,
    pub train: CohortTable,
    pub val: CohortTable,
    /// Teacher biomarker graph, built when smoothing.
    pub teacher_graph: Option<KnnGraph>,
    /// Teacher embeddings after optional smoothing; absent without distillation.
    pub teacher_embeddings: Option<Matrix>,
    /// Priors for the training rows.
    pub priors: Option<PriorSet>,
    /// Relational graph over the training rows.
    pub student_graph: Option<SymmetricGraph>,
}

fn fit_scalers(cohorts: &Cohorts, train_raw: &RawCohortFile, cfg: &TrainConfig) -> Result<(Scaler, Scaler)> {
    if cfg.shared_scaler {
        let s = Scaler::fit(&[&cohorts.teacher, train_raw], cfg.standardize)?;
        Ok((s.clone(), s))
    } else {
        Ok((
            Scaler::fit(&[&cohorts.teacher], cfg.standardize)?,
            Scaler::fit(&[train_raw], cfg.standardize)?,
        ))
    }
}

/// Preprocessing, graphs, smoothing and priors for one fold. Reads nothing from the
/// validation rows except to transform them with train-fitted statistics.
pub fn prepare_fold(cohorts: &Cohorts, split: &FoldSplit, cfg: &TrainConfig) -> Result<FoldArtifacts> {
    cfg.validate()?;
    let train_raw = cohorts.student.subset(&split.train);
    let val_raw = cohorts.student.subset(&split.val);
    let (teacher_scaler, student_scaler) = fit_scalers(cohorts, &train_raw, cfg)?;
    let teacher = apply_preprocessor(&cohorts.teacher, &teacher_scaler)?;
    let train = apply_preprocessor(&train_raw, &student_scaler)?;
    let val = apply_preprocessor(&val_raw, &student_scaler)?;

    let mut artifacts = FoldArtifacts {
        split: split.clone(),
        teacher,
        train,
        val,
        teacher_graph: None,
        teacher_embeddings: None,
        priors: None,
        student_graph: None,
    };
    if !cfg.distill {
        return Ok(artifacts);
    }
    let z0 = artifacts
        .teacher
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Validation("teacher cohort has no embeddings".into()))?;
    let embeddings = if cfg.smooth {
        let g = build_knn_graph(&artifacts.teacher.biomarkers, cfg.k_mri, cfg.sigma)?;
        let z = smooth_embeddings(z0, &g, cfg.alpha)?;
        artifacts.teacher_graph = Some(g);
        z
    } else {
        z0.clone()
    };
    let cc = CrossCohort {
        student_biomarkers: &artifacts.train.biomarkers,
        student_labels: &artifacts.train.labels,
        teacher_biomarkers: &artifacts.teacher.biomarkers,
        teacher_labels: &artifacts.teacher.labels,
        teacher_embeddings: &embeddings,
    };
    let priors = build_priors(&cc, cfg.prior_mode, cfg.k_mri, cfg.sigma)?;
    artifacts.teacher_embeddings = Some(embeddings);
    artifacts.priors = Some(priors);
    if cfg.uses_rel() {
        let g = build_knn_graph(&artifacts.train.biomarkers, cfg.k_fundus, cfg.sigma)?;
        artifacts.student_graph = Some(symmetrize(&g, cfg.fundus_edge_weight)?);
    }
    Ok(artifacts)
}

pub fn fit_prepared(artifacts: &FoldArtifacts, cfg: &TrainConfig) -> Result<FitResult> {
    let features = artifacts
        .train
        .features
        .as_ref()
        .ok_or_else(|| Error::Validation("student cohort has no features".into()))?;
    fit_fold(
        TrainData {
            features,
            biomarkers: &artifacts.train.biomarkers,
            labels: &artifacts.train.labels,
            priors: artifacts.priors.as_ref().map(|p| &p.priors),
            graph: artifacts.student_graph.as_ref(),
        },
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold_id: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub fit: FitResult,
    pub eval: EvalReport,
    /// Share of training patients whose gated neighborhood was empty.
    pub fallback_rate: Option<f64>,
}

pub fn evaluate_fold(artifacts: &FoldArtifacts, fit: FitResult, cfg: &TrainConfig) -> Result<FoldResult> {
    let val = &artifacts.val;
    let features = val
        .features
        .as_ref()
        .ok_or_else(|| Error::Validation("student cohort has no features".into()))?;
    let scores = predict_scores(&fit.params, features, &val.biomarkers)?;
    let eval = evaluate(&scores, &val.labels, fit.threshold)?;
    Ok(FoldResult {
        fold_id: artifacts.split.fold_id,
        n_train: artifacts.train.len(),
        n_val: val.len(),
        fallback_rate: artifacts
            .priors
            .as_ref()
            .filter(|_| cfg.prior_mode == PriorMode::GatedKnn)
            .map(PriorSet::fallback_rate),
        fit,
        eval,
    })
}

pub fn run_fold(cohorts: &Cohorts, split: &FoldSplit, cfg: &TrainConfig) -> Result<FoldResult> {
    let artifacts = prepare_fold(cohorts, split, cfg)?;
    let fit = fit_prepared(&artifacts, cfg)?;
    let result = evaluate_fold(&artifacts, fit, cfg)?;
    match result.fallback_rate {
        Some(rate) => info!(
            "fold {}: auc {:.4}, gated fallback rate {:.3}",
            result.fold_id, result.eval.auc, rate
        ),
        None => info!("fold {}: auc {:.4}", result.fold_id, result.eval.auc),
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MetricSummary>,
}

pub const METRIC_NAMES: [&str; 5] = ["auc", "auprc", "sensitivity", "specificity", "f1"];

pub fn metric_value(e: &EvalReport, name: &str) -> Option<f64> {
    Some(match name {
        "auc" => e.auc,
        "auprc" => e.auprc,
        "sensitivity" => e.sensitivity,
        "specificity" => e.specificity,
        "f1" => e.f1,
        _ => return None,
    })
}

impl CvReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let summary = METRIC_NAMES
            .iter()
            .map(|&name| {
                let values: Vec<f64> = folds
                    .iter()
                    .map(|f| metric_value(&f.eval, name).expect("known metric"))
                    .collect();
                MetricSummary {
                    name,
                    mean: mean(&values),
                    std: population_std(&values),
                }
            })
            .collect();
        Self { folds, summary }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.name == name)
    }

    pub fn mean_auc(&self) -> f64 {
        self.metric("auc").expect("auc is always summarized").mean
    }
}

/// Runs every fold, in parallel when `jobs > 1`. Results are ordered by fold.
pub fn run_cv(cohorts: &Cohorts, cfg: &TrainConfig, jobs: usize) -> Result<CvReport> {
    cfg.validate()?;
    let splits = cohorts.splits(cfg)?;
    let folds = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| {
            splits
                .par_iter()
                .map(|s| run_fold(cohorts, s, cfg))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        splits
            .iter()
            .map(|s| run_fold(cohorts, s, cfg))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(CvReport::from_folds(folds))
}
