//! Teacher priors for the student cohort.
//!
//! Teacher embeddings are smoothed once over the teacher-cohort kNN graph
//! (`z~_i = alpha * z_i + (1 - alpha) * sum_j p_ij z_j`), then each student patient gets a
//! weighted average of the smoothed embeddings of its nearest teacher-cohort patients in
//! biomarker space. With label gating only same-label neighbors contribute, their weights
//! renormalized; when none of the retrieved neighbors shares the label the full neighborhood
//! is used instead. Every prior is stored unit-normalized.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_cross_knn, KnnGraph};
use crate::matrix::{self, Matrix};

pub fn average_scan_embeddings<V: AsRef<[f64]>>(scans: &[V]) -> Result<Vec<f64>> {
    let first = scans
        .first()
        .ok_or_else(|| Error::Validation("no scan embeddings to average".into()))?
        .as_ref();
    let mut acc = vec![0.0; first.len()];
    for s in scans {
        let s = s.as_ref();
        if s.len() != acc.len() {
            return Err(Error::Shape(format!(
                "scan embedding of length {} among length {}",
                s.len(),
                acc.len()
            )));
        }
        acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    let n = scans.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// One step of residual propagation over a square kNN graph.
pub fn smooth_embeddings(z0: &Matrix, g: &KnnGraph, alpha: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if g.bipartite || g.n_nodes != z0.rows() {
        return Err(Error::Shape(format!(
            "graph over {} nodes cannot smooth {} embeddings",
            g.n_nodes,
            z0.rows()
        )));
    }
    if alpha == 1.0 {
        return Ok(z0.clone());
    }
    let mut out = Matrix::zeros(z0.rows(), z0.cols());
    for (i, edges) in g.neighbors.iter().enumerate() {
        let row = out.row_mut(i);
        for e in edges {
            row.iter_mut()
                .zip(z0.row(e.target))
                .for_each(|(o, z)| *o += e.weight * z);
        }
        row.iter_mut()
            .zip(z0.row(i))
            .for_each(|(o, z)| *o = alpha * z + (1.0 - alpha) * *o);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    /// One unit-norm prior per student patient.
    pub priors: Matrix,
    /// True when the prior was built from a same-label neighborhood (or class mean).
    pub gated: Vec<bool>,
    /// Teacher-cohort row indices that contributed to each prior.
    pub neighbors: Vec<Vec<usize>>,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.priors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.rows() == 0
    }

    /// Fraction of rows that fell back to the ungated neighborhood.
    pub fn fallback_rate(&self) -> f64 {
        if self.gated.is_empty() {
            return 0.0;
        }
        self.gated.iter().filter(|g| !**g).count() as f64 / self.gated.len() as f64
    }

    pub fn select(&self, indices: &[usize]) -> PriorSet {
        PriorSet {
            priors: self.priors.select_rows(indices),
            gated: indices.iter().map(|&i| self.gated[i]).collect(),
            neighbors: indices.iter().map(|&i| self.neighbors[i].clone()).collect(),
        }
    }

    /// Text manifest: `patient_id,gated,neighbor_ids...` per row.
    pub fn write_manifest<W: Write>(
        &self,
        mut out: W,
        patient_ids: &[String],
        teacher_ids: &[String],
    ) -> std::io::Result<()> {
        for (i, id) in patient_ids.iter().enumerate() {
            write!(out, "{id},{}", self.gated[i])?;
            for &j in &self.neighbors[i] {
                write!(out, ",{}", teacher_ids[j])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Inputs shared by every prior constructor.
#[derive(Debug, Clone, Copy)]
pub struct CrossCohort<'a> {
    /// Preprocessed biomarkers of the student cohort (queries).
    pub student_biomarkers: &'a Matrix,
    pub student_labels: &'a [u8],
    /// Preprocessed biomarkers of the teacher cohort (references).
    pub teacher_biomarkers: &'a Matrix,
    pub teacher_labels: &'a [u8],
    /// Teacher embeddings, smoothed or raw.
    pub teacher_embeddings: &'a Matrix,
}

impl CrossCohort<'_> {
    fn validate(&self) -> Result<()> {
        let q = self.student_biomarkers.rows();
        let n = self.teacher_biomarkers.rows();
        if self.student_labels.len() != q {
            return Err(Error::Shape(format!(
                "{} student labels for {q} student rows",
                self.student_labels.len()
            )));
        }
        if self.teacher_labels.len() != n || self.teacher_embeddings.rows() != n {
            return Err(Error::Shape(format!(
                "teacher cohort has {n} biomarker rows, {} labels, {} embeddings",
                self.teacher_labels.len(),
                self.teacher_embeddings.rows()
            )));
        }
        Ok(())
    }
}

fn unit_or_err(v: &[f64], who: impl FnOnce() -> String) -> Result<Vec<f64>> {
    matrix::normalized(v).ok_or_else(|| Error::ZeroNorm(who()))
}

fn knn_prior(cc: &CrossCohort<'_>, k: usize, sigma: f64, gating: bool) -> Result<PriorSet> {
    cc.validate()?;
    let n = cc.teacher_biomarkers.rows();
    if k > n {
        return Err(Error::Config(format!("k={k} exceeds teacher cohort size {n}")));
    }
    let cross = build_cross_knn(cc.student_biomarkers, cc.teacher_biomarkers, k, sigma)?;
    let d = cc.teacher_embeddings.cols();
    let q = cc.student_biomarkers.rows();
    let mut priors = Matrix::zeros(q, d);
    let mut gated = Vec::with_capacity(q);
    let mut neighbors = Vec::with_capacity(q);
    for (u, edges) in cross.neighbors.iter().enumerate() {
        let label = cc.student_labels[u];
        let same: Vec<_> = edges
            .iter()
            .filter(|e| cc.teacher_labels[e.target] == label)
            .collect();
        let (used, is_gated) = if gating && !same.is_empty() {
            (same, true)
        } else {
            (edges.iter().collect(), false)
        };
        let total: f64 = used.iter().map(|e| e.weight).sum();
        let mut acc = vec![0.0; d];
        for e in &used {
            let p = e.weight / total;
            acc.iter_mut()
                .zip(cc.teacher_embeddings.row(e.target))
                .for_each(|(a, z)| *a += p * z);
        }
        let unit = unit_or_err(&acc, || format!("student patient {u}"))?;
        priors.row_mut(u).copy_from_slice(&unit);
        gated.push(is_gated);
        neighbors.push(used.iter().map(|e| e.target).collect());
    }
    Ok(PriorSet {
        priors,
        gated,
        neighbors,
    })
}

/// Label-gated kNN imputation with ungated fallback.
pub fn impute_priors(cc: &CrossCohort<'_>, k: usize, sigma: f64) -> Result<PriorSet> {
    knn_prior(cc, k, sigma, true)
}

/// kNN imputation without label gating.
pub fn ungated_knn_prior(cc: &CrossCohort<'_>, k: usize, sigma: f64) -> Result<PriorSet> {
    knn_prior(cc, k, sigma, false)
}

/// Unit-normalized cohort mean.
pub fn global_mean_prior(embeddings: &Matrix) -> Result<Vec<f64>> {
    if embeddings.rows() == 0 {
        return Err(Error::Validation("empty teacher cohort".into()));
    }
    let mean = average_scan_embeddings(&embeddings.iter_rows().collect::<Vec<_>>())?;
    unit_or_err(&mean, || "global mean prior".into())
}

/// Unit-normalized per-class means, indexed by label.
pub fn global_class_mean_prior(embeddings: &Matrix, labels: &[u8]) -> Result<[Vec<f64>; 2]> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    let class_mean = |c: u8| -> Result<Vec<f64>> {
        let rows: Vec<&[f64]> = embeddings
            .iter_rows()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            return Err(Error::Validation(format!(
                "class {c} absent from teacher cohort"
            )));
        }
        unit_or_err(&average_scan_embeddings(&rows)?, || format!("class {c} mean prior"))
    };
    Ok([class_mean(0)?, class_mean(1)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    GatedKnn,
    UngatedKnn,
    GlobalMean,
    GlobalClassMean,
}

impl PriorMode {
    pub const ALL: [PriorMode; 4] = [
        PriorMode::GatedKnn,
        PriorMode::UngatedKnn,
        PriorMode::GlobalClassMean,
        PriorMode::GlobalMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::GatedKnn => "gated_knn",
            PriorMode::UngatedKnn => "ungated_knn",
            PriorMode::GlobalMean => "global_mean",
            PriorMode::GlobalClassMean => "global_class_mean",
        }
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prior mode {s:?}")))
    }
}

/// Builds priors for every student row under the requested construction.
pub fn build_priors(cc: &CrossCohort<'_>, mode: PriorMode, k: usize, sigma: f64) -> Result<PriorSet> {
    cc.validate()?;
    let q = cc.student_labels.len();
    let broadcast = |rows: Vec<&[f64]>, gated: Vec<bool>| -> Result<PriorSet> {
        let priors = if q == 0 {
            Matrix::zeros(0, cc.teacher_embeddings.cols())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(PriorSet {
            priors,
            gated,
            neighbors: vec![Vec::new(); q],
        })
    };
    match mode {
        PriorMode::GatedKnn => impute_priors(cc, k, sigma),
        PriorMode::UngatedKnn => ungated_knn_prior(cc, k, sigma),
        PriorMode::GlobalMean => {
            let mean = global_mean_prior(cc.teacher_embeddings)?;
            broadcast(vec![mean.as_slice(); q], vec![false; q])
        }
        PriorMode::GlobalClassMean => {
            let means = global_class_mean_prior(cc.teacher_embeddings, cc.teacher_labels)?;
            let rows = cc.student_labels.iter().map(|&y| means[y as usize].as_slice()).collect();
            broadcast(rows, vec![true; q])
        }
    }
}
