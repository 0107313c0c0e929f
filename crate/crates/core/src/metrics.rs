//! Patient-level binary classification metrics.
//!
//! AUC gives half credit to tied positive/negative pairs. Average precision sweeps scores
//! in descending order and admits tied scores as one step. Operating-point metrics predict
//! positive iff `score > threshold`.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(format!(
            "both classes required, got {pos} positives and {neg} negatives"
        )));
    }
    Ok(())
}

/// Groups of tied scores, as `(positives, negatives)`, in the given direction.
fn tie_groups(scores: &[f64], labels: &[u8], descending: bool) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in order {
        if prev.map_or(true, |p| p.total_cmp(&scores[i]) != Ordering::Equal) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney AUC, `P(s+ > s-) + ½ P(s+ = s-)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    // Twice the U statistic, so every step stays integral.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    for (p, n) in tie_groups(scores, labels, false) {
        twice_u += (p as u64) * (2 * neg_below + n as u64);
        neg_below += n as u64;
    }
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision: `Σ precision × Δrecall` over the descending sweep.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::Validation("average precision needs at least one positive".into()));
    }
    let n_pos = pos as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_groups(scores, labels, true) {
        let prev_recall = tp as f64 / n_pos;
        tp += p;
        fp += n;
        if p > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += precision * (tp as f64 / n_pos - prev_recall);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let (mut tp, mut fp) = (0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        if s > threshold {
            if y == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = pos - tp;
    let tn = neg - fp;
    let f1_den = 2 * tp + fp + fn_;
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
        f1: if f1_den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / f1_den as f64
        },
    })
}

/// Threshold maximizing `sensitivity + specificity - 1`, scanning `-inf`, midpoints between
/// consecutive distinct scores, and `+inf`. Ties go to the lowest threshold.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let groups = tie_groups(scores, labels, false);
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| a.total_cmp(b) == Ordering::Equal);

    // Threshold below everything: all predicted positive.
    let (mut tp, mut fp) = (pos, neg);
    let youden = |tp: usize, fp: usize| tp as f64 / pos as f64 + (neg - fp) as f64 / neg as f64 - 1.0;
    let mut best = (youden(tp, fp), f64::NEG_INFINITY);
    for (i, (p, n)) in groups.iter().enumerate() {
        tp -= p;
        fp -= n;
        let threshold = match distinct.get(i + 1) {
            Some(next) => 0.5 * (distinct[i] + next),
            None => f64::INFINITY,
        };
        let j = youden(tp, fp);
        if j > best.0 {
            best = (j, threshold);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub auprc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let c = confusion_metrics(scores, labels, threshold)?;
    Ok(EvalReport {
        auc: auc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        sensitivity: c.sensitivity,
        specificity: c.specificity,
        f1: c.f1,
        threshold,
        n_pos,
        n_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auprc_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!((auprc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap() - 0.25).abs() < 1e-15);
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.4);
        assert!(auprc(&[0.3, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn confusion_cases() {
        let c = confusion_metrics(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!((c.sensitivity, c.specificity, c.f1), (1.0, 1.0, 1.0));
        let c = confusion_metrics(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 1.0).unwrap();
        assert_eq!((c.sensitivity, c.specificity, c.f1), (0.0, 1.0, 0.0));
        // TP=2, FP=1, FN=1, TN=2.
        let c = confusion_metrics(&[0.9, 0.8, 0.7, 0.2, 0.1, 0.05], &[1, 1, 0, 1, 0, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 2));
        assert!((c.sensitivity - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.specificity - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f1 - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn youden_cases() {
        assert_eq!(youden_threshold(&[0.1, 0.9], &[0, 1]).unwrap(), 0.5);
        assert_eq!(youden_threshold(&[0.5, 0.5], &[0, 1]).unwrap(), f64::NEG_INFINITY);
        assert!(youden_threshold(&[0.5, 0.6], &[1, 1]).is_err());
    }

    #[test]
    fn youden_four_points_by_enumeration() {
        let scores = [0.2, 0.4, 0.6, 0.8];
        let labels = [0, 1, 0, 1];
        let candidates = [f64::NEG_INFINITY, 0.3, 0.5, 0.7, f64::INFINITY];
        let j: Vec<f64> = candidates
            .iter()
            .map(|&t| {
                let c = confusion_metrics(&scores, &labels, t).unwrap();
                c.sensitivity + c.specificity - 1.0
            })
            .collect();
        assert_eq!(j, vec![0.0, 0.5, 0.0, 0.5, 0.0]);
        // J = 0.5 at both 0.3 and 0.7; the lower one wins.
        let t = youden_threshold(&scores, &labels).unwrap();
        assert!((t - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_monotone_invariance_and_complement(
            raw in proptest::collection::vec((0u8..20, 0u8..2), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 10.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, y)| *y).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(a, auc(&transformed, &labels).unwrap());
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&negated, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
