//! Line-oriented report files and the ablation comparison table.

use std::fmt::Write as _;
use std::path::Path;

use crate::cv::{run_cv, Cohorts, CvReport, FoldResult, MetricSummary, METRIC_NAMES};
use crate::error::{Error, Result};
use crate::prior::PriorMode;
use crate::trainer::TrainConfig;

/// `key,value` lines for one fold. Floats use shortest round-trip formatting.
pub fn fold_report(f: &FoldResult) -> String {
    let e = &f.eval;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k},{v}");
    };
    kv("fold", f.fold_id.to_string());
    kv("n_train", f.n_train.to_string());
    kv("n_val", f.n_val.to_string());
    kv("n_pos", e.n_pos.to_string());
    kv("n_neg", e.n_neg.to_string());
    kv("auc", e.auc.to_string());
    kv("auprc", e.auprc.to_string());
    kv("sensitivity", e.sensitivity.to_string());
    kv("specificity", e.specificity.to_string());
    kv("f1", e.f1.to_string());
    kv("threshold", e.threshold.to_string());
    if let Some(rate) = f.fallback_rate {
        kv("gated_fallback_rate", rate.to_string());
    }
    if let Some(last) = f.fit.train_loss_curve.last() {
        kv("final_train_loss", last.to_string());
    }
    s
}

/// `metric,mean,std` lines across folds.
pub fn aggregate_report(r: &CvReport) -> String {
    let mut s = String::from("metric,mean,std\n");
    for m in &r.summary {
        let _ = writeln!(s, "{},{},{}", m.name, m.mean, m.std);
    }
    s
}

/// Parses an aggregate report back into `(metric, mean, std)` rows.
pub fn parse_aggregate(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "metric,mean,std")) => {}
        _ => return Err(Error::Parse { line: 1, message: "expected header metric,mean,std".into() }),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse { line: i as u64 + 1, message: format!("{m}: {l:?}") };
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let num = |x: &str| x.parse::<f64>().map_err(|_| bad("bad number"));
            Ok((parts[0].to_string(), num(parts[1])?, num(parts[2])?))
        })
        .collect()
}

/// Writes `fold_<i>.txt` for every fold and `aggregate.txt`.
pub fn write_cv_reports(dir: &Path, r: &CvReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in &r.folds {
        let path = dir.join(format!("fold_{}.txt", f.fold_id));
        std::fs::write(&path, fold_report(f)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("aggregate.txt");
    std::fs::write(&path, aggregate_report(r)).map_err(|e| Error::io(&path, e))
}

/// Named configurations: supervised baseline, the four switch combinations with
/// distillation on, then the full configuration under each prior construction.
pub fn ablation_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |distill: bool, smooth: bool, rel: bool| TrainConfig {
        distill,
        smooth,
        rel,
        ..base.clone()
    };
    let mut grid = vec![
        ("supervised".to_string(), with(false, false, false)),
        ("distill".to_string(), with(true, false, false)),
        ("distill+smooth".to_string(), with(true, true, false)),
        ("distill+rel".to_string(), with(true, false, true)),
        ("distill+smooth+rel".to_string(), with(true, true, true)),
    ];
    for mode in PriorMode::ALL {
        grid.push((
            format!("prior:{}", mode.name()),
            TrainConfig {
                prior_mode: mode,
                ..with(true, true, true)
            },
        ));
    }
    grid
}

pub fn run_ablation(cohorts: &Cohorts, base: &TrainConfig, jobs: usize) -> Result<Vec<(String, CvReport)>> {
    ablation_grid(base)
        .into_iter()
        .map(|(name, cfg)| Ok((name, run_cv(cohorts, &cfg, jobs)?)))
        .collect()
}

const TABLE_HEADERS: [&str; 5] = ["AUC", "AUPRC", "Sens", "Spec", "F1"];

/// Aligned text table with one `mean±std` cell per metric, rows in the given order.
pub fn emit_ablation_table(rows: &[(String, Vec<MetricSummary>)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Validation("ablation table needs at least one row".into()));
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(_, summary)| {
            METRIC_NAMES
                .iter()
                .map(|name| {
                    summary
                        .iter()
                        .find(|m| m.name == *name)
                        .map(|m| format!("{:.3}±{:.3}", m.mean, m.std))
                        .ok_or_else(|| Error::Validation(format!("missing metric {name}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let method_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max("Method".len());
    let cell_w = cells
        .iter()
        .flatten()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<method_w$}", "Method");
    for h in TABLE_HEADERS {
        let _ = write!(out, "  {h:<cell_w$}");
    }
    out = out.trim_end().to_string();
    out.push('\n');
    for ((name, _), row) in rows.iter().zip(&cells) {
        let mut line = format!("{name:<method_w$}");
        for c in row {
            let pad = cell_w - c.chars().count();
            let _ = write!(line, "  {c}{}", " ".repeat(pad));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Reads a table produced by [`emit_ablation_table`] back into `(method, [(mean, std); 5])`.
pub fn parse_ablation_table(text: &str) -> Result<Vec<(String, [(f64, f64); 5])>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse { line: i as u64 + 1, message: m.to_string() };
            let tokens: Vec<&str> = l.split_whitespace().collect();
            if tokens.len() < 6 {
                return Err(bad("expected a method and five cells"));
            }
            let (name, cells) = tokens.split_at(tokens.len() - 5);
            let mut values = [(0.0, 0.0); 5];
            for (v, cell) in values.iter_mut().zip(cells) {
                let (m, s) = cell.split_once('±').ok_or_else(|| bad("cell without ±"))?;
                *v = (
                    m.parse().map_err(|_| bad("bad mean"))?,
                    s.parse().map_err(|_| bad("bad std"))?,
                );
            }
            Ok((name.join(" "), values))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(base: f64) -> Vec<MetricSummary> {
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, &name)| MetricSummary {
                name,
                mean: base + 0.01 * i as f64,
                std: 0.0123 * (i + 1) as f64,
            })
            .collect()
    }

    #[test]
    fn single_row_table() {
        let t = emit_ablation_table(&[("supervised".into(), summary(0.7))]).unwrap();
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("Method"));
        assert!(emit_ablation_table(&[]).is_err());
    }

    #[test]
    fn rows_keep_order_and_round_trip() {
        let rows = vec![
            ("zeta".to_string(), summary(0.61234)),
            ("alpha".to_string(), summary(0.85551)),
        ];
        let t = emit_ablation_table(&rows).unwrap();
        let back = parse_ablation_table(&t).unwrap();
        assert_eq!(back.len(), 2);
        for ((name, s), (pname, vals)) in rows.iter().zip(&back) {
            assert_eq!(name, pname);
            for (m, (pm, ps)) in s.iter().zip(vals) {
                assert!((m.mean - pm).abs() <= 5e-4 + 1e-12);
                assert!((m.std - ps).abs() <= 5e-4 + 1e-12);
                assert_eq!(format!("{:.3}", m.mean), format!("{pm:.3}"));
            }
        }
        let header = t.lines().next().unwrap();
        for col in ["AUC", "F1"] {
            let at = header.find(col).unwrap();
            for row in t.lines().skip(1) {
                assert!(row.chars().nth(at).unwrap().is_ascii_digit(), "{row:?} at {at}");
            }
        }
    }

    #[test]
    fn ablation_grid_layout() {
        let g = ablation_grid(&TrainConfig::default());
        let names: Vec<&str> = g.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "supervised",
                "distill",
                "distill+smooth",
                "distill+rel",
                "distill+smooth+rel",
                "prior:gated_knn",
                "prior:ungated_knn",
                "prior:global_class_mean",
                "prior:global_mean",
            ]
        );
        assert!(!g[0].1.distill);
        assert!(g[2].1.smooth && !g[2].1.rel);
        assert_eq!(g[8].1.prior_mode, PriorMode::GlobalMean);
    }

    #[test]
    fn aggregate_parses_back() {
        let text = "metric,mean,std\nauc,0.75,0.0625\n";
        assert_eq!(parse_aggregate(text).unwrap(), vec![("auc".to_string(), 0.75, 0.0625)]);
        assert!(parse_aggregate("auc,1,2\n").is_err());
    }
}
