use cgmd_core::ingest::{apply_preprocessor, fit_preprocessor, read_cohort, ColumnRole, Schema};
use proptest::prelude::*;

fn schema() -> Schema {
    Schema::new()
        .with("patient_id", ColumnRole::Id)
        .with("label", ColumnRole::Label)
        .with("age", ColumnRole::Numeric)
        .with("sbp", ColumnRole::Numeric)
        .with("smoker", ColumnRole::Categorical)
        .with("site", ColumnRole::Categorical)
}

/// `(age, sbp, smoker, site)` rows; `None` numeric cells are written empty.
type Cells = (Option<f64>, Option<f64>, u8, u8);

fn csv_text(prefix: &str, rows: &[Cells]) -> String {
    let mut s = String::from("patient_id,label,age,sbp,smoker,site\n");
    for (i, (age, sbp, smoker, site)) in rows.iter().enumerate() {
        let num = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{prefix}{i},{},{},{},s{smoker},site{site}\n",
            i % 2,
            num(age),
            num(sbp)
        ));
    }
    s
}

fn complete_rows() -> impl Strategy<Value = Vec<Cells>> {
    prop::collection::vec(
        (-100.0f64..100.0, 50.0f64..250.0, 0u8..2, 0u8..4).prop_map(|(a, b, c, d)| (Some(a), Some(b), c, d)),
        2..40,
    )
}

fn gappy_rows() -> impl Strategy<Value = Vec<Cells>> {
    prop::collection::vec(
        (
            prop::option::weighted(0.8, -100.0f64..100.0),
            prop::option::weighted(0.8, 50.0f64..250.0),
            0u8..3,
            0u8..5,
        ),
        2..40,
    )
    .prop_filter("each numeric column needs an observed value", |rows| {
        rows.iter().any(|r| r.0.is_some()) && rows.iter().any(|r| r.1.is_some())
    })
}

proptest! {
    #[test]
    fn fitted_columns_are_centered(rows in complete_rows()) {
        let raw = read_cohort(csv_text("P", &rows).as_bytes(), &schema()).unwrap();
        let table = apply_preprocessor(&raw, &fit_preprocessor(&raw).unwrap()).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..table.len()).map(|i| table.biomarkers.get(i, j)).sum::<f64>() / table.len() as f64;
            prop_assert!(mean.abs() < 1e-9, "column {} mean {}", j, mean);
        }
    }

    #[test]
    fn one_hot_blocks_sum_to_zero_or_one(fit_rows in gappy_rows(), other in gappy_rows()) {
        let fit_raw = read_cohort(csv_text("F", &fit_rows).as_bytes(), &schema()).unwrap();
        let scaler = fit_preprocessor(&fit_raw).unwrap();
        let other_raw = read_cohort(csv_text("O", &other).as_bytes(), &schema()).unwrap();
        let table = apply_preprocessor(&other_raw, &scaler).unwrap();
        for (i, row) in other_raw.rows.iter().enumerate() {
            let mut offset = scaler.numeric.len();
            for (j, vocab) in scaler.categorical.iter().enumerate() {
                let width = vocab.categories.len();
                let sum: f64 = (offset..offset + width).map(|c| table.biomarkers.get(i, c)).sum();
                let known = vocab.categories.contains(&row.categorical[j]);
                prop_assert_eq!(sum, if known { 1.0 } else { 0.0 });
                offset += width;
            }
        }
    }

    #[test]
    fn identical_bytes_give_identical_tables(rows in gappy_rows()) {
        let text = csv_text("P", &rows);
        let load = || {
            let raw = read_cohort(text.as_bytes(), &schema()).unwrap();
            apply_preprocessor(&raw, &fit_preprocessor(&raw).unwrap()).unwrap()
        };
        let (a, b) = (load(), load());
        prop_assert!(a.biomarkers.as_slice().iter().zip(b.biomarkers.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(a, b);
    }
}
