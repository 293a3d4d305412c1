//! Statistical similarity between real and synthetic tables: base-2
//! Jensen-Shannon divergence on discrete columns, normalized 1-D Wasserstein
//! distance on continuous columns.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed;
use crate::table::{ColumnKind, Table};

/// Per-column similarity score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnScore {
    pub column: String,
    pub kind: String,
    pub score: f64,
}

/// Table-level similarity: per-column scores and their per-kind averages.
/// An average is absent when the table has no columns of that kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub avg_jsd: Option<f64>,
    pub avg_wd: Option<f64>,
    pub per_column: Vec<ColumnScore>,
}

/// Base-2 Jensen-Shannon divergence between the category distributions of
/// two discrete columns, over the union of their categories.
pub fn column_jsd(real: &[&str], synth: &[&str]) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Contract("jsd requires nonempty columns".into()));
    }
    let mut categories = BTreeMap::<&str, (f64, f64)>::new();
    for r in real {
        categories.entry(r).or_default().0 += 1.0;
    }
    for s in synth {
        categories.entry(s).or_default().1 += 1.0;
    }
    let (nr, ns) = (real.len() as f64, synth.len() as f64);
    let mut jsd = 0.0;
    for (p_count, q_count) in categories.values() {
        let p = p_count / nr;
        let q = q_count / ns;
        let m = 0.5 * (p + q);
        if p > 0.0 {
            jsd += 0.5 * p * (p / m).log2();
        }
        if q > 0.0 {
            jsd += 0.5 * q * (q / m).log2();
        }
    }
    Ok(jsd.clamp(0.0, 1.0))
}

/// 1-D empirical Wasserstein-1 distance between two continuous columns after
/// min-max normalization over the pooled range of both samples. A degenerate
/// pooled range maps everything to 0.
pub fn column_wd(real: &[f64], synth: &[f64]) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Contract("wd requires nonempty columns".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in real.iter().chain(synth) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(0.0);
    }
    let normalize = |values: &[f64]| {
        let mut out: Vec<f64> = values.iter().map(|v| (v - lo) / span).collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    };
    Ok(wasserstein_sorted(&normalize(real), &normalize(synth)))
}

/// W1 between two sorted empirical samples via their quantile functions.
/// For equal sizes this reduces to the mean absolute difference of the
/// order statistics.
fn wasserstein_sorted(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (u.len() as f64, v.len() as f64);
    let mut distance = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut q_prev = 0.0;
    while i < u.len() && j < v.len() {
        let qu = (i + 1) as f64 / nu;
        let qv = (j + 1) as f64 / nv;
        let q = qu.min(qv);
        distance += (u[i] - v[j]).abs() * (q - q_prev);
        q_prev = q;
        if qu <= q + f64::EPSILON {
            i += 1;
        }
        if qv <= q + f64::EPSILON {
            j += 1;
        }
    }
    distance
}

/// Scores every column of `synth` against `real`. When row counts differ,
/// the larger table is subsampled without replacement (seeded) so both sides
/// compare at equal size.
pub fn similarity_report(real: &Table, synth: &Table, seed_value: u64) -> Result<SimilarityReport> {
    if real.schema().as_ref() != synth.schema().as_ref() {
        return Err(Error::Schema(
            "similarity report requires matching schemas".into(),
        ));
    }
    if real.row_count() == 0 || synth.row_count() == 0 {
        return Err(Error::Contract(
            "similarity report requires nonempty tables".into(),
        ));
    }
    let target = real.row_count().min(synth.row_count());
    let real_sub = subsample(real, target, seed_value, 0);
    let synth_sub = subsample(synth, target, seed_value, 1);

    let mut per_column = Vec::new();
    let mut jsd_scores = Vec::new();
    let mut wd_scores = Vec::new();
    for (idx, col) in real_sub.schema().columns().iter().enumerate() {
        let score = match col.kind {
            ColumnKind::Discrete => {
                let r = real_sub.discrete_column(idx)?;
                let s = synth_sub.discrete_column(idx)?;
                let v = column_jsd(&r, &s)?;
                jsd_scores.push(v);
                v
            }
            ColumnKind::Continuous => {
                let r = real_sub.continuous_column(idx)?;
                let s = synth_sub.continuous_column(idx)?;
                let v = column_wd(&r, &s)?;
                wd_scores.push(v);
                v
            }
        };
        per_column.push(ColumnScore {
            column: col.name.clone(),
            kind: col.kind.to_string(),
            score,
        });
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    Ok(SimilarityReport {
        avg_jsd: mean(&jsd_scores),
        avg_wd: mean(&wd_scores),
        per_column,
    })
}

fn subsample(table: &Table, target: usize, seed_value: u64, tag: u64) -> Table {
    if table.row_count() <= target {
        return table.clone();
    }
    let mut indices: Vec<usize> = (0..table.row_count()).collect();
    let mut rng = seed::rng_chain(seed_value, &[seed::stream::METRICS, tag]);
    indices.shuffle(&mut rng);
    indices.truncate(target);
    indices.sort_unstable();
    table.select_rows(&indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{load_table, ColumnSchema, Schema};
    use std::sync::Arc;

    #[test]
    fn identical_distributions_have_zero_jsd() {
        let col = vec!["a", "b", "a", "c"];
        assert_eq!(column_jsd(&col, &col).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_supports_have_unit_jsd() {
        let r = vec!["a", "a"];
        let s = vec!["b", "c"];
        assert!((column_jsd(&r, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_matches_closed_form() {
        // P = (0.5, 0.5), Q = (1, 0):
        // JSD = 0.5*KL(P||M) + 0.5*KL(Q||M) with M = (0.75, 0.25)
        //     = 0.5*(0.5*lg(2/3) + 0.5*lg 2) + 0.5*lg(4/3) = 0.31127812...
        let r = vec!["x", "y"];
        let s = vec!["x", "x"];
        let got = column_jsd(&r, &s).unwrap();
        assert!((got - 0.311_278_124_459_132_84).abs() < 1e-12, "{got}");
    }

    #[test]
    fn jsd_is_symmetric() {
        let r = vec!["a", "a", "b", "c"];
        let s = vec!["a", "b", "b", "b"];
        assert_eq!(
            column_jsd(&r, &s).unwrap(),
            column_jsd(&s, &r).unwrap()
        );
    }

    #[test]
    fn identical_samples_have_zero_wd() {
        let xs = vec![0.2, 0.5, 0.9];
        assert_eq!(column_wd(&xs, &xs).unwrap(), 0.0);
    }

    #[test]
    fn shifted_uniform_wd_matches_shift_over_pooled_range() {
        // real ~ grid on [0, 1], synth = real + 0.1; pooled range [0, 1.1]
        // gives W1 = 0.1 / 1.1.
        let real: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let synth: Vec<f64> = real.iter().map(|v| v + 0.1).collect();
        let got = column_wd(&real, &synth).unwrap();
        assert!((got - 0.1 / 1.1).abs() < 2e-4, "{got}");
    }

    #[test]
    fn swapping_arguments_preserves_wd_on_same_range() {
        let real: Vec<f64> = (0..500).map(|i| (i as f64 * 0.7).sin()).collect();
        let synth: Vec<f64> = (0..500).map(|i| (i as f64 * 0.3).cos()).collect();
        let a = column_wd(&real, &synth).unwrap();
        let b = column_wd(&synth, &real).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn wd_handles_unequal_sizes() {
        // Same distribution at different sample sizes stays small.
        let real: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let synth: Vec<f64> = (0..=500).map(|i| i as f64 / 500.0).collect();
        let got = column_wd(&real, &synth).unwrap();
        assert!(got < 2e-3, "{got}");
    }

    #[test]
    fn degenerate_range_scores_zero() {
        let real = vec![3.0, 3.0];
        let synth = vec![3.0, 3.0, 3.0];
        assert_eq!(column_wd(&real, &synth).unwrap(), 0.0);
    }

    #[test]
    fn empty_columns_are_errors() {
        assert!(column_jsd(&[], &["a"]).is_err());
        assert!(column_wd(&[1.0], &[]).is_err());
    }

    fn table_from(csv: &str) -> Table {
        let schema = Arc::new(
            Schema::new(vec![
                ColumnSchema {
                    name: "x".into(),
                    kind: ColumnKind::Continuous,
                    label: false,
                },
                ColumnSchema {
                    name: "label".into(),
                    kind: ColumnKind::Discrete,
                    label: true,
                },
            ])
            .unwrap(),
        );
        load_table(csv.as_bytes(), schema).unwrap()
    }

    #[test]
    fn self_report_is_all_zeros() {
        let t = table_from("x,label\n1.5,a\n2.5,b\n3.5,a\n");
        let report = similarity_report(&t, &t, 0).unwrap();
        assert_eq!(report.avg_jsd, Some(0.0));
        assert_eq!(report.avg_wd, Some(0.0));
        assert_eq!(report.per_column.len(), 2);
        // Averages recompute from the per-column entries.
        let jsd_cols: Vec<f64> = report
            .per_column
            .iter()
            .filter(|c| c.kind == "discrete")
            .map(|c| c.score)
            .collect();
        assert_eq!(
            report.avg_jsd.unwrap(),
            jsd_cols.iter().sum::<f64>() / jsd_cols.len() as f64
        );
    }

    #[test]
    fn no_continuous_columns_reports_absent_wd() {
        let schema = Arc::new(
            Schema::new(vec![ColumnSchema {
                name: "label".into(),
                kind: ColumnKind::Discrete,
                label: true,
            }])
            .unwrap(),
        );
        let t = load_table(b"label\na\nb\n", schema).unwrap();
        let report = similarity_report(&t, &t, 0).unwrap();
        assert_eq!(report.avg_wd, None);
        assert!(report.avg_jsd.is_some());
    }

    #[test]
    fn unequal_sizes_resample_deterministically() {
        let big = table_from(
            &("x,label\n".to_string()
                + &(0..100)
                    .map(|i| format!("{}.5,{}\n", i, if i % 2 == 0 { "a" } else { "b" }))
                    .collect::<String>()),
        );
        let small = table_from("x,label\n10.5,a\n20.5,b\n30.5,a\n40.5,b\n");
        let a = similarity_report(&big, &small, 3).unwrap();
        let b = similarity_report(&big, &small, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_schemas_are_errors() {
        let t = table_from("x,label\n1.0,a\n");
        let schema2 = Arc::new(
            Schema::new(vec![
                ColumnSchema {
                    name: "y".into(),
                    kind: ColumnKind::Continuous,
                    label: false,
                },
                ColumnSchema {
                    name: "label".into(),
                    kind: ColumnKind::Discrete,
                    label: true,
                },
            ])
            .unwrap(),
        );
        let other = load_table(b"y,label\n1.0,a\n", schema2).unwrap();
        assert!(similarity_report(&t, &other, 0).is_err());
    }
}
