//! Clustering recovery metrics, advertising cost ratios and trace reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryMetrics {
    pub ari: f64,
    pub purity: f64,
    pub nmi: f64,
}

/// Compares two labelings of the same users. Labels are opaque strings, so
/// only the induced partitions matter.
pub fn recovery_metrics(
    predicted: &[(String, String)],
    truth: &[(String, String)],
) -> Result<RecoveryMetrics> {
    let pred: BTreeMap<&str, &str> = predicted
        .iter()
        .map(|(u, l)| (u.as_str(), l.as_str()))
        .collect();
    let true_: BTreeMap<&str, &str> = truth
        .iter()
        .map(|(u, l)| (u.as_str(), l.as_str()))
        .collect();
    if pred.len() != predicted.len() || true_.len() != truth.len() {
        return Err(Error::UserSetMismatch(
            "duplicate user in assignments".into(),
        ));
    }
    if pred.is_empty() {
        return Err(Error::UserSetMismatch("no users".into()));
    }
    if let Some(u) = pred.keys().find(|u| !true_.contains_key(*u)) {
        return Err(Error::UserSetMismatch(format!("{u:?} missing from truth")));
    }
    if let Some(u) = true_.keys().find(|u| !pred.contains_key(*u)) {
        return Err(Error::UserSetMismatch(format!(
            "{u:?} missing from predictions"
        )));
    }
    let pairs: Vec<(&str, &str)> = pred.iter().map(|(u, p)| (*p, true_[u])).collect();
    Ok(metrics_from_pairs(&pairs))
}

/// Same metrics over two label vectors indexed by user.
pub fn recovery_metrics_indexed(predicted: &[usize], truth: &[usize]) -> Result<RecoveryMetrics> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::UserSetMismatch(format!(
            "{} predicted vs {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = predicted
        .iter()
        .copied()
        .zip(truth.iter().copied())
        .collect();
    Ok(metrics_from_pairs(&pairs))
}

fn metrics_from_pairs<L: Ord + Copy>(pairs: &[(L, L)]) -> RecoveryMetrics {
    let mut table: BTreeMap<(L, L), u64> = BTreeMap::new();
    let mut rows: BTreeMap<L, u64> = BTreeMap::new();
    let mut cols: BTreeMap<L, u64> = BTreeMap::new();
    for &(p, t) in pairs {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let n = pairs.len() as f64;
    let comb2 = |x: u64| (x as f64) * (x as f64 - 1.0) / 2.0;

    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_rows * sum_cols / comb2(pairs.len() as u64).max(f64::MIN_POSITIVE);
    let max_index = (sum_rows + sum_cols) / 2.0;
    let ari = if max_index == expected {
        // both partitions trivial (all singletons or one block)
        if rows.len() == cols.len() {
            1.0
        } else {
            0.0
        }
    } else {
        (index - expected) / (max_index - expected)
    };

    let mut best_per_pred: BTreeMap<L, u64> = BTreeMap::new();
    for (&(p, _), &c) in &table {
        let e = best_per_pred.entry(p).or_default();
        *e = (*e).max(c);
    }
    let purity = best_per_pred.values().sum::<u64>() as f64 / n;

    let entropy = |m: &BTreeMap<L, u64>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (h_pred, h_true) = (entropy(&rows), entropy(&cols));
    let mi: f64 = table
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            (c / n) * ((c * n) / (rows[&p] as f64 * cols[&t] as f64)).ln()
        })
        .sum();
    let nmi = if h_pred + h_true == 0.0 {
        1.0
    } else {
        (mi / ((h_pred + h_true) / 2.0)).clamp(0.0, 1.0)
    };
    RecoveryMetrics { ari, purity, nmi }
}

/// Effective cost per action; `None` when there were no actions.
pub fn ecpa(cost: f64, actions: u64) -> Option<f64> {
    ratio(cost, actions)
}

/// Effective cost per click; `None` when there were no clicks.
pub fn ecpc(cost: f64, clicks: u64) -> Option<f64> {
    ratio(cost, clicks)
}

fn ratio(cost: f64, count: u64) -> Option<f64> {
    if count == 0 || cost.is_nan() || cost < 0.0 {
        return None;
    }
    Some(cost / count as f64)
}

/// Slack allowed when flagging a decrease between consecutive objectives.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Side-by-side CSV of several traces keyed by iteration.
///
/// Each trace contributes `<label>:<objective>`, `<label>:max_param_delta`
/// and `<label>:non_decreasing` columns; iterations a trace lacks are left
/// empty.
pub fn objective_report(traces: &[(String, Trace)]) -> String {
    let iters: BTreeSet<usize> = traces
        .iter()
        .flat_map(|(_, t)| t.rows.iter().map(|r| r.iter))
        .collect();
    let mut out = String::from("iter");
    for (label, t) in traces {
        write!(
            out,
            ",{label}:{},{label}:max_param_delta,{label}:non_decreasing",
            t.objective_name
        )
        .unwrap();
    }
    out.push('\n');

    let lookups: Vec<BTreeMap<usize, (f64, f64, bool)>> = traces
        .iter()
        .map(|(_, t)| {
            let mut prev: Option<f64> = None;
            t.rows
                .iter()
                .map(|r| {
                    let ok = prev.is_none_or(|p| r.objective >= p - MONOTONE_SLACK);
                    prev = Some(r.objective);
                    (r.iter, (r.objective, r.max_param_delta, ok))
                })
                .collect()
        })
        .collect();
    for it in iters {
        write!(out, "{it}").unwrap();
        for l in &lookups {
            match l.get(&it) {
                Some((o, d, ok)) => write!(out, ",{o},{d},{ok}").unwrap(),
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn labels(ls: &[&str]) -> Vec<(String, String)> {
        ls.iter()
            .enumerate()
            .map(|(i, l)| (format!("u{i}"), l.to_string()))
            .collect()
    }

    #[test]
    fn identical_partitions() {
        let t = labels(&["a", "a", "b", "b", "c"]);
        let m = recovery_metrics(&t, &t).unwrap();
        assert_eq!(m.ari, 1.0);
        assert_eq!(m.purity, 1.0);
        assert_abs_diff_eq!(m.nmi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn renamed_labels() {
        let t = labels(&["a", "a", "b", "b", "c"]);
        let p = labels(&["7", "7", "x", "x", "0"]);
        let m = recovery_metrics(&p, &t).unwrap();
        assert_eq!(m.ari, 1.0);
        assert_eq!(m.purity, 1.0);
    }

    #[test]
    fn known_ari_value() {
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        let m = recovery_metrics_indexed(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap();
        assert_abs_diff_eq!(m.ari, 4.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.purity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_users() {
        let a = labels(&["a", "b"]);
        let b = labels(&["a"]);
        assert!(matches!(
            recovery_metrics(&a, &b),
            Err(Error::UserSetMismatch(_))
        ));
    }

    #[test]
    fn cost_ratios() {
        assert_eq!(ecpa(100.0, 4), Some(25.0));
        assert_eq!(ecpa(0.0, 10), Some(0.0));
        assert_eq!(ecpa(100.0, 0), None);
        assert_eq!(ecpc(100.0, 4), Some(25.0));
        assert_eq!(ecpc(100.0, 0), None);
    }

    #[test]
    fn report_pads_short_traces() {
        let mut a = Trace::new("log_objective");
        a.push(1, -3.0, 0.5);
        a.push(2, -2.0, 0.1);
        let mut b = Trace::new("log_likelihood");
        b.push(1, -10.0, 0.2);
        let r = objective_report(&[("em".into(), a), ("plsa".into(), b)]);
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(
            lines[0],
            "iter,em:log_objective,em:max_param_delta,em:non_decreasing,\
             plsa:log_likelihood,plsa:max_param_delta,plsa:non_decreasing"
        );
        assert_eq!(lines[1], "1,-3,0.5,true,-10,0.2,true");
        assert_eq!(lines[2], "2,-2,0.1,true,,,");
    }

    #[test]
    fn report_flags_decreases() {
        let mut a = Trace::new("log_objective");
        a.push(1, -1.0, 0.0);
        a.push(2, -1.5, 0.0);
        let r = objective_report(&[("em".into(), a)]);
        assert!(r.lines().nth(2).unwrap().ends_with(",false"));
    }
}
