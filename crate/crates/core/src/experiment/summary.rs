//! Aggregation of `results.csv` into per-(method, n) means and standard
//! deviations across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{rows_from_csv, Method, ResultRow};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub n: usize,
    pub runs: usize,
    /// Rows for this cell without an NDCG value (failed runs).
    pub gaps: usize,
    pub mean_ndcg: Option<f64>,
    pub std_ndcg: Option<f64>,
    pub mean_true_utility: Option<f64>,
    pub mean_divergence: Option<f64>,
    /// Highest mean NDCG at this n among click-trained methods.
    pub best: bool,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let s = if values.len() > 1 {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(s))
}

type Key = (Method, u64, u64, usize);

fn key(r: &ResultRow) -> Key {
    (
        r.method,
        r.delta.map_or(0, f64::to_bits),
        r.lambda.map_or(0, f64::to_bits),
        r.n,
    )
}

pub fn summarize_rows(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&ResultRow) -> Option<f64>| -> Vec<f64> { g.iter().filter_map(|r| f(r)).collect() };
            let ndcg = pick(|r| r.ndcg_at_5);
            let (mean_ndcg, std_ndcg) = mean_std(&ndcg);
            SummaryRow {
                method: g[0].method,
                delta: g[0].delta,
                lambda: g[0].lambda,
                n: g[0].n,
                runs: g.len(),
                gaps: g.len() - ndcg.len(),
                mean_ndcg,
                std_ndcg,
                mean_true_utility: mean_std(&pick(|r| r.true_utility)).0,
                mean_divergence: mean_std(&pick(|r| r.divergence)).0,
                best: false,
            }
        })
        .collect();
    let mut best_at: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, s) in out.iter().enumerate() {
        if let (false, Some(m)) = (s.method.is_reference(), s.mean_ndcg) {
            let e = best_at.entry(s.n).or_insert((m, i));
            if m > e.0 {
                *e = (m, i);
            }
        }
    }
    for (_, i) in best_at.into_values() {
        out[i].best = true;
    }
    out
}

/// Parses `results.csv` text and aggregates it.
pub fn summarize(results_csv: &str) -> Result<Vec<SummaryRow>> {
    Ok(summarize_rows(&rows_from_csv(results_csv)?))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,delta,lambda,n,runs,gaps,mean_ndcg,std_ndcg,mean_true_utility,mean_divergence,best\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            opt(r.delta),
            opt(r.lambda),
            r.n,
            r.runs,
            r.gaps,
            opt(r.mean_ndcg),
            opt(r.std_ndcg),
            opt(r.mean_true_utility),
            opt(r.mean_divergence),
            r.best
        );
    }
    out
}

/// Methods as rows, log sizes as columns, cells `mean (std)` of NDCG@5; the
/// best click-trained method per column is starred, missing cells are `-`.
pub fn summary_to_table(rows: &[SummaryRow]) -> String {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut labels: Vec<(Key, String)> = Vec::new();
    for r in rows {
        let label = match (r.delta, r.lambda) {
            (Some(d), _) => format!("{} (delta={d:e})", r.method),
            (_, Some(l)) => format!("{} (lambda={l:.3e})", r.method),
            _ => r.method.to_string(),
        };
        let k = (r.method, r.delta.map_or(0, f64::to_bits), r.lambda.map_or(0, f64::to_bits), 0);
        if !labels.iter().any(|(kk, _)| *kk == k) {
            labels.push((k, label));
        }
    }
    let width = labels.iter().map(|(_, l)| l.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}", "method");
    for n in &ns {
        let _ = write!(out, " | {:>17}", format!("n={n}"));
    }
    out.push('\n');
    for (k, label) in &labels {
        let _ = write!(out, "{label:width$}");
        for &n in &ns {
            let cell = rows
                .iter()
                .find(|r| (r.method, r.delta.map_or(0, f64::to_bits), r.lambda.map_or(0, f64::to_bits), 0) == *k && r.n == n)
                .and_then(|r| {
                    r.mean_ndcg.map(|m| {
                        format!("{m:.4} ({:.4}){}", r.std_ndcg.unwrap_or(0.0), if r.best { "*" } else { " " })
                    })
                })
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {cell:>17}");
        }
        out.push('\n');
    }
    out
}
