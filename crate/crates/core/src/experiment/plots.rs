//! Static SVG plots drawn from result rows alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{rows_from_csv, Method, ResultRow};
use crate::error::{Error, Result};

type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// Mean of `metric` per (series label, n) over seeds, skipping missing values.
fn mean_series(rows: &[ResultRow], keep: impl Fn(&ResultRow) -> bool, metric: fn(&ResultRow) -> Option<f64>) -> Series {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| keep(r)) {
        if let Some(v) = metric(r) {
            let label = match (r.delta, r.lambda) {
                (Some(d), _) => format!("{} delta={d:e}", r.method),
                (_, Some(l)) => format!("{} lambda={l:.2e}", r.method),
                _ => r.method.to_string(),
            };
            let e = acc.entry(label).or_default().entry(r.n).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, pts)| (k, pts.into_iter().map(|(n, (s, c))| (n as f64, s / c as f64)).collect()))
        .collect()
}

fn draw(path: &Path, title: &str, y_label: &str, series: &Series) -> Result<()> {
    let to_err = |e: String| Error::Validation(format!("plotting {}: {e}", path.display()));
    let points = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Ok(());
    }
    if x1 <= x0 {
        x1 = x0 * 10.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| to_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(70)
        .build_cartesian_2d((x0..x1).log_scale(), (y0 - pad)..(y1 + pad))
        .map_err(|e| to_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("log size n")
        .y_desc(y_label)
        .draw()
        .map_err(|e| to_err(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| to_err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| to_err(e.to_string()))?;
    root.present().map_err(|e| to_err(e.to_string()))?;
    Ok(())
}

/// Writes `ndcg_vs_n.svg` and, when several deltas were run,
/// `delta_ndcg_vs_n.svg` and `delta_divergence_vs_n.svg`.
pub fn plot_results(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let ndcg = mean_series(rows, |_| true, |r| r.ndcg_at_5);
    if !ndcg.is_empty() {
        let p = dir.join("ndcg_vs_n.svg");
        draw(&p, "NDCG@5 by log size", "NDCG@5", &ndcg)?;
        written.push(p);
    }
    let mut deltas: Vec<u64> = rows
        .iter()
        .filter(|r| r.method == Method::ExposureCrm)
        .filter_map(|r| r.delta.map(f64::to_bits))
        .collect();
    deltas.sort_unstable();
    deltas.dedup();
    if deltas.len() > 1 {
        let crm = |r: &ResultRow| r.method == Method::ExposureCrm || r.method == Method::Logging;
        let p = dir.join("delta_ndcg_vs_n.svg");
        draw(&p, "NDCG@5 by confidence delta", "NDCG@5", &mean_series(rows, crm, |r| r.ndcg_at_5))?;
        written.push(p);
        let p = dir.join("delta_divergence_vs_n.svg");
        draw(&p, "Exposure divergence by confidence delta", "divergence", &mean_series(rows, crm, |r| r.divergence))?;
        written.push(p);
    }
    Ok(written)
}

pub fn plot_results_csv(results_csv: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    plot_results(&rows_from_csv(results_csv)?, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_files() {
        let text = "method,n,delta,lambda,seed,status,ndcg_at_5,true_utility,divergence,risk,best_epoch\n\
                    logging,100,,,0,ok,0.6,0.4,1.0,0.1,\n\
                    logging,1000,,,0,ok,0.6,0.4,1.0,0.1,\n\
                    exposure_crm,100,0.1,,0,ok,0.5,0.3,1.5,0.2,3\n\
                    exposure_crm,1000,0.1,,0,ok,0.65,0.3,2.5,0.2,3\n\
                    exposure_crm,100,0.00001,,0,ok,0.6,0.3,1.1,0.2,3\n\
                    exposure_crm,1000,0.00001,,0,ok,0.62,0.3,1.4,0.2,3\n";
        let dir = tempfile::tempdir().unwrap();
        let files = plot_results_csv(text, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let svg = fs::read_to_string(f).unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.contains("logging"));
        }
    }
}
