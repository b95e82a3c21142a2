//! Acceptance suite: runs every acceptance criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion, then fails if any failed.
//!
//! Criteria 6-8 train on the default synthetic benchmark and take several
//! minutes in an optimized build; criterion 9 drives the `cltr` binary through
//! cargo.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cltr_core::click::{simulate_log, RelevanceMapping};
use cltr_core::estimators::{
    exposure_ips_utility, exposure_risk, query_exposure_divergence, variance_upper_bound, EstimatorKind,
};
use cltr_core::eval::{brute_force_estimator_moments, true_utility, EvalMode};
use cltr_core::experiment::summary::summarize_rows;
use cltr_core::experiment::{rows_from_csv, run_grid, ExperimentGrid, Method, ResultRow};
use cltr_core::policy::{ExposureModel, ExposureProfile, PlackettLucePolicy};
use cltr_core::propensity::{estimate_exposure_propensities, PropensityEstimates};
use cltr_core::training::{risk_gradient, utility_gradient};
use rand::Rng;

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const INSTANCES: u64 = 40;

fn mapping() -> RelevanceMapping {
    RelevanceMapping::default()
}

/// 1. Exposure IPS with true propensities is exactly unbiased.
fn unbiasedness() -> Verdict {
    let model = ExposureModel::top5();
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let inst = random_instance(seed);
        let m = brute_force_estimator_moments(
            &inst.query,
            &inst.target,
            &inst.logging,
            &model,
            &mapping(),
            EstimatorKind::ExposureIps,
            1,
        )
        .unwrap();
        let oracle = oracle_utility(&inst.target, &inst.query, &model);
        let lib = true_utility(&inst.target, &dataset(vec![inst.query.clone()]), &model, &mapping(), EvalMode::Exact).unwrap();
        worst = worst.max((m.mean - oracle).abs()).max((lib - oracle).abs());
    }
    verdict(worst <= 1e-10, format!("{INSTANCES} instances, max |E[U_hat] - U| = {worst:.2e} (tol 1e-10)"))
}

/// 2. Exact variance never exceeds (Z/N) d2.
fn variance_bound() -> Verdict {
    let model = ExposureModel::top5();
    let mut checked = 0;
    let mut violations = 0;
    let mut tightest: f64 = 0.0;
    for seed in 0..INSTANCES {
        let inst = random_instance(seed);
        let rho = inst.target.exact_exposure(&inst.query, &model).unwrap();
        let rho0 = inst.logging.exact_exposure(&inst.query, &model).unwrap();
        let d2 = query_exposure_divergence(inst.query.id, &rho, &rho0).unwrap();
        for n in [1usize, 10, 100] {
            let m = brute_force_estimator_moments(
                &inst.query,
                &inst.target,
                &inst.logging,
                &model,
                &mapping(),
                EstimatorKind::ExposureIps,
                n,
            )
            .unwrap();
            let bound = variance_upper_bound(d2, rho.z, n);
            checked += 1;
            if m.variance > bound * (1.0 + 1e-12) {
                violations += 1;
            }
            tightest = tightest.max(m.variance / bound);
        }
    }
    verdict(
        violations == 0,
        format!("{checked} (pair, N) cases, {violations} violations, max Var/bound = {tightest:.4}"),
    )
}

/// 3. Coverage of the high-confidence lower bound over simulated logs.
fn coverage() -> Verdict {
    let model = ExposureModel::top5();
    let mut r = rng(7);
    let query = random_query(&mut r, 1, 3);
    let target = random_policy(&mut r, 3, 1.5);
    let logging = random_policy(&mut r, 3, 1.5);
    let ds = dataset(vec![query.clone()]);
    let truth = oracle_utility(&target, &query, &model);
    let rho = target.exact_exposure(&query, &model).unwrap();
    let rho0 = logging.exact_exposure(&query, &model).unwrap();
    let d2 = query_exposure_divergence(query.id, &rho, &rho0).unwrap();
    let profiles = exact_profiles(&target, &[query.clone()], &model);
    let true_props = true_propensities(&logging, &[query.clone()], &model);
    let logs = 10_000usize;
    let n = 100usize;
    let mut lines = Vec::new();
    let mut pass = true;
    for delta in [0.1, 0.01] {
        let risk = exposure_risk(d2, rho.z, n, delta).unwrap();
        let (mut hit_true, mut hit_est) = (0usize, 0usize);
        for i in 0..logs {
            let mut lr = rng(1_000_000 + i as u64);
            let log = simulate_log(&logging, &ds, &model, &mapping(), n, &mut lr).unwrap();
            let u = exposure_ips_utility(&log, &profiles, &true_props).unwrap().value;
            if truth >= u - risk {
                hit_true += 1;
            }
            let est = estimate_exposure_propensities(&log, &model).unwrap();
            let u_est = exposure_ips_utility(&log, &profiles, &est).unwrap().value;
            let d2_est = estimated_divergence(&rho, &est, query.id);
            let risk_est = exposure_risk(d2_est, rho.z, n, delta).unwrap();
            if truth >= u_est - risk_est {
                hit_est += 1;
            }
        }
        let freq = hit_true as f64 / logs as f64;
        let required = 1.0 - delta - 3.0 * (delta * (1.0 - delta) / logs as f64).sqrt();
        pass &= freq >= required;
        lines.push(format!(
            "delta={delta}: coverage {freq:.4} (need >= {required:.4}); with estimated propensities {:.4}",
            hit_est as f64 / logs as f64
        ));
    }
    verdict(pass, lines.join("; "))
}

/// `Σ_d ρ'(d)²/ρ̂'0(d)` against estimated exposure; unseen documents make it infinite.
fn estimated_divergence(rho: &ExposureProfile, est: &PropensityEstimates, q: u64) -> f64 {
    rho.rho
        .iter()
        .enumerate()
        .map(|(d, &r)| {
            let p0 = est.exposure(q, d);
            if p0 > 0.0 {
                r * r / (p0 * rho.z)
            } else if r > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum()
}

/// 4. d2 >= 1 on random profile pairs, and exactly 1 on equal pairs.
fn divergence_floor() -> Verdict {
    let mut r = rng(4);
    let model = ExposureModel::top5();
    let mut min_d2 = f64::INFINITY;
    let mut worst_equal: f64 = 0.0;
    for i in 0..10_000u64 {
        let (a, b) = if i % 2 == 0 {
            // arbitrary positive profiles sharing Z
            let docs = r.gen_range(1..=12);
            let z = r.gen_range(0.1..3.0);
            let mk = |r: &mut rand_chacha::ChaCha8Rng| {
                let w: Vec<f64> = (0..docs).map(|_| r.gen_range(1e-6..1.0f64).powi(3)).collect();
                let s: f64 = w.iter().sum();
                ExposureProfile::new(w.iter().map(|x| x / s * z).collect(), z)
            };
            (mk(&mut r), mk(&mut r))
        } else {
            // exposure of two Plackett-Luce policies on one query
            let docs = r.gen_range(1..=6);
            let k = r.gen_range(1..=5);
            let q = random_query(&mut r, i, docs);
            let p = random_policy(&mut r, k, 2.0);
            let p0 = random_policy(&mut r, k, 2.0);
            (p.exact_exposure(&q, &model).unwrap(), p0.exact_exposure(&q, &model).unwrap())
        };
        min_d2 = min_d2.min(query_exposure_divergence(0, &a, &b).unwrap());
        worst_equal = worst_equal.max((query_exposure_divergence(0, &b, &b).unwrap() - 1.0).abs());
    }
    verdict(
        min_d2 >= 1.0 - 1e-9 && worst_equal <= 1e-9,
        format!("10^4 pairs: min d2 = {min_d2:.12}, max |d2(p,p) - 1| = {worst_equal:.2e}"),
    )
}

fn relative_error(g: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = g.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..params.len())
        .map(|i| {
            let mut p = params.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn with_params(policy: &PlackettLucePolicy, params: &[f64]) -> PlackettLucePolicy {
    let mut p = policy.clone();
    p.scorer.params_mut().copy_from_slice(params);
    p
}

/// Exact exposure from the enumerated ranking distribution.
fn oracle_rho(policy: &PlackettLucePolicy, q: &cltr_core::data::Query, model: &ExposureModel) -> Vec<f64> {
    let mut rho = vec![0.0; q.len()];
    for (y, p) in policy.enumerate(q).unwrap() {
        for (k, &d) in y.iter().enumerate() {
            rho[d] += p * model.probs().get(k).copied().unwrap_or(0.0);
        }
    }
    rho
}

struct GradCase {
    queries: Vec<cltr_core::data::Query>,
    policy: PlackettLucePolicy,
    logging: PlackettLucePolicy,
}

fn grad_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let queries: Vec<_> = (0..2).map(|i| random_query(&mut r, i, 3)).collect();
    GradCase {
        policy: random_policy(&mut r, 3, 0.7),
        logging: random_policy(&mut r, 3, 0.7),
        queries,
    }
}

/// Returns (error at S, error at 10 S) for the utility and the risk gradient.
fn gradient_errors(case: &GradCase, samples: usize, seed: u64) -> (f64, f64) {
    let model = ExposureModel::top5();
    let ds = dataset(case.queries.clone());
    let log = simulate_log(&case.logging, &ds, &model, &mapping(), 200, &mut rng(seed)).unwrap();
    let props = estimate_exposure_propensities(&log, &model).unwrap().clip(log.n(), cltr_core::data::SplitTag::Train);
    let params = case.policy.scorer.params().to_vec();

    let u_hat = |p: &[f64]| -> f64 {
        let pol = with_params(&case.policy, p);
        let rhos: BTreeMap<u64, Vec<f64>> = case.queries.iter().map(|q| (q.id, oracle_rho(&pol, q, &model))).collect();
        log.entries
            .iter()
            .map(|e| e.clicked_docs().map(|(_, d)| rhos[&e.query_id][d] / props.exposure(e.query_id, d)).sum::<f64>())
            .sum::<f64>()
            / log.n() as f64
    };
    let fd_u = central_difference(&params, u_hat);
    let g_u = utility_gradient(&case.policy, &ds, &log.entries, &props, &model, samples, true, &mut rng(seed + 1)).unwrap();

    let (n, delta) = (log.n(), 0.05);
    let mass: BTreeMap<u64, f64> = case.queries.iter().map(|q| (q.id, 1.0)).collect();
    let z = model.total(3);
    let risk = |p: &[f64]| -> f64 {
        let pol = with_params(&case.policy, p);
        let d2: f64 = case
            .queries
            .iter()
            .map(|q| {
                oracle_rho(&pol, q, &model)
                    .iter()
                    .enumerate()
                    .map(|(d, r)| r * r / (z * props.exposure(q.id, d)))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / case.queries.len() as f64;
        (z / n as f64 * (1.0 - delta) / delta * d2).sqrt()
    };
    let fd_r = central_difference(&params, risk);
    let profiles = exact_profiles(&case.policy, &case.queries, &model);
    let g_r = risk_gradient(&case.policy, &ds, &profiles, &props, &mass, &model, n, delta, samples, &mut rng(seed + 2)).unwrap();
    (relative_error(&g_u, &fd_u), relative_error(&g_r, &fd_r))
}

/// 5. REINFORCE gradients against finite differences of exact objectives.
fn gradient_checks() -> Verdict {
    let cases: Vec<GradCase> = (0..3).map(|s| grad_case(500 + s)).collect();
    let mut pass = true;
    let mut lines = Vec::new();
    let (mut small_sum, mut big_sum) = ((0.0, 0.0), (0.0, 0.0));
    for (i, case) in cases.iter().enumerate() {
        let small = gradient_errors(case, 10_000, 900 + i as u64);
        let big = gradient_errors(case, 100_000, 900 + i as u64);
        pass &= big.0 <= 1e-2 && big.1 <= 1e-2;
        small_sum = (small_sum.0 + small.0, small_sum.1 + small.1);
        big_sum = (big_sum.0 + big.0, big_sum.1 + big.1);
        lines.push(format!(
            "case {i}: utility {:.2e} -> {:.2e}, risk {:.2e} -> {:.2e}",
            small.0, big.0, small.1, big.1
        ));
    }
    let decreasing = big_sum.0 < small_sum.0 && big_sum.1 < small_sum.1;
    pass &= decreasing;
    lines.push(format!("summed error decreases with 10x samples: {decreasing}"));
    verdict(pass, format!("relative error at 1e4 -> 1e5 samples (tol 1e-2 at 1e5): {}", lines.join("; ")))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

/// Mean NDCG@5 per (method, n) over seeds.
fn mean_ndcg(rows: &[ResultRow], method: Method) -> BTreeMap<usize, f64> {
    summarize_rows(rows)
        .into_iter()
        .filter(|s| s.method == method && s.gaps == 0)
        .filter_map(|s| s.mean_ndcg.map(|m| (s.n, m)))
        .collect()
}

/// Tolerance and onset fixed from the committed reference run: ε is two
/// standard errors of the worst exposure-CRM cell, n₀ the smallest grid size
/// from which exposure-CRM stays within ε of logging.
fn reference_tolerances(reference: &[ResultRow], runs: usize) -> (f64, Option<usize>) {
    let summary = summarize_rows(reference);
    let eps = 2.0
        * summary
            .iter()
            .filter(|s| s.method == Method::ExposureCrm)
            .filter_map(|s| s.std_ndcg)
            .fold(0.0, f64::max)
        / (runs as f64).sqrt();
    let logging = mean_ndcg(reference, Method::Logging);
    let crm = mean_ndcg(reference, Method::ExposureCrm);
    let mut n0 = None;
    for (&n, &m) in crm.iter().rev() {
        if m >= logging[&n] - eps {
            n0 = Some(n);
        } else {
            break;
        }
    }
    (eps, n0)
}

/// First grid size at which `method` reaches logging level within ε.
fn reach(curve: &BTreeMap<usize, f64>, logging: &BTreeMap<usize, f64>, eps: f64) -> Option<usize> {
    curve.iter().find(|(n, &m)| m >= logging[n] - eps).map(|(&n, _)| n)
}

struct BenchmarkRun {
    rows: Vec<ResultRow>,
    seconds: f64,
}

fn benchmark_run() -> BenchmarkRun {
    let grid = ExperimentGrid {
        methods: vec![Method::Logging, Method::ExposureIps, Method::ExposureCrm],
        ..ExperimentGrid::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcome = run_grid(&grid, dir.path()).unwrap();
    BenchmarkRun {
        rows: outcome.rows,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// 6. Safety behaviour on the default benchmark against the committed reference.
fn safety(run: &BenchmarkRun) -> Verdict {
    let reference_text = std::fs::read_to_string(data_dir().join("reference_results.csv")).unwrap();
    let reference = rows_from_csv(&reference_text).unwrap();
    let runs = ExperimentGrid::default().runs;
    let (eps, n0) = reference_tolerances(&reference, runs);
    let Some(n0) = n0 else {
        return verdict(false, format!("reference run never keeps exposure_crm within eps={eps:.4} of logging"));
    };
    let logging = mean_ndcg(&run.rows, Method::Logging);
    let crm = mean_ndcg(&run.rows, Method::ExposureCrm);
    let ips = mean_ndcg(&run.rows, Method::ExposureIps);
    let curve = |m: &BTreeMap<usize, f64>| {
        m.iter().map(|(n, v)| format!("{n}:{v:.4}")).collect::<Vec<_>>().join(" ")
    };
    let a = crm.iter().filter(|(&n, _)| n >= n0).all(|(n, &m)| m >= logging[n] - eps);
    let b1 = crm
        .iter()
        .any(|(n, &m)| m >= logging[n] - eps && ips.get(n).is_some_and(|&i| i < logging[n] - eps));
    let reach_crm = reach(&crm, &logging, eps);
    let reach_ips = reach(&ips, &logging, eps);
    let b2 = match (reach_crm, reach_ips) {
        (Some(c), Some(i)) => i >= 5 * c,
        (Some(_), None) => true,
        _ => false,
    };
    let same_as_reference = {
        let keep = |r: &&ResultRow| matches!(r.method, Method::Logging | Method::ExposureIps | Method::ExposureCrm);
        let a: Vec<_> = reference.iter().filter(keep).collect();
        let b: Vec<_> = run.rows.iter().filter(keep).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.ndcg_at_5 == y.ndcg_at_5)
    };
    verdict(
        a && b1 && b2,
        format!(
            "eps={eps:.4} n0={n0} (from reference); (a) crm >= logging-eps for n >= n0: {a}; \
             (b) ips < logging-eps where crm within eps: {b1}; crm reaches logging at {reach_crm:?}, \
             ips at {reach_ips:?}, 5x gap: {b2}; matches reference: {same_as_reference}; \
             logging [{}] crm [{}] ips [{}]; {:.0}s",
            curve(&logging),
            curve(&crm),
            curve(&ips),
            run.seconds
        ),
    )
}

/// 7. Exposure-CRM and exposure-IPS agree at the largest grid size.
fn convergence(run: &BenchmarkRun) -> Verdict {
    let crm = mean_ndcg(&run.rows, Method::ExposureCrm);
    let ips = mean_ndcg(&run.rows, Method::ExposureIps);
    let (&n, &c) = crm.iter().next_back().unwrap();
    let i = ips[&n];
    verdict(
        (c - i).abs() <= 0.005,
        format!("n={n}: crm {c:.4} vs ips {i:.4}, |diff| = {:.4} (tol 0.005)", (c - i).abs()),
    )
}

/// 8. Smaller δ never yields a larger final divergence.
fn delta_ablation() -> Verdict {
    let deltas = vec![0.1, 1e-2, 1e-4, 1e-5];
    let grid = ExperimentGrid {
        methods: vec![Method::ExposureCrm],
        delta_values: deltas.clone(),
        n_values: vec![1_000_000],
        ..ExperimentGrid::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let rows = run_grid(&grid, dir.path()).unwrap().rows;
    let summary = summarize_rows(&rows);
    let divergence: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            summary
                .iter()
                .find(|s| s.delta == Some(d))
                .and_then(|s| s.mean_divergence)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let monotone = divergence.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        monotone,
        format!(
            "n=10^6, mean divergence over {} seeds for delta {:?}: {:?}; {:.0}s",
            grid.runs,
            deltas,
            divergence.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn cltr(args: &[&str]) -> std::process::Output {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    Command::new(env!("CARGO"))
        .current_dir(root)
        .args(["run", "--release", "-q", "-p", "cltr-cli", "--bin", "cltr", "--"])
        .args(args)
        .output()
        .expect("cargo runs")
}

/// 9. Two executions of the CLI from one manifest give identical results.csv.
fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.toml");
    std::fs::write(
        &config,
        "n_values = [200, 2000]\nruns = 2\ndelta_values = [0.1, 0.00001]\n\
         [dataset]\nkind = \"synthetic\"\n[dataset.spec]\nnum_queries = 40\ndocs_per_query = 8\n\
         [train]\nmax_epochs = 10\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = cltr(&["grid", "--config", config.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    if !first.status.success() {
        return verdict(false, format!("first run failed: {}", String::from_utf8_lossy(&first.stderr)));
    }
    let manifest = a.join("manifest.toml");
    let second = cltr(&["grid", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    if !second.status.success() {
        return verdict(false, format!("second run failed: {}", String::from_utf8_lossy(&second.stderr)));
    }
    let ra = std::fs::read(a.join("results.csv")).unwrap();
    let rb = std::fs::read(b.join("results.csv")).unwrap();
    let ma = std::fs::read(a.join("manifest.toml")).unwrap();
    let mb = std::fs::read(b.join("manifest.toml")).unwrap();
    verdict(
        ra == rb && ma == mb,
        format!(
            "results.csv {} bytes, identical: {}; manifests identical: {}",
            ra.len(),
            ra == rb,
            ma == mb
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut timed = |name: &'static str, f: &dyn Fn() -> Verdict| {
        let start = Instant::now();
        let v = f();
        println!("  ({name} took {:.1}s)", start.elapsed().as_secs_f64());
        results.push((name, v));
    };
    timed("1 unbiasedness oracle", &unbiasedness);
    timed("2 variance bound", &variance_bound);
    timed("3 lower-bound coverage", &coverage);
    timed("4 divergence floor", &divergence_floor);
    timed("5 gradient checks", &gradient_checks);
    let run = benchmark_run();
    timed("6 safety behaviour", &|| safety(&run));
    timed("7 convergence equivalence", &|| convergence(&run));
    timed("8 delta ablation", &delta_ablation);
    timed("9 CLI determinism", &determinism);

    println!("\nacceptance criteria:");
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
