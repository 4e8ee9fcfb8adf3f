//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line to stderr
//! (uncaptured) and then asserts. Tests hold a shared lock so runtime limits
//! are measured without competing for the CPU.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use twoscale::algorithm::{averaged_step, run, step, IterateState, RunOptions, StepSchedule};
use twoscale::analysis::{constant_d, kstar, BoundParams};
use twoscale::network::{build_topology, lazy_weights, metropolis_weights, TopologyKind};
use twoscale::noise::{
    empirical_covariance, make_noise_model, sample_noise, NoiseModel, NoiseProcess, SyntheticNoise,
};
use twoscale::numerics::{second_singular_value, DenseMatrix, DenseVector};
use twoscale::problem::{exact_solution, random_instance, validate_assumptions};
use twoscale_cli::config::config_from_value;
use twoscale_cli::{run_experiment, run_sweep, SweepGrid};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, passed: bool, elapsed: Duration, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "AC{id} {verdict} {name} ({:.2}s): {detail}\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "{}", line.trim_end());
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn topology(kind: TopologyKind, n: usize) -> twoscale::network::Topology {
    let prob = (kind == TopologyKind::ErdosRenyi).then_some(0.5);
    build_topology(kind, n, prob, 0).unwrap()
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn ac1_average_consistency() {
    let _g = serial();
    let start = Instant::now();
    let kinds = [
        TopologyKind::Ring,
        TopologyKind::Path,
        TopologyKind::Star,
        TopologyKind::Complete,
        TopologyKind::ErdosRenyi,
    ];
    let (n, d, steps) = (6, 3, 10_000);
    let s = StepSchedule::new(0.5, 0.1).unwrap();
    let model = NoiseModel::iso(d, 0.1).unwrap();
    let mut worst = 0.0_f64;
    for (t, kind) in kinds.into_iter().enumerate() {
        let sys = random_instance(d, n, t as u64, 0.5).unwrap();
        let topo = topology(kind, n);
        let w = metropolis_weights(&topo);
        let v = lazy_weights(&topo, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
        let mut state = IterateState::zeros(n, d);
        for _ in 0..steps {
            let noise = sample_noise(&model, &mut rng, n);
            let next = step(&state, &sys, &w, &v, &s, &noise).unwrap();
            let xi: Vec<DenseVector> = noise.iter().map(|p| p.0.clone()).collect();
            let psi: Vec<DenseVector> = noise.iter().map(|p| p.1.clone()).collect();
            let (xbar, ybar) = averaged_step(
                &state.xbar(),
                &state.ybar(),
                &sys,
                &s,
                state.k,
                &DenseVector::mean_of(&xi),
                &DenseVector::mean_of(&psi),
            )
            .unwrap();
            let gap = next
                .xbar()
                .sub(&xbar)
                .as_slice()
                .iter()
                .chain(next.ybar().sub(&ybar).as_slice())
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            worst = worst.max(gap);
            state = next;
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "average consistency",
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        elapsed,
        &format!(
            "max |mean(distributed) - centralized| = {worst:.3e} over 5 topologies x {steps} steps"
        ),
    );
}

#[test]
fn ac2_per_step_proof_inequalities() {
    let _g = serial();
    let start = Instant::now();
    let s = StepSchedule::new(0.5, 0.1).unwrap();
    let d = 3;
    let mut checked = 0;
    let mut violations = 0;
    let mut first = None;
    for (kind, n) in [
        (TopologyKind::Ring, 4),
        (TopologyKind::Ring, 8),
        (TopologyKind::Star, 6),
    ] {
        let w = metropolis_weights(&topology(kind, n));
        for seed in 0..20 {
            let sys = random_instance(d, n, seed, 0.5).unwrap();
            let sol = exact_solution(&sys).unwrap();
            let mut noise = SyntheticNoise::new(NoiseModel::iso(d, 0.1).unwrap(), seed);
            let c = noise.bound().unwrap();
            let p = BoundParams::new(w.sigma2(), w.sigma2(), None, n, sys.r(), c, &s, 0.0, 0.0)
                .unwrap();
            let mut opts = RunOptions::new(10_000, 10_000);
            opts.audit = Some(p);
            let audit = run(&sys, &w, &w, &s, &mut noise, &sol, &opts)
                .unwrap()
                .audit
                .unwrap();
            checked += audit.steps_checked;
            let v = audit.eq1_violations + audit.eq2_violations + audit.v_recursion_violations;
            violations += v;
            if v > 0 && first.is_none() {
                first = Some(format!(
                    "{kind}-{n} seed {seed}: {:?}",
                    audit.first_violation
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        "per-step proof inequalities",
        violations == 0 && elapsed < Duration::from_secs(60),
        elapsed,
        &format!(
            "{violations} violations in {checked} audited steps (Eq1, Eq2, V-recursion){}",
            first.map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

#[test]
fn ac3_lemma1_pathwise_dominance() {
    let _g = serial();
    let start = Instant::now();
    let (n, d) = (4, 2);
    let w = metropolis_weights(&topology(TopologyKind::Ring, n));
    let s = StepSchedule::new(0.5, 0.1).unwrap();
    let mut before = (0, 0);
    let mut after = (0, 0);
    let mut infinite = 0;
    for seed in 0..4 {
        let sys = random_instance(d, n, seed, 0.5).unwrap();
        let sol = exact_solution(&sys).unwrap();
        let mut noise = SyntheticNoise::new(NoiseModel::iso(d, 0.1).unwrap(), seed);
        let p = BoundParams::new(
            w.sigma2(),
            w.sigma2(),
            Some(2.0 / 3.0),
            n,
            sys.r(),
            noise.bound().unwrap(),
            &s,
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(p.kstar, 2);
        let mut opts = RunOptions::new(100_000, 1000);
        opts.audit = Some(p);
        let a = run(&sys, &w, &w, &s, &mut noise, &sol, &opts)
            .unwrap()
            .audit
            .unwrap();
        before.0 += a.lemma1_checked_before_kstar;
        before.1 += a.lemma1_violations_before_kstar;
        after.0 += a.lemma1_checked_after_kstar;
        after.1 += a.lemma1_violations_after_kstar;
        infinite += a.lemma1_infinite;
    }
    let elapsed = start.elapsed();
    report(
        3,
        "Lemma 1 pathwise dominance",
        before.1 + after.1 == 0 && infinite == 0,
        elapsed,
        &format!(
            "sigma = {:.6}, K* = 2; k < K*: {}/{} violations, k >= K*: {}/{} violations, {infinite} infinite bounds",
            w.sigma2(),
            before.1,
            before.0,
            after.1,
            after.0
        ),
    );
}

#[test]
fn ac4_rate_exponent() {
    let _g = serial();
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let sys = random_instance(4, 8, 0, 2.0).unwrap();
    let lambda = validate_assumptions(&sys).min_real_delta;
    let beta0 = 1.0 / (3.0 * lambda);
    let alpha0 = beta0.max(0.5);
    let cfg = json!({
        "system": {"kind": "random", "d": 4, "nodes": 8, "seed": 0, "delta_margin": 2.0},
        "topology": "ring",
        "alpha0": alpha0,
        "beta0": beta0,
        "iterations": 100_000,
        "replicas": 32,
        "seed": 0,
        "output": out.path(),
    });
    let loaded = config_from_value(cfg, None).unwrap();
    let summary = run_experiment(&loaded).unwrap().summary;
    let fit = summary.fits["mse_weighted"].expect("rate fit");
    let elapsed = start.elapsed();
    report(
        4,
        "rate exponent",
        (-0.83..=-0.53).contains(&fit.exponent) && elapsed < Duration::from_secs(300),
        elapsed,
        &format!(
            "slope {:.4} (R^2 {:.4}, {} points in [{}, {}]) with alpha0 = {alpha0:.4}, beta0 = {beta0:.4}, min Re eig(Delta) = {lambda:.4}; audit violations {}",
            fit.exponent,
            fit.r_squared,
            fit.samples,
            fit.window.0,
            fit.window.1,
            summary.audit.violations()
        ),
    );
}

#[test]
fn ac5_consensus_vs_topology() {
    let _g = serial();
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let base = json!({
        "system": {"kind": "random", "d": 2, "nodes": 4, "seed": 0},
        "topology": "ring",
        "iterations": 10_000,
        "record_every": 10,
        "replicas": 8,
        "output": out.path(),
    });
    let grid = SweepGrid {
        laziness: Some(vec![0.0, 0.3, 0.6, 0.85]),
        ..Default::default()
    };
    let rows = run_sweep(&base, None, &grid).unwrap().rows;
    let sigma: Vec<f64> = rows.iter().map(|r| r.sigma.unwrap()).collect();
    let avg: Vec<f64> = rows.iter().map(|r| r.consensus_avg.unwrap()).collect();
    let rho = spearman(&sigma, &avg);
    let elapsed = start.elapsed();
    let pairs: Vec<String> = sigma
        .iter()
        .zip(&avg)
        .map(|(s, a)| format!("{s:.3}->{a:.3e}"))
        .collect();
    report(
        5,
        "consensus vs topology",
        rows.len() >= 4 && rho >= 0.9,
        elapsed,
        &format!(
            "Spearman {rho:.3}; sigma->avg consensus {}",
            pairs.join(", ")
        ),
    );
}

#[test]
fn ac6_noise_model_exactness() {
    let _g = serial();
    let start = Instant::now();
    let d = 3;
    let l = DenseMatrix::from_fn(2 * d, 2 * d, |i, j| {
        if j <= i {
            0.3 + 0.1 * ((i * 7 + j * 3) % 5) as f64
        } else {
            0.0
        }
    });
    let gamma = l.matmul(&l.transpose()).unwrap();
    let model = make_noise_model(&gamma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples = sample_noise(&model, &mut rng, 100_000);
    let within = samples
        .iter()
        .filter(|(xi, psi)| (xi.norm_sq() + psi.norm_sq()).sqrt() <= model.bound())
        .count();
    let emp = empirical_covariance(&samples).unwrap();
    let rel = emp.sub(&gamma).unwrap().frobenius_norm() / gamma.frobenius_norm();
    let elapsed = start.elapsed();
    report(
        6,
        "noise model exactness",
        rel <= 0.05 && within == samples.len() && elapsed < Duration::from_secs(5),
        elapsed,
        &format!(
            "relative Frobenius error {rel:.4}; {within}/{} samples within C = {:.4}",
            samples.len(),
            model.bound()
        ),
    );
}

#[test]
fn ac7_spectral_oracle() {
    let _g = serial();
    let start = Instant::now();
    let kinds = [
        TopologyKind::Ring,
        TopologyKind::Path,
        TopologyKind::Star,
        TopologyKind::Complete,
        TopologyKind::ErdosRenyi,
    ];
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for kind in kinds {
        for n in 2..=8 {
            let topo = topology(kind, n);
            for w in [metropolis_weights(&topo), lazy_weights(&topo, 0.5).unwrap()] {
                let m = w.matrix();
                let mut sv: Vec<f64> = DMatrix::from_row_slice(n, n, m.as_slice())
                    .singular_values()
                    .iter()
                    .copied()
                    .collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                let ours = second_singular_value(m, 1e-14).unwrap();
                worst = worst.max((ours - sv[1]).abs());
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        7,
        "spectral oracle agreement",
        worst <= 1e-8,
        elapsed,
        &format!("max |sigma2 - SVD| = {worst:.3e} over {cases} matrices"),
    );
}

#[test]
fn ac8_gtd_end_to_end() {
    let _g = serial();
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "gtd_random", "states": 5, "d": 2, "agents": 4, "gamma": 0.9, "seed": 0},
        "topology": "ring",
        "alpha0": 1.5,
        "beta0": 1.5,
        "noise": "sampled",
        "iterations": 100_000,
        "record_every": 100,
        "replicas": 32,
        "output": out.path(),
    });
    let loaded = config_from_value(cfg, None).unwrap();
    let dir = run_experiment(&loaded).unwrap().dir;
    let mut at = BTreeMap::new();
    let mut reader = csv::Reader::from_path(dir.join("mean.csv")).unwrap();
    for row in reader.deserialize::<BTreeMap<String, f64>>() {
        let row = row.unwrap();
        at.insert(row["k"] as u64, row["ybar_err"]);
    }
    let (early, late) = (at[&100], at[&100_000]);
    let ratio = early / late;
    let elapsed = start.elapsed();
    report(
        8,
        "GTD end-to-end",
        ratio >= 100.0 && elapsed < Duration::from_secs(120),
        elapsed,
        &format!("mean |ybar - y*|^2: {early:.4e} at k=1e2, {late:.4e} at k=1e5, ratio {ratio:.1}"),
    );
}

#[test]
fn ac9_formula_evaluations() {
    let _g = serial();
    let start = Instant::now();
    let k = kstar(0.5, 2.0 / 3.0, 1.0 / 3.0).unwrap();
    let hand_k = (0.5_f64 / (2.0 / 3.0 - 1.0 / 3.0)).powf(1.5).ceil() as u64;
    let d = constant_d(4, 1.0, 1.0, 0.5, 2.0 / 3.0, 2).unwrap();
    let hand_d = 96.0 * 2f64.cbrt();
    let rel = (d - hand_d).abs() / hand_d;
    let elapsed = start.elapsed();
    report(
        9,
        "formula evaluations",
        k == 2 && hand_k == 2 && rel <= 1e-9 && (d - 120.95).abs() < 0.01,
        elapsed,
        &format!("K* = {k} (hand {hand_k}); D = {d:.6} vs 96*2^(1/3) = {hand_d:.6}, relative error {rel:.2e}"),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    files
}

#[test]
fn ac10_determinism() {
    let _g = serial();
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "random", "d": 2, "nodes": 4, "seed": 3},
        "topology": "ring",
        "iterations": 2000,
        "replicas": 4,
        "seed": 11,
        "output": out.path(),
    });
    let loaded = config_from_value(cfg, None).unwrap();
    let first_dir = run_experiment(&loaded).unwrap().dir;
    let first = snapshot(&first_dir);
    std::fs::remove_dir_all(&first_dir).unwrap();
    let second_dir = run_experiment(&loaded).unwrap().dir;
    let second = snapshot(&second_dir);
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let elapsed = start.elapsed();
    report(
        10,
        "determinism",
        first_dir == second_dir && first.len() == second.len() && differing.is_empty(),
        elapsed,
        &format!("{} files compared, {} differ", first.len(), differing.len()),
    );
}
