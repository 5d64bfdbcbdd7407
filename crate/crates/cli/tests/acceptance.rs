//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. `ACCEPTANCE_ONLY=2,7` restricts the run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use didmean::bench::{run_replications, BenchResult, BenchSettings, ConfigLabel, EstimatorConfig};
use didmean::design::DesignMatrix;
use didmean::estimator::{correction_term, estimate, one_step, plug_in_psi, EstimateReport, EstimatorSettings, Method};
use didmean::exec::rng_from;
use didmean::learners::linear::{least_squares, penalized};
use didmean::learners::logistic::{expit, logistic};
use didmean::learners::{cv_stack_weights, FeatureMap, LearnerKind, LearnerSpec, PredictionMode};
use didmean::nuisance::{fit_nuisance_set, required_chains, FitScope, NuisanceLearners, PropensityOptions, DEFAULT_EPSILON};
use didmean::panel::{compliance, AdjustmentSchedule, PanelDataset, Regime};
use didmean::simulate::{
    check_parallel_trends, default_truth, draw_coefficients, generate_counterfactual_panel, generate_panel, state_panel,
    DEFAULT_COEFFICIENT_SEED,
};
use didmean::Execution;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Master seed for every Monte Carlo criterion.
const SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "telescoping identity", telescoping),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "estimate is the mean of contributions", eif_structure),
        (4, "double robustness pattern", double_robustness),
        (5, "variance calibration", variance_calibration),
        (6, "root-n scaling", root_n_scaling),
        (7, "cross-fit stacking", cross_fit_stacking),
        (8, "parallel-trends construction", parallel_trends),
        (9, "learner unit suite", learner_suite),
        (10, "determinism", determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn learners(label: ConfigLabel) -> NuisanceLearners {
    EstimatorConfig::standard(label, 2, 1).learners
}

fn run(data: &PanelDataset, regime: &Regime, schedule: &AdjustmentSchedule, learners: NuisanceLearners, method: Method) -> EstimateReport {
    let settings = EstimatorSettings::new(learners).with_method(method);
    estimate(data, regime, schedule, &settings, data.horizon(), Execution::Parallel).unwrap()
}

fn with_treatment(data: &PanelDataset, trajectory: &[i64]) -> PanelDataset {
    let n = data.n_units();
    PanelDataset::new(
        data.unit_labels().to_vec(),
        data.time_labels().to_vec(),
        data.covariate_names().to_vec(),
        trajectory.iter().map(|&a| vec![a; n]).collect(),
        (0..data.n_times()).map(|t| data.outcome(t).to_vec()).collect(),
        (0..data.n_times()).map(|t| data.covariates(t).clone()).collect(),
    )
    .unwrap()
    .with_alphabet(&[0, 1])
}

fn telescoping() -> Verdict {
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED).with_units(1000);
    let never = generate_counterfactual_panel(&dgp, 11);
    let switched = with_treatment(&never, &[0, 1, 1]);
    let cases = [(&never, vec![0, 0, 0]), (&switched, vec![0, 1, 1])];
    let methods = [Method::FullSample, Method::CrossFit { folds: 2, repetitions: 3 }];
    let mut worst = 0.0_f64;
    let mut runs = 0;
    for (data, traj) in &cases {
        let regime = Regime::new(traj.clone(), data).unwrap();
        for schedule in [AdjustmentSchedule::full(data), AdjustmentSchedule::covariates_only(data)] {
            for label in [ConfigLabel::True, ConfigLabel::Bfal, ConfigLabel::Super] {
                for method in methods {
                    if label == ConfigLabel::Super && method == Method::FullSample {
                        continue;
                    }
                    let report = run(data, &regime, &schedule, learners(label), method);
                    for h in &report.horizons {
                        worst = worst.max((h.estimate - data.outcome_mean(h.t)).abs());
                    }
                    runs += 1;
                }
            }
        }
    }
    Verdict::new(worst <= 1e-10, format!("max |psi_t - mean Y_t| = {worst:.2e} over {runs} runs (tol 1e-10)"))
}

/// Two binary covariates (one redrawn each time, one a fixed trait),
/// outcomes on a small integer grid and an absorbing treatment with
/// moderate uptake, so every stratum keeps compliant units.
fn discrete_panel(n: usize, times: usize, seed: u64) -> PanelDataset {
    let mut rng = rng_from(seed, &[]);
    let trait_: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let mut w = Vec::with_capacity(times);
    let mut a: Vec<Vec<i64>> = Vec::with_capacity(times);
    let mut y = Vec::with_capacity(times);
    for t in 0..times {
        let wt = DMatrix::from_fn(n, 2, |i, j| if j == 0 { f64::from(rng.gen_range(0..2u8)) } else { trait_[i] });
        let at: Vec<i64> = (0..n)
            .map(|i| {
                if t == 0 {
                    0
                } else {
                    i64::from(a[t - 1][i] == 1 || rng.gen_bool(0.1 + 0.15 * wt[(i, 0)] + 0.1 * wt[(i, 1)]))
                }
            })
            .collect();
        let yt: Vec<f64> = (0..n).map(|i| wt[(i, 0)] + 2.0 * wt[(i, 1)] * (1 - at[i]) as f64 + f64::from(rng.gen_range(0..2u8))).collect();
        w.push(wt);
        a.push(at);
        y.push(yt);
    }
    PanelDataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        (0..times).map(|t| t.to_string()).collect(),
        vec!["w1".into(), "w2".into()],
        a,
        y,
        w,
    )
    .unwrap()
}

fn oracle_equivalence() -> Verdict {
    let mut worst_psi = 0.0_f64;
    let mut worst_corr = 0.0_f64;
    for seed in 0..5 {
        let data = discrete_panel(500, 3, seed);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::covariates_only(&data);
        let saturated = NuisanceLearners { outcome: LearnerSpec::stratified_mean(), propensity: LearnerSpec::stratified_mean() };
        let units: Vec<usize> = (0..500).collect();
        let nuis = fit_nuisance_set(&data, &regime, &schedule, 2, &saturated, &units, DEFAULT_EPSILON, &PropensityOptions::default(), seed, FitScope::FullSample)
            .unwrap();
        let comp = compliance(&data, &regime);
        for t in 0..=2 {
            let (psi, _) = one_step(&data, &regime, &nuis, t).unwrap();
            worst_psi = worst_psi.max((psi - plug_in_psi(&data, &regime, &schedule, t).unwrap()).abs());
        }
        for (j, k) in required_chains(2) {
            for m in 1..=k {
                worst_corr = worst_corr.max(correction_term(&nuis, &comp, j, k, m).unwrap().abs());
            }
        }
    }
    Verdict::new(
        worst_psi <= 1e-10 && worst_corr <= 1e-10,
        format!("max |one_step - plug_in| = {worst_psi:.2e}, max |mean correction| = {worst_corr:.2e} over 5 panels (tol 1e-10)"),
    )
}

fn eif_structure() -> Verdict {
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED).with_units(1000);
    let data = generate_panel(&dgp, 21);
    let regime = Regime::constant(0, &data).unwrap();
    let states = state_panel(3);
    let state_regime = Regime::constant(1, &states).unwrap();
    let mut worst = 0.0_f64;
    let mut runs = 0;
    let mut check = |report: &EstimateReport| {
        for (h, c) in report.horizons.iter().zip(&report.contributions) {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c.len() as f64;
            // cross-fitting reports a combined variance; compare with the repetition whose estimate was reported
            let own = h.repetitions.iter().find(|r| r.0 == h.estimate).map_or(h.variance, |r| r.1);
            worst = worst.max((h.estimate - m).abs() / (1.0 + m.abs())).max((own - v).abs() / (1.0 + v));
        }
        runs += 1;
    };
    for schedule in [AdjustmentSchedule::full(&data), AdjustmentSchedule::covariates_only(&data)] {
        for label in ConfigLabel::ALL {
            let method = if label == ConfigLabel::Super { Method::CrossFit { folds: 2, repetitions: 2 } } else { Method::FullSample };
            check(&run(&data, &regime, &schedule, learners(label), method));
        }
        check(&run(&data, &regime, &schedule, learners(ConfigLabel::True), Method::CrossFit { folds: 3, repetitions: 4 }));
    }
    let linear = NuisanceLearners { outcome: LearnerSpec::linear(), propensity: LearnerSpec::logistic() };
    let schedule = AdjustmentSchedule::covariates_only(&states);
    check(&run(&states, &state_regime, &schedule, linear, Method::FullSample));
    Verdict::new(worst <= 1e-14, format!("max relative gap to contribution mean/variance = {worst:.2e} over {runs} runs (tol 1e-14)"))
}

fn bench(labels: &[ConfigLabel], n: &[usize], reps: usize, folds: usize, repetitions: usize) -> BenchResult {
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED);
    let configs: Vec<EstimatorConfig> = labels.iter().map(|&l| EstimatorConfig::standard(l, folds, repetitions)).collect();
    run_replications(&dgp, &configs, n, reps, &default_truth(), &BenchSettings::default(), SEED, Execution::Parallel).unwrap()
}

fn double_robustness() -> Verdict {
    let result = bench(&[ConfigLabel::True, ConfigLabel::Gfal, ConfigLabel::Qfal, ConfigLabel::Bfal], &[1000], 300, 2, 1);
    let mut pass = result.failures() == 0;
    let mut parts = Vec::new();
    for label in [ConfigLabel::True, ConfigLabel::Gfal, ConfigLabel::Qfal, ConfigLabel::Bfal] {
        for t in 1..=2 {
            let z = result.metric(1000, label, t).unwrap().bias_z().unwrap();
            pass &= if label == ConfigLabel::Bfal { z.abs() >= 5.0 } else { z.abs() <= 2.0 };
            parts.push(format!("{label} t{t} {z:+.2}"));
        }
    }
    Verdict::new(pass, format!("bias/MC-SE: {} (need |z| <= 2, bfal >= 5; {} failed fits)", parts.join(", "), result.failures()))
}

fn variance_calibration() -> Verdict {
    let result = bench(&[ConfigLabel::True], &[1000], 500, 2, 1);
    let mut pass = result.failures() == 0;
    let mut parts = Vec::new();
    for t in 1..=2 {
        let m = result.metric(1000, ConfigLabel::True, t).unwrap();
        let ratio = m.variance_ratio().unwrap();
        pass &= (0.75..=1.25).contains(&ratio) && (0.92..=0.98).contains(&m.coverage);
        parts.push(format!("t{t} ratio {ratio:.3} coverage {:.3}", m.coverage));
    }
    Verdict::new(pass, format!("{} (need ratio in [0.75, 1.25], coverage in [0.92, 0.98])", parts.join(", ")))
}

fn root_n_scaling() -> Verdict {
    let result = bench(&[ConfigLabel::True], &[1000, 4000], 300, 2, 1);
    let mut pass = result.failures() == 0;
    let mut parts = Vec::new();
    for t in 1..=2 {
        let small = result.metric(1000, ConfigLabel::True, t).unwrap().v_sim.unwrap();
        let large = result.metric(4000, ConfigLabel::True, t).unwrap().v_sim.unwrap();
        let r = large / small;
        pass &= (0.19..=0.31).contains(&r);
        parts.push(format!("t{t} {r:.3}"));
    }
    Verdict::new(pass, format!("V_sim(4000)/V_sim(1000): {} (need [0.19, 0.31])", parts.join(", ")))
}

fn cross_fit_stacking() -> Verdict {
    let start = Instant::now();
    let result = bench(&[ConfigLabel::Super], &[5000], 100, 2, 10);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let mut pass = result.failures() == 0;
    let mut parts = Vec::new();
    for t in 1..=2 {
        let m = result.metric(5000, ConfigLabel::Super, t).unwrap();
        let z = m.bias_z().unwrap();
        let ratio = m.variance_ratio().unwrap();
        pass &= z.abs() <= 2.0 && (0.7..=1.3).contains(&ratio);
        parts.push(format!("t{t} bias/MC-SE {z:+.2} ratio {ratio:.3}"));
    }
    Verdict::new(
        pass,
        format!("{} (need |z| <= 2, ratio in [0.7, 1.3]; {} failed fits; {minutes:.1} min)", parts.join(", "), result.failures()),
    )
}

fn parallel_trends() -> Verdict {
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED);
    let default = check_parallel_trends(&dgp, 1_000_000, SEED, Execution::Parallel).unwrap();
    let mut broken = dgp.clone();
    broken.u_in_w1 = 1.0;
    let perturbed = check_parallel_trends(&broken, 1_000_000, SEED, Execution::Parallel).unwrap();
    let pass = default.iter().all(|c| c.z().abs() < 4.0) && perturbed.iter().all(|c| c.z().abs() > 10.0);
    let fmt = |cs: &[didmean::simulate::TrendCheck]| cs.iter().map(|c| format!("t{} {:+.2}", c.t, c.z())).collect::<Vec<_>>().join(", ");
    Verdict::new(pass, format!("corr/MC-SE default: {} (need < 4); U in W1: {} (need > 10)", fmt(&default), fmt(&perturbed)))
}

fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let d = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let a = d.transpose() * &d;
    let b = d.transpose() * DVector::from_column_slice(y);
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

fn log_likelihood(x: &DMatrix<f64>, y: &[f64], b0: f64, b1: f64) -> f64 {
    (0..y.len())
        .map(|i| {
            let p = expit(b0 + b1 * x[(i, 0)]);
            y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln()
        })
        .sum()
}

fn grid_search(x: &DMatrix<f64>, y: &[f64]) -> (f64, f64) {
    let (mut c0, mut c1, mut half) = (0.0, 0.0, 4.0);
    for _ in 0..30 {
        let mut best = (f64::NEG_INFINITY, c0, c1);
        for a in 0..=40 {
            for b in 0..=40 {
                let b0 = c0 - half + 2.0 * half * f64::from(a) / 40.0;
                let b1 = c1 - half + 2.0 * half * f64::from(b) / 40.0;
                let ll = log_likelihood(x, y, b0, b1);
                if ll > best.0 {
                    best = (ll, b0, b1);
                }
            }
        }
        (c0, c1) = (best.1, best.2);
        half *= 0.5;
    }
    (c0, c1)
}

fn learner_suite() -> Verdict {
    let mut rng = rng_from(SEED, &[9]);
    // elastic net at zero penalty against the normal equations
    let mut en_gap = 0.0_f64;
    for _ in 0..5 {
        let x = DMatrix::from_fn(50, 4, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..50).map(|i| 1.0 + x[(i, 0)] - 2.0 * x[(i, 2)] + 0.3 * rng.gen::<f64>()).collect();
        let w = vec![1.0 / 50.0; 50];
        let oracle = normal_equations(&x, &y);
        for alpha in [1.0, 0.5] {
            let fit = penalized(&x, &y, &w, 0.0, alpha);
            en_gap = en_gap.max((fit.intercept - oracle[0]).abs());
            for j in 0..4 {
                en_gap = en_gap.max((fit.coef[j] - oracle[j + 1]).abs());
            }
        }
        let ols = least_squares(&x, &y, &w);
        en_gap = en_gap.max((ols.intercept - oracle[0]).abs());
    }
    // logistic IRLS against a refined grid search
    let mut irls_gap = 0.0_f64;
    for _ in 0..3 {
        let x = DMatrix::from_fn(40, 1, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
        let y: Vec<f64> = (0..40).map(|i| f64::from(u8::from(rng.gen::<f64>() < expit(0.3 + 0.8 * x[(i, 0)])))).collect();
        let fit = logistic(&x, &y, &[1.0 / 40.0; 40]);
        let (b0, b1) = grid_search(&x, &y);
        irls_gap = irls_gap.max((fit.intercept - b0).abs()).max((fit.coef[0] - b1).abs());
    }
    // stacking: simplex weights and CV risk against the members'
    let mut simplex_gap = 0.0_f64;
    let mut risk_excess = f64::NEG_INFINITY;
    for seed in 0..5 {
        let x = DMatrix::from_fn(120, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..120).map(|i| (2.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)] + 0.2 * rng.gen::<f64>()).collect();
        let members = vec![
            LearnerSpec::mean(),
            LearnerSpec::linear(),
            LearnerSpec::new(LearnerKind::ElasticNet).with_feature_map(FeatureMap::Polynomial { degree: 2 }).with_folds(3),
            LearnerSpec::new(LearnerKind::BaggedTrees).with_trees(3, 5, 10),
        ];
        let sw = cv_stack_weights(&members, &DesignMatrix::from_matrix(x), &y, None, 5, seed, PredictionMode::Real).unwrap();
        simplex_gap = simplex_gap.max((sw.weights.iter().sum::<f64>() - 1.0).abs());
        if sw.weights.iter().any(|&v| v < 0.0) {
            simplex_gap = f64::INFINITY;
        }
        let best = sw.member_risk.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        risk_excess = risk_excess.max(sw.stack_risk - best);
    }
    let pass = en_gap <= 1e-6 && irls_gap <= 1e-3 && simplex_gap <= 1e-12 && risk_excess <= 0.0;
    Verdict::new(
        pass,
        format!(
            "EN vs OLS {en_gap:.1e} (tol 1e-6), IRLS vs grid {irls_gap:.1e} (tol 1e-3), |sum w - 1| {simplex_gap:.1e} (tol 1e-12), stack risk - best member {risk_excess:.1e} (need <= 0)"
        ),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_didmean")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| {
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut mismatched = Vec::new();
    let pipeline = |run: usize| -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = root.path().join(format!("run{run}"));
        let sim = dir.join("sim");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        cli(&["simulate", "--seed", "7", "--n", "600", "--truth-draws", "200000", "--out", &s(&sim)])?;
        let panel = s(&sim.join("panel.csv"));
        let cfg = s(&sim.join("cfg.json"));
        cli(&["estimate", "--config", &cfg, "--format", "json", "--output", &s(&dir.join("full.json")), "--dump-if", &s(&dir.join("full_if.csv"))])?;
        cli(&["estimate", "--config", &cfg, "--folds", "2", "--repetitions", "3", "--seed", "7", "--output", &s(&dir.join("cf.txt"))])?;
        cli(&[
            "estimate",
            "--input",
            &panel,
            "--outcome-col",
            "y",
            "--outcome-learner",
            "bagged_trees",
            "--propensity-learner",
            "bagged_trees",
            "--folds",
            "2",
            "--repetitions",
            "2",
            "--seed",
            "7",
            "--format",
            "json",
            "--output",
            &s(&dir.join("trees.json")),
        ])?;
        cli(&["diagnose", "--config", &cfg, "--format", "json", "--output", &s(&dir.join("diag.json"))])?;
        let bench = dir.join("bench");
        cli(&["bench", "--reps", "300", "--n", "1000", "--seed", "7", "--out-dir", &s(&bench)])?;
        let mut files = read_all(&sim);
        files.extend(read_all(&dir));
        files.extend(read_all(&bench).into_iter().map(|(n, b)| (format!("bench/{n}"), b)));
        Ok(files)
    };
    let (a, b) = match (pipeline(0), pipeline(1)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, format!("CLI run failed: {e}")),
    };
    if a.len() != b.len() {
        return Verdict::new(false, format!("runs wrote {} and {} files", a.len(), b.len()));
    }
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        compared += 1;
        if x != y {
            mismatched.push(name.clone());
        }
    }
    Verdict::new(mismatched.is_empty(), format!("{compared} artifacts compared across two runs; differing: {mismatched:?}"))
}
