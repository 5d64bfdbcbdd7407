//! Replication study: repeated simulation and estimation under correctly
//! and incorrectly specified nuisance models, with summary metrics.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate, align, EstimatorSettings, Method};
use crate::exec::{derive_seed, Execution};
use crate::learners::{FeatureMap, LearnerKind, LearnerSpec, Transform};
use crate::nuisance::{NuisanceLearners, PropensityOptions, DEFAULT_EPSILON};
use crate::panel::{AdjustmentSchedule, Regime};
use crate::simulate::{generate_panel, DGPConfig, TruthTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigLabel {
    True,
    Gfal,
    Qfal,
    Bfal,
    Super,
}

impl ConfigLabel {
    pub const ALL: [ConfigLabel; 5] = [ConfigLabel::Bfal, ConfigLabel::Gfal, ConfigLabel::Qfal, ConfigLabel::Super, ConfigLabel::True];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigLabel::True => "true",
            ConfigLabel::Gfal => "gfal",
            ConfigLabel::Qfal => "qfal",
            ConfigLabel::Bfal => "bfal",
            ConfigLabel::Super => "super",
        }
    }
}

impl fmt::Display for ConfigLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown configuration `{s}` (expected true, gfal, qfal, bfal or super)")))
    }
}

fn t(column: &str) -> String {
    column.to_string()
}

/// Outcome regression terms of the simulation model: every raw column plus
/// `sin w1` and `w2 * w3` at each time, and their companions `cos w1`,
/// squares and the remaining products, which absorb the curvature that
/// iterated conditional expectations introduce.
pub fn outcome_feature_map() -> FeatureMap {
    FeatureMap::Custom {
        transforms: vec![
            Transform::Raw,
            Transform::Sin { column: t("w1") },
            Transform::Cos { column: t("w1") },
            Transform::Product { left: t("w2"), right: t("w3") },
            Transform::Product { left: t("w1"), right: t("w2") },
            Transform::Product { left: t("w1"), right: t("w3") },
            Transform::Square { column: t("w1") },
            Transform::Square { column: t("w2") },
            Transform::Square { column: t("w3") },
        ],
    }
}

/// Treatment model terms: raw columns plus `cos w2` and `w3^2` at each time,
/// with the remaining squares and products.
pub fn propensity_feature_map() -> FeatureMap {
    FeatureMap::Custom {
        transforms: vec![
            Transform::Raw,
            Transform::Cos { column: t("w2") },
            Transform::Sin { column: t("w2") },
            Transform::Square { column: t("w1") },
            Transform::Square { column: t("w2") },
            Transform::Square { column: t("w3") },
            Transform::Product { left: t("w1"), right: t("w2") },
            Transform::Product { left: t("w1"), right: t("w3") },
            Transform::Product { left: t("w2"), right: t("w3") },
        ],
    }
}

/// Raw linear terms only.
pub fn misspecify(map: &FeatureMap) -> FeatureMap {
    map.misspecified()
}

/// Stacking library for the `super` configuration.
pub fn super_learners(stack_folds: usize) -> NuisanceLearners {
    let poly = FeatureMap::Polynomial { degree: 2 };
    let outcome = LearnerSpec::stack(
        vec![
            LearnerSpec::mean(),
            LearnerSpec::linear(),
            LearnerSpec::new(LearnerKind::ElasticNet).with_feature_map(poly.clone()).with_alpha(0.5).with_folds(3),
            LearnerSpec::new(LearnerKind::BaggedTrees).with_trees(4, 20, 10),
        ],
        stack_folds,
    );
    let propensity = LearnerSpec::stack(
        vec![
            LearnerSpec::mean(),
            LearnerSpec::logistic(),
            LearnerSpec::new(LearnerKind::LogisticElasticNet).with_feature_map(poly).with_alpha(0.5).with_folds(3),
            LearnerSpec::new(LearnerKind::BaggedTrees).with_trees(4, 20, 10),
        ],
        stack_folds,
    );
    NuisanceLearners { outcome, propensity }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub label: ConfigLabel,
    pub learners: NuisanceLearners,
    pub method: Method,
}

impl EstimatorConfig {
    /// The configuration named `label`. `super` is cross-fitted with
    /// `folds x repetitions`; the others use the full sample.
    pub fn standard(label: ConfigLabel, folds: usize, repetitions: usize) -> Self {
        let q = outcome_feature_map();
        let g = propensity_feature_map();
        let lin = |map: FeatureMap| LearnerSpec::linear().with_feature_map(map);
        let logit = |map: FeatureMap| LearnerSpec::logistic().with_feature_map(map);
        let (learners, method) = match label {
            ConfigLabel::True => (NuisanceLearners { outcome: lin(q), propensity: logit(g) }, Method::FullSample),
            ConfigLabel::Gfal => (NuisanceLearners { outcome: lin(q), propensity: logit(misspecify(&g)) }, Method::FullSample),
            ConfigLabel::Qfal => (NuisanceLearners { outcome: lin(misspecify(&q)), propensity: logit(g) }, Method::FullSample),
            ConfigLabel::Bfal => {
                (NuisanceLearners { outcome: lin(misspecify(&q)), propensity: logit(misspecify(&g)) }, Method::FullSample)
            }
            ConfigLabel::Super => (super_learners(5), Method::CrossFit { folds, repetitions }),
        };
        Self { label, learners, method }
    }
}

/// One estimation run on one simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub n: usize,
    pub label: ConfigLabel,
    pub replicate: usize,
    /// Per horizon `t = 0..=2`; empty when the run failed.
    pub estimates: Vec<f64>,
    /// Estimated variance of the estimate (`V / n`).
    pub variances: Vec<f64>,
    pub covered: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Aggregate over replicates for one `(n, configuration, horizon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub n: usize,
    pub label: ConfigLabel,
    pub t: usize,
    pub replicates: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub bias_sq: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    /// Empirical variance of the estimates; needs at least two replicates.
    pub v_sim: Option<f64>,
    /// Mean estimated variance of the estimate.
    pub v_eif: f64,
    pub coverage: f64,
}

impl Metric {
    /// `|bias|` in Monte Carlo standard errors.
    pub fn bias_z(&self) -> Option<f64> {
        (self.mc_se > 0.0).then(|| self.bias.abs() / self.mc_se)
    }

    pub fn variance_ratio(&self) -> Option<f64> {
        self.v_sim.filter(|v| *v > 0.0).map(|v| self.v_eif / v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub truth: TruthTable,
    pub horizon: usize,
    pub metrics: Vec<Metric>,
    pub replicates: Vec<Replicate>,
    /// Total wall-clock time. Kept out of serialized artifacts so reruns are identical.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl PartialEq for BenchResult {
    fn eq(&self, other: &Self) -> bool {
        self.truth == other.truth && self.horizon == other.horizon && self.metrics == other.metrics && self.replicates == other.replicates
    }
}

impl BenchResult {
    pub fn metric(&self, n: usize, label: ConfigLabel, t: usize) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.n == n && m.label == label && m.t == t)
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.failure.is_some()).count()
    }
}

/// Settings shared by every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub epsilon: f64,
    pub propensity: PropensityOptions,
    /// Adjustment uses covariates only (no outcome history).
    pub horizon: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, propensity: PropensityOptions::default(), horizon: 2 }
    }
}

fn run_one(dgp: &DGPConfig, configs: &[EstimatorConfig], n: usize, r: usize, truth: &TruthTable, settings: &BenchSettings, seed: u64) -> Vec<Replicate> {
    let cfg = dgp.clone().with_units(n);
    let data = generate_panel(&cfg, derive_seed(seed, &[n as u64, r as u64]));
    let regime = Regime::constant(0, &data).expect("binary panel");
    let schedule = AdjustmentSchedule::covariates_only(&data);
    configs
        .iter()
        .enumerate()
        .map(|(c, config)| {
            let est = EstimatorSettings {
                learners: config.learners.clone(),
                epsilon: settings.epsilon,
                propensity: settings.propensity.clone(),
                method: config.method,
                seed: derive_seed(seed, &[n as u64, r as u64, 1 + c as u64]),
                small_stratum: 0,
            };
            match estimate(&data, &regime, &schedule, &est, settings.horizon, Execution::Sequential) {
                Ok(report) => Replicate {
                    n,
                    label: config.label,
                    replicate: r,
                    estimates: report.horizons.iter().map(|h| h.estimate).collect(),
                    variances: report.horizons.iter().map(|h| h.std_error * h.std_error).collect(),
                    covered: report.horizons.iter().map(|h| h.covers(truth.mu[h.t])).collect(),
                    failure: None,
                },
                Err(e) => Replicate {
                    n,
                    label: config.label,
                    replicate: r,
                    estimates: Vec::new(),
                    variances: Vec::new(),
                    covered: Vec::new(),
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Summaries of stored replicates, in `(n, label, t)` order.
pub fn aggregate(replicates: &[Replicate], truth: &TruthTable, horizon: usize) -> Vec<Metric> {
    let mut keys: Vec<(usize, ConfigLabel)> = replicates.iter().map(|r| (r.n, r.label)).collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (n, label) in keys {
        let group: Vec<&Replicate> = replicates.iter().filter(|r| r.n == n && r.label == label).collect();
        let ok: Vec<&&Replicate> = group.iter().filter(|r| r.failure.is_none()).collect();
        let failures = group.len() - ok.len();
        for t in 0..=horizon {
            let k = ok.len();
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[t]).collect();
            let mean = if k > 0 { est.iter().sum::<f64>() / k as f64 } else { f64::NAN };
            let v_sim = (k >= 2).then(|| est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1) as f64);
            let mc_se = v_sim.map_or(f64::NAN, |v| (v / k as f64).sqrt());
            let bias = mean - truth.mu[t];
            let v_eif = if k > 0 { ok.iter().map(|r| r.variances[t]).sum::<f64>() / k as f64 } else { f64::NAN };
            let coverage = if k > 0 { ok.iter().filter(|r| r.covered[t]).count() as f64 / k as f64 } else { f64::NAN };
            out.push(Metric {
                n,
                label,
                t,
                replicates: k,
                failures,
                mean_estimate: mean,
                bias,
                bias_sq: bias * bias,
                mc_se,
                v_sim,
                v_eif,
                coverage,
            });
        }
    }
    out
}

/// Simulates `reps` panels for each `n` and estimates every configuration
/// on each. Replicate `r` at size `n` depends only on `(seed, n, r)`, so a
/// shorter run is a prefix of a longer one.
#[allow(clippy::too_many_arguments)]
pub fn run_replications(
    dgp: &DGPConfig,
    configs: &[EstimatorConfig],
    n_list: &[usize],
    reps: usize,
    truth: &TruthTable,
    settings: &BenchSettings,
    seed: u64,
    exec: Execution,
) -> Result<BenchResult> {
    if truth.coefficient_seed != dgp.coefficient_seed {
        return Err(Error::Invariant(format!(
            "truth table was computed for coefficient seed {}, model uses {}",
            truth.coefficient_seed, dgp.coefficient_seed
        )));
    }
    if settings.horizon >= truth.mu.len() {
        return Err(Error::Invariant(format!("truth table covers horizons up to {}", truth.mu.len() - 1)));
    }
    dgp.validate()?;
    let start = Instant::now();
    let tasks: Vec<(usize, usize)> = n_list.iter().flat_map(|&n| (0..reps).map(move |r| (n, r))).collect();
    let replicates: Vec<Replicate> = exec
        .map(tasks.len(), |i| {
            let (n, r) = tasks[i];
            run_one(dgp, configs, n, r, truth, settings, seed)
        })
        .into_iter()
        .flatten()
        .collect();
    for r in replicates.iter().filter(|r| r.failure.is_some()) {
        log::warn!("replicate {} (n={}, {}) failed: {}", r.replicate, r.n, r.label, r.failure.as_deref().unwrap_or(""));
    }
    let metrics = aggregate(&replicates, truth, settings.horizon);
    Ok(BenchResult { truth: truth.clone(), horizon: settings.horizon, metrics, replicates, elapsed: start.elapsed() })
}

/// Presentation format: values scaled by 100, four decimals, and
/// `<0.0001` for anything smaller.
pub fn format_scaled(value: Option<f64>) -> String {
    match value {
        None => "NA".into(),
        Some(v) if !v.is_finite() => "NA".into(),
        Some(v) => {
            let scaled = v * 100.0;
            if scaled.abs() < 1e-4 {
                "<0.0001".into()
            } else {
                format!("{scaled:.4}")
            }
        }
    }
}

fn table_rows(result: &BenchResult) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["n".to_string(), "method".to_string()];
    for t in 1..=result.horizon {
        header.push(format!("bias2_psi{t}"));
        header.push(format!("vsim_psi{t}"));
        header.push(format!("veif_psi{t}"));
    }
    let mut keys: Vec<(usize, ConfigLabel)> = result.metrics.iter().map(|m| (m.n, m.label)).collect();
    keys.sort();
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|(n, label)| {
            let mut row = vec![n.to_string(), label.to_string()];
            for t in 1..=result.horizon {
                let m = result.metric(n, label, t);
                row.push(format_scaled(m.map(|m| m.bias_sq)));
                row.push(format_scaled(m.and_then(|m| m.v_sim)));
                row.push(format_scaled(m.map(|m| m.v_eif)));
            }
            row
        })
        .collect();
    (header, rows)
}

/// The summary table as aligned text and as CSV.
pub fn render_table(result: &BenchResult) -> (String, String) {
    let (header, rows) = table_rows(result);
    let text = align(&header, &rows);
    let mut csv = header.join(",") + "\n";
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    (text, csv)
}

/// Replicate-level CSV: one row per replicate, configuration and horizon.
pub fn replicates_csv(result: &BenchResult) -> String {
    let mut out = String::from("n,method,replicate,t,estimate,variance,covered,scaled_error,failure\n");
    for r in &result.replicates {
        if let Some(f) = &r.failure {
            out.push_str(&format!("{},{},{},,,,,,\"{}\"\n", r.n, r.label, r.replicate, f.replace('"', "'")));
            continue;
        }
        for t in 0..r.estimates.len() {
            let scaled = (r.n as f64).sqrt() * (r.estimates[t] - result.truth.mu[t]);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},\n",
                r.n, r.label, r.replicate, t, r.estimates[t], r.variances[t], r.covered[t], scaled
            ));
        }
    }
    out
}
