//! One-step estimation of intervention-specific means, the influence-function
//! variance, cross-fitting with repeated partitions, a brute-force plug-in
//! oracle, and positivity diagnostics.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::folds::FoldPlan;
use crate::nuisance::{
    fit_nuisance_set, FitScope, NuisanceLearners, NuisanceSet, NuisanceSummary, PropensityOptions, DEFAULT_EPSILON,
};
use crate::panel::{compliance, design_matrix, AdjustmentSchedule, ComplianceProfile, PanelDataset, Regime};

pub const Z_95: f64 = 1.959_963_984_540_054;
pub const DEFAULT_SMALL_STRATUM: usize = 25;

/// Per-unit `phi~_{j,k,i} = sum_m I_m / g_m (Q^{m+1} - Q^m) + Q^1` for every unit.
pub fn phi_tilde(nuisances: &NuisanceSet, comp: &ComplianceProfile, j: usize, k: usize) -> Result<Vec<f64>> {
    let q1 = nuisances.q_values(j, k, 1)?;
    let mut out = q1.to_vec();
    let g = &nuisances.cumulative().g;
    for m in 1..=k {
        let upper = nuisances.q_values(j, k, m + 1)?;
        let lower = nuisances.q_values(j, k, m)?;
        let follows = comp.at(m);
        for i in 0..out.len() {
            if follows[i] {
                out[i] += (upper[i] - lower[i]) / g[m][i];
            }
        }
    }
    Ok(out)
}

/// Mean over units of `I_m / g_m (Q^{m+1} - Q^m)`: the stage-`m` correction of `phi~_{j,k}`.
pub fn correction_term(nuisances: &NuisanceSet, comp: &ComplianceProfile, j: usize, k: usize, m: usize) -> Result<f64> {
    let upper = nuisances.q_values(j, k, m + 1)?;
    let lower = nuisances.q_values(j, k, m)?;
    let g = &nuisances.cumulative().g[m];
    let n = upper.len();
    Ok((0..n).filter(|&i| comp.follows(i, m)).map(|i| (upper[i] - lower[i]) / g[i]).sum::<f64>() / n as f64)
}

/// Per-unit influence-function contributions for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct IFContribution {
    pub horizon: usize,
    /// `Y_0i + sum_k (phi~_{k,k,i} - phi~_{k-1,k,i})`.
    pub values: Vec<f64>,
    /// `phi~_{j,k}` per `(j, k)`.
    pub components: Vec<((usize, usize), Vec<f64>)>,
}

impl IFContribution {
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The one-step estimator at horizon `t`, with its per-unit contributions.
pub fn one_step(data: &PanelDataset, regime: &Regime, nuisances: &NuisanceSet, t: usize) -> Result<(f64, IFContribution)> {
    if t > nuisances.horizon {
        return Err(Error::Invariant(format!("nuisances cover horizons up to {}, requested {t}", nuisances.horizon)));
    }
    let comp = compliance(data, regime);
    let c = contributions(data, &comp, nuisances, t)?;
    Ok((c.mean(), c))
}

fn contributions(data: &PanelDataset, comp: &ComplianceProfile, nuisances: &NuisanceSet, t: usize) -> Result<IFContribution> {
    let mut values = data.outcome(0).to_vec();
    let mut components = Vec::with_capacity(2 * t);
    for k in 1..=t {
        let same = phi_tilde(nuisances, comp, k, k)?;
        let prev = phi_tilde(nuisances, comp, k - 1, k)?;
        for i in 0..values.len() {
            values[i] += same[i] - prev[i];
        }
        components.push(((k, k), same));
        components.push(((k - 1, k), prev));
    }
    Ok(IFContribution { horizon: t, values, components })
}

/// `(1/n) sum_i (c_i - psi)^2`.
pub fn eif_variance(contributions: &IFContribution, psi: f64) -> f64 {
    let v = &contributions.values;
    v.iter().map(|c| (c - psi).powi(2)).sum::<f64>() / v.len() as f64
}

/// Plug-in estimate by exhaustive stratification on the observed values of
/// `W_bar_m` (iterated empirical conditional means). Only sensible when every
/// conditioning variable is discrete.
pub fn plug_in_psi(data: &PanelDataset, regime: &Regime, schedule: &AdjustmentSchedule, t: usize) -> Result<f64> {
    let comp = compliance(data, regime);
    let n = data.n_units();
    let keys: Vec<Vec<Vec<u64>>> = (1..=t)
        .map(|m| {
            let x = design_matrix(data, schedule, m)?;
            Ok((0..n).map(|i| x.row(i).iter().map(|v| (v + 0.0).to_bits()).collect()).collect())
        })
        .collect::<Result<_>>()?;
    let phi = |j: usize, k: usize| -> Result<f64> {
        let mut current: Vec<Option<f64>> = data.outcome(j).iter().map(|&y| Some(y)).collect();
        for m in (1..=k).rev() {
            let mut sums: HashMap<&Vec<u64>, (f64, usize)> = HashMap::new();
            for i in 0..n {
                if comp.follows(i, m) {
                    let v = current[i].expect("compliant units carry values");
                    let e = sums.entry(&keys[m - 1][i]).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            // the next stage needs values on units compliant at m - 1 (all units at m = 1)
            let mut next = vec![None; n];
            for i in 0..n {
                if m > 1 && !comp.follows(i, m - 1) {
                    continue;
                }
                let key = &keys[m - 1][i];
                match sums.get(key) {
                    Some((s, c)) => next[i] = Some(s / *c as f64),
                    None => {
                        return Err(Error::Positivity(format!(
                            "empty stratum at time {m} for regression (j={j}, k={k}): unit {} has no compliant match",
                            data.unit_labels()[i]
                        )))
                    }
                }
            }
            current = next;
        }
        Ok(current.iter().map(|v| v.expect("all units evaluated")).sum::<f64>() / n as f64)
    };
    let mut psi = data.outcome_mean(0);
    for k in 1..=t {
        psi += phi(k, k)? - phi(k - 1, k)?;
    }
    Ok(psi)
}

/// Lower median (order statistic `ceil(K/2)`), always an attained value.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() + 1) / 2 - 1]
}

/// Combines repetition estimates: `psi~ = median psi_k`,
/// `V~ = median (V_k + (psi_k - psi~)^2)`.
pub fn combine_repetitions(estimates: &[f64], variances: &[f64]) -> (f64, f64) {
    let psi = lower_median(estimates);
    let adjusted: Vec<f64> = estimates.iter().zip(variances).map(|(e, v)| v + (e - psi).powi(2)).collect();
    (psi, lower_median(&adjusted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Method {
    FullSample,
    /// `folds` partitions repeated `repetitions` times.
    CrossFit { folds: usize, repetitions: usize },
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::FullSample => write!(f, "full-sample"),
            Method::CrossFit { folds, repetitions } => write!(f, "cross-fit(M={folds}, K={repetitions})"),
        }
    }
}

/// Everything except the data needed to produce an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub learners: NuisanceLearners,
    pub epsilon: f64,
    pub propensity: PropensityOptions,
    pub method: Method,
    pub seed: u64,
    pub small_stratum: usize,
}

impl EstimatorSettings {
    pub fn new(learners: NuisanceLearners) -> Self {
        Self {
            learners,
            epsilon: DEFAULT_EPSILON,
            propensity: PropensityOptions::default(),
            method: Method::FullSample,
            seed: 0,
            small_stratum: DEFAULT_SMALL_STRATUM,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEstimate {
    pub t: usize,
    pub time_label: String,
    pub estimate: f64,
    /// Asymptotic variance estimate (variance of `sqrt(n)` times the error).
    pub variance: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// `(estimate, variance)` per repetition for cross-fitted estimates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repetitions: Vec<(f64, f64)>,
}

impl HorizonEstimate {
    fn new(t: usize, label: &str, estimate: f64, variance: f64, n: usize) -> Self {
        let std_error = (variance / n as f64).sqrt();
        Self {
            t,
            time_label: label.to_string(),
            estimate,
            variance,
            std_error,
            ci_lower: estimate - Z_95 * std_error,
            ci_upper: estimate + Z_95 * std_error,
            repetitions: Vec::new(),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// Histogram bin upper edges for cumulative propensities.
pub const G_BINS: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDiagnostics {
    pub m: usize,
    pub time_label: String,
    /// Units following the regime through `m` (whole panel).
    pub compliant: usize,
    /// Smallest `g_m` among compliant units; `None` when none comply.
    pub min_g: Option<f64>,
    /// Counts of compliant units' `g_m` in the bins ending at [`G_BINS`].
    pub histogram: Vec<usize>,
    /// Factors `f_m` raised to epsilon, among units at risk at `m`.
    pub truncated: usize,
    pub small_stratum: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PositivityReport {
    pub times: Vec<TimeDiagnostics>,
    pub small_stratum_threshold: usize,
}

impl PositivityReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.times.iter().filter(|d| d.small_stratum).map(|d| d.m).collect()
    }

    /// Merges reports computed on disjoint unit sets (e.g. validation folds).
    fn merge(&mut self, other: &PositivityReport) {
        for (a, b) in self.times.iter_mut().zip(&other.times) {
            a.min_g = match (a.min_g, b.min_g) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            };
            for (h, o) in a.histogram.iter_mut().zip(&b.histogram) {
                *h += o;
            }
            a.truncated += b.truncated;
        }
    }
}

/// Positivity report over `units`. Compliance counts always refer to the
/// whole panel; the flag fires when a count is below `threshold`.
pub fn positivity_diagnostics(
    nuisances: &NuisanceSet,
    comp: &ComplianceProfile,
    data: &PanelDataset,
    units: &[usize],
    threshold: usize,
) -> PositivityReport {
    let cg = nuisances.cumulative();
    let times = (0..=nuisances.horizon)
        .map(|m| {
            let compliant: Vec<usize> = units.iter().copied().filter(|&i| comp.follows(i, m)).collect();
            let mut histogram = vec![0; G_BINS.len()];
            let mut min_g: Option<f64> = None;
            for &i in &compliant {
                let g = cg.g[m][i];
                min_g = Some(min_g.map_or(g, |v: f64| v.min(g)));
                let bin = G_BINS.iter().position(|&edge| g <= edge).unwrap_or(G_BINS.len() - 1);
                histogram[bin] += 1;
            }
            let truncated = if m == 0 {
                0
            } else {
                units.iter().filter(|&&i| comp.follows(i, m - 1) && cg.truncated[m][i]).count()
            };
            let count = comp.count(m);
            TimeDiagnostics {
                m,
                time_label: data.time_labels()[m].clone(),
                compliant: count,
                min_g,
                histogram,
                truncated,
                small_stratum: count < threshold,
            }
        })
        .collect();
    PositivityReport { times, small_stratum_threshold: threshold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub n_units: usize,
    pub epsilon: f64,
    pub regime: Vec<i64>,
    pub horizons: Vec<HorizonEstimate>,
    pub diagnostics: PositivityReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nuisance: Vec<NuisanceSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Per-unit contributions per horizon (for cross-fitting, from the
    /// repetition attaining the median). Not serialized.
    #[serde(skip)]
    pub contributions: Vec<Vec<f64>>,
}

impl EstimateReport {
    pub fn horizon(&self, t: usize) -> Option<&HorizonEstimate> {
        self.horizons.iter().find(|h| h.t == t)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["t", "time", "estimate", "std_error", "ci_lower", "ci_upper", "compliant"];
        let rows: Vec<Vec<String>> = self
            .horizons
            .iter()
            .map(|h| {
                let compliant = self.diagnostics.times.get(h.t).map_or(String::from("-"), |d| d.compliant.to_string());
                vec![
                    h.t.to_string(),
                    h.time_label.clone(),
                    format!("{:.6}", h.estimate),
                    format!("{:.6}", h.std_error),
                    format!("{:.6}", h.ci_lower),
                    format!("{:.6}", h.ci_upper),
                    compliant,
                ]
            })
            .collect();
        let mut out = format!("method: {}  n = {}  epsilon = {}\n", self.method, self.n_units, self.epsilon);
        out.push_str(&align(&header.map(String::from), &rows));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    /// Writes per-unit contributions as CSV: `unit,t_0,t_1,...`.
    pub fn write_contributions<W: Write>(&self, data: &PanelDataset, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string()];
        header.extend(self.horizons.iter().map(|h| format!("t_{}", h.t)));
        w.write_record(&header)?;
        for (i, label) in data.unit_labels().iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.contributions.iter().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Right-aligns columns to their widest cell.
pub fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        parts.join("  ") + "\n"
    };
    let mut out = line(header);
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn check_horizon(data: &PanelDataset, t: usize) -> Result<()> {
    if t > data.horizon() {
        return Err(Error::Invariant(format!("requested horizon {t} exceeds panel horizon {}", data.horizon())));
    }
    Ok(())
}

fn zero_variance_warnings(horizons: &[HorizonEstimate]) -> Vec<String> {
    horizons
        .iter()
        .filter(|h| h.variance == 0.0)
        .map(|h| {
            let msg = format!("variance estimate at t={} is zero; the confidence interval has zero width", h.t);
            log::warn!("{msg}");
            msg
        })
        .collect()
}

/// Estimates `psi_t` for `t = 0..=horizon` with nuisances fitted on the full sample.
pub fn full_sample(data: &PanelDataset, regime: &Regime, schedule: &AdjustmentSchedule, settings: &EstimatorSettings, horizon: usize) -> Result<EstimateReport> {
    check_horizon(data, horizon)?;
    let n = data.n_units();
    let units: Vec<usize> = (0..n).collect();
    let comp = compliance(data, regime);
    let nuis = fit_nuisance_set(
        data,
        regime,
        schedule,
        horizon,
        &settings.learners,
        &units,
        settings.epsilon,
        &settings.propensity,
        derive_seed(settings.seed, &[0]),
        FitScope::FullSample,
    )?;
    let mut horizons = Vec::with_capacity(horizon + 1);
    let mut dumps = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let c = contributions(data, &comp, &nuis, t)?;
        let psi = c.mean();
        let v = eif_variance(&c, psi);
        horizons.push(HorizonEstimate::new(t, &data.time_labels()[t], psi, v, n));
        dumps.push(c.values);
    }
    let warnings = zero_variance_warnings(&horizons);
    Ok(EstimateReport {
        method: Method::FullSample,
        n_units: n,
        epsilon: settings.epsilon,
        regime: regime.trajectory().to_vec(),
        horizons,
        diagnostics: positivity_diagnostics(&nuis, &comp, data, &units, settings.small_stratum),
        nuisance: vec![nuis.summary()],
        warnings,
        contributions: dumps,
    })
}

struct Repetition {
    /// Contributions per horizon, per unit.
    values: Vec<Vec<f64>>,
    diagnostics: PositivityReport,
}

/// Cross-fitted estimate: `repetitions` independent `folds`-fold partitions,
/// nuisances for each fold fitted on its complement, repetition estimates
/// combined by the lower median.
#[allow(clippy::too_many_arguments)]
pub fn cross_fit(
    data: &PanelDataset,
    regime: &Regime,
    schedule: &AdjustmentSchedule,
    settings: &EstimatorSettings,
    horizon: usize,
    folds: usize,
    repetitions: usize,
    exec: Execution,
) -> Result<EstimateReport> {
    check_horizon(data, horizon)?;
    let n = data.n_units();
    if folds < 2 {
        return Err(Error::Invariant(format!("cross-fitting needs at least 2 folds, got {folds}")));
    }
    if repetitions == 0 {
        return Err(Error::Invariant("cross-fitting needs at least one repetition".into()));
    }
    if n < 2 * folds {
        return Err(Error::FoldTooSmall(format!("{n} units cannot be split into {folds} folds of at least 2")));
    }
    let comp = compliance(data, regime);
    let plan = FoldPlan::new(n, folds, repetitions, derive_seed(settings.seed, &[1]));
    let tasks: Vec<(usize, usize)> = (0..repetitions).flat_map(|r| (0..folds).map(move |f| (r, f))).collect();
    let fold_results = exec.try_map(tasks.len(), |idx| -> Result<(Vec<Vec<f64>>, PositivityReport)> {
        let (r, f) = tasks[idx];
        let labels = &plan.labels[r];
        let (valid, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| labels[i] == f);
        let nuis = fit_nuisance_set(
            data,
            regime,
            schedule,
            horizon,
            &settings.learners,
            &train,
            settings.epsilon,
            &settings.propensity,
            derive_seed(settings.seed, &[2, r as u64, f as u64]),
            FitScope::Fold { repetition: r, fold: f },
        )
        .map_err(|e| match e {
            Error::Positivity(_) | Error::Nuisance(_) | Error::EmptyData => {
                Error::FoldTooSmall(format!("repetition {r}, fold {f}: {e}"))
            }
            other => other,
        })?;
        let values = (0..=horizon)
            .map(|t| contributions(data, &comp, &nuis, t).map(|c| c.values))
            .collect::<Result<Vec<_>>>()?;
        let diag = positivity_diagnostics(&nuis, &comp, data, &valid, settings.small_stratum);
        Ok((values, diag))
    })?;

    let mut reps: Vec<Repetition> = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let labels = &plan.labels[r];
        let mut values = vec![vec![0.0; n]; horizon + 1];
        let mut diagnostics: Option<PositivityReport> = None;
        for f in 0..folds {
            let (fold_values, diag) = &fold_results[r * folds + f];
            for t in 0..=horizon {
                for i in (0..n).filter(|&i| labels[i] == f) {
                    values[t][i] = fold_values[t][i];
                }
            }
            match diagnostics.as_mut() {
                None => diagnostics = Some(diag.clone()),
                Some(d) => d.merge(diag),
            }
        }
        reps.push(Repetition { values, diagnostics: diagnostics.expect("at least one fold") });
    }

    let mut horizons = Vec::with_capacity(horizon + 1);
    let mut dumps = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let per_rep: Vec<(f64, f64)> = reps
            .iter()
            .map(|rep| {
                let psi = mean(&rep.values[t]);
                let v = rep.values[t].iter().map(|c| (c - psi).powi(2)).sum::<f64>() / n as f64;
                (psi, v)
            })
            .collect();
        let estimates: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
        let variances: Vec<f64> = per_rep.iter().map(|p| p.1).collect();
        let (psi, v) = combine_repetitions(&estimates, &variances);
        let mut h = HorizonEstimate::new(t, &data.time_labels()[t], psi, v, n);
        h.repetitions = per_rep;
        horizons.push(h);
        let chosen = estimates.iter().position(|&e| e == psi).expect("median is attained");
        dumps.push(reps[chosen].values[t].clone());
    }
    // worst repetition per time: smallest g, most truncations
    let mut diagnostics = reps[0].diagnostics.clone();
    for rep in &reps[1..] {
        for (a, b) in diagnostics.times.iter_mut().zip(&rep.diagnostics.times) {
            a.min_g = match (a.min_g, b.min_g) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            };
            a.truncated = a.truncated.max(b.truncated);
        }
    }
    let warnings = zero_variance_warnings(&horizons);
    Ok(EstimateReport {
        method: Method::CrossFit { folds, repetitions },
        n_units: n,
        epsilon: settings.epsilon,
        regime: regime.trajectory().to_vec(),
        horizons,
        diagnostics,
        nuisance: Vec::new(),
        warnings,
        contributions: dumps,
    })
}

/// Dispatches on `settings.method`.
pub fn estimate(
    data: &PanelDataset,
    regime: &Regime,
    schedule: &AdjustmentSchedule,
    settings: &EstimatorSettings,
    horizon: usize,
    exec: Execution,
) -> Result<EstimateReport> {
    match settings.method {
        Method::FullSample => full_sample(data, regime, schedule, settings, horizon),
        Method::CrossFit { folds, repetitions } => cross_fit(data, regime, schedule, settings, horizon, folds, repetitions, exec),
    }
}
