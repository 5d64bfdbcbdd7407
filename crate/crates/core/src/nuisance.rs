//! Sequential outcome regressions `Q^{j,k,m}` and cumulative propensity
//! scores `g_m`, fitted on a set of training units and evaluated on all units.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{ColumnInfo, ColumnKind, DesignMatrix};
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::learners::{fit, FittedModel, LearnerSpec, PredictionMode, Provenance};
use crate::panel::{compliance, design_matrix, AdjustmentSchedule, ComplianceProfile, PanelDataset, Regime, Variable};

pub const DEFAULT_EPSILON: f64 = 0.01;

/// Regression `Q^{j,k,m}`: outcome time `j`, depth `k`, stage `m`.
/// Stage `m = k + 1` is the raw outcome `Y_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QIndex {
    pub j: usize,
    pub k: usize,
    pub m: usize,
}

impl QIndex {
    pub fn new(j: usize, k: usize, m: usize) -> Result<Self> {
        if !(k == j || k == j + 1) || m == 0 || m > k + 1 {
            return Err(Error::Invariant(format!("invalid regression index (j={j}, k={k}, m={m})")));
        }
        Ok(Self { j, k, m })
    }

    pub fn is_raw_outcome(&self) -> bool {
        self.m == self.k + 1
    }
}

/// The `(j, k)` chains needed for horizon `t`: `(k, k)` and `(k - 1, k)` for `k = 1..=t`.
pub fn required_chains(t: usize) -> Vec<(usize, usize)> {
    (1..=t).flat_map(|k| [(k, k), (k - 1, k)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceLearners {
    pub outcome: LearnerSpec,
    pub propensity: LearnerSpec,
}

/// How propensity models are organized across time.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PropensityOptions {
    /// One model for all times, with the time index as a feature.
    #[serde(default)]
    pub pooled: bool,
    /// Pooled models only: keep variables observed at most this many periods
    /// before `m`, aligned by lag rather than calendar time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag_window: Option<usize>,
}

/// Where the training units came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    FullSample,
    Fold { repetition: usize, fold: usize },
}

impl std::fmt::Display for FitScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitScope::FullSample => write!(f, "full-sample"),
            FitScope::Fold { repetition, fold } => write!(f, "repetition {repetition}, fold {fold}"),
        }
    }
}

/// A fitted regression stage with its predictions on every unit.
#[derive(Debug, Clone)]
pub struct QFit {
    pub model: FittedModel,
    pub predictions: Vec<f64>,
    pub n_train: usize,
}

#[derive(Debug, Clone)]
pub enum PropensityModel {
    /// Every training unit at risk followed the regime: `f = 1`.
    Degenerate,
    Separate(FittedModel),
    /// Index into the shared pooled model.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: PropensityModel,
    /// `f_m` for every unit.
    pub predictions: Vec<f64>,
    pub n_at_risk: usize,
    pub n_events: usize,
}

/// Per-unit cumulative propensities with truncation records.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativePropensity {
    /// `g[m][i]` for `m = 0..=t`; `g[0]` is identically one.
    pub g: Vec<Vec<f64>>,
    /// `truncated[m][i]`: whether factor `f_m` of unit `i` was raised to epsilon.
    pub truncated: Vec<Vec<bool>>,
    pub epsilon: f64,
}

impl CumulativePropensity {
    pub fn horizon(&self) -> usize {
        self.g.len() - 1
    }

    pub fn truncation_count(&self, m: usize, units: &[usize]) -> usize {
        units.iter().filter(|&&i| self.truncated[m][i]).count()
    }
}

/// Products of truncated factors: `g_m = prod_{k<=m} max(f_k, epsilon)`.
pub fn cumulative_g(factors: &[Vec<f64>], epsilon: f64) -> CumulativePropensity {
    let n = factors.first().map_or(0, Vec::len);
    let mut g = vec![vec![1.0; n]];
    let mut truncated = vec![vec![false; n]];
    for f in factors {
        let prev = g.last().expect("g_0 present");
        let trunc: Vec<bool> = f.iter().map(|&v| v < epsilon).collect();
        let cur: Vec<f64> = (0..n).map(|i| prev[i] * f[i].max(epsilon)).collect();
        g.push(cur);
        truncated.push(trunc);
    }
    CumulativePropensity { g, truncated, epsilon }
}

/// All nuisance estimates needed for horizons up to `t`.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub horizon: usize,
    pub epsilon: f64,
    pub options: PropensityOptions,
    pub scope: FitScope,
    q: BTreeMap<QIndex, QFit>,
    /// `propensity[m - 1]` models `f_m`.
    propensity: Vec<PropensityFit>,
    pooled_model: Option<FittedModel>,
    outcomes: Vec<Vec<f64>>,
    g: CumulativePropensity,
    /// Order in which regressions were fitted.
    pub fit_order: Vec<QIndex>,
    /// Number of training units following the regime through each time.
    pub compliant_training: Vec<usize>,
}

impl NuisanceSet {
    /// Predictions of `Q^{j,k,m}` for every unit (`Y_j` when `m = k + 1`).
    pub fn q_values(&self, j: usize, k: usize, m: usize) -> Result<&[f64]> {
        if m == k + 1 && j < self.outcomes.len() && (k == j || k == j + 1) {
            return Ok(&self.outcomes[j]);
        }
        let idx = QIndex { j, k, m };
        self.q.get(&idx).map(|f| f.predictions.as_slice()).ok_or(Error::MissingNuisance { j, k, m })
    }

    pub fn q_fit(&self, j: usize, k: usize, m: usize) -> Option<&QFit> {
        self.q.get(&QIndex { j, k, m })
    }

    pub fn q_indices(&self) -> impl Iterator<Item = &QIndex> {
        self.q.keys()
    }

    pub fn propensity(&self, m: usize) -> &PropensityFit {
        &self.propensity[m - 1]
    }

    pub fn pooled_model(&self) -> Option<&FittedModel> {
        self.pooled_model.as_ref()
    }

    pub fn cumulative(&self) -> &CumulativePropensity {
        &self.g
    }

    /// Evaluates a fitted regression on another panel with the same layout.
    pub fn predict_q(&self, idx: QIndex, data: &PanelDataset, schedule: &AdjustmentSchedule) -> Result<Vec<f64>> {
        if idx.is_raw_outcome() {
            return Ok(data.outcome(idx.j).to_vec());
        }
        let fit = self.q.get(&idx).ok_or(Error::MissingNuisance { j: idx.j, k: idx.k, m: idx.m })?;
        fit.model.predict(&design_matrix(data, schedule, idx.m)?)
    }

    pub fn summary(&self) -> NuisanceSummary {
        NuisanceSummary {
            scope: self.scope.to_string(),
            epsilon: self.epsilon,
            pooled_propensity: self.options.pooled,
            outcome_models: self
                .q
                .iter()
                .map(|(idx, f)| QSummary { index: *idx, n_train: f.n_train, provenance: f.model.provenance().clone() })
                .collect(),
            propensity_models: self
                .propensity
                .iter()
                .enumerate()
                .map(|(c, p)| PropensitySummary {
                    m: c + 1,
                    kind: match &p.model {
                        PropensityModel::Degenerate => "degenerate".into(),
                        PropensityModel::Separate(_) => "separate".into(),
                        PropensityModel::Pooled => "pooled".into(),
                    },
                    provenance: match &p.model {
                        PropensityModel::Separate(model) => Some(model.provenance().clone()),
                        PropensityModel::Pooled => self.pooled_model.as_ref().map(|m| m.provenance().clone()),
                        PropensityModel::Degenerate => None,
                    },
                    n_at_risk: p.n_at_risk,
                    n_events: p.n_events,
                    truncated_units: self.g.truncated[c + 1].iter().filter(|&&t| t).count(),
                })
                .collect(),
            compliant_training: self.compliant_training.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSummary {
    pub index: QIndex,
    pub n_train: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub m: usize,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub n_at_risk: usize,
    pub n_events: usize,
    /// Units (all, not only training) whose factor was raised to epsilon.
    pub truncated_units: usize,
}

/// JSON-friendly description of a [`NuisanceSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub scope: String,
    pub epsilon: f64,
    pub pooled_propensity: bool,
    pub outcome_models: Vec<QSummary>,
    pub propensity_models: Vec<PropensitySummary>,
    pub compliant_training: Vec<usize>,
}

fn designs(data: &PanelDataset, schedule: &AdjustmentSchedule, t: usize) -> Result<Vec<DesignMatrix>> {
    (1..=t).map(|m| design_matrix(data, schedule, m)).collect()
}

/// Fits `Q^{j,k,m}` for `m = k, ..., 1`. Returns the fits in fitting order.
#[allow(clippy::too_many_arguments)]
pub fn fit_q_chain(
    data: &PanelDataset,
    regime: &Regime,
    schedule: &AdjustmentSchedule,
    j: usize,
    k: usize,
    learner: &LearnerSpec,
    training: &[usize],
    seed: u64,
) -> Result<Vec<(QIndex, QFit)>> {
    let comp = compliance(data, regime);
    let x = designs(data, schedule, k)?;
    q_chain(data, &comp, &x, j, k, learner, training, seed)
}

#[allow(clippy::too_many_arguments)]
fn q_chain(
    data: &PanelDataset,
    comp: &ComplianceProfile,
    designs: &[DesignMatrix],
    j: usize,
    k: usize,
    learner: &LearnerSpec,
    training: &[usize],
    seed: u64,
) -> Result<Vec<(QIndex, QFit)>> {
    QIndex::new(j, k, k)?;
    let mut target: Vec<f64> = data.outcome(j).to_vec();
    let mut out = Vec::with_capacity(k);
    for m in (1..=k).rev() {
        let rows: Vec<usize> = training.iter().copied().filter(|&i| comp.follows(i, m)).collect();
        if rows.is_empty() {
            return Err(Error::Positivity(format!(
                "no training unit follows the regime through time {m} (regression j={j}, k={k}, m={m})"
            )));
        }
        let x = &designs[m - 1];
        let y: Vec<f64> = rows.iter().map(|&i| target[i]).collect();
        let model = fit(learner, &x.select_rows(&rows), &y, None, derive_seed(seed, &[j as u64, k as u64, m as u64]), PredictionMode::Real)?;
        let predictions = model.predict(x)?;
        target.clone_from(&predictions);
        out.push((QIndex { j, k, m }, QFit { model, predictions, n_train: rows.len() }));
    }
    Ok(out)
}

/// Units at risk for `f_m` among `training` and their event indicators.
fn at_risk(data: &PanelDataset, regime: &Regime, comp: &ComplianceProfile, training: &[usize], m: usize) -> (Vec<usize>, Vec<f64>) {
    let rows: Vec<usize> = training.iter().copied().filter(|&i| comp.follows(i, m - 1)).collect();
    let a = data.treatment(m);
    let y = rows.iter().map(|&i| f64::from(u8::from(a[i] == regime.at(m)))).collect();
    (rows, y)
}

/// Fits `f(A_m = a*_m | W_bar_m, A_bar_{m-1} = a*_bar_{m-1})` on its own stratum.
#[allow(clippy::too_many_arguments)]
pub fn fit_propensity(
    data: &PanelDataset,
    regime: &Regime,
    schedule: &AdjustmentSchedule,
    m: usize,
    learner: &LearnerSpec,
    training: &[usize],
    seed: u64,
) -> Result<PropensityFit> {
    let comp = compliance(data, regime);
    let x = design_matrix(data, schedule, m)?;
    separate_propensity(data, regime, &comp, &x, m, learner, training, seed)
}

#[allow(clippy::too_many_arguments)]
fn separate_propensity(
    data: &PanelDataset,
    regime: &Regime,
    comp: &ComplianceProfile,
    x: &DesignMatrix,
    m: usize,
    learner: &LearnerSpec,
    training: &[usize],
    seed: u64,
) -> Result<PropensityFit> {
    let (rows, y) = at_risk(data, regime, comp, training, m);
    if rows.is_empty() {
        return Err(Error::Positivity(format!("no training unit follows the regime through time {}", m - 1)));
    }
    let n_events = y.iter().filter(|&&v| v == 1.0).count();
    if n_events == rows.len() {
        return Ok(PropensityFit {
            model: PropensityModel::Degenerate,
            predictions: vec![1.0; data.n_units()],
            n_at_risk: rows.len(),
            n_events,
        });
    }
    let model = fit(learner, &x.select_rows(&rows), &y, None, derive_seed(seed, &[0xFA, m as u64]), PredictionMode::Probability)?;
    let predictions = model.predict(x)?;
    Ok(PropensityFit { model: PropensityModel::Separate(model), predictions, n_at_risk: rows.len(), n_events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PooledKey {
    Absolute(Variable),
    Lagged { outcome: bool, index: usize, lag: usize },
}

/// Common embedding of `W_bar_m` for all `m`, zero-padded, plus the period.
struct PooledLayout {
    keys: Vec<PooledKey>,
    columns: Vec<ColumnInfo>,
}

impl PooledLayout {
    fn key(v: &Variable, m: usize, lag_window: Option<usize>) -> Option<PooledKey> {
        match lag_window {
            None => Some(PooledKey::Absolute(*v)),
            Some(window) => {
                let lag = m - v.time();
                (lag <= window).then_some(match *v {
                    Variable::Covariate { index, .. } => PooledKey::Lagged { outcome: false, index, lag },
                    Variable::Outcome { .. } => PooledKey::Lagged { outcome: true, index: 0, lag },
                })
            }
        }
    }

    fn new(data: &PanelDataset, schedule: &AdjustmentSchedule, t: usize, lag_window: Option<usize>) -> Self {
        let mut set = BTreeSet::new();
        for m in 1..=t {
            set.extend(schedule.step(m).iter().filter_map(|v| Self::key(v, m, lag_window)));
        }
        let keys: Vec<PooledKey> = set.into_iter().collect();
        let mut columns: Vec<ColumnInfo> = keys
            .iter()
            .map(|key| match *key {
                PooledKey::Absolute(Variable::Covariate { time, index }) => {
                    ColumnInfo { name: data.covariate_names()[index].clone(), time: Some(time), kind: ColumnKind::Covariate }
                }
                PooledKey::Absolute(Variable::Outcome { time }) => {
                    ColumnInfo { name: data.outcome_name().to_string(), time: Some(time), kind: ColumnKind::Outcome }
                }
                // lagged columns carry the lag in place of the time
                PooledKey::Lagged { outcome: false, index, lag } => {
                    ColumnInfo { name: data.covariate_names()[index].clone(), time: Some(lag), kind: ColumnKind::Covariate }
                }
                PooledKey::Lagged { outcome: true, lag, .. } => {
                    ColumnInfo { name: data.outcome_name().to_string(), time: Some(lag), kind: ColumnKind::Outcome }
                }
            })
            .collect();
        columns.push(ColumnInfo { name: "period".into(), time: None, kind: ColumnKind::Period });
        Self { keys, columns }
    }

    fn design(&self, data: &PanelDataset, schedule: &AdjustmentSchedule, m: usize, lag_window: Option<usize>) -> DesignMatrix {
        let n = data.n_units();
        let width = self.keys.len();
        let mut values = DMatrix::<f64>::zeros(n, width + 1);
        for v in schedule.step(m) {
            let Some(key) = Self::key(v, m, lag_window) else { continue };
            let c = self.keys.binary_search(&key).expect("key in layout");
            for i in 0..n {
                values[(i, c)] = match *v {
                    Variable::Covariate { time, index } => data.covariate(time, index, i),
                    Variable::Outcome { time } => data.outcome(time)[i],
                };
            }
        }
        for i in 0..n {
            values[(i, width)] = m as f64;
        }
        DesignMatrix::new(values, self.columns.clone())
    }
}

#[allow(clippy::too_many_arguments)]
fn pooled_propensity(
    data: &PanelDataset,
    regime: &Regime,
    comp: &ComplianceProfile,
    schedule: &AdjustmentSchedule,
    t: usize,
    learner: &LearnerSpec,
    training: &[usize],
    lag_window: Option<usize>,
    seed: u64,
) -> Result<(Vec<PropensityFit>, Option<FittedModel>)> {
    let layout = PooledLayout::new(data, schedule, t, lag_window);
    let designs: Vec<DesignMatrix> = (1..=t).map(|m| layout.design(data, schedule, m, lag_window)).collect();
    let mut strata = Vec::with_capacity(t);
    for m in 1..=t {
        let (rows, y) = at_risk(data, regime, comp, training, m);
        if rows.is_empty() {
            return Err(Error::Positivity(format!("no training unit follows the regime through time {}", m - 1)));
        }
        strata.push((rows, y));
    }
    // times at which everyone at risk followed the regime stay constant
    let active: Vec<usize> = (1..=t).filter(|&m| strata[m - 1].1.iter().any(|&v| v != 1.0)).collect();
    let model = if active.is_empty() {
        None
    } else {
        let total: usize = active.iter().map(|&m| strata[m - 1].0.len()).sum();
        let width = layout.columns.len();
        let mut values = DMatrix::<f64>::zeros(total, width);
        let mut y = Vec::with_capacity(total);
        let mut r = 0;
        for &m in &active {
            let (rows, ym) = &strata[m - 1];
            for (&i, &v) in rows.iter().zip(ym) {
                for c in 0..width {
                    values[(r, c)] = designs[m - 1].values[(i, c)];
                }
                y.push(v);
                r += 1;
            }
        }
        let x = DesignMatrix::new(values, layout.columns.clone());
        Some(fit(learner, &x, &y, None, derive_seed(seed, &[0xFB]), PredictionMode::Probability)?)
    };
    let mut fits = Vec::with_capacity(t);
    for m in 1..=t {
        let (rows, y) = &strata[m - 1];
        let n_events = y.iter().filter(|&&v| v == 1.0).count();
        let fit = match (&model, active.contains(&m)) {
            (Some(model), true) => {
                PropensityFit { model: PropensityModel::Pooled, predictions: model.predict(&designs[m - 1])?, n_at_risk: rows.len(), n_events }
            }
            _ => PropensityFit { model: PropensityModel::Degenerate, predictions: vec![1.0; data.n_units()], n_at_risk: rows.len(), n_events },
        };
        fits.push(fit);
    }
    Ok((fits, model))
}

/// Fits every regression chain and propensity model needed for horizon `t`
/// on `training`. Failures are collected and reported together.
#[allow(clippy::too_many_arguments)]
pub fn fit_nuisance_set(
    data: &PanelDataset,
    regime: &Regime,
    schedule: &AdjustmentSchedule,
    t: usize,
    learners: &NuisanceLearners,
    training: &[usize],
    epsilon: f64,
    options: &PropensityOptions,
    seed: u64,
    scope: FitScope,
) -> Result<NuisanceSet> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Invariant(format!("truncation level must lie in (0, 0.5), got {epsilon}")));
    }
    if t > data.horizon() {
        return Err(Error::Invariant(format!("horizon {t} exceeds panel horizon {}", data.horizon())));
    }
    learners.outcome.validate()?;
    learners.propensity.validate()?;
    let comp = compliance(data, regime);
    let x = designs(data, schedule, t)?;
    let mut failures = Vec::new();
    let mut q = BTreeMap::new();
    let mut fit_order = Vec::new();
    for (j, k) in required_chains(t) {
        match q_chain(data, &comp, &x, j, k, &learners.outcome, training, derive_seed(seed, &[1])) {
            Ok(fits) => {
                for (idx, f) in fits {
                    fit_order.push(idx);
                    q.insert(idx, f);
                }
            }
            Err(e) => failures.push(format!("chain (j={j}, k={k}): {e}")),
        }
    }
    let mut propensity = Vec::with_capacity(t);
    let mut pooled_model = None;
    if options.pooled && t > 0 {
        match pooled_propensity(data, regime, &comp, schedule, t, &learners.propensity, training, options.lag_window, derive_seed(seed, &[2])) {
            Ok((fits, model)) => {
                propensity = fits;
                pooled_model = model;
            }
            Err(e) => failures.push(format!("pooled propensity: {e}")),
        }
    } else {
        for m in 1..=t {
            match separate_propensity(data, regime, &comp, &x[m - 1], m, &learners.propensity, training, derive_seed(seed, &[2])) {
                Ok(f) => propensity.push(f),
                Err(e) => failures.push(format!("propensity m={m}: {e}")),
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Nuisance(failures));
    }
    let factors: Vec<Vec<f64>> = propensity.iter().map(|p| p.predictions.clone()).collect();
    let mut g = cumulative_g(&factors, epsilon);
    if factors.is_empty() {
        g.g = vec![vec![1.0; data.n_units()]];
        g.truncated = vec![vec![false; data.n_units()]];
    }
    let compliant_training = (0..=t).map(|m| training.iter().filter(|&&i| comp.follows(i, m)).count()).collect();
    Ok(NuisanceSet {
        horizon: t,
        epsilon,
        options: options.clone(),
        scope,
        q,
        propensity,
        pooled_model,
        outcomes: (0..=t).map(|j| data.outcome(j).to_vec()).collect(),
        g,
        fit_order,
        compliant_training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerKind;
    use std::collections::HashMap;

    /// Panel with `times` periods, one covariate, treatment from `treat`.
    pub(crate) fn panel(x: &[Vec<f64>], y: &[Vec<f64>], a: &[Vec<i64>]) -> PanelDataset {
        let times = x.len();
        let n = x[0].len();
        PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..times).map(|t| t.to_string()).collect(),
            vec!["w".into()],
            a.to_vec(),
            y.to_vec(),
            x.iter().map(|col| DMatrix::from_column_slice(n, 1, col)).collect(),
        )
        .unwrap()
        .with_alphabet(&[0, 1])
    }

    fn all_units(data: &PanelDataset) -> Vec<usize> {
        (0..data.n_units()).collect()
    }

    #[test]
    fn required_chain_bookkeeping() {
        assert_eq!(required_chains(1), vec![(1, 1), (0, 1)]);
        assert_eq!(required_chains(2), vec![(1, 1), (0, 1), (2, 2), (1, 2)]);
    }

    #[test]
    fn constant_outcome_propagates() {
        let n = 12;
        let x: Vec<Vec<f64>> = (0..3).map(|t| (0..n).map(|i| (i * (t + 2) % 5) as f64).collect()).collect();
        let y = vec![vec![3.5; n]; 3];
        let a: Vec<Vec<i64>> = (0..3).map(|t| (0..n).map(|i| i64::from(t > 0 && i % 4 == 0)).collect()).collect();
        let data = panel(&x, &y, &a);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        for spec in [LearnerSpec::mean(), LearnerSpec::linear(), LearnerSpec::stratified_mean()] {
            let fits = fit_q_chain(&data, &regime, &schedule, 2, 2, &spec, &all_units(&data), 0).unwrap();
            for (_, f) in fits {
                assert!(f.predictions.iter().all(|p| (p - 3.5).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn hand_built_stratum_means() {
        // 8 units, binary w at times 0 and 1; units 6 and 7 leave the regime at time 1
        let w0 = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let w1 = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y1 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 100.0, 200.0];
        let data = panel(
            &[w0, w1],
            &[vec![0.0; 8], y1],
            &[vec![0; 8], vec![0, 0, 0, 0, 0, 0, 1, 1]],
        );
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let fits = fit_q_chain(&data, &regime, &schedule, 1, 1, &LearnerSpec::stratified_mean(), &all_units(&data), 0).unwrap();
        let q = &fits[0].1.predictions;
        // strata (w0, w1): (0,0) -> units 0,4 ; (0,1) -> 1 ; (1,0) -> 2 ; (1,1) -> 3,5
        assert_eq!(q[0], 3.0);
        assert_eq!(q[4], 3.0);
        assert_eq!(q[1], 2.0);
        assert_eq!(q[2], 3.0);
        assert_eq!(q[3], 5.0);
        // non-compliant unit 6 shares stratum (0,0); unit 7 shares (1,1)
        assert_eq!(q[6], 3.0);
        assert_eq!(q[7], 5.0);
    }

    #[test]
    fn positivity_failure_names_time() {
        let data = panel(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[vec![0.0; 2], vec![1.0; 2]], &[vec![0, 0], vec![1, 1]]);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let err = fit_q_chain(&data, &regime, &schedule, 1, 1, &LearnerSpec::mean(), &[0, 1], 0).unwrap_err();
        assert!(matches!(err, Error::Positivity(ref msg) if msg.contains("time 1")), "{err}");
    }

    #[test]
    fn degenerate_and_frequency_propensities() {
        let n = 10;
        let x = vec![vec![0.0; n]; 3];
        let y = vec![vec![0.0; n]; 3];
        // time 1: everyone stays; time 2: units 0..6 at risk (4 left at time 1? no) -> build explicitly
        let a1 = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let a2 = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let data = panel(&x, &y, &[vec![0; n], a1, a2]);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let units = all_units(&data);
        let f1 = fit_propensity(&data, &regime, &schedule, 1, &LearnerSpec::mean(), &units, 0).unwrap();
        assert_eq!(f1.n_at_risk, 10);
        assert!(f1.predictions.iter().all(|&p| (p - 0.6).abs() < 1e-12));
        let f2 = fit_propensity(&data, &regime, &schedule, 2, &LearnerSpec::mean(), &units, 0).unwrap();
        assert_eq!((f2.n_at_risk, f2.n_events), (6, 3));
        assert!(f2.predictions.iter().all(|&p| (p - 0.5).abs() < 1e-12));

        let stay = panel(&x, &y, &[vec![0; n], vec![0; n], vec![0; n]]);
        let f = fit_propensity(&stay, &regime, &schedule, 1, &LearnerSpec::logistic(), &units, 0).unwrap();
        assert!(matches!(f.model, PropensityModel::Degenerate));
        assert!(f.predictions.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn saturated_propensity_matches_frequency_table() {
        let n = 40;
        let w1: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let a1: Vec<i64> = (0..n).map(|i| i64::from((i * 7) % 5 < (i % 3) + 1)).collect();
        let data = panel(&[vec![0.0; n], w1.clone()], &[vec![0.0; n], vec![0.0; n]], &[vec![0; n], a1.clone()]);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::new(vec![vec![Variable::Covariate { time: 1, index: 0 }]], &data).unwrap();
        let f = fit_propensity(&data, &regime, &schedule, 1, &LearnerSpec::stratified_mean(), &all_units(&data), 0).unwrap();
        let mut table: HashMap<u64, (f64, f64)> = HashMap::new();
        for i in 0..n {
            let e = table.entry(w1[i].to_bits()).or_default();
            e.0 += f64::from(u8::from(a1[i] == 0));
            e.1 += 1.0;
        }
        for i in 0..n {
            let (s, c) = table[&w1[i].to_bits()];
            assert!((f.predictions[i] - s / c).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulative_products_and_truncation() {
        let g = cumulative_g(&[vec![1.0, 0.5, 0.001], vec![1.0, 0.5, 0.5]], 0.01);
        assert_eq!(g.g[1], vec![1.0, 0.5, 0.01]);
        assert_eq!(g.g[2], vec![1.0, 0.25, 0.005]);
        assert_eq!(g.truncation_count(1, &[0, 1, 2]), 1);
        assert_eq!(g.truncation_count(2, &[0, 1, 2]), 0);
    }

    fn random_panel(n: usize, seed: u64) -> PanelDataset {
        use rand::Rng;
        let mut rng = crate::exec::rng_from(seed, &[]);
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect()).collect();
        let mut a = vec![vec![0i64; n]];
        for t in 1..3 {
            let prev = a[t - 1].clone();
            a.push((0..n).map(|i| if prev[i] == 1 || rng.gen_bool(0.2 + 0.3 * x[t][i]) { 1 } else { 0 }).collect());
        }
        let y: Vec<Vec<f64>> = (0..3).map(|t| (0..n).map(|i| x[t][i] + rng.gen::<f64>() - a[t][i] as f64).collect()).collect();
        panel(&x, &y, &a)
    }

    #[test]
    fn nuisance_set_contents_and_order() {
        let data = random_panel(200, 1);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let learners = NuisanceLearners { outcome: LearnerSpec::linear(), propensity: LearnerSpec::logistic() };
        let units = all_units(&data);
        let set = fit_nuisance_set(&data, &regime, &schedule, 2, &learners, &units, 0.01, &PropensityOptions::default(), 3, FitScope::FullSample).unwrap();
        let keys: Vec<QIndex> = set.q_indices().copied().collect();
        assert_eq!(keys.len(), 6);
        // within each chain, stage m is fitted after m + 1
        for w in set.fit_order.windows(2) {
            if (w[0].j, w[0].k) == (w[1].j, w[1].k) {
                assert_eq!(w[1].m + 1, w[0].m);
            }
        }
        for m in 0..=2 {
            for &v in &set.cumulative().g[m] {
                assert!(v >= 0.01_f64.powi(m as i32) && v <= 1.0);
            }
        }
        assert_eq!(set.q_values(1, 1, 2).unwrap(), data.outcome(1));
        assert!(matches!(set.q_values(2, 1, 1), Err(Error::MissingNuisance { .. })));
        let json = serde_json::to_value(set.summary()).unwrap();
        assert_eq!(json["propensity_models"].as_array().unwrap().len(), 2);

        let half: Vec<usize> = (0..100).collect();
        let sub = fit_nuisance_set(&data, &regime, &schedule, 2, &learners, &half, 0.01, &PropensityOptions::default(), 3, FitScope::Fold { repetition: 0, fold: 0 }).unwrap();
        assert_ne!(sub.q_values(2, 2, 1).unwrap(), set.q_values(2, 2, 1).unwrap());
    }

    #[test]
    fn early_stages_use_no_outcome_history() {
        let data = random_panel(50, 2);
        let schedule = AdjustmentSchedule::full(&data);
        let d1 = design_matrix(&data, &schedule, 1).unwrap();
        assert!(d1.columns.iter().all(|c| c.kind != ColumnKind::Outcome));
    }

    #[test]
    fn pooled_propensity_embedding() {
        let data = random_panel(300, 4);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let learners = NuisanceLearners { outcome: LearnerSpec::linear(), propensity: LearnerSpec::logistic() };
        let units = all_units(&data);
        for lag_window in [None, Some(1)] {
            let options = PropensityOptions { pooled: true, lag_window };
            let set = fit_nuisance_set(&data, &regime, &schedule, 2, &learners, &units, 0.01, &options, 0, FitScope::FullSample).unwrap();
            let model = set.pooled_model().expect("pooled model");
            let period = model.input_width() - 1;
            assert!(period >= 1);
            for m in 1..=2 {
                assert!(matches!(set.propensity(m).model, PropensityModel::Pooled));
                assert!(set.propensity(m).predictions.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
        // lag window 0 keeps only contemporaneous covariates: one column plus period
        let layout = PooledLayout::new(&data, &schedule, 2, Some(0));
        assert_eq!(layout.columns.len(), 2);
    }

    #[test]
    fn failures_are_aggregated() {
        let data = panel(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[vec![0.0; 2], vec![1.0; 2]], &[vec![0, 0], vec![1, 1]]);
        let regime = Regime::constant(0, &data).unwrap();
        let schedule = AdjustmentSchedule::full(&data);
        let learners = NuisanceLearners { outcome: LearnerSpec::mean(), propensity: LearnerSpec::new(LearnerKind::Logistic) };
        let err = fit_nuisance_set(&data, &regime, &schedule, 1, &learners, &[0, 1], 0.01, &PropensityOptions::default(), 0, FitScope::FullSample).unwrap_err();
        match err {
            Error::Nuisance(list) => assert_eq!(list.len(), 2, "{list:?}"),
            other => panic!("unexpected {other}"),
        }
    }
}
