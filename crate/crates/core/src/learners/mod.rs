//! Regression and classification learners used for nuisance estimation.
//!
//! A [`LearnerSpec`] is a declarative, serializable description. [`fit`]
//! turns it into an immutable [`FittedModel`] that predicts on new designs.

pub mod features;
pub mod linear;
pub mod logistic;
pub mod simplex;
pub mod stratified;
pub mod tree;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::folds::{assign_folds, split};

pub use features::{FeatureMap, Transform};

use linear::{LinearFit, Standardized};
use logistic::LogisticFit;
use stratified::StratumMeans;
use tree::Tree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Mean,
    Linear,
    Ridge,
    ElasticNet,
    Logistic,
    LogisticElasticNet,
    Tree,
    BaggedTrees,
    /// Mean of the target within each distinct feature row (saturated model).
    StratifiedMean,
    Stack,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_depth() -> usize {
    4
}
fn default_min_leaf() -> usize {
    5
}
fn default_bags() -> usize {
    20
}
fn default_folds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Fixed penalty. When absent, penalized kinds choose it by cross-validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default = "default_bags")]
    pub n_bags: usize,
    /// Cross-validation folds for stacking and penalty selection.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<LearnerSpec>,
    #[serde(default)]
    pub feature_map: FeatureMap,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        Self {
            kind,
            lambda: None,
            alpha: default_alpha(),
            max_depth: default_depth(),
            min_leaf: default_min_leaf(),
            n_bags: default_bags(),
            folds: default_folds(),
            members: Vec::new(),
            feature_map: FeatureMap::Identity,
        }
    }

    pub fn mean() -> Self {
        Self::new(LearnerKind::Mean)
    }
    pub fn linear() -> Self {
        Self::new(LearnerKind::Linear)
    }
    pub fn logistic() -> Self {
        Self::new(LearnerKind::Logistic)
    }
    pub fn stratified_mean() -> Self {
        Self::new(LearnerKind::StratifiedMean)
    }

    pub fn stack(members: Vec<LearnerSpec>, folds: usize) -> Self {
        Self { members, folds, ..Self::new(LearnerKind::Stack) }
    }

    pub fn with_feature_map(mut self, map: FeatureMap) -> Self {
        self.feature_map = map;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_folds(mut self, folds: usize) -> Self {
        self.folds = folds;
        self
    }

    pub fn with_trees(mut self, max_depth: usize, min_leaf: usize, n_bags: usize) -> Self {
        self.max_depth = max_depth;
        self.min_leaf = min_leaf;
        self.n_bags = n_bags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::LearnerSpec(msg));
        if self.folds < 2 {
            return bad(format!("fold count must be at least 2, got {}", self.folds));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("penalty must be a finite non-negative number, got {l}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("mixing parameter must lie in [0, 1], got {}", self.alpha));
        }
        if self.min_leaf == 0 {
            return bad("minimum leaf size must be positive".into());
        }
        if self.kind == LearnerKind::BaggedTrees && self.n_bags == 0 {
            return bad("number of bags must be positive".into());
        }
        if let FeatureMap::Polynomial { degree } = self.feature_map {
            if degree == 0 {
                return bad("polynomial degree must be positive".into());
            }
        }
        if self.kind == LearnerKind::Stack {
            if self.members.is_empty() {
                return bad("stack needs at least one member".into());
            }
            for m in &self.members {
                if m.kind == LearnerKind::Stack {
                    return bad("stack members cannot themselves be stacks".into());
                }
                m.validate()?;
            }
        } else if !self.members.is_empty() {
            return bad(format!("{:?} takes no members", self.kind));
        }
        Ok(())
    }

    /// Short human-readable description.
    pub fn describe(&self) -> String {
        let kind = serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let map = match &self.feature_map {
            FeatureMap::Identity => String::new(),
            FeatureMap::Polynomial { degree } => format!("[poly{degree}]"),
            FeatureMap::Custom { transforms } => format!("[custom:{}]", transforms.len()),
        };
        if self.kind == LearnerKind::Stack {
            let members: Vec<String> = self.members.iter().map(LearnerSpec::describe).collect();
            format!("stack({})", members.join(","))
        } else {
            format!("{kind}{map}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    #[default]
    Real,
    /// Predictions are clamped to `[0, 1]`.
    Probability,
}

#[derive(Debug, Clone)]
enum Params {
    Constant(f64),
    Linear(LinearFit),
    Logistic(LogisticFit),
    Tree(Tree),
    Bagged(Vec<Tree>),
    Strata(StratumMeans),
    Stack { members: Vec<FittedModel>, weights: Vec<f64> },
}

/// Fit-time facts worth reporting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub learner: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub stack_weights: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cv_risk: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    spec: LearnerSpec,
    mode: PredictionMode,
    input_width: usize,
    feature_width: usize,
    params: Params,
    provenance: Provenance,
}

impl FittedModel {
    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// Stack weights, when this is a stack.
    pub fn stack_weights(&self) -> Option<&[f64]> {
        match &self.params {
            Params::Stack { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn linear_fit(&self) -> Option<&LinearFit> {
        match &self.params {
            Params::Linear(f) => Some(f),
            _ => None,
        }
    }

    pub fn logistic_fit(&self) -> Option<&LogisticFit> {
        match &self.params {
            Params::Logistic(f) => Some(f),
            _ => None,
        }
    }

    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        if x.ncols() != self.input_width {
            return Err(Error::DimensionMismatch { expected: self.input_width, actual: x.ncols() });
        }
        let raw = match &self.params {
            Params::Stack { members, weights } => {
                let mut out = vec![0.0; x.nrows()];
                for (m, &wt) in members.iter().zip(weights) {
                    if wt == 0.0 {
                        continue;
                    }
                    for (o, p) in out.iter_mut().zip(m.predict(x)?) {
                        *o += wt * p;
                    }
                }
                out
            }
            params => {
                let (z, _) = self.spec.feature_map.expand(x);
                if z.ncols() != self.feature_width {
                    return Err(Error::DimensionMismatch { expected: self.feature_width, actual: z.ncols() });
                }
                predict_params(params, &z)
            }
        };
        Ok(match self.mode {
            PredictionMode::Real => raw,
            PredictionMode::Probability => raw.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }
}

fn predict_params(params: &Params, z: &DMatrix<f64>) -> Vec<f64> {
    match params {
        Params::Constant(c) => vec![*c; z.nrows()],
        Params::Linear(f) => f.predict(z),
        Params::Logistic(f) => f.predict(z),
        Params::Tree(t) => t.predict(z),
        Params::Bagged(trees) => {
            let mut out = vec![0.0; z.nrows()];
            for t in trees {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += t.predict_row(z, i);
                }
            }
            let b = trees.len() as f64;
            out.iter_mut().for_each(|o| *o /= b);
            out
        }
        Params::Strata(s) => s.predict(z),
        Params::Stack { .. } => unreachable!("stacks predict through their members"),
    }
}

fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: w.len() });
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Learner("weights must be finite and non-negative".into()));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyData);
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

fn subset(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

fn select(z: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    z.select_rows(rows.iter())
}

/// Weighted mean squared error; `w` need not be normalized.
pub fn weighted_risk(pred: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let sse: f64 = (0..y.len()).map(|i| w[i] * (y[i] - pred[i]).powi(2)).sum();
    sse / total
}

/// Effective fold count for `n` rows, or `None` if cross-validation is impossible.
fn cv_folds(requested: usize, n: usize) -> Option<usize> {
    let v = requested.min(n);
    (v >= 2).then_some(v)
}

/// Index of the grid value with the smallest cross-validated risk.
/// `fold_path` returns validation predictions for every grid value.
fn select_lambda<F>(grid: &[f64], n: usize, folds: usize, seed: u64, y: &[f64], w: &[f64], fold_path: F) -> usize
where
    F: Fn(&[usize], &[usize]) -> Vec<Vec<f64>>,
{
    let Some(v) = cv_folds(folds, n) else {
        return grid.len() - 1;
    };
    let labels = assign_folds(n, v, seed);
    let mut sse = vec![0.0; grid.len()];
    for (train, valid) in split(&labels, v) {
        let preds = fold_path(&train, &valid);
        for (g, p) in preds.iter().enumerate() {
            sse[g] += valid.iter().zip(p).map(|(&i, p)| w[i] * (y[i] - p).powi(2)).sum::<f64>();
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if sse[g] < sse[best] {
            best = g;
        }
    }
    best
}

fn ridge_grid() -> Vec<f64> {
    let n = linear::LAMBDA_GRID_SIZE;
    (0..n).map(|i| 1e2 * 1e-6_f64.powf(i as f64 / (n - 1) as f64)).collect()
}

/// Candidate penalties for a penalized learner without a fixed penalty.
fn penalty_grid(spec: &LearnerSpec, z: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Option<Vec<f64>> {
    if spec.lambda.is_some() {
        return None;
    }
    match spec.kind {
        LearnerKind::Ridge => Some(ridge_grid()),
        LearnerKind::ElasticNet => Some(linear::lambda_grid(Standardized::new(z, y, w).lambda_max(spec.alpha))),
        LearnerKind::LogisticElasticNet => Some(linear::lambda_grid(logistic::logistic_lambda_max(z, y, w, spec.alpha))),
        _ => None,
    }
}

fn alpha_of(spec: &LearnerSpec) -> f64 {
    if spec.kind == LearnerKind::Ridge {
        0.0
    } else {
        spec.alpha
    }
}

/// Fits the whole penalty path on the training rows and predicts the
/// validation rows at every grid value.
fn path_predictions(spec: &LearnerSpec, z: &DMatrix<f64>, y: &[f64], w: &[f64], train: &[usize], valid: &[usize], grid: &[f64]) -> Vec<Vec<f64>> {
    let wt = subset(w, train);
    let total: f64 = wt.iter().sum();
    let wt: Vec<f64> = wt.iter().map(|v| v / total.max(f64::MIN_POSITIVE)).collect();
    let zt = select(z, train);
    let yt = subset(y, train);
    let zv = select(z, valid);
    if spec.kind == LearnerKind::LogisticElasticNet {
        logistic::logistic_elastic_net_path(&zt, &yt, &wt, grid, spec.alpha).iter().map(|f| f.predict(&zv)).collect()
    } else {
        let prep = Standardized::new(&zt, &yt, &wt);
        linear::penalized_path(&prep, grid, alpha_of(spec))
            .into_iter()
            .map(|(b0, coef)| LinearFit { intercept: b0, coef, min_norm: false }.predict(&zv))
            .collect()
    }
}

fn penalized_linear(spec: &LearnerSpec, z: &DMatrix<f64>, y: &[f64], w: &[f64], seed: u64, alpha: f64) -> (LinearFit, f64) {
    if let Some(lambda) = spec.lambda {
        return (linear::penalized(z, y, w, lambda, alpha), lambda);
    }
    let prep = Standardized::new(z, y, w);
    let grid = penalty_grid(spec, z, y, w).expect("penalized kind");
    let best = select_lambda(&grid, y.len(), spec.folds, derive_seed(seed, &[0x1A]), y, w, |train, valid| {
        path_predictions(spec, z, y, w, train, valid, &grid)
    });
    let path = linear::penalized_path(&prep, &grid[..=best], alpha);
    let (intercept, coef) = path.into_iter().last().expect("non-empty path");
    (LinearFit { intercept, coef, min_norm: false }, grid[best])
}

fn penalized_logistic(spec: &LearnerSpec, z: &DMatrix<f64>, y: &[f64], w: &[f64], seed: u64) -> (LogisticFit, f64) {
    let alpha = spec.alpha;
    if let Some(lambda) = spec.lambda {
        let fit = logistic::logistic_elastic_net_path(z, y, w, &[lambda], alpha).pop().expect("one fit");
        return (fit, lambda);
    }
    let grid = penalty_grid(spec, z, y, w).expect("penalized kind");
    let best = select_lambda(&grid, y.len(), spec.folds, derive_seed(seed, &[0x1B]), y, w, |train, valid| {
        path_predictions(spec, z, y, w, train, valid, &grid)
    });
    let fit = logistic::logistic_elastic_net_path(z, y, w, &grid[..=best], alpha).pop().expect("non-empty path");
    (fit, grid[best])
}

/// Fits a non-stack learner on expanded features with normalized weights.
fn fit_base(spec: &LearnerSpec, z: &DMatrix<f64>, y: &[f64], w: &[f64], seed: u64) -> Result<(Params, Provenance)> {
    let mut prov = Provenance { learner: spec.describe(), ..Provenance::default() };
    let params = match spec.kind {
        LearnerKind::Mean => Params::Constant(y.iter().zip(w).map(|(y, w)| y * w).sum()),
        LearnerKind::Linear => {
            let fit = linear::least_squares(z, y, w);
            if fit.min_norm {
                prov.flags.push("rank_deficient_min_norm".into());
            }
            Params::Linear(fit)
        }
        LearnerKind::Ridge => {
            let (fit, lambda) = penalized_linear(spec, z, y, w, seed, 0.0);
            prov.lambda = Some(lambda);
            Params::Linear(fit)
        }
        LearnerKind::ElasticNet => {
            let (fit, lambda) = penalized_linear(spec, z, y, w, seed, spec.alpha);
            prov.lambda = Some(lambda);
            Params::Linear(fit)
        }
        LearnerKind::Logistic => {
            check_unit_interval(y)?;
            let fit = logistic::logistic(z, y, w);
            if fit.ridge_fallback {
                prov.flags.push("ridge_fallback".into());
            }
            Params::Logistic(fit)
        }
        LearnerKind::LogisticElasticNet => {
            check_unit_interval(y)?;
            let (fit, lambda) = penalized_logistic(spec, z, y, w, seed);
            prov.lambda = Some(lambda);
            Params::Logistic(fit)
        }
        LearnerKind::Tree => Params::Tree(Tree::fit(z, y, w, spec.max_depth, spec.min_leaf)),
        LearnerKind::BaggedTrees => Params::Bagged(tree::bagged(z, y, w, spec.max_depth, spec.min_leaf, spec.n_bags, seed)),
        LearnerKind::StratifiedMean => Params::Strata(StratumMeans::fit(z, y, w)),
        LearnerKind::Stack => unreachable!("stacks are fitted by fit_stack"),
    };
    Ok((params, prov))
}

fn check_unit_interval(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Learner("logistic targets must lie in [0, 1]".into()))
    }
}

/// Fits `spec` to `(x, y)` with optional non-negative weights.
pub fn fit(
    spec: &LearnerSpec,
    x: &DesignMatrix,
    y: &[f64],
    weights: Option<&[f64]>,
    seed: u64,
    mode: PredictionMode,
) -> Result<FittedModel> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 || y.is_empty() {
        return Err(Error::EmptyData);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: y.len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Learner("target contains non-finite values".into()));
    }
    let w = normalized_weights(n, weights)?;
    fit_normalized(spec, x, y, &w, seed, mode)
}

fn fit_normalized(spec: &LearnerSpec, x: &DesignMatrix, y: &[f64], w: &[f64], seed: u64, mode: PredictionMode) -> Result<FittedModel> {
    if spec.kind == LearnerKind::Stack {
        return fit_stack(spec, x, y, w, seed, mode);
    }
    let (z, _) = spec.feature_map.expand(x);
    let (params, provenance) = fit_base(spec, &z, y, w, seed)?;
    Ok(FittedModel { spec: spec.clone(), mode, input_width: x.ncols(), feature_width: z.ncols(), params, provenance })
}

/// Cross-validated stacking result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    /// One weight per member in the input order; dropped members get 0.
    pub weights: Vec<f64>,
    /// Cross-validated risk per member (`None` if the member failed).
    pub member_risk: Vec<Option<f64>>,
    pub stack_risk: f64,
    pub dropped: Vec<usize>,
    /// Penalty chosen on the stacking folds, for penalized members without a fixed one.
    pub lambdas: Vec<Option<f64>>,
}

/// V-fold cross-validated weights on the simplex minimizing squared error
/// of the combined out-of-fold predictions.
pub fn cv_stack_weights(
    members: &[LearnerSpec],
    x: &DesignMatrix,
    y: &[f64],
    weights: Option<&[f64]>,
    folds: usize,
    seed: u64,
    mode: PredictionMode,
) -> Result<StackWeights> {
    let n = x.nrows();
    if folds < 2 {
        return Err(Error::LearnerSpec(format!("fold count must be at least 2, got {folds}")));
    }
    if n < folds {
        return Err(Error::FoldTooSmall(format!("{n} rows for {folds}-fold stacking")));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: y.len() });
    }
    let w = normalized_weights(n, weights)?;
    let labels = assign_folds(n, folds, derive_seed(seed, &[0x57AC]));
    let splits = split(&labels, folds);
    let mut cv: Vec<Option<Vec<f64>>> = Vec::with_capacity(members.len());
    let mut lambdas: Vec<Option<f64>> = vec![None; members.len()];
    for (l, member) in members.iter().enumerate() {
        if check_member_target(member, y).is_ok() {
            let (z, _) = member.feature_map.expand(x);
            if let Some(grid) = penalty_grid(member, &z, y, &w) {
                let (pred, lambda) = penalized_member_cv(member, &z, y, &w, &splits, &grid, mode);
                lambdas[l] = Some(lambda);
                cv.push(Some(pred));
                continue;
            }
        }
        let mut pred = vec![0.0; n];
        let mut failure: Option<String> = None;
        for (f, (train, valid)) in splits.iter().enumerate() {
            let xt = x.select_rows(train);
            let result = fit(member, &xt, &subset(y, train), Some(&subset(&w, train)), derive_seed(seed, &[f as u64, l as u64]), mode)
                .and_then(|m| m.predict(&x.select_rows(valid)));
            match result {
                Ok(p) if p.iter().all(|v| v.is_finite()) => {
                    for (&i, v) in valid.iter().zip(p) {
                        pred[i] = v;
                    }
                }
                Ok(_) => failure = Some("non-finite predictions".into()),
                Err(e) => failure = Some(e.to_string()),
            }
            if failure.is_some() {
                break;
            }
        }
        match failure {
            None => cv.push(Some(pred)),
            Some(reason) => {
                log::warn!("stack member {} dropped: {reason}", member.describe());
                cv.push(None);
            }
        }
    }
    let kept: Vec<usize> = (0..members.len()).filter(|&l| cv[l].is_some()).collect();
    if kept.is_empty() {
        return Err(Error::Learner("every stack member failed".into()));
    }
    let z = DMatrix::from_fn(n, kept.len(), |i, c| cv[kept[c]].as_ref().expect("kept")[i]);
    let b = simplex::simplex_least_squares(&z, y, &w);
    let mut weights = vec![0.0; members.len()];
    for (c, &l) in kept.iter().enumerate() {
        weights[l] = b[c];
    }
    let combined: Vec<f64> = (0..n).map(|i| (0..kept.len()).map(|c| z[(i, c)] * b[c]).sum()).collect();
    let member_risk = cv.iter().map(|p| p.as_ref().map(|p| weighted_risk(p, y, &w))).collect();
    Ok(StackWeights {
        weights,
        member_risk,
        stack_risk: weighted_risk(&combined, y, &w),
        dropped: (0..members.len()).filter(|l| !kept.contains(l)).collect(),
        lambdas,
    })
}

fn check_member_target(member: &LearnerSpec, y: &[f64]) -> Result<()> {
    if member.kind == LearnerKind::LogisticElasticNet {
        check_unit_interval(y)?;
    }
    Ok(())
}

/// Out-of-fold predictions of a penalized member along `grid` on the
/// stacking folds. Returns the predictions at the penalty with the smallest
/// out-of-fold risk (ties go to the larger penalty) and that penalty.
fn penalized_member_cv(
    member: &LearnerSpec,
    z: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    splits: &[(Vec<usize>, Vec<usize>)],
    grid: &[f64],
    mode: PredictionMode,
) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut preds = vec![vec![0.0; n]; grid.len()];
    for (train, valid) in splits {
        for (g, p) in path_predictions(member, z, y, w, train, valid, grid).into_iter().enumerate() {
            for (&i, v) in valid.iter().zip(p) {
                preds[g][i] = match mode {
                    PredictionMode::Real => v,
                    PredictionMode::Probability => v.clamp(0.0, 1.0),
                };
            }
        }
    }
    let risk: Vec<f64> = preds.iter().map(|p| if p.iter().all(|v| v.is_finite()) { weighted_risk(p, y, w) } else { f64::INFINITY }).collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if risk[g] < risk[best] {
            best = g;
        }
    }
    (preds.swap_remove(best), grid[best])
}

fn fit_stack(spec: &LearnerSpec, x: &DesignMatrix, y: &[f64], w: &[f64], seed: u64, mode: PredictionMode) -> Result<FittedModel> {
    let n = x.nrows();
    let folds = spec.folds.min(n);
    let sw = if folds >= 2 {
        cv_stack_weights(&spec.members, x, y, Some(w), folds, seed, mode)?
    } else {
        // too few rows to cross-validate: fall back to the first member
        let mut weights = vec![0.0; spec.members.len()];
        weights[0] = 1.0;
        let m = spec.members.len();
        StackWeights { weights, member_risk: vec![None; m], stack_risk: f64::NAN, dropped: Vec::new(), lambdas: vec![None; m] }
    };
    let mut members = Vec::new();
    let mut kept_weights = Vec::new();
    let mut prov = Provenance { learner: spec.describe(), ..Provenance::default() };
    for (l, member) in spec.members.iter().enumerate() {
        if sw.dropped.contains(&l) {
            prov.flags.push(format!("dropped:{}", member.describe()));
            continue;
        }
        prov.stack_weights.push((member.describe(), sw.weights[l]));
        if sw.weights[l] == 0.0 {
            continue;
        }
        let member = match sw.lambdas[l] {
            Some(lambda) => member.clone().with_lambda(lambda),
            None => member.clone(),
        };
        members.push(fit_normalized(&member, x, y, w, derive_seed(seed, &[u64::MAX, l as u64]), mode)?);
        kept_weights.push(sw.weights[l]);
    }
    if sw.stack_risk.is_finite() {
        prov.cv_risk = Some(sw.stack_risk);
    }
    Ok(FittedModel {
        spec: spec.clone(),
        mode,
        input_width: x.ncols(),
        feature_width: x.ncols(),
        params: Params::Stack { members, weights: kept_weights },
        provenance: prov,
    })
}
