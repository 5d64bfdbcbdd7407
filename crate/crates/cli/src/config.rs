//! Run configuration: a JSON file whose fields are overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use didmean::bench::ConfigLabel;
use didmean::estimator::Method;
use didmean::learners::{LearnerKind, LearnerSpec};
use didmean::nuisance::{NuisanceLearners, PropensityOptions};
use didmean::panel::{AdjustmentSchedule, PanelDataset, Regime, Schema};
use serde::{Deserialize, Serialize};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 1;

/// Treatment regime: one code for every time, or a full trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegimeSpec {
    Constant(i64),
    Trajectory(Vec<i64>),
}

impl RegimeSpec {
    pub fn build(&self, data: &PanelDataset) -> didmean::Result<Regime> {
        match self {
            RegimeSpec::Constant(c) => Regime::constant(*c, data),
            RegimeSpec::Trajectory(t) => Regime::new(t.clone(), data),
        }
    }
}

/// Adjustment variables per step: `"full"` or its alias `"default"`
/// (covariates and outcome history), `"covariates"`, or explicit `name@time` labels per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdjustmentSpec {
    Named(String),
    Steps(Vec<Vec<String>>),
}

impl AdjustmentSpec {
    pub fn build(&self, data: &PanelDataset) -> anyhow::Result<AdjustmentSchedule> {
        match self {
            AdjustmentSpec::Named(name) if name == "full" || name == "default" => Ok(AdjustmentSchedule::full(data)),
            AdjustmentSpec::Named(name) if name == "covariates" => Ok(AdjustmentSchedule::covariates_only(data)),
            AdjustmentSpec::Named(name) => bail!("unknown adjustment `{name}` (expected full, covariates or a list of steps)"),
            AdjustmentSpec::Steps(steps) => Ok(AdjustmentSchedule::from_labels(steps, data)?),
        }
    }
}

/// Every setting a subcommand can take. Absent fields fall back to defaults;
/// the resolved configuration is what gets echoed into output metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Panel CSV; relative paths are taken from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Schema>,
    /// Column names may also sit at the top level; they take precedence
    /// over the nested `schema`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_col: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_col: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_col: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_col: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_cols: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjustment: Option<AdjustmentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learners: Option<NuisanceLearners>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<PropensityOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_stratum: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic_baseline: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<Vec<ConfigLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_draws: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(input) = &cfg.input {
            if input.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.input = Some(base.join(input));
            }
        }
        Ok(cfg)
    }

    /// Folds top-level column keys into the nested schema and returns it.
    pub fn take_schema(&mut self) -> Schema {
        let mut schema = self.schema.take().unwrap_or_else(|| Schema::with_covariates(Vec::<String>::new()));
        if let Some(c) = self.unit_col.take() {
            schema.unit_col = c;
        }
        if let Some(c) = self.time_col.take() {
            schema.time_col = c;
        }
        if let Some(c) = self.treatment_col.take() {
            schema.treatment_col = c;
        }
        if let Some(c) = self.outcome_col.take() {
            schema.outcome_col = c;
        }
        if let Some(c) = self.covariate_cols.take() {
            schema.covariate_cols = c;
        }
        schema
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Parses a learner given either as a kind name (`linear`, `bagged_trees`, ...)
/// or as an inline JSON object.
pub fn parse_learner(text: &str) -> anyhow::Result<LearnerSpec> {
    let text = text.trim();
    let spec = if text.starts_with('{') {
        serde_json::from_str(text).with_context(|| format!("invalid learner JSON `{text}`"))?
    } else {
        let kind: LearnerKind = serde_json::from_value(serde_json::Value::String(text.to_string()))
            .map_err(|_| anyhow::anyhow!("unknown learner `{text}`"))?;
        LearnerSpec::new(kind)
    };
    Ok(spec)
}

/// Parses `0` or `0,0,1` into a regime.
pub fn parse_regime(text: &str) -> anyhow::Result<RegimeSpec> {
    let codes = parse_list::<i64>(text).context("regime must be an integer or a comma-separated list of integers")?;
    Ok(if codes.len() == 1 { RegimeSpec::Constant(codes[0]) } else { RegimeSpec::Trajectory(codes) })
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("cannot parse `{}`: {e}", s.trim())))
        .collect()
}

/// Fills an empty covariate list with every column not otherwise mapped.
pub fn infer_covariates(path: &Path, schema: &mut Schema) -> anyhow::Result<()> {
    if !schema.covariate_cols.is_empty() {
        return Ok(());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let taken = [&schema.unit_col, &schema.time_col, &schema.treatment_col, &schema.outcome_col];
    schema.covariate_cols = rdr
        .headers()
        .with_context(|| format!("cannot read header of {}", path.display()))?
        .iter()
        .filter(|h| !taken.iter().any(|t| t.as_str() == *h))
        .map(String::from)
        .collect();
    Ok(())
}

pub fn default_learners() -> NuisanceLearners {
    NuisanceLearners { outcome: LearnerSpec::linear(), propensity: LearnerSpec::logistic() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learner_shorthand_and_json() {
        assert_eq!(parse_learner("ridge").unwrap().kind, LearnerKind::Ridge);
        let s = parse_learner(r#"{"kind": "elastic_net", "alpha": 0.25}"#).unwrap();
        assert_eq!(s.alpha, 0.25);
        assert!(parse_learner("forest").is_err());
    }

    #[test]
    fn regimes() {
        assert_eq!(parse_regime("1").unwrap(), RegimeSpec::Constant(1));
        assert_eq!(parse_regime("0, 0,1").unwrap(), RegimeSpec::Trajectory(vec![0, 0, 1]));
        assert!(parse_regime("a").is_err());
    }

    #[test]
    fn unknown_config_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "regime": [0, 0], "adjustment": "covariates"}"#).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.adjustment, Some(AdjustmentSpec::Named("covariates".into())));
    }

    #[test]
    fn top_level_columns_override_nested_schema() {
        let mut cfg: RunConfig = serde_json::from_str(
            r#"{"schema": {"outcome_col": "a", "time_col": "t"}, "outcome_col": "b", "covariate_cols": ["w"]}"#,
        )
        .unwrap();
        let schema = cfg.take_schema();
        assert_eq!(schema.outcome_col, "b");
        assert_eq!(schema.time_col, "t");
        assert_eq!(schema.covariate_cols, vec!["w".to_string()]);
        assert!(cfg.outcome_col.is_none() && cfg.schema.is_none());
    }
}
