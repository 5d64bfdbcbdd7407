//! Balanced unit-by-time panels, counterfactual regimes, adjustment-set
//! schedules and regime-compliance indicators.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{ColumnInfo, ColumnKind, DesignMatrix};
use crate::error::{CellLabel, Error, Result};

/// Column mapping for panel CSV files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_unit_col")]
    pub unit_col: String,
    #[serde(default = "default_time_col")]
    pub time_col: String,
    #[serde(default = "default_treatment_col")]
    pub treatment_col: String,
    #[serde(default = "default_outcome_col")]
    pub outcome_col: String,
    #[serde(default)]
    pub covariate_cols: Vec<String>,
}

fn default_unit_col() -> String {
    "unit".into()
}
fn default_time_col() -> String {
    "time".into()
}
fn default_treatment_col() -> String {
    "treatment".into()
}
fn default_outcome_col() -> String {
    "outcome".into()
}

impl Schema {
    pub fn with_covariates<S: Into<String>>(covariates: impl IntoIterator<Item = S>) -> Self {
        Schema {
            unit_col: default_unit_col(),
            time_col: default_time_col(),
            treatment_col: default_treatment_col(),
            outcome_col: default_outcome_col(),
            covariate_cols: covariates.into_iter().map(Into::into).collect(),
        }
    }
}

/// A balanced panel of `n` units observed at times `0..=tau`.
///
/// Storage is time-major: `treatment[t][i]`, `outcome[t][i]` and
/// `covariates[t]` is an `n x p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
    covariate_names: Vec<String>,
    outcome_name: String,
    treatment: Vec<Vec<i64>>,
    outcome: Vec<Vec<f64>>,
    covariates: Vec<DMatrix<f64>>,
    alphabet: Vec<i64>,
}

impl PanelDataset {
    pub fn new(
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
        covariate_names: Vec<String>,
        treatment: Vec<Vec<i64>>,
        outcome: Vec<Vec<f64>>,
        covariates: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = unit_labels.len();
        let times = time_labels.len();
        if n == 0 {
            return Err(Error::Invariant("panel has no units".into()));
        }
        if times == 0 {
            return Err(Error::Invariant("panel has no time points".into()));
        }
        if treatment.len() != times || outcome.len() != times || covariates.len() != times {
            return Err(Error::Invariant("treatment, outcome and covariates must cover every time point".into()));
        }
        let p = covariate_names.len();
        for t in 0..times {
            if treatment[t].len() != n || outcome[t].len() != n {
                return Err(Error::Invariant(format!("time {t} does not have {n} records")));
            }
            if covariates[t].nrows() != n || covariates[t].ncols() != p {
                return Err(Error::Invariant(format!(
                    "covariates at time {t} are {}x{}, expected {n}x{p}",
                    covariates[t].nrows(),
                    covariates[t].ncols()
                )));
            }
            if outcome[t].iter().chain(covariates[t].iter()).any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("non-finite value at time {t}")));
            }
        }
        let alphabet: BTreeSet<i64> = treatment.iter().flatten().copied().collect();
        Ok(Self {
            unit_labels,
            time_labels,
            covariate_names,
            outcome_name: "y".into(),
            treatment,
            outcome,
            covariates,
            alphabet: alphabet.into_iter().collect(),
        })
    }

    /// Adds codes to the treatment alphabet that need not appear in the data.
    pub fn with_alphabet(mut self, codes: &[i64]) -> Self {
        let mut all: BTreeSet<i64> = self.alphabet.iter().copied().collect();
        all.extend(codes);
        self.alphabet = all.into_iter().collect();
        self
    }

    pub fn with_outcome_name(mut self, name: impl Into<String>) -> Self {
        self.outcome_name = name.into();
        self
    }

    pub fn n_units(&self) -> usize {
        self.unit_labels.len()
    }

    /// Last time index, `tau`.
    pub fn horizon(&self) -> usize {
        self.time_labels.len() - 1
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn alphabet(&self) -> &[i64] {
        &self.alphabet
    }

    pub fn treatment(&self, t: usize) -> &[i64] {
        &self.treatment[t]
    }

    pub fn outcome(&self, t: usize) -> &[f64] {
        &self.outcome[t]
    }

    pub fn covariates(&self, t: usize) -> &DMatrix<f64> {
        &self.covariates[t]
    }

    pub fn covariate(&self, t: usize, index: usize, unit: usize) -> f64 {
        self.covariates[t][(unit, index)]
    }

    /// Mean outcome at time `t` over all units.
    pub fn outcome_mean(&self, t: usize) -> f64 {
        self.outcome[t].iter().sum::<f64>() / self.n_units() as f64
    }

    /// Restriction to a subset of units, in the given order.
    pub fn select_units(&self, units: &[usize]) -> PanelDataset {
        let pick = |v: &Vec<f64>| units.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PanelDataset {
            unit_labels: units.iter().map(|&i| self.unit_labels[i].clone()).collect(),
            time_labels: self.time_labels.clone(),
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
            treatment: self.treatment.iter().map(|a| units.iter().map(|&i| a[i]).collect()).collect(),
            outcome: self.outcome.iter().map(pick).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|x| DMatrix::from_fn(units.len(), x.ncols(), |r, c| x[(units[r], c)]))
                .collect(),
            alphabet: self.alphabet.clone(),
        }
    }

    /// Returns a copy with every outcome transformed by `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> PanelDataset {
        let mut out = self.clone();
        for y in &mut out.outcome {
            for v in y.iter_mut() {
                *v = f(*v);
            }
        }
        out
    }
}

struct ColumnIndex {
    unit: usize,
    time: usize,
    treatment: usize,
    outcome: usize,
    covariates: Vec<usize>,
}

fn column_index(headers: &csv::StringRecord, schema: &Schema) -> Result<ColumnIndex> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    Ok(ColumnIndex {
        unit: find(&schema.unit_col)?,
        time: find(&schema.time_col)?,
        treatment: find(&schema.treatment_col)?,
        outcome: find(&schema.outcome_col)?,
        covariates: schema.covariate_cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
    })
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    line: u64,
    expected: &'static str,
) -> Result<T> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<T>().map_err(|_| Error::Parse {
        line,
        column: column.to_string(),
        value: raw.to_string(),
        expected,
    })
}

fn parse_real(record: &csv::StringRecord, idx: usize, column: &str, line: u64) -> Result<f64> {
    let v: f64 = parse_field(record, idx, column, line, "a finite number")?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: column.to_string(),
            value: record.get(idx).unwrap_or("").to_string(),
            expected: "a finite number",
        });
    }
    Ok(v)
}

struct Row {
    treatment: i64,
    outcome: f64,
    covariates: Vec<f64>,
}

/// Reads a panel from CSV. Units are indexed in order of first appearance;
/// times are sorted and re-indexed to `0..=tau`.
pub fn read_panel<R: Read>(reader: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = column_index(&headers, schema)?;

    let mut unit_ids: HashMap<String, usize> = HashMap::new();
    let mut unit_labels: Vec<String> = Vec::new();
    let mut cells: HashMap<(usize, i64), Row> = HashMap::new();
    let mut times: BTreeSet<i64> = BTreeSet::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let unit = record.get(cols.unit).unwrap_or("").trim().to_string();
        if unit.is_empty() {
            return Err(Error::Parse {
                line,
                column: schema.unit_col.clone(),
                value: unit,
                expected: "a non-empty unit label",
            });
        }
        let time: i64 = parse_field(&record, cols.time, &schema.time_col, line, "an integer time")?;
        let treatment: i64 =
            parse_field(&record, cols.treatment, &schema.treatment_col, line, "an integer treatment code")?;
        let outcome = parse_real(&record, cols.outcome, &schema.outcome_col, line)?;
        let covariates = cols
            .covariates
            .iter()
            .zip(&schema.covariate_cols)
            .map(|(&idx, name)| parse_real(&record, idx, name, line))
            .collect::<Result<Vec<_>>>()?;

        let uid = *unit_ids.entry(unit.clone()).or_insert_with(|| {
            unit_labels.push(unit.clone());
            unit_labels.len() - 1
        });
        times.insert(time);
        if cells.insert((uid, time), Row { treatment, outcome, covariates }).is_some() {
            return Err(Error::Duplicate { cell: CellLabel { unit, time: time.to_string() }, line });
        }
    }
    if unit_labels.is_empty() {
        return Err(Error::Schema("panel file has no data rows".into()));
    }

    let times: Vec<i64> = times.into_iter().collect();
    let cells_ref = &cells;
    let missing: Vec<CellLabel> = unit_labels
        .iter()
        .enumerate()
        .flat_map(|(uid, label)| {
            times
                .iter()
                .filter(move |&&t| !cells_ref.contains_key(&(uid, t)))
                .map(move |t| CellLabel { unit: label.clone(), time: t.to_string() })
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Unbalanced { missing });
    }

    let n = unit_labels.len();
    let p = schema.covariate_cols.len();
    let mut treatment = Vec::with_capacity(times.len());
    let mut outcome = Vec::with_capacity(times.len());
    let mut covariates = Vec::with_capacity(times.len());
    for &t in &times {
        let rows: Vec<&Row> = (0..n).map(|i| &cells[&(i, t)]).collect();
        treatment.push(rows.iter().map(|r| r.treatment).collect());
        outcome.push(rows.iter().map(|r| r.outcome).collect());
        covariates.push(DMatrix::from_fn(n, p, |i, j| rows[i].covariates[j]));
    }
    Ok(PanelDataset::new(
        unit_labels,
        times.iter().map(ToString::to_string).collect(),
        schema.covariate_cols.clone(),
        treatment,
        outcome,
        covariates,
    )?
    .with_outcome_name(schema.outcome_col.clone()))
}

pub fn load_panel(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_panel(std::io::BufReader::new(file), schema)
}

/// Writes the panel in long format, one row per (unit, time), unit-major.
/// Reals use the shortest representation that round-trips exactly.
pub fn write_panel<W: Write>(data: &PanelDataset, writer: W, schema: &Schema) -> Result<()> {
    if schema.covariate_cols.len() != data.n_covariates() {
        return Err(Error::Schema(format!(
            "schema names {} covariates, panel has {}",
            schema.covariate_cols.len(),
            data.n_covariates()
        )));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.unit_col.clone(),
        schema.time_col.clone(),
        schema.treatment_col.clone(),
        schema.outcome_col.clone(),
    ];
    header.extend(schema.covariate_cols.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..data.n_units() {
        for t in 0..data.n_times() {
            let mut rec = vec![
                data.unit_labels[i].clone(),
                data.time_labels[t].clone(),
                data.treatment[t][i].to_string(),
                data.outcome[t][i].to_string(),
            ];
            rec.extend((0..data.n_covariates()).map(|j| data.covariates[t][(i, j)].to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Schema matching the panel's own variable names.
pub fn native_schema(data: &PanelDataset) -> Schema {
    Schema {
        outcome_col: data.outcome_name.clone(),
        ..Schema::with_covariates(data.covariate_names.iter().cloned())
    }
}

/// A single counterfactual treatment trajectory shared by all units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    trajectory: Vec<i64>,
}

impl Regime {
    pub fn new(trajectory: Vec<i64>, data: &PanelDataset) -> Result<Self> {
        if trajectory.len() != data.n_times() {
            return Err(Error::Invariant(format!(
                "regime has length {}, panel has {} time points",
                trajectory.len(),
                data.n_times()
            )));
        }
        if let Some(bad) = trajectory.iter().find(|a| !data.alphabet.contains(a)) {
            return Err(Error::Invariant(format!(
                "regime code {bad} is not in the treatment alphabet {:?}",
                data.alphabet
            )));
        }
        Ok(Self { trajectory })
    }

    /// The constant trajectory `(code, ..., code)`.
    pub fn constant(code: i64, data: &PanelDataset) -> Result<Self> {
        Self::new(vec![code; data.n_times()], data)
    }

    pub fn at(&self, t: usize) -> i64 {
        self.trajectory[t]
    }

    pub fn trajectory(&self) -> &[i64] {
        &self.trajectory
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaselineReport {
    pub n_units: usize,
    pub fraction_compliant: f64,
    pub violating_units: Vec<String>,
}

/// Checks the staggered-discontinuation requirement `A_0 = a*_0`.
pub fn check_baseline_regime(data: &PanelDataset, regime: &Regime) -> BaselineReport {
    let a0 = regime.at(0);
    let violating: Vec<String> = (0..data.n_units())
        .filter(|&i| data.treatment(0)[i] != a0)
        .map(|i| data.unit_labels[i].clone())
        .collect();
    BaselineReport {
        n_units: data.n_units(),
        fraction_compliant: 1.0 - violating.len() as f64 / data.n_units() as f64,
        violating_units: violating,
    }
}

/// Prefix-match indicators `I(A_bar_m = a*_bar_m)` for every unit and time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplianceProfile {
    follows: Vec<Vec<bool>>,
}

impl ComplianceProfile {
    pub fn follows(&self, unit: usize, m: usize) -> bool {
        self.follows[m][unit]
    }

    pub fn at(&self, m: usize) -> &[bool] {
        &self.follows[m]
    }

    pub fn indicator(&self, unit: usize, m: usize) -> f64 {
        if self.follows[m][unit] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self, m: usize) -> usize {
        self.follows[m].iter().filter(|&&b| b).count()
    }

    pub fn n_times(&self) -> usize {
        self.follows.len()
    }

    /// Units following the regime through time `m`.
    pub fn compliant_units(&self, m: usize) -> Vec<usize> {
        (0..self.follows[m].len()).filter(|&i| self.follows[m][i]).collect()
    }

    pub fn row(&self, unit: usize) -> Vec<bool> {
        self.follows.iter().map(|f| f[unit]).collect()
    }
}

pub fn compliance(data: &PanelDataset, regime: &Regime) -> ComplianceProfile {
    let n = data.n_units();
    let mut follows = Vec::with_capacity(data.n_times());
    let mut prev = vec![true; n];
    for t in 0..data.n_times() {
        let a = data.treatment(t);
        let cur: Vec<bool> = (0..n).map(|i| prev[i] && a[i] == regime.at(t)).collect();
        follows.push(cur.clone());
        prev = cur;
    }
    ComplianceProfile { follows }
}

/// One selectable variable of the observed history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Covariate { time: usize, index: usize },
    Outcome { time: usize },
}

impl Variable {
    pub fn time(&self) -> usize {
        match *self {
            Variable::Covariate { time, .. } | Variable::Outcome { time } => time,
        }
    }
}

/// Nested conditioning sets `W_bar_k`, `k = 1..=tau`, each drawn from
/// covariates up to `k` and outcomes up to `k - 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustmentSchedule {
    steps: Vec<Vec<Variable>>,
}

impl AdjustmentSchedule {
    /// `steps[k - 1]` is the selection for step `k`.
    pub fn new(steps: Vec<Vec<Variable>>, data: &PanelDataset) -> Result<Self> {
        if steps.len() != data.horizon() {
            return Err(Error::Invariant(format!(
                "schedule has {} steps, panel horizon is {}",
                steps.len(),
                data.horizon()
            )));
        }
        let schedule = Self { steps };
        for k in 1..=data.horizon() {
            schedule.validate_step(k, data)?;
        }
        Ok(schedule)
    }

    /// All of `X_bar_k` plus all of `Y_bar_{k-2}`.
    pub fn full(data: &PanelDataset) -> Self {
        let steps = (1..=data.horizon())
            .map(|k| {
                let mut sel: Vec<Variable> = (0..=k)
                    .flat_map(|time| (0..data.n_covariates()).map(move |index| Variable::Covariate { time, index }))
                    .collect();
                sel.extend((0..k.saturating_sub(1)).map(|time| Variable::Outcome { time }));
                sel
            })
            .collect();
        Self { steps }
    }

    /// All of `X_bar_k`, no outcome history.
    pub fn covariates_only(data: &PanelDataset) -> Self {
        let steps = (1..=data.horizon())
            .map(|k| {
                (0..=k)
                    .flat_map(|time| (0..data.n_covariates()).map(move |index| Variable::Covariate { time, index }))
                    .collect()
            })
            .collect();
        Self { steps }
    }

    /// Builds a schedule from `name@time` labels, where `name` is a
    /// covariate name or the outcome name.
    pub fn from_labels(steps: &[Vec<String>], data: &PanelDataset) -> Result<Self> {
        let parse = |label: &str| -> Result<Variable> {
            let (name, time) = label
                .rsplit_once('@')
                .ok_or_else(|| Error::Schema(format!("adjustment entry `{label}` is not of the form name@time")))?;
            let time: usize = time
                .parse()
                .map_err(|_| Error::Schema(format!("adjustment entry `{label}` has a bad time index")))?;
            if name == data.outcome_name() {
                Ok(Variable::Outcome { time })
            } else {
                let index = data
                    .covariate_names()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Schema(format!("adjustment entry `{label}` names an unknown variable")))?;
                Ok(Variable::Covariate { time, index })
            }
        };
        let steps = steps
            .iter()
            .map(|s| s.iter().map(|l| parse(l)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps, data)
    }

    pub fn step(&self, k: usize) -> &[Variable] {
        &self.steps[k - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    fn validate_step(&self, k: usize, data: &PanelDataset) -> Result<()> {
        if k == 0 || k > self.steps.len() {
            return Err(Error::Invariant(format!("step {k} outside 1..={}", self.steps.len())));
        }
        let sel = &self.steps[k - 1];
        let mut seen = HashSet::new();
        for v in sel {
            match *v {
                Variable::Covariate { time, index } => {
                    if time > k {
                        return Err(Error::Invariant(format!("step {k} selects future covariate at time {time}")));
                    }
                    if index >= data.n_covariates() {
                        return Err(Error::Invariant(format!("step {k} selects covariate index {index} out of range")));
                    }
                }
                Variable::Outcome { time } => {
                    if time + 2 > k {
                        return Err(Error::Invariant(format!(
                            "step {k} selects outcome at time {time}; only outcomes up to time k-2 are allowed"
                        )));
                    }
                }
            }
            if !seen.insert(*v) {
                return Err(Error::Invariant(format!("step {k} selects {v:?} twice")));
            }
        }
        if k >= 2 {
            let current: HashSet<&Variable> = sel.iter().collect();
            if let Some(v) = self.steps[k - 2].iter().find(|v| !current.contains(v)) {
                return Err(Error::Invariant(format!(
                    "schedule is not nested: {v:?} is selected at step {} but not at step {k}",
                    k - 1
                )));
            }
        }
        Ok(())
    }

    /// Column provenance for step `k`, in declared order.
    pub fn columns(&self, k: usize, data: &PanelDataset) -> Vec<ColumnInfo> {
        self.step(k)
            .iter()
            .map(|v| match *v {
                Variable::Covariate { time, index } => ColumnInfo {
                    name: data.covariate_names()[index].clone(),
                    time: Some(time),
                    kind: ColumnKind::Covariate,
                },
                Variable::Outcome { time } => ColumnInfo {
                    name: data.outcome_name().to_string(),
                    time: Some(time),
                    kind: ColumnKind::Outcome,
                },
            })
            .collect()
    }
}

/// Feature matrix for `W_bar_k`, one row per unit.
pub fn design_matrix(data: &PanelDataset, schedule: &AdjustmentSchedule, k: usize) -> Result<DesignMatrix> {
    if k == 0 || k > data.horizon() {
        return Err(Error::Invariant(format!("design step {k} outside 1..={}", data.horizon())));
    }
    schedule.validate_step(k, data)?;
    let sel = schedule.step(k);
    let n = data.n_units();
    let values = DMatrix::from_fn(n, sel.len(), |i, c| match sel[c] {
        Variable::Covariate { time, index } => data.covariate(time, index, i),
        Variable::Outcome { time } => data.outcome(time)[i],
    });
    Ok(DesignMatrix::new(values, schedule.columns(k, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize, tau: usize, p: usize, treat: impl Fn(usize, usize) -> i64) -> PanelDataset {
        let times = tau + 1;
        PanelDataset::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..times).map(|t| t.to_string()).collect(),
            (0..p).map(|j| format!("x{}", j + 1)).collect(),
            (0..times).map(|t| (0..n).map(|i| treat(i, t)).collect()).collect(),
            (0..times).map(|t| (0..n).map(|i| (i * 10 + t) as f64).collect()).collect(),
            (0..times).map(|t| DMatrix::from_fn(n, p, |i, j| (i + t * 100 + j * 1000) as f64)).collect(),
        )
        .unwrap()
        .with_alphabet(&[0, 1])
    }

    const CSV_3X3: &str = "unit,time,treatment,outcome,x1\n\
        1,0,0,1.0,0.5\n1,1,0,2.0,0.5\n1,2,1,3.0,0.5\n\
        2,0,0,1.5,0.1\n2,1,1,2.5,0.2\n2,2,0,3.5,0.3\n\
        3,0,0,0.5,1.0\n3,1,0,1.0,2.0\n3,2,0,1.5,3.0\n";

    #[test]
    fn loads_complete_csv() {
        let data = read_panel(CSV_3X3.as_bytes(), &Schema::with_covariates(["x1"])).unwrap();
        assert_eq!(data.n_units(), 3);
        assert_eq!(data.horizon(), 2);
        assert_eq!(data.treatment(1), &[0, 1, 0]);
        assert_eq!(data.outcome(2), &[3.0, 3.5, 1.5]);
        assert_eq!(data.covariate(2, 0, 2), 3.0);
    }

    #[test]
    fn reindexes_calendar_times() {
        let csv = "unit,time,treatment,outcome\nA,2014,0,1\nA,2013,0,2\nB,2013,0,3\nB,2014,1,4\n";
        let data = read_panel(csv.as_bytes(), &Schema::with_covariates(Vec::<String>::new())).unwrap();
        assert_eq!(data.time_labels(), &["2013".to_string(), "2014".to_string()]);
        assert_eq!(data.outcome(0), &[2.0, 3.0]);
        assert_eq!(data.unit_labels(), &["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn reports_missing_cells() {
        let csv: String = CSV_3X3.lines().filter(|l| !l.starts_with("2,1,")).map(|l| format!("{l}\n")).collect();
        let err = read_panel(csv.as_bytes(), &Schema::with_covariates(["x1"])).unwrap_err();
        match err {
            Error::Unbalanced { missing } => {
                assert_eq!(missing, vec![CellLabel { unit: "2".into(), time: "1".into() }]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn reports_parse_error_line() {
        let csv = CSV_3X3.replace("2,1,1,2.5,0.2", "2,1,1,abc,0.2");
        let err = read_panel(csv.as_bytes(), &Schema::with_covariates(["x1"])).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 6);
                assert_eq!(column, "outcome");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_missing_value() {
        let csv = CSV_3X3.replace("3,1,0,1.0,2.0", "3,1,0,1.0,");
        assert!(matches!(
            read_panel(csv.as_bytes(), &Schema::with_covariates(["x1"])),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn rejects_duplicates() {
        let csv = format!("{CSV_3X3}1,1,0,2.0,0.5\n");
        let err = read_panel(csv.as_bytes(), &Schema::with_covariates(["x1"])).unwrap_err();
        assert!(matches!(err, Error::Duplicate { .. }), "{err}");
    }

    #[test]
    fn missing_schema_column() {
        let err = read_panel(CSV_3X3.as_bytes(), &Schema::with_covariates(["x9"])).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn baseline_report() {
        let data = toy(10, 2, 1, |_, _| 0);
        let regime = Regime::constant(0, &data).unwrap();
        let r = check_baseline_regime(&data, &regime);
        assert_eq!(r.fraction_compliant, 1.0);
        assert!(r.violating_units.is_empty());

        let data = toy(10, 2, 1, |i, t| i64::from(i == 4 && t == 0));
        let r = check_baseline_regime(&data, &regime);
        assert!((r.fraction_compliant - 0.9).abs() < 1e-15);
        assert_eq!(r.violating_units, vec!["u4".to_string()]);
    }

    #[test]
    fn compliance_prefix() {
        // unit 1 deviates first at m = 2
        let data = toy(2, 4, 1, |i, t| i64::from(i == 1 && t == 2));
        let c = compliance(&data, &Regime::constant(0, &data).unwrap());
        assert_eq!(c.row(0), vec![true; 5]);
        assert_eq!(c.row(1), vec![true, true, false, false, false]);
    }

    #[test]
    fn regime_validation() {
        let data = toy(3, 2, 1, |_, _| 0);
        assert!(Regime::new(vec![0, 0], &data).is_err());
        assert!(Regime::new(vec![0, 0, 7], &data).is_err());
        assert!(Regime::new(vec![0, 1, 1], &data).is_ok());
    }

    #[test]
    fn design_column_counts() {
        let data = toy(4, 2, 2, |_, _| 0);
        let schedule = AdjustmentSchedule::covariates_only(&data);
        let x = design_matrix(&data, &schedule, 1).unwrap();
        assert_eq!(x.ncols(), 4);
        assert_eq!(x.labels(), vec!["x1@0", "x2@0", "x1@1", "x2@1"]);
        assert_eq!(x.values[(3, 3)], data.covariate(1, 1, 3));
        assert!(design_matrix(&data, &schedule, 0).is_err());
        assert!(design_matrix(&data, &schedule, 3).is_err());
    }

    #[test]
    fn outcome_history_rules() {
        let data = toy(4, 2, 1, |_, _| 0);
        let x1 = |t: usize| format!("x1@{t}");
        let ok = AdjustmentSchedule::from_labels(&[vec![x1(0)], vec![x1(0), "y@0".into()]], &data).unwrap();
        let d = design_matrix(&data, &ok, 2).unwrap();
        assert_eq!(d.labels(), vec!["x1@0", "y@0"]);
        assert_eq!(d.values[(2, 1)], data.outcome(0)[2]);

        let bad = AdjustmentSchedule::from_labels(&[vec![x1(0)], vec![x1(0), "y@1".into()]], &data);
        assert!(matches!(bad, Err(Error::Invariant(_))));
        let bad = AdjustmentSchedule::from_labels(&[vec!["y@0".into()], vec!["y@0".into()]], &data);
        assert!(matches!(bad, Err(Error::Invariant(_))));
        let future = AdjustmentSchedule::from_labels(&[vec![x1(2)], vec![x1(2)]], &data);
        assert!(matches!(future, Err(Error::Invariant(_))));
        let not_nested = AdjustmentSchedule::from_labels(&[vec![x1(0)], vec![x1(1)]], &data);
        assert!(matches!(not_nested, Err(Error::Invariant(_))));
    }

    #[test]
    fn full_schedule_is_nested() {
        let data = toy(3, 4, 2, |_, _| 0);
        let s = AdjustmentSchedule::full(&data);
        for k in 2..=4 {
            let prev: HashSet<String> = design_matrix(&data, &s, k - 1).unwrap().labels().into_iter().collect();
            let cur: HashSet<String> = design_matrix(&data, &s, k).unwrap().labels().into_iter().collect();
            assert!(prev.is_subset(&cur));
        }
        // no outcome history at k <= 1
        let d1 = design_matrix(&data, &s, 1).unwrap();
        assert!(d1.columns.iter().all(|c| c.kind == ColumnKind::Covariate));
        assert!(AdjustmentSchedule::new(s.steps.clone(), &data).is_ok());
    }

    fn brute_force_compliance(data: &PanelDataset, regime: &Regime) -> Vec<Vec<bool>> {
        (0..data.n_units())
            .map(|i| {
                (0..data.n_times())
                    .map(|m| (0..=m).all(|s| data.treatment(s)[i] == regime.at(s)))
                    .collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn compliance_matches_prefix_scan(seed in any::<u64>(), n in 1usize..60, tau in 0usize..5) {
            let data = toy(n, tau, 1, |i, t| ((crate::exec::derive_seed(seed, &[i as u64, t as u64]) % 5) == 0) as i64);
            let regime = Regime::constant(0, &data).unwrap();
            let c = compliance(&data, &regime);
            let bf = brute_force_compliance(&data, &regime);
            for i in 0..n {
                prop_assert_eq!(c.row(i), bf[i].clone());
                for m in 1..data.n_times() {
                    prop_assert!(c.follows(i, m - 1) >= c.follows(i, m));
                }
            }
            let report = check_baseline_regime(&data, &regime);
            let mean0 = (0..n).map(|i| c.indicator(i, 0)).sum::<f64>() / n as f64;
            prop_assert!((report.fraction_compliant - mean0).abs() < 1e-12);
        }

        #[test]
        fn csv_round_trip(
            seed in any::<u64>(), n in 1usize..8, tau in 0usize..4, p in 0usize..3,
        ) {
            use rand::Rng;
            let mut rng = crate::exec::rng_from(seed, &[]);
            let times = tau + 1;
            let data = PanelDataset::new(
                (0..n).map(|i| format!("unit-{i}")).collect(),
                (0..times).map(|t| (2000 + t).to_string()).collect(),
                (0..p).map(|j| format!("c{j}")).collect(),
                (0..times).map(|_| (0..n).map(|_| rng.gen_range(0..3)).collect()).collect(),
                (0..times).map(|_| (0..n).map(|_| rng.gen::<f64>() * 1e3 - 500.0).collect()).collect(),
                (0..times).map(|_| DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() / 7.0)).collect(),
            ).unwrap().with_outcome_name("outcome");
            let schema = native_schema(&data);
            let mut buf = Vec::new();
            write_panel(&data, &mut buf, &schema).unwrap();
            let back = read_panel(buf.as_slice(), &schema).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
