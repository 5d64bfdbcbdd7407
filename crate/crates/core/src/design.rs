//! Feature matrices with column provenance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Covariate,
    Outcome,
    /// Time index used as a feature by pooled models.
    Period,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnInfo {
    /// Variable name without the time suffix (e.g. `w1`).
    pub name: String,
    pub time: Option<usize>,
    pub kind: ColumnKind,
}

impl ColumnInfo {
    pub fn label(&self) -> String {
        match self.time {
            Some(t) => format!("{}@{}", self.name, t),
            None => self.name.clone(),
        }
    }
}

/// A row-per-unit feature matrix whose columns remember which variable and
/// time point they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub columns: Vec<ColumnInfo>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, columns: Vec<ColumnInfo>) -> Self {
        assert_eq!(values.ncols(), columns.len(), "column metadata must match matrix width");
        Self { values, columns }
    }

    /// Wraps an anonymous matrix, naming columns `x0, x1, ...`.
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let columns = (0..values.ncols())
            .map(|j| ColumnInfo { name: format!("x{j}"), time: None, kind: ColumnKind::Other })
            .collect();
        Self { values, columns }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let values = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
        Self::from_matrix(values)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn labels(&self) -> Vec<String> {
        self.columns.iter().map(ColumnInfo::label).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let values = DMatrix::from_fn(rows.len(), self.ncols(), |i, j| self.values[(rows[i], j)]);
        DesignMatrix { values, columns: self.columns.clone() }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.ncols()).map(|j| self.values[(i, j)]).collect()
    }
}
