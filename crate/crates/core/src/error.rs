use std::fmt;

use thiserror::Error;

/// A `(unit, time)` coordinate using the labels found in the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLabel {
    pub unit: String,
    pub time: String,
}

impl fmt::Display for CellLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.unit, self.time)
    }
}

fn join_cells(cells: &[CellLabel]) -> String {
    cells.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}, column `{column}`: cannot read {value:?} as {expected}")]
    Parse {
        line: u64,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("unbalanced panel, missing (unit,time) pairs: {}", join_cells(.missing))]
    Unbalanced { missing: Vec<CellLabel> },

    #[error("duplicate record for (unit,time) = {cell} at line {line}")]
    Duplicate { cell: CellLabel, line: u64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid learner configuration: {0}")]
    LearnerSpec(String),

    #[error("no training data")]
    EmptyData,

    #[error("feature dimension mismatch: model expects {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("learner failure: {0}")]
    Learner(String),

    #[error("positivity failure: {0}")]
    Positivity(String),

    #[error("missing nuisance model Q(j={j}, k={k}, m={m})")]
    MissingNuisance { j: usize, k: usize, m: usize },

    #[error("nuisance estimation failed: {}", .0.join("; "))]
    Nuisance(Vec<String>),

    #[error("fold too small: {0}; try fewer folds")]
    FoldTooSmall(String),
}

impl Error {
    /// Errors caused by malformed inputs or configuration, as opposed to
    /// failures during estimation on valid inputs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::Unbalanced { .. }
                | Error::Duplicate { .. }
                | Error::Invariant(_)
                | Error::LearnerSpec(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
