//! Feature maps applied by learners before fitting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{ColumnInfo, DesignMatrix};

/// A column reference. Matches either a full label (`w1@2`) or a bare
/// variable name (`w1`), in which case it applies at every time present.
pub type ColumnRef = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    /// Every raw column, untransformed.
    Raw,
    Identity { column: ColumnRef },
    Sin { column: ColumnRef },
    Cos { column: ColumnRef },
    Square { column: ColumnRef },
    /// Product of two columns. With bare names, columns are paired by time.
    Product { left: ColumnRef, right: ColumnRef },
}

impl Transform {
    pub fn is_linear(&self) -> bool {
        matches!(self, Transform::Raw | Transform::Identity { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    Identity,
    /// Powers up to `degree` of every column plus all pairwise products.
    Polynomial { degree: usize },
    Custom { transforms: Vec<Transform> },
}

fn matches(col: &ColumnInfo, reference: &str) -> bool {
    col.name == reference || col.label() == reference
}

fn matching(columns: &[ColumnInfo], reference: &str) -> Vec<usize> {
    (0..columns.len()).filter(|&j| matches(&columns[j], reference)).collect()
}

impl FeatureMap {
    /// Expands a design into the learner's working features.
    pub fn expand(&self, x: &DesignMatrix) -> (DMatrix<f64>, Vec<String>) {
        let n = x.nrows();
        let labels = x.labels();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let col = |j: usize| -> Vec<f64> { x.values.column(j).iter().copied().collect() };
        let mut push = |v: Vec<f64>, name: String| {
            cols.push(v);
            names.push(name);
        };
        match self {
            FeatureMap::Identity => {
                for j in 0..x.ncols() {
                    push(col(j), labels[j].clone());
                }
            }
            FeatureMap::Polynomial { degree } => {
                for j in 0..x.ncols() {
                    let base = col(j);
                    push(base.clone(), labels[j].clone());
                    for d in 2..=*degree {
                        push(base.iter().map(|v| v.powi(d as i32)).collect(), format!("{}^{d}", labels[j]));
                    }
                }
                if *degree >= 2 {
                    for a in 0..x.ncols() {
                        for b in a + 1..x.ncols() {
                            push(
                                (0..n).map(|i| x.values[(i, a)] * x.values[(i, b)]).collect(),
                                format!("{}*{}", labels[a], labels[b]),
                            );
                        }
                    }
                }
            }
            FeatureMap::Custom { transforms } => {
                for tr in transforms {
                    match tr {
                        Transform::Raw => {
                            for j in 0..x.ncols() {
                                push(col(j), labels[j].clone());
                            }
                        }
                        Transform::Identity { column } => {
                            for j in matching(&x.columns, column) {
                                push(col(j), labels[j].clone());
                            }
                        }
                        Transform::Sin { column } => {
                            for j in matching(&x.columns, column) {
                                push(col(j).iter().map(|v| v.sin()).collect(), format!("sin({})", labels[j]));
                            }
                        }
                        Transform::Cos { column } => {
                            for j in matching(&x.columns, column) {
                                push(col(j).iter().map(|v| v.cos()).collect(), format!("cos({})", labels[j]));
                            }
                        }
                        Transform::Square { column } => {
                            for j in matching(&x.columns, column) {
                                push(col(j).iter().map(|v| v * v).collect(), format!("{}^2", labels[j]));
                            }
                        }
                        Transform::Product { left, right } => {
                            let ls = matching(&x.columns, left);
                            let rs = matching(&x.columns, right);
                            for &a in &ls {
                                for &b in &rs {
                                    let paired = left.contains('@')
                                        || right.contains('@')
                                        || x.columns[a].time == x.columns[b].time;
                                    if a != b && paired {
                                        push(
                                            (0..n).map(|i| x.values[(i, a)] * x.values[(i, b)]).collect(),
                                            format!("{}*{}", labels[a], labels[b]),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let m = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        (m, names)
    }

    /// Drops every nonlinear transform, leaving raw linear terms only.
    pub fn misspecified(&self) -> FeatureMap {
        FeatureMap::Identity
    }

    pub fn has_nonlinear_terms(&self) -> bool {
        match self {
            FeatureMap::Identity => false,
            FeatureMap::Polynomial { degree } => *degree >= 2,
            FeatureMap::Custom { transforms } => transforms.iter().any(|t| !t.is_linear()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::ColumnKind;

    fn design() -> DesignMatrix {
        let cols = [("w1", 0), ("w2", 0), ("w3", 0), ("w1", 1), ("w2", 1), ("w3", 1)]
            .iter()
            .map(|&(n, t)| ColumnInfo { name: n.into(), time: Some(t), kind: ColumnKind::Covariate })
            .collect();
        DesignMatrix::new(DMatrix::from_fn(2, 6, |i, j| (i * 6 + j) as f64 + 1.0), cols)
    }

    #[test]
    fn polynomial_counts() {
        let (m, names) = FeatureMap::Polynomial { degree: 2 }.expand(&design());
        assert_eq!(m.ncols(), 6 + 6 + 15);
        assert_eq!(names.len(), m.ncols());
        assert_eq!(FeatureMap::Polynomial { degree: 1 }.expand(&design()).0.ncols(), 6);
    }

    #[test]
    fn custom_pairs_products_by_time() {
        let map = FeatureMap::Custom {
            transforms: vec![
                Transform::Sin { column: "w1".into() },
                Transform::Product { left: "w2".into(), right: "w3".into() },
                Transform::Square { column: "w3@1".into() },
            ],
        };
        let (m, names) = map.expand(&design());
        assert_eq!(names, vec!["sin(w1@0)", "sin(w1@1)", "w2@0*w3@0", "w2@1*w3@1", "w3@1^2"]);
        assert_eq!(m[(1, 2)], 8.0 * 9.0);
        assert_eq!(m[(0, 4)], 36.0);
    }

    #[test]
    fn misspecification_drops_nonlinear_terms() {
        let map = FeatureMap::Custom {
            transforms: vec![
                Transform::Raw,
                Transform::Sin { column: "w1".into() },
                Transform::Product { left: "w2".into(), right: "w3".into() },
            ],
        };
        assert!(map.has_nonlinear_terms());
        let bad = map.misspecified();
        assert!(!bad.has_nonlinear_terms());
        let (_, names) = bad.expand(&design());
        assert!(names.iter().all(|n| !n.contains("sin") && !n.contains('*')));
    }
}
