//! Least squares, ridge and elastic-net regression on weighted,
//! internally standardized features.
//!
//! The penalized objective is
//!
//! ```text
//! (1/2) sum_i w_i (y_i - b0 - x_i b)^2 + lambda * [alpha |b|_1 + (1 - alpha) |b|_2^2 / 2]
//! ```
//!
//! with weights normalized to sum to one and the penalty applied to
//! coefficients of the standardized features. Coefficients are mapped back
//! to the original feature scale.

use nalgebra::{DMatrix, DVector};

/// Number of candidate penalties in the cross-validation grid.
pub const LAMBDA_GRID_SIZE: usize = 20;
const LAMBDA_MIN_RATIO: f64 = 1e-3;
pub const CD_TOLERANCE: f64 = 1e-8;
const CD_MAX_SWEEPS: usize = 100_000;
const POLISH_EVERY: usize = 5;

/// Weighted moments and Gram matrix of the standardized problem.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub mean: Vec<f64>,
    /// Weighted standard deviation; zero marks a constant column.
    pub scale: Vec<f64>,
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub y_mean: f64,
}

impl Standardized {
    pub fn new(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Self {
        let (n, p) = x.shape();
        let y_mean: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum();
        let mut mean = vec![0.0; p];
        let mut scale = vec![0.0; p];
        let sw: Vec<f64> = w.iter().map(|w| w.sqrt()).collect();
        let mut xs = DMatrix::<f64>::zeros(n, p);
        for j in 0..p {
            let col = x.column(j);
            let m: f64 = col.iter().zip(w).map(|(v, w)| v * w).sum();
            let var: f64 = col.iter().zip(w).map(|(v, w)| w * (v - m) * (v - m)).sum();
            let s = var.max(0.0).sqrt();
            mean[j] = m;
            if s > 1e-12 * (1.0 + m.abs()) {
                scale[j] = s;
                for i in 0..n {
                    xs[(i, j)] = sw[i] * (col[i] - m) / s;
                }
            }
        }
        let ys = DVector::from_iterator(n, (0..n).map(|i| sw[i] * (y[i] - y_mean)));
        let gram = xs.transpose() * &xs;
        let cross = xs.tr_mul(&ys);
        Self { mean, scale, gram, cross, y_mean }
    }

    pub fn p(&self) -> usize {
        self.mean.len()
    }

    pub fn active(&self, j: usize) -> bool {
        self.scale[j] > 0.0
    }

    /// Maps standardized coefficients to `(intercept, coefficients)`.
    pub fn unstandardize(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = (0..self.p())
            .map(|j| if self.active(j) { beta[j] / self.scale[j] } else { 0.0 })
            .collect();
        let intercept = self.y_mean - coef.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        (intercept, coef)
    }

    /// Smallest penalty at which every coefficient is zero (for `alpha > 0`).
    pub fn lambda_max(&self, alpha: f64) -> f64 {
        let cmax = self.cross.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
        cmax / alpha.max(1e-3)
    }
}

pub fn lambda_grid(lambda_max: f64) -> Vec<f64> {
    let top = if lambda_max > 0.0 { lambda_max } else { 1.0 };
    (0..LAMBDA_GRID_SIZE)
        .map(|i| top * LAMBDA_MIN_RATIO.powf(i as f64 / (LAMBDA_GRID_SIZE - 1) as f64))
        .collect()
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Cyclic coordinate descent with covariance updates. Every few sweeps the
/// current sign pattern is polished by an exact solve on its support. Runs
/// until the largest coefficient change in a sweep falls below `tol`.
/// Returns the sweep count.
pub fn coordinate_descent(
    gram: &DMatrix<f64>,
    cross: &DVector<f64>,
    lambda: f64,
    alpha: f64,
    beta: &mut [f64],
    tol: f64,
) -> usize {
    let p = beta.len();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    let g = gram.as_slice();
    // fitted = G beta
    let mut fitted = vec![0.0; p];
    for (l, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            axpy(&mut fitted, b, &g[l * p..(l + 1) * p]);
        }
    }
    let update = |j: usize, beta: &mut [f64], fitted: &mut [f64]| -> f64 {
        let gjj = g[j * p + j];
        if gjj <= 0.0 {
            return 0.0;
        }
        let rho = cross[j] - fitted[j] + gjj * beta[j];
        let delta = soft_threshold(rho, l1) / (gjj + l2) - beta[j];
        if delta != 0.0 {
            beta[j] += delta;
            axpy(fitted, delta, &g[j * p..(j + 1) * p]);
        }
        delta.abs()
    };
    // a failed polish repeats exactly while the sign pattern is unchanged
    let mut failed_signs: Vec<i8> = Vec::new();
    for sweep in 1..=CD_MAX_SWEEPS {
        if sweep % POLISH_EVERY == 0 {
            let signs: Vec<i8> = beta.iter().map(|&b| if b > 0.0 { 1 } else if b < 0.0 { -1 } else { 0 }).collect();
            if signs != failed_signs {
                if polish(gram, cross, l1, l2, beta) {
                    return sweep;
                }
                failed_signs = signs;
            }
        }
        let change = (0..p).fold(0.0_f64, |m, j| m.max(update(j, beta, &mut fitted)));
        if change < tol {
            return sweep;
        }
    }
    CD_MAX_SWEEPS
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Solves the stationarity equations exactly on the current support with
/// the current signs, and accepts the result if it satisfies the
/// optimality conditions of the full problem.
fn polish(gram: &DMatrix<f64>, cross: &DVector<f64>, l1: f64, l2: f64, beta: &mut [f64]) -> bool {
    let p = beta.len();
    let support: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0 && gram[(j, j)] > 0.0).collect();
    let q = support.len();
    let mut sol = vec![0.0; p];
    if q > 0 {
        let a = DMatrix::from_fn(q, q, |r, c| gram[(support[r], support[c])] + if r == c { l2 } else { 0.0 });
        let b = DVector::from_iterator(q, support.iter().map(|&j| cross[j] - l1 * beta[j].signum()));
        let Some(chol) = a.cholesky() else { return false };
        let s = chol.solve(&b);
        for (r, &j) in support.iter().enumerate() {
            if s[r].signum() != beta[j].signum() {
                return false;
            }
            sol[j] = s[r];
        }
    }
    let slack = 1e-12 * (1.0 + l1);
    for j in 0..p {
        if sol[j] != 0.0 || gram[(j, j)] <= 0.0 {
            continue;
        }
        let col = &gram.as_slice()[j * p..(j + 1) * p];
        let g: f64 = cross[j] - col.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>();
        if g.abs() > l1 + slack {
            return false;
        }
    }
    beta.copy_from_slice(&sol);
    true
}

/// Standardized coefficients for one penalty value. `alpha == 0` is solved
/// in closed form; otherwise by coordinate descent from `warm`.
pub fn penalized_beta(prep: &Standardized, lambda: f64, alpha: f64, warm: Option<&[f64]>) -> Vec<f64> {
    let p = prep.p();
    if alpha == 0.0 && lambda > 0.0 {
        let active: Vec<usize> = (0..p).filter(|&j| prep.active(j)).collect();
        let a = DMatrix::from_fn(active.len(), active.len(), |r, c| {
            prep.gram[(active[r], active[c])] + if r == c { lambda } else { 0.0 }
        });
        let b = DVector::from_iterator(active.len(), active.iter().map(|&j| prep.cross[j]));
        let sol = a.cholesky().expect("ridge system is positive definite").solve(&b);
        let mut beta = vec![0.0; p];
        for (r, &j) in active.iter().enumerate() {
            beta[j] = sol[r];
        }
        return beta;
    }
    let mut beta = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    coordinate_descent(&prep.gram, &prep.cross, lambda, alpha, &mut beta, CD_TOLERANCE);
    beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Set when the design was rank deficient and the minimum-norm solution was used.
    pub min_norm: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + (0..x.ncols()).map(|j| x[(i, j)] * self.coef[j]).sum::<f64>())
            .collect()
    }
}

/// Weighted least squares with intercept. Solves the normal equations by
/// Cholesky; falls back to the minimum-norm solution when rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> LinearFit {
    let prep = Standardized::new(x, y, w);
    let p = prep.p();
    let active: Vec<usize> = (0..p).filter(|&j| prep.active(j)).collect();
    let q = active.len();
    let a = DMatrix::from_fn(q, q, |r, c| prep.gram[(active[r], active[c])]);
    let b = DVector::from_iterator(q, active.iter().map(|&j| prep.cross[j]));
    if let Some(chol) = a.clone().cholesky() {
        let l = chol.l();
        let well_conditioned = (0..q).all(|j| l[(j, j)] * l[(j, j)] > 1e-10);
        if well_conditioned {
            let sol = chol.solve(&b);
            let mut beta = vec![0.0; p];
            for (r, &j) in active.iter().enumerate() {
                beta[j] = sol[r];
            }
            let (intercept, coef) = prep.unstandardize(&beta);
            return LinearFit { intercept, coef, min_norm: false };
        }
    }
    minimum_norm(x, y, w, &prep)
}

fn minimum_norm(x: &DMatrix<f64>, y: &[f64], w: &[f64], prep: &Standardized) -> LinearFit {
    let (n, p) = x.shape();
    let xc = DMatrix::from_fn(n, p, |i, j| w[i].sqrt() * (x[(i, j)] - prep.mean[j]));
    let yc = DVector::from_iterator(n, (0..n).map(|i| w[i].sqrt() * (y[i] - prep.y_mean)));
    let svd = xc.svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let eps = smax * 1e-10 * (n.max(p) as f64);
    let coef: Vec<f64> = if p == 0 {
        Vec::new()
    } else {
        svd.solve(&yc, eps).map(|c| c.iter().copied().collect()).unwrap_or_else(|_| vec![0.0; p])
    };
    let intercept = prep.y_mean - coef.iter().zip(&prep.mean).map(|(b, m)| b * m).sum::<f64>();
    LinearFit { intercept, coef, min_norm: true }
}

/// Ridge or elastic net at a fixed penalty.
pub fn penalized(x: &DMatrix<f64>, y: &[f64], w: &[f64], lambda: f64, alpha: f64) -> LinearFit {
    let prep = Standardized::new(x, y, w);
    let beta = penalized_beta(&prep, lambda, alpha, None);
    let (intercept, coef) = prep.unstandardize(&beta);
    LinearFit { intercept, coef, min_norm: false }
}

/// Fits the whole grid (descending) with warm starts.
pub fn penalized_path(prep: &Standardized, grid: &[f64], alpha: f64) -> Vec<(f64, Vec<f64>)> {
    let mut warm: Option<Vec<f64>> = None;
    grid.iter()
        .map(|&lambda| {
            let beta = penalized_beta(prep, lambda, alpha, warm.as_deref());
            let out = prep.unstandardize(&beta);
            warm = Some(beta);
            out
        })
        .collect()
}
