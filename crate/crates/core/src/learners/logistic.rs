//! Logistic regression: Newton-Raphson (IRLS) for the unpenalized model and
//! proximal Newton with coordinate descent for the elastic-net penalty.

use nalgebra::{DMatrix, DVector};

use super::linear::{coordinate_descent, Standardized, CD_TOLERANCE};

pub const SCORE_TOLERANCE: f64 = 1e-8;
/// Ridge penalty used when plain IRLS fails (separation or divergence).
pub const FALLBACK_RIDGE: f64 = 1e-6;
const MAX_NEWTON: usize = 100;
const MAX_FALLBACK_NEWTON: usize = 1000;
const MAX_OUTER: usize = 200;
const HESSIAN_REFRESH: usize = 4;
const ETA_LIMIT: f64 = 35.0;

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub ridge_fallback: bool,
    pub converged: bool,
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + (0..x.ncols()).map(|j| x[(i, j)] * self.coef[j]).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.linear_predictor(x).into_iter().map(expit).collect()
    }
}

/// Gradient of the weighted mean log-likelihood with respect to
/// `(intercept, coef)` on the original feature scale.
pub fn score(x: &DMatrix<f64>, y: &[f64], w: &[f64], intercept: f64, coef: &[f64]) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut s = vec![0.0; p + 1];
    for i in 0..n {
        let eta = intercept + (0..p).map(|j| x[(i, j)] * coef[j]).sum::<f64>();
        let r = w[i] * (y[i] - expit(eta));
        s[0] += r;
        for j in 0..p {
            s[j + 1] += r * x[(i, j)];
        }
    }
    s
}

fn log_likelihood(eta: &[f64], y: &[f64], w: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &y), &w)| {
            // y * e - log(1 + exp(e)), computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            w * (y * e - softplus)
        })
        .sum()
}

/// Standardized design with a leading intercept column.
struct Working {
    z: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Working {
    fn new(x: &DMatrix<f64>, w: &[f64]) -> Self {
        let (n, p) = x.shape();
        let mut mean = vec![0.0; p];
        let mut scale = vec![0.0; p];
        let mut z = DMatrix::zeros(n, p + 1);
        for i in 0..n {
            z[(i, 0)] = 1.0;
        }
        for j in 0..p {
            let col = x.column(j);
            let m: f64 = col.iter().zip(w).map(|(v, w)| v * w).sum();
            let s = col.iter().zip(w).map(|(v, w)| w * (v - m) * (v - m)).sum::<f64>().max(0.0).sqrt();
            mean[j] = m;
            if s > 1e-12 * (1.0 + m.abs()) {
                scale[j] = s;
                for i in 0..n {
                    z[(i, j + 1)] = (col[i] - m) / s;
                }
            }
        }
        Self { z, mean, scale }
    }

    fn unstandardize(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = (0..self.mean.len())
            .map(|j| if self.scale[j] > 0.0 { theta[j + 1] / self.scale[j] } else { 0.0 })
            .collect();
        let intercept = theta[0] - coef.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        (intercept, coef)
    }
}

/// Newton iterations on the standardized problem with an optional ridge
/// penalty on the slopes. Returns `(theta, converged)`.
fn newton(work: &Working, y: &[f64], w: &[f64], ridge: f64, max_iter: usize, x: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let (n, q) = work.z.shape();
    let ybar: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum();
    let mut theta = vec![0.0; q];
    theta[0] = if ybar > 0.0 && ybar < 1.0 { (ybar / (1.0 - ybar)).ln() } else { 0.0 };
    let penalty = |t: &[f64]| 0.5 * ridge * t[1..].iter().map(|v| v * v).sum::<f64>();
    let eta_of = |t: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..q).map(|j| work.z[(i, j)] * t[j]).sum()).collect() };
    let mut eta = eta_of(&theta);
    let mut objective = log_likelihood(&eta, y, w) - penalty(&theta);

    for _ in 0..max_iter {
        let mut grad = DVector::<f64>::zeros(q);
        let mut hess = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let p = expit(eta[i]);
            let r = w[i] * (y[i] - p);
            let v = w[i] * p * (1.0 - p);
            for a in 0..q {
                let za = work.z[(i, a)];
                grad[a] += r * za;
                if v > 0.0 {
                    for b in a..q {
                        hess[(a, b)] += v * za * work.z[(i, b)];
                    }
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for a in 1..q {
            grad[a] -= ridge * theta[a];
            hess[(a, a)] += ridge;
        }
        // standardized columns that are constant carry no information
        for a in 1..q {
            if work.scale[a - 1] == 0.0 {
                hess[(a, a)] = 1.0;
                grad[a] = 0.0;
            }
        }
        let done = if ridge == 0.0 {
            let (intercept, coef) = work.unstandardize(&theta);
            score(x, y, w, intercept, &coef).iter().all(|s| s.abs() <= SCORE_TOLERANCE)
        } else {
            grad.iter().all(|g| g.abs() <= SCORE_TOLERANCE)
        };
        if done {
            return (theta, true);
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hess.svd(true, true).solve(&grad, 1e-12) {
                Ok(s) => s,
                Err(_) => return (theta, false),
            },
        };
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = (0..q).map(|a| theta[a] + t * step[a]).collect();
            let cand_eta = eta_of(&cand);
            let cand_obj = log_likelihood(&cand_eta, y, w) - penalty(&cand);
            if cand_obj.is_finite() && cand_obj >= objective - 1e-14 * objective.abs() {
                theta = cand;
                eta = cand_eta;
                objective = cand_obj;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return (theta, false);
            }
        }
        if eta.iter().any(|e| !e.is_finite() || e.abs() > ETA_LIMIT) && ridge == 0.0 {
            return (theta, false);
        }
    }
    (theta, false)
}

/// Maximum-likelihood logistic regression with intercept. If IRLS fails to
/// converge (typically separation), refits with a small ridge penalty and
/// sets `ridge_fallback`.
pub fn logistic(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> LogisticFit {
    let work = Working::new(x, w);
    let (theta, converged) = newton(&work, y, w, 0.0, MAX_NEWTON, x);
    if converged {
        let (intercept, coef) = work.unstandardize(&theta);
        return LogisticFit { intercept, coef, ridge_fallback: false, converged: true };
    }
    let (theta, converged) = newton(&work, y, w, FALLBACK_RIDGE, MAX_FALLBACK_NEWTON, x);
    let (intercept, coef) = work.unstandardize(&theta);
    LogisticFit { intercept, coef, ridge_fallback: true, converged }
}

/// Weighted, centered design for a quadratic model of the log-likelihood.
struct Curvature {
    var: Vec<f64>,
    v: Vec<f64>,
    vsum: f64,
    xm: Vec<f64>,
    xs: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl Curvature {
    /// `z` carries a leading intercept column.
    fn new(z: &DMatrix<f64>, pr: &[f64], w: &[f64]) -> Self {
        let (n, q) = z.shape();
        let p = q - 1;
        let var: Vec<f64> = pr.iter().map(|pr| (pr * (1.0 - pr)).max(1e-5)).collect();
        let v: Vec<f64> = (0..n).map(|i| w[i] * var[i]).collect();
        let vsum: f64 = v.iter().sum();
        let xm: Vec<f64> = (0..p).map(|j| (0..n).map(|i| v[i] * z[(i, j + 1)]).sum::<f64>() / vsum).collect();
        let xs = DMatrix::from_fn(n, p, |i, j| v[i].sqrt() * (z[(i, j + 1)] - xm[j]));
        let gram = xs.transpose() * &xs;
        Self { var, v, vsum, xm, xs, gram }
    }
}

/// Elastic-net penalized logistic regression along a descending penalty grid
/// with warm starts. Returns one fit per penalty.
pub fn logistic_elastic_net_path(x: &DMatrix<f64>, y: &[f64], w: &[f64], grid: &[f64], alpha: f64) -> Vec<LogisticFit> {
    let work = Working::new(x, w);
    let (n, q) = work.z.shape();
    let p = q - 1;
    let ybar: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>().clamp(1e-6, 1.0 - 1e-6);
    let mut b0 = (ybar / (1.0 - ybar)).ln();
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(grid.len());

    // Curvature weights are refreshed at each new penalty, every few steps
    // and whenever a step fails to shrink; in between only the gradient
    // (working response) is updated. The fixed point is the exact optimum.
    let mut curvature: Option<Curvature> = None;
    let mut eta = vec![0.0; n];
    let mut pr = vec![0.0; n];
    for &lambda in grid {
        let mut converged = false;
        let mut age = usize::MAX;
        let mut last_change = f64::INFINITY;
        for _ in 0..MAX_OUTER {
            let lin = work.z.columns(1, p) * DVector::from_column_slice(&beta);
            for i in 0..n {
                eta[i] = b0 + lin[i];
                pr[i] = expit(eta[i]);
            }
            if age >= HESSIAN_REFRESH {
                curvature = Some(Curvature::new(&work.z, &pr, w));
                age = 0;
            }
            let c = curvature.as_ref().expect("curvature computed");
            let zw: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - pr[i]) / c.var[i]).collect();
            let zm: f64 = (0..n).map(|i| c.v[i] * zw[i]).sum::<f64>() / c.vsum;
            let zs = DVector::from_iterator(n, (0..n).map(|i| c.v[i].sqrt() * (zw[i] - zm)));
            let cross = c.xs.tr_mul(&zs);
            let old = beta.clone();
            let old_b0 = b0;
            coordinate_descent(&c.gram, &cross, lambda, alpha, &mut beta, CD_TOLERANCE * 0.1);
            b0 = zm - c.xm.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
            let change = old
                .iter()
                .zip(&beta)
                .map(|(a, b)| (a - b).abs())
                .fold((old_b0 - b0).abs(), f64::max);
            if change < CD_TOLERANCE {
                converged = true;
                break;
            }
            age = if change > 0.5 * last_change { HESSIAN_REFRESH } else { age + 1 };
            last_change = change;
        }
        let mut theta = Vec::with_capacity(q);
        theta.push(b0);
        theta.extend_from_slice(&beta);
        let (intercept, coef) = work.unstandardize(&theta);
        out.push(LogisticFit { intercept, coef, ridge_fallback: false, converged });
    }
    out
}

/// Smallest penalty zeroing all slopes of the penalized logistic model.
pub fn logistic_lambda_max(x: &DMatrix<f64>, y: &[f64], w: &[f64], alpha: f64) -> f64 {
    let ybar: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum();
    let resid: Vec<f64> = y.iter().map(|y| y - ybar).collect();
    let prep = Standardized::new(x, &resid, w);
    // cross = sum_i sqrt(w) x~ * sqrt(w) (r - mean r) = sum_i w x~ r
    prep.cross.iter().fold(0.0_f64, |a, c| a.max(c.abs())) / alpha.max(1e-3)
}
