//! Least squares over the probability simplex:
//! minimize `sum_i w_i (y_i - Z_i b)^2` subject to `b >= 0`, `sum b = 1`.

use nalgebra::{DMatrix, DVector};

const MAX_EXACT_MEMBERS: usize = 12;

fn objective(z: &DMatrix<f64>, y: &[f64], w: &[f64], b: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let r = y[i] - (0..b.len()).map(|l| z[(i, l)] * b[l]).sum::<f64>();
            w[i] * r * r
        })
        .sum()
}

/// Minimizer over the affine hull of `support` (weights summing to one),
/// or `None` if it leaves the simplex.
fn face_solution(a: &DMatrix<f64>, c: &DVector<f64>, support: &[usize], dim: usize) -> Option<Vec<f64>> {
    let s = support.len();
    let mut kkt = DMatrix::<f64>::zeros(s + 1, s + 1);
    let mut rhs = DVector::<f64>::zeros(s + 1);
    for (r, &i) in support.iter().enumerate() {
        for (q, &j) in support.iter().enumerate() {
            kkt[(r, q)] = a[(i, j)];
        }
        kkt[(r, s)] = 1.0;
        kkt[(s, r)] = 1.0;
        rhs[r] = c[i];
    }
    rhs[s] = 1.0;
    let sol = kkt.svd(true, true).solve(&rhs, 1e-13).ok()?;
    let mut b = vec![0.0; dim];
    for (r, &i) in support.iter().enumerate() {
        if !sol[r].is_finite() || sol[r] < -1e-12 {
            return None;
        }
        b[i] = sol[r].max(0.0);
    }
    let total: f64 = b.iter().sum();
    if total <= 0.0 {
        return None;
    }
    b.iter_mut().for_each(|v| *v /= total);
    Some(b)
}

fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Exact for up to 12 columns (enumeration of faces); projected gradient
/// beyond that, never worse than the best single column.
pub fn simplex_least_squares(z: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    let (n, l) = z.shape();
    assert!(l >= 1, "need at least one column");
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let zw = DMatrix::from_fn(n, l, |i, j| sw[i] * z[(i, j)]);
    let yw = DVector::from_iterator(n, (0..n).map(|i| sw[i] * y[i]));
    let a = zw.transpose() * &zw;
    let c = zw.tr_mul(&yw);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |b: Vec<f64>| {
        let obj = objective(z, y, w, &b);
        if best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, b));
        }
    };
    // vertices first so ties favour single members
    for j in 0..l {
        let mut b = vec![0.0; l];
        b[j] = 1.0;
        consider(b);
    }
    if l <= MAX_EXACT_MEMBERS {
        for mask in 1u32..(1u32 << l) {
            if mask.count_ones() < 2 {
                continue;
            }
            let support: Vec<usize> = (0..l).filter(|&j| mask & (1 << j) != 0).collect();
            if let Some(b) = face_solution(&a, &c, &support, l) {
                consider(b);
            }
        }
    } else {
        let lipschitz = a.symmetric_eigenvalues().iter().fold(0.0_f64, |m, v| m.max(*v)).max(1e-12);
        let mut b = vec![1.0 / l as f64; l];
        for _ in 0..20_000 {
            let grad: Vec<f64> = (0..l).map(|j| (0..l).map(|q| a[(j, q)] * b[q]).sum::<f64>() - c[j]).collect();
            let step: Vec<f64> = (0..l).map(|j| b[j] - grad[j] / lipschitz).collect();
            b = project_to_simplex(&step);
        }
        consider(b);
    }
    best.map(|(_, b)| b).expect("at least one candidate")
}
