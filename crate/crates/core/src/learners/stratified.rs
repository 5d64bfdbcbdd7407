//! Saturated regression: the weighted target mean within each distinct
//! feature row. Unseen rows get the overall weighted mean.

use std::collections::HashMap;

use nalgebra::DMatrix;

fn key(z: &DMatrix<f64>, i: usize) -> Vec<u64> {
    // +0.0 and -0.0 share a stratum
    (0..z.ncols()).map(|j| (z[(i, j)] + 0.0).to_bits()).collect()
}

#[derive(Debug, Clone)]
pub struct StratumMeans {
    means: HashMap<Vec<u64>, f64>,
    fallback: f64,
}

impl StratumMeans {
    pub fn fit(z: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Self {
        let mut acc: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
        let (mut sy, mut sw) = (0.0, 0.0);
        for i in 0..z.nrows() {
            if w[i] <= 0.0 {
                continue;
            }
            let e = acc.entry(key(z, i)).or_insert((0.0, 0.0));
            e.0 += w[i] * y[i];
            e.1 += w[i];
            sy += w[i] * y[i];
            sw += w[i];
        }
        let means = acc.into_iter().map(|(k, (s, t))| (k, s / t)).collect();
        Self { means, fallback: if sw > 0.0 { sy / sw } else { 0.0 } }
    }

    pub fn n_strata(&self) -> usize {
        self.means.len()
    }

    pub fn predict(&self, z: &DMatrix<f64>) -> Vec<f64> {
        (0..z.nrows()).map(|i| *self.means.get(&key(z, i)).unwrap_or(&self.fallback)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratum_means_and_fallback() {
        let z = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        let y = [1.0, 3.0, 10.0, 20.0, 5.0];
        let m = StratumMeans::fit(&z, &y, &[1.0; 5]);
        assert_eq!(m.n_strata(), 3);
        assert_eq!(m.predict(&z), vec![2.0, 2.0, 15.0, 15.0, 5.0]);
        let unseen = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert_eq!(m.predict(&unseen), vec![39.0 / 5.0]);
    }
}
