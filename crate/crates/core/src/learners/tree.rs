//! Regression trees (variance-reduction splits) and bootstrap aggregation.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    w: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

fn weighted_mean(rows: &[usize], y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = rows.iter().map(|&i| w[i]).sum();
    if sw > 0.0 {
        rows.iter().map(|&i| w[i] * y[i]).sum::<f64>() / sw
    } else {
        0.0
    }
}

impl Builder<'_> {
    /// `sorted[f]` holds the node's rows ordered by feature `f`.
    fn build(&mut self, sorted: Vec<Vec<usize>>, depth: usize, left_mask: &mut [bool]) -> usize {
        let rows = &sorted[0];
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(weighted_mean(rows, self.y, self.w)));
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&sorted) else {
            return id;
        };
        for &i in rows {
            left_mask[i] = self.x[(i, feature)] <= threshold;
        }
        let (l, r): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            sorted.into_iter().map(|order| order.into_iter().partition(|&i| left_mask[i])).unzip();
        let left = self.build(l, depth + 1, left_mask);
        let right = self.build(r, depth + 1, left_mask);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    /// Largest weighted SSE reduction; ties keep the lowest feature index,
    /// then the lowest threshold.
    fn best_split(&self, sorted: &[Vec<usize>]) -> Option<(usize, f64)> {
        let (y, w) = (self.y, self.w);
        let rows = &sorted[0];
        let total_w: f64 = rows.iter().map(|&i| w[i]).sum();
        let total_s: f64 = rows.iter().map(|&i| w[i] * y[i]).sum();
        if total_w <= 0.0 || self.x.ncols() == 0 {
            return None;
        }
        let base = total_s * total_s / total_w;
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let col = self.x.column(f);
            let (mut lw, mut ls) = (0.0, 0.0);
            for pos in 0..order.len() - 1 {
                let i = order[pos];
                lw += w[i];
                ls += w[i] * y[i];
                let (xa, xb) = (col[i], col[order[pos + 1]]);
                let n_left = pos + 1;
                if xa == xb || n_left < self.min_leaf || order.len() - n_left < self.min_leaf {
                    continue;
                }
                let rw = total_w - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let rs = total_s - ls;
                let gain = ls * ls / lw + rs * rs / rw - base;
                if gain > 1e-12 * base.abs().max(1e-300) && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (xa + xb)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Row indices ordered by each column, ties by row index.
fn presort(x: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..x.ncols())
        .map(|f| {
            let col = x.column(f);
            let mut order: Vec<usize> = (0..x.nrows()).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            order
        })
        .collect()
}

impl Tree {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], w: &[f64], max_depth: usize, min_leaf: usize) -> Tree {
        Self::fit_sorted(x, y, w, max_depth, min_leaf, &presort(x))
    }

    fn fit_sorted(x: &DMatrix<f64>, y: &[f64], w: &[f64], max_depth: usize, min_leaf: usize, sorted: &[Vec<usize>]) -> Tree {
        let mut b = Builder { x, y, w, max_depth, min_leaf: min_leaf.max(1), nodes: Vec::new() };
        let mut root: Vec<Vec<usize>> =
            sorted.iter().map(|order| order.iter().copied().filter(|&i| w[i] > 0.0).collect()).collect();
        if root.is_empty() {
            root.push((0..x.nrows()).filter(|&i| w[i] > 0.0).collect());
        }
        b.build(root, 0, &mut vec![false; x.nrows()]);
        Tree { nodes: b.nodes }
    }

    pub fn predict_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    id = if x[(i, feature)] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

/// Bootstrap-aggregated trees. Bag `b` resamples rows with its own seeded
/// stream; resampling is expressed as integer multiplicities on the weights.
pub fn bagged(x: &DMatrix<f64>, y: &[f64], w: &[f64], max_depth: usize, min_leaf: usize, n_bags: usize, seed: u64) -> Vec<Tree> {
    let n = x.nrows();
    let sorted = presort(x);
    (0..n_bags)
        .map(|b| {
            let mut rng = crate::exec::rng_from(seed, &[b as u64]);
            let mut counts = vec![0u32; n];
            for _ in 0..n {
                counts[rng.gen_range(0..n)] += 1;
            }
            let wb: Vec<f64> = (0..n).map(|i| w[i] * f64::from(counts[i])).collect();
            Tree::fit_sorted(x, y, &wb, max_depth, min_leaf, &sorted)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_zero_is_mean() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let t = Tree::fit(&x, &[1.0, 2.0, 3.0, 10.0], &[1.0; 4], 0, 1);
        assert_eq!(t.predict(&x), vec![4.0; 4]);
    }

    #[test]
    fn recovers_step_function() {
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { i as f64 } else { ((i * 7) % 5) as f64 });
        let y: Vec<f64> = (0..20).map(|i| if i < 8 { 1.0 } else { 5.0 }).collect();
        let t = Tree::fit(&x, &y, &[1.0; 20], 3, 2);
        assert_eq!(t.predict(&x), y);
        assert_eq!(t.n_leaves(), 2);
    }

    #[test]
    fn tie_breaks_on_lowest_feature() {
        // identical columns: split must use feature 0
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let t = Tree::fit(&x, &y, &[1.0; 6], 1, 1);
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn min_leaf_respected() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..10).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect();
        let t = Tree::fit(&x, &y, &[1.0; 10], 5, 3);
        let p = t.predict(&x);
        // the outlier cannot be isolated in a leaf smaller than 3
        assert!(p[0] < 100.0);
    }

    #[test]
    fn bagging_is_seeded() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * (j + 3)) % 11) as f64);
        let y: Vec<f64> = (0..30).map(|i| (i % 4) as f64).collect();
        let a = bagged(&x, &y, &[1.0; 30], 3, 2, 5, 42);
        let b = bagged(&x, &y, &[1.0; 30], 3, 2, 5, 42);
        assert_eq!(a, b);
        assert_ne!(a, bagged(&x, &y, &[1.0; 30], 3, 2, 5, 43));
    }
}
