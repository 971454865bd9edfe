//! Tree ensembles: bagged random forests and softmax gradient boosting.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_classifier, fit_newton, Tree, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    k: usize,
}

impl Forest {
    /// Mean of the per-tree leaf class proportions.
    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.k));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            for t in &self.trees {
                for (j, p) in t.leaf_value(&row).iter().enumerate() {
                    out[[i, j]] += p;
                }
            }
        }
        out / self.trees.len().max(1) as f64
    }
}

pub fn fit_forest(
    x: ArrayView2<f64>,
    y: &[usize],
    weight: &[f64],
    k: usize,
    n_trees: usize,
    params: TreeParams,
    rng: &mut ChaCha8Rng,
) -> Forest {
    let n = x.nrows();
    let trees = (0..n_trees)
        .map(|_| {
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_classifier(x, y, weight, k, rows, params, rng)
        })
        .collect();
    Forest { trees, k }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    base: Vec<f64>,
    learning_rate: f64,
    /// One tree per class per round.
    rounds: Vec<Vec<Tree>>,
}

impl Boosted {
    /// Raw additive logits.
    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let k = self.base.len();
        let mut out = Array2::zeros((x.nrows(), k));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            for j in 0..k {
                out[[i, j]] = self.base[j]
                    + self
                        .rounds
                        .iter()
                        .map(|r| self.learning_rate * r[j].leaf_value(&row)[0])
                        .sum::<f64>();
            }
        }
        out
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[allow(clippy::too_many_arguments)]
pub fn fit_boosted(
    x: ArrayView2<f64>,
    y: &[usize],
    weight: &[f64],
    k: usize,
    n_rounds: usize,
    learning_rate: f64,
    lambda: f64,
    params: TreeParams,
    rng: &mut ChaCha8Rng,
) -> Boosted {
    let n = x.nrows();
    let total: f64 = weight.iter().sum();
    let mut prior = vec![1e-3; k];
    for (&c, &w) in y.iter().zip(weight) {
        prior[c] += w / total;
    }
    let base: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let mut logits = Array2::from_shape_fn((n, k), |(_, j)| base[j]);
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..n_rounds {
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let mut round = Vec::with_capacity(k);
        for j in 0..k {
            for i in 0..n {
                let p = probs[[i, j]];
                let t = if y[i] == j { 1.0 } else { 0.0 };
                grad[i] = weight[i] * (p - t);
                hess[i] = weight[i] * (p * (1.0 - p)).max(1e-6);
            }
            let tree = fit_newton(x, &grad, &hess, lambda, params, rng);
            for (i, row) in x.rows().into_iter().enumerate() {
                logits[[i, j]] += learning_rate * tree.leaf_value(row.as_slice().expect("row slice"))[0];
            }
            round.push(tree);
        }
        rounds.push(round);
    }
    Boosted {
        base,
        learning_rate,
        rounds,
    }
}
