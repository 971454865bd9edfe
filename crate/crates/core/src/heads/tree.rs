//! CART trees. Classification trees split on weighted Gini impurity; the
//! regression variant used by boosting splits on second-order gain.

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Array-backed binary tree; node 0 is the root. Leaves hold a vector
/// (class proportions for classification, a single value for regression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    #[cfg(test)]
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features examined per split; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: None,
        }
    }
}

/// Split statistics accumulated left-to-right along one feature.
trait Criterion {
    type Acc: Clone;
    fn zero(&self) -> Self::Acc;
    fn add(&self, acc: &mut Self::Acc, i: usize);
    fn sub(&self, acc: &mut Self::Acc, i: usize);
    /// Lower is better; must be additive over children.
    fn cost(&self, acc: &Self::Acc) -> f64;
    fn leaf(&self, acc: &Self::Acc) -> Vec<f64>;
    fn is_pure(&self, acc: &Self::Acc) -> bool;
}

struct Gini<'a> {
    y: &'a [usize],
    w: &'a [f64],
    k: usize,
}

impl Criterion for Gini<'_> {
    type Acc = Vec<f64>;

    fn zero(&self) -> Vec<f64> {
        vec![0.0; self.k + 1]
    }

    fn add(&self, acc: &mut Vec<f64>, i: usize) {
        acc[self.y[i]] += self.w[i];
        acc[self.k] += self.w[i];
    }

    fn sub(&self, acc: &mut Vec<f64>, i: usize) {
        acc[self.y[i]] -= self.w[i];
        acc[self.k] -= self.w[i];
    }

    fn cost(&self, acc: &Vec<f64>) -> f64 {
        let total = acc[self.k];
        if total <= 0.0 {
            return 0.0;
        }
        total - acc[..self.k].iter().map(|c| c * c).sum::<f64>() / total
    }

    fn leaf(&self, acc: &Vec<f64>) -> Vec<f64> {
        let total = acc[self.k].max(f64::MIN_POSITIVE);
        acc[..self.k].iter().map(|c| c / total).collect()
    }

    fn is_pure(&self, acc: &Vec<f64>) -> bool {
        acc[..self.k].iter().filter(|&&c| c > 1e-12).count() <= 1
    }
}

struct Newton<'a> {
    g: &'a [f64],
    h: &'a [f64],
    lambda: f64,
}

impl Criterion for Newton<'_> {
    type Acc = (f64, f64);

    fn zero(&self) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn add(&self, acc: &mut (f64, f64), i: usize) {
        acc.0 += self.g[i];
        acc.1 += self.h[i];
    }

    fn sub(&self, acc: &mut (f64, f64), i: usize) {
        acc.0 -= self.g[i];
        acc.1 -= self.h[i];
    }

    fn cost(&self, acc: &(f64, f64)) -> f64 {
        -(acc.0 * acc.0) / (acc.1 + self.lambda)
    }

    fn leaf(&self, acc: &(f64, f64)) -> Vec<f64> {
        vec![-acc.0 / (acc.1 + self.lambda)]
    }

    fn is_pure(&self, _: &(f64, f64)) -> bool {
        false
    }
}

struct Builder<'a, C: Criterion, R: Rng> {
    x: ArrayView2<'a, f64>,
    crit: C,
    params: TreeParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<C: Criterion, R: Rng> Builder<'_, C, R> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let mut acc = self.crit.zero();
        rows.iter().for_each(|&i| self.crit.add(&mut acc, i));
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(self.crit.leaf(&acc)));

        let depth_ok = self.params.max_depth.is_none_or(|m| depth < m);
        if !depth_ok || rows.len() < self.params.min_samples_split.max(2) || self.crit.is_pure(&acc) {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(&rows, &acc) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[[i, feature]] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    fn best_split(&mut self, rows: &[usize], parent: &C::Acc) -> Option<(usize, f64)> {
        let d = self.x.ncols();
        let features: Vec<usize> = match self.params.max_features {
            Some(m) if m < d => {
                let mut f = index::sample(self.rng, d, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let min_leaf = self.params.min_samples_leaf.max(1);
        let parent_cost = self.crit.cost(parent);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]).then(a.cmp(&b)));
            let mut left = self.crit.zero();
            let mut right = parent.clone();
            for pos in 0..order.len() - 1 {
                let i = order[pos];
                self.crit.add(&mut left, i);
                self.crit.sub(&mut right, i);
                let (lo, hi) = (self.x[[i, f]], self.x[[order[pos + 1], f]]);
                if lo == hi || pos + 1 < min_leaf || order.len() - pos - 1 < min_leaf {
                    continue;
                }
                let cost = self.crit.cost(&left) + self.crit.cost(&right);
                if cost < parent_cost - 1e-12 && best.is_none_or(|(c, _, _)| cost < c - 1e-12) {
                    let mid = lo + (hi - lo) / 2.0;
                    // guard against the midpoint rounding onto the upper value
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((cost, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn build<C: Criterion, R: Rng>(
    x: ArrayView2<f64>,
    rows: Vec<usize>,
    crit: C,
    params: TreeParams,
    rng: &mut R,
) -> Tree {
    let mut b = Builder {
        x,
        crit,
        params,
        rng,
        nodes: Vec::new(),
    };
    b.grow(rows, 0);
    Tree { nodes: b.nodes }
}

/// Fits a classification tree on `rows` (repeats allowed, as in a bootstrap
/// sample). Leaves hold weighted class proportions over `k` classes.
pub fn fit_classifier<R: Rng>(
    x: ArrayView2<f64>,
    y: &[usize],
    weight: &[f64],
    k: usize,
    rows: Vec<usize>,
    params: TreeParams,
    rng: &mut R,
) -> Tree {
    build(x, rows, Gini { y, w: weight, k }, params, rng)
}

/// Fits a regression tree on gradient/hessian pairs; leaves hold the Newton
/// step `-G / (H + lambda)`.
pub fn fit_newton<R: Rng>(
    x: ArrayView2<f64>,
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
    params: TreeParams,
    rng: &mut R,
) -> Tree {
    let rows = (0..x.nrows()).collect();
    build(x, rows, Newton { g: grad, h: hess, lambda }, params, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unlimited_tree_memorizes_distinct_points() {
        let x = array![[0.0, 1.0], [1.0, 1.0], [0.5, 0.2], [0.9, 0.0], [0.1, 0.7]];
        let y = [0, 1, 2, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = fit_classifier(x.view(), &y, &[1.0; 5], 3, (0..5).collect(), TreeParams::default(), &mut rng);
        for (i, row) in x.rows().into_iter().enumerate() {
            let p = t.leaf_value(row.as_slice().unwrap());
            assert_eq!(p[y[i]], 1.0);
        }
    }

    #[test]
    fn depth_limit_is_respected() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]];
        let y = [0, 1, 0, 1, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = TreeParams {
            max_depth: Some(2),
            ..TreeParams::default()
        };
        let t = fit_classifier(x.view(), &y, &[1.0; 6], 2, (0..6).collect(), params, &mut rng);
        assert!(t.depth() <= 2);
    }

    #[test]
    fn newton_leaf_is_regularized_mean_step() {
        let x = array![[0.0], [0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = fit_newton(x.view(), &[1.0, 3.0], &[1.0, 1.0], 2.0, TreeParams::default(), &mut rng);
        assert_eq!(t.leaf_value(&[0.0]), &[-1.0]);
    }
}
