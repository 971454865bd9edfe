//! Linear heads: multinomial logistic regression and a one-vs-rest linear
//! support-vector classifier (squared hinge), both fitted with L-BFGS on
//! standardized features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::lbfgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    standardizer: Standardizer,
    /// classes x features
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearModel {
    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.standardizer.apply(x).dot(&self.weights.t()) + &self.bias
    }
}

fn unpack(params: &[f64], k: usize, d: usize) -> (ArrayView2<'_, f64>, &[f64]) {
    let w = ArrayView2::from_shape((k, d), &params[..k * d]).expect("parameter layout");
    (w, &params[k * d..])
}

fn finish(standardizer: Standardizer, params: Vec<f64>, k: usize, d: usize) -> LinearModel {
    let weights = Array2::from_shape_vec((k, d), params[..k * d].to_vec()).expect("parameter layout");
    let bias = Array1::from(params[k * d..].to_vec());
    LinearModel {
        standardizer,
        weights,
        bias,
    }
}

/// Minimizes `sum_i w_i CE_i / sum_i w_i + |W|^2 / (2 C n)`.
pub fn fit_logistic(
    x: ArrayView2<f64>,
    y: &[usize],
    sample_weight: &[f64],
    k: usize,
    c: f64,
    max_iter: usize,
) -> LinearModel {
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x);
    let (n, d) = xs.dim();
    let total_w: f64 = sample_weight.iter().sum();
    let reg = 1.0 / (2.0 * c * n as f64);
    let objective = |p: &[f64], grad: &mut [f64]| -> f64 {
        let (w, b) = unpack(p, k, d);
        let logits = xs.dot(&w.t()) + &Array1::from(b.to_vec());
        let mut coef = Array2::<f64>::zeros((n, k));
        let mut loss = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let wi = sample_weight[i] / total_w;
            loss += wi * (lse - row[y[i]]);
            for j in 0..k {
                coef[[i, j]] = wi * (row[j] - lse).exp();
            }
            coef[[i, y[i]]] -= wi;
        }
        let gw = coef.t().dot(&xs);
        let gb = coef.sum_axis(Axis(0));
        for j in 0..k {
            for f in 0..d {
                let wv = w[[j, f]];
                loss += reg * wv * wv;
                grad[j * d + f] = gw[[j, f]] + 2.0 * reg * wv;
            }
            grad[k * d + j] = gb[j];
        }
        loss
    };
    let params = lbfgs::minimize(objective, vec![0.0; k * d + k], max_iter, 1e-6);
    finish(standardizer, params, k, d)
}

/// One-vs-rest squared hinge: for every class `j`,
/// `sum_i w_i max(0, 1 - t_ij s_ij)^2 / sum_i w_i + |W_j|^2 / (2 C n)`.
pub fn fit_linear_svc(
    x: ArrayView2<f64>,
    y: &[usize],
    sample_weight: &[f64],
    k: usize,
    c: f64,
    max_iter: usize,
) -> LinearModel {
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x);
    let (n, d) = xs.dim();
    let total_w: f64 = sample_weight.iter().sum();
    let reg = 1.0 / (2.0 * c * n as f64);
    let objective = |p: &[f64], grad: &mut [f64]| -> f64 {
        let (w, b) = unpack(p, k, d);
        let scores = xs.dot(&w.t()) + &Array1::from(b.to_vec());
        let mut coef = Array2::<f64>::zeros((n, k));
        let mut loss = 0.0;
        for i in 0..n {
            let wi = sample_weight[i] / total_w;
            for j in 0..k {
                let t = if y[i] == j { 1.0 } else { -1.0 };
                let margin = 1.0 - t * scores[[i, j]];
                if margin > 0.0 {
                    loss += wi * margin * margin;
                    coef[[i, j]] = -2.0 * wi * margin * t;
                }
            }
        }
        let gw = coef.t().dot(&xs);
        let gb = coef.sum_axis(Axis(0));
        for j in 0..k {
            for f in 0..d {
                let wv = w[[j, f]];
                loss += reg * wv * wv;
                grad[j * d + f] = gw[[j, f]] + 2.0 * reg * wv;
            }
            grad[k * d + j] = gb[j];
        }
        loss
    };
    let params = lbfgs::minimize(objective, vec![0.0; k * d + k], max_iter, 1e-6);
    finish(standardizer, params, k, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn argmax(scores: &Array2<f64>) -> Vec<usize> {
        scores
            .rows()
            .into_iter()
            .map(|r| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
            .collect()
    }

    #[test]
    fn logistic_fits_three_separable_clusters() {
        let x = array![[0.0, 0.0], [0.1, 0.2], [3.0, 3.0], [3.2, 2.9], [0.0, 3.0], [0.2, 3.1]];
        let y = [0, 0, 1, 1, 2, 2];
        let m = fit_logistic(x.view(), &y, &[1.0; 6], 3, 10.0, 200);
        assert_eq!(argmax(&m.scores(x.view())), y);
    }

    #[test]
    fn svc_separates_clusters() {
        let x = array![[0.0, 0.0], [0.1, 0.2], [3.0, 3.0], [3.2, 2.9]];
        let y = [0, 0, 1, 1];
        let m = fit_linear_svc(x.view(), &y, &[1.0; 4], 2, 1.0, 200);
        assert_eq!(argmax(&m.scores(x.view())), y);
    }
}
