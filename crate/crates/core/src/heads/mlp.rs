//! One-hidden-layer perceptron (ReLU, softmax output) trained with Adam on
//! weighted cross-entropy plus L2.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Standardizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    standardizer: Standardizer,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub hidden: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Mlp {
    fn hidden(&self, xs: &Array2<f64>) -> Array2<f64> {
        (xs.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0))
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let xs = self.standardizer.apply(x);
        self.hidden(&xs).dot(&self.w2) + &self.b2
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let mut at = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                self.m[at] = B1 * self.m[at] + (1.0 - B1) * gi;
                self.v[at] = B2 * self.v[at] + (1.0 - B2) * gi * gi;
                *pi -= lr * (self.m[at] / c1) / ((self.v[at] / c2).sqrt() + 1e-8);
                at += 1;
            }
        }
    }
}

pub fn fit_mlp(
    x: ArrayView2<f64>,
    y: &[usize],
    weight: &[f64],
    k: usize,
    params: MlpParams,
    rng: &mut ChaCha8Rng,
) -> Mlp {
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x);
    let (n, d) = xs.dim();
    let h = params.hidden.max(1);
    let mut m = Mlp {
        standardizer,
        w1: glorot(rng, d, h),
        b1: Array1::zeros(h),
        w2: glorot(rng, h, k),
        b2: Array1::zeros(k),
    };
    let mean_w = weight.iter().sum::<f64>() / n as f64;
    let mut adam = Adam::new(d * h + h + h * k + k);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = params.batch_size.max(1);
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let xb = xs.select(Axis(0), chunk);
            let pre = xb.dot(&m.w1) + &m.b1;
            let act = pre.mapv(|v| v.max(0.0));
            let mut delta = act.dot(&m.w2) + &m.b2;
            let scale = 1.0 / (chunk.len() as f64 * mean_w);
            for (r, &i) in chunk.iter().enumerate() {
                let mut row = delta.row_mut(r);
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
                row[y[i]] -= 1.0;
                row.mapv_inplace(|v| v * weight[i] * scale);
            }
            let reg = params.alpha / n as f64;
            let gw2 = act.t().dot(&delta) + &(&m.w2 * reg);
            let gb2 = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&m.w2.t());
            back.zip_mut_with(&pre, |b, &p| {
                if p <= 0.0 {
                    *b = 0.0
                }
            });
            let gw1 = xb.t().dot(&back) + &(&m.w1 * reg);
            let gb1 = back.sum_axis(Axis(0));
            adam.step(
                &mut [
                    m.w1.as_slice_mut().expect("standard layout"),
                    m.b1.as_slice_mut().expect("standard layout"),
                    m.w2.as_slice_mut().expect("standard layout"),
                    m.b2.as_slice_mut().expect("standard layout"),
                ],
                &[
                    gw1.as_slice().expect("standard layout"),
                    gb1.as_slice().expect("standard layout"),
                    gw2.as_slice().expect("standard layout"),
                    gb2.as_slice().expect("standard layout"),
                ],
                params.learning_rate,
            );
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn learns_xor() {
        let base = [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for rep in 0..10 {
            for (i, p) in base.iter().enumerate() {
                rows.extend([p[0] + rep as f64 * 1e-3, p[1]]);
                y.push(i / 2);
            }
        }
        let x = Array2::from_shape_vec((40, 2), rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = MlpParams {
            hidden: 16,
            alpha: 1e-4,
            learning_rate: 0.01,
            epochs: 300,
            batch_size: 8,
        };
        let m = fit_mlp(x.view(), &y, &[1.0; 40], 2, params, &mut rng);
        let s = m.scores(x.view());
        for (i, row) in s.rows().into_iter().enumerate() {
            let pred = usize::from(row[1] > row[0]);
            assert_eq!(pred, y[i], "row {i}");
        }
    }
}
