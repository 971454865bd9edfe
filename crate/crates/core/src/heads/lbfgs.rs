//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

const HISTORY: usize = 10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes a smooth objective. `objective(x, grad)` returns f(x) and writes
/// the gradient into `grad`.
pub fn minimize<F>(mut objective: F, mut x: Vec<f64>, max_iter: usize, tol: f64) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut fx = objective(&x, &mut grad);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];

    for _ in 0..max_iter {
        if grad.iter().all(|g| g.abs() < tol) {
            break;
        }
        // two-loop recursion
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        } else {
            let norm = dot(&grad, &grad).sqrt();
            dir.iter_mut().for_each(|d| *d /= norm.max(1.0));
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (a - b) * si;
            }
        }
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = x[i] + step * dir[i];
            }
            let ft = objective(&trial, &mut trial_grad);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| trial_grad[i] - grad[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 {
                    if history.len() == HISTORY {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                let improvement = fx - ft;
                x.copy_from_slice(&trial);
                grad.copy_from_slice(&trial_grad);
                fx = ft;
                if improvement.abs() <= 1e-12 * fx.abs().max(1.0) {
                    return x;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_quadratic() {
        // f = (x - 3)^2 + 10 (y + 1)^2
        let x = minimize(
            |p, g| {
                g[0] = 2.0 * (p[0] - 3.0);
                g[1] = 20.0 * (p[1] + 1.0);
                (p[0] - 3.0).powi(2) + 10.0 * (p[1] + 1.0).powi(2)
            },
            vec![0.0, 0.0],
            100,
            1e-10,
        );
        assert!((x[0] - 3.0).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn solves_rosenbrock() {
        let x = minimize(
            |p, g| {
                let (a, b) = (p[0], p[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            vec![-1.2, 1.0],
            500,
            1e-9,
        );
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4, "{x:?}");
    }
}
