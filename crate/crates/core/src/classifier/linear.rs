//! Softmax regression (L-BFGS) and one-hot ridge regression, both on
//! standardised features.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gbt::softmax_into;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearParams {
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { l2: 1e-4, max_iter: 200 }
    }
}

/// `scores = ((x - mean) / scale) W + bias`, with `W` stored `[F, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
    pub classes: usize,
}

impl LinearModel {
    pub fn scores(&self, row: &[f32], out: &mut [f32]) {
        let c = self.classes;
        out.copy_from_slice(&self.bias);
        for (f, &x) in row.iter().enumerate() {
            let z = (x - self.mean[f]) / self.scale[f];
            if z == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&self.weights[f * c..(f + 1) * c]) {
                *o += z * w;
            }
        }
    }

    pub fn probabilities(&self, row: &[f32], out: &mut [f32]) {
        let mut s = vec![0.0f32; self.classes];
        self.scores(row, &mut s);
        softmax_into(&s, out);
    }
}

const CHUNK: usize = 1024;

/// Standardised copy of `data` in f64 plus the per-feature mean and scale.
fn standardize(data: &[f32], m: usize, f: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; f];
    for row in data.chunks(f) {
        for (a, &x) in mean.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut var = vec![0.0f64; f];
    for row in data.chunks(f) {
        for ((v, &x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x as f64 - mu).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / m as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z = data
        .chunks(f)
        .flat_map(|row| row.iter().enumerate().map(|(j, &x)| (x as f64 - mean[j]) / scale[j]))
        .collect();
    (z, mean, scale)
}

fn finish(w: &[f64], b: &[f64], mean: Vec<f64>, scale: Vec<f64>, classes: usize) -> LinearModel {
    LinearModel {
        weights: w.iter().map(|&v| v as f32).collect(),
        bias: b.iter().map(|&v| v as f32).collect(),
        mean: mean.into_iter().map(|v| v as f32).collect(),
        scale: scale.into_iter().map(|v| v as f32).collect(),
        classes,
    }
}

/// Mean cross-entropy plus `l2/2 |W|^2` and its gradient; `theta = [W (F*C), b (C)]`.
fn softmax_loss(theta: &[f64], z: &[f64], labels: &[usize], f: usize, c: usize, l2: f64) -> (f64, Vec<f64>) {
    let m = labels.len();
    let partial: Vec<(f64, Vec<f64>)> = z
        .par_chunks(CHUNK * f)
        .zip(labels.par_chunks(CHUNK))
        .map(|(zs, ys)| {
            let mut grad = vec![0.0f64; theta.len()];
            let mut loss = 0.0;
            let mut s = vec![0.0f64; c];
            for (row, &y) in zs.chunks(f).zip(ys) {
                s.copy_from_slice(&theta[f * c..]);
                for (j, &x) in row.iter().enumerate() {
                    for k in 0..c {
                        s[k] += x * theta[j * c + k];
                    }
                }
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = s.iter().map(|v| (v - max).exp()).sum();
                loss += max + total.ln() - s[y];
                for k in 0..c {
                    let d = (s[k] - max).exp() / total - if k == y { 1.0 } else { 0.0 };
                    grad[f * c + k] += d;
                    for (j, &x) in row.iter().enumerate() {
                        grad[j * c + k] += d * x;
                    }
                }
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; theta.len()];
    for (l, g) in partial {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    loss /= m as f64;
    grad.iter_mut().for_each(|g| *g /= m as f64);
    for i in 0..f * c {
        loss += 0.5 * l2 * theta[i] * theta[i];
        grad[i] += l2 * theta[i];
    }
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs(mut x: Vec<f64>, max_iter: usize, eval: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> Vec<f64> {
    const HISTORY: usize = 10;
    let (mut fx, mut g) = eval(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    for _ in 0..max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < 1e-7 {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(a, b)| *a -= alpha[i] * b);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / gnorm.max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(a, b)| *a += (alpha[i] - beta) * b);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, gc) = eval(&cand);
            if fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let s: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let improvement = fx - fc;
        x = cand;
        g = gc;
        fx = fc;
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        if improvement.abs() < 1e-12 * fx.abs().max(1.0) {
            break;
        }
    }
    x
}

pub fn train_logistic(data: &[f32], labels: &[usize], f: usize, classes: usize, params: &LinearParams) -> LinearModel {
    let m = labels.len();
    let (z, mean, scale) = standardize(data, m, f);
    let theta = lbfgs(vec![0.0; f * classes + classes], params.max_iter, |t| {
        softmax_loss(t, &z, labels, f, classes, params.l2)
    });
    finish(&theta[..f * classes], &theta[f * classes..], mean, scale, classes)
}

/// Ridge regression onto one-hot targets: `(Z'Z/M + l2 I) W = Z'Y/M`,
/// with an unpenalised intercept equal to the class frequencies.
pub fn train_linear(data: &[f32], labels: &[usize], f: usize, classes: usize, params: &LinearParams) -> LinearModel {
    let m = labels.len();
    let (z, mean, scale) = standardize(data, m, f);
    let mut freq = vec![0.0f64; classes];
    for &y in labels {
        freq[y] += 1.0 / m as f64;
    }
    let mut gram = DMatrix::<f64>::zeros(f, f);
    let mut rhs = DMatrix::<f64>::zeros(f, classes);
    for (row, &y) in z.chunks(f).zip(labels) {
        for i in 0..f {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..f {
                gram[(i, j)] += row[i] * row[j];
            }
            for k in 0..classes {
                let t = if k == y { 1.0 } else { 0.0 } - freq[k];
                rhs[(i, k)] += row[i] * t;
            }
        }
    }
    for i in 0..f {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    gram /= m as f64;
    rhs /= m as f64;
    let mut ridge = params.l2.max(1e-12);
    let w = loop {
        let a = &gram + DMatrix::<f64>::identity(f, f) * ridge;
        if let Some(ch) = a.cholesky() {
            break ch.solve(&rhs);
        }
        ridge *= 10.0;
    };
    let mut wv = Vec::with_capacity(f * classes);
    for i in 0..f {
        for k in 0..classes {
            wv.push(w[(i, k)]);
        }
    }
    finish(&wv, &freq, mean, scale, classes)
}
