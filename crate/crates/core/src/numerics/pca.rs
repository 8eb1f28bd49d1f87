use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const COV_CHUNK: usize = 4096;

/// Principal axes of a sample set.
///
/// `components` is `k x F` row-major; rows are orthonormal and ordered by
/// descending explained variance. Each row's largest-magnitude coefficient
/// is positive so results do not depend on the eigensolver's sign choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    pub components: Vec<f32>,
    pub explained_variance: Vec<f32>,
    pub n_features: usize,
    pub n_components: usize,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Projects one feature vector into `out` (length `n_components`).
    pub fn project_row(&self, row: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let comp = self.component(i);
            let mut acc = 0.0f64;
            for ((&v, &m), &c) in row.iter().zip(&self.mean).zip(comp) {
                acc += (v - m) as f64 * c as f64;
            }
            *o = acc as f32;
        }
    }

    /// Maps projected coordinates back to feature space.
    pub fn reconstruct_row(&self, coords: &[f32]) -> Vec<f32> {
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (i, &z) in coords.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.component(i)) {
                *o += z as f64 * c as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

/// Fits a `k`-component PCA to the rows of `samples` (`[M, F]`).
///
/// Variances use the unbiased `M - 1` normalisation (plain `M` when `M = 1`).
pub fn pca_fit(samples: &Tensor, k: usize) -> Result<PcaModel> {
    let (m, f) = samples.matrix()?;
    pca_fit_rows(samples.data(), m, f, k)
}

pub(crate) fn pca_fit_rows(data: &[f32], m: usize, f: usize, k: usize) -> Result<PcaModel> {
    if k == 0 || k > f {
        return Err(Error::arg(format!("k = {k} must be within 1..={f}")));
    }
    if m < k {
        return Err(Error::arg(format!("{m} samples cannot support {k} components")));
    }
    let mean = column_mean(data, m, f);
    let cov = covariance(data, m, f, &mean);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(f, f, &cov));
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(k * f);
    let mut explained_variance = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let v = eig.eigenvectors.column(col);
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|&x| (x * sign) as f32));
        explained_variance.push(eig.eigenvalues[col].max(0.0) as f32);
    }
    Ok(PcaModel {
        mean: mean.iter().map(|&v| v as f32).collect(),
        components,
        explained_variance,
        n_features: f,
        n_components: k,
    })
}

/// `(samples - mean) . components^T` for `[M, F]` samples.
pub fn pca_project(model: &PcaModel, samples: &Tensor) -> Result<Tensor> {
    let (m, f) = samples.matrix()?;
    if f != model.n_features {
        return Err(Error::shape(format!(
            "samples have {f} features, model expects {}",
            model.n_features
        )));
    }
    let k = model.n_components;
    let mut out = vec![0.0f32; m * k];
    out.par_chunks_mut(k)
        .zip(samples.data().par_chunks(f))
        .for_each(|(o, row)| model.project_row(row, o));
    Tensor::new(vec![m, k], out)
}

fn column_mean(data: &[f32], m: usize, f: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(COV_CHUNK * f)
        .map(|chunk| {
            let mut s = vec![0.0f64; f];
            for row in chunk.chunks(f) {
                for (a, &v) in s.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            s
        })
        .collect();
    let mut mean = vec![0.0f64; f];
    for p in partials {
        for (a, v) in mean.iter_mut().zip(p) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    mean
}

// Upper triangle accumulated per fixed-size chunk, then summed in chunk order
// so the result does not depend on thread scheduling.
fn covariance(data: &[f32], m: usize, f: usize, mean: &[f64]) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(COV_CHUNK * f)
        .map(|chunk| {
            let mut acc = vec![0.0f64; f * f];
            let mut centred = vec![0.0f64; f];
            for row in chunk.chunks(f) {
                for ((c, &v), &mu) in centred.iter_mut().zip(row).zip(mean) {
                    *c = v as f64 - mu;
                }
                for i in 0..f {
                    let ci = centred[i];
                    if ci == 0.0 {
                        continue;
                    }
                    let dst = &mut acc[i * f + i..(i + 1) * f];
                    for (d, &cj) in dst.iter_mut().zip(&centred[i..]) {
                        *d += ci * cj;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = vec![0.0f64; f * f];
    for p in partials {
        for (a, v) in cov.iter_mut().zip(p) {
            *a += v;
        }
    }
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    for i in 0..f {
        for j in i..f {
            let v = cov[i * f + j] / denom;
            cov[i * f + j] = v;
            cov[j * f + i] = v;
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    // Cyclic Jacobi rotations; independent of the production eigensolver.
    fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-30 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i * n + i]).collect(), v)
    }

    fn random(m: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // anisotropic so eigenvalues are well separated
        let data = (0..m * f)
            .map(|i| rng.random_range(-1.0f32..1.0) * (1.0 + (i % f) as f32))
            .collect();
        Tensor::new(vec![m, f], data).unwrap()
    }

    #[test]
    fn line_y_equals_x() {
        let pts: Vec<f32> = (0..10).flat_map(|i| [i as f32, i as f32]).collect();
        let model = pca_fit(&Tensor::new(vec![10, 2], pts).unwrap(), 2).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((model.component(0)[0] - s).abs() < 1e-6);
        assert!((model.component(0)[1] - s).abs() < 1e-6);
        assert!(model.explained_variance[1].abs() < 1e-6);
        // var of 0..9 is 55/6 per axis; along the diagonal it doubles
        assert!((model.explained_variance[0] - 55.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn full_rank_reconstruction() {
        let x = random(50, 6, 1);
        let model = pca_fit(&x, 6).unwrap();
        let z = pca_project(&model, &x).unwrap();
        for (row, zrow) in x.data().chunks(6).zip(z.data().chunks(6)) {
            let back = model.reconstruct_row(zrow);
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_samples_zero_variance() {
        let x = Tensor::new(vec![5, 3], [1.0, 2.0, 3.0].repeat(5)).unwrap();
        let model = pca_fit(&x, 2).unwrap();
        assert!(model.explained_variance.iter().all(|&v| v == 0.0));
        let z = pca_project(&model, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argument_errors() {
        let x = random(3, 4, 2);
        assert!(matches!(pca_fit(&x, 5), Err(Error::Argument(_))));
        assert!(matches!(pca_fit(&x, 4), Err(Error::Argument(_))));
        let model = pca_fit(&x, 2).unwrap();
        let wrong = random(3, 5, 3);
        assert!(matches!(pca_project(&model, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_projects_to_zero() {
        let x = random(40, 5, 4);
        let model = pca_fit(&x, 3).unwrap();
        let mean = Tensor::new(vec![1, 5], model.mean.clone()).unwrap();
        let z = pca_project(&model, &mean).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn orthogonal_unit_vectors_match_jacobi() {
        // three orthogonal unit vectors as samples; covariance is 3x3
        let x = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let model = pca_fit(&x, 2).unwrap();
        let z = pca_project(&model, &x).unwrap();
        // oracle: covariance by hand, then Jacobi
        let mean = [1.0 / 3.0; 3];
        let mut cov = vec![0.0f64; 9];
        for r in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let a = x.data()[r * 3 + i] as f64 - mean[i];
                    let b = x.data()[r * 3 + j] as f64 - mean[j];
                    cov[i * 3 + j] += a * b / 2.0;
                }
            }
        }
        let (vals, _) = jacobi_eigen(cov, 3);
        let mut vals = vals;
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // degenerate top eigenvalue 0.5 (twice), third is 0
        assert!((model.explained_variance[0] as f64 - vals[0]).abs() < 1e-5);
        assert!((model.explained_variance[1] as f64 - vals[1]).abs() < 1e-5);
        // coordinates must reproduce the sample covariance within the retained subspace
        for (c, want) in vals.iter().take(2).enumerate() {
            let col: Vec<f64> = (0..3).map(|r| z.data()[r * 2 + c] as f64).collect();
            let var = col.iter().map(|v| v * v).sum::<f64>() / 2.0;
            assert!((var - want).abs() < 1e-5);
        }
    }

    #[test]
    fn anisotropic_matches_jacobi_oracle() {
        let x = random(200, 5, 9);
        let model = pca_fit(&x, 5).unwrap();
        let (m, f) = (200, 5);
        let mut mean = vec![0.0f64; f];
        for row in x.data().chunks(f) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += *v as f64 / m as f64;
            }
        }
        let mut cov = vec![0.0f64; f * f];
        for r in 0..m {
            for i in 0..f {
                for j in 0..f {
                    cov[i * f + j] += (x.data()[r * f + i] as f64 - mean[i])
                        * (x.data()[r * f + j] as f64 - mean[j])
                        / (m - 1) as f64;
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, f);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        for (rank, &col) in order.iter().enumerate() {
            assert!((model.explained_variance[rank] as f64 - vals[col]).abs() < 1e-4 * vals[col].max(1.0));
            let dot: f64 = (0..f)
                .map(|i| vecs[i * f + col] * model.component(rank)[i] as f64)
                .sum();
            assert!((dot.abs() - 1.0).abs() < 1e-4, "component {rank} dot {dot}");
        }
    }

    #[test]
    fn orthonormal_and_sorted() {
        let x = random(500, 20, 7);
        let model = pca_fit(&x, 20).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let dot: f64 = model
                    .component(i)
                    .iter()
                    .zip(model.component(j))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-5);
            }
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..20 {
            let c = model.component(i);
            let pivot = c.iter().cloned().fold(0.0f32, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn projection_variance_is_explained_variance() {
        let x = random(500, 20, 11);
        let model = pca_fit(&x, 8).unwrap();
        let z = pca_project(&model, &x).unwrap();
        for c in 0..8 {
            let col: Vec<f64> = z.data().chunks(8).map(|r| r[c] as f64).collect();
            let mu = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 499.0;
            assert!((var - model.explained_variance[c] as f64).abs() < 1e-4 * var.max(1.0));
        }
    }
}
