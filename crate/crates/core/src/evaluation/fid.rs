use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_parts(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::FeatureShapeMismatch(format!(
                "covariance has {} entries for dimension {d}",
                covariance.len()
            )));
        }
        Ok(Self { mean, covariance })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }
}

pub fn gaussian_moments(features: &[Vec<f64>]) -> Result<GaussianMoments> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "moments need at least 2 samples, got {n}"
        )));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::InsufficientData("features have dimension 0".into()));
    }
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::FeatureShapeMismatch(format!(
            "feature of width {} among width {d}",
            f.len()
        )));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| features[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    let mut covariance = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            covariance.push(cov[(r, c)]);
        }
    }
    Ok(GaussianMoments { mean, covariance })
}

/// Symmetric PSD square root with negative eigenvalues clipped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace of `(Σa Σb)^{1/2}`, computed as the trace of the square root of the
/// symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which has the same spectrum.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::FeatureShapeMismatch(format!(
            "moments of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let ca = a.cov_matrix();
    let cb = b.cov_matrix();
    let tr = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok((mu.norm_squared() + tr).max(0.0))
}

/// FID between two feature sets.
pub fn fid(real: &[Vec<f64>], other: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&gaussian_moments(real)?, &gaussian_moments(other)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn moments_1d(mu: f64, var: f64) -> GaussianMoments {
        GaussianMoments::from_parts(vec![mu], vec![var]).unwrap()
    }

    #[test]
    fn two_point_moments() {
        let m = gaussian_moments(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(m.mean, vec![1.0]);
        assert_eq!(m.covariance, vec![2.0]);
    }

    #[test]
    fn constant_features_have_zero_covariance() {
        let m = gaussian_moments(&vec![vec![3.0, -1.0]; 5]).unwrap();
        assert!(m.covariance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(gaussian_moments(&[vec![1.0]]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..8).map(|_| rng.random_range(-2.0..3.0)).collect())
            .collect();
        let m = gaussian_moments(&x).unwrap();
        for i in 0..8 {
            let mut mean = 0.0;
            for row in &x {
                mean += row[i];
            }
            mean /= 500.0;
            assert!((m.mean[i] - mean).abs() < 1e-8);
            for j in 0..8 {
                let mut mj = 0.0;
                for row in &x {
                    mj += row[j];
                }
                mj /= 500.0;
                let mut c = 0.0;
                for row in &x {
                    c += (row[i] - mean) * (row[j] - mj);
                }
                c /= 499.0;
                assert!((m.covariance[i * 8 + j] - c).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scalar_closed_form() {
        let d = frechet_distance(&moments_1d(0.0, 1.0), &moments_1d(3.0, 4.0)).unwrap();
        assert!((d - 10.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn identical_moments_have_zero_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = gaussian_moments(&x).unwrap();
        assert!(frechet_distance(&m, &m).unwrap() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            frechet_distance(&moments_1d(0.0, 1.0), &GaussianMoments::from_parts(vec![0.0; 2], vec![0.0; 4]).unwrap()),
            Err(Error::FeatureShapeMismatch(_))
        ));
    }
}
