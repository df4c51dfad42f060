//! Dense row-major helpers for the small fixed maps inside the backends.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Self { rows, cols, data }
    }

    pub fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `self · x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += yr * m;
            }
        }
        out
    }
}

/// `n × k` matrix with orthonormal columns, from the QR factor of a Gaussian draw.
pub fn orthonormal_columns<R: Rng>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= n, "cannot fit {k} orthonormal columns in dimension {n}");
    let g = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Like [`orthonormal_columns`], but the first column spans `first`.
pub fn orthonormal_columns_with<R: Rng>(first: &[f64], k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = first.len();
    let mut g = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (r, &v) in first.iter().enumerate() {
        g[(r, 0)] = v;
    }
    let mut q = g.qr().q();
    // Householder QR may flip signs; keep the first column aligned with `first`.
    let s: f64 = (0..n).map(|r| q[(r, 0)] * first[r]).sum();
    if s < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}
