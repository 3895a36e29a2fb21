//! Dense symmetric linear algebra in f64.

use crate::error::{Error, Result};

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidArgument(format!("{} values for a {n}x{n} matrix", data.len())));
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        Matrix { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations: `A = Q diag(w) Q^T`.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut q = Matrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m.get(i, j).powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = m.get(p, r);
                if apr.abs() <= 1e-300 {
                    continue;
                }
                let (app, arr) = (m.get(p, p), m.get(r, r));
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkr) = (m.get(k, p), m.get(k, r));
                    m.set(k, p, c * mkp - s * mkr);
                    m.set(k, r, s * mkp + c * mkr);
                }
                for k in 0..n {
                    let (mpk, mrk) = (m.get(p, k), m.get(r, k));
                    m.set(p, k, c * mpk - s * mrk);
                    m.set(r, k, s * mpk + c * mrk);
                }
                for k in 0..n {
                    let (qkp, qkr) = (q.get(k, p), q.get(k, r));
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), q)
}

/// `Q diag(f(w)) Q^T`.
fn reassemble(w: &[f64], q: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = q.n;
    let fw: Vec<f64> = w.iter().map(|&v| f(v)).collect();
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n).map(|k| q.get(i, k) * fw[k] * q.get(j, k)).sum();
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Tolerance for symmetry and negative eigenvalues, relative to the entry scale.
pub const PSD_TOL: f64 = 1e-8;

fn check_psd(a: &Matrix, w: &[f64]) -> Result<()> {
    let scale = a.max_abs().max(1.0);
    if a.max_asymmetry() > PSD_TOL * scale {
        return Err(Error::Numeric(format!("matrix is not symmetric (asymmetry {:.3e})", a.max_asymmetry())));
    }
    if let Some(&min) = w.iter().min_by(|x, y| x.total_cmp(y)) {
        if min < -PSD_TOL * scale {
            return Err(Error::Numeric(format!("matrix is indefinite (eigenvalue {min:.3e})")));
        }
    }
    Ok(())
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// eigenvalues within tolerance below zero are clipped.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (w, q) = symmetric_eigen(a);
    check_psd(a, &w)?;
    Ok(reassemble(&w, &q, |v| v.max(0.0).sqrt()))
}

/// `tr(A^{1/2})` of a symmetric PSD matrix.
pub fn trace_sqrt_psd(a: &Matrix) -> Result<f64> {
    let (w, _) = symmetric_eigen(a);
    check_psd(a, &w)?;
    Ok(w.iter().map(|v| v.max(0.0).sqrt()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(matrix_sqrt_psd(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let r = matrix_sqrt_psd(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(r.sub(&Matrix::diag(&[2.0, 3.0])).max_abs() < 1e-14);
        let bad = Matrix::from_rows(2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matrix_sqrt_psd(&bad).is_err());
        assert!(matrix_sqrt_psd(&Matrix::diag(&[1.0, -0.5])).is_err());
        assert!(matrix_sqrt_psd(&Matrix::diag(&[1.0, -1e-12])).is_ok());
    }

    #[test]
    fn eigen_reconstructs() {
        let a = Matrix::from_rows(3, vec![2.0, -1.0, 0.5, -1.0, 3.0, 0.25, 0.5, 0.25, 1.0]).unwrap();
        let (w, q) = symmetric_eigen(&a);
        assert!(reassemble(&w, &q, |v| v).sub(&a).max_abs() < 1e-13);
        assert!(q.transpose().matmul(&q).sub(&Matrix::identity(3)).max_abs() < 1e-13);
        assert!((w.iter().sum::<f64>() - a.trace()).abs() < 1e-13);
    }
}
