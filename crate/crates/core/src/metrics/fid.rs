//! Fréchet distance between Gaussian fits of feature sets.

use super::linalg::{matrix_sqrt_psd, trace_sqrt_psd, Matrix};
use crate::error::{Error, Result};

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidArgument("feature vectors must share a non-zero dimension".into()));
        }
        let mut mu = vec![0.0; d];
        for f in features {
            for (m, v) in mu.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        let mut sigma = Matrix::zeros(d);
        for f in features {
            let c: Vec<f64> = f.iter().zip(&mu).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    sigma.data[i * d + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = sigma.get(i, j) / (n - 1) as f64;
                sigma.set(i, j, v);
                sigma.set(j, i, v);
            }
        }
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `|mu_r - mu_g|^2 + tr(S_r + S_g) - 2 tr((S_r^{1/2} S_g S_r^{1/2})^{1/2})`,
/// clipped at zero.
pub fn fid(real: &FeatureStats, generated: &FeatureStats) -> Result<f64> {
    if real.dim() != generated.dim() {
        return Err(Error::InvalidArgument(format!("feature dimensions differ: {} vs {}", real.dim(), generated.dim())));
    }
    let mean_term: f64 = real.mu.iter().zip(&generated.mu).map(|(a, b)| (a - b).powi(2)).sum();
    let root_r = matrix_sqrt_psd(&real.sigma)?;
    let inner = root_r.matmul(&generated.sigma).matmul(&root_r).symmetrized();
    let cross = trace_sqrt_psd(&inner)?;
    let value = mean_term + real.sigma.trace() + generated.sigma.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
