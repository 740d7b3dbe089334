use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

/// Mean and (unbiased) covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::InvalidShape {
                shape: vec![d, d],
                len: cov.len(),
            });
        }
        let stats = Self { mean, cov };
        stats.validate()?;
        Ok(stats)
    }

    /// Statistics of the rows of `features`.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("feature statistics need ≥ 2 rows, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidArgument("feature rows of unequal width".into()));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }

    /// Symmetric within tolerance and without eigenvalues below `−1e-8`.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            for j in 0..i {
                if (self.cov[i * d + j] - self.cov[j * d + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let min = min_eigenvalue(&symmetrize(self.matrix()));
        if min < -PSD_TOL {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
        Ok(())
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn sqrtm_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "fid",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    a.validate()?;
    b.validate()?;
    let mu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let (s1, s2) = (symmetrize(a.matrix()), symmetrize(b.matrix()));
    let r1 = sqrtm_psd(s1.clone());
    let cross = sqrtm_psd(&r1 * &s2 * &r1);
    let value = mu.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(mean: &[f64], var: &[f64]) -> FeatureStats {
        let d = var.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var[i];
        }
        FeatureStats::new(mean.to_vec(), cov).unwrap()
    }

    #[test]
    fn closed_forms() {
        let a = diag(&[0.0, 0.0], &[1.0, 1.0]);
        let b = diag(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        assert!(fid(&a, &a).unwrap().abs() < 1e-12);
        let c = diag(&[0.0, 0.0], &[4.0, 1.0]);
        assert!((fid(&a, &c).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let bad = FeatureStats::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]);
        match bad {
            Err(Error::NotPsd { min_eigenvalue }) => assert!((min_eigenvalue + 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stats_from_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 4.0]];
        let s = FeatureStats::from_features(&rows).unwrap();
        assert_eq!(s.mean, vec![3.0, 4.0]);
        assert_eq!(s.cov, vec![4.0, 2.0, 2.0, 4.0]);
    }
}
