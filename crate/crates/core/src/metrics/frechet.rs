//! Gaussian moment matching: `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Eigenvalues below `-PSD_TOL * max(1, largest |eigenvalue|)` are an error;
/// anything above is clipped to zero.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of row vectors.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(invalid("feature statistics need at least two samples"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn checked_eigen(m: DMatrix<f64>, context: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            context: context.into(),
        });
    }
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(e)
}

/// PSD square root by eigendecomposition of the symmetrized input.
pub fn sqrtm_psd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let e = checked_eigen(m.clone(), context)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

pub fn frechet(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let root_a = sqrtm_psd(&a.cov, "first covariance")?;
    checked_eigen(b.cov.clone(), "second covariance")?;
    // tr((S_a S_b)^{1/2}) = tr((R S_b R)^{1/2}) with R = S_a^{1/2}, symmetric
    let inner = &root_a * &b.cov * &root_a;
    let e = checked_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let v = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}
