//! Class-conditional Gaussians with a shared covariance over penultimate
//! features.

use nalgebra::{DMatrix, DVector};

use crate::error::{OltError, Result};
use crate::tensor::Tensor;

/// Default relative ridge added to the pooled covariance.
pub const DEFAULT_COV_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MahalanobisModel {
    means: Vec<DVector<f64>>,
    /// Lower Cholesky factor `L` of the regularized covariance, `Σ = L Lᵀ`.
    chol: DMatrix<f64>,
    pub cov_eps: f64,
}

impl MahalanobisModel {
    /// Class means and pooled within-class covariance `S / N`, plus
    /// `cov_eps · (tr(S/N) / d) · I`.
    pub fn fit(features: &Tensor, labels: &[usize], num_classes: usize, cov_eps: f64) -> Result<Self> {
        let (n, d) = features.dims2("fit_mahalanobis")?;
        if labels.len() != n {
            return Err(OltError::Shape {
                op: "fit_mahalanobis",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut counts = vec![0usize; num_classes];
        let mut means = vec![DVector::<f64>::zeros(d); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(OltError::InvalidArgument(format!("label {y} out of range")));
            }
            counts[y] += 1;
            means[y] += DVector::from_row_slice(features.row(i));
        }
        if let Some(c) = counts.iter().position(|&c| c < 2) {
            return Err(OltError::InvalidArgument(format!(
                "class {c} has {} samples; Mahalanobis fitting needs at least 2",
                counts[c]
            )));
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            *m /= c as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for (i, &y) in labels.iter().enumerate() {
            let centered = DVector::from_row_slice(features.row(i)) - &means[y];
            cov.ger(1.0, &centered, &centered, 1.0);
        }
        cov /= n as f64;
        let ridge = cov_eps * (cov.trace() / d as f64).max(f64::MIN_POSITIVE);
        for j in 0..d {
            cov[(j, j)] += ridge;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| OltError::InvalidArgument("regularized covariance is not positive-definite".into()))?
            .l();
        Ok(MahalanobisModel { means, chol, cov_eps })
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    /// `(h - μ_c)ᵀ Σ⁻¹ (h - μ_c)` for every class.
    pub fn distances_sq(&self, h: &[f64]) -> Vec<f64> {
        let h = DVector::from_row_slice(h);
        self.means
            .iter()
            .map(|m| {
                let diff = &h - m;
                let y = self
                    .chol
                    .solve_lower_triangular(&diff)
                    .expect("cholesky factor has a non-zero diagonal");
                y.norm_squared()
            })
            .collect()
    }

    /// `-min_c` squared Mahalanobis distance.
    pub fn score(&self, h: &[f64]) -> f64 {
        -self.distances_sq(h).into_iter().fold(f64::INFINITY, f64::min)
    }
}
