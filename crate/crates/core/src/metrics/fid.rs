use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOL · scale` are clipped to zero; anything lower
/// means the input was not a covariance.
const PSD_TOL: f64 = 1e-6;

/// Mean and covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance (zero covariance for one sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::InvalidInput("no feature vectors".into()))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        if features.len() > 1 {
            for f in features {
                for i in 0..d {
                    let di = f[i] - mean[i];
                    for j in 0..d {
                        cov[i * d + j] += di * (f[j] - mean[j]) / (n - 1.0);
                    }
                }
            }
        }
        Ok(Self { mean, cov })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = SymmetricEigen::new(sym);
    if let Some(&low) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOL * scale) {
        return Err(Error::InvalidInput(format!(
            "{what} is not positive semidefinite (eigenvalue {low:e})"
        )));
    }
    Ok(eig)
}

fn sqrt_psd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// `Tr (Σ₁Σ₂)^{1/2}` is evaluated as `Tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`, whose
/// argument is symmetric, so both roots come from symmetric eigensolves.
pub fn fid(real: &FeatureStats, fake: &FeatureStats) -> Result<f64> {
    let d = real.dim();
    if fake.dim() != d || real.cov.len() != d * d || fake.cov.len() != d * d {
        return Err(Error::Shape(format!(
            "feature stats of dimension {d} vs {}",
            fake.dim()
        )));
    }
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(&fake.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1 = real.cov_matrix();
    let s2 = fake.cov_matrix();
    psd_eigen(s2.clone(), "second covariance")?;
    let root1 = sqrt_psd(s1.clone(), "first covariance")?;
    let inner = &root1 * &s2 * &root1;
    let cross = psd_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum::<f64>();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
