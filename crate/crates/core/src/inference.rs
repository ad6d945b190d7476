//! Plug-in influence functions, variances and normal confidence intervals.

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::estimators::jacobian_estimate;
use crate::fredholm::Design;

/// Per-row influence values and the resulting variance of `θ̂`.
#[derive(Debug, Clone)]
pub struct EifEvaluation {
    /// `φ_i`, one row per canonical data row.
    pub phi: DMatrix<f64>,
    /// Plug-in `Â = [Ê_q{∂U/∂θᵀ}]⁻¹`.
    pub a_hat: DMatrix<f64>,
    /// `N⁻² Σ_i φ_i φ_iᵀ`.
    pub variance: DMatrix<f64>,
}

impl EifEvaluation {
    fn from_phi(phi: DMatrix<f64>, a_hat: DMatrix<f64>) -> Result<Self> {
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("influence values"));
        }
        let total = phi.nrows() as f64;
        let variance = phi.transpose() * &phi / (total * total);
        Ok(Self { phi, a_hat, variance })
    }

    pub fn std_err(&self) -> Vec<f64> {
        self.variance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Pooled mean of `φ`, one entry per component.
    pub fn mean(&self) -> Vec<f64> {
        self.phi.row_mean().iter().copied().collect()
    }
}

/// `φ_i = -Â (r_i/π · ρ(y_i){U(y_i, x_i, θ) - b̂_i} + (1 - r_i)/(1 - π) · b̂_i)`.
///
/// The sign makes `φ` the linearisation of `θ̂ - θ`; the variance does not
/// depend on it. `b` holds `b̂_i` for every canonical row.
pub fn eif_values(
    design: &Design,
    estimand: &Estimand,
    theta: &[f64],
    rho_labeled: &[f64],
    b: &DMatrix<f64>,
) -> Result<EifEvaluation> {
    let d = estimand.dim();
    let (n, total) = (design.n(), design.total());
    if b.nrows() != total || b.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: total * d,
            found: b.nrows() * b.ncols(),
        });
    }
    let a_hat = jacobian_estimate(design, estimand, theta, rho_labeled)
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("plug-in Jacobian of the estimating function is singular".into()))?;
    let pi = design.pi();
    let mut inner = DMatrix::zeros(total, d);
    let mut u = vec![0.0; d];
    for (i, &y) in design.labeled_y().iter().enumerate() {
        estimand.eval_u(y, design.x(i), theta, &mut u);
        for c in 0..d {
            inner[(i, c)] = rho_labeled[i] * (u[c] - b[(i, c)]) / pi;
        }
    }
    for i in n..total {
        for c in 0..d {
            inner[(i, c)] = b[(i, c)] / (1.0 - pi);
        }
    }
    let phi = -(inner * a_hat.transpose());
    EifEvaluation::from_phi(phi, a_hat)
}

/// Scalar moment form `φ_i = r_i/π · ρ(y_i){s_i - ŷ_i} + (1 - r_i)/(1 - π) · (ŷ_i - θ)`.
pub fn moment_eif(design: &Design, theta: f64, rho_labeled: &[f64], s_labeled: &[f64], predictions: &[f64]) -> Result<EifEvaluation> {
    let (n, total) = (design.n(), design.total());
    if s_labeled.len() != n || predictions.len() != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            found: predictions.len(),
        });
    }
    let pi = design.pi();
    let phi = DMatrix::from_fn(total, 1, |i, _| {
        if i < n {
            rho_labeled[i] * (s_labeled[i] - predictions[i]) / pi
        } else {
            (predictions[i] - theta) / (1.0 - pi)
        }
    });
    EifEvaluation::from_phi(phi, DMatrix::from_element(1, 1, -1.0))
}

/// `θ̂_k ± z_{(1+level)/2} · sd_k`.
pub fn confidence_interval(eif: &EifEvaluation, theta: &[f64], level: f64) -> Result<Vec<[f64; 2]>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let sd = eif.std_err();
    if sd.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            found: sd.len(),
        });
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok(theta.iter().zip(&sd).map(|(t, s)| [t - z * s, t + z * s]).collect())
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Plug-in variance of a `δ` estimate:
/// `mean_L {ρ(K_h - ŷ)}² / n + mean_U (ŷ - δ)² / (N - n)`.
///
/// `kernel_labeled[i] = K_h(y_i - y₀)`; `predictions` covers every
/// canonical row.
pub fn delta0_variance(
    design: &Design,
    delta: f64,
    rho_labeled: &[f64],
    kernel_labeled: &[f64],
    predictions: &[f64],
) -> Result<f64> {
    let (labeled, unlabeled) = delta0_variance_terms(design, delta, rho_labeled, kernel_labeled, predictions)?;
    Ok(labeled + unlabeled)
}

/// The labeled and unlabeled contributions of [`delta0_variance`].
pub fn delta0_variance_terms(
    design: &Design,
    delta: f64,
    rho_labeled: &[f64],
    kernel_labeled: &[f64],
    predictions: &[f64],
) -> Result<(f64, f64)> {
    let (n, total) = (design.n(), design.total());
    if rho_labeled.len() != n || kernel_labeled.len() != n || predictions.len() != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            found: predictions.len(),
        });
    }
    let m = (total - n) as f64;
    let lab = (0..n)
        .map(|i| (rho_labeled[i] * (kernel_labeled[i] - predictions[i])).powi(2))
        .sum::<f64>()
        / n as f64;
    let unl = predictions[n..].iter().map(|p| (p - delta).powi(2)).sum::<f64>() / m;
    Ok((lab / n as f64, unl / m))
}
