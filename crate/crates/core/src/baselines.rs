//! Comparator estimators: prediction-powered mean, importance-weighted
//! (shift-dependent) estimator, doubly flexible and oracle estimators.

use nalgebra::DMatrix;

use crate::condexp::{CondExpModel, DesignMap};
pub use crate::condexp::NormalRegression as WorkingRegressionModel;
use crate::data::PooledDataset;
use crate::density_ratio::{DensityRatioModel, FredholmSettings};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::estimators::{estimate_with_ratio, initial_guess, moment_fit, shift_dependent_theta, EstimateReport, RootSolverCfg};
use crate::fredholm::Design;
use crate::inference::eif_values;
use crate::kernel::BandwidthPolicy;

/// `mean(unlabeled predictions) + mean(y - prediction over labeled rows)`.
pub fn ppi_mean(labeled: &[(f64, f64)], unlabeled_preds: &[f64]) -> Result<f64> {
    if labeled.is_empty() || unlabeled_preds.is_empty() {
        return Err(Error::EmptySample("prediction-powered inputs"));
    }
    let direct = unlabeled_preds.iter().sum::<f64>() / unlabeled_preds.len() as f64;
    let rectifier = labeled.iter().map(|(y, p)| y - p).sum::<f64>() / labeled.len() as f64;
    Ok(direct + rectifier)
}

/// Standard error of [`ppi_mean`] from the two independent sample variances.
pub fn ppi_std_err(labeled: &[(f64, f64)], unlabeled_preds: &[f64]) -> Result<f64> {
    if labeled.len() < 2 || unlabeled_preds.len() < 2 {
        return Err(Error::EmptySample("prediction-powered inputs"));
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let resid: Vec<f64> = labeled.iter().map(|(y, p)| y - p).collect();
    Ok((var(unlabeled_preds) / unlabeled_preds.len() as f64 + var(&resid) / resid.len() as f64).sqrt())
}

/// `N⁻¹ Σ r_i ρ(y_i) V(y_i) / π`.
pub fn shift_dependent(data: &PooledDataset, v: impl Fn(f64) -> f64, rho: &DensityRatioModel) -> f64 {
    data.labeled().map(|(y, _)| rho.eval(y) * v(y)).sum::<f64>() / data.n() as f64
}

/// Shift-dependent estimate of a general estimand with a sandwich interval.
pub fn shift_dependent_report(
    design: &Design,
    estimand: &Estimand,
    rho: &DensityRatioModel,
    solver: &RootSolverCfg,
    level: f64,
) -> Result<EstimateReport> {
    let rho_labeled: Vec<f64> = design.labeled_y().iter().map(|&y| rho.eval(y)).collect();
    let (theta, iterations) = shift_dependent_theta(design, estimand, &rho_labeled, &initial_guess(design, estimand), solver)?;
    let zeros = DMatrix::zeros(design.total(), estimand.dim());
    let eif = eif_values(design, estimand, &theta, &rho_labeled, &zeros)?;
    let mut report = EstimateReport::from_eif("shift-dependent", estimand, &theta, &eif, level)?;
    report.note("newton_iterations", iterations);
    Ok(report)
}

/// Fits the normal working regression on the labeled rows.
pub fn fit_working_model(data: &PooledDataset, design: DesignMap, quadrature_nodes: usize) -> Result<WorkingRegressionModel> {
    let labeled: Vec<(f64, &[f64])> = data.labeled().collect();
    WorkingRegressionModel::fit(&labeled, design, quadrature_nodes)
}

/// Moment estimate with `Ê_p` taken from the fitted normal working model.
pub fn doubly_flexible(
    data: &PooledDataset,
    estimand: &Estimand,
    rho_star: &DensityRatioModel,
    working: &WorkingRegressionModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<f64> {
    if !estimand.is_moment() {
        return Err(Error::InvalidInput("doubly_flexible takes a moment estimand".into()));
    }
    let kernels = bw.resolve(data.n())?;
    let cond = CondExpModel::Normal(working.clone());
    let design = Design::new(data, &cond, &kernels.response, &settings.grid)?;
    let weights = design.weights(rho_star)?;
    let op = design.operator(rho_star, &weights, settings.ridge)?;
    Ok(moment_fit(&design, &op, 1, |y, x, out| estimand.eval_u(y, x, &[0.0], out))?.theta[0])
}

/// The efficient pipeline with the true ratio in place of an estimate.
#[allow(clippy::too_many_arguments)]
pub fn oracle_efficient(
    data: &PooledDataset,
    estimand: &Estimand,
    true_rho: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
    solver: &RootSolverCfg,
    level: f64,
) -> Result<EstimateReport> {
    let kernels = bw.resolve(data.n())?;
    let design = Design::new(data, condexp, &kernels.response, &settings.grid)?;
    estimate_with_ratio("oracle", &design, estimand, true_rho, settings.ridge, solver, level)
}
