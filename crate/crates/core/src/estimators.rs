//! Robust moment estimators for a given ratio model and the efficient
//! estimator of general estimating-equation parameters.
//!
//! Rows are always in the canonical order of [`Design`]: labeled rows
//! `0..n`, then unlabeled rows `n..N`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::condexp::CondExpModel;
use crate::data::PooledDataset;
use crate::density_ratio::{ratio_stage, DensityRatioModel, FredholmSettings, RhoGridPlan};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::fredholm::{Design, NuisanceFunction, Ridge, WeightedOperator};
use crate::inference::{confidence_interval, eif_values, EifEvaluation};
use crate::kernel::BandwidthPolicy;

/// Moment estimates `θ = direct + rectifier` for several moment functions
/// sharing one operator.
#[derive(Debug, Clone)]
pub struct MomentFit {
    pub theta: Vec<f64>,
    /// `(N - n)⁻¹ Σ_unlabeled ŷ_i`.
    pub direct: Vec<f64>,
    /// `n⁻¹ Σ_labeled ρ(y_i){s(y_i, x_i) - ŷ_i}`.
    pub rectifier: Vec<f64>,
    pub a_hat: NuisanceFunction,
    /// `ŷ_i = w_i Ê_p{â(Y)ρ(Y) | x_i}` for every row, one column per moment.
    pub predictions: DMatrix<f64>,
    /// `s(y_i, x_i)` on labeled rows.
    pub s_labeled: DMatrix<f64>,
    pub residual_norms: Vec<f64>,
}

/// Algorithm for moments `s` (written into `out`, length `dim`) with the
/// ratio model baked into `op`.
pub fn moment_fit(
    design: &Design,
    op: &WeightedOperator,
    dim: usize,
    s: impl Fn(f64, &[f64], &mut [f64]),
) -> Result<MomentFit> {
    let grid = design.grid();
    let rhs = design.smooth_onto_grid(dim, |j, i, out| s(grid[j], design.x(i), out));
    let a_hat = op.solve(design, &rhs)?;
    let residual_norms = (op.matrix() * a_hat.values() - &rhs)
        .column_iter()
        .map(|c| c.norm())
        .collect();
    let predictions = op.predict(&a_hat);
    let n = design.n();
    let n_unl = design.total() - n;
    let mut s_labeled = DMatrix::zeros(n, dim);
    let mut buf = vec![0.0; dim];
    for (i, &y) in design.labeled_y().iter().enumerate() {
        s(y, design.x(i), &mut buf);
        for c in 0..dim {
            s_labeled[(i, c)] = buf[c];
        }
    }
    if s_labeled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment function"));
    }
    let rho = op.rho_labeled();
    let mut direct = vec![0.0; dim];
    let mut rectifier = vec![0.0; dim];
    for c in 0..dim {
        direct[c] = predictions.view((n, c), (n_unl, 1)).sum() / n_unl as f64;
        rectifier[c] = (0..n)
            .map(|i| rho[i] * (s_labeled[(i, c)] - predictions[(i, c)]))
            .sum::<f64>()
            / n as f64;
    }
    let theta = direct.iter().zip(&rectifier).map(|(d, r)| d + r).collect();
    Ok(MomentFit {
        theta,
        direct,
        rectifier,
        a_hat,
        predictions,
        s_labeled,
        residual_norms,
    })
}

/// `w_i = [Ê_p{ρ²(Y) + π/(1-π) ρ(Y) | x_i}]⁻¹`, in the input row order.
pub fn compute_weights(data: &PooledDataset, rho: &DensityRatioModel, condexp: &CondExpModel) -> Result<Vec<f64>> {
    let odds = data.pi() / (1.0 - data.pi());
    data.rows()
        .iter()
        .map(|row| {
            let inner = condexp.expect(&row.x, |t| {
                let r = rho.eval(t);
                r * r + odds * r
            })?;
            if !(inner > 0.0 && inner.is_finite()) {
                return Err(Error::Singular(format!("weight denominator {inner} is not positive")));
            }
            Ok(1.0 / inner)
        })
        .collect()
}

/// Singly flexible moment estimate with ratio model `rho`.
pub fn algorithm_general(
    data: &PooledDataset,
    estimand: &Estimand,
    rho: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<f64> {
    if !estimand.is_moment() {
        return Err(Error::InvalidInput("algorithm_general takes a moment estimand".into()));
    }
    let kernels = bw.resolve(data.n())?;
    let design = Design::new(data, condexp, &kernels.response, &settings.grid)?;
    let weights = design.weights(rho)?;
    let op = design.operator(rho, &weights, settings.ridge)?;
    Ok(moment_fit(&design, &op, 1, |y, x, out| estimand.eval_u(y, x, &[0.0], out))?.theta[0])
}

/// `b̂_i = w_i Ê_p{U(Y, x_i, θ)ρ²(Y) + â(Y)ρ(Y) | x_i}` for every canonical row.
pub fn predict_b(
    design: &Design,
    op: &WeightedOperator,
    estimand: &Estimand,
    theta: &[f64],
    rho: &DensityRatioModel,
    a_hat: &NuisanceFunction,
) -> Result<DMatrix<f64>> {
    let d = estimand.dim();
    if a_hat.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: a_hat.dim(),
        });
    }
    let mut out = op.predict(a_hat);
    let mut buf = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let weights = op.weights();
    for i in 0..design.total() {
        weighted_u_rho2(design, estimand, theta, rho, i, &mut buf, &mut acc);
        for c in 0..d {
            out[(i, c)] += weights[i] * acc[c];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("b-hat predictions"));
    }
    Ok(out)
}

/// `acc = Ê_p{U(Y, x_row, θ)ρ²(Y) | x_row}`.
fn weighted_u_rho2(
    design: &Design,
    estimand: &Estimand,
    theta: &[f64],
    rho: &DensityRatioModel,
    row: usize,
    buf: &mut [f64],
    acc: &mut [f64],
) {
    let x = design.x(row);
    let rule = design.rule(row);
    acc.iter_mut().for_each(|v| *v = 0.0);
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let r = rho.eval(t);
        estimand.eval_u(t, x, theta, buf);
        for (a, u) in acc.iter_mut().zip(buf.iter()) {
            *a += w * r * r * u;
        }
    }
}

/// Right-hand side of the general integral equation at `θ`:
/// `Σ_i S_ji [U(y_j, x_i, θ) - w_i Ê_p{U(Y, x_i, θ)ρ²(Y) | x_i}]`.
pub fn general_rhs(
    design: &Design,
    op: &WeightedOperator,
    estimand: &Estimand,
    theta: &[f64],
    rho: &DensityRatioModel,
) -> DMatrix<f64> {
    let d = estimand.dim();
    let n = design.n();
    let weights = op.weights();
    let mut correction = DMatrix::zeros(n, d);
    let mut buf = vec![0.0; d];
    let mut acc = vec![0.0; d];
    for i in 0..n {
        weighted_u_rho2(design, estimand, theta, rho, i, &mut buf, &mut acc);
        for c in 0..d {
            correction[(i, c)] = weights[i] * acc[c];
        }
    }
    let grid = design.grid();
    design.smooth_onto_grid(d, |j, i, out| {
        estimand.eval_u(grid[j], design.x(i), theta, out);
        for c in 0..d {
            out[c] -= correction[(i, c)];
        }
    })
}

/// Newton iteration settings for the general estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootSolverCfg {
    pub max_iter: usize,
    /// Convergence when the max-norm of the estimating equation is below this.
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for RootSolverCfg {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            max_halvings: 20,
        }
    }
}

impl RootSolverCfg {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("solver needs max_iter >= 1 and tol > 0".into()));
        }
        Ok(())
    }
}

/// Solution of `Ψ(θ) = mean_U b̂ + mean_L ρ(U - b̂) = 0`.
#[derive(Debug, Clone)]
pub struct GeneralFit {
    pub theta: Vec<f64>,
    pub a_hat: NuisanceFunction,
    /// `b̂_i` for every canonical row.
    pub b: DMatrix<f64>,
    pub psi: Vec<f64>,
    pub iterations: usize,
    /// Present for moment estimands, which are solved in closed form.
    pub moment: Option<MomentFit>,
}

impl GeneralFit {
    pub fn residual_norm(&self) -> f64 {
        max_abs(&self.psi)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `Ψ(θ)` for given `b̂`.
pub fn estimating_equation(
    design: &Design,
    estimand: &Estimand,
    theta: &[f64],
    rho_labeled: &[f64],
    b: &DMatrix<f64>,
) -> Vec<f64> {
    let d = estimand.dim();
    let n = design.n();
    let n_unl = design.total() - n;
    let mut psi = vec![0.0; d];
    let mut u = vec![0.0; d];
    for (i, &y) in design.labeled_y().iter().enumerate() {
        estimand.eval_u(y, design.x(i), theta, &mut u);
        for c in 0..d {
            psi[c] += rho_labeled[i] * (u[c] - b[(i, c)]) / n as f64;
        }
    }
    for i in n..design.total() {
        for c in 0..d {
            psi[c] += b[(i, c)] / n_unl as f64;
        }
    }
    psi
}

/// `[Σ_L ρ(y_i) ∂U/∂θᵀ / Σ_L ρ(y_i)]`, the ρ-weighted labeled estimate of
/// `E_q{∂U/∂θᵀ}`.
pub fn jacobian_estimate(design: &Design, estimand: &Estimand, theta: &[f64], rho_labeled: &[f64]) -> DMatrix<f64> {
    let d = estimand.dim();
    let mut jac = DMatrix::zeros(d, d);
    let mut buf = vec![0.0; d * d];
    let mut total = 0.0;
    for (i, &y) in design.labeled_y().iter().enumerate() {
        estimand.eval_jacobian(y, design.x(i), theta, &mut buf);
        for r in 0..d {
            for c in 0..d {
                jac[(r, c)] += rho_labeled[i] * buf[r * d + c];
            }
        }
        total += rho_labeled[i];
    }
    jac / total
}

fn invert(jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    jac.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("estimated Jacobian of the estimating function is singular".into()))
}

/// Efficient estimate of `θ` with ratio model `rho` baked into `op`.
///
/// Moments use the closed form; otherwise damped Newton steps
/// `θ ← θ - Â Ψ(θ)` re-solve for `â` at every iterate on the cached
/// operator.
pub fn fit_theta(
    design: &Design,
    op: &WeightedOperator,
    estimand: &Estimand,
    rho: &DensityRatioModel,
    theta0: &[f64],
    cfg: &RootSolverCfg,
) -> Result<GeneralFit> {
    cfg.validate()?;
    let d = estimand.dim();
    if estimand.is_moment() {
        let m = moment_fit(design, op, 1, |y, x, out| estimand.eval_u(y, x, &[0.0], out))?;
        let theta = m.theta.clone();
        let b = m.predictions.map(|v| v - theta[0]);
        let psi = estimating_equation(design, estimand, &theta, op.rho_labeled(), &b);
        return Ok(GeneralFit {
            theta,
            a_hat: m.a_hat.clone(),
            b,
            psi,
            iterations: 0,
            moment: Some(m),
        });
    }
    if theta0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: theta0.len(),
        });
    }
    let evaluate = |theta: &[f64]| -> Result<(Vec<f64>, NuisanceFunction, DMatrix<f64>)> {
        let rhs = general_rhs(design, op, estimand, theta, rho);
        let a = op.solve(design, &rhs)?;
        let b = predict_b(design, op, estimand, theta, rho, &a)?;
        let psi = estimating_equation(design, estimand, theta, op.rho_labeled(), &b);
        Ok((psi, a, b))
    };
    let mut theta = theta0.to_vec();
    let (mut psi, mut a, mut b) = evaluate(&theta)?;
    let mut norm = max_abs(&psi);
    for iter in 0..cfg.max_iter {
        if norm <= cfg.tol {
            return Ok(GeneralFit {
                theta,
                a_hat: a,
                b,
                psi,
                iterations: iter,
                moment: None,
            });
        }
        let a_inv = invert(&jacobian_estimate(design, estimand, &theta, op.rho_labeled()))?;
        let step = a_inv * DVector::from_column_slice(&psi);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            let (tp, ta, tb) = evaluate(&trial)?;
            let tn = max_abs(&tp);
            if tn < norm {
                theta = trial;
                psi = tp;
                a = ta;
                b = tb;
                norm = tn;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter + 1,
                residual: norm,
                theta,
            });
        }
    }
    if norm <= cfg.tol {
        return Ok(GeneralFit {
            theta,
            a_hat: a,
            b,
            psi,
            iterations: cfg.max_iter,
            moment: None,
        });
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual: norm,
        theta,
    })
}

/// Solution of the importance-weighted equation `mean_L ρ(y_i)U(y_i, x_i, θ) = 0`.
pub fn shift_dependent_theta(
    design: &Design,
    estimand: &Estimand,
    rho_labeled: &[f64],
    theta0: &[f64],
    cfg: &RootSolverCfg,
) -> Result<(Vec<f64>, usize)> {
    cfg.validate()?;
    let d = estimand.dim();
    let zeros = DMatrix::zeros(design.total(), d);
    let mut theta = if estimand.is_moment() { vec![0.0] } else { theta0.to_vec() };
    if theta.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: theta.len(),
        });
    }
    // only the labeled part of the equation is active when b̂ ≡ 0
    let psi_of = |t: &[f64]| estimating_equation(design, estimand, t, rho_labeled, &zeros);
    for iter in 0..cfg.max_iter {
        let psi = psi_of(&theta);
        if max_abs(&psi) <= cfg.tol {
            return Ok((theta, iter));
        }
        let mean_rho = rho_labeled.iter().sum::<f64>() / rho_labeled.len() as f64;
        let jac = jacobian_estimate(design, estimand, &theta, rho_labeled) * mean_rho;
        let step = invert(&jac)? * DVector::from_column_slice(&psi);
        let mut scale = 1.0;
        let norm = max_abs(&psi);
        let mut next = theta.clone();
        for _ in 0..=cfg.max_halvings {
            next = theta.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            if max_abs(&psi_of(&next)) < norm {
                break;
            }
            scale *= 0.5;
        }
        theta = next;
    }
    let residual = max_abs(&psi_of(&theta));
    if residual <= cfg.tol {
        return Ok((theta, cfg.max_iter));
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual,
        theta,
    })
}

/// Point estimate, standard errors, confidence intervals and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator_name: String,
    pub estimand: String,
    pub theta_hat: Vec<f64>,
    pub std_err: Vec<f64>,
    pub ci_level: f64,
    pub ci: Vec<[f64; 2]>,
    /// Index of the headline component of `theta_hat`.
    pub primary: usize,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl EstimateReport {
    pub fn from_eif(
        name: &str,
        estimand: &Estimand,
        theta: &[f64],
        eif: &EifEvaluation,
        level: f64,
    ) -> Result<Self> {
        let ci = confidence_interval(eif, theta, level)?;
        Ok(Self {
            estimator_name: name.to_string(),
            estimand: estimand.name().to_string(),
            theta_hat: theta.to_vec(),
            std_err: eif.std_err(),
            ci_level: level,
            ci,
            primary: estimand.primary(),
            diagnostics: BTreeMap::new(),
        })
    }

    pub fn estimate(&self) -> f64 {
        self.theta_hat[self.primary]
    }

    pub fn sd(&self) -> f64 {
        self.std_err[self.primary]
    }

    pub fn interval(&self) -> [f64; 2] {
        self.ci[self.primary]
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.diagnostics.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
    }
}

/// Full estimation run for one ratio model on a prepared design.
pub fn estimate_with_ratio(
    name: &str,
    design: &Design,
    estimand: &Estimand,
    rho: &DensityRatioModel,
    ridge: Ridge,
    solver: &RootSolverCfg,
    level: f64,
) -> Result<EstimateReport> {
    let weights = design.weights(rho)?;
    let op = design.operator(rho, &weights, ridge)?;
    let rho_labeled = op.rho_labeled().to_vec();
    let (theta0, _) = shift_dependent_theta(design, estimand, &rho_labeled, &initial_guess(design, estimand), solver)?;
    let fit = fit_theta(design, &op, estimand, rho, &theta0, solver)?;
    let eif = eif_values(design, estimand, &fit.theta, &rho_labeled, &fit.b)?;
    let mut report = EstimateReport::from_eif(name, estimand, &fit.theta, &eif, level)?;
    report.note("newton_iterations", fit.iterations);
    report.note("estimating_equation_residual", fit.residual_norm());
    report.note("ridge_lambda", op.lambda());
    report.note("initial_theta", &theta0);
    if let Some(m) = &fit.moment {
        report.note("direct_term", m.direct[0]);
        report.note("rectifier_term", m.rectifier[0]);
        report.note("fredholm_residual", m.residual_norms[0]);
    }
    Ok(report)
}

/// Starting value: labeled-sample moments for the built-in estimands, zeros
/// otherwise.
pub fn initial_guess(design: &Design, estimand: &Estimand) -> Vec<f64> {
    let ys = design.labeled_y();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    match (estimand.name(), estimand.dim()) {
        ("variance", 2) => {
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
            vec![mean, var]
        }
        ("mean", 1) => vec![mean],
        (_, d) => vec![0.0; d],
    }
}

/// Efficient estimator: `ρ̃` from `rho_star`, then the estimating equation
/// solved with `ρ̃`.
#[allow(clippy::too_many_arguments)]
pub fn efficient_theta(
    data: &PooledDataset,
    estimand: &Estimand,
    condexp: &CondExpModel,
    rho_star: &DensityRatioModel,
    bw: &BandwidthPolicy,
    plan: &RhoGridPlan,
    settings: &FredholmSettings,
    solver: &RootSolverCfg,
    level: f64,
) -> Result<EstimateReport> {
    let kernels = bw.resolve(data.n())?;
    let design = Design::new(data, condexp, &kernels.response, &settings.grid)?;
    let tilde = ratio_stage(&design, plan, rho_star, &kernels.density)?;
    let mut report = estimate_with_ratio("efficient-tilde", &design, estimand, &tilde.model, settings.ridge, solver, level)?;
    report.note("rho_knots", &tilde.knots);
    report.note("rho_values", tilde.model.values().unwrap_or(&[]));
    report.note("raw_deltas", &tilde.deltas);
    report.note("negative_deltas", tilde.deltas.iter().filter(|d| **d < 0.0).count());
    report.note("clipped_knots", &tilde.clipped);
    report.note("ratio_fredholm_residuals", &tilde.fit.residual_norms);
    Ok(report)
}
