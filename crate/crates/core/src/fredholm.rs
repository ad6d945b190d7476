//! Discretised Fredholm equations of the first kind for the nuisance
//! function `a(y)`.
//!
//! The unknown is represented by its values on the distinct labeled
//! responses (the basis). The equation
//!
//! ```text
//! Σ_i S(y_j, y_i) w_i Ê_p{a(Y) ρ(Y) | x_i} = v(y_j)
//! ```
//!
//! is imposed on an evaluation grid `y_j`, where `S` are the
//! Nadaraya–Watson weights of `K̃_l` over the labeled rows. The resulting
//! linear system is solved by ridge-regularised least squares.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::condexp::{CondExpModel, QuadRule};
use crate::data::PooledDataset;
use crate::density_ratio::DensityRatioModel;
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, NW_MIN_DENOMINATOR};

/// Where the integral equation is imposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSpec {
    /// Quantiles of the labeled responses at levels `(j + 1/2) / m`.
    Quantile(usize),
    /// The distinct labeled responses themselves (square system).
    Basis,
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Quantile(100)
    }
}

/// Tikhonov parameter. `Relative(c)` means `λ = c · trace(MᵀM) / cols`.
/// The default `c = 0.1` sits at the start of the range where the solution
/// stops being dominated by noise in the estimated operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(0.1)
    }
}

impl Ridge {
    pub fn lambda(&self, operator: &DMatrix<f64>) -> Result<f64> {
        let lambda = match *self {
            Ridge::Relative(c) => c * operator.norm_squared() / operator.ncols().max(1) as f64,
            Ridge::Absolute(l) => l,
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("ridge lambda must be >= 0, got {lambda}")));
        }
        Ok(lambda)
    }
}

/// Sorted distinct support points with piecewise-linear interpolation
/// weights and flat extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    points: Vec<f64>,
}

impl Basis {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut points: Vec<f64> = values.to_vec();
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis points"));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        if points.is_empty() {
            return Err(Error::EmptySample("basis points"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Up to two `(index, weight)` pairs reproducing linear interpolation.
    pub fn locate(&self, t: f64) -> [(usize, f64); 2] {
        let p = &self.points;
        let last = p.len() - 1;
        if t <= p[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if t >= p[last] {
            return [(last, 1.0), (last, 0.0)];
        }
        // p[k] <= t < p[k + 1]
        let k = p.partition_point(|&v| v <= t) - 1;
        if p[k] == t {
            return [(k, 1.0), (k, 0.0)];
        }
        let f = (t - p[k]) / (p[k + 1] - p[k]);
        [(k, 1.0 - f), (k + 1, f)]
    }
}

/// `â(y)`: values on basis points, one column per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFunction {
    basis: Basis,
    values: DMatrix<f64>,
}

impl NuisanceFunction {
    pub fn new(basis: Basis, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                found: values.nrows(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nuisance function values"));
        }
        Ok(Self { basis, values })
    }

    pub fn basis_points(&self) -> &[f64] {
        self.basis.points()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn eval_component(&self, y: f64, c: usize) -> f64 {
        self.basis
            .locate(y)
            .iter()
            .map(|&(k, w)| w * self.values[(k, c)])
            .sum()
    }

    pub fn eval(&self, y: f64) -> Vec<f64> {
        (0..self.dim()).map(|c| self.eval_component(y, c)).collect()
    }
}

/// The discretised system `M a = rhs` with ridge parameter `λ`.
#[derive(Debug, Clone)]
pub struct FredholmSystem {
    pub eval_grid: Vec<f64>,
    pub basis: Basis,
    pub operator: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    pub ridge_lambda: f64,
}

impl FredholmSystem {
    pub fn new(
        eval_grid: Vec<f64>,
        basis: Basis,
        operator: DMatrix<f64>,
        rhs: DMatrix<f64>,
        ridge_lambda: f64,
    ) -> Result<Self> {
        if operator.nrows() != eval_grid.len() || operator.ncols() != basis.len() {
            return Err(Error::InvalidInput(format!(
                "operator is {}x{}, grid has {} points and basis {}",
                operator.nrows(),
                operator.ncols(),
                eval_grid.len(),
                basis.len()
            )));
        }
        if rhs.nrows() != eval_grid.len() {
            return Err(Error::DimensionMismatch {
                expected: eval_grid.len(),
                found: rhs.nrows(),
            });
        }
        if eval_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("evaluation grid must be strictly increasing".into()));
        }
        if !(ridge_lambda >= 0.0) {
            return Err(Error::InvalidInput("ridge lambda must be >= 0".into()));
        }
        if operator.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Fredholm system"));
        }
        Ok(Self {
            eval_grid,
            basis,
            operator,
            rhs,
            ridge_lambda,
        })
    }

    /// Column-wise residual norms `‖M a - rhs‖`.
    pub fn residuals(&self, a: &NuisanceFunction) -> Vec<f64> {
        let r = &self.operator * a.values() - &self.rhs;
        r.column_iter().map(|c| c.norm()).collect()
    }
}

/// Ridge least squares `argmin ‖M a − v‖² + λ‖a‖²`.
pub fn solve(system: &FredholmSystem) -> Result<NuisanceFunction> {
    let solver = RidgeSolver::new(&system.operator, system.ridge_lambda)?;
    let values = solver.solve(&system.rhs)?;
    NuisanceFunction::new(system.basis.clone(), values)
}

/// Factorised ridge normal equations, reusable across right-hand sides.
///
/// With fewer rows than columns the dual form `Mᵀ(MMᵀ + λI)⁻¹ v` is used;
/// both forms give the same minimiser for `λ > 0`, and the dual gives the
/// minimum-norm solution at `λ = 0`.
#[derive(Debug, Clone)]
pub struct RidgeSolver {
    operator: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    dual: bool,
}

impl RidgeSolver {
    pub fn new(operator: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let dual = operator.nrows() < operator.ncols();
        let mut gram = if dual {
            operator * operator.transpose()
        } else {
            operator.transpose() * operator
        };
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let singular = || {
            Error::Singular(format!(
                "ridge normal equations not positive definite at lambda = {lambda:e}; use a ridge > 0"
            ))
        };
        let factor = Cholesky::new(gram).ok_or_else(singular)?;
        // reject numerically singular factors when unregularised
        let diag = factor.l_dirty().diagonal();
        let max = diag.iter().cloned().fold(0.0f64, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || (lambda == 0.0 && min < 1e-7 * max) {
            return Err(singular());
        }
        Ok(Self {
            operator: operator.clone(),
            factor,
            dual,
        })
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.operator.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.operator.nrows(),
                found: rhs.nrows(),
            });
        }
        let out = if self.dual {
            self.operator.transpose() * self.factor.solve(rhs)
        } else {
            self.factor.solve(&(self.operator.transpose() * rhs))
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Fredholm solution"));
        }
        Ok(out)
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Everything about a dataset that does not depend on the density-ratio
/// model: canonical rows, `Ê_p` rules at every row, the response basis,
/// the evaluation grid and the `K̃_l` smoother from grid to labeled rows.
#[derive(Debug, Clone)]
pub struct Design {
    data: PooledDataset,
    ys: Vec<f64>,
    rules: Vec<QuadRule>,
    basis: Basis,
    grid: Vec<f64>,
    smoother: DMatrix<f64>,
}

impl Design {
    pub fn new(data: &PooledDataset, condexp: &CondExpModel, response: &KernelSpec, grid: &GridSpec) -> Result<Self> {
        let data = data.canonical();
        let ys = data.labeled_y();
        let rules: Vec<QuadRule> = data
            .rows()
            .iter()
            .map(|r| condexp.rule(&r.x))
            .collect::<Result<_>>()?;
        for rule in &rules {
            if rule.nodes.iter().chain(&rule.weights).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("conditional expectation rule"));
            }
        }
        let basis = Basis::from_values(&ys)?;
        let grid = match grid {
            GridSpec::Quantile(m) => {
                if *m == 0 {
                    return Err(Error::InvalidInput("grid needs at least one point".into()));
                }
                let mut g: Vec<f64> = (0..*m)
                    .map(|j| quantile_sorted(&ys, (j as f64 + 0.5) / *m as f64))
                    .collect();
                g.dedup();
                g
            }
            GridSpec::Basis => basis.points().to_vec(),
            GridSpec::Explicit(g) => {
                if g.is_empty() || g.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidInput(
                        "explicit grid must be nonempty and strictly increasing".into(),
                    ));
                }
                g.clone()
            }
        };
        let n = ys.len();
        let mut smoother = DMatrix::zeros(grid.len(), n);
        for (j, &g) in grid.iter().enumerate() {
            let mut den = 0.0;
            for (i, &y) in ys.iter().enumerate() {
                let k = response.scaled(g - y);
                smoother[(j, i)] = k;
                den += k;
            }
            if den < NW_MIN_DENOMINATOR {
                return Err(Error::DenominatorUnderflow(g));
            }
            for i in 0..n {
                smoother[(j, i)] /= den;
            }
        }
        Ok(Self {
            data,
            ys,
            rules,
            basis,
            grid,
            smoother,
        })
    }

    pub fn data(&self) -> &PooledDataset {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.ys.len()
    }

    pub fn total(&self) -> usize {
        self.data.total()
    }

    pub fn pi(&self) -> f64 {
        self.data.pi()
    }

    /// Labeled responses in canonical (sorted) order; rows `0..n`.
    pub fn labeled_y(&self) -> &[f64] {
        &self.ys
    }

    pub fn x(&self, row: usize) -> &[f64] {
        &self.data.rows()[row].x
    }

    pub fn rule(&self, row: usize) -> &QuadRule {
        &self.rules[row]
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// `S[j, i]`: Nadaraya–Watson weight of labeled row `i` at grid point `j`.
    pub fn smoother(&self) -> &DMatrix<f64> {
        &self.smoother
    }

    /// `w_i = [Ê_p{ρ²(Y) + π/(1-π) ρ(Y) | x_i}]⁻¹` for every row.
    pub fn weights(&self, rho: &DensityRatioModel) -> Result<Vec<f64>> {
        let odds = self.pi() / (1.0 - self.pi());
        self.rules
            .iter()
            .map(|rule| {
                let inner = rule.expect(|t| {
                    let r = rho.eval(t);
                    r * r + odds * r
                });
                if !(inner > 0.0) || !inner.is_finite() {
                    return Err(Error::Singular(format!(
                        "weight denominator {inner} is not positive"
                    )));
                }
                Ok(1.0 / inner)
            })
            .collect()
    }

    /// Builds the ρ-dependent operator with externally supplied weights.
    pub fn operator(&self, rho: &DensityRatioModel, weights: &[f64], ridge: Ridge) -> Result<WeightedOperator> {
        if weights.len() != self.total() {
            return Err(Error::DimensionMismatch {
                expected: self.total(),
                found: weights.len(),
            });
        }
        let nb = self.basis.len();
        let n = self.n();
        // E_ρ[i, k] = Σ_q ω_q ρ(t_q) B_k(t_q)
        let mut e_rho = DMatrix::zeros(self.total(), nb);
        for (i, rule) in self.rules.iter().enumerate() {
            for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                let r = rho.eval(t);
                for (k, b) in self.basis.locate(t) {
                    if b != 0.0 {
                        e_rho[(i, k)] += w * r * b;
                    }
                }
            }
        }
        let mut weighted = e_rho.rows(0, n).into_owned();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let matrix = &self.smoother * weighted;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Fredholm operator"));
        }
        let lambda = ridge.lambda(&matrix)?;
        let solver = RidgeSolver::new(&matrix, lambda)?;
        Ok(WeightedOperator {
            rho_labeled: self.ys.iter().map(|&y| rho.eval(y)).collect(),
            weights: weights.to_vec(),
            e_rho,
            lambda,
            solver,
        })
    }

    /// Smooths per-row quantities over the labeled rows onto the grid:
    /// `out[j, c] = Σ_i S[j, i] f(j, i)[c]`.
    pub fn smooth_onto_grid(&self, dim: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.grid.len(), dim);
        let mut buf = vec![0.0; dim];
        for j in 0..self.grid.len() {
            for i in 0..self.n() {
                let s = self.smoother[(j, i)];
                if s == 0.0 {
                    continue;
                }
                buf.iter_mut().for_each(|v| *v = 0.0);
                f(j, i, &mut buf);
                for c in 0..dim {
                    out[(j, c)] += s * buf[c];
                }
            }
        }
        out
    }
}

/// `M = S · diag(w_labeled) · E_ρ` together with its factorised ridge solver
/// and the per-row expansion `E_ρ` used to evaluate `Ê_p{a(Y)ρ(Y) | x_i}`.
#[derive(Debug, Clone)]
pub struct WeightedOperator {
    rho_labeled: Vec<f64>,
    weights: Vec<f64>,
    e_rho: DMatrix<f64>,
    lambda: f64,
    solver: RidgeSolver,
}

impl WeightedOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.solver.operator()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `ρ(y_i)` on labeled rows in canonical order.
    pub fn rho_labeled(&self) -> &[f64] {
        &self.rho_labeled
    }

    pub fn system(&self, design: &Design, rhs: DMatrix<f64>) -> Result<FredholmSystem> {
        FredholmSystem::new(
            design.grid().to_vec(),
            design.basis().clone(),
            self.matrix().clone(),
            rhs,
            self.lambda,
        )
    }

    pub fn solve(&self, design: &Design, rhs: &DMatrix<f64>) -> Result<NuisanceFunction> {
        let values = self.solver.solve(rhs)?;
        NuisanceFunction::new(design.basis().clone(), values)
    }

    /// `w_i Ê_p{a(Y) ρ(Y) | x_i}` for every row and every column of `a`.
    pub fn predict(&self, a: &NuisanceFunction) -> DMatrix<f64> {
        let mut out = &self.e_rho * a.values();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.weights[i];
        }
        out
    }

    /// `Ê_p{a(Y) ρ(Y) | x_i}` without the weight, for one row.
    pub fn expect_a_rho(&self, row: usize, a: &NuisanceFunction) -> DVector<f64> {
        (self.e_rho.row(row) * a.values()).transpose()
    }
}

/// Assembles `M a = v` with `v(y_j) = rhs_fn(y_j)` on the default quantile
/// grid.
pub fn assemble_system(
    data: &PooledDataset,
    rho: &DensityRatioModel,
    condexp: &CondExpModel,
    weights: &[f64],
    rhs_fn: impl Fn(f64) -> Vec<f64>,
    spec_l: &KernelSpec,
    ridge: Ridge,
    grid: &GridSpec,
) -> Result<FredholmSystem> {
    let design = Design::new(data, condexp, spec_l, grid)?;
    // weights are given in the caller's row order; map onto canonical rows
    let weights = canonical_weights(data, weights)?;
    let op = design.operator(rho, &weights, ridge)?;
    let values: Vec<Vec<f64>> = design.grid().iter().map(|&y| rhs_fn(y)).collect();
    let dim = values.first().map(Vec::len).unwrap_or(0);
    if values.iter().any(|v| v.len() != dim) || dim == 0 {
        return Err(Error::InvalidInput("rhs_fn must return vectors of one fixed positive length".into()));
    }
    let rhs = DMatrix::from_fn(values.len(), dim, |j, c| values[j][c]);
    op.system(&design, rhs)
}

/// Reorders per-row values given in original row order into canonical order.
pub fn canonical_weights(data: &PooledDataset, values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != data.total() {
        return Err(Error::DimensionMismatch {
            expected: data.total(),
            found: values.len(),
        });
    }
    let mut idx: Vec<usize> = (0..data.total()).collect();
    let rows = data.rows();
    let key = |i: &usize| (rows[*i].y.is_none(), rows[*i].y.unwrap_or(0.0));
    idx.sort_by(|a, b| {
        let (ua, ya) = key(a);
        let (ub, yb) = key(b);
        ua.cmp(&ub).then(ya.total_cmp(&yb)).then_with(|| {
            rows[*a]
                .x
                .iter()
                .zip(&rows[*b].x)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(idx.into_iter().map(|i| values[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condexp::fit_cond_exp_nonparametric;
    use approx::assert_abs_diff_eq;

    fn system(m: DMatrix<f64>, rhs: DMatrix<f64>, lambda: f64) -> FredholmSystem {
        let grid: Vec<f64> = (0..m.nrows()).map(|i| i as f64).collect();
        let basis = Basis::from_values(&(0..m.ncols()).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        FredholmSystem::new(grid, basis, m, rhs, lambda).unwrap()
    }

    #[test]
    fn identity_and_diagonal() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let a = solve(&system(DMatrix::identity(3, 3), v.clone(), 0.0)).unwrap();
        assert_eq!(a.values(), &v);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let a = solve(&system(m, DMatrix::from_column_slice(2, 1, &[1.0, 2.0]), 0.0)).unwrap();
        assert_abs_diff_eq!(a.values()[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a.values()[(1, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_without_ridge_is_an_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = system(m.clone(), DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), 0.0);
        match solve(&s) {
            Err(Error::Singular(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected singular error, got {other:?}"),
        }
        let s = system(m, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), 1e-8);
        assert!(solve(&s).is_ok());
    }

    #[test]
    fn basis_interpolation() {
        let b = Basis::from_values(&[2.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(b.points(), &[0.0, 1.0, 2.0]);
        let f = NuisanceFunction::new(b, DMatrix::from_column_slice(3, 1, &[0.0, 10.0, 30.0])).unwrap();
        assert_eq!(f.eval_component(-5.0, 0), 0.0);
        assert_eq!(f.eval_component(0.5, 0), 5.0);
        assert_eq!(f.eval_component(1.0, 0), 10.0);
        assert_eq!(f.eval_component(1.25, 0), 15.0);
        assert_eq!(f.eval_component(9.0, 0), 30.0);
    }

    #[test]
    fn rejects_malformed_systems() {
        let basis = Basis::from_values(&[0.0, 1.0]).unwrap();
        assert!(FredholmSystem::new(vec![0.0, 1.0], basis.clone(), DMatrix::zeros(3, 2), DMatrix::zeros(2, 1), 0.0).is_err());
        assert!(FredholmSystem::new(vec![1.0, 0.0], basis.clone(), DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), 0.0).is_err());
        assert!(FredholmSystem::new(vec![0.0, 1.0], basis, DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), -1.0).is_err());
    }

    #[test]
    fn one_point_identity_operator() {
        // one labeled and one unlabeled row, Ê_p = point mass at the labeled y
        let data = PooledDataset::from_parts(vec![(0.5, vec![0.0])], vec![vec![1.0]]).unwrap();
        let cond = CondExpModel::custom(|_| Ok(QuadRule::point(0.5)));
        let rho = DensityRatioModel::constant(1.0);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let sys = assemble_system(&data, &rho, &cond, &[1.0, 1.0], |_| vec![3.0], &spec, Ridge::Absolute(0.0), &GridSpec::Basis).unwrap();
        assert_eq!(sys.operator, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(solve(&sys).unwrap().values()[(0, 0)], 3.0);
    }

    #[test]
    fn rhs_is_kernel_bump_on_grid() {
        let lab: Vec<(f64, Vec<f64>)> = (0..20).map(|i| (i as f64 / 5.0, vec![i as f64 / 5.0])).collect();
        let data = PooledDataset::from_parts(lab.clone(), vec![vec![0.0]; 5]).unwrap();
        let cond = fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(0.5).unwrap()).unwrap();
        let h = KernelSpec::gaussian(0.4).unwrap();
        let sys = assemble_system(
            &data,
            &DensityRatioModel::constant(1.0),
            &cond,
            &vec![1.0; 25],
            |y| vec![h.scaled(y - 1.0)],
            &KernelSpec::gaussian(0.3).unwrap(),
            Ridge::default(),
            &GridSpec::Quantile(10),
        )
        .unwrap();
        for (j, &g) in sys.eval_grid.iter().enumerate() {
            assert_eq!(sys.rhs[(j, 0)], h.scaled(g - 1.0));
        }
    }

    #[test]
    fn underflow_names_grid_point() {
        let lab = vec![(0.0, vec![0.0]), (0.1, vec![0.0])];
        let data = PooledDataset::from_parts(lab.clone(), vec![vec![0.0]]).unwrap();
        let cond = fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(0.5).unwrap()).unwrap();
        let err = Design::new(
            &data,
            &cond,
            &KernelSpec::epanechnikov(0.01).unwrap(),
            &GridSpec::Explicit(vec![0.0, 5.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DenominatorUnderflow(y) if y == 5.0));
    }
}
