//! Deterministic check suites shared by the property tests and the
//! acceptance report. Each check returns the worst observed error next to
//! its tolerance.

#![allow(dead_code)]

use labelshift::condexp::{nonparametric_cond_exp, CondExpModel, QuadRule};
use labelshift::density_ratio::{estimate_deltas, DensityRatioModel};
use labelshift::discrete::{discrete_class_prob, DiscreteDesign, DiscreteRatio};
use labelshift::estimand::Estimand;
use labelshift::estimators::{fit_theta, initial_guess, moment_fit, shift_dependent_theta, RootSolverCfg};
use labelshift::fredholm::{solve, Basis, Design, FredholmSystem, GridSpec, Ridge, RidgeSolver};
use labelshift::inference::eif_values;
use labelshift::kernel::{BandwidthPolicy, KernelSpec};
use labelshift::simulation::{generate_replicate, working_rho_star, SimConfig};
use labelshift::PooledDataset;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl Check {
    pub fn new(name: &str, error: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tol,
        }
    }

    pub fn pass(&self) -> bool {
        self.error <= self.tol
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {:.3e} (tol {:.0e})", self.name, self.error, self.tol)
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Independent oracle: `(MᵀM + λI)⁻¹ Mᵀ v` by LU.
pub fn dense_ridge(m: &DMatrix<f64>, lambda: f64, v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = m.transpose() * m;
    for i in 0..g.nrows() {
        g[(i, i)] += lambda;
    }
    g.lu().solve(&(m.transpose() * v)).expect("regularised Gram matrix is invertible")
}

fn system(m: DMatrix<f64>, rhs: DMatrix<f64>, lambda: f64) -> FredholmSystem {
    let grid: Vec<f64> = (0..m.nrows()).map(|j| j as f64).collect();
    let basis = Basis::from_values(&(0..m.ncols()).map(|k| k as f64).collect::<Vec<_>>()).unwrap();
    FredholmSystem::new(grid, basis, m, rhs, lambda).unwrap()
}

/// Sampled labeled-response design with NW `Ê_p` from the table DGP.
pub fn table_design(seed: u64, total: usize, grid: GridSpec) -> (PooledDataset, Design, DensityRatioModel) {
    let cfg = SimConfig {
        total,
        seed,
        ..SimConfig::default()
    };
    let data = generate_replicate(&cfg, 0).unwrap().data;
    let bw = BandwidthPolicy::default();
    let cond = nonparametric_cond_exp(&data, &bw).unwrap();
    let kernels = bw.resolve(data.n()).unwrap();
    let design = Design::new(&data, &cond, &kernels.response, &grid).unwrap();
    let rho = working_rho_star(&cfg, &data);
    (data, design, rho)
}

pub fn fredholm_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // identity and diagonal operators solve exactly without a ridge
    let v = random_matrix(&mut rng, 6, 2);
    let a = solve(&system(DMatrix::identity(6, 6), v.clone(), 0.0)).unwrap();
    out.push(Check::new("identity exact solve", max_abs_diff(a.values(), &v), 1e-12));
    let d: Vec<f64> = (0..6).map(|i| 0.5 + i as f64).collect();
    let diag = DMatrix::from_fn(6, 6, |i, j| if i == j { d[i] } else { 0.0 });
    let a = solve(&system(diag, v.clone(), 0.0)).unwrap();
    let expected = DMatrix::from_fn(6, 2, |i, c| v[(i, c)] / d[i]);
    out.push(Check::new("diagonal exact solve", max_abs_diff(a.values(), &expected), 1e-12));

    // linearity in the right-hand side on an assembled operator
    let (_, design, rho) = table_design(11, 300, GridSpec::default());
    let w = design.weights(&rho).unwrap();
    let op = design.operator(&rho, &w, Ridge::default()).unwrap();
    let m = design.grid().len();
    let b1 = random_matrix(&mut rng, m, 1);
    let b2 = random_matrix(&mut rng, m, 1);
    let (s1, s2) = (2.5, -0.75);
    let combo = op.solve(&design, &(&b1 * s1 + &b2 * s2)).unwrap();
    let sep = op.solve(&design, &b1).unwrap().values() * s1 + op.solve(&design, &b2).unwrap().values() * s2;
    let scale = sep.amax().max(1.0);
    out.push(Check::new("linearity in rhs", max_abs_diff(combo.values(), &sep) / scale, 1e-8));

    // manufactured solution: rhs = M a*, recovered without a ridge on a
    // design whose operator is well conditioned (spread responses, narrow
    // kernels, two grid points per basis point)
    let lab: Vec<(f64, Vec<f64>)> = (0..15).map(|i| (i as f64, vec![i as f64 + 0.1 * (i % 3) as f64])).collect();
    let unl: Vec<Vec<f64>> = (0..20).map(|i| vec![0.7 * i as f64]).collect();
    let data = PooledDataset::from_parts(lab.clone(), unl).unwrap();
    let cond = labelshift::fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(0.6).unwrap()).unwrap();
    let grid: Vec<f64> = (0..30).map(|j| j as f64 * 0.5 - 0.25).collect();
    let design = Design::new(&data, &cond, &KernelSpec::gaussian(0.5).unwrap(), &GridSpec::Explicit(grid)).unwrap();
    let rho = DensityRatioModel::closed_form(|y| 0.5 + 0.1 * y, 1e-3).unwrap();
    let w = design.weights(&rho).unwrap();
    let op = design.operator(&rho, &w, Ridge::Absolute(0.0)).unwrap();
    let pts = design.basis().points();
    let a_star = DMatrix::from_fn(pts.len(), 1, |k, _| (pts[k] / 2.0).sin() + 0.3 * pts[k]);
    let rhs = op.matrix() * &a_star;
    let rec = op.solve(&design, &rhs).unwrap();
    out.push(Check::new("manufactured-solution sup error", max_abs_diff(rec.values(), &a_star), 1e-4));

    // agreement with a dense LU oracle, primal and dual shapes
    let mut worst: f64 = 0.0;
    for &(r, c) in &[(40, 25), (25, 40), (30, 30)] {
        let m = random_matrix(&mut rng, r, c);
        let v = random_matrix(&mut rng, r, 2);
        for lambda in [1e-3, 0.1, 2.0] {
            let ours = RidgeSolver::new(&m, lambda).unwrap().solve(&v).unwrap();
            let oracle = dense_ridge(&m, lambda, &v);
            worst = worst.max(max_abs_diff(&ours, &oracle) / oracle.amax());
        }
    }
    out.push(Check::new("dense-solver agreement (relative)", worst, 1e-6));
    out
}

/// Pooled influence mean, equation residual, permutation invariance and
/// the direct + rectifier decomposition, for the mean and the variance.
pub fn eif_suite() -> Vec<Check> {
    let solver = RootSolverCfg::default();
    let (data, design, rho) = table_design(21, 400, GridSpec::default());
    let mut eif_mean: f64 = 0.0;
    let mut residual: f64 = 0.0;
    let mut thetas = Vec::new();
    for estimand in [Estimand::mean(), Estimand::variance()] {
        let w = design.weights(&rho).unwrap();
        let op = design.operator(&rho, &w, Ridge::default()).unwrap();
        let rl = op.rho_labeled().to_vec();
        let (t0, _) = shift_dependent_theta(&design, &estimand, &rl, &initial_guess(&design, &estimand), &solver).unwrap();
        let fit = fit_theta(&design, &op, &estimand, &rho, &t0, &solver).unwrap();
        let eif = eif_values(&design, &estimand, &fit.theta, &rl, &fit.b).unwrap();
        eif_mean = eif_mean.max(eif.mean().iter().fold(0.0, |m, v| m.max(v.abs())));
        residual = residual.max(fit.residual_norm());
        thetas.push(fit.theta.clone());
    }

    // reversed and interleaved row order give the same estimates
    let mut rows = data.rows().to_vec();
    rows.reverse();
    let third = rows.len() / 3;
    rows.rotate_left(third);
    let shuffled = PooledDataset::new(rows).unwrap();
    let bw = BandwidthPolicy::default();
    let cond = nonparametric_cond_exp(&shuffled, &bw).unwrap();
    let kernels = bw.resolve(shuffled.n()).unwrap();
    let d2 = Design::new(&shuffled, &cond, &kernels.response, &GridSpec::default()).unwrap();
    let mut perm: f64 = 0.0;
    for (estimand, theta) in [Estimand::mean(), Estimand::variance()].iter().zip(&thetas) {
        let w = d2.weights(&rho).unwrap();
        let op = d2.operator(&rho, &w, Ridge::default()).unwrap();
        let rl = op.rho_labeled().to_vec();
        let (t0, _) = shift_dependent_theta(&d2, estimand, &rl, &initial_guess(&d2, estimand), &solver).unwrap();
        let fit = fit_theta(&d2, &op, estimand, &rho, &t0, &solver).unwrap();
        for (a, b) in fit.theta.iter().zip(theta) {
            perm = perm.max((a - b).abs());
        }
    }

    let w = design.weights(&rho).unwrap();
    let op = design.operator(&rho, &w, Ridge::default()).unwrap();
    let fit = moment_fit(&design, &op, 2, |y, _, out| {
        out[0] = y;
        out[1] = y * y;
    })
    .unwrap();
    let reassembly = (0..2)
        .map(|c| (fit.direct[c] + fit.rectifier[c] - fit.theta[c]).abs())
        .fold(0.0, f64::max);

    vec![
        Check::new("pooled influence mean at the estimate", eif_mean, 1e-8),
        Check::new("estimating-equation residual", residual, solver.tol),
        Check::new("row-permutation invariance", perm, 1e-12),
        Check::new("direct + rectifier reassembly", reassembly, 1e-12),
    ]
}

/// Two classes `{1, 2}` with class-dependent covariates.
pub fn two_class_data(seed: u64, n: usize, m: usize, x_of: impl Fn(f64, &mut ChaCha8Rng) -> f64) -> PooledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lab = Vec::new();
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { 2.0 };
        lab.push((y, vec![x_of(y, &mut rng)]));
    }
    let unl = (0..m)
        .map(|i| {
            let y = if i % 5 < 4 { 1.0 } else { 2.0 };
            vec![x_of(y, &mut rng)]
        })
        .collect();
    PooledDataset::from_parts(lab, unl).unwrap()
}

pub fn discrete_suite() -> Vec<Check> {
    let mut out = Vec::new();

    // constant x: every row shares the labeled class frequencies, so the
    // estimator collapses to the importance-weighted labeled frequency
    let data = two_class_data(31, 40, 60, |_, _| 0.0);
    let lab: Vec<(f64, Vec<f64>)> = data.labeled().map(|(y, x)| (y, x.to_vec())).collect();
    let cond = labelshift::fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(1.0).unwrap()).unwrap();
    // normalised: p̂ = (1/2, 1/2) and ρ = (1.6, 0.4)
    let rho = DiscreteRatio::new(vec![1.0, 2.0], vec![1.6, 0.4], 1e-3).unwrap();
    let got = discrete_class_prob(&data, 1.0, &rho, &cond, Ridge::Absolute(1e-6)).unwrap();
    let closed = data.labeled().map(|(y, _)| if y == 1.0 { 1.6 } else { 0.0 }).sum::<f64>() / data.n() as f64;
    out.push(Check::new("constant-x collapse", (got - closed).abs(), 1e-6));

    // separable x: the class is read off x, so the estimate is the
    // unlabeled class frequency whatever the ratio
    let data = two_class_data(32, 40, 60, |y, _| y);
    let cond = CondExpModel::custom(|x| Ok(QuadRule::point(x[0])));
    let rho = DiscreteRatio::new(vec![1.0, 2.0], vec![1.3, 0.55], 1e-3).unwrap();
    let got = discrete_class_prob(&data, 1.0, &rho, &cond, Ridge::Absolute(0.0)).unwrap();
    let closed = data.unlabeled().filter(|x| x[0] == 1.0).count() as f64 / data.n_unlabeled() as f64;
    out.push(Check::new("separable-x closed form", (got - closed).abs(), 1e-6));

    // indicator smoothing: Epanechnikov with h = l = 0.5 on unit-spaced
    // classes, the continuous δ equals K_h(0) times the class probability
    let data = two_class_data(33, 50, 70, |y, rng| if y == 1.0 { 1.0 } else { -1.0 } + rng.random_range(-1.5..1.5));
    let lab: Vec<(f64, Vec<f64>)> = data.labeled().map(|(y, x)| (y, x.to_vec())).collect();
    let cond = labelshift::fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(0.8).unwrap()).unwrap();
    let kernel = KernelSpec::epanechnikov(0.5).unwrap();
    let design = Design::new(&data, &cond, &kernel, &GridSpec::Basis).unwrap();
    let rho_c = DensityRatioModel::grid(vec![1.0, 2.0], vec![1.4, 0.6], 1e-3).unwrap();
    let rho_d = DiscreteRatio::new(vec![1.0, 2.0], vec![1.4, 0.6], 1e-3).unwrap();
    let mut worst: f64 = 0.0;
    let deltas = estimate_deltas(&design, &[1.0, 2.0], &rho_c, &kernel, Ridge::Absolute(0.0)).unwrap();
    let probs = DiscreteDesign::new(&data, &cond)
        .unwrap()
        .class_probs(&rho_d, Ridge::Absolute(0.0))
        .unwrap();
    let k0 = kernel.scaled(0.0);
    for (d, p) in deltas.values().iter().zip(&probs) {
        worst = worst.max((d / k0 - p).abs());
    }
    out.push(Check::new("discrete vs continuous (h = l = 0.5)", worst, 1e-8));
    let sum = (probs.iter().sum::<f64>() - 1.0).abs();
    out.push(Check::new("class probabilities sum to one", sum, 1e-8));
    out
}
