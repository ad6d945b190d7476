//! Conditional-expectation operators `Ê_p{g(Y) | x}`.
//!
//! Every model reduces, at a fixed `x`, to a discrete rule
//! `Ê_p{g(Y) | x} = Σ_q ω_q g(t_q)`: kernel regression puts its nodes on the
//! labeled responses, the normal working model on Gauss–Hermite nodes.
//! Linearity in `g` is what lets the integral equation be assembled as a
//! matrix.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::kernel::{BandwidthPolicy, KernelSpec, KERNEL_FLUSH, NW_MIN_DENOMINATOR};

/// Nodes and weights of `Ê_p{· | x}` at one covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn expect(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * g(t))
            .sum()
    }

    pub fn point(y: f64) -> Self {
        Self {
            nodes: vec![y],
            weights: vec![1.0],
        }
    }
}

/// Nadaraya–Watson regression on the covariates with a radial kernel.
#[derive(Debug, Clone)]
pub struct KernelRegression {
    ys: Vec<f64>,
    xs: Vec<Vec<f64>>,
    kernel: KernelSpec,
}

impl KernelRegression {
    pub fn bandwidth(&self) -> f64 {
        self.kernel.bandwidth
    }

    fn rule(&self, x: &[f64]) -> Result<QuadRule> {
        let dim = self.xs[0].len();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        let b = self.kernel.bandwidth;
        let mut nodes = Vec::with_capacity(self.ys.len());
        let mut weights = Vec::with_capacity(self.ys.len());
        let mut total = 0.0;
        for (y, xi) in self.ys.iter().zip(&self.xs) {
            let d2: f64 = xi.iter().zip(x).map(|(a, c)| (a - c) * (a - c)).sum();
            let k = self.kernel.eval(d2.sqrt() / b);
            if k <= KERNEL_FLUSH {
                continue;
            }
            nodes.push(*y);
            weights.push(k);
            total += k;
        }
        if total < NW_MIN_DENOMINATOR {
            return Err(Error::OutsideSupport(x.first().copied().unwrap_or(f64::NAN)));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(QuadRule { nodes, weights })
    }
}

/// Feature map applied before the normal linear working model. An intercept
/// is always prepended.
#[derive(Clone)]
pub enum DesignMap {
    Linear,
    /// `(x1, exp(x2/2), x3/(1+exp(x2)) + 10)`: a deliberately wrong transform
    /// of a three-dimensional covariate.
    DistortedTrivariate,
    Custom(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for DesignMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignMap::Linear => write!(f, "Linear"),
            DesignMap::DistortedTrivariate => write!(f, "DistortedTrivariate"),
            DesignMap::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl DesignMap {
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![1.0];
        match self {
            DesignMap::Linear => out.extend_from_slice(x),
            DesignMap::DistortedTrivariate => {
                if x.len() != 3 {
                    return Err(Error::DimensionMismatch {
                        expected: 3,
                        found: x.len(),
                    });
                }
                out.push(x[0]);
                out.push((x[1] / 2.0).exp());
                out.push(x[2] / (1.0 + x[1].exp()) + 10.0);
            }
            DesignMap::Custom(f) => out.extend(f(x)),
        }
        Ok(out)
    }
}

/// Normal linear model `Y | x ~ N(βᵀφ(x), σ²)`.
#[derive(Debug, Clone)]
pub struct NormalRegression {
    pub design: DesignMap,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    nodes: Arc<GaussHermite>,
}

impl NormalRegression {
    /// A model with known coefficients (simulation oracle).
    pub fn with_coefficients(
        design: DesignMap,
        beta: Vec<f64>,
        sigma2: f64,
        quadrature_nodes: usize,
    ) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput("sigma2 must be positive".into()));
        }
        Ok(Self {
            design,
            beta,
            sigma2,
            nodes: Arc::new(GaussHermite::new(quadrature_nodes)?),
        })
    }

    /// Maximum-likelihood fit on labeled pairs.
    pub fn fit(labeled: &[(f64, &[f64])], design: DesignMap, quadrature_nodes: usize) -> Result<Self> {
        let n = labeled.len();
        if n == 0 {
            return Err(Error::EmptySample("working regression"));
        }
        let feats: Vec<Vec<f64>> = labeled
            .iter()
            .map(|(_, x)| design.features(x))
            .collect::<Result<_>>()?;
        let p = feats[0].len();
        if n < p {
            return Err(Error::Singular(format!(
                "working regression has {p} coefficients but only {n} labeled rows"
            )));
        }
        let xm = DMatrix::from_fn(n, p, |i, j| feats[i][j]);
        let yv = DVector::from_iterator(n, labeled.iter().map(|(y, _)| *y));
        let xtx = xm.transpose() * &xm;
        let xty = xm.transpose() * &yv;
        let beta = xtx
            .cholesky()
            .ok_or_else(|| Error::Singular("singular design in working regression".into()))?
            .solve(&xty);
        let resid = &yv - &xm * &beta;
        let sigma2 = resid.norm_squared() / n as f64;
        if !(sigma2 > 0.0) {
            return Err(Error::Singular("working regression fits the labels exactly".into()));
        }
        Self::with_coefficients(design, beta.iter().copied().collect(), sigma2, quadrature_nodes)
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        let f = self.design.features(x)?;
        if f.len() != self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len(),
                found: f.len(),
            });
        }
        Ok(f.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    fn rule(&self, x: &[f64]) -> Result<QuadRule> {
        let mu = self.mean(x)?;
        let scale = (2.0 * self.sigma2).sqrt();
        Ok(QuadRule {
            nodes: self.nodes.nodes.iter().map(|z| mu + scale * z).collect(),
            weights: self.nodes.weights.clone(),
        })
    }
}

/// Gauss–Hermite rule normalised to the standard normal after the change of
/// variables `y = μ + √2 σ z` (weights sum to one).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the
    /// physicists' Hermite recurrence.
    pub fn new(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidInput("quadrature needs at least one node".into()));
        }
        let jac = DMatrix::from_fn(count, count, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..count)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (eig.eigenvalues[k], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        })
    }
}

type CustomRule = Arc<dyn Fn(&[f64]) -> Result<QuadRule> + Send + Sync>;

/// The operator `Ê_p{· | x}`.
#[derive(Clone)]
pub enum CondExpModel {
    Kernel(KernelRegression),
    Normal(NormalRegression),
    /// Any externally supplied rule, e.g. classifier probabilities over the
    /// class labels.
    Custom(CustomRule),
}

impl fmt::Debug for CondExpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CondExpModel::Kernel(k) => f
                .debug_struct("Kernel")
                .field("anchors", &k.ys.len())
                .field("bandwidth", &k.kernel.bandwidth)
                .finish(),
            CondExpModel::Normal(m) => m.fmt(f),
            CondExpModel::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl CondExpModel {
    pub fn custom(f: impl Fn(&[f64]) -> Result<QuadRule> + Send + Sync + 'static) -> Self {
        CondExpModel::Custom(Arc::new(f))
    }

    /// The discrete rule representing `Ê_p{· | x}`.
    pub fn rule(&self, x: &[f64]) -> Result<QuadRule> {
        match self {
            CondExpModel::Kernel(k) => k.rule(x),
            CondExpModel::Normal(m) => m.rule(x),
            CondExpModel::Custom(f) => f(x),
        }
    }

    pub fn expect(&self, x: &[f64], g: impl FnMut(f64) -> f64) -> Result<f64> {
        Ok(self.rule(x)?.expect(g))
    }
}

/// Nonparametric `Ê_p{a(Y) | x}` by Nadaraya–Watson over the labeled rows
/// with a radial kernel on Euclidean covariate distance.
pub fn fit_cond_exp_nonparametric(labeled: &[(f64, Vec<f64>)], spec: &KernelSpec) -> Result<CondExpModel> {
    let first = labeled
        .first()
        .ok_or(Error::EmptySample("conditional expectation training data"))?;
    let dim = first.1.len();
    for (y, x) in labeled {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("labeled response"));
        }
    }
    Ok(CondExpModel::Kernel(KernelRegression {
        ys: labeled.iter().map(|p| p.0).collect(),
        xs: labeled.iter().map(|p| p.1.clone()).collect(),
        kernel: *spec,
    }))
}

/// [`fit_cond_exp_nonparametric`] on the labeled rows of `data` with the
/// policy's response kernel and covariate bandwidth.
pub fn nonparametric_cond_exp(data: &PooledDataset, bw: &BandwidthPolicy) -> Result<CondExpModel> {
    let labeled: Vec<(f64, Vec<f64>)> = data.labeled().map(|(y, x)| (y, x.to_vec())).collect();
    let spec = KernelSpec::new(bw.response_kernel, 2, bw.nw(data.n()))?;
    fit_cond_exp_nonparametric(&labeled, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_passes_through() {
        let lab = vec![(0.3, vec![1.0, 2.0]), (1.5, vec![0.0, 0.0]), (-2.0, vec![3.0, 1.0])];
        let m = fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(0.9).unwrap()).unwrap();
        for x in [[0.0, 0.0], [5.0, -1.0], [1.0, 1.0]] {
            assert_abs_diff_eq!(m.expect(&x, |_| 1.0).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn single_anchor() {
        let lab = vec![(2.0, vec![0.5])];
        let m = fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(1.0).unwrap()).unwrap();
        assert_eq!(m.expect(&[0.5], |y| y).unwrap(), 2.0);
    }

    #[test]
    fn dimension_checks() {
        let lab = vec![(2.0, vec![0.5]), (1.0, vec![0.5, 1.0])];
        assert!(fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(1.0).unwrap()).is_err());
        let lab = vec![(2.0, vec![0.5])];
        let m = fit_cond_exp_nonparametric(&lab, &KernelSpec::gaussian(1.0).unwrap()).unwrap();
        assert!(m.rule(&[0.5, 0.1]).is_err());
    }

    #[test]
    fn gauss_hermite_moments() {
        let gh = GaussHermite::new(40).unwrap();
        let s: f64 = gh.weights.iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        // E Z^2 = 1 and E Z^4 = 3 for Z = √2 z
        let m2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(z, w)| w * 2.0 * z * z).sum();
        let m4: f64 = gh
            .nodes
            .iter()
            .zip(&gh.weights)
            .map(|(z, w)| w * 4.0 * z.powi(4))
            .sum();
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-9);
        let gh3 = GaussHermite::new(3).unwrap();
        assert_abs_diff_eq!(gh3.nodes[2], (1.5f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(gh3.weights[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn normal_model_quadrature() {
        let m = NormalRegression::with_coefficients(DesignMap::Linear, vec![1.0, 2.0], 0.25, 40).unwrap();
        let model = CondExpModel::Normal(m);
        assert_abs_diff_eq!(model.expect(&[0.5], |_| 1.0).unwrap(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(model.expect(&[0.5], |y| y).unwrap(), 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(model.expect(&[0.5], |y| y * y).unwrap(), 4.25, epsilon = 1e-9);
    }

    #[test]
    fn normal_fit_recovers_line() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0]).collect();
        let labeled: Vec<(f64, &[f64])> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (1.0 + 3.0 * x[0] + if i % 2 == 0 { 0.1 } else { -0.1 }, x.as_slice()))
            .collect();
        let m = NormalRegression::fit(&labeled, DesignMap::Linear, 20).unwrap();
        assert_abs_diff_eq!(m.beta[1], 3.0, epsilon = 1e-2);
        assert_abs_diff_eq!(m.sigma2, 0.01, epsilon = 1e-3);
    }

    #[test]
    fn normal_fit_singular_design() {
        let xs = vec![vec![1.0], vec![1.0], vec![1.0]];
        let labeled: Vec<(f64, &[f64])> = xs.iter().map(|x| (0.5, x.as_slice())).collect();
        assert!(NormalRegression::fit(&labeled, DesignMap::Linear, 10).is_err());
    }
}
