//! Target parameters: moments `θ = E_q{s(Y, X)}` and general estimating
//! equations `E_q{U(Y, X, θ)} = 0`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

type MomentFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(y, x, θ, out)`; writes `U` (length `d`) or `∂U/∂θᵀ` (row-major `d × d`).
type EquationFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum EstimandKind {
    Moment(MomentFn),
    General {
        dim: usize,
        u: EquationFn,
        jacobian: EquationFn,
    },
}

#[derive(Clone)]
pub struct Estimand {
    name: String,
    kind: EstimandKind,
    /// Component of `θ` reported as the headline estimate.
    primary: usize,
}

impl fmt::Debug for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Estimand")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("moment", &self.is_moment())
            .finish()
    }
}

impl Estimand {
    pub fn moment(name: impl Into<String>, s: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            kind: EstimandKind::Moment(Arc::new(s)),
            primary: 0,
        }
    }

    pub fn general(
        name: impl Into<String>,
        dim: usize,
        primary: usize,
        u: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        jacobian: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || primary >= dim {
            return Err(Error::InvalidInput(format!(
                "estimand needs dim >= 1 and primary < dim, got dim {dim}, primary {primary}"
            )));
        }
        Ok(Self {
            name: name.into(),
            kind: EstimandKind::General {
                dim,
                u: Arc::new(u),
                jacobian: Arc::new(jacobian),
            },
            primary,
        })
    }

    /// `E_q(Y)` as the moment `s(y, x) = y`.
    pub fn mean() -> Self {
        Self::moment("mean", |y, _| y)
    }

    /// `E_q(Y)` through the estimating function `U = y - θ`.
    pub fn mean_equation() -> Self {
        Self::general("mean", 1, 0, |y, _, t, out| out[0] = y - t[0], |_, _, _, out| out[0] = -1.0)
            .expect("valid dimensions")
    }

    /// `var_q(Y)` via the joint equation `U = (y - θ₁, y² - θ₁² - θ₂)`;
    /// `θ₂` is the headline component.
    pub fn variance() -> Self {
        Self::general(
            "variance",
            2,
            1,
            |y, _, t, out| {
                out[0] = y - t[0];
                out[1] = y * y - t[0] * t[0] - t[1];
            },
            |_, _, t, out| {
                out[0] = -1.0;
                out[1] = 0.0;
                out[2] = -2.0 * t[0];
                out[3] = -1.0;
            },
        )
        .expect("valid dimensions")
    }

    /// `δ₀ = E_q{K_h(Y - y₀)}`.
    pub fn kernel_bump(spec: KernelSpec, y0: f64) -> Self {
        Self::moment(format!("kernel-bump@{y0}"), move |y, _| spec.scaled(y - y0))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &EstimandKind {
        &self.kind
    }

    pub fn is_moment(&self) -> bool {
        matches!(self.kind, EstimandKind::Moment(_))
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            EstimandKind::Moment(_) => 1,
            EstimandKind::General { dim, .. } => *dim,
        }
    }

    pub fn primary(&self) -> usize {
        self.primary
    }

    /// `U(y, x, θ)`; for a moment, `s(y, x) - θ`.
    pub fn eval_u(&self, y: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        match &self.kind {
            EstimandKind::Moment(s) => out[0] = s(y, x) - theta[0],
            EstimandKind::General { u, .. } => u(y, x, theta, out),
        }
    }

    /// `∂U/∂θᵀ`, row-major.
    pub fn eval_jacobian(&self, y: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        match &self.kind {
            EstimandKind::Moment(_) => out[0] = -1.0,
            EstimandKind::General { jacobian, .. } => jacobian(y, x, theta, out),
        }
    }
}
