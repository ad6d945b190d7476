//! Kernel functions, kernel density estimation and Nadaraya–Watson
//! smoothing over a scalar response.
//!
//! Gaussian kernels of order `m > 2` use the Hermite-polynomial
//! construction `K_m(u) = φ(u) Σ_{j<m/2} (-1)^j He_{2j}(u) / (2^j j!)`,
//! which has vanishing moments `1..m-1` and integrates to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel values below this are flushed to zero.
pub const KERNEL_FLUSH: f64 = 1e-300;

/// Smallest admissible Nadaraya–Watson denominator.
pub const NW_MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
}

/// A kernel `K` of a given order together with its bandwidth `h`,
/// evaluated as `K_h(u) = K(u / h) / h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub order: u32,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, order: u32, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if order < 2 || order % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "kernel order must be even and at least 2, got {order}"
            )));
        }
        if family == KernelFamily::Epanechnikov && order != 2 {
            return Err(Error::InvalidInput(
                "Epanechnikov kernel is only available with order 2".into(),
            ));
        }
        Ok(Self {
            family,
            order,
            bandwidth,
        })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, 2, bandwidth)
    }

    pub fn epanechnikov(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Epanechnikov, 2, bandwidth)
    }

    /// `K(u)` without bandwidth scaling.
    pub fn eval(&self, u: f64) -> f64 {
        let v = match self.family {
            KernelFamily::Gaussian => {
                let base = INV_SQRT_2PI * (-0.5 * u * u).exp();
                if self.order == 2 {
                    base
                } else {
                    base * hermite_correction(u, self.order)
                }
            }
            KernelFamily::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        };
        if v.abs() < KERNEL_FLUSH {
            0.0
        } else {
            v
        }
    }

    /// `K_h(u) = K(u/h)/h`.
    pub fn scaled(&self, u: f64) -> f64 {
        self.eval(u / self.bandwidth) / self.bandwidth
    }

    /// True when `K(u) >= 0` for every `u`.
    pub fn is_nonnegative(&self) -> bool {
        self.order == 2
    }
}

/// Polynomial factor of the order-`m` Gaussian kernel.
fn hermite_correction(u: f64, order: u32) -> f64 {
    let top = order as usize - 2;
    // probabilists' Hermite polynomials, He_{k+1} = u He_k - k He_{k-1}
    let mut he = vec![1.0; top + 1];
    if top >= 1 {
        he[1] = u;
    }
    for k in 1..top {
        he[k + 1] = u * he[k] - k as f64 * he[k - 1];
    }
    let mut sum = 0.0;
    let mut coef = 1.0;
    for j in 0..(order as usize / 2) {
        if j > 0 {
            coef *= -1.0 / (2.0 * j as f64);
        }
        sum += coef * he[2 * j];
    }
    sum
}

/// Kernel density estimate `n^{-1} Σ K_h(y_i - y0)`.
pub fn kde(samples: &[f64], y0: f64, spec: &KernelSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample("kernel density estimate"));
    }
    let total: f64 = samples.iter().map(|&y| spec.scaled(y - y0)).sum();
    Ok(total / samples.len() as f64)
}

/// Nadaraya–Watson regression of vector-valued anchors on a scalar `y`.
pub fn nw_regress(anchors: &[(f64, Vec<f64>)], query: f64, spec: &KernelSpec) -> Result<Vec<f64>> {
    let first = anchors
        .first()
        .ok_or(Error::EmptySample("Nadaraya-Watson anchors"))?;
    let dim = first.1.len();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for (y, value) in anchors {
        if value.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: value.len(),
            });
        }
        let k = spec.scaled(query - y);
        if k == 0.0 {
            continue;
        }
        den += k;
        for (acc, v) in num.iter_mut().zip(value) {
            *acc += k * v;
        }
    }
    if den.abs() < NW_MIN_DENOMINATOR {
        return Err(Error::OutsideSupport(query));
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Constants and exponents for the rate-based bandwidths `C n^e`.
///
/// `h` smooths the density-ratio target `K_h(y - y0)`, `l` smooths
/// `E(· | y)` in the integral equation and `nw` is the covariate bandwidth
/// of the nonparametric `E_p(· | x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthPolicy {
    pub h_constant: f64,
    pub h_exponent: f64,
    pub l_constant: f64,
    pub l_exponent: f64,
    pub nw_constant: f64,
    pub nw_exponent: f64,
    pub density_kernel: KernelFamily,
    pub response_kernel: KernelFamily,
    pub kernel_order: u32,
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        Self {
            h_constant: 0.5,
            h_exponent: -1.0 / 16.0,
            l_constant: 1.5,
            l_exponent: -1.0 / 3.0,
            nw_constant: 3.0,
            nw_exponent: -1.0 / 7.0,
            density_kernel: KernelFamily::Gaussian,
            response_kernel: KernelFamily::Gaussian,
            kernel_order: 2,
        }
    }
}

impl BandwidthPolicy {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("h", self.h_constant, self.h_exponent),
            ("l", self.l_constant, self.l_exponent),
            ("nw", self.nw_constant, self.nw_exponent),
        ];
        for (name, c, e) in pairs {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("{name}_constant must be > 0")));
            }
            if !(e > -1.0 && e < 0.0) {
                return Err(Error::Config(format!("{name}_exponent must lie in (-1, 0)")));
            }
        }
        if self.kernel_order < 2 || self.kernel_order % 2 != 0 {
            return Err(Error::Config("kernel_order must be even and >= 2".into()));
        }
        Ok(())
    }

    pub fn h(&self, n: usize) -> f64 {
        self.h_constant * (n as f64).powf(self.h_exponent)
    }

    pub fn l(&self, n: usize) -> f64 {
        self.l_constant * (n as f64).powf(self.l_exponent)
    }

    pub fn nw(&self, n: usize) -> f64 {
        self.nw_constant * (n as f64).powf(self.nw_exponent)
    }

    /// Concrete kernels for a labeled sample of size `n`.
    pub fn resolve(&self, n: usize) -> Result<Bandwidths> {
        self.validate()?;
        Ok(Bandwidths {
            density: KernelSpec::new(self.density_kernel, self.kernel_order, self.h(n))?,
            response: KernelSpec::new(self.response_kernel, 2, self.l(n))?,
        })
    }
}

/// Resolved smoothing kernels: `density` is `K_h`, `response` is `K̃_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub density: KernelSpec,
    pub response: KernelSpec,
}
