//! Density-ratio models `ρ(y) = q_Y(y) / p_Y(y)` and their three-stage
//! estimation: a working model `ρ*`, the consistent `ρ̃` and the refined
//! `ρ̂`.
//!
//! At a knot `t`, `δ(t) = E_q{K_h(Y - t)}` is estimated as a moment with the
//! current ratio model, and the ratio is `δ(t) / p̂_Y(t)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::condexp::CondExpModel;
use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::estimators::{moment_fit, MomentFit};
use crate::fredholm::{quantile_sorted, Design, GridSpec, Ridge};
use crate::kernel::{kde, BandwidthPolicy, KernelSpec};

pub const DEFAULT_CLIP_FLOOR: f64 = 1e-3;
/// Below this `p̂_Y(t)` a knot counts as outside the labeled support.
pub const MIN_DENSITY: f64 = 1e-10;

type RatioFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum RatioShape {
    ClosedForm(RatioFn),
    /// Piecewise linear through `(knots, values)`, flat outside.
    Grid { knots: Vec<f64>, values: Vec<f64> },
}

/// A positive function of `y`; every evaluation is at least `clip_floor`.
#[derive(Clone)]
pub struct DensityRatioModel {
    shape: RatioShape,
    clip_floor: f64,
}

impl fmt::Debug for DensityRatioModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            RatioShape::ClosedForm(_) => write!(f, "ClosedForm(floor = {})", self.clip_floor),
            RatioShape::Grid { knots, values } => f
                .debug_struct("Grid")
                .field("knots", knots)
                .field("values", values)
                .field("clip_floor", &self.clip_floor)
                .finish(),
        }
    }
}

impl DensityRatioModel {
    pub fn closed_form(f: impl Fn(f64) -> f64 + Send + Sync + 'static, clip_floor: f64) -> Result<Self> {
        check_floor(clip_floor)?;
        Ok(Self {
            shape: RatioShape::ClosedForm(Arc::new(f)),
            clip_floor,
        })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            shape: RatioShape::ClosedForm(Arc::new(move |_| c)),
            clip_floor: DEFAULT_CLIP_FLOOR.min(c.max(f64::MIN_POSITIVE)),
        }
    }

    /// Values below `clip_floor` are raised to it.
    pub fn grid(knots: Vec<f64>, values: Vec<f64>, clip_floor: f64) -> Result<Self> {
        check_floor(clip_floor)?;
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "grid ratio needs matching nonempty knots and values, got {} and {}",
                knots.len(),
                values.len()
            )));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("ratio knots must be strictly increasing".into()));
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ratio grid"));
        }
        let values = values.into_iter().map(|v| v.max(clip_floor)).collect();
        Ok(Self {
            shape: RatioShape::Grid { knots, values },
            clip_floor,
        })
    }

    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }

    pub fn shape(&self) -> &RatioShape {
        &self.shape
    }

    pub fn knots(&self) -> Option<&[f64]> {
        match &self.shape {
            RatioShape::Grid { knots, .. } => Some(knots),
            RatioShape::ClosedForm(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match &self.shape {
            RatioShape::Grid { values, .. } => Some(values),
            RatioShape::ClosedForm(_) => None,
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        let raw = match &self.shape {
            RatioShape::ClosedForm(f) => f(y),
            RatioShape::Grid { knots, values } => interpolate(knots, values, y),
        };
        raw.max(self.clip_floor)
    }
}

fn check_floor(clip_floor: f64) -> Result<()> {
    if !(clip_floor > 0.0 && clip_floor.is_finite()) {
        return Err(Error::InvalidInput(format!("clip_floor must be > 0, got {clip_floor}")));
    }
    Ok(())
}

fn interpolate(knots: &[f64], values: &[f64], y: f64) -> f64 {
    let last = knots.len() - 1;
    if y <= knots[0] {
        return values[0];
    }
    if y >= knots[last] {
        return values[last];
    }
    let k = knots.partition_point(|&t| t <= y) - 1;
    let f = (y - knots[k]) / (knots[k + 1] - knots[k]);
    values[k] + f * (values[k + 1] - values[k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    /// Evenly spaced probability levels between the trimming quantiles.
    Quantile,
    /// Evenly spaced values between the trimming quantiles.
    Uniform,
}

/// Where `ρ̃` and `ρ̂` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoGridPlan {
    /// Knot count; `None` means `max(3, ⌈n^{1/4}⌉)`.
    pub num_points: Option<usize>,
    pub placement: KnotPlacement,
    pub lower_quantile: f64,
    pub upper_quantile: f64,
    pub clip_floor: f64,
    /// Ridge of the kernel-bump solves; heavier than the estimand ridge
    /// because a narrow bump is poorly resolved through `E[· | x]`.
    pub ridge: Ridge,
}

/// Default ratio-stage ridge, relative to the operator scale.
pub const DEFAULT_RATIO_RIDGE: f64 = 3.0;

impl Default for RhoGridPlan {
    fn default() -> Self {
        Self {
            num_points: None,
            placement: KnotPlacement::Quantile,
            lower_quantile: 0.05,
            upper_quantile: 0.95,
            clip_floor: DEFAULT_CLIP_FLOOR,
            ridge: Ridge::Relative(DEFAULT_RATIO_RIDGE),
        }
    }
}

impl RhoGridPlan {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.num_points {
            if m < 3 {
                return Err(Error::Config(format!("rho grid needs at least 3 knots, got {m}")));
            }
        }
        if !(0.0 <= self.lower_quantile && self.lower_quantile < self.upper_quantile && self.upper_quantile <= 1.0) {
            return Err(Error::Config("rho grid quantiles must satisfy 0 <= lower < upper <= 1".into()));
        }
        check_floor(self.clip_floor).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn count(&self, n: usize) -> usize {
        self.num_points
            .unwrap_or_else(|| ((n as f64).powf(0.25).ceil() as usize).max(3))
    }

    /// Knots for a sorted labeled sample; duplicates are removed.
    pub fn knots(&self, sorted_y: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if sorted_y.is_empty() {
            return Err(Error::EmptySample("labeled responses"));
        }
        let m = self.count(sorted_y.len());
        let (lo, hi) = (self.lower_quantile, self.upper_quantile);
        let step = |k: usize| k as f64 / (m - 1) as f64;
        let mut knots: Vec<f64> = match self.placement {
            KnotPlacement::Quantile => (0..m)
                .map(|k| quantile_sorted(sorted_y, lo + (hi - lo) * step(k)))
                .collect(),
            KnotPlacement::Uniform => {
                let (a, b) = (quantile_sorted(sorted_y, lo), quantile_sorted(sorted_y, hi));
                (0..m).map(|k| a + (b - a) * step(k)).collect()
            }
        };
        knots.dedup();
        Ok(knots)
    }
}

/// Numerical settings of the integral-equation solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FredholmSettings {
    pub grid: GridSpec,
    pub ridge: Ridge,
}

impl Default for FredholmSettings {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            ridge: Ridge::default(),
        }
    }
}

/// `δ` estimates at several points from one operator solve.
#[derive(Debug, Clone)]
pub struct DeltaEstimates {
    pub points: Vec<f64>,
    pub fit: MomentFit,
}

impl DeltaEstimates {
    pub fn values(&self) -> &[f64] {
        &self.fit.theta
    }
}

/// `δ(t) = E_q{K_h(Y - t)}` at each point, estimated with ratio model `rho`.
pub fn estimate_deltas(design: &Design, points: &[f64], rho: &DensityRatioModel, h: &KernelSpec, ridge: Ridge) -> Result<DeltaEstimates> {
    let weights = design.weights(rho)?;
    let op = design.operator(rho, &weights, ridge)?;
    let h = *h;
    let pts = points.to_vec();
    let fit = moment_fit(design, &op, points.len(), move |y, _, out| {
        for (o, &t) in out.iter_mut().zip(&pts) {
            *o = h.scaled(y - t);
        }
    })?;
    Ok(DeltaEstimates {
        points: points.to_vec(),
        fit,
    })
}

/// Single-point `δ` estimate.
pub fn estimate_delta0(
    data: &PooledDataset,
    y0: f64,
    rho: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<f64> {
    let kernels = bw.resolve(data.n())?;
    let design = Design::new(data, condexp, &kernels.response, &settings.grid)?;
    Ok(estimate_deltas(&design, &[y0], rho, &kernels.density, settings.ridge)?.values()[0])
}

/// A fitted grid ratio together with the raw knot-level quantities.
#[derive(Debug, Clone)]
pub struct RatioEstimate {
    pub model: DensityRatioModel,
    pub knots: Vec<f64>,
    pub deltas: Vec<f64>,
    pub densities: Vec<f64>,
    /// Knots whose raw ratio fell below the clip floor.
    pub clipped: Vec<f64>,
    pub fit: MomentFit,
}

/// One stage of ratio estimation: `max(floor, δ(t_k) / p̂_Y(t_k))` at the
/// plan's knots, with `δ` computed under `rho`.
pub fn ratio_stage(design: &Design, plan: &RhoGridPlan, rho: &DensityRatioModel, h: &KernelSpec) -> Result<RatioEstimate> {
    let ys = design.labeled_y();
    let knots = plan.knots(ys)?;
    let mut densities = Vec::with_capacity(knots.len());
    for &t in &knots {
        let p = kde(ys, t, h)?;
        if p < MIN_DENSITY {
            return Err(Error::SupportViolation(t));
        }
        densities.push(p);
    }
    let deltas = estimate_deltas(design, &knots, rho, h, plan.ridge)?;
    let raw: Vec<f64> = deltas.values().iter().zip(&densities).map(|(d, p)| d / p).collect();
    let clipped = knots
        .iter()
        .zip(&raw)
        .filter(|(_, &r)| r < plan.clip_floor)
        .map(|(&t, _)| t)
        .collect();
    let model = DensityRatioModel::grid(knots.clone(), raw, plan.clip_floor)?;
    Ok(RatioEstimate {
        model,
        knots,
        deltas: deltas.values().to_vec(),
        densities,
        clipped,
        fit: deltas.fit,
    })
}

fn staged(
    data: &PooledDataset,
    plan: &RhoGridPlan,
    rho: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<DensityRatioModel> {
    if data.n() < 10 {
        return Err(Error::InvalidInput(format!(
            "ratio estimation needs at least 10 labeled rows, got {}",
            data.n()
        )));
    }
    let kernels = bw.resolve(data.n())?;
    let design = Design::new(data, condexp, &kernels.response, &settings.grid)?;
    Ok(ratio_stage(&design, plan, rho, &kernels.density)?.model)
}

/// `ρ̃` from the working model `ρ*`.
pub fn consistent_rho(
    data: &PooledDataset,
    plan: &RhoGridPlan,
    rho_star: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<DensityRatioModel> {
    staged(data, plan, rho_star, condexp, bw, settings)
}

/// `ρ̂` from a consistent `ρ̃`.
pub fn efficient_rho(
    data: &PooledDataset,
    plan: &RhoGridPlan,
    rho_tilde: &DensityRatioModel,
    condexp: &CondExpModel,
    bw: &BandwidthPolicy,
    settings: &FredholmSettings,
) -> Result<DensityRatioModel> {
    staged(data, plan, rho_tilde, condexp, bw, settings)
}

/// `ρ*`, `ρ̃` and `ρ̂` sharing one design.
#[derive(Debug, Clone)]
pub struct RatioPipeline {
    pub tilde: RatioEstimate,
    pub hat: RatioEstimate,
}

pub fn ratio_pipeline(design: &Design, plan: &RhoGridPlan, rho_star: &DensityRatioModel, h: &KernelSpec) -> Result<RatioPipeline> {
    let tilde = ratio_stage(design, plan, rho_star, h)?;
    let hat = ratio_stage(design, plan, &tilde.model, h)?;
    Ok(RatioPipeline { tilde, hat })
}

/// `∫ ρ(y) p̂_Y(y) dy` over `[a, b]` by the trapezoid rule.
pub fn normalization(model: &DensityRatioModel, sorted_y: &[f64], h: &KernelSpec, a: f64, b: f64, steps: usize) -> Result<f64> {
    let dx = (b - a) / steps as f64;
    let mut total = 0.0;
    for k in 0..=steps {
        let y = a + dx * k as f64;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        total += w * model.eval(y) * kde(sorted_y, y, h)?;
    }
    Ok(total * dx)
}

/// Stacks a set of models evaluated on `ys` as columns.
pub fn evaluate_models(models: &[&DensityRatioModel], ys: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(ys.len(), models.len(), |i, c| models[c].eval(ys[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_interpolates_and_clips() {
        let m = DensityRatioModel::grid(vec![0.0, 1.0, 2.0], vec![1.0, 3.0, -1.0], 0.01).unwrap();
        assert_eq!(m.eval(-1.0), 1.0);
        assert_eq!(m.eval(0.5), 2.0);
        assert_eq!(m.values().unwrap()[2], 0.01);
        assert_eq!(m.eval(5.0), 0.01);
        assert!((m.eval(1.5) - 1.505).abs() < 1e-12);
    }

    #[test]
    fn closed_form_is_floored() {
        let m = DensityRatioModel::closed_form(|y| y, 0.1).unwrap();
        assert_eq!(m.eval(-3.0), 0.1);
        assert_eq!(m.eval(2.0), 2.0);
        assert!(DensityRatioModel::closed_form(|_| 1.0, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(DensityRatioModel::grid(vec![0.0, 0.0], vec![1.0, 1.0], 0.1).is_err());
        assert!(DensityRatioModel::grid(vec![0.0], vec![], 0.1).is_err());
        assert!(DensityRatioModel::grid(vec![0.0], vec![f64::NAN], 0.1).is_err());
    }

    #[test]
    fn knot_count_rule() {
        let plan = RhoGridPlan::default();
        assert_eq!(plan.count(10), 3);
        assert_eq!(plan.count(250), 4);
        assert_eq!(plan.count(1000), 6);
        let ys: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let knots = plan.knots(&ys).unwrap();
        assert_eq!(knots.len(), 4);
        assert!((knots[0] - 5.0).abs() < 1e-12 && (knots[3] - 95.0).abs() < 1e-12);
        let uni = RhoGridPlan {
            placement: KnotPlacement::Uniform,
            num_points: Some(3),
            ..plan
        };
        assert_eq!(uni.knots(&ys).unwrap(), vec![5.0, 50.0, 95.0]);
        assert!(RhoGridPlan { num_points: Some(2), ..plan }.validate().is_err());
    }
}
