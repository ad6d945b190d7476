//! Monte Carlo harness: Gaussian label-shift data, a misspecified working
//! ratio, every estimator on every replicate, and summary metrics.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_working_model, shift_dependent_report};
use crate::condexp::{nonparametric_cond_exp, CondExpModel, DesignMap, NormalRegression};
use crate::data::PooledDataset;
use crate::density_ratio::{ratio_pipeline, DensityRatioModel, FredholmSettings, RatioPipeline, RhoGridPlan};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::estimators::{estimate_with_ratio, EstimateReport, RootSolverCfg};
use crate::fredholm::Design;
use crate::kernel::BandwidthPolicy;

/// Floor for closed-form ratios; far below any value reached on the data.
const CLOSED_FORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Importance-weighted labeled average with the working ratio.
    ShiftDependent,
    /// Working ratio with a normal working regression for `Ê_p`.
    DoublyFlexible,
    /// Working ratio with nonparametric `Ê_p`.
    SinglyFlexible,
    /// Estimated ratio `ρ̃`.
    EfficientTilde,
    /// Refined ratio `ρ̂`.
    EfficientHat,
    /// True ratio.
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::ShiftDependent,
        EstimatorKind::DoublyFlexible,
        EstimatorKind::SinglyFlexible,
        EstimatorKind::EfficientTilde,
        EstimatorKind::EfficientHat,
        EstimatorKind::Oracle,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            EstimatorKind::ShiftDependent => "shift-dependent",
            EstimatorKind::DoublyFlexible => "doubly-flexible",
            EstimatorKind::SinglyFlexible => "singly-flexible",
            EstimatorKind::EfficientTilde => "efficient-tilde",
            EstimatorKind::EfficientHat => "efficient-hat",
            EstimatorKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

/// Source of `Ê_p{· | x}` for every estimator except the doubly flexible one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimCondExp {
    /// Nadaraya–Watson on the labeled rows.
    #[default]
    Nonparametric,
    /// The exact source posterior of `Y` given `x`.
    OraclePosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimandChoice {
    Mean,
    Variance,
}

impl EstimandChoice {
    pub fn estimand(&self) -> Estimand {
        match self {
            EstimandChoice::Mean => Estimand::mean(),
            EstimandChoice::Variance => Estimand::variance(),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EstimandChoice::Mean => "mean",
            EstimandChoice::Variance => "variance",
        }
    }

    /// True headline value for a Gaussian target law.
    pub fn truth(&self, mean: f64, var: f64) -> f64 {
        match self {
            EstimandChoice::Mean => mean,
            EstimandChoice::Variance => var,
        }
    }
}

/// A normal law given by mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianLaw {
    pub mean: f64,
    pub var: f64,
}

impl GaussianLaw {
    pub fn density(&self, y: f64) -> f64 {
        (-(y - self.mean).powi(2) / (2.0 * self.var)).exp() / (2.0 * PI * self.var).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Total pooled size `N`.
    pub total: usize,
    /// Labeled with probability `pi` per row when false; exactly
    /// `round(pi · total)` labeled rows when true.
    pub fixed_split: bool,
    /// Probability that a row is labeled.
    pub pi: f64,
    pub source: GaussianLaw,
    pub target: GaussianLaw,
    /// `X | Y ~ N(αY, I)`.
    pub alpha: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// `(a, b)` in the working ratio `c*·ρ(y)·exp(a y + b y²)`.
    pub distortion: (f64, f64),
    pub estimators: Vec<EstimatorKind>,
    pub estimands: Vec<EstimandChoice>,
    pub cond_exp: SimCondExp,
    pub bandwidth: BandwidthPolicy,
    pub rho_plan: RhoGridPlan,
    pub fredholm: FredholmSettings,
    pub solver: RootSolverCfg,
    pub quadrature_nodes: usize,
    pub ci_level: f64,
    /// Evaluation points `(lo, hi, count)` of the emitted ratio curves.
    pub curve_grid: (f64, f64, usize),
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            total: 500,
            fixed_split: false,
            pi: 0.5,
            source: GaussianLaw { mean: 0.0, var: 2.0 },
            target: GaussianLaw { mean: 1.0, var: 1.0 },
            alpha: vec![-0.5, 0.5, 1.0],
            replicates: 1000,
            seed: 20240601,
            distortion: (0.2, 0.1),
            estimators: EstimatorKind::ALL.to_vec(),
            estimands: vec![EstimandChoice::Mean, EstimandChoice::Variance],
            cond_exp: SimCondExp::Nonparametric,
            bandwidth: BandwidthPolicy::default(),
            rho_plan: RhoGridPlan::default(),
            fredholm: FredholmSettings::default(),
            solver: RootSolverCfg::default(),
            quadrature_nodes: 40,
            ci_level: 0.95,
            curve_grid: (-1.0, 3.0, 41),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total < 10 {
            return Err(Error::Config("total must be >= 10".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config("pi must lie in (0, 1)".into()));
        }
        if !(self.source.var > 0.0 && self.target.var > 0.0) {
            return Err(Error::Config("variances must be > 0".into()));
        }
        if self.alpha.is_empty() {
            return Err(Error::Config("alpha must be nonempty".into()));
        }
        if self.quadrature_nodes == 0 {
            return Err(Error::Config("quadrature_nodes must be >= 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("ci_level must lie in (0, 1)".into()));
        }
        if self.curve_grid.2 < 2 || !(self.curve_grid.0 < self.curve_grid.1) {
            return Err(Error::Config("curve_grid needs lo < hi and count >= 2".into()));
        }
        self.bandwidth.validate()?;
        self.rho_plan.validate()?;
        self.solver.validate()
    }

    /// True `ρ(y) = q_Y(y) / p_Y(y)`.
    pub fn true_rho(&self, y: f64) -> f64 {
        self.target.density(y) / self.source.density(y)
    }

    pub fn true_rho_model(&self) -> DensityRatioModel {
        let cfg = self.clone();
        DensityRatioModel::closed_form(move |y| cfg.true_rho(y), CLOSED_FORM_FLOOR).expect("positive floor")
    }

    /// `E_p(Y | x)` under the source law.
    pub fn source_posterior_mean(&self, x: &[f64]) -> f64 {
        let a2: f64 = self.alpha.iter().map(|a| a * a).sum();
        let v = 1.0 / (1.0 / self.source.var + a2);
        let ax: f64 = self.alpha.iter().zip(x).map(|(a, b)| a * b).sum();
        v * (self.source.mean / self.source.var + ax)
    }

    /// `Y | x ~ N(v(μ/σ² + αᵀx), v)` with `v = 1/(1/σ² + |α|²)` under the source law.
    pub fn source_posterior(&self) -> Result<CondExpModel> {
        let a2: f64 = self.alpha.iter().map(|a| a * a).sum();
        let v = 1.0 / (1.0 / self.source.var + a2);
        let mut beta = vec![v * self.source.mean / self.source.var];
        beta.extend(self.alpha.iter().map(|a| v * a));
        Ok(CondExpModel::Normal(NormalRegression::with_coefficients(
            DesignMap::Linear,
            beta,
            v,
            self.quadrature_nodes,
        )?))
    }

    pub fn curve_points(&self) -> Vec<f64> {
        let (lo, hi, m) = self.curve_grid;
        (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect()
    }
}

/// One simulated dataset. `hidden_y` keeps the discarded unlabeled labels in
/// the order of the unlabeled rows, for validation only.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub index: usize,
    pub data: PooledDataset,
    pub hidden_y: Vec<f64>,
    /// Redraws needed to get both labeled and unlabeled rows.
    pub redraws: u32,
}

fn replicate_rng(seed: u64, index: usize, attempt: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((attempt as u64) << 40) ^ index as u64);
    rng
}

/// Draws replicate `index`; depends only on `(config.seed, index)`.
pub fn generate_replicate(config: &SimConfig, index: usize) -> Result<Replicate> {
    config.validate()?;
    let source = Normal::new(config.source.mean, config.source.var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let target = Normal::new(config.target.mean, config.target.var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let coin = Bernoulli::new(config.pi).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..1000u32 {
        let mut rng = replicate_rng(config.seed, index, attempt);
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut hidden_y = Vec::new();
        let n_fixed = (config.pi * config.total as f64).round() as usize;
        for i in 0..config.total {
            let r = if config.fixed_split { i < n_fixed } else { coin.sample(&mut rng) };
            let y = if r { source.sample(&mut rng) } else { target.sample(&mut rng) };
            let x: Vec<f64> = config
                .alpha
                .iter()
                .map(|a| a * y + rng.sample::<f64, _>(StandardNormal))
                .collect();
            if r {
                labeled.push((y, x));
            } else {
                unlabeled.push(x);
                hidden_y.push(y);
            }
        }
        if labeled.is_empty() || unlabeled.is_empty() {
            continue;
        }
        return Ok(Replicate {
            index,
            data: PooledDataset::from_parts(labeled, unlabeled)?,
            hidden_y,
            redraws: attempt,
        });
    }
    Err(Error::Data("could not draw a replicate with both labeled and unlabeled rows".into()))
}

/// `ρ*(y) = c*·ρ(y)·exp(a y + b y²)` with `c*` chosen so that
/// `n⁻¹ Σ_labeled ρ*(y_i) = 1`.
pub fn working_rho_star(config: &SimConfig, data: &PooledDataset) -> DensityRatioModel {
    let (a, b) = config.distortion;
    let cfg = config.clone();
    let raw = move |y: f64| cfg.true_rho(y) * (a * y + b * y * y).exp();
    let mean = data.labeled().map(|(y, _)| raw(y)).sum::<f64>() / data.n() as f64;
    let c = 1.0 / mean;
    DensityRatioModel::closed_form(move |y| c * raw(y), CLOSED_FORM_FLOOR).expect("positive floor")
}

/// One estimator's result on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub replicate: usize,
    pub estimand: EstimandChoice,
    pub estimator: EstimatorKind,
    pub estimate: f64,
    pub sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Ratio curves of one replicate on the configured grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoCurvePoint {
    pub replicate: usize,
    pub y: f64,
    pub rho_true: f64,
    pub rho_star: f64,
    pub rho_tilde: f64,
    pub rho_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub estimand: Option<EstimandChoice>,
    pub estimator: Option<EstimatorKind>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReplicateOutcome {
    pub estimates: Vec<RawEstimate>,
    pub curves: Vec<RhoCurvePoint>,
    pub failures: Vec<ReplicateFailure>,
}

/// Shared per-replicate state: designs and the three ratio stages.
struct Prepared {
    design_np: Design,
    design_normal: Option<Design>,
    rho_star: DensityRatioModel,
    rho_true: DensityRatioModel,
    ratios: Option<RatioPipeline>,
    ratio_error: Option<String>,
}

fn prepare(config: &SimConfig, data: &PooledDataset) -> Result<Prepared> {
    let n = data.n();
    let kernels = config.bandwidth.resolve(n)?;
    let cond = match config.cond_exp {
        SimCondExp::Nonparametric => nonparametric_cond_exp(data, &config.bandwidth)?,
        SimCondExp::OraclePosterior => config.source_posterior()?,
    };
    let design_np = Design::new(data, &cond, &kernels.response, &config.fredholm.grid)?;
    let needs_normal = config.estimators.contains(&EstimatorKind::DoublyFlexible);
    let design_normal = if needs_normal {
        let map = if config.alpha.len() == 3 { DesignMap::DistortedTrivariate } else { DesignMap::Linear };
        let working = fit_working_model(data, map, config.quadrature_nodes)?;
        Some(Design::new(data, &CondExpModel::Normal(working), &kernels.response, &config.fredholm.grid)?)
    } else {
        None
    };
    let rho_star = working_rho_star(config, data);
    let (ratios, ratio_error) = match ratio_pipeline(&design_np, &config.rho_plan, &rho_star, &kernels.density) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Prepared {
        design_np,
        design_normal,
        rho_star,
        rho_true: config.true_rho_model(),
        ratios,
        ratio_error,
    })
}

fn run_estimator(config: &SimConfig, prep: &Prepared, kind: EstimatorKind, estimand: &Estimand) -> Result<EstimateReport> {
    let (ridge, solver, level) = (config.fredholm.ridge, &config.solver, config.ci_level);
    let ratios = || {
        prep.ratios
            .as_ref()
            .ok_or_else(|| Error::Singular(prep.ratio_error.clone().unwrap_or_default()))
    };
    match kind {
        EstimatorKind::ShiftDependent => shift_dependent_report(&prep.design_np, estimand, &prep.rho_star, solver, level),
        EstimatorKind::SinglyFlexible => estimate_with_ratio(kind.id(), &prep.design_np, estimand, &prep.rho_star, ridge, solver, level),
        EstimatorKind::DoublyFlexible => {
            let design = prep.design_normal.as_ref().expect("normal design prepared");
            estimate_with_ratio(kind.id(), design, estimand, &prep.rho_star, ridge, solver, level)
        }
        EstimatorKind::EfficientTilde => {
            estimate_with_ratio(kind.id(), &prep.design_np, estimand, &ratios()?.tilde.model, ridge, solver, level)
        }
        EstimatorKind::EfficientHat => {
            estimate_with_ratio(kind.id(), &prep.design_np, estimand, &ratios()?.hat.model, ridge, solver, level)
        }
        EstimatorKind::Oracle => estimate_with_ratio(kind.id(), &prep.design_np, estimand, &prep.rho_true, ridge, solver, level),
    }
}

/// Runs every configured estimator on replicate `index`.
pub fn run_replicate(config: &SimConfig, index: usize) -> ReplicateOutcome {
    let mut out = ReplicateOutcome::default();
    let fail = |out: &mut ReplicateOutcome, estimand, estimator, e: &Error| {
        out.failures.push(ReplicateFailure {
            replicate: index,
            estimand,
            estimator,
            message: e.to_string(),
        })
    };
    let rep = match generate_replicate(config, index) {
        Ok(r) => r,
        Err(e) => {
            fail(&mut out, None, None, &e);
            return out;
        }
    };
    let prep = match prepare(config, &rep.data) {
        Ok(p) => p,
        Err(e) => {
            fail(&mut out, None, None, &e);
            return out;
        }
    };
    if let Some(r) = &prep.ratios {
        for y in config.curve_points() {
            out.curves.push(RhoCurvePoint {
                replicate: index,
                y,
                rho_true: prep.rho_true.eval(y),
                rho_star: prep.rho_star.eval(y),
                rho_tilde: r.tilde.model.eval(y),
                rho_hat: r.hat.model.eval(y),
            });
        }
    }
    for &choice in &config.estimands {
        let estimand = choice.estimand();
        for &kind in &config.estimators {
            match run_estimator(config, &prep, kind, &estimand) {
                Ok(rep) => {
                    let [lo, hi] = rep.interval();
                    out.estimates.push(RawEstimate {
                        replicate: index,
                        estimand: choice,
                        estimator: kind,
                        estimate: rep.estimate(),
                        sd: rep.sd(),
                        ci_lo: lo,
                        ci_hi: hi,
                    });
                }
                Err(e) => fail(&mut out, Some(choice), Some(kind), &e),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimand: EstimandChoice,
    pub estimator: EstimatorKind,
    pub mse_x100: f64,
    pub bias_x10: f64,
    pub se_x10: f64,
    /// `MSE / MSE(oracle)`; `NaN` without an oracle row.
    pub are: f64,
    pub coverage: f64,
    /// Mean of the estimated standard errors, times 10.
    pub mean_sd_x10: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub rows: Vec<MetricsRow>,
    pub raw: Vec<RawEstimate>,
    pub curves: Vec<RhoCurvePoint>,
    pub failures: Vec<ReplicateFailure>,
}

/// Worker count from `LABELSHIFT_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("LABELSHIFT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs replicates `indices` in parallel; output is in index order.
pub fn run_replicates(config: &SimConfig, indices: &[usize]) -> Result<Vec<ReplicateOutcome>> {
    config.validate()?;
    let work = || indices.par_iter().map(|&i| run_replicate(config, i)).collect();
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

/// Full study: every replicate, every estimator, summary metrics.
pub fn run_study(config: &SimConfig) -> Result<StudyOutput> {
    let indices: Vec<usize> = (0..config.replicates).collect();
    let outcomes = run_replicates(config, &indices)?;
    let mut raw = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        raw.extend(o.estimates);
        curves.extend(o.curves);
        failures.extend(o.failures);
    }
    let rows = summarize(config, &raw, &failures);
    Ok(StudyOutput {
        rows,
        raw,
        curves,
        failures,
    })
}

/// Metrics per estimand and estimator, in configuration order.
pub fn summarize(config: &SimConfig, raw: &[RawEstimate], failures: &[ReplicateFailure]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for &choice in &config.estimands {
        let truth = choice.truth(config.target.mean, config.target.var);
        let mut block: Vec<MetricsRow> = config
            .estimators
            .iter()
            .map(|&kind| {
                let est: Vec<&RawEstimate> = raw
                    .iter()
                    .filter(|r| r.estimand == choice && r.estimator == kind)
                    .collect();
                let failed = failures
                    .iter()
                    .filter(|f| {
                        f.estimator.is_none_or(|e| e == kind) && f.estimand.is_none_or(|e| e == choice)
                    })
                    .count();
                metrics(choice, kind, truth, &est, failed)
            })
            .collect();
        let oracle = block
            .iter()
            .find(|r| r.estimator == EstimatorKind::Oracle)
            .map(|r| r.mse_x100);
        for row in &mut block {
            row.are = match oracle {
                Some(m) => row.mse_x100 / m,
                None => f64::NAN,
            };
        }
        rows.extend(block);
    }
    rows
}

fn metrics(estimand: EstimandChoice, estimator: EstimatorKind, truth: f64, est: &[&RawEstimate], failures: usize) -> MetricsRow {
    let m = est.len() as f64;
    let mean = est.iter().map(|r| r.estimate).sum::<f64>() / m;
    let mse = est.iter().map(|r| (r.estimate - truth).powi(2)).sum::<f64>() / m;
    let var = if est.len() > 1 {
        est.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let covered = est.iter().filter(|r| r.ci_lo <= truth && truth <= r.ci_hi).count() as f64;
    MetricsRow {
        estimand,
        estimator,
        mse_x100: 100.0 * mse,
        bias_x10: 10.0 * (mean - truth),
        se_x10: 10.0 * var.sqrt(),
        are: f64::NAN,
        coverage: covered / m,
        mean_sd_x10: 10.0 * est.iter().map(|r| r.sd).sum::<f64>() / m,
        replicates: est.len(),
        failures,
    }
}
