//! Estimation on a user-supplied pooled dataset: the efficient estimator,
//! baseline comparisons, ratio curves and the discrete-label mode.

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_working_model, ppi_mean, ppi_std_err, shift_dependent_report};
use crate::condexp::{nonparametric_cond_exp, CondExpModel, DesignMap};
use crate::data::PooledDataset;
use crate::density_ratio::{ratio_pipeline, DensityRatioModel, FredholmSettings, RatioEstimate, RatioPipeline, RhoGridPlan};
use crate::discrete::{confusion_matrix_ratio, discrete_ratio_estimate, DiscreteDesign, DiscreteFit, DiscreteRatio};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::estimators::{estimate_with_ratio, EstimateReport, RootSolverCfg};
use crate::fredholm::{Design, Ridge};
use crate::inference::normal_quantile;
use crate::kernel::BandwidthPolicy;

/// Estimand selector for data analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisEstimand {
    #[default]
    Mean,
    Variance,
    /// `E_q(Y^k)`.
    Power(i32),
}

impl AnalysisEstimand {
    /// Accepts `mean`, `variance` or `power:k`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "variance" => Ok(Self::Variance),
            _ => s
                .strip_prefix("power:")
                .and_then(|k| k.parse().ok())
                .map(Self::Power)
                .ok_or_else(|| Error::Config(format!("unknown estimand '{s}' (expected mean, variance or power:k)"))),
        }
    }

    pub fn estimand(&self) -> Estimand {
        match *self {
            Self::Mean => Estimand::mean(),
            Self::Variance => Estimand::variance(),
            Self::Power(k) => Estimand::moment(format!("power:{k}"), move |y, _| y.powi(k)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisEstimator {
    /// Prediction-powered mean; needs a `y_pred` column.
    Ppi,
    /// Importance weighting with the working ratio.
    Shift,
    /// Working ratio with a linear normal working regression.
    DoublyFlexible,
    /// Working ratio with nonparametric `Ê_p`.
    SinglyFlexible,
    /// First-stage ratio `ρ̃`.
    EfficientTilde,
    /// Refined ratio `ρ̂`.
    Efficient,
}

impl AnalysisEstimator {
    pub const ALL: [AnalysisEstimator; 6] = [
        Self::Ppi,
        Self::Shift,
        Self::DoublyFlexible,
        Self::SinglyFlexible,
        Self::EfficientTilde,
        Self::Efficient,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Self::Ppi => "ppi",
            Self::Shift => "shift",
            Self::DoublyFlexible => "doubly-flexible",
            Self::SinglyFlexible => "singly-flexible",
            Self::EfficientTilde => "efficient-tilde",
            Self::Efficient => "efficient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

/// The working ratio `ρ*` that seeds the ratio pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkingRatio {
    /// `ρ* ≡ 1`.
    #[default]
    Unit,
    /// Piecewise-linear through the given points (class labels in discrete mode).
    Grid { knots: Vec<f64>, values: Vec<f64> },
    /// Confusion-matrix ratio from the `y_pred` column; discrete mode only.
    Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Dataset path; the command line takes precedence.
    pub data: Option<String>,
    pub estimand: AnalysisEstimand,
    /// Estimator reported by `estimate`.
    pub estimator: AnalysisEstimator,
    /// Estimators run by `compare`.
    pub estimators: Vec<AnalysisEstimator>,
    /// Treat `y` as a class label.
    pub discrete: bool,
    pub working_ratio: WorkingRatio,
    pub ci_level: f64,
    pub bandwidth: BandwidthPolicy,
    pub rho_plan: RhoGridPlan,
    pub fredholm: FredholmSettings,
    /// Tikhonov parameter of the `K × K` discrete system.
    pub discrete_ridge: Ridge,
    pub solver: RootSolverCfg,
    /// Gauss–Hermite nodes of the normal working regression.
    pub quadrature_nodes: usize,
    /// Number of points in the emitted ratio curves.
    pub curve_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            data: None,
            estimand: AnalysisEstimand::Mean,
            estimator: AnalysisEstimator::Efficient,
            estimators: vec![
                AnalysisEstimator::Shift,
                AnalysisEstimator::SinglyFlexible,
                AnalysisEstimator::EfficientTilde,
                AnalysisEstimator::Efficient,
            ],
            discrete: false,
            working_ratio: WorkingRatio::Unit,
            ci_level: 0.95,
            bandwidth: BandwidthPolicy::default(),
            rho_plan: RhoGridPlan::default(),
            fredholm: FredholmSettings::default(),
            discrete_ridge: Ridge::Absolute(0.0),
            solver: RootSolverCfg::default(),
            quadrature_nodes: 40,
            curve_points: 101,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("ci_level must lie in (0, 1)".into()));
        }
        if self.quadrature_nodes == 0 {
            return Err(Error::Config("quadrature_nodes must be >= 1".into()));
        }
        if self.curve_points < 2 {
            return Err(Error::Config("curve_points must be >= 2".into()));
        }
        if self.discrete && !matches!(self.estimand, AnalysisEstimand::Mean) {
            return Err(Error::Config("discrete mode estimates class probabilities; leave estimand at 'mean'".into()));
        }
        self.bandwidth.validate()?;
        self.rho_plan.validate()?;
        self.solver.validate()
    }
}

/// A dataset with the optional per-row prediction column.
#[derive(Debug, Clone)]
pub struct AnalysisInput {
    pub data: PooledDataset,
    /// Predictions in row order, when the file has a `y_pred` column.
    pub y_pred: Option<Vec<f64>>,
}

impl AnalysisInput {
    pub fn new(data: PooledDataset, y_pred: Option<Vec<f64>>) -> Result<Self> {
        if let Some(p) = &y_pred {
            if p.len() != data.total() {
                return Err(Error::DimensionMismatch {
                    expected: data.total(),
                    found: p.len(),
                });
            }
        }
        Ok(Self { data, y_pred })
    }

    /// `(y, prediction)` for labeled rows and predictions for unlabeled rows.
    pub fn split_predictions(&self) -> Result<(Vec<(f64, f64)>, Vec<f64>)> {
        let preds = self
            .y_pred
            .as_ref()
            .ok_or_else(|| Error::Data("this estimator needs a y_pred column".into()))?;
        let mut labeled = Vec::with_capacity(self.data.n());
        let mut unlabeled = Vec::with_capacity(self.data.n_unlabeled());
        for (row, &p) in self.data.rows().iter().zip(preds) {
            match row.y {
                Some(y) => labeled.push((y, p)),
                None => unlabeled.push(p),
            }
        }
        Ok((labeled, unlabeled))
    }
}

/// Nonparametric design with the ratio pipeline run from `ρ*`.
pub struct Analysis {
    pub design: Design,
    pub rho_star: DensityRatioModel,
    pub ratios: RatioPipeline,
}

fn continuous_rho_star(cfg: &AnalysisConfig) -> Result<DensityRatioModel> {
    match &cfg.working_ratio {
        WorkingRatio::Unit => Ok(DensityRatioModel::constant(1.0)),
        WorkingRatio::Grid { knots, values } => DensityRatioModel::grid(knots.clone(), values.clone(), cfg.rho_plan.clip_floor),
        WorkingRatio::Confusion => Err(Error::Config("the confusion-matrix working ratio needs discrete mode".into())),
    }
}

pub fn prepare(input: &AnalysisInput, cfg: &AnalysisConfig) -> Result<Analysis> {
    cfg.validate()?;
    let data = &input.data;
    let kernels = cfg.bandwidth.resolve(data.n())?;
    let cond = nonparametric_cond_exp(data, &cfg.bandwidth)?;
    let design = Design::new(data, &cond, &kernels.response, &cfg.fredholm.grid)?;
    let rho_star = continuous_rho_star(cfg)?;
    let ratios = ratio_pipeline(&design, &cfg.rho_plan, &rho_star, &kernels.density)?;
    Ok(Analysis { design, rho_star, ratios })
}

fn note_ratio(report: &mut EstimateReport, prefix: &str, r: &RatioEstimate) {
    report.note(&format!("{prefix}_knots"), &r.knots);
    report.note(&format!("{prefix}_values"), r.model.values().unwrap_or(&[]));
    report.note(&format!("{prefix}_raw_deltas"), &r.deltas);
    report.note(&format!("{prefix}_clipped_knots"), &r.clipped);
    report.note(&format!("{prefix}_fredholm_residuals"), &r.fit.residual_norms);
}

/// One estimator on a prepared analysis.
pub fn run_estimator(input: &AnalysisInput, analysis: &Analysis, cfg: &AnalysisConfig, kind: AnalysisEstimator) -> Result<EstimateReport> {
    let estimand = cfg.estimand.estimand();
    let (ridge, solver, level) = (cfg.fredholm.ridge, &cfg.solver, cfg.ci_level);
    let design = &analysis.design;
    let mut report = match kind {
        AnalysisEstimator::Ppi => {
            if cfg.estimand != AnalysisEstimand::Mean {
                return Err(Error::Config("ppi supports the mean estimand only".into()));
            }
            let (labeled, unlabeled) = input.split_predictions()?;
            let theta = ppi_mean(&labeled, &unlabeled)?;
            let sd = ppi_std_err(&labeled, &unlabeled)?;
            let z = normal_quantile((1.0 + level) / 2.0);
            EstimateReport {
                estimator_name: kind.id().into(),
                estimand: estimand.name().into(),
                theta_hat: vec![theta],
                std_err: vec![sd],
                ci_level: level,
                ci: vec![[theta - z * sd, theta + z * sd]],
                primary: 0,
                diagnostics: Default::default(),
            }
        }
        AnalysisEstimator::Shift => shift_dependent_report(design, &estimand, &analysis.rho_star, solver, level)?,
        AnalysisEstimator::SinglyFlexible => estimate_with_ratio(kind.id(), design, &estimand, &analysis.rho_star, ridge, solver, level)?,
        AnalysisEstimator::DoublyFlexible => {
            let working = fit_working_model(&input.data, DesignMap::Linear, cfg.quadrature_nodes)?;
            let kernels = cfg.bandwidth.resolve(input.data.n())?;
            let normal = Design::new(&input.data, &CondExpModel::Normal(working), &kernels.response, &cfg.fredholm.grid)?;
            estimate_with_ratio(kind.id(), &normal, &estimand, &analysis.rho_star, ridge, solver, level)?
        }
        AnalysisEstimator::EfficientTilde => {
            let mut r = estimate_with_ratio(kind.id(), design, &estimand, &analysis.ratios.tilde.model, ridge, solver, level)?;
            note_ratio(&mut r, "rho_tilde", &analysis.ratios.tilde);
            r
        }
        AnalysisEstimator::Efficient => {
            let mut r = estimate_with_ratio(kind.id(), design, &estimand, &analysis.ratios.hat.model, ridge, solver, level)?;
            note_ratio(&mut r, "rho_tilde", &analysis.ratios.tilde);
            note_ratio(&mut r, "rho_hat", &analysis.ratios.hat);
            r
        }
    };
    report.note("n_labeled", input.data.n());
    report.note("n_total", input.data.total());
    Ok(report)
}

/// The configured `estimate` report.
pub fn estimate(input: &AnalysisInput, cfg: &AnalysisConfig) -> Result<EstimateReport> {
    if cfg.discrete {
        return estimate_discrete(input, cfg, cfg.estimator);
    }
    let analysis = prepare(input, cfg)?;
    run_estimator(input, &analysis, cfg, cfg.estimator)
}

/// One row of a comparison: an estimate or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub estimator: String,
    pub estimand: String,
    pub theta_hat: f64,
    pub std_err: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub error: Option<String>,
}

impl ComparisonRow {
    fn from_result(estimator: &str, estimand: &str, r: Result<EstimateReport>) -> Vec<Self> {
        match r {
            Ok(rep) => (0..rep.theta_hat.len())
                .filter(|&c| rep.theta_hat.len() > 1 || c == rep.primary)
                .map(|c| Self {
                    estimator: estimator.into(),
                    estimand: if rep.theta_hat.len() > 1 { component_name(&rep, c) } else { rep.estimand.clone() },
                    theta_hat: rep.theta_hat[c],
                    std_err: rep.std_err[c],
                    ci_lo: rep.ci[c][0],
                    ci_hi: rep.ci[c][1],
                    error: None,
                })
                .collect(),
            Err(e) => vec![Self {
                estimator: estimator.into(),
                estimand: estimand.into(),
                theta_hat: f64::NAN,
                std_err: f64::NAN,
                ci_lo: f64::NAN,
                ci_hi: f64::NAN,
                error: Some(e.to_string()),
            }],
        }
    }
}

fn component_name(rep: &EstimateReport, c: usize) -> String {
    rep.diagnostics
        .get("component_names")
        .and_then(|v| v.get(c))
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}[{c}]", rep.estimand))
}

/// Every configured estimator; failures are reported per row.
pub fn compare(input: &AnalysisInput, cfg: &AnalysisConfig) -> Result<Vec<ComparisonRow>> {
    let name = if cfg.discrete { "class-probabilities".to_string() } else { cfg.estimand.estimand().name().to_string() };
    if cfg.discrete {
        return Ok(cfg
            .estimators
            .iter()
            .flat_map(|&k| ComparisonRow::from_result(k.id(), &name, estimate_discrete(input, cfg, k)))
            .collect());
    }
    let analysis = prepare(input, cfg)?;
    Ok(cfg
        .estimators
        .iter()
        .flat_map(|&k| ComparisonRow::from_result(k.id(), &name, run_estimator(input, &analysis, cfg, k)))
        .collect())
}

/// Working, first-stage and refined ratios at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioCurveRow {
    pub y: f64,
    pub rho_star: f64,
    pub rho_tilde: f64,
    pub rho_hat: f64,
}

/// Ratios on an even grid over the labeled range, or at the classes in
/// discrete mode.
pub fn ratio_curves(input: &AnalysisInput, cfg: &AnalysisConfig) -> Result<Vec<RatioCurveRow>> {
    if cfg.discrete {
        let (star, stages) = discrete_stages(input, cfg)?;
        return Ok(stages
            .hat
            .classes()
            .iter()
            .enumerate()
            .map(|(k, &y)| RatioCurveRow {
                y,
                rho_star: star.values()[k],
                rho_tilde: stages.tilde.values()[k],
                rho_hat: stages.hat.values()[k],
            })
            .collect());
    }
    let analysis = prepare(input, cfg)?;
    let ys = input.data.labeled_y();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = cfg.curve_points;
    Ok((0..m)
        .map(|j| {
            let y = lo + (hi - lo) * j as f64 / (m - 1) as f64;
            RatioCurveRow {
                y,
                rho_star: analysis.rho_star.eval(y),
                rho_tilde: analysis.ratios.tilde.model.eval(y),
                rho_hat: analysis.ratios.hat.model.eval(y),
            }
        })
        .collect())
}

fn discrete_rho_star(input: &AnalysisInput, cfg: &AnalysisConfig, classes: &[f64]) -> Result<DiscreteRatio> {
    let floor = cfg.rho_plan.clip_floor;
    match &cfg.working_ratio {
        WorkingRatio::Unit => DiscreteRatio::new(classes.to_vec(), vec![1.0; classes.len()], floor),
        WorkingRatio::Grid { knots, values } => DiscreteRatio::new(knots.clone(), values.clone(), floor),
        WorkingRatio::Confusion => {
            let (labeled, unlabeled) = input.split_predictions()?;
            confusion_matrix_ratio(&labeled, &unlabeled, floor)
        }
    }
}

struct Stages {
    design: DiscreteDesign,
    tilde: DiscreteRatio,
    hat: DiscreteRatio,
}

fn discrete_stages(input: &AnalysisInput, cfg: &AnalysisConfig) -> Result<(DiscreteRatio, Stages)> {
    cfg.validate()?;
    let cond = nonparametric_cond_exp(&input.data, &cfg.bandwidth)?;
    let design = DiscreteDesign::new(&input.data, &cond)?;
    let star = discrete_rho_star(input, cfg, design.classes())?;
    let stages = discrete_ratio_estimate(&input.data, &cond, &star, cfg.discrete_ridge)?;
    Ok((
        star,
        Stages {
            design,
            tilde: stages.tilde,
            hat: stages.hat,
        },
    ))
}

/// Target class probabilities `Pr_q(Y = k)` for one estimator.
pub fn estimate_discrete(input: &AnalysisInput, cfg: &AnalysisConfig, kind: AnalysisEstimator) -> Result<EstimateReport> {
    let (star, st) = discrete_stages(input, cfg)?;
    let level = cfg.ci_level;
    let fit = match kind {
        AnalysisEstimator::Shift => shift_fit(&input.data, &star)?,
        AnalysisEstimator::SinglyFlexible => st.design.fit(&star, cfg.discrete_ridge)?,
        AnalysisEstimator::EfficientTilde => st.design.fit(&st.tilde, cfg.discrete_ridge)?,
        AnalysisEstimator::Efficient => st.design.fit(&st.hat, cfg.discrete_ridge)?,
        AnalysisEstimator::Ppi | AnalysisEstimator::DoublyFlexible => {
            return Err(Error::Config(format!("estimator '{}' is not available in discrete mode", kind.id())))
        }
    };
    let z = normal_quantile((1.0 + level) / 2.0);
    let mut report = EstimateReport {
        estimator_name: kind.id().into(),
        estimand: "class-probabilities".into(),
        ci: fit.probs.iter().zip(&fit.std_err).map(|(p, s)| [p - z * s, p + z * s]).collect(),
        theta_hat: fit.probs,
        std_err: fit.std_err,
        ci_level: level,
        primary: 0,
        diagnostics: Default::default(),
    };
    let names: Vec<String> = fit.classes.iter().map(|c| format!("class:{c}")).collect();
    report.note("component_names", &names);
    report.note("classes", &fit.classes);
    report.note("rho_star", star.values());
    report.note("rho_tilde", st.tilde.values());
    report.note("rho_hat", st.hat.values());
    report.note("ridge_lambda", fit.lambda);
    report.note("n_labeled", input.data.n());
    report.note("n_total", input.data.total());
    Ok(report)
}

/// `mean_L ρ*(y) 1(y = k)` with the i.i.d. standard error.
fn shift_fit(data: &PooledDataset, star: &DiscreteRatio) -> Result<DiscreteFit> {
    let n = data.n() as f64;
    let classes = star.classes().to_vec();
    let mut probs = Vec::with_capacity(classes.len());
    let mut std_err = Vec::with_capacity(classes.len());
    for &c in &classes {
        let vals = data
            .labeled()
            .map(|(y, _)| Ok(if y == c { star.eval(y)? } else { 0.0 }))
            .collect::<Result<Vec<f64>>>()?;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        probs.push(m);
        std_err.push((var / n).sqrt());
    }
    Ok(DiscreteFit {
        classes,
        probs,
        std_err,
        lambda: 0.0,
    })
}
