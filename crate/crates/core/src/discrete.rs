//! Discrete labels: class probabilities in the target population, class
//! density ratios, and the confusion-matrix ratio baseline.
//!
//! With indicator smoothing in `y` the integral equation becomes a `K × K`
//! linear system: row `c` averages `w_i Ê_p{a(Y)ρ(Y) | x_i}` over labeled
//! rows of class `c`.

use nalgebra::DMatrix;

use crate::condexp::CondExpModel;
use crate::data::PooledDataset;
use crate::density_ratio::{DensityRatioModel, DEFAULT_CLIP_FLOOR};
use crate::error::{Error, Result};
use crate::fredholm::{Ridge, RidgeSolver};

/// Condition-number limit for inverting a confusion matrix.
pub const CONFUSION_CONDITION_LIMIT: f64 = 1e8;

/// `ρ(k)` for each class label.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRatio {
    classes: Vec<f64>,
    values: Vec<f64>,
    clip_floor: f64,
}

impl DiscreteRatio {
    /// Classes are sorted; values below `clip_floor` are raised to it.
    pub fn new(classes: Vec<f64>, values: Vec<f64>, clip_floor: f64) -> Result<Self> {
        if classes.len() < 2 || classes.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "discrete ratio needs K >= 2 classes with one value each, got {} classes and {} values",
                classes.len(),
                values.len()
            )));
        }
        if !(clip_floor > 0.0) {
            return Err(Error::InvalidInput("clip_floor must be > 0".into()));
        }
        if values.iter().chain(&classes).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("discrete ratio"));
        }
        let mut pairs: Vec<(f64, f64)> = classes.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInput("duplicate class label".into()));
        }
        Ok(Self {
            classes: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1.max(clip_floor)).collect(),
            clip_floor,
        })
    }

    pub fn uniform(classes: Vec<f64>) -> Result<Self> {
        let k = classes.len();
        Self::new(classes, vec![1.0; k], DEFAULT_CLIP_FLOOR)
    }

    pub fn classes(&self) -> &[f64] {
        &self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }

    pub fn index_of(&self, class: f64) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::MissingClass(class.to_string()))
    }

    pub fn eval(&self, class: f64) -> Result<f64> {
        Ok(self.values[self.index_of(class)?])
    }

    /// The same ratio as a grid model with knots at the class labels.
    pub fn to_model(&self) -> Result<DensityRatioModel> {
        DensityRatioModel::grid(self.classes.clone(), self.values.clone(), self.clip_floor)
    }
}

/// Class-aggregated `Ê_p{1(Y = k) | x_i}` for every row.
#[derive(Debug, Clone)]
pub struct DiscreteDesign {
    classes: Vec<f64>,
    /// Class index of each labeled row, in data order.
    labeled_class: Vec<usize>,
    /// Posterior class probabilities; labeled rows first, then unlabeled,
    /// each in data order.
    probs: DMatrix<f64>,
    n: usize,
    pi: f64,
}

impl DiscreteDesign {
    pub fn new(data: &PooledDataset, condexp: &CondExpModel) -> Result<Self> {
        let mut classes = data.labeled_y();
        classes.sort_by(f64::total_cmp);
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::InvalidInput("discrete labels need at least two classes".into()));
        }
        let find = |v: f64| {
            classes
                .binary_search_by(|c| c.total_cmp(&v))
                .map_err(|_| Error::MissingClass(v.to_string()))
        };
        let labeled_class = data.labeled().map(|(y, _)| find(y)).collect::<Result<Vec<_>>>()?;
        let xs: Vec<&[f64]> = data.labeled().map(|(_, x)| x).chain(data.unlabeled()).collect();
        let mut probs = DMatrix::zeros(xs.len(), classes.len());
        for (i, x) in xs.iter().enumerate() {
            let rule = condexp.rule(x)?;
            for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                probs[(i, find(t)?)] += w;
            }
        }
        Ok(Self {
            classes,
            labeled_class,
            probs,
            n: data.n(),
            pi: data.pi(),
        })
    }

    pub fn classes(&self) -> &[f64] {
        &self.classes
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Labeled class frequencies `p̂(k)`.
    pub fn labeled_frequencies(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.classes.len()];
        for &c in &self.labeled_class {
            f[c] += 1.0 / self.n as f64;
        }
        f
    }

    fn ratio_values(&self, rho: &DiscreteRatio) -> Result<Vec<f64>> {
        self.classes.iter().map(|&c| rho.eval(c)).collect()
    }

    /// `Pr_q(Y = k)` for every class with ratio `rho`.
    pub fn class_probs(&self, rho: &DiscreteRatio, ridge: Ridge) -> Result<Vec<f64>> {
        Ok(self.fit(rho, ridge)?.probs)
    }

    /// Class probabilities with plug-in standard errors.
    pub fn fit(&self, rho: &DiscreteRatio, ridge: Ridge) -> Result<DiscreteFit> {
        let k = self.classes.len();
        let total = self.probs.nrows();
        let r = self.ratio_values(rho)?;
        let odds = self.pi / (1.0 - self.pi);
        let w: Vec<f64> = (0..total)
            .map(|i| 1.0 / (0..k).map(|c| self.probs[(i, c)] * (r[c] * r[c] + odds * r[c])).sum::<f64>())
            .collect();
        let mut counts = vec![0.0; k];
        let mut m = DMatrix::zeros(k, k);
        for (i, &c) in self.labeled_class.iter().enumerate() {
            counts[c] += 1.0;
            for j in 0..k {
                m[(c, j)] += w[i] * self.probs[(i, j)] * r[j];
            }
        }
        for c in 0..k {
            if counts[c] == 0.0 {
                return Err(Error::MissingClass(self.classes[c].to_string()));
            }
            for j in 0..k {
                m[(c, j)] /= counts[c];
            }
        }
        let lambda = ridge.lambda(&m)?;
        let a = RidgeSolver::new(&m, lambda)?.solve(&DMatrix::identity(k, k))?;
        // ŷ[i, k0] = w_i Σ_j P_i(j) a(j, k0) ρ(j)
        let scaled = DMatrix::from_fn(k, k, |j, c| a[(j, c)] * r[j]);
        let mut yhat = &self.probs * scaled;
        for (i, mut row) in yhat.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let n = self.n as f64;
        let n_unl = (total - self.n) as f64;
        let mut probs = Vec::with_capacity(k);
        let mut std_err = Vec::with_capacity(k);
        for k0 in 0..k {
            let direct = (self.n..total).map(|i| yhat[(i, k0)]).sum::<f64>() / n_unl;
            let resid: Vec<f64> = self
                .labeled_class
                .iter()
                .enumerate()
                .map(|(i, &c)| r[c] * (f64::from(c == k0) - yhat[(i, k0)]))
                .collect();
            let theta = direct + resid.iter().sum::<f64>() / n;
            let lab = resid.iter().map(|v| (v / self.pi).powi(2)).sum::<f64>();
            let unl = (self.n..total).map(|i| ((yhat[(i, k0)] - theta) / (1.0 - self.pi)).powi(2)).sum::<f64>();
            probs.push(theta);
            std_err.push((lab + unl).sqrt() / total as f64);
        }
        if probs.iter().chain(&std_err).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("discrete class probabilities"));
        }
        Ok(DiscreteFit {
            classes: self.classes.clone(),
            probs,
            std_err,
            lambda,
        })
    }
}

/// `Pr_q(Y = k)` per class with standard errors from the influence function
/// `r/π · ρ(1(y = k) - ŷ) + (1 - r)/(1 - π) · (ŷ - θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFit {
    pub classes: Vec<f64>,
    pub probs: Vec<f64>,
    pub std_err: Vec<f64>,
    pub lambda: f64,
}

/// `Pr_q(Y = k0)`.
pub fn discrete_class_prob(data: &PooledDataset, k0: f64, rho: &DiscreteRatio, condexp: &CondExpModel, ridge: Ridge) -> Result<f64> {
    let design = DiscreteDesign::new(data, condexp)?;
    let idx = design
        .classes()
        .iter()
        .position(|&c| c == k0)
        .ok_or_else(|| Error::MissingClass(k0.to_string()))?;
    Ok(design.class_probs(rho, ridge)?[idx])
}

/// Both stages of the discrete ratio estimate.
#[derive(Debug, Clone)]
pub struct DiscreteStages {
    pub tilde: DiscreteRatio,
    pub hat: DiscreteRatio,
    /// `Pr_q(Y = k)` under `ρ̃`, the second-stage input.
    pub fit: DiscreteFit,
}

/// `ρ̃(k) = q̃(k) / p̂(k)` with `q̃` computed under `ρ*`, then `ρ̂` under `ρ̃`.
pub fn discrete_ratio_estimate(data: &PooledDataset, condexp: &CondExpModel, rho_star: &DiscreteRatio, ridge: Ridge) -> Result<DiscreteStages> {
    let design = DiscreteDesign::new(data, condexp)?;
    let p = design.labeled_frequencies();
    let stage = |rho: &DiscreteRatio| -> Result<(DiscreteRatio, DiscreteFit)> {
        let fit = design.fit(rho, ridge)?;
        let values = fit.probs.iter().zip(&p).map(|(q, p)| q / p).collect();
        Ok((DiscreteRatio::new(design.classes().to_vec(), values, rho_star.clip_floor())?, fit))
    };
    let (tilde, _) = stage(rho_star)?;
    let (hat, fit) = stage(&tilde)?;
    Ok(DiscreteStages { tilde, hat, fit })
}

/// `ρ*(k) = [Ĉ⁻¹ q̂_X]_k / p̂_Y(k)` where `Ĉ[k, l] = Pr(prediction = k | Y = l)`.
pub fn confusion_matrix_ratio(labeled: &[(f64, f64)], unlabeled_preds: &[f64], clip_floor: f64) -> Result<DiscreteRatio> {
    if labeled.is_empty() || unlabeled_preds.is_empty() {
        return Err(Error::EmptySample("confusion-matrix inputs"));
    }
    let mut classes: Vec<f64> = labeled
        .iter()
        .flat_map(|&(y, p)| [y, p])
        .chain(unlabeled_preds.iter().copied())
        .collect();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    let k = classes.len();
    let idx = |v: f64| classes.binary_search_by(|c| c.total_cmp(&v)).expect("class present");
    let mut conf = DMatrix::zeros(k, k);
    let mut true_counts = vec![0.0; k];
    for &(y, p) in labeled {
        conf[(idx(p), idx(y))] += 1.0;
        true_counts[idx(y)] += 1.0;
    }
    for (l, &count) in true_counts.iter().enumerate() {
        if count == 0.0 {
            return Err(Error::MissingClass(classes[l].to_string()));
        }
        for r in 0..k {
            conf[(r, l)] /= count;
        }
    }
    let mut q_x = vec![0.0; k];
    for &p in unlabeled_preds {
        q_x[idx(p)] += 1.0 / unlabeled_preds.len() as f64;
    }
    let p_y: Vec<f64> = true_counts.iter().map(|c| c / labeled.len() as f64).collect();
    ratio_from_confusion(&classes, &conf, &q_x, &p_y, clip_floor)
}

/// `ρ*(k) = [Ĉ⁻¹ q̂_X]_k / p̂_Y(k)` for an explicit confusion matrix.
pub fn ratio_from_confusion(classes: &[f64], conf: &DMatrix<f64>, q_x: &[f64], p_y: &[f64], clip_floor: f64) -> Result<DiscreteRatio> {
    let k = classes.len();
    if conf.nrows() != k || conf.ncols() != k || q_x.len() != k || p_y.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: conf.nrows(),
        });
    }
    let sv = conf.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= CONFUSION_CONDITION_LIMIT) {
        return Err(Error::ConfusionNotInvertible(cond));
    }
    let inv = conf.clone().try_inverse().ok_or(Error::ConfusionNotInvertible(cond))?;
    let q = inv * nalgebra::DVector::from_column_slice(q_x);
    let values = (0..k)
        .map(|c| {
            if p_y[c] <= 0.0 {
                Err(Error::MissingClass(classes[c].to_string()))
            } else {
                Ok(q[c] / p_y[c])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DiscreteRatio::new(classes.to_vec(), values, clip_floor)
}
