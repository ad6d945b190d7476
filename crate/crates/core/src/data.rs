//! Pooled labeled/unlabeled samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation. `y` is present exactly for labeled (source) rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: Option<f64>,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn labeled(y: f64, x: Vec<f64>) -> Self {
        Self { y: Some(y), x }
    }

    pub fn unlabeled(x: Vec<f64>) -> Self {
        Self { y: None, x }
    }

    pub fn r(&self) -> u8 {
        u8::from(self.y.is_some())
    }
}

/// Labeled source rows (`r = 1`) pooled with unlabeled target rows (`r = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledDataset {
    rows: Vec<Observation>,
    dim: usize,
    n_labeled: usize,
}

impl PooledDataset {
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.x.len())
            .ok_or(Error::EmptySample("pooled dataset"))?;
        let mut n_labeled = 0;
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.x.len(),
                });
            }
            if row.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite covariate on row {}", i + 1)));
            }
            if let Some(y) = row.y {
                if !y.is_finite() {
                    return Err(Error::Data(format!("non-finite label on row {}", i + 1)));
                }
                n_labeled += 1;
            }
        }
        if n_labeled == 0 {
            return Err(Error::Data("no labeled rows (r = 1)".into()));
        }
        if n_labeled == rows.len() {
            return Err(Error::Data("no unlabeled rows (r = 0)".into()));
        }
        Ok(Self {
            rows,
            dim,
            n_labeled,
        })
    }

    /// Convenience constructor from separate labeled and unlabeled parts.
    pub fn from_parts(labeled: Vec<(f64, Vec<f64>)>, unlabeled: Vec<Vec<f64>>) -> Result<Self> {
        let rows = labeled
            .into_iter()
            .map(|(y, x)| Observation::labeled(y, x))
            .chain(unlabeled.into_iter().map(Observation::unlabeled))
            .collect();
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    /// Covariate dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of labeled rows, `n`.
    pub fn n(&self) -> usize {
        self.n_labeled
    }

    /// Total number of rows, `N`.
    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.rows.len() - self.n_labeled
    }

    /// Labeled proportion `π = n / N`.
    pub fn pi(&self) -> f64 {
        self.n_labeled as f64 / self.rows.len() as f64
    }

    pub fn labeled(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.rows
            .iter()
            .filter_map(|r| r.y.map(|y| (y, r.x.as_slice())))
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.rows
            .iter()
            .filter(|r| r.y.is_none())
            .map(|r| r.x.as_slice())
    }

    pub fn labeled_y(&self) -> Vec<f64> {
        self.labeled().map(|(y, _)| y).collect()
    }

    /// Copy with labeled rows first (sorted by `y`, then `x`) followed by
    /// unlabeled rows sorted by `x`. Every estimator works on this form so
    /// results do not depend on the input row order.
    pub fn canonical(&self) -> Self {
        let mut lab: Vec<&Observation> = self.rows.iter().filter(|r| r.y.is_some()).collect();
        let mut unl: Vec<&Observation> = self.rows.iter().filter(|r| r.y.is_none()).collect();
        lab.sort_by(|a, b| {
            a.y.unwrap()
                .total_cmp(&b.y.unwrap())
                .then_with(|| cmp_slices(&a.x, &b.x))
        });
        unl.sort_by(|a, b| cmp_slices(&a.x, &b.x));
        Self {
            rows: lab.into_iter().chain(unl).cloned().collect(),
            dim: self.dim,
            n_labeled: self.n_labeled,
        }
    }
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (u, v) in a.iter().zip(b) {
        let o = u.total_cmp(v);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}
