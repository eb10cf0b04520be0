use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Binary,
}

/// Observational data: covariates, a scalar continuous treatment and an outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub outcome_kind: OutcomeKind,
}

impl Dataset {
    pub fn new(x: Tensor, t: Vec<f64>, y: Vec<f64>, outcome_kind: OutcomeKind) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!("covariates must be a matrix, got {:?}", x.shape())));
        }
        if x.rows() != t.len() || t.len() != y.len() {
            return Err(Error::Dimension(format!(
                "{} covariate rows, {} treatments, {} outcomes",
                x.rows(),
                t.len(),
                y.len()
            )));
        }
        if !x.is_finite() || t.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        if outcome_kind == OutcomeKind::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("binary outcomes must be 0 or 1".into()));
        }
        Ok(Self {
            x,
            t,
            y,
            outcome_kind,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            outcome_kind: self.outcome_kind,
        }
    }
}

/// Per-column affine maps fitted on training rows. Networks see
/// standardized inputs; callers keep working in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub t_mean: f64,
    pub t_scale: f64,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_scale(v: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    // constant columns pass through centred but unscaled
    (mean, if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 })
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_scale: vec![1.0; d],
            t_mean: 0.0,
            t_scale: 1.0,
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    /// Binary outcomes are left as they are.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Domain("cannot standardize an empty dataset".into()));
        }
        let d = data.dim();
        let (x_mean, x_scale) = (0..d)
            .map(|j| mean_scale((0..n).map(|i| data.x.get(i, j)), n))
            .unzip();
        let (t_mean, t_scale) = mean_scale(data.t.iter().copied(), n);
        let (y_mean, y_scale) = match data.outcome_kind {
            OutcomeKind::Continuous => mean_scale(data.y.iter().copied(), n),
            OutcomeKind::Binary => (0.0, 1.0),
        };
        let s = Self {
            x_mean,
            x_scale,
            t_mean,
            t_scale,
            y_mean,
            y_scale,
        };
        let scalars = [s.t_mean, s.t_scale, s.y_mean, s.y_scale];
        if s.x_mean.iter().chain(&s.x_scale).chain(&scalars).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("column moments overflow".into()));
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn x(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "standardizer has {} columns, input has {}",
                self.dim(),
                x.cols()
            )));
        }
        let d = self.dim();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.x_mean[j]) / self.x_scale[j];
        }
        Ok(out)
    }

    pub fn t(&self, t: &[f64]) -> Vec<f64> {
        t.iter().map(|v| (v - self.t_mean) / self.t_scale).collect()
    }

    pub fn y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    pub fn y_inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| self.y_mean + self.y_scale * v).collect()
    }

    pub fn dataset(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x(&data.x)?,
            t: self.t(&data.t),
            y: self.y(&data.y),
            outcome_kind: data.outcome_kind,
        })
    }
}
