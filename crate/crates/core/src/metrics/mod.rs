//! De-confounding and inference-accuracy metrics.
//!
//! * [`pcc`]: mean absolute Pearson correlation between each column and `t`.
//! * [`mcc`]: correlation between `t` and its prediction from the columns,
//!   using either least squares or a regression tree.
//! * [`mtef_pred`] / [`eps_mtef`]: finite-difference marginal treatment
//!   effect curves and the RMSE between two of them.

mod ols;
mod tree;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub use ols::{fit_ols, fit_wls, predict_linear, DEFAULT_RIDGE};
pub use tree::{fit_tree, RegressionTree, TreeNode};

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    weighted_pearson(a, b, None)
}

/// Pearson correlation under weights normalized to sum to one.
pub fn weighted_pearson(a: &[f64], b: &[f64], w: Option<&[f64]>) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let wsum: f64 = w.map_or(n as f64, |w| w.iter().sum());
    let wt = |i: usize| w.map_or(1.0, |w| w[i]) / wsum;
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..n {
        ma += wt(i) * a[i];
        mb += wt(i) * b[i];
    }
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += wt(i) * da * db;
        saa += wt(i) * da * da;
        sbb += wt(i) * db * db;
    }
    // Relative threshold: spread that is pure rounding noise counts as constant.
    let tiny = |s: f64, m: f64| s <= 1e-24 * m.abs().max(1.0).powi(2);
    if tiny(saa, ma) || tiny(sbb, mb) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccReport {
    /// Mean over columns of `|corr(column, t)|`.
    pub value: f64,
    /// Columns (or all, when `t` is constant) whose correlation was undefined and counted as 0.
    pub degenerate_columns: Vec<usize>,
}

pub fn pcc(m: &Tensor, t: &[f64]) -> Result<PccReport> {
    weighted_pcc(m, t, None)
}

pub fn weighted_pcc(m: &Tensor, t: &[f64], w: Option<&[f64]>) -> Result<PccReport> {
    let (n, k) = (m.rows(), m.cols());
    if t.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} treatments", t.len())));
    }
    if n < 2 || k == 0 {
        return Err(Error::Domain(format!("pcc needs n >= 2 and k >= 1, got {n}x{k}")));
    }
    let mut total = 0.0;
    let mut degenerate = Vec::new();
    for j in 0..k {
        match weighted_pearson(&m.column(j), t, w) {
            Some(r) => total += r.abs(),
            None => degenerate.push(j),
        }
    }
    Ok(PccReport {
        value: total / k as f64,
        degenerate_columns: degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MccMode {
    Line,
    NonL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccOptions {
    pub mode: MccMode,
    /// Fraction of rows used to fit; the rest score. `None` fits and scores in-sample.
    pub fit_fraction: Option<f64>,
    pub seed: u64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl MccOptions {
    pub fn new(mode: MccMode) -> Self {
        Self {
            mode,
            fit_fraction: Some(0.7),
            seed: 0x5eed,
            max_depth: 6,
            min_leaf: 10,
        }
    }

    pub fn in_sample(mut self) -> Self {
        self.fit_fraction = None;
        self
    }
}

pub const MCC_MIN_ROWS: usize = 10;

/// Multiple correlation coefficient with the default options for `mode`.
pub fn mcc(x: &Tensor, t: &[f64], mode: MccMode) -> Result<f64> {
    mcc_with(x, t, None, &MccOptions::new(mode))
}

/// Multiple correlation coefficient, optionally under sample weights.
///
/// With weights, the linear model is fit by weighted least squares, the tree
/// on a weighted resample of the fitting rows, and the final correlation is a
/// weighted Pearson on the scoring rows.
pub fn mcc_with(x: &Tensor, t: &[f64], weights: Option<&[f64]>, opts: &MccOptions) -> Result<f64> {
    let n = x.rows();
    if t.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension(format!("{n} rows but {} treatments", t.len())));
    }
    if n < MCC_MIN_ROWS {
        return Err(Error::Domain(format!("mcc needs at least {MCC_MIN_ROWS} rows, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let (fit_idx, eval_idx) = match opts.fit_fraction {
        Some(frac) => {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::Config(format!("fit fraction must be in (0,1), got {frac}")));
            }
            idx.shuffle(&mut seeded(opts.seed, 0));
            let cut = ((n as f64) * frac).round() as usize;
            let cut = cut.clamp(1, n - 1);
            (idx[..cut].to_vec(), idx[cut..].to_vec())
        }
        None => (idx.clone(), idx),
    };
    let pick = |ids: &[usize]| -> (Tensor, Vec<f64>, Option<Vec<f64>>) {
        (
            x.select_rows(ids),
            ids.iter().map(|&i| t[i]).collect(),
            weights.map(|w| ids.iter().map(|&i| w[i]).collect()),
        )
    };
    let (xf, tf, wf) = pick(&fit_idx);
    let (xe, te, we) = pick(&eval_idx);

    let t_hat = match opts.mode {
        MccMode::Line => {
            let coef = fit_wls(&xf, &tf, wf.as_deref(), DEFAULT_RIDGE)?;
            predict_linear(&coef, &xe)
        }
        MccMode::NonL => {
            let tree = match &wf {
                None => fit_tree(&xf, &tf, opts.max_depth, opts.min_leaf)?,
                Some(w) => {
                    let dist = WeightedIndex::new(w)
                        .map_err(|e| Error::Domain(format!("invalid weights: {e}")))?;
                    let mut rng = seeded(opts.seed, 1);
                    let rs: Vec<usize> = (0..w.len()).map(|_| dist.sample(&mut rng)).collect();
                    let tr: Vec<f64> = rs.iter().map(|&i| tf[i]).collect();
                    fit_tree(&xf.select_rows(&rs), &tr, opts.max_depth, opts.min_leaf)?
                }
            };
            tree.predict(&xe)
        }
    };
    Ok(weighted_pearson(&te, &t_hat, we.as_deref()).unwrap_or(0.0))
}

/// Marginal treatment effect evaluated on a grid of treatment levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtefCurve {
    pub t_levels: Vec<f64>,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl MtefCurve {
    pub fn new(t_levels: Vec<f64>, dt: f64, values: Vec<f64>) -> Result<Self> {
        if t_levels.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} levels but {} values",
                t_levels.len(),
                values.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
        }
        if t_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("treatment levels must be strictly ascending".into()));
        }
        Ok(Self { t_levels, dt, values })
    }

    /// A constant curve on the given grid.
    pub fn constant(t_levels: Vec<f64>, dt: f64, value: f64) -> Result<Self> {
        let values = vec![value; t_levels.len()];
        Self::new(t_levels, dt, values)
    }
}

/// Evaluation grid for MTEF curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtefGrid {
    pub t_levels: Vec<f64>,
    pub dt: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("quantile of empty data".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&s, q))
}

pub const GRID_LEVELS: usize = 20;

/// `levels` evenly spaced points between the 10th and 90th percentile of
/// `t`, with `dt` a fortieth of the observed range.
pub fn mtef_grid(t: &[f64], levels: usize) -> Result<MtefGrid> {
    if t.len() < 2 || levels < 1 {
        return Err(Error::Domain("grid needs at least two treatments and one level".into()));
    }
    let mut s = t.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&s, 0.1), quantile_sorted(&s, 0.9));
    let range = s[s.len() - 1] - s[0];
    if !(hi > lo) || !(range > 0.0) {
        return Err(Error::Domain("treatment has no spread".into()));
    }
    let t_levels = if levels == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..levels)
            .map(|j| lo + (hi - lo) * j as f64 / (levels - 1) as f64)
            .collect()
    };
    Ok(MtefGrid {
        t_levels,
        dt: range / 40.0,
    })
}

/// Anything that predicts outcomes for covariate rows at given treatments.
pub trait OutcomeModel {
    fn predict_outcomes(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>>;

    /// Mean predicted outcome when every row receives treatment `t`.
    fn mean_outcome_at(&self, x: &Tensor, t: f64) -> Result<f64> {
        let preds = self.predict_outcomes(x, &vec![t; x.rows()])?;
        Ok(preds.iter().sum::<f64>() / preds.len() as f64)
    }
}

/// Adapts a per-row closure `(row, t) -> y` into an [`OutcomeModel`].
pub struct FnModel<F>(pub F);

impl<F: Fn(&[f64], f64) -> f64> OutcomeModel for FnModel<F> {
    fn predict_outcomes(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != x.rows() {
            return Err(Error::Dimension(format!("{} rows but {} treatments", x.rows(), t.len())));
        }
        Ok((0..x.rows()).map(|i| (self.0)(x.row(i), t[i])).collect())
    }
}

/// Predicted MTEF: `(mean y(t) - mean y(t - dt)) / dt` over all rows of `x`.
pub fn mtef_pred<M: OutcomeModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t_levels: &[f64],
    dt: f64,
) -> Result<MtefCurve> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("mtef over zero rows".into()));
    }
    let values = t_levels
        .iter()
        .map(|&t| Ok((model.mean_outcome_at(x, t)? - model.mean_outcome_at(x, t - dt)?) / dt))
        .collect::<Result<Vec<_>>>()?;
    MtefCurve::new(t_levels.to_vec(), dt, values)
}

/// Root mean squared difference between two curves on the same grid.
pub fn eps_mtef(truth: &MtefCurve, pred: &MtefCurve) -> Result<f64> {
    if truth.t_levels != pred.t_levels || truth.dt != pred.dt {
        return Err(Error::Contract("MTEF curves are on different grids".into()));
    }
    if truth.values.is_empty() {
        return Err(Error::Domain("empty MTEF curve".into()));
    }
    let mse = truth
        .values
        .iter()
        .zip(&pred.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.values.len() as f64;
    Ok(mse.sqrt())
}
