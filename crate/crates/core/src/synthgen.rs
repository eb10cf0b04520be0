//! Synthetic benchmark scenarios with known ground truth.
//!
//! Covariates are drawn from a zero-mean Gaussian with a random covariance.
//! Treatment is `f_t(X) + e_t` and outcome is `f_y(X) + f_y(t) + e_y`, where
//! each `f` is either linear in a weighted sum or a sigmoid of it. The four
//! scenarios cross the two treatment forms with the two outcome forms.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::dataset::{Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::metrics::MtefCurve;
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Eigenvalue floor of the projected covariance.
pub const MIN_EIGENVALUE: f64 = 1e-6;
/// Treatment coefficient in the outcome model.
pub const TREATMENT_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Line,
    NonL,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];

    /// `(treatment form, outcome form)`.
    pub fn forms(self) -> (Form, Form) {
        match self {
            Scenario::A => (Form::Line, Form::Line),
            Scenario::B => (Form::Line, Form::NonL),
            Scenario::C => (Form::NonL, Form::Line),
            Scenario::D => (Form::NonL, Form::NonL),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::C => "C",
            Scenario::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            "C" | "c" => Ok(Scenario::C),
            "D" | "d" => Ok(Scenario::D),
            other => Err(Error::Parse(format!("unknown scenario {other:?}, expected A-D"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub noise_t_std: f64,
    pub noise_y_std: f64,
}

impl ScenarioSpec {
    /// Defaults: `d = 10`, noise variances 0.3 (treatment) and 0.5 (outcome).
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        Self {
            scenario,
            d: 10,
            n,
            seed,
            noise_t_std: 0.3f64.sqrt(),
            noise_y_std: 0.5f64.sqrt(),
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::Config(format!("need d >= 1 and n >= 1, got d={} n={}", self.d, self.n)));
        }
        if !(self.noise_t_std > 0.0 && self.noise_y_std > 0.0) {
            return Err(Error::Config("noise standard deviations must be > 0".into()));
        }
        Ok(())
    }
}

/// Hidden parameters of one scenario draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub covariance: Tensor,
    pub w_xt: Vec<f64>,
    pub w_xy: Vec<f64>,
    pub w_ty: f64,
    pub t_form: Form,
    pub y_form: Form,
}

impl GroundTruth {
    /// Draws `w_xt`, `w_xy` from `U(1, 5)`.
    pub fn draw<R: Rng + ?Sized>(covariance: Tensor, scenario: Scenario, rng: &mut R) -> Self {
        let d = covariance.rows();
        let w_xt = (0..d).map(|_| rng.gen_range(1.0..5.0)).collect();
        let w_xy = (0..d).map(|_| rng.gen_range(1.0..5.0)).collect();
        let (t_form, y_form) = scenario.forms();
        Self {
            covariance,
            w_xt,
            w_xy,
            w_ty: TREATMENT_WEIGHT,
            t_form,
            y_form,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_xt.len()
    }

    /// Expected outcome of a unit with covariates `x` under treatment `t`.
    pub fn mean_outcome(&self, x: &[f64], t: f64) -> f64 {
        let s = dot(x, &self.w_xy);
        match self.y_form {
            Form::Line => s + self.w_ty * t,
            Form::NonL => sigmoid(s) + sigmoid(self.w_ty * t),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest-PSD projection of a symmetrized uniform random matrix.
pub fn gen_covariance<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Config("covariance dimension must be >= 1".into()));
    }
    let raw = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let sym = (&raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l: f64| l.max(MIN_EIGENVALUE));
    let q = &eig.eigenvectors;
    let recon = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let recon = (&recon + recon.transpose()) * 0.5;
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(recon[(i, j)]);
        }
    }
    Tensor::matrix(d, d, data)
}

/// Rows i.i.d. `N(0, cov)` via the Cholesky factor.
pub fn sample_covariates<R: Rng + ?Sized>(n: usize, cov: &Tensor, rng: &mut R) -> Result<Tensor> {
    let d = cov.rows();
    if cov.shape() != [d, d] {
        return Err(Error::Dimension(format!("covariance must be square, got {:?}", cov.shape())));
    }
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut data = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut v = 0.0;
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                v += l[(i, j)] * zj;
            }
            data.push(v);
        }
    }
    Tensor::matrix(n, d, data)
}

fn check_width(x: &Tensor, gt: &GroundTruth) -> Result<()> {
    if x.cols() != gt.dim() {
        return Err(Error::Dimension(format!(
            "covariates have {} columns, ground truth has {}",
            x.cols(),
            gt.dim()
        )));
    }
    Ok(())
}

/// `t = f_t(X) + e_t`; the noise is added after the sigmoid in the nonlinear form.
pub fn gen_treatment<R: Rng + ?Sized>(
    x: &Tensor,
    gt: &GroundTruth,
    rng: &mut R,
    noise_std: f64,
) -> Result<Vec<f64>> {
    check_width(x, gt)?;
    Ok((0..x.rows())
        .map(|i| {
            let s = dot(x.row(i), &gt.w_xt);
            let f = match gt.t_form {
                Form::Line => s,
                Form::NonL => sigmoid(s),
            };
            let e: f64 = rng.sample(StandardNormal);
            f + noise_std * e
        })
        .collect())
}

/// `y = f_y(X) + f_y(t) + e_y`.
pub fn gen_outcome<R: Rng + ?Sized>(
    x: &Tensor,
    t: &[f64],
    gt: &GroundTruth,
    rng: &mut R,
    noise_std: f64,
) -> Result<Vec<f64>> {
    check_width(x, gt)?;
    if t.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} covariate rows but {} treatments",
            x.rows(),
            t.len()
        )));
    }
    Ok((0..x.rows())
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            gt.mean_outcome(x.row(i), t[i]) + noise_std * e
        })
        .collect())
}

/// Draws ground truth and data for one scenario.
///
/// Separate random streams feed the covariates, the weights and each noise
/// term, so scenarios sharing a seed share `X` and the weights.
pub fn make_scenario(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut cov_rng = seeded(spec.seed, 0);
    let cov = gen_covariance(spec.d, &mut cov_rng)?;
    let x = sample_covariates(spec.n, &cov, &mut cov_rng)?;
    let gt = GroundTruth::draw(cov, spec.scenario, &mut seeded(spec.seed, 1));
    let t = gen_treatment(&x, &gt, &mut seeded(spec.seed, 2), spec.noise_t_std)?;
    let y = gen_outcome(&x, &t, &gt, &mut seeded(spec.seed, 3), spec.noise_y_std)?;
    let data = Dataset::new(x, t, y, OutcomeKind::Continuous)?;
    Ok((data, gt))
}

/// Analytic marginal treatment effect at `t_level` with backward step `dt`.
pub fn true_mtef(gt: &GroundTruth, t_level: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
    }
    Ok(match gt.y_form {
        Form::Line => gt.w_ty,
        Form::NonL => (sigmoid(gt.w_ty * t_level) - sigmoid(gt.w_ty * (t_level - dt))) / dt,
    })
}

pub fn true_mtef_curve(gt: &GroundTruth, t_levels: &[f64], dt: f64) -> Result<MtefCurve> {
    let values = t_levels
        .iter()
        .map(|&t| true_mtef(gt, t, dt))
        .collect::<Result<Vec<_>>>()?;
    MtefCurve::new(t_levels.to_vec(), dt, values)
}
