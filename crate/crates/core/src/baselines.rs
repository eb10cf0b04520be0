//! Comparison methods: marginal structural model fits with and without
//! inverse conditional probability-of-treatment weights, and an outcome
//! network trained directly on `(X, t)` as the no-de-confounding ablation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{Dataset, OutcomeKind, Standardizer};
use crate::drl::{epoch_batches, outcome_loss_plain, DrlConfig, NetSpec};
use crate::error::{Error, Result};
use crate::metrics::{fit_ols, predict_linear, quantile, MtefCurve, OutcomeModel, DEFAULT_RIDGE};
use crate::nn::{adam_step, bce_loss, mse_loss, Activation, AdamState, Mlp};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Weights are capped at this quantile before renormalization.
pub const WEIGHT_CLIP_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpwWeights {
    /// Positive, mean one.
    pub weights: Vec<f64>,
    pub marginal_mean: f64,
    pub marginal_var: f64,
    /// `[intercept, slopes...]` of the Gaussian treatment model `t | X`.
    pub conditional_coef: Vec<f64>,
    pub conditional_var: f64,
}

fn log_normal_pdf(v: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((v - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Stabilized weights `f(t) / f(t | X)` under Gaussian density models.
pub fn icpw_weights(x: &Tensor, t: &[f64]) -> Result<IcpwWeights> {
    let (n, d) = (x.rows(), x.cols());
    if t.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} treatments", t.len())));
    }
    if n <= d + 2 {
        return Err(Error::Domain(format!("need more than d + 2 = {} rows, got {n}", d + 2)));
    }
    let coef = fit_ols(x, t, DEFAULT_RIDGE)?;
    let fitted = predict_linear(&coef, x);
    let ssr: f64 = t.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    let cond_var = ssr / (n - d - 1) as f64;
    let mean = t.iter().sum::<f64>() / n as f64;
    let marg_var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let floor = 1e-12 * marg_var.max(f64::MIN_POSITIVE);
    if !(cond_var > floor) || !(marg_var > 0.0) {
        return Err(Error::Degenerate(format!(
            "treatment model has zero residual variance ({cond_var:e})"
        )));
    }
    let mut weights: Vec<f64> = t
        .iter()
        .zip(&fitted)
        .map(|(&ti, &mu)| (log_normal_pdf(ti, mean, marg_var) - log_normal_pdf(ti, mu, cond_var)).exp())
        .collect();
    let cap = quantile(&weights, WEIGHT_CLIP_QUANTILE)?;
    for w in weights.iter_mut() {
        *w = w.min(cap);
    }
    let avg = weights.iter().sum::<f64>() / n as f64;
    for w in weights.iter_mut() {
        *w /= avg;
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Numeric("weights are not all positive and finite".into()));
    }
    Ok(IcpwWeights {
        weights,
        marginal_mean: mean,
        marginal_var: marg_var,
        conditional_coef: coef,
        conditional_var: cond_var,
    })
}

/// `E[y(t)] = alpha0 + alpha1 * t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmFit {
    pub alpha0: f64,
    pub alpha1: f64,
}

/// Weighted least squares of `y` on `(1, t)`.
pub fn msm_fit(t: &[f64], y: &[f64], weights: &[f64]) -> Result<MsmFit> {
    let n = t.len();
    if y.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "{n} treatments, {} outcomes, {} weights",
            y.len(),
            weights.len()
        )));
    }
    if n < 2 {
        return Err(Error::Domain("msm needs at least two samples".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Domain("weights must be positive and finite".into()));
    }
    let sw: f64 = weights.iter().sum();
    let mt = t.iter().zip(weights).map(|(a, w)| w * a).sum::<f64>() / sw;
    let my = y.iter().zip(weights).map(|(a, w)| w * a).sum::<f64>() / sw;
    let (mut sty, mut stt) = (0.0, 0.0);
    for i in 0..n {
        let dt = t[i] - mt;
        sty += weights[i] * dt * (y[i] - my);
        stt += weights[i] * dt * dt;
    }
    if !(stt > 1e-24 * mt.abs().max(1.0).powi(2) * sw) {
        return Err(Error::Degenerate("treatment is constant; slope is not identified".into()));
    }
    let alpha1 = sty / stt;
    Ok(MsmFit {
        alpha0: my - alpha1 * mt,
        alpha1,
    })
}

/// The linear structural model has constant marginal effect `alpha1`.
pub fn msm_mtef(fit: &MsmFit, t_levels: &[f64], dt: f64) -> Result<MtefCurve> {
    MtefCurve::constant(t_levels.to_vec(), dt, fit.alpha1)
}

impl OutcomeModel for MsmFit {
    fn predict_outcomes(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != x.rows() {
            return Err(Error::Dimension(format!("{} rows but {} treatments", x.rows(), t.len())));
        }
        Ok(t.iter().map(|v| self.alpha0 + self.alpha1 * v).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveConfig {
    pub net: NetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub outcome_kind: OutcomeKind,
    pub patience: Option<usize>,
    pub standardize: bool,
}

impl NaiveConfig {
    /// Same outcome-head shape and optimizer settings as a DRL run.
    pub fn matching(drl: &DrlConfig) -> Self {
        Self {
            net: drl.architecture.counterfactual.clone(),
            epochs: drl.epochs,
            batch_size: drl.batch_size,
            lr: drl.lr_f,
            seed: drl.seed,
            outcome_kind: drl.outcome_kind,
            patience: drl.patience,
            standardize: drl.standardize,
        }
    }
}

impl Default for NaiveConfig {
    fn default() -> Self {
        Self::matching(&DrlConfig::default())
    }
}

/// Outcome network on raw `(X, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveNet {
    pub f: Mlp,
    pub config: NaiveConfig,
    pub scaler: Standardizer,
}

impl OutcomeModel for NaiveNet {
    fn predict_outcomes(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != x.rows() {
            return Err(Error::Dimension(format!("{} rows but {} treatments", x.rows(), t.len())));
        }
        let out = self.forward_scaled(&self.scaler.x(x)?, &self.scaler.t(t))?;
        Ok(self.scaler.y_inverse(&out))
    }
}

impl NaiveNet {
    fn forward_scaled(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        let input = x.concat_columns(&Tensor::vector(t.to_vec()))?;
        Ok(self.f.forward(&input)?.into_data())
    }
}

/// Trains the ablation network. Returns it with the per-epoch mean training loss.
pub fn naive_net(data: &Dataset, val: Option<&Dataset>, config: &NaiveConfig) -> Result<(NaiveNet, Vec<f64>)> {
    if data.is_empty() || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("naive net needs data, batch_size >= 1 and lr > 0".into()));
    }
    let out = match config.outcome_kind {
        OutcomeKind::Continuous => Activation::Identity,
        OutcomeKind::Binary => Activation::Sigmoid,
    };
    let mut sizes = vec![data.dim() + 1];
    sizes.extend(&config.net.hidden);
    sizes.push(1);
    let mlp_cfg = crate::nn::MlpConfig::new(sizes, config.net.activation, out);
    let scaler = if config.standardize {
        Standardizer::fit(data)?
    } else {
        Standardizer::identity(data.dim())
    };
    let data = &scaler.dataset(data)?;
    let val = match val {
        Some(v) => Some(scaler.dataset(v)?),
        None => None,
    };
    let mut net = NaiveNet {
        f: Mlp::new(mlp_cfg, &mut seeded(config.seed, 20))?,
        config: config.clone(),
        scaler,
    };
    let mut opt = AdamState::new(net.f.params());
    let mut rng = seeded(config.seed, 21);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0;
    for _ in 0..config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), config.batch_size, &mut rng);
        for b in &batches {
            let batch = data.subset(b);
            let input = batch.x.concat_columns(&Tensor::vector(batch.t.clone()))?;
            let tape = Tape::new();
            let params = net.f.bind(&tape);
            let pred = net.f.forward_var(&params, tape.constant(input))?;
            let target = Tensor::vector(batch.y.clone());
            let loss = match config.outcome_kind {
                OutcomeKind::Continuous => mse_loss(&tape, pred, &target)?,
                OutcomeKind::Binary => bce_loss(&tape, pred, &target)?,
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("naive net loss is {value}")));
            }
            total += value;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad(p)).collect();
            adam_step(&mut net.f.params_mut(), &grads, &mut opt, config.lr)?;
        }
        losses.push(total / batches.len() as f64);
        if let Some(v) = &val {
            let pred = net.forward_scaled(&v.x, &v.t)?;
            let vl = outcome_loss_plain(config.outcome_kind, &pred, &v.y);
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                best = Some((vl, net.f.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, f)) = best {
        net.f = f;
    }
    Ok((net, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::weighted_pcc;
    use crate::synthgen::{make_scenario, Scenario, ScenarioSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed, 3);
        Tensor::matrix(n, k, (0..n * k).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn independent_treatment_gives_unit_weights() {
        let x = gaussian(5000, 3, 1);
        let mut rng = seeded(2, 0);
        let t: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w = icpw_weights(&x, &t).unwrap();
        let mean: f64 = w.weights.iter().sum::<f64>() / 5000.0;
        assert!((mean - 1.0).abs() < 1e-12);
        let spread = w.weights.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / 5000.0;
        // clipping the top percentile shifts every weight slightly after renormalizing
        assert!(spread < 0.05, "{spread}");
    }

    #[test]
    fn icpw_rejects_small_or_degenerate_input() {
        let x = gaussian(4, 2, 1);
        assert!(matches!(icpw_weights(&x, &[1.0; 4]), Err(Error::Domain(_))));
        let x = gaussian(50, 2, 2);
        let t: Vec<f64> = (0..50).map(|i| 1.0 + 2.0 * x.get(i, 0) - x.get(i, 1)).collect();
        assert!(matches!(icpw_weights(&x, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weighting_reduces_linear_confounding() {
        let (data, _) = make_scenario(&ScenarioSpec::new(Scenario::A, 5000, 3)).unwrap();
        let w = icpw_weights(&data.x, &data.t).unwrap();
        let before = weighted_pcc(&data.x, &data.t, None).unwrap().value;
        let after = weighted_pcc(&data.x, &data.t, Some(&w.weights)).unwrap().value;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn msm_exact_line_and_ols_reduction() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let y: Vec<f64> = t.iter().map(|v| 5.0 * v).collect();
        let fit = msm_fit(&t, &y, &[1.0; 20]).unwrap();
        assert!((fit.alpha1 - 5.0).abs() < 1e-8 && fit.alpha0.abs() < 1e-8);

        let x = Tensor::vector(t.clone()).as_column();
        let noisy: Vec<f64> = t.iter().map(|v| 1.0 - 0.5 * v + (7.0 * v).sin()).collect();
        let ols = fit_ols(&x, &noisy, 0.0).unwrap();
        let msm = msm_fit(&t, &noisy, &[3.0; 20]).unwrap();
        assert!((ols[0] - msm.alpha0).abs() < 1e-10 && (ols[1] - msm.alpha1).abs() < 1e-10);
    }

    #[test]
    fn msm_errors() {
        assert!(matches!(msm_fit(&[2.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]), Err(Error::Degenerate(_))));
        assert!(msm_fit(&[1.0, 2.0], &[1.0, 2.0], &[1.0, -1.0]).is_err());
        assert!(msm_fit(&[1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn msm_curve_is_constant_slope() {
        let fit = MsmFit { alpha0: 1.0, alpha1: 5.0 };
        let c = msm_mtef(&fit, &[0.0, 0.5, 1.0], 0.1).unwrap();
        assert_eq!(c.values, vec![5.0; 3]);
        let off = MsmFit { alpha0: 0.0, alpha1: 5.8 };
        let truth = MtefCurve::constant(vec![0.0, 0.5, 1.0], 0.1, 5.0).unwrap();
        let e = crate::metrics::eps_mtef(&truth, &msm_mtef(&off, &truth.t_levels, 0.1).unwrap()).unwrap();
        assert!((e - 0.8).abs() < 1e-12);
    }

    #[test]
    fn icpw_weighting_shrinks_confounding_bias() {
        let x = gaussian(5000, 2, 4);
        let mut rng = seeded(4, 1);
        let t: Vec<f64> = (0..5000)
            .map(|i| 0.5 * (x.get(i, 0) + x.get(i, 1)) + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y: Vec<f64> = (0..5000)
            .map(|i| {
                3.0 * x.get(i, 0) + 2.0 * x.get(i, 1) + 5.0 * t[i]
                    + 0.5 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let naive = msm_fit(&t, &y, &vec![1.0; 5000]).unwrap();
        // confounded slope is 5 + 2.5 / 1.5
        assert!((naive.alpha1 - 6.67).abs() < 0.15, "{}", naive.alpha1);
        let w = icpw_weights(&x, &t).unwrap();
        let fit = msm_fit(&t, &y, &w.weights).unwrap();
        // percentile clipping leaves some bias behind
        assert!((fit.alpha1 - 5.0).abs() < 0.5 * (naive.alpha1 - 5.0), "{}", fit.alpha1);
    }

    #[test]
    fn naive_net_is_seeded_and_learns() {
        let (data, _) = make_scenario(&ScenarioSpec::new(Scenario::A, 400, 5)).unwrap();
        let cfg = NaiveConfig {
            epochs: 15,
            batch_size: 64,
            ..NaiveConfig::default()
        };
        let (a, la) = naive_net(&data, None, &cfg).unwrap();
        let (b, lb) = naive_net(&data, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.last().unwrap() < &(la[0] * 0.5), "{la:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn icpw_weights_ignore_affine_treatment_rescaling(
            scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..100,
        ) {
            let x = gaussian(300, 2, seed);
            let mut rng = seeded(seed, 9);
            let t: Vec<f64> = (0..300)
                .map(|i| x.get(i, 0) - 0.5 * x.get(i, 1) + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let t2: Vec<f64> = t.iter().map(|v| scale * v + shift).collect();
            let a = icpw_weights(&x, &t).unwrap();
            let b = icpw_weights(&x, &t2).unwrap();
            for (u, v) in a.weights.iter().zip(&b.weights) {
                prop_assert!((u - v).abs() < 1e-6 * u.max(1.0));
            }
        }
    }
}
