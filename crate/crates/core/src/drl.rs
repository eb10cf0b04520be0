//! De-confounding representation learning.
//!
//! Four networks cooperate:
//!
//! * **G** maps covariates `X` to representations `X^G` of width `r`.
//! * **C** reads a representation together with the treatment and emits
//!   per-sample correlation features.
//! * **D** scores correlation features: high for features computed from
//!   virtual representations `X^R ~ N(0, I)` (independent of `t` by
//!   construction), low for features computed from `X^G`.
//! * **F** predicts the outcome from `(X^G, t)`.
//!
//! Each minibatch runs three updates in order. C and D ascend
//! `E log D(C(X^R,t)) + E log(1 - D(C(X^G,t)))` with G and F frozen. G
//! descends `E log(1 - D(C(X^G,t))) + w_c * loss(y, F(X^G,t))` with C, D
//! and F frozen. F descends `loss(y, F(X^G,t))` with G, C and D frozen.
//! When G wins, `X^G` carries no information about `t` that C can find.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{Dataset, OutcomeKind, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::OutcomeModel;
use crate::nn::{adam_step, bce_loss, mse_loss, Activation, AdamState, Mlp, MlpConfig};
use crate::rng::{seeded, Rng as SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(hidden: &[usize], activation: Activation) -> Self {
        Self {
            hidden: hidden.to_vec(),
            activation,
        }
    }

    fn mlp_config(&self, input: usize, output: usize, out_act: Activation) -> MlpConfig {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        MlpConfig::new(sizes, self.activation, out_act)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub generator: NetSpec,
    pub correlation: NetSpec,
    /// Width of the correlation features (C's output, D's input).
    pub correlation_dim: usize,
    pub discriminator: NetSpec,
    pub counterfactual: NetSpec,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator: NetSpec::new(&[64, 64], Activation::Relu),
            correlation: NetSpec::new(&[64, 32], Activation::Tanh),
            correlation_dim: 8,
            discriminator: NetSpec::new(&[32], Activation::Tanh),
            counterfactual: NetSpec::new(&[64, 64], Activation::Relu),
        }
    }
}

/// How the generator's adversarial term is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Minimize `E log(1 - D(C(X^G, t)))`.
    #[default]
    Minimax,
    /// Minimize `-E log D(C(X^G, t))`; same fixed point, stronger early gradients.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrlConfig {
    pub rep_dim: usize,
    pub w_c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_f: f64,
    pub steps_d: usize,
    pub steps_g: usize,
    pub steps_f: usize,
    pub seed: u64,
    pub outcome_kind: OutcomeKind,
    pub generator_loss: GeneratorLoss,
    pub architecture: Architecture,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Fit a [`Standardizer`] on the training rows and train in those units.
    pub standardize: bool,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            rep_dim: 10,
            w_c: 1.0,
            epochs: 300,
            batch_size: 256,
            lr_g: 1e-3,
            // One equal-rate D step per batch leaves C/D too weak a critic:
            // the generator's representations stay largely confounded.
            lr_d: 3e-3,
            lr_f: 1e-3,
            steps_d: 5,
            steps_g: 1,
            steps_f: 1,
            seed: 0,
            outcome_kind: OutcomeKind::Continuous,
            generator_loss: GeneratorLoss::Minimax,
            architecture: Architecture::default(),
            patience: None,
            standardize: true,
        }
    }
}

impl DrlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rep_dim == 0 {
            return bad("rep_dim must be >= 1");
        }
        if !(self.w_c >= 0.0 && self.w_c.is_finite()) {
            return bad("w_c must be finite and >= 0");
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_f", self.lr_f)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.steps_d == 0 || self.steps_g == 0 || self.steps_f == 0 {
            return bad("step counts must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.architecture.correlation_dim == 0 {
            return bad("correlation_dim must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrlModel {
    pub g: Mlp,
    pub c: Mlp,
    pub d: Mlp,
    pub f: Mlp,
    pub config: DrlConfig,
    /// Maps data units to the units the networks were trained in.
    pub scaler: Standardizer,
}

impl DrlModel {
    /// Freshly initialized networks for `input_dim` covariates.
    pub fn new(input_dim: usize, config: DrlConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("covariate dimension must be >= 1".into()));
        }
        let arch = &config.architecture;
        let r = config.rep_dim;
        let out_f = match config.outcome_kind {
            OutcomeKind::Continuous => Activation::Identity,
            OutcomeKind::Binary => Activation::Sigmoid,
        };
        let mut rng = seeded(config.seed, 10);
        let g = Mlp::new(arch.generator.mlp_config(input_dim, r, Activation::Identity), &mut rng)?;
        let c = Mlp::new(
            arch.correlation.mlp_config(r + 1, arch.correlation_dim, Activation::Tanh),
            &mut rng,
        )?;
        let d = Mlp::new(
            arch.discriminator.mlp_config(arch.correlation_dim, 1, Activation::Sigmoid),
            &mut rng,
        )?;
        let f = Mlp::new(arch.counterfactual.mlp_config(r + 1, 1, out_f), &mut rng)?;
        let model = Self {
            g,
            c,
            d,
            f,
            config,
            scaler: Standardizer::identity(input_dim),
        };
        model.check_wiring()?;
        Ok(model)
    }

    /// Checks that the four networks chain together.
    pub fn check_wiring(&self) -> Result<()> {
        let r = self.config.rep_dim;
        let ok = self.g.config.output_dim() == r
            && self.c.config.input_dim() == r + 1
            && self.d.config.input_dim() == self.c.config.output_dim()
            && self.d.config.output_dim() == 1
            && self.f.config.input_dim() == r + 1
            && self.f.config.output_dim() == 1
            && self.scaler.dim() == self.g.config.input_dim();
        if !ok {
            return Err(Error::Dimension(format!(
                "networks do not chain for rep_dim {r}: scaler {}, G {:?}, C {:?}, D {:?}, F {:?}",
                self.scaler.dim(),
                self.g.config.layer_sizes,
                self.c.config.layer_sizes,
                self.d.config.layer_sizes,
                self.f.config.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.g.config.input_dim()
    }

    /// `X^G = G(x)`, with `x` in data units.
    pub fn representations(&self, x: &Tensor) -> Result<Tensor> {
        self.g.forward(&self.scaler.x(x)?)
    }

    /// Outcome predictions `F(G(x), t)` at arbitrary treatments.
    pub fn predict(&self, x: &Tensor, t_query: &[f64]) -> Result<Vec<f64>> {
        if t_query.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "{} rows but {} treatments",
                x.rows(),
                t_query.len()
            )));
        }
        let rep = self.representations(x)?;
        let out = scaled_outcomes(&self.f, &rep, &self.scaler.t(t_query))?;
        Ok(self.scaler.y_inverse(&out))
    }

    /// Mean discriminator output on virtual and generated correlation features.
    pub fn discriminator_means<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        t: &[f64],
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let xg = self.representations(x)?;
        let t = &self.scaler.t(t);
        let xr = sample_virtual(x.rows(), self.config.rep_dim, rng);
        let mean = |rep: &Tensor| -> Result<f64> {
            let feat = correlation_features(&self.c, rep, t)?;
            let out = self.d.forward(&feat)?;
            Ok(out.sum() / out.len() as f64)
        };
        Ok((mean(&xr)?, mean(&xg)?))
    }
}

impl OutcomeModel for DrlModel {
    fn predict_outcomes(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        self.predict(x, t)
    }
}

/// `F(rep, t)` in network units.
fn scaled_outcomes(f: &Mlp, rep: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
    let input = rep.concat_columns(&Tensor::vector(t.to_vec()))?;
    Ok(f.forward(&input)?.into_data())
}

/// Virtual representations: i.i.d. standard normal entries.
pub fn sample_virtual<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Tensor {
    let data = (0..n * r).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, r, data).expect("shape matches by construction")
}

/// `C(rep, t)` for a whole batch.
pub fn correlation_features(c_net: &Mlp, rep: &Tensor, t: &[f64]) -> Result<Tensor> {
    if t.len() != rep.rows() {
        return Err(Error::Dimension(format!(
            "{} representation rows but {} treatments",
            rep.rows(),
            t.len()
        )));
    }
    c_net.forward(&rep.concat_columns(&Tensor::vector(t.to_vec()))?)
}

/// Tape values of the discriminator objective.
pub struct DiscriminatorTerms<'t> {
    /// `E log D(C(X^R,t)) + E log(1 - D(C(X^G,t)))`, to be maximized.
    pub objective: Var<'t>,
    pub d_real: Var<'t>,
    pub d_fake: Var<'t>,
}

/// Builds the discriminator objective; `c` and `d` are the bound parameters.
pub fn discriminator_objective<'t>(
    model: &DrlModel,
    c: &[Var<'t>],
    d: &[Var<'t>],
    xr: Var<'t>,
    xg: Var<'t>,
    t: Var<'t>,
) -> Result<DiscriminatorTerms<'t>> {
    let d_real = model.d.forward_var(d, model.c.forward_var(c, xr.concat_columns(t)?)?)?;
    let d_fake = model.d.forward_var(d, model.c.forward_var(c, xg.concat_columns(t)?)?)?;
    let objective = d_real.log().mean()?.add(d_fake.one_minus().log().mean()?)?;
    Ok(DiscriminatorTerms {
        objective,
        d_real,
        d_fake,
    })
}

fn outcome_loss<'t>(tape: &'t Tape, kind: OutcomeKind, pred: Var<'t>, y: &Tensor) -> Result<Var<'t>> {
    match kind {
        OutcomeKind::Continuous => mse_loss(tape, pred, y),
        OutcomeKind::Binary => bce_loss(tape, pred, y),
    }
}

/// Builds `adversarial + w_c * loss(y, F(G(x), t))`, to be minimized.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<'t>(
    tape: &'t Tape,
    model: &DrlModel,
    g: &[Var<'t>],
    c: &[Var<'t>],
    d: &[Var<'t>],
    f: &[Var<'t>],
    x: Var<'t>,
    t: Var<'t>,
    y: &Tensor,
) -> Result<Var<'t>> {
    let xg = model.g.forward_var(g, x)?;
    let joined = xg.concat_columns(t)?;
    let d_fake = model.d.forward_var(d, model.c.forward_var(c, joined)?)?;
    let adversarial = match model.config.generator_loss {
        GeneratorLoss::Minimax => d_fake.one_minus().log().mean()?,
        GeneratorLoss::NonSaturating => d_fake.log().mean()?.neg(),
    };
    let y_hat = model.f.forward_var(f, joined)?;
    let fit = outcome_loss(tape, model.config.outcome_kind, y_hat, y)?;
    adversarial.add(fit.scale(model.config.w_c))
}

/// Builds `loss(y, F(G(x), t))`.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_objective<'t>(
    tape: &'t Tape,
    model: &DrlModel,
    g: &[Var<'t>],
    f: &[Var<'t>],
    x: Var<'t>,
    t: Var<'t>,
    y: &Tensor,
) -> Result<Var<'t>> {
    let xg = model.g.forward_var(g, x)?;
    let y_hat = model.f.forward_var(f, xg.concat_columns(t)?)?;
    outcome_loss(tape, model.config.outcome_kind, y_hat, y)
}

/// Statistics from one discriminator update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorStep {
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

fn check_finite(what: &str, v: f64, n: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v} on a batch of {n} rows")))
    }
}

fn grads(tape: &Tape, vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|&v| tape.grad(v)).collect()
}

fn mean_of(v: Var<'_>) -> f64 {
    let t = v.value();
    t.sum() / t.len() as f64
}

/// A model plus the optimizer state for its alternating updates. Step
/// inputs are in network units (already standardized).
#[derive(Debug, Clone)]
pub struct DrlTrainer {
    pub model: DrlModel,
    opt_g: AdamState,
    opt_c: AdamState,
    opt_d: AdamState,
    opt_f: AdamState,
}

impl DrlTrainer {
    pub fn new(model: DrlModel) -> Self {
        Self {
            opt_g: AdamState::new(model.g.params()),
            opt_c: AdamState::new(model.c.params()),
            opt_d: AdamState::new(model.d.params()),
            opt_f: AdamState::new(model.f.params()),
            model,
        }
    }

    pub fn into_model(self) -> DrlModel {
        self.model
    }

    /// One ascent step for C and D. Returns the objective before the update.
    pub fn step_discriminator<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        t: &[f64],
        rng: &mut R,
    ) -> Result<f64> {
        Ok(self.discriminator_update(x, t, rng)?.l_d)
    }

    pub fn discriminator_update<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        t: &[f64],
        rng: &mut R,
    ) -> Result<DiscriminatorStep> {
        let n = x.rows();
        let model = &self.model;
        let xg = model.g.forward(x)?;
        let xr = sample_virtual(n, model.config.rep_dim, rng);
        let tape = Tape::new();
        let c = model.c.bind(&tape);
        let d = model.d.bind(&tape);
        let tv = tape.constant(Tensor::vector(t.to_vec()).as_column());
        let terms = discriminator_objective(
            model,
            &c,
            &d,
            tape.constant(xr),
            tape.constant(xg),
            tv,
        )?;
        let l_d = check_finite("discriminator objective", terms.objective.item(), n)?;
        let step = DiscriminatorStep {
            l_d,
            d_real: mean_of(terms.d_real),
            d_fake: mean_of(terms.d_fake),
        };
        tape.backward(terms.objective.neg())?;
        let (gc, gd) = (grads(&tape, &c), grads(&tape, &d));
        let lr = self.model.config.lr_d;
        adam_step(&mut self.model.c.params_mut(), &gc, &mut self.opt_c, lr)?;
        adam_step(&mut self.model.d.params_mut(), &gd, &mut self.opt_d, lr)?;
        Ok(step)
    }

    /// One descent step for G. Returns the objective before the update.
    pub fn step_generator(&mut self, x: &Tensor, t: &[f64], y: &[f64]) -> Result<f64> {
        let n = x.rows();
        let model = &self.model;
        let tape = Tape::new();
        let g = model.g.bind(&tape);
        let c = model.c.bind_frozen(&tape);
        let d = model.d.bind_frozen(&tape);
        let f = model.f.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(Tensor::vector(t.to_vec()).as_column());
        let yt = Tensor::vector(y.to_vec());
        let obj = generator_objective(&tape, model, &g, &c, &d, &f, xv, tv, &yt)?;
        let l_g = check_finite("generator objective", obj.item(), n)?;
        tape.backward(obj)?;
        let gg = grads(&tape, &g);
        let lr = self.model.config.lr_g;
        adam_step(&mut self.model.g.params_mut(), &gg, &mut self.opt_g, lr)?;
        Ok(l_g)
    }

    /// One descent step for F. Returns the loss before the update.
    pub fn step_counterfactual(&mut self, x: &Tensor, t: &[f64], y: &[f64]) -> Result<f64> {
        let n = x.rows();
        let model = &self.model;
        let xg = model.g.forward(x)?;
        let tape = Tape::new();
        let f = model.f.bind(&tape);
        let input = xg.concat_columns(&Tensor::vector(t.to_vec()))?;
        let y_hat = model.f.forward_var(&f, tape.constant(input))?;
        let loss = outcome_loss(&tape, model.config.outcome_kind, y_hat, &Tensor::vector(y.to_vec()))?;
        let l_c = check_finite("counterfactual loss", loss.item(), n)?;
        tape.backward(loss)?;
        let gf = grads(&tape, &f);
        let lr = self.model.config.lr_f;
        adam_step(&mut self.model.f.params_mut(), &gf, &mut self.opt_f, lr)?;
        Ok(l_c)
    }
}

/// Outcome loss on `data` (in data units), measured in the standardized
/// units training reports `l_c` in.
pub fn evaluate_loss(model: &DrlModel, data: &Dataset) -> Result<f64> {
    network_loss(model, &model.scaler.dataset(data)?)
}

/// Outcome loss on data already in network units.
fn network_loss(model: &DrlModel, scaled: &Dataset) -> Result<f64> {
    let pred = scaled_outcomes(&model.f, &model.g.forward(&scaled.x)?, &scaled.t)?;
    Ok(outcome_loss_plain(model.config.outcome_kind, &pred, &scaled.y))
}

pub(crate) fn outcome_loss_plain(kind: OutcomeKind, pred: &[f64], y: &[f64]) -> f64 {
    let n = pred.len() as f64;
    match kind {
        OutcomeKind::Continuous => pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / n,
        OutcomeKind::Binary => {
            let floor = crate::nn::P_FLOOR;
            -pred
                .iter()
                .zip(y)
                .map(|(&p, &v)| {
                    let p = p.clamp(floor, 1.0 - floor);
                    v * p.ln() + (1.0 - v) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_d: f64,
    pub l_g: f64,
    pub l_c: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub val_l_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (by validation loss), if any.
    pub best_epoch: Option<usize>,
}

/// Index batches of a shuffled epoch.
pub(crate) fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Trains on the whole dataset with no validation monitoring.
pub fn train(data: &Dataset, config: &DrlConfig) -> Result<(DrlModel, TrainHistory)> {
    train_with_validation(data, None, config)
}

/// Trains; with a validation set, keeps the parameters of the epoch with
/// the lowest validation outcome loss.
pub fn train_with_validation(
    data: &Dataset,
    val: Option<&Dataset>,
    config: &DrlConfig,
) -> Result<(DrlModel, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    if data.outcome_kind != config.outcome_kind {
        return Err(Error::Config(format!(
            "dataset outcome is {:?} but config says {:?}",
            data.outcome_kind, config.outcome_kind
        )));
    }
    let mut model = DrlModel::new(data.dim(), config.clone())?;
    if config.standardize {
        model.scaler = Standardizer::fit(data)?;
    }
    let data = &model.scaler.dataset(data)?;
    let val = match val {
        Some(v) => Some(model.scaler.dataset(v)?),
        None => None,
    };
    let mut trainer = DrlTrainer::new(model);
    let mut shuffle_rng: SeededRng = seeded(config.seed, 11);
    let mut virtual_rng: SeededRng = seeded(config.seed, 12);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, DrlModel)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let batches = epoch_batches(data.len(), config.batch_size, &mut shuffle_rng);
        let mut sums = [0.0f64; 5];
        let mut counts = [0usize; 3];
        let res: Result<()> = (|| {
            for b in &batches {
                let batch = data.subset(b);
                for _ in 0..config.steps_d {
                    let s = trainer.discriminator_update(&batch.x, &batch.t, &mut virtual_rng)?;
                    sums[0] += s.l_d;
                    sums[3] += s.d_real;
                    sums[4] += s.d_fake;
                    counts[0] += 1;
                }
                for _ in 0..config.steps_g {
                    sums[1] += trainer.step_generator(&batch.x, &batch.t, &batch.y)?;
                    counts[1] += 1;
                }
                for _ in 0..config.steps_f {
                    sums[2] += trainer.step_counterfactual(&batch.x, &batch.t, &batch.y)?;
                    counts[2] += 1;
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            return Err(Error::Training {
                epoch,
                message: e.to_string(),
                history: Box::new(history),
            });
        }
        let val_l_c = match &val {
            Some(v) => Some(network_loss(&trainer.model, v)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            l_d: sums[0] / counts[0] as f64,
            l_g: sums[1] / counts[1] as f64,
            l_c: sums[2] / counts[2] as f64,
            d_real: sums[3] / counts[0] as f64,
            d_fake: sums[4] / counts[0] as f64,
            val_l_c,
        });
        if let Some(vl) = val_l_c {
            if !vl.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("validation loss is {vl}"),
                    history: Box::new(history),
                });
            }
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                best = Some((vl, trainer.model.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => trainer.into_model(),
    };
    Ok((model, history))
}
