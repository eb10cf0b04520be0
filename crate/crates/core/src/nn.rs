//! Multilayer perceptrons, losses and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities fed to the cross-entropy are clamped to `[P_FLOOR, 1 - P_FLOOR]`.
pub const P_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => v.sigmoid(),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self {
            layer_sizes,
            hidden_activation: hidden,
            output_activation: output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "zero-size layer in {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in config.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            config,
            weights,
            biases,
        })
    }

    /// Rebuilds a network from stored parameters, validating the shape chain.
    pub fn from_parts(config: MlpConfig, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension(format!(
                "expected {layers} layers, got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for (i, pair) in config.layer_sizes.windows(2).enumerate() {
            if weights[i].shape() != [pair[0], pair[1]] || biases[i].shape() != [pair[1]] {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} / bias {:?} do not match sizes {:?}",
                    weights[i].shape(),
                    biases[i].shape(),
                    pair
                )));
            }
        }
        Ok(Self {
            config,
            weights,
            biases,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    /// Registers the parameters on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Registers the parameters as constants; gradients flow through but not into them.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Forward pass on a tape using parameters previously bound with
    /// [`Mlp::bind`] or [`Mlp::bind_frozen`].
    pub fn forward_var<'t>(&self, params: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
        let width = input.shape().get(1).copied().unwrap_or(1);
        if width != self.config.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects input width {}, got {:?}",
                self.config.input_dim(),
                input.shape()
            )));
        }
        let last = self.num_layers() - 1;
        let mut h = input;
        for layer in 0..self.num_layers() {
            h = h.matmul(params[2 * layer])?.add_bias(params[2 * layer + 1])?;
            h = if layer == last {
                self.config.output_activation.apply_var(h)
            } else {
                self.config.hidden_activation.apply_var(h)
            };
        }
        Ok(h)
    }

    /// Tape-free forward pass for inference.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.cols() != self.config.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects input width {}, got {:?}",
                self.config.input_dim(),
                input.shape()
            )));
        }
        let last = self.num_layers() - 1;
        let mut h = input.clone();
        for layer in 0..self.num_layers() {
            let mut z = h.matmul(&self.weights[layer])?;
            let cols = z.cols();
            let act = if layer == last {
                self.config.output_activation
            } else {
                self.config.hidden_activation
            };
            let bias = self.biases[layer].data();
            for row in z.data_mut().chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            h = z;
        }
        Ok(h)
    }
}

fn check_target(pred: Var<'_>, target: &Tensor) -> Result<Tensor> {
    let n = pred.shape().iter().product::<usize>();
    if target.len() != n {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target of length {}",
            pred.shape(),
            target.len()
        )));
    }
    if n == 0 {
        return Err(Error::Domain("loss over an empty batch".into()));
    }
    target.clone().reshape(pred.shape())
}

/// Mean squared error.
pub fn mse_loss<'t>(tape: &'t Tape, pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let target = tape.constant(check_target(pred, target)?);
    let diff = pred.sub(target)?;
    diff.mul(diff)?.mean()
}

/// Binary cross-entropy on probabilities, clamped to `[P_FLOOR, 1 - P_FLOOR]`.
pub fn bce_loss<'t>(tape: &'t Tape, pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let target = check_target(pred, target)?;
    let p = pred.clamp(P_FLOOR, 1.0 - P_FLOOR);
    let y = tape.constant(target.clone());
    let not_y = tape.constant(target.map(|v| 1.0 - v));
    let pos = y.mul(p.log())?;
    let neg = not_y.mul(p.one_minus().log())?;
    Ok(pos.add(neg)?.mean()?.neg())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. The caller owns gradient zeroing.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(sizes: &[usize]) -> MlpConfig {
        MlpConfig::new(sizes.to_vec(), Activation::Relu, Activation::Identity)
    }

    #[test]
    fn layer_shapes_follow_config() {
        let mlp = Mlp::new(cfg(&[10, 32, 10]), &mut rng(0)).unwrap();
        assert_eq!(mlp.weights[0].shape(), &[10, 32]);
        assert_eq!(mlp.weights[1].shape(), &[32, 10]);
        assert!(mlp.biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::new(cfg(&[4, 8, 2]), &mut rng(7)).unwrap();
        let b = Mlp::new(cfg(&[4, 8, 2]), &mut rng(7)).unwrap();
        let c = Mlp::new(cfg(&[4, 8, 2]), &mut rng(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.weights[0].data().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(Mlp::new(cfg(&[3]), &mut rng(0)), Err(Error::Config(_))));
        assert!(matches!(Mlp::new(cfg(&[3, 0, 1]), &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut mlp = Mlp::new(cfg(&[3, 5, 2]), &mut rng(1)).unwrap();
        for p in mlp.params_mut() {
            p.fill(0.0);
        }
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert!(mlp.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let w = Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap();
        let b = Tensor::vector(vec![0.5]);
        let mlp = Mlp::from_parts(cfg(&[2, 1]), vec![w], vec![b]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap().data(), &[1.5, 4.5]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::new(cfg(&[3, 2]), &mut rng(0)).unwrap();
        assert!(matches!(mlp.forward(&Tensor::zeros(&[4, 2])), Err(Error::Dimension(_))));
        let tape = Tape::new();
        let p = mlp.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(mlp.forward_var(&p, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let config = MlpConfig::new(vec![3, 6, 4, 2], Activation::Tanh, Activation::Sigmoid);
        let mlp = Mlp::new(config, &mut rng(3)).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.3, -0.8]).unwrap();
        let tape = Tape::new();
        let p = mlp.bind_frozen(&tape);
        let out = mlp.forward_var(&p, tape.constant(x.clone())).unwrap().value();
        let plain = mlp.forward(&x).unwrap();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_hidden_layer_gradient_check() {
        let config = MlpConfig::new(vec![3, 4, 4, 1], Activation::Tanh, Activation::Identity);
        let mlp = Mlp::new(config, &mut rng(11)).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = Tensor::vector(vec![0.2, -0.1, 0.5, 1.0]);
        let params: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
        let err = grad_check(&params, 1e-5, |tape, p| {
            let out = mlp.forward_var(p, tape.constant(x.clone()))?;
            mse_loss(tape, out, &y)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mse_values() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = mse_loss(&tape, p, &Tensor::vector(vec![1.0, 3.0])).unwrap();
        assert_eq!(l.item(), 5.0);
        let same = Tensor::vector(vec![0.3, -1.7]);
        let q = tape.constant(same.clone());
        assert_eq!(mse_loss(&tape, q, &same).unwrap().item(), 0.0);
        let e = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(mse_loss(&tape, e, &Tensor::zeros(&[0])), Err(Error::Domain(_))));
    }

    #[test]
    fn mse_gradient_is_two_residual_over_n() {
        let pred = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let target = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let tape = Tape::new();
        let p = tape.var(pred.clone());
        tape.backward(mse_loss(&tape, p, &target).unwrap()).unwrap();
        let g = tape.grad(p);
        for i in 0..3 {
            let expect = 2.0 * (pred.data()[i] - target.data()[i]) / 3.0;
            assert!((g.data()[i] - expect).abs() < 1e-15);
        }
        let err = grad_check(&[pred], 1e-5, |t, v| mse_loss(t, v[0], &target)).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn bce_values_and_gradient() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5; 4]));
        let l = bce_loss(&tape, p, &Tensor::vector(vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);

        let target = Tensor::vector(vec![1.0, 0.0]);
        let perfect = tape.constant(target.clone());
        let l = bce_loss(&tape, perfect, &target).unwrap().item();
        assert!(l > 0.0 && l < 1e-6, "{l}");

        let pred = Tensor::vector(vec![0.2, 0.7, 0.55, 0.9]);
        let y = Tensor::vector(vec![0.0, 1.0, 0.0, 1.0]);
        let err = grad_check(&[pred], 1e-6, |t, v| bce_loss(t, v[0], &y)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut x = Tensor::vector(vec![1.0, -2.0]);
        let mut state = AdamState::new([&x]);
        let before = x.clone();
        adam_step(&mut [&mut x], &[Tensor::zeros(&[2])], &mut state, 0.1).unwrap();
        assert_eq!(x, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_follows_sign_of_constant_gradient() {
        let mut x = Tensor::vector(vec![0.0, 0.0]);
        let mut state = AdamState::new([&x]);
        let g = Tensor::vector(vec![3.0, -1e-3]);
        for _ in 0..50 {
            adam_step(&mut [&mut x], &[g.clone()], &mut state, 0.01).unwrap();
        }
        assert!(x.data()[0] < -0.4);
        assert!(x.data()[1] > 0.4);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Tensor::scalar(0.0);
        let mut state = AdamState::new([&x]);
        for _ in 0..2000 {
            let tape = Tape::new();
            let v = tape.var(x.clone());
            let d = v.add_scalar(-3.0);
            tape.backward(d.mul(d).unwrap()).unwrap();
            let g = tape.grad(v);
            adam_step(&mut [&mut x], &[g], &mut state, 0.05).unwrap();
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "{}", x.data()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut x = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new([&x]);
        let res = adam_step(&mut [&mut x], &[Tensor::vector(vec![f64::NAN])], &mut state, 0.1);
        let err = res.unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("parameter 0"));
    }
}
