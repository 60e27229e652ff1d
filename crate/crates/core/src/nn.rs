//! Dense layer stacks with hand-written reverse mode, the class-weighted
//! binary cross-entropy loss, Adam, and a central finite-difference checker.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Whether dropout is active, and the seed of its masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    /// Derive an independent mode for a sub-network.
    pub fn derive(self, salt: u64) -> Mode {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train {
                seed: splitmix(seed ^ splitmix(salt)),
            },
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `y = x W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Multi-layer perceptron; the activation (and dropout) sit between layers,
/// the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    dropout: f64,
}

/// Gradients shaped like the owning [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer (after activation and dropout of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    /// Scaled dropout masks of the hidden layers.
    masks: Vec<Option<Array2<f64>>>,
    dims: Vec<usize>,
}

impl Mlp {
    /// Layers of widths `dims[0] → dims[1] → …`, initialised uniformly in
    /// `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least two widths".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0].max(1) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self::from_layers(layers, activation, dropout)
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation, dropout: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape(format!("layer {i}: bias/weight width mismatch")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {i} has non-finite parameters")));
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    /// Single linear layer computing the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            }],
            activation: Activation::Identity,
            dropout: 0.0,
        }
    }

    /// Single linear layer with the given weight and zero bias.
    pub fn linear(weight: Array2<f64>) -> Self {
        let out = weight.ncols();
        Self {
            layers: vec![Dense {
                weight,
                bias: Array1::zeros(out),
            }],
            activation: Activation::Identity,
            dropout: 0.0,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    pub fn read_params<I: Iterator<Item = f64>>(&mut self, it: &mut I) -> Result<()> {
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it
                    .next()
                    .ok_or_else(|| Error::Shape("parameter vector too short".into()))?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, MlpCache)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} input columns, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let n_layers = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers - 1),
            masks: Vec::with_capacity(n_layers - 1),
            dims: self.dims(),
        };
        let mut a = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            cache.inputs.push(a);
            if i + 1 == n_layers {
                return Ok((z, cache));
            }
            let mut h = z.mapv(|v| self.activation.apply(v));
            let mask = match mode {
                Mode::Train { seed } if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ i as u64));
                    let m = Array2::from_shape_fn(h.raw_dim(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            a = h;
        }
        unreachable!("loop returns at the last layer")
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, MlpGrads)> {
        if cache.dims != self.dims() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Precondition(
                "cache was produced by a different network".into(),
            ));
        }
        let rows = cache.inputs[0].nrows();
        if upstream.dim() != (rows, self.output_dim()) {
            return Err(Error::Precondition(format!(
                "upstream gradient {:?} does not match forward output ({rows}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            grads.push(Dense {
                weight: cache.inputs[i].t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            let mut d_in = delta.dot(&layer.weight.t());
            if i > 0 {
                if let Some(mask) = &cache.masks[i - 1] {
                    d_in *= mask;
                }
                let act = self.activation;
                Zip::from(&mut d_in)
                    .and(&cache.pre[i - 1])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            delta = d_in;
        }
        grads.reverse();
        Ok((delta, MlpGrads { layers: grads }))
    }
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }
}

/// Per-class loss weights `(negative, positive)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        negative: 1.0,
        positive: 1.0,
    };

    pub fn new(negative: f64, positive: f64) -> Self {
        Self { negative, positive }
    }
}

/// Mean class-weighted binary cross-entropy on logits, with its gradient.
pub fn weighted_bce_loss(
    logits: ArrayView1<'_, f64>,
    labels: &[u8],
    weights: ClassWeights,
) -> Result<(f64, Array1<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Array1::zeros(0)));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (k, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        let (w, y) = if y == 1 {
            (weights.positive, 1.0)
        } else {
            (weights.negative, 0.0)
        };
        // -[y log σ(z) + (1-y) log(1-σ(z))] = max(z,0) - z y + log(1 + e^{-|z|})
        loss += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        grad[k] = w * (sigmoid(z) - y) / n;
    }
    Ok((loss / n, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient<F>(x: &[f64], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub class_weights: ClassWeights,
    pub num_layers: usize,
    pub seed: u64,
}

/// Starting hyperparameters per architecture and dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    GinAml,
    GinEth,
    PnaAml,
    PnaEth,
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let (lr, h, bs, dropout, w1) = match p {
            Preset::GinAml => (0.003, 64, 8192, 0.1, 6.27),
            Preset::GinEth => (0.006, 32, 4096, 0.1, 6.27),
            Preset::PnaAml => (0.0008, 20, 8192, 0.28, 7.0),
            Preset::PnaEth => (0.0008, 20, 4096, 0.1, 3.0),
        };
        Self {
            learning_rate: lr,
            hidden_size: h,
            batch_size: bs,
            dropout,
            class_weights: ClassWeights::new(1.0, w1),
            num_layers: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.class_weights.negative > 0.0 && self.class_weights.positive > 0.0) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if self.hidden_size == 0 || self.batch_size == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "hidden size, batch size and layer count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let (y, _) = Mlp::identity(2).forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let hidden = Dense {
            weight: array![[-1.0, -2.0]],
            bias: array![0.0, 0.0],
        };
        let out = Dense {
            weight: array![[1.0], [1.0]],
            bias: array![0.0],
        };
        let m = Mlp::from_layers(vec![hidden, out], Activation::Relu, 0.0).unwrap();
        let (y, _) = m.forward(array![[1.0], [3.0]].view(), Mode::Eval).unwrap();
        assert_eq!(y, array![[0.0], [0.0]]);
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let m = Mlp::new(&[3, 8, 2], Activation::Relu, 0.5, &mut rng(1)).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3 - 0.5);
        let (a, _) = m.forward(x.view(), Mode::Eval).unwrap();
        let (b, _) = m.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.forward(x.view(), Mode::Train { seed: 3 }).unwrap();
        let (d, _) = m.forward(x.view(), Mode::Train { seed: 3 }).unwrap();
        assert_eq!(c, d);
        let (e, _) = m.forward(x.view(), Mode::Train { seed: 4 }).unwrap();
        assert_ne!(c, e);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = Mlp::identity(2);
        assert!(matches!(
            m.forward(Array2::zeros((1, 3)).view(), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = Mlp::new(&[3, 5, 2], Activation::Gelu, 0.0, &mut rng(2)).unwrap();
        let x = Array2::from_elem((4, 3), 0.7);
        let (_, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        let (dx, g) = m.backward(&cache, Array2::zeros((4, 2)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert_eq!(g, m.zero_grads());
    }

    #[test]
    fn linear_layer_weight_grad_is_input_transpose() {
        let m = Mlp::linear(array![[1.0, 0.0], [0.0, 1.0]]);
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (_, cache) = m.forward(x.view(), Mode::Eval).unwrap();
        let (_, g) = m.backward(&cache, Array2::eye(2).view()).unwrap();
        assert_eq!(g.layers[0].weight, x.t().to_owned());
        assert_eq!(g.layers[0].bias, array![1.0, 1.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let a = Mlp::new(&[2, 3, 1], Activation::Relu, 0.0, &mut rng(0)).unwrap();
        let b = Mlp::new(&[2, 4, 1], Activation::Relu, 0.0, &mut rng(0)).unwrap();
        let (_, cache) = a.forward(Array2::zeros((2, 2)).view(), Mode::Eval).unwrap();
        assert!(matches!(
            b.backward(&cache, Array2::zeros((2, 1)).view()),
            Err(Error::Precondition(_))
        ));
    }

    /// Loss `Σ c ⊙ mlp(x)` for fixed random `c`, differentiated both ways.
    fn gradient_check(activation: Activation, seed: u64, mode: Mode) -> f64 {
        let mut r = rng(seed);
        let mut m = Mlp::new(&[4, 6, 5, 3], activation, 0.3, &mut r).unwrap();
        let x = Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let (_, cache) = m.forward(x.view(), mode).unwrap();
        let (_, g) = m.backward(&cache, c.view()).unwrap();
        let mut analytic = Vec::new();
        g.write_flat(&mut analytic);
        let mut p0 = Vec::new();
        m.write_params(&mut p0);
        let numeric = finite_difference_gradient(&p0, 1e-5, |p| {
            m.read_params(&mut p.iter().copied()).unwrap();
            let (y, _) = m.forward(x.view(), mode).unwrap();
            (&y * &c).sum()
        });
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        for seed in 0..20 {
            for act in [Activation::Relu, Activation::Gelu] {
                let err = gradient_check(act, seed, Mode::Eval);
                assert!(err <= 1e-4, "seed {seed} {act:?}: {err}");
                let err = gradient_check(act, seed, Mode::Train { seed: 99 });
                assert!(err <= 1e-4, "seed {seed} {act:?} train: {err}");
            }
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let (l, _) = weighted_bce_loss(array![0.0, 0.0].view(), &[1, 1], ClassWeights::UNIT).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn positive_weight_scales_positive_term() {
        let z = array![0.3];
        let (base, gb) = weighted_bce_loss(z.view(), &[1], ClassWeights::UNIT).unwrap();
        let (w, gw) = weighted_bce_loss(z.view(), &[1], ClassWeights::new(1.0, 6.27)).unwrap();
        assert!((w - 6.27 * base).abs() < 1e-12);
        assert!((gw[0] - 6.27 * gb[0]).abs() < 1e-12);
        let (neg, _) = weighted_bce_loss(z.view(), &[0], ClassWeights::new(1.0, 6.27)).unwrap();
        let (neg_unit, _) = weighted_bce_loss(z.view(), &[0], ClassWeights::UNIT).unwrap();
        assert_eq!(neg, neg_unit);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let z = [0.4, -1.3, 2.2, -0.1, 35.0, -40.0];
        let y = [1, 0, 1, 1, 0, 1];
        let w = ClassWeights::new(1.0, 6.27);
        let (_, g) = weighted_bce_loss(ArrayView1::from(&z), &y, w).unwrap();
        let numeric = finite_difference_gradient(&z, 1e-5, |p| {
            weighted_bce_loss(ArrayView1::from(p), &y, w).unwrap().0
        });
        for (a, b) in g.iter().zip(&numeric) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn bce_is_finite_and_non_negative_for_extreme_logits() {
        let z = array![1e4, -1e4, 0.0];
        let (l, g) = weighted_bce_loss(z.view(), &[1, 0, 0], ClassWeights::UNIT).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = weighted_bce_loss(array![-1e4].view(), &[1], ClassWeights::UNIT).unwrap();
        assert!(l.is_finite() && l > 1e3);
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.02], &mut s, 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_quadratic() {
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let before = f(p[0]);
        let g = [2.0 * (p[0] - 3.0)];
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!(f(p[0]) < before);
    }

    #[test]
    fn gin_aml_preset_values() {
        let c = TrainConfig::preset(Preset::GinAml);
        assert_eq!(c.learning_rate, 0.003);
        assert_eq!(c.hidden_size, 64);
        assert_eq!(c.batch_size, 8192);
        assert_eq!(c.dropout, 0.1);
        assert_eq!(c.class_weights, ClassWeights::new(1.0, 6.27));
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.dropout = 1.0;
        assert!(bad.validate().is_err());
    }
}
