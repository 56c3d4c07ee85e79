//! MLP policy `u = W phi(x) + b` with ELU hidden layers and hand-written
//! reverse-mode differentiation.
//!
//! [`PolicyNet`] is the bare network. [`Policy`] wraps it with the input
//! standardization statistics of the training set so callers can feed raw
//! environment observations.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

/// ELU slope parameter for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

/// Hidden widths used when none are configured.
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        ELU_ALPHA * z.exp_m1()
    }
}

#[inline]
fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        ELU_ALPHA * z.exp()
    }
}

/// Affine layer `y = weight * x + bias`, weight stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Weight initialization for [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    #[default]
    GlorotUniform,
    /// Everything zero.
    Zeros,
}

/// The feature map `phi` (ELU hidden layers) plus the linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub hidden: Vec<Dense>,
    pub readout: Dense,
}

/// Activations recorded by [`PolicyNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub input: Array2<f64>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Array2<f64>>,
    /// Post-activations of each hidden layer; the last one is the latent.
    pub post: Vec<Array2<f64>>,
    pub action: Array2<f64>,
}

impl Tape {
    pub fn latent(&self) -> &Array2<f64> {
        self.post.last().expect("network has at least one hidden layer")
    }
}

/// Where the backward pass is seeded.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad<'a> {
    /// Gradient with respect to the action output (batch x action_dim).
    Action(ArrayView2<'a, f64>),
    /// Gradient with respect to the latent `phi(x)` (batch x latent_dim).
    Latent(ArrayView2<'a, f64>),
    /// Both at once; contributions are summed.
    Both {
        action: ArrayView2<'a, f64>,
        latent: ArrayView2<'a, f64>,
    },
}

/// Gradients mirroring the layout of a [`PolicyNet`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub hidden: Vec<Dense>,
    pub readout: Dense,
    /// Gradient with respect to the (network-level) input batch.
    pub input: Array2<f64>,
}

impl GradientBundle {
    pub fn zeros_like(net: &PolicyNet, batch: usize) -> Self {
        Self {
            hidden: net.hidden.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            readout: Dense::zeros(net.readout.inputs(), net.readout.outputs()),
            input: Array2::zeros((batch, net.input_dim())),
        }
    }

    /// Parameter gradients flattened in [`PolicyNet::to_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten_layers(self.hidden.iter().chain(std::iter::once(&self.readout)))
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite()) && self.input.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other` for parameter gradients (input gradient included
    /// when shapes agree).
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
        self.readout.weight.scaled_add(scale, &other.readout.weight);
        self.readout.bias.scaled_add(scale, &other.readout.bias);
        if self.input.dim() == other.input.dim() {
            self.input.scaled_add(scale, &other.input);
        }
    }
}

fn flatten_layers<'a>(layers: impl Iterator<Item = &'a Dense>) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend(layer.weight.iter());
        out.extend(layer.bias.iter());
    }
    out
}

/// Builds a network with `widths = [input, hidden..., output]`.
pub fn init_params(seed: u64, widths: &[usize], scheme: InitScheme) -> Result<PolicyNet> {
    if widths.len() < 3 {
        return Err(LvrError::invalid_input(format!(
            "widths must list input, at least one hidden layer and output, got {widths:?}"
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(LvrError::invalid_input(format!("zero width in {widths:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |fan_in: usize, fan_out: usize| -> Dense {
        let mut layer = Dense::zeros(fan_in, fan_out);
        if scheme == InitScheme::GlorotUniform {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        layer
    };
    let n = widths.len();
    let hidden = widths[..n - 1].windows(2).map(|w| make(w[0], w[1])).collect();
    let readout = make(widths[n - 2], widths[n - 1]);
    Ok(PolicyNet { hidden, readout })
}

impl PolicyNet {
    pub fn input_dim(&self) -> usize {
        self.hidden[0].inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.readout.inputs()
    }

    pub fn action_dim(&self) -> usize {
        self.readout.outputs()
    }

    /// `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.hidden.iter().map(Dense::outputs));
        w.push(self.action_dim());
        w
    }

    pub fn num_params(&self) -> usize {
        self.hidden.iter().map(Dense::num_params).sum::<usize>() + self.readout.num_params()
    }

    /// Checks that consecutive layers chain and all parameters are finite.
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(LvrError::invalid_input("network has no hidden layers"));
        }
        let mut width = self.hidden[0].inputs();
        for layer in self.hidden.iter().chain(std::iter::once(&self.readout)) {
            if layer.inputs() != width || layer.bias.len() != layer.outputs() {
                return Err(LvrError::invalid_input("layer dimensions do not chain"));
            }
            width = layer.outputs();
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(LvrError::invalid_input("network has non-finite parameters"));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten_layers(self.hidden.iter().chain(std::iter::once(&self.readout)))
    }

    /// Overwrites all parameters from a vector in [`Self::to_flat`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(LvrError::invalid_input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.readout)) {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(LvrError::invalid_input(format!(
                "state dimension {cols} does not match network input width {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched forward pass keeping everything needed by [`Self::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x.ncols())?;
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = match post.last() {
                Some(h) => h.dot(&layer.weight.t()) + &layer.bias,
                None => x.dot(&layer.weight.t()) + &layer.bias,
            };
            post.push(z.mapv(elu));
            pre.push(z);
        }
        let action = post.last().unwrap().dot(&self.readout.weight.t()) + &self.readout.bias;
        Ok(Tape {
            input: x.to_owned(),
            pre,
            post,
            action,
        })
    }

    /// `phi(x)`: post-activation output of the last hidden layer.
    pub fn forward_latent(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let mut h = x.to_owned();
        for layer in &self.hidden {
            h = (layer.weight.dot(&h) + &layer.bias).mapv(elu);
        }
        Ok(h)
    }

    /// `W phi(x) + b`.
    pub fn forward_action(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let h = self.forward_latent(x)?;
        Ok(self.readout.weight.dot(&h) + &self.readout.bias)
    }

    /// Exact gradient of `<out_grad, output>` with respect to every parameter
    /// and the input batch.
    pub fn backward(&self, tape: &Tape, out_grad: OutputGrad<'_>) -> Result<GradientBundle> {
        let batch = tape.input.nrows();
        let check = |g: &ArrayView2<f64>, cols: usize, what: &str| -> Result<()> {
            if g.dim() != (batch, cols) {
                return Err(LvrError::invalid_input(format!(
                    "{what} gradient has shape {:?}, expected ({batch}, {cols})",
                    g.dim()
                )));
            }
            Ok(())
        };
        let (action_grad, latent_grad) = match out_grad {
            OutputGrad::Action(a) => (Some(a), None),
            OutputGrad::Latent(l) => (None, Some(l)),
            OutputGrad::Both { action, latent } => (Some(action), Some(latent)),
        };
        let mut grads = GradientBundle::zeros_like(self, batch);
        let mut dh = Array2::zeros((batch, self.latent_dim()));
        if let Some(g) = action_grad {
            check(&g, self.action_dim(), "action")?;
            grads.readout.weight = g.t().dot(tape.latent());
            grads.readout.bias = g.sum_axis(Axis(0));
            dh += &g.dot(&self.readout.weight);
        }
        if let Some(g) = latent_grad {
            check(&g, self.latent_dim(), "latent")?;
            dh += &g;
        }
        for l in (0..self.hidden.len()).rev() {
            let mut dz = dh;
            ndarray::Zip::from(&mut dz).and(&tape.pre[l]).for_each(|d, &z| *d *= elu_grad(z));
            let input = if l == 0 { tape.input.view() } else { tape.post[l - 1].view() };
            grads.hidden[l].weight = dz.t().dot(&input);
            grads.hidden[l].bias = dz.sum_axis(Axis(0));
            dh = dz.dot(&self.hidden[l].weight);
        }
        grads.input = dh;
        Ok(grads)
    }
}

/// Per-dimension affine standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    /// Mean and population standard deviation of the rows of `x`; dimensions
    /// with std below 1e-12 get scale 1.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(LvrError::invalid_input("cannot standardize an empty dataset"));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s < 1e-12 { 1.0 } else { s });
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn apply_one(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// A [`PolicyNet`] that accepts raw observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: PolicyNet,
    pub input_norm: Standardizer,
}

impl Policy {
    pub fn new(net: PolicyNet, input_norm: Standardizer) -> Result<Self> {
        net.validate()?;
        if input_norm.dim() != net.input_dim() {
            return Err(LvrError::invalid_input(format!(
                "standardizer has dimension {} but network input is {}",
                input_norm.dim(),
                net.input_dim()
            )));
        }
        Ok(Self { net, input_norm })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.action_dim()
    }

    pub fn forward(&self, states: ArrayView2<f64>) -> Result<Tape> {
        self.net.forward(self.input_norm.apply(states).view())
    }

    pub fn latent(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.net.forward_latent(self.input_norm.apply_one(x).view())
    }

    pub fn action(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.net.forward_action(self.input_norm.apply_one(x).view())
    }

    /// Latents for every row of `states`.
    pub fn latents(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(states)?.post.pop().unwrap())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk policy container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub policy: Policy,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
}

impl Checkpoint {
    pub fn new(policy: Policy, config_hash: impl Into<String>, seed: u64, method: impl Into<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            widths: policy.net.widths(),
            policy,
            config_hash: config_hash.into(),
            seed,
            method: method.into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(LvrError::invalid_input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.widths != ckpt.policy.net.widths() {
            return Err(LvrError::invalid_input("checkpoint widths disagree with stored parameters"));
        }
        ckpt.policy.net.validate()?;
        Ok(ckpt)
    }
}
