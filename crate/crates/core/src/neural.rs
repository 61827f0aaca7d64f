//! Small dense feedforward networks with hand-written reverse-mode
//! gradients, Adam, and Polyak (soft) target updates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`, given the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Dense layer; `weights` is row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b),
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Intermediate values from [`Mlp::forward`], consumed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activations of every layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped accumulator for gradients (and Adam moments).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|g| *g *= factor);
    }

    pub fn reset(&mut self) {
        self.values_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, g| m.max(g.abs()))
    }

    fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&s| s > 0),
            "invalid layer sizes {sizes:?}"
        );
        let layers = sizes.windows(2).map(|w| Layer::xavier(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(
            sizes.len() >= 2 && sizes.iter().all(|&s| s > 0),
            "invalid layer sizes {sizes:?}"
        );
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self { layers, hidden, output }
    }

    pub fn from_layers(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::Architecture("no layers".into()));
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(NeuralError::Architecture(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(NeuralError::Architecture(format!(
                    "layer output {} feeds input {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Self { layers, hidden, output })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn activations(&self) -> (Activation, Activation) {
        (self.hidden, self.output)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|p| p.is_finite())
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.hidden == other.hidden
            && self.output == other.output
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache, NeuralError> {
        if x.len() != self.input_size() {
            return Err(NeuralError::Dimension {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("network input"));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&current, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: current,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(x)?.output)
    }

    /// Adds the parameter gradients of an objective with output gradient
    /// `grad_output` into `grads`, and returns the gradient with respect to
    /// the network input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>, NeuralError> {
        if !grads.matches(self) {
            return Err(NeuralError::Architecture(
                "gradient shape does not match network".into(),
            ));
        }
        self.propagate(cache, grad_output, Some(grads))
    }

    /// Fresh parameter gradients plus the input gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<(Gradients, Vec<f64>), NeuralError> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.propagate(cache, grad_output, Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// Input gradient only, without touching parameter gradients.
    pub fn input_gradient(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.propagate(cache, grad_output, None)
    }

    fn propagate(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        mut grads: Option<&mut Gradients>,
    ) -> Result<Vec<f64>, NeuralError> {
        if cache.pre.len() != self.layers.len()
            || cache.inputs.iter().zip(&self.layers).any(|(x, l)| x.len() != l.inputs)
            || cache.pre.iter().zip(&self.layers).any(|(z, l)| z.len() != l.outputs)
        {
            return Err(NeuralError::Architecture("cache shape does not match network".into()));
        }
        if grad_output.len() != self.output_size() {
            return Err(NeuralError::Dimension {
                expected: self.output_size(),
                got: grad_output.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = grad_output
            .iter()
            .zip(&cache.pre[last])
            .zip(&cache.output)
            .map(|((g, &z), &a)| g * self.output.derivative(z, a))
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &cache.inputs[l];
            let mut dx = vec![0.0; layer.inputs];
            let rows = delta.iter().zip(layer.weights.chunks_exact(layer.inputs));
            match grads.as_deref_mut() {
                Some(g) => {
                    let g = &mut g.layers[l];
                    for (o, (&d, row)) in rows.enumerate() {
                        g.bias[o] += d;
                        if d == 0.0 {
                            continue;
                        }
                        let grow = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for ((gw, xi), (w, dxi)) in grow.iter_mut().zip(x).zip(row.iter().zip(dx.iter_mut())) {
                            *gw += d * xi;
                            *dxi += d * w;
                        }
                    }
                }
                None => {
                    for (&d, row) in rows {
                        if d == 0.0 {
                            continue;
                        }
                        for (w, dxi) in row.iter().zip(dx.iter_mut()) {
                            *dxi += d * w;
                        }
                    }
                }
            }
            if l == 0 {
                return Ok(dx);
            }
            // `x` is this layer's input, i.e. the previous layer's activation
            delta = dx
                .iter()
                .zip(&cache.pre[l - 1])
                .zip(x)
                .map(|((g, &z), &a)| g * self.hidden.derivative(z, a))
                .collect();
        }
        unreachable!("loop returns at layer 0")
    }

    /// `target ← tau·online + (1 − tau)·target`, elementwise.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<(), NeuralError> {
        if !self.same_architecture(online) {
            return Err(NeuralError::Architecture(format!(
                "soft update between {:?} and {:?}",
                self.sizes(),
                online.sizes()
            )));
        }
        for (t, o) in self.parameters_mut().zip(online.parameters()) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NeuralError> {
    target.soft_update_from(online, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Non-finite gradients leave both the
    /// network and this state untouched.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NeuralError> {
        if !grads.matches(net) || !self.first.matches(net) {
            return Err(NeuralError::Architecture(
                "gradient shape does not match network".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(NeuralError::NonFinite("gradient"));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let params = net.parameters_mut();
        let moments = self.first.values_mut().zip(self.second.values_mut());
        for ((p, g), (m, v)) in params.zip(grads.values()).zip(moments) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<(), NeuralError> {
    state.step(net, grads)
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because a ±h perturbation crosses a ReLU kink.
    pub excluded: usize,
    pub passed: bool,
}

/// Magnitude below which gradient differences are compared absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR)
}

fn gate_pattern(net: &Mlp, cache: &ForwardCache) -> Vec<i8> {
    let hidden_layers = net.layers.len() - 1;
    let mut out = Vec::new();
    let mut record = |z: f64, act: Activation| {
        if act == Activation::Relu {
            out.push(if z > 0.0 {
                1
            } else if z < 0.0 {
                -1
            } else {
                0
            });
        }
    };
    for (l, pre) in cache.pre.iter().enumerate() {
        let act = if l < hidden_layers { net.hidden } else { net.output };
        pre.iter().for_each(|&z| record(z, act));
    }
    out
}

/// Checks every parameter's gradient of `objective(net(x))` against central
/// differences with step `h`. `objective` returns the value and its
/// gradient with respect to the network output.
pub fn gradient_check<F>(
    net: &Mlp,
    x: &[f64],
    objective: F,
    h: f64,
    tolerance: f64,
) -> Result<GradientReport, NeuralError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let cache = net.forward(x)?;
    let (_, grad_out) = objective(cache.output());
    let (grads, _) = net.backward(&cache, &grad_out)?;
    let analytic: Vec<f64> = grads.values().copied().collect();
    let base_gates = gate_pattern(net, &cache);

    let mut probe = net.clone();
    let mut max_err: f64 = 0.0;
    let (mut checked, mut excluded) = (0, 0);
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.parameters().nth(i).expect("index within parameter count");
        let mut eval = |value: f64| -> Result<(f64, Vec<i8>), NeuralError> {
            *probe.parameters_mut().nth(i).expect("index within parameter count") = value;
            let c = probe.forward(x)?;
            Ok((objective(c.output()).0, gate_pattern(&probe, &c)))
        };
        let (plus, gates_plus) = eval(original + h)?;
        let (minus, gates_minus) = eval(original - h)?;
        eval(original)?;
        let at_kink = base_gates.contains(&0) && (gates_plus != base_gates || gates_minus != base_gates);
        if gates_plus != gates_minus || at_kink {
            excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        max_err = max_err.max(relative_error(a, numeric));
        checked += 1;
    }
    Ok(GradientReport {
        max_relative_error: max_err,
        checked,
        excluded,
        passed: max_err < tolerance,
    })
}

/// `0.5·‖y − target‖²` and its gradient.
pub fn squared_error_objective(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    move |y: &[f64]| {
        let diff: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
    }
}
