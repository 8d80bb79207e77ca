//! A small multilayer perceptron with hand-written backpropagation and Adam.
//!
//! Activations flow as `features × samples` matrices, matching the column
//! convention of [`crate::coding_rate::RepBatch`]. `backward` accepts an
//! arbitrary upstream gradient on the output so coding-rate gradients can be
//! pushed through the encoder, and returns the gradient with respect to the
//! input so they can also be pushed through the discriminator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward trace does not match the network ({0})")]
    StaleTrace(String),
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Magic string written at the top of every network checkpoint.
pub const CHECKPOINT_MAGIC: &str = "ratefair-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
        }
    }

    pub fn activation(kind: LayerKind, dim: usize) -> Self {
        LayerSpec {
            kind,
            in_dim: dim,
            out_dim: dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl From<Activation> for LayerKind {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => LayerKind::Relu,
            Activation::Tanh => LayerKind::Tanh,
        }
    }
}

/// Weight (`out × in`) and bias (`out`) of a linear layer. Also used for the
/// matching gradients and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearParams {
    fn zeros_like(other: &LinearParams) -> Self {
        LinearParams {
            weight: Matrix::zeros(other.weight.rows(), other.weight.cols()),
            bias: vec![0.0; other.bias.len()],
        }
    }

    fn same_shape(&self, other: &LinearParams) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }
}

/// Per-layer parameter gradients; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<LinearParams>>);

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrads(
            net.params
                .iter()
                .map(|p| p.as_ref().map(LinearParams::zeros_like))
                .collect(),
        )
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(NnError::ShapeMismatch("gradient layer counts differ".into()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    a.weight.add_scaled(&b.weight, 1.0)?;
                    for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                        *x += y;
                    }
                }
                (None, None) => {}
                _ => return Err(NnError::ShapeMismatch("gradient layouts differ".into())),
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.0.iter_mut().flatten() {
            for w in p.weight.as_mut_slice() {
                *w *= s;
            }
            for b in &mut p.bias {
                *b *= s;
            }
        }
    }

    /// All entries in the same order as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.0.iter().flatten() {
            out.extend_from_slice(p.weight.as_slice());
            out.extend_from_slice(&p.bias);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Option<LinearParams>>,
    pub second: Vec<Option<LinearParams>>,
}

/// Layer inputs retained by [`Network::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Option<LinearParams>>,
    adam: AdamState,
}

impl Network {
    /// Builds a network from a layer stack with Kaiming-uniform weights
    /// (bound `√(6/fan_in)`) and biases uniform in `±1/√fan_in`.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidSpec("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::InvalidSpec(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(NnError::InvalidSpec(format!("layer {i} has a zero dimension")));
            }
            if l.kind != LayerKind::Linear && l.in_dim != l.out_dim {
                return Err(NnError::InvalidSpec(format!("activation layer {i} changes width")));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Option<LinearParams>> = layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Linear => {
                    let fan_in = l.in_dim as f64;
                    let wb = (6.0 / fan_in).sqrt();
                    let bb = 1.0 / fan_in.sqrt();
                    let weight = Matrix::from_fn(l.out_dim, l.in_dim, |_, _| rng.gen_range(-wb..wb));
                    let bias = (0..l.out_dim).map(|_| rng.gen_range(-bb..bb)).collect();
                    Some(LinearParams { weight, bias })
                }
                _ => None,
            })
            .collect();
        let zeros: Vec<Option<LinearParams>> = params
            .iter()
            .map(|p| p.as_ref().map(LinearParams::zeros_like))
            .collect();
        Ok(Network {
            layers,
            params,
            adam: AdamState {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        })
    }

    /// Linear layers through `dims`, with `act` between consecutive linear
    /// layers and no activation after the last one.
    pub fn mlp(dims: &[usize], act: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnError::InvalidSpec("an MLP needs at least input and output widths".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(LayerSpec::linear(pair[0], pair[1]));
            if i + 2 < dims.len() {
                layers.push(LayerSpec::activation(act.into(), pair[1]));
            }
        }
        Network::new(layers, seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LinearParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LinearParams>] {
        &mut self.params
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.as_slice().len() + p.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.as_slice());
            out.extend_from_slice(&p.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            let w = p.weight.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = p.bias.len();
            p.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// Runs the network on a `in_dim × n` batch.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.rows() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.rows(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (spec, param) in self.layers.iter().zip(&self.params) {
            let next = apply_layer(spec, param.as_ref(), &h)?;
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardTrace { inputs }))
    }

    /// Forward pass without keeping a trace.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.rows(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for (spec, param) in self.layers.iter().zip(&self.params) {
            h = apply_layer(spec, param.as_ref(), &h)?;
        }
        Ok(h)
    }

    /// Backpropagates `grad_out` (shape of the forward output) and returns the
    /// parameter gradients plus the gradient with respect to the input.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<(ParamGrads, Matrix)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(NnError::StaleTrace(format!(
                "trace has {} layers, network has {}",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, (spec, input)) in self.layers.iter().zip(&trace.inputs).enumerate() {
            if input.rows() != spec.in_dim {
                return Err(NnError::StaleTrace(format!(
                    "layer {i} input has {} rows, expected {}",
                    input.rows(),
                    spec.in_dim
                )));
            }
        }
        let n = trace.inputs[0].cols();
        if grad_out.shape() != (self.output_dim(), n) {
            return Err(NnError::ShapeMismatch(format!(
                "output gradient is {:?}, forward output was {:?}",
                grad_out.shape(),
                (self.output_dim(), n)
            )));
        }

        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            match self.layers[i].kind {
                LayerKind::Linear => {
                    let p = self.params[i].as_ref().expect("linear layer has parameters");
                    let weight = g.matmul_nt(input)?;
                    let bias = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    grads[i] = Some(LinearParams { weight, bias });
                    g = p.weight.matmul_tn(&g)?;
                }
                LayerKind::Relu => {
                    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                LayerKind::Tanh => {
                    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        let t = xv.tanh();
                        *gv *= 1.0 - t * t;
                    }
                }
            }
        }
        Ok((ParamGrads(grads), g))
    }

    /// One bias-corrected Adam update; the step counter always advances.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient layer count".into()));
        }
        for (g, p) in grads.0.iter().zip(&self.params) {
            match (g, p) {
                (Some(g), Some(p)) if g.same_shape(p) => {}
                (None, None) => {}
                _ => return Err(NnError::ShapeMismatch("gradient does not match parameters".into())),
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.0.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = self.params[i].as_mut().unwrap();
            let m = self.adam.first[i].as_mut().unwrap();
            let v = self.adam.second[i].as_mut().unwrap();
            adam_update(
                p.weight.as_mut_slice(),
                g.weight.as_slice(),
                m.weight.as_mut_slice(),
                v.weight.as_mut_slice(),
                cfg,
                c1,
                c2,
            );
            adam_update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, cfg, c1, c2);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            format: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        let text = serde_json::to_string(&doc).map_err(|e| NnError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let doc: Checkpoint = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
        if doc.format != CHECKPOINT_MAGIC {
            return Err(NnError::Format(format!("unexpected magic {:?}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!("unsupported version {}", doc.version)));
        }
        let net = doc.network;
        // re-validate the stack and shapes of whatever was on disk
        let fresh = Network::new(net.layers.clone(), 0)?;
        let ok = fresh.params.len() == net.params.len()
            && fresh.params.iter().zip(&net.params).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.same_shape(b),
                (None, None) => true,
                _ => false,
            });
        if !ok || net.adam.first.len() != net.params.len() || net.adam.second.len() != net.params.len() {
            return Err(NnError::Format("parameter shapes do not match layer specs".into()));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    network: Network,
}

fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    c1: f64,
    c2: f64,
) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn apply_layer(spec: &LayerSpec, param: Option<&LinearParams>, h: &Matrix) -> Result<Matrix> {
    Ok(match spec.kind {
        LayerKind::Linear => {
            let p = param.expect("linear layer has parameters");
            let mut out = p.weight.matmul(h)?;
            let n = out.cols();
            for (r, &b) in p.bias.iter().enumerate() {
                for v in &mut out.as_mut_slice()[r * n..(r + 1) * n] {
                    *v += b;
                }
            }
            out
        }
        LayerKind::Relu => h.map(|v| v.max(0.0)),
        LayerKind::Tanh => h.map(f64::tanh),
    })
}

/// Floor on column norms before projection.
const NORM_FLOOR: f64 = 1e-12;

/// Scales every column to unit Euclidean length; returns the projected batch
/// and the original norms for [`project_to_sphere_backward`].
pub fn project_to_sphere(h: &Matrix) -> (Matrix, Vec<f64>) {
    let norms: Vec<f64> = h.column_norms().into_iter().map(|n| n.max(NORM_FLOOR)).collect();
    let mut z = h.clone();
    let n = z.cols();
    for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
        *v /= norms[i % n];
    }
    (z, norms)
}

/// Gradient through `z = h / ‖h‖`: `(g − z (zᵀg)) / ‖h‖` per column.
pub fn project_to_sphere_backward(z: &Matrix, norms: &[f64], grad_z: &Matrix) -> Matrix {
    let (d, n) = z.shape();
    let mut proj = vec![0.0; n];
    for r in 0..d {
        for (c, p) in proj.iter_mut().enumerate() {
            *p += z[(r, c)] * grad_z[(r, c)];
        }
    }
    Matrix::from_fn(d, n, |r, c| (grad_z[(r, c)] - z[(r, c)] * proj[c]) / norms[c])
}

/// Mean softmax cross-entropy over the columns of `logits` (`classes × n`) and
/// its gradient.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (k, n) = logits.shape();
    assert_eq!(labels.len(), n);
    let mut grad = Matrix::zeros(k, n);
    let mut loss = 0.0;
    for c in 0..n {
        let max = (0..k).map(|r| logits[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..k).map(|r| (logits[(r, c)] - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - logits[(labels[c], c)];
        for r in 0..k {
            let p = (logits[(r, c)] - log_z).exp();
            grad[(r, c)] = (p - if r == labels[c] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Column-wise argmax, lowest index on ties.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..m.rows() {
                if m[(r, c)] > m[(best, c)] {
                    best = r;
                }
            }
            best
        })
        .collect()
}
