//! Minimal differentiable fully connected networks on flat f64 parameter
//! vectors, with exact reverse-mode gradients, stochastic policy heads, plain
//! SGD and adaptive-moment optimizers, and a binary checkpoint format.
//!
//! Everything here is deterministic: the same parameters and inputs produce
//! bit-identical outputs, and sampling consumes a caller-provided RNG.

use crate::error::{Error, Result};
use rand::Rng;
use std::io::{Read, Write};

/// Layer activation. Hidden layers use Tanh; output layers choose between
/// Identity (regression / logits), Relu (nonnegative outputs), and Softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
    Softmax,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
            Activation::Relu => 2,
            Activation::Softmax => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            2 => Activation::Relu,
            3 => Activation::Softmax,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown activation tag {other}"
                )))
            }
        })
    }
}

/// A fully connected network. Parameters are stored flat, layer by layer,
/// each layer as a row-major weight block followed by its bias block.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Reusable forward/backward scratch space for one network.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Net {
    /// Build a network with the given layer widths (input first), Tanh hidden
    /// activations, and the chosen output activation. Parameters start at 0.
    pub fn new(widths: &[usize], output: Activation) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "zero-width layer");
        let mut activations = vec![Activation::Tanh; widths.len() - 1];
        *activations.last_mut().unwrap() = output;
        let params = vec![0.0; Self::count_params(widths)];
        Net {
            widths: widths.to_vec(),
            activations,
            params,
        }
    }

    fn count_params(widths: &[usize]) -> usize {
        widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable view of the output-layer bias block, for head initialization.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let last_in = self.widths[self.widths.len() - 2];
        let last_out = *self.widths.last().unwrap();
        let end = self.params.len();
        let start = end - last_out;
        let _ = last_in;
        &mut self.params[start..end]
    }

    /// Number of weight layers (affine maps) in the network.
    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Mutable views of one layer's weight and bias blocks, for head
    /// initialization. Weights are row-major: row `i` holds the incoming
    /// weights of output unit `i`.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        assert!(layer < self.widths.len() - 1, "layer index out of range");
        let mut offset = 0;
        for l in 0..layer {
            offset += (self.widths[l] + 1) * self.widths[l + 1];
        }
        let (n_in, n_out) = (self.widths[layer], self.widths[layer + 1]);
        let block = &mut self.params[offset..offset + (n_in + 1) * n_out];
        block.split_at_mut(n_in * n_out)
    }

    /// Xavier-uniform initialization; `output_scale` shrinks the final layer
    /// (small initial logits / means make early policies near-uniform).
    pub fn init_xavier<R: Rng>(&mut self, rng: &mut R, output_scale: f64) {
        let mut offset = 0;
        let n_layers = self.widths.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == n_layers - 1 {
                bound *= output_scale;
            }
            for w in &mut self.params[offset..offset + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
            offset += fan_in * fan_out;
            for b in &mut self.params[offset..offset + fan_out] {
                *b = 0.0;
            }
            offset += fan_out;
        }
    }

    /// Forward pass into a fresh output vector.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::default();
        self.forward_into(input, &mut ws);
        ws.acts.last().unwrap().clone()
    }

    /// Forward pass that records every layer activation in `ws` so a
    /// backward pass can follow. Returns the output slice.
    pub fn forward_into<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        assert_eq!(input.len(), self.widths[0], "input width mismatch");
        if ws.acts.len() != self.widths.len() {
            ws.acts = self.widths.iter().map(|&w| vec![0.0; w]).collect();
            ws.deltas = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        }
        ws.acts[0].copy_from_slice(input);
        let mut offset = 0;
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let out = &mut rest[0];
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            for i in 0..n_out {
                let row = &weights[i * n_in..(i + 1) * n_in];
                let mut acc = biases[i];
                for j in 0..n_in {
                    acc += row[j] * x[j];
                }
                out[i] = acc;
            }
            match self.activations[l] {
                Activation::Tanh => {
                    for v in out.iter_mut() {
                        *v = v.tanh();
                    }
                }
                Activation::Identity => {}
                Activation::Relu => {
                    for v in out.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                Activation::Softmax => {
                    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in out.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in out.iter_mut() {
                        *v /= sum;
                    }
                }
            }
            offset += (n_in + 1) * n_out;
        }
        ws.acts.last().unwrap()
    }

    /// Reverse-mode pass. `ws` must hold the activations of a forward pass on
    /// this network; `cotangent` is dL/d(output). Accumulates `scale` times
    /// the parameter gradient of L into `grad` (length `param_count`).
    pub fn backward(&self, ws: &mut Workspace, cotangent: &[f64], scale: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer mismatch");
        assert_eq!(cotangent.len(), self.output_width());
        let n_layers = self.widths.len() - 1;
        // Delta of the last layer from the output cotangent.
        {
            let out = &ws.acts[n_layers];
            let delta = &mut ws.deltas[n_layers];
            match self.activations[n_layers - 1] {
                Activation::Tanh => {
                    for i in 0..out.len() {
                        delta[i] = cotangent[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Activation::Identity => delta.copy_from_slice(cotangent),
                Activation::Relu => {
                    for i in 0..out.len() {
                        delta[i] = if out[i] > 0.0 { cotangent[i] } else { 0.0 };
                    }
                }
                Activation::Softmax => {
                    let dot: f64 = (0..out.len()).map(|i| cotangent[i] * out[i]).sum();
                    for i in 0..out.len() {
                        delta[i] = out[i] * (cotangent[i] - dot);
                    }
                }
            }
        }
        // Walk backwards through the layers.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += (self.widths[l] + 1) * self.widths[l + 1];
        }
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let offset = offsets[l];
            {
                let x = &ws.acts[l];
                let delta = &ws.deltas[l + 1];
                let gw = &mut grad[offset..offset + n_in * n_out];
                for i in 0..n_out {
                    let d = delta[i] * scale;
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * n_in..(i + 1) * n_in];
                    for j in 0..n_in {
                        row[j] += d * x[j];
                    }
                }
                let gb = &mut grad[offset + n_in * n_out..offset + n_in * n_out + n_out];
                for i in 0..n_out {
                    gb[i] += delta[i] * scale;
                }
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous layer through W^T, then through the
            // previous activation (always Tanh on hidden layers).
            let weights = &self.params[offset..offset + n_in * n_out];
            let (lower, upper) = ws.deltas.split_at_mut(l + 1);
            let prev_delta = &mut lower[l];
            let delta = &upper[0];
            let prev_act = &ws.acts[l];
            for j in 0..n_in {
                let mut acc = 0.0;
                for i in 0..n_out {
                    acc += weights[i * n_in + j] * delta[i];
                }
                let a = prev_act[j];
                prev_delta[j] = match self.activations[l - 1] {
                    Activation::Tanh => acc * (1.0 - a * a),
                    Activation::Identity => acc,
                    Activation::Relu => {
                        if a > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Softmax => unreachable!("softmax below the top layer"),
                };
            }
        }
    }

    /// Write the network in the binary checkpoint layout: a header with the
    /// format version, layer widths, activation tags, and parameter count,
    /// followed by the parameters as little-endian f64.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(b"NNET")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &w in &self.widths {
            out.write_all(&(w as u32).to_le_bytes())?;
        }
        for &a in &self.activations {
            out.write_all(&[a.tag()])?;
        }
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for &p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a network written by `write_to`, validating the header.
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"NNET" {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        input.read_exact(&mut u32buf)?;
        let n_widths = u32::from_le_bytes(u32buf) as usize;
        if !(2..=64).contains(&n_widths) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_widths}")));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            input.read_exact(&mut u32buf)?;
            widths.push(u32::from_le_bytes(u32buf) as usize);
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Checkpoint("zero layer width".into()));
        }
        let mut activations = Vec::with_capacity(n_widths - 1);
        for _ in 0..n_widths - 1 {
            let mut tag = [0u8; 1];
            input.read_exact(&mut tag)?;
            activations.push(Activation::from_tag(tag[0])?);
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != Self::count_params(&widths) {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match widths {widths:?}"
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for _ in 0..count {
            input.read_exact(&mut f64buf)?;
            params.push(f64::from_le_bytes(f64buf));
        }
        Ok(Net {
            widths,
            activations,
            params,
        })
    }
}

/// Plain SGD or adaptive-moment descent over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Change the learning rate in place (moment estimates are kept), so a
    /// training loop can anneal its step sizes.
    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr } => *lr = new_lr,
            Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let b1t = 1.0 - beta1.powi(*t as i32);
                let b2t = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mhat = m[i] / b1t;
                    let vhat = v[i] / b2t;
                    params[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stochastic heads
// ---------------------------------------------------------------------------

/// Log-probabilities of a categorical distribution given unnormalized logits.
pub fn categorical_log_probs(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// Log-probability of class `k` under the given logits.
pub fn categorical_log_prob(logits: &[f64], k: usize) -> f64 {
    logits[k] - log_sum_exp(logits)
}

/// Gradient of `categorical_log_prob(logits, k)` with respect to the logits:
/// one_hot(k) - softmax(logits). Written into `out`.
pub fn categorical_dlog_prob(logits: &[f64], k: usize, out: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for (i, o) in out.iter_mut().enumerate() {
        *o = -((logits[i] - lse).exp());
    }
    out[k] += 1.0;
}

/// Sample a class index by inverse CDF over softmax probabilities.
pub fn sample_categorical<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let lse = log_sum_exp(logits);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        acc += (l - lse).exp();
        if u < acc {
            return i;
        }
    }
    logits.len() - 1
}

/// Index of the largest logit (deterministic action).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Clamp bounds for policy log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// A Gaussian squashed onto [lo, hi] through s = sigmoid(2z) (the shifted
/// tanh) and an optional power warp: a = lo + (hi - lo) * s^warp.
///
/// `warp = 1` is the plain tanh squash. Larger warps spread resolution toward
/// the lower end of the range, which keeps gradients alive when useful
/// actions sit orders of magnitude below the cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquashedGaussian {
    pub lo: f64,
    pub hi: f64,
    pub warp: f64,
}

impl SquashedGaussian {
    pub fn new(lo: f64, hi: f64) -> Self {
        SquashedGaussian { lo, hi, warp: 1.0 }
    }

    pub fn with_warp(lo: f64, hi: f64, warp: f64) -> Self {
        assert!(hi > lo && warp >= 1.0);
        SquashedGaussian { lo, hi, warp }
    }

    /// Map a pre-squash sample z to the bounded action.
    pub fn action(&self, z: f64) -> f64 {
        let s = 0.5 * (z.tanh() + 1.0);
        self.lo + (self.hi - self.lo) * s.powf(self.warp)
    }

    /// Draw z ~ N(mean, exp(clamped log_std)) and return (action, z).
    pub fn sample<R: Rng>(&self, mean: f64, log_std: f64, rng: &mut R) -> (f64, f64) {
        let std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
        let noise: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        let z = mean + std * noise;
        (self.action(z), z)
    }

    /// Deterministic action: the squashed mean.
    pub fn mean_action(&self, mean: f64) -> f64 {
        self.action(mean)
    }

    /// Log-density of the bounded action at squash input z, under
    /// N(mean, exp(clamped log_std)) and the change of variables through the
    /// squash: log N(z) - log |da/dz|.
    pub fn log_prob(&self, mean: f64, log_std: f64, z: f64) -> f64 {
        let ls = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let std = ls.exp();
        let t = (z - mean) / std;
        let log_normal = -0.5 * t * t - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // log|da/dz| = log(hi-lo) + log(warp) + log 2 + warp*log s + log(1-s),
        // with log s = -softplus(-2z) and log(1-s) = -softplus(2z).
        let log_jac = (self.hi - self.lo).ln() + self.warp.ln() + std::f64::consts::LN_2
            - self.warp * softplus(-2.0 * z)
            - softplus(2.0 * z);
        log_normal - log_jac
    }

    /// Partial derivatives of `log_prob` with respect to the raw (unclamped)
    /// mean and log_std outputs. The clamp gates the log_std gradient.
    pub fn dlog_prob(&self, mean: f64, log_std: f64, z: f64) -> (f64, f64) {
        let ls = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let std = ls.exp();
        let t = (z - mean) / std;
        let dmean = t / std;
        let dls = if (LOG_STD_MIN..LOG_STD_MAX).contains(&log_std) {
            t * t - 1.0
        } else {
            0.0
        };
        (dmean, dls)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        0.0
    } else {
        x.exp().ln_1p()
    }
}
