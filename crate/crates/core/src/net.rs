//! Small tanh MLPs with hand-written backpropagation, a state-independent
//! diagonal Gaussian policy head, a value head, and Adam.
//!
//! Weights of a layer are stored row-major as `in × out`, so that
//! `z[j] = b[j] + Σ_i x[i] · w[i * out + j]`. The sum runs over `i` in
//! order for every output, in both the single-sample and batched paths,
//! which makes them bit-identical.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub const LOG_STD_MIN: f64 = -9.210_340_371_976_184; // ln 1e-4
pub const LOG_STD_MAX: f64 = 4.605_170_185_988_092; // ln 1e2

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Fully connected network; tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer for a batch, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    n: usize,
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output layer")
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

fn layer_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    let width = out.len();
    for (xi, row) in x.iter().zip(w.chunks_exact(width)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

impl Mlp {
    /// Zero-initialized network with the given layer widths.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// Orthogonal init: gain `hidden_gain` on hidden layers and
    /// `output_gain` on the last layer (0 gives an all-zero output layer).
    /// Biases start at zero.
    pub fn orthogonal(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut Rng) -> Self {
        let mut net = Self::zeros(sizes);
        let last = net.num_layers() - 1;
        for l in 0..net.num_layers() {
            let gain = if l == last { output_gain } else { hidden_gain };
            if gain == 0.0 {
                continue;
            }
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let w = orthogonal_matrix(fan_in, fan_out, rng);
            let (wl, _) = net.layer_mut(l);
            for (dst, src) in wl.iter_mut().zip(w) {
                *dst = gain * src;
            }
        }
        net
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument("network needs at least two non-empty layers".into()));
        }
        if params.len() != n {
            return Err(Error::Shape {
                what: "network parameters".into(),
                expected: n,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.params[off..].split_at(i * o);
        (w, &rest[..o])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.params[off..].split_at_mut(i * o);
        (w, &mut rest[..o])
    }

    fn check_input(&self, len: usize, n: usize) -> Result<()> {
        if len != n * self.input_dim() {
            return Err(Error::Shape {
                what: "network input".into(),
                expected: n * self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len(), 1)?;
        Ok(self.forward_batch(x, 1)?.acts.pop().unwrap())
    }

    /// Forward pass over `n` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<Trace> {
        self.check_input(x.len(), n)?;
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let mut out = vec![0.0; n * fo];
            let input = &acts[l];
            for (xr, orow) in input.chunks_exact(fi).zip(out.chunks_exact_mut(fo)) {
                layer_forward(xr, w, b, orow);
            }
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Ok(Trace { n, acts })
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output` for the batch.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(d_out.len(), trace.n * self.output_dim());
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let input = &trace.acts[l];
            {
                let (gw, rest) = grad[off..].split_at_mut(fi * fo);
                let gb = &mut rest[..fo];
                for (xr, dr) in input.chunks_exact(fi).zip(delta.chunks_exact(fo)) {
                    for (xi, grow) in xr.iter().zip(gw.chunks_exact_mut(fo)) {
                        for (g, d) in grow.iter_mut().zip(dr) {
                            *g += xi * d;
                        }
                    }
                    for (g, d) in gb.iter_mut().zip(dr) {
                        *g += d;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Back through W, then through tanh of the previous layer.
            let (w, _) = self.layer(l);
            let mut wt = vec![0.0; fi * fo];
            for i in 0..fi {
                for j in 0..fo {
                    wt[j * fi + i] = w[i * fo + j];
                }
            }
            let mut prev = vec![0.0; trace.n * fi];
            for ((dr, pr), ar) in delta
                .chunks_exact(fo)
                .zip(prev.chunks_exact_mut(fi))
                .zip(input.chunks_exact(fi))
            {
                for (dj, wrow) in dr.iter().zip(wt.chunks_exact(fi)) {
                    for (p, wji) in pr.iter_mut().zip(wrow) {
                        *p += dj * wji;
                    }
                }
                for (p, a) in pr.iter_mut().zip(ar) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
    }
}

/// `rows × cols` matrix (row-major) whose rows or columns, whichever are
/// fewer, are orthonormal.
fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for (idx, u) in basis.iter().enumerate() {
        for (jdx, &val) in u.iter().enumerate() {
            if rows <= cols {
                m[idx * cols + jdx] = val;
            } else {
                m[jdx * cols + idx] = val;
            }
        }
    }
    m
}

/// Provenance stored alongside serialized networks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub seed: u64,
    pub task: String,
    pub method: String,
    /// Stage that produced the network, e.g. `teacher-2` or `student`.
    pub created: String,
}

/// Diagonal Gaussian with MLP mean and state-independent `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub meta: PolicyMeta,
}

/// Gradient buffer congruent with a [`GaussianPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl PolicyGrad {
    pub fn scale(&mut self, s: f64) {
        self.mean.iter_mut().chain(self.log_std.iter_mut()).for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &PolicyGrad) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.log_std.iter_mut().zip(&other.log_std) {
            *a += b;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.mean.iter().chain(&self.log_std).copied().collect()
    }
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl GaussianPolicy {
    /// Hidden layers get gain √2, the output layer is zero so the initial
    /// mean action is exactly zero; `log_std` starts at 0 (unit variance).
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        Self {
            mean: Mlp::orthogonal(&layer_sizes(obs_dim, hidden, act_dim), 2f64.sqrt(), 0.0, rng),
            log_std: vec![0.0; act_dim],
            meta: PolicyMeta::default(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.mean.params().len() + self.log_std.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Mean action and standard deviation for one observation.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.mean.forward(obs)?, self.std()))
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(obs)
    }

    /// Draws `a = μ + σ ε` and returns it with its log-density.
    pub fn sample(&self, obs: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean.forward(obs)?;
        let action: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = log_prob_with_log_std(&mu, &self.log_std, &action);
        Ok((action, lp))
    }

    pub fn zero_grad(&self) -> PolicyGrad {
        PolicyGrad {
            mean: vec![0.0; self.mean.params().len()],
            log_std: vec![0.0; self.log_std.len()],
        }
    }

    /// Backprop of `∂L/∂mean` (batch × act) and `∂L/∂log_std` into `grad`.
    pub fn backward(&self, trace: &Trace, d_mean: &[f64], d_log_std: &[f64], grad: &mut PolicyGrad) {
        self.mean.backward(trace, d_mean, &mut grad.mean);
        for (g, d) in grad.log_std.iter_mut().zip(d_log_std) {
            *g += d;
        }
    }

    /// Adam step followed by clamping `exp(log_std)` into `[1e-4, 1e2]`.
    pub fn adam_update(&mut self, grad: &PolicyGrad, opt: &mut Adam, lr: f64) -> Result<()> {
        opt.step(
            &mut [self.mean.params_mut(), &mut self.log_std],
            &[&grad.mean, &grad.log_std],
            lr,
        )?;
        for l in &mut self.log_std {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(())
    }

    /// Parameter vector (mean net, then `log_std`).
    pub fn flat_params(&self) -> Vec<f64> {
        self.mean.params().iter().chain(&self.log_std).copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let n = self.mean.params().len();
        self.mean.params_mut().copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.num_params())
    }
}

/// State-value network `obs → ℝ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        Self {
            net: Mlp::orthogonal(&layer_sizes(obs_dim, hidden, 1), 2f64.sqrt(), 1.0, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.forward(obs)?[0])
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.net.params().len())
    }

    pub fn adam_update(&mut self, grad: &[f64], opt: &mut Adam, lr: f64) -> Result<()> {
        opt.step(&mut [self.net.params_mut()], &[grad], lr)
    }
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8 and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates the concatenation of `params` in place. Rejects the whole
    /// step, leaving parameters and moments untouched, if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.m.len() || params.iter().map(|p| p.len()).sum::<usize>() != total {
            return Err(Error::Shape {
                what: "adam state".into(),
                expected: self.m.len(),
                got: total,
            });
        }
        if let Some((k, g)) = grads
            .iter()
            .flat_map(|g| g.iter())
            .enumerate()
            .find(|(_, g)| !g.is_finite())
        {
            return Err(Error::NonFinite(format!("gradient entry {k} is {g}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// `Σ_d [−(a−μ)²/(2σ²) − ln σ − ½ ln 2π]`.
pub fn gaussian_log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}

pub fn log_prob_with_log_std(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// `KL(p ‖ q)` for diagonal Gaussians.
pub fn gaussian_kl(p: (&[f64], &[f64]), q: (&[f64], &[f64])) -> f64 {
    let (mp, sp) = p;
    let (mq, sq) = q;
    mp.iter()
        .zip(sp)
        .zip(mq.iter().zip(sq))
        .map(|((mp, sp), (mq, sq))| {
            let d = mp - mq;
            (sq / sp).ln() + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5
        })
        .sum()
}

/// `Σ_d (½ ln 2πe + ln σ_d)`.
pub fn gaussian_entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + s.ln()).sum()
}

/// KL(teacher ‖ student) per dimension, with its derivatives w.r.t. the
/// student mean and student log-std. Shared by distillation and the
/// peer-to-peer regularizer.
pub fn kl_and_student_grads(
    mp: f64,
    log_sp: f64,
    mq: f64,
    log_sq: f64,
) -> (f64, f64, f64) {
    let sp2 = (2.0 * log_sp).exp();
    let inv_sq2 = (-2.0 * log_sq).exp();
    let d = mq - mp;
    let ratio = (sp2 + d * d) * inv_sq2;
    let kl = log_sq - log_sp + 0.5 * ratio - 0.5;
    (kl, d * inv_sq2, 1.0 - ratio)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    w: Vec<f64>,
    b: Vec<f64>,
}

/// On-disk layout of a policy or value network.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    obs_dim: usize,
    act_dim: usize,
    hidden: Vec<usize>,
    activation: String,
    layers: Vec<LayerDoc>,
    log_std: Vec<f64>,
    meta: PolicyMeta,
}

fn net_to_doc(net: &Mlp, log_std: &[f64], meta: &PolicyMeta) -> NetDoc {
    let s = net.sizes();
    NetDoc {
        obs_dim: s[0],
        act_dim: *s.last().unwrap(),
        hidden: s[1..s.len() - 1].to_vec(),
        activation: "tanh".into(),
        layers: (0..net.num_layers())
            .map(|l| {
                let (w, b) = net.layer(l);
                LayerDoc { w: w.to_vec(), b: b.to_vec() }
            })
            .collect(),
        log_std: log_std.to_vec(),
        meta: meta.clone(),
    }
}

fn doc_to_net(doc: NetDoc) -> Result<(Mlp, Vec<f64>, PolicyMeta)> {
    if doc.activation != "tanh" {
        return Err(Error::InvalidArgument(format!("unsupported activation `{}`", doc.activation)));
    }
    let sizes = layer_sizes(doc.obs_dim, &doc.hidden, doc.act_dim);
    if doc.layers.len() != sizes.len() - 1 {
        return Err(Error::Shape {
            what: "layer count".into(),
            expected: sizes.len() - 1,
            got: doc.layers.len(),
        });
    }
    let mut params = Vec::new();
    for (l, layer) in doc.layers.into_iter().enumerate() {
        if layer.w.len() != sizes[l] * sizes[l + 1] || layer.b.len() != sizes[l + 1] {
            return Err(Error::Shape {
                what: format!("layer {l}"),
                expected: sizes[l] * sizes[l + 1] + sizes[l + 1],
                got: layer.w.len() + layer.b.len(),
            });
        }
        params.extend(layer.w);
        params.extend(layer.b);
    }
    Ok((Mlp::from_parts(sizes, params)?, doc.log_std, doc.meta))
}

impl GaussianPolicy {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&net_to_doc(&self.mean, &self.log_std, &self.meta))
            .expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDoc = serde_json::from_str(text)?;
        let (mean, log_std, meta) = doc_to_net(doc)?;
        if log_std.len() != mean.output_dim() {
            return Err(Error::Shape {
                what: "log_std".into(),
                expected: mean.output_dim(),
                got: log_std.len(),
            });
        }
        if log_std.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("log_std".into()));
        }
        Ok(Self { mean, log_std, meta })
    }
}

impl ValueNet {
    pub fn to_json(&self, meta: &PolicyMeta) -> String {
        serde_json::to_string(&net_to_doc(&self.net, &[], meta)).expect("value net serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDoc = serde_json::from_str(text)?;
        let (net, _, _) = doc_to_net(doc)?;
        Ok(Self { net })
    }
}
