//! Fixed-window autoregressive policy with hand-derived gradients.
//!
//! The last `k` tokens of the history (left-padded with BOS) are embedded and
//! concatenated, passed through one tanh layer, and projected to vocabulary
//! logits:
//!
//! ```text
//! x      = [E[w_1]; ...; E[w_k]]
//! h      = tanh(W_h x + b_h)
//! logits = W_o h + b_o
//! ```
//!
//! The action distribution is the softmax of the logits with BOS masked out.
//! All gradients are computed in logit space first and then pushed through a
//! single shared backward pass.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::types::{Sequence, TokenId, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab_size: usize,
    pub bos: TokenId,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl PolicyDims {
    pub const DEFAULT_CONTEXT_WINDOW: usize = 4;
    pub const DEFAULT_EMBED_DIM: usize = 8;
    pub const DEFAULT_HIDDEN_DIM: usize = 16;

    pub fn new(vocab_size: usize, bos: TokenId) -> Self {
        Self {
            vocab_size,
            bos,
            context_window: Self::DEFAULT_CONTEXT_WINDOW,
            embed_dim: Self::DEFAULT_EMBED_DIM,
            hidden_dim: Self::DEFAULT_HIDDEN_DIM,
        }
    }

    fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    fn hidden_w_offset(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    fn hidden_b_offset(&self) -> usize {
        self.hidden_w_offset() + self.hidden_dim * self.input_dim()
    }

    fn out_w_offset(&self) -> usize {
        self.hidden_b_offset() + self.hidden_dim
    }

    fn out_b_offset(&self) -> usize {
        self.out_w_offset() + self.vocab_size * self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.out_b_offset() + self.vocab_size
    }
}

/// Policy parameters in one flat buffer; also used as the gradient type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    dims: PolicyDims,
    data: Vec<f64>,
}

impl PolicyParams {
    pub const INIT_STD: f64 = 0.1;

    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Gaussian(0, 0.1) initialization.
    pub fn init(dims: PolicyDims, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid std");
        Self {
            dims,
            data: (0..dims.param_count()).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn from_vec(dims: PolicyDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(Error::LengthMismatch {
                expected: dims.param_count(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn out_b_mut(&mut self) -> &mut [f64] {
        let o = self.dims.out_b_offset();
        &mut self.data[o..o + self.dims.vocab_size]
    }

    fn embedding(&self, token: TokenId) -> &[f64] {
        let e = self.dims.embed_dim;
        &self.data[token as usize * e..(token as usize + 1) * e]
    }
}

/// Frozen copy of the policy taken before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn snapshot(params: &PolicyParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub window: Vec<TokenId>,
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// The last `k` tokens of `history`, left-padded with BOS.
pub fn context_window(history: &[TokenId], dims: &PolicyDims) -> Vec<TokenId> {
    let k = dims.context_window;
    let take = history.len().min(k);
    let mut w = vec![dims.bos; k - take];
    w.extend_from_slice(&history[history.len() - take..]);
    w
}

pub fn forward(params: &PolicyParams, history: &[TokenId]) -> Forward {
    let dims = params.dims;
    let window = context_window(history, &dims);
    let mut input = Vec::with_capacity(dims.input_dim());
    for &t in &window {
        input.extend_from_slice(params.embedding(t));
    }
    let n_in = dims.input_dim();
    let hw = &params.data[dims.hidden_w_offset()..dims.hidden_b_offset()];
    let hb = &params.data[dims.hidden_b_offset()..dims.out_w_offset()];
    let hidden: Vec<f64> = (0..dims.hidden_dim)
        .map(|j| {
            let row = &hw[j * n_in..(j + 1) * n_in];
            (hb[j] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()).tanh()
        })
        .collect();
    let d = dims.hidden_dim;
    let ow = &params.data[dims.out_w_offset()..dims.out_b_offset()];
    let ob = &params.data[dims.out_b_offset()..];
    let logits = (0..dims.vocab_size)
        .map(|v| ob[v] + ow[v * d..(v + 1) * d].iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>())
        .collect();
    Forward {
        window,
        input,
        hidden,
        logits,
    }
}

/// Accumulates `scale * d(objective)/d(params)` into `grad`, given the
/// objective's derivative with respect to the logits.
pub fn backward(params: &PolicyParams, fwd: &Forward, dlogits: &[f64], scale: f64, grad: &mut PolicyParams) {
    let dims = params.dims;
    let d = dims.hidden_dim;
    let n_in = dims.input_dim();
    let e = dims.embed_dim;
    let (ow_off, ob_off) = (dims.out_w_offset(), dims.out_b_offset());
    let (hw_off, hb_off) = (dims.hidden_w_offset(), dims.hidden_b_offset());

    let mut dhidden = vec![0.0; d];
    for (v, &g) in dlogits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let g = g * scale;
        grad.data[ob_off + v] += g;
        let row = ow_off + v * d;
        for j in 0..d {
            grad.data[row + j] += g * fwd.hidden[j];
            dhidden[j] += g * params.data[row + j];
        }
    }
    let mut dinput = vec![0.0; n_in];
    for j in 0..d {
        let dpre = dhidden[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
        if dpre == 0.0 {
            continue;
        }
        grad.data[hb_off + j] += dpre;
        let row = hw_off + j * n_in;
        for i in 0..n_in {
            grad.data[row + i] += dpre * fwd.input[i];
            dinput[i] += dpre * params.data[row + i];
        }
    }
    for (slot, &tok) in fwd.window.iter().enumerate() {
        let base = tok as usize * e;
        for i in 0..e {
            grad.data[base + i] += dinput[slot * e + i];
        }
    }
}

/// Plain softmax over every logit, BOS included.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// Action distribution: softmax over every token except BOS.
#[derive(Clone, Debug)]
pub struct ActionDist {
    pub probs: Vec<f64>,
    /// `-inf` at BOS.
    pub log_probs: Vec<f64>,
    bos: usize,
}

impl ActionDist {
    pub fn from_logits(logits: &[f64], bos: TokenId) -> Self {
        let bos = bos as usize;
        let max = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != bos)
            .map(|(_, &z)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != bos)
                .map(|(_, &z)| (z - max).exp())
                .sum::<f64>()
                .ln();
        let log_probs: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &z)| if i == bos { f64::NEG_INFINITY } else { z - lse })
            .collect();
        let probs = log_probs.iter().map(|&l| l.exp()).collect();
        Self { probs, log_probs, bos }
    }

    fn sampleable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.probs.len()).filter(move |&i| i != self.bos)
    }

    pub fn entropy(&self) -> f64 {
        -self.sampleable().map(|i| self.probs[i] * self.log_probs[i]).sum::<f64>()
    }

    /// `KL(self || other)`, clamped at zero against rounding.
    pub fn kl(&self, other: &ActionDist) -> f64 {
        self.sampleable()
            .map(|i| self.probs[i] * (self.log_probs[i] - other.log_probs[i]))
            .sum::<f64>()
            .max(0.0)
    }

    /// d log p(action) / d logits.
    pub fn dlogits_log_prob(&self, action: TokenId) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[action as usize] += 1.0;
        g
    }

    /// dH / d logits = -p_j (log p_j + H).
    pub fn dlogits_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        let mut g = vec![0.0; self.probs.len()];
        for i in self.sampleable() {
            g[i] = -self.probs[i] * (self.log_probs[i] + h);
        }
        g
    }

    /// dKL(self || reference) / d logits = p_j (log p_j - log q_j - KL).
    pub fn dlogits_kl(&self, reference: &ActionDist) -> Vec<f64> {
        let kl: f64 = self
            .sampleable()
            .map(|i| self.probs[i] * (self.log_probs[i] - reference.log_probs[i]))
            .sum();
        let mut g = vec![0.0; self.probs.len()];
        for i in self.sampleable() {
            g[i] = self.probs[i] * (self.log_probs[i] - reference.log_probs[i] - kl);
        }
        g
    }

    /// Inverse-CDF draw; never returns BOS.
    pub fn sample(&self, rng: &mut Rng) -> TokenId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for i in self.sampleable() {
            if self.probs[i] > 0.0 {
                last = Some(i);
            }
            acc += self.probs[i];
            if u < acc && self.probs[i] > 0.0 {
                return i as TokenId;
            }
        }
        last.expect("a distribution with no sampleable mass") as TokenId
    }
}

pub fn action_dist(params: &PolicyParams, history: &[TokenId]) -> ActionDist {
    ActionDist::from_logits(&forward(params, history).logits, params.dims.bos)
}

pub fn sample_token(params: &PolicyParams, history: &[TokenId], rng: &mut Rng) -> TokenId {
    action_dist(params, history).sample(rng)
}

pub fn log_prob(params: &PolicyParams, history: &[TokenId], action: TokenId) -> f64 {
    action_dist(params, history).log_probs[action as usize]
}

pub fn grad_log_prob(params: &PolicyParams, history: &[TokenId], action: TokenId) -> (f64, PolicyParams) {
    debug_assert_ne!(action, params.dims.bos, "BOS is not an action");
    let fwd = forward(params, history);
    let dist = ActionDist::from_logits(&fwd.logits, params.dims.bos);
    let mut grad = params.zeros_like();
    backward(params, &fwd, &dist.dlogits_log_prob(action), 1.0, &mut grad);
    (dist.log_probs[action as usize], grad)
}

pub fn entropy(params: &PolicyParams, history: &[TokenId]) -> f64 {
    action_dist(params, history).entropy()
}

pub fn grad_entropy(params: &PolicyParams, history: &[TokenId]) -> (f64, PolicyParams) {
    let fwd = forward(params, history);
    let dist = ActionDist::from_logits(&fwd.logits, params.dims.bos);
    let mut grad = params.zeros_like();
    backward(params, &fwd, &dist.dlogits_entropy(), 1.0, &mut grad);
    (dist.entropy(), grad)
}

pub fn kl_to_reference(params: &PolicyParams, reference: &PolicyParams, history: &[TokenId]) -> f64 {
    action_dist(params, history).kl(&action_dist(reference, history))
}

/// Gradient of `KL(pi_theta || pi_ref)` with respect to `params` only.
pub fn grad_kl(params: &PolicyParams, reference: &PolicyParams, history: &[TokenId]) -> (f64, PolicyParams) {
    let fwd = forward(params, history);
    let dist = ActionDist::from_logits(&fwd.logits, params.dims.bos);
    let ref_dist = action_dist(reference, history);
    let mut grad = params.zeros_like();
    backward(params, &fwd, &dist.dlogits_kl(&ref_dist), 1.0, &mut grad);
    (dist.kl(&ref_dist), grad)
}

/// Samples exactly `horizon` tokens after `prefix`. Hidden state `t` is the
/// policy's hidden vector after consuming generated token `t`. No scorers are
/// attached; see [`crate::scorers::annotate`].
pub fn rollout(params: &PolicyParams, prefix: &[TokenId], horizon: usize, rng: &mut Rng) -> Result<Trajectory> {
    if let Some(&t) = prefix.iter().find(|&&t| t as usize >= params.dims.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            size: params.dims.vocab_size,
        });
    }
    let mut history = prefix.to_vec();
    let mut hidden_states = Vec::with_capacity(horizon);
    let mut fwd = forward(params, &history);
    for _ in 0..horizon {
        let tok = ActionDist::from_logits(&fwd.logits, params.dims.bos).sample(rng);
        history.push(tok);
        fwd = forward(params, &history);
        hidden_states.push(fwd.hidden.clone());
    }
    let generated = history.split_off(prefix.len());
    Ok(Trajectory::from_parts(
        Sequence::new(history, generated),
        Vec::new(),
        Vec::new(),
        hidden_states,
    ))
}

/// Hidden states the policy would record while generating `seq` itself.
pub fn teacher_forced(params: &PolicyParams, seq: &Sequence) -> Trajectory {
    let hidden_states = (1..=seq.generated.len())
        .map(|i| forward(params, &seq.context(i)).hidden)
        .collect();
    Trajectory::from_parts(seq.clone(), Vec::new(), Vec::new(), hidden_states)
}

/// Mean per-token log-likelihood of `corpus`.
pub fn mean_log_likelihood(params: &PolicyParams, corpus: &[Sequence]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        for (t, &a) in seq.generated.iter().enumerate() {
            total += log_prob(params, &seq.context(t), a);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

#[derive(Clone, Debug)]
pub struct Warmup {
    pub params: PolicyParams,
    /// Mean log-likelihood before each step, plus the final value.
    pub log_likelihood: Vec<f64>,
}

/// Maximum-likelihood fine-tuning by full-batch Adam ascent.
pub fn mle_warmup(params: &PolicyParams, corpus: &[Sequence], steps: usize, lr: f64) -> Result<Warmup> {
    if corpus.iter().all(|s| s.generated.is_empty()) {
        return Err(Error::Empty("warm-up corpus"));
    }
    let mut params = params.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, params.dims.param_count());
    let pairs: Vec<(Vec<TokenId>, TokenId)> = corpus
        .iter()
        .flat_map(|s| (0..s.generated.len()).map(move |t| (s.context(t), s.generated[t])))
        .collect();
    let n = pairs.len() as f64;
    let mut log_likelihood = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut grad = params.zeros_like();
        let mut ll = 0.0;
        for (ctx, a) in &pairs {
            let fwd = forward(&params, ctx);
            let dist = ActionDist::from_logits(&fwd.logits, params.dims.bos);
            ll += dist.log_probs[*a as usize];
            if step < steps {
                backward(&params, &fwd, &dist.dlogits_log_prob(*a), 1.0 / n, &mut grad);
            }
        }
        log_likelihood.push(ll / n);
        if step < steps {
            opt.step(&mut params.data, &grad.data)?;
        }
    }
    Ok(Warmup { params, log_likelihood })
}
