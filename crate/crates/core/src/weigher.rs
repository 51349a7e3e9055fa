//! Learned per-token aggregation of several attribute rewards.
//!
//! A two-layer ReLU network with a softmax head maps the policy hidden state
//! recorded after token `t` to a weight vector on the probability simplex; the
//! combined token reward is the weighted sum of the per-attribute rewards.
//! Training maximises the mean combined reward over a corpus that satisfies
//! every attribute, with positions sampled uniformly within each sequence.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{self, PolicyParams};
use crate::rng::Rng;
use crate::scorers::{annotate, AttributeScorer};
use crate::types::{Sequence, Trajectory};

pub const DEFAULT_WIDTH: usize = 32;
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeigherParams {
    input_dim: usize,
    width: usize,
    outputs: usize,
    data: Vec<f64>,
}

impl WeigherParams {
    fn len_for(d: usize, h: usize, n: usize) -> usize {
        h * d + h + h * h + h + n * h + n
    }

    pub fn zeros(input_dim: usize, width: usize, outputs: usize) -> Self {
        Self {
            input_dim,
            width,
            outputs,
            data: vec![0.0; Self::len_for(input_dim, width, outputs)],
        }
    }

    /// He-initialised hidden layers and a near-zero output layer, so a fresh
    /// weigher starts close to uniform weights.
    pub fn init(input_dim: usize, width: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(input_dim, width, outputs);
        let l1 = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("valid std");
        let l2 = Normal::new(0.0, (2.0 / width as f64).sqrt()).expect("valid std");
        let out = Normal::new(0.0, 0.01).expect("valid std");
        let (o1, o2, o3) = (p.l1_b(), p.l2_w(), p.out_w());
        for x in &mut p.data[..o1] {
            *x = l1.sample(rng);
        }
        for x in &mut p.data[o2..o2 + width * width] {
            *x = l2.sample(rng);
        }
        for x in &mut p.data[o3..o3 + outputs * width] {
            *x = out.sample(rng);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn out_b_mut(&mut self) -> &mut [f64] {
        let o = self.out_b();
        &mut self.data[o..]
    }

    fn l1_b(&self) -> usize {
        self.width * self.input_dim
    }
    fn l2_w(&self) -> usize {
        self.l1_b() + self.width
    }
    fn l2_b(&self) -> usize {
        self.l2_w() + self.width * self.width
    }
    fn out_w(&self) -> usize {
        self.l2_b() + self.width
    }
    fn out_b(&self) -> usize {
        self.out_w() + self.outputs * self.width
    }
}

struct WeigherForward {
    a1: Vec<f64>,
    a2: Vec<f64>,
    weights: Vec<f64>,
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(j, bj)| bj + w[j * n_in..(j + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn forward_full(wp: &WeigherParams, hidden: &[f64]) -> Result<WeigherForward> {
    if hidden.len() != wp.input_dim {
        return Err(Error::LengthMismatch {
            expected: wp.input_dim,
            actual: hidden.len(),
        });
    }
    let d = &wp.data;
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let a1 = relu(dense(&d[..wp.l1_b()], &d[wp.l1_b()..wp.l2_w()], hidden));
    let a2 = relu(dense(&d[wp.l2_w()..wp.l2_b()], &d[wp.l2_b()..wp.out_w()], &a1));
    let logits = dense(&d[wp.out_w()..wp.out_b()], &d[wp.out_b()..], &a2);
    Ok(WeigherForward {
        a1,
        a2,
        weights: policy::softmax(&logits),
    })
}

/// Per-scorer weights on the simplex for one hidden state.
pub fn weigher_forward(wp: &WeigherParams, hidden: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_full(wp, hidden)?.weights)
}

pub fn combined_reward(weights: &[f64], rewards: &[f64]) -> Result<f64> {
    if weights.len() != rewards.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            actual: rewards.len(),
        });
    }
    Ok(weights.iter().zip(rewards).map(|(w, r)| w * r).sum())
}

/// One `(H_{t+1}, R_{t+1})` pair with its share of the corpus expectation.
#[derive(Clone, Debug)]
pub struct WeigherSample {
    pub hidden: Vec<f64>,
    pub rewards: Vec<f64>,
    pub weight: f64,
}

/// Expands every sequence into per-position samples, weighting each position
/// by `1 / (|corpus| * |y|)` so the sum is `E_y E_t`.
pub fn build_samples(
    corpus: &[Sequence],
    policy: &PolicyParams,
    scorers: &[Box<dyn AttributeScorer>],
) -> Result<Vec<WeigherSample>> {
    let usable: Vec<&Sequence> = corpus.iter().filter(|s| !s.generated.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("weigher corpus"));
    }
    let mut samples = Vec::new();
    for seq in &usable {
        let traj = annotate(&policy::teacher_forced(policy, seq), scorers)?;
        let w = 1.0 / (usable.len() * traj.len()) as f64;
        for t in 0..traj.len() {
            samples.push(WeigherSample {
                hidden: traj.hidden_states()[t].clone(),
                rewards: traj.raw_rewards().iter().map(|r| r[t]).collect(),
                weight: w,
            });
        }
    }
    Ok(samples)
}

pub fn objective(wp: &WeigherParams, samples: &[WeigherSample]) -> Result<f64> {
    samples.iter().try_fold(0.0, |acc, s| {
        Ok(acc + s.weight * combined_reward(&weigher_forward(wp, &s.hidden)?, &s.rewards)?)
    })
}

pub fn objective_gradient(wp: &WeigherParams, samples: &[WeigherSample]) -> Result<(f64, WeigherParams)> {
    let (d, h, n) = (wp.input_dim, wp.width, wp.outputs);
    let mut grad = WeigherParams::zeros(d, h, n);
    let mut value = 0.0;
    for s in samples {
        if s.rewards.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: s.rewards.len(),
            });
        }
        let f = forward_full(wp, &s.hidden)?;
        let combined = combined_reward(&f.weights, &s.rewards)?;
        value += s.weight * combined;
        // softmax backward of w . R
        let dlogits: Vec<f64> = f
            .weights
            .iter()
            .zip(&s.rewards)
            .map(|(w, r)| s.weight * w * (r - combined))
            .collect();

        let (ow, ob) = (wp.out_w(), wp.out_b());
        let mut da2 = vec![0.0; h];
        for k in 0..n {
            grad.data[ob + k] += dlogits[k];
            for j in 0..h {
                grad.data[ow + k * h + j] += dlogits[k] * f.a2[j];
                da2[j] += dlogits[k] * wp.data[ow + k * h + j];
            }
        }
        let (l2w, l2b) = (wp.l2_w(), wp.l2_b());
        let mut da1 = vec![0.0; h];
        for j in 0..h {
            if f.a2[j] <= 0.0 {
                continue;
            }
            let dz = da2[j];
            grad.data[l2b + j] += dz;
            for i in 0..h {
                grad.data[l2w + j * h + i] += dz * f.a1[i];
                da1[i] += dz * wp.data[l2w + j * h + i];
            }
        }
        let l1b = wp.l1_b();
        for j in 0..h {
            if f.a1[j] <= 0.0 {
                continue;
            }
            let dz = da1[j];
            grad.data[l1b + j] += dz;
            for i in 0..d {
                grad.data[j * d + i] += dz * s.hidden[i];
            }
        }
    }
    Ok((value, grad))
}

#[derive(Clone, Debug)]
pub struct WeigherTraining {
    pub params: WeigherParams,
    /// Objective before each step, plus the final value.
    pub objective: Vec<f64>,
}

/// Full-batch Adam ascent on the corpus objective.
pub fn train_weigher(wp: &WeigherParams, samples: &[WeigherSample], steps: usize, lr: f64) -> Result<WeigherTraining> {
    if samples.is_empty() {
        return Err(Error::Empty("weigher corpus"));
    }
    let mut params = wp.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, params.data.len());
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (value, grad) = objective_gradient(&params, samples)?;
        history.push(value);
        opt.step(&mut params.data, &grad.data)?;
    }
    history.push(objective(&params, samples)?);
    Ok(WeigherTraining {
        params,
        objective: history,
    })
}

/// Builds samples from `corpus` with the (frozen) `policy` and trains.
pub fn train_weigher_on_corpus(
    wp: &WeigherParams,
    corpus: &[Sequence],
    policy: &PolicyParams,
    scorers: &[Box<dyn AttributeScorer>],
    steps: usize,
    lr: f64,
) -> Result<WeigherTraining> {
    let samples = build_samples(corpus, policy, scorers)?;
    train_weigher(wp, &samples, steps, lr)
}

/// How per-attribute rewards collapse into one token reward.
#[derive(Clone, Debug)]
pub enum Combiner {
    /// Arithmetic mean.
    Average,
    /// Frozen learned weigher.
    Weigher(WeigherParams),
}

impl Combiner {
    pub fn combine(&self, hidden: &[f64], rewards: &[f64]) -> Result<f64> {
        match self {
            Combiner::Average => {
                if rewards.is_empty() {
                    return Err(Error::Empty("reward vector"));
                }
                Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
            }
            Combiner::Weigher(wp) => {
                let w = weigher_forward(wp, hidden)?;
                combined_reward(&w, rewards)
            }
        }
    }
}

/// Combined reward per generated position of an annotated trajectory.
pub fn multi_attribute_reward(traj: &Trajectory, combiner: &Combiner) -> Result<Vec<f64>> {
    combine_streams(traj, traj.raw_rewards(), combiner)
}

/// Combines arbitrary per-attribute streams (e.g. broadcast sentence scores)
/// using the trajectory's hidden states.
pub fn combine_streams(traj: &Trajectory, streams: &[Vec<f64>], combiner: &Combiner) -> Result<Vec<f64>> {
    if streams.is_empty() {
        return Err(Error::MissingAnnotation("no attribute rewards"));
    }
    if streams.iter().any(|r| r.len() != traj.len()) {
        return Err(Error::MissingAnnotation("reward stream length differs from generation"));
    }
    if matches!(combiner, Combiner::Weigher(_)) && traj.hidden_states().len() != traj.len() {
        return Err(Error::MissingAnnotation("hidden states"));
    }
    (0..traj.len())
        .map(|t| {
            let r: Vec<f64> = streams.iter().map(|s| s[t]).collect();
            let h = traj.hidden_states().get(t).map(Vec::as_slice).unwrap_or(&[]);
            combiner.combine(h, &r)
        })
        .collect()
}
