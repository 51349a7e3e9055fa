//! Entropy/KL regularised policy gradient over shaped token rewards, and the
//! explore / quantize & noise / learn episode loop.
//!
//! Each pool entry contributes the ascent direction
//!
//! ```text
//! r_hat * grad log pi(a | ctx) + alpha * grad H(ctx) - beta * grad KL(pi || pi_ref)(ctx)
//! ```
//!
//! and a minibatch gradient is the mean of its entries' contributions.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic;
use crate::metrics;
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{self, ActionDist, PolicyParams, ReferencePolicy};
use crate::pool::{DataPool, PoolEntry, DEFAULT_LIFETIME};
use crate::rng::{self, tag};
use crate::scorers::annotate;
use crate::shaping::{self, NoiseConfig, ShapingMode, DEFAULT_QUANTILES, DEFAULT_SIGMA};
use crate::task::Task;
use crate::types::{Sequence, Trajectory};
use crate::weigher::{combine_streams, Combiner};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Probability shift of each token.
    #[default]
    Token,
    /// The activated full-sequence score broadcast to every token, using the
    /// same sigmoid as the token rewards.
    Sentence,
    /// The bare full-sequence score broadcast to every token.
    SentenceRaw,
}

impl std::str::FromStr for Feedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "sentence" => Ok(Self::Sentence),
            "sentence_raw" => Ok(Self::SentenceRaw),
            other => Err(Error::Config(format!("unknown feedback {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Entropy bonus coefficient.
    pub alpha: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub episodes: usize,
    pub rollouts_per_episode: usize,
    /// Generated tokens per rollout.
    pub max_len: usize,
    pub q: usize,
    pub sigma: f64,
    pub lifetime: u32,
    pub feedback: Feedback,
    pub shaping: ShapingMode,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            episodes: 200,
            rollouts_per_episode: 64,
            max_len: 12,
            q: DEFAULT_QUANTILES,
            sigma: DEFAULT_SIGMA,
            lifetime: DEFAULT_LIFETIME,
            feedback: Feedback::Token,
            shaping: ShapingMode::QuantizeNoise,
            minibatch: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.rollouts_per_episode == 0 || self.max_len == 0 || self.minibatch == 0 {
            return bad("rollouts_per_episode, max_len and minibatch must be positive".into());
        }
        if self.q == 0 {
            return bad("q must be at least 1".into());
        }
        if self.lifetime == 0 {
            return bad("lifetime must be at least 1".into());
        }
        NoiseConfig::new(self.sigma, 0)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: usize,
    /// Per attribute, judged by the exact task rules.
    pub correctness: Vec<f64>,
    pub mean_correctness: f64,
    pub dist: [f64; 3],
    pub ppl_proxy: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_raw_reward: f64,
    pub mean_shaped_reward: f64,
    pub pool_size: usize,
    pub evictions: usize,
    pub wall_clock_ms: f64,
}

fn entry_dlogits(
    params: &PolicyParams,
    reference: &PolicyParams,
    entry: &PoolEntry,
    reward: f64,
    alpha: f64,
    beta: f64,
) -> (policy::Forward, Vec<f64>) {
    let fwd = policy::forward(params, &entry.context);
    let dist = ActionDist::from_logits(&fwd.logits, params.dims().bos);
    let mut g = dist.dlogits_log_prob(entry.action);
    g.iter_mut().for_each(|x| *x *= reward);
    if alpha != 0.0 {
        for (gi, hi) in g.iter_mut().zip(dist.dlogits_entropy()) {
            *gi += alpha * hi;
        }
    }
    if beta != 0.0 {
        let ref_dist = policy::action_dist(reference, &entry.context);
        for (gi, ki) in g.iter_mut().zip(dist.dlogits_kl(&ref_dist)) {
            *gi -= beta * ki;
        }
    }
    (fwd, g)
}

/// Mean ascent direction over `entries`; every entry must carry a shaped reward.
pub fn accumulate_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    entries: &[&PoolEntry],
    alpha: f64,
    beta: f64,
) -> Result<PolicyParams> {
    if entries.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let mut grad = params.zeros_like();
    let scale = 1.0 / entries.len() as f64;
    for (i, entry) in entries.iter().enumerate() {
        let reward = entry.shaped_reward.ok_or(Error::MissingShapedReward(i))?;
        let (fwd, dlogits) = entry_dlogits(params, reference, entry, reward, alpha, beta);
        policy::backward(params, &fwd, &dlogits, scale, &mut grad);
    }
    Ok(grad)
}

/// Mean of `r_hat * log pi(a|ctx) + alpha * H(ctx) - beta * KL(ctx)`.
pub fn batch_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    entries: &[&PoolEntry],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Empty("objective batch"));
    }
    let mut total = 0.0;
    for (i, entry) in entries.iter().enumerate() {
        let reward = entry.shaped_reward.ok_or(Error::MissingShapedReward(i))?;
        let dist = policy::action_dist(params, &entry.context);
        let ref_dist = policy::action_dist(reference, &entry.context);
        total += reward * dist.log_probs[entry.action as usize] + alpha * dist.entropy() - beta * dist.kl(&ref_dist);
    }
    Ok(total / entries.len() as f64)
}

/// In-place ascent update.
pub fn optimizer_step(params: &mut PolicyParams, gradient: &PolicyParams, optimizer: &mut Optimizer) -> Result<()> {
    if params.dims() != gradient.dims() {
        return Err(Error::LengthMismatch {
            expected: params.as_slice().len(),
            actual: gradient.as_slice().len(),
        });
    }
    optimizer.step(params.as_mut_slice(), gradient.as_slice())
}

/// Per-token rewards for one annotated trajectory.
pub fn token_rewards(traj: &Trajectory, task: &Task, feedback: Feedback, combiner: &Combiner) -> Result<Vec<f64>> {
    match feedback {
        Feedback::Token => combine_streams(traj, traj.raw_rewards(), combiner),
        Feedback::Sentence | Feedback::SentenceRaw => {
            let activate = feedback == Feedback::Sentence;
            let streams: Vec<Vec<f64>> = task
                .scorers
                .iter()
                .map(|s| {
                    let mut r = shaping::sentence_level_rewards(traj, s.as_ref());
                    if activate {
                        r.iter_mut().for_each(|x| *x = logistic(*x));
                    }
                    r
                })
                .collect();
            combine_streams(traj, &streams, combiner)
        }
    }
}

/// Everything the episode loop mutates.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub task: &'a Task,
    pub params: PolicyParams,
    pub reference: ReferencePolicy,
    pub pool: DataPool,
    pub combiner: Combiner,
    optimizer: Optimizer,
    episode: usize,
}

impl<'a> Trainer<'a> {
    /// The reference policy is a snapshot of `params`.
    pub fn new(config: TrainConfig, task: &'a Task, params: PolicyParams, combiner: Combiner) -> Result<Self> {
        config.validate()?;
        if params.dims().vocab_size != task.vocab.size() {
            return Err(Error::LengthMismatch {
                expected: task.vocab.size(),
                actual: params.dims().vocab_size,
            });
        }
        let optimizer = Optimizer::new(config.optimizer, config.lr, params.dims().param_count());
        Ok(Self {
            reference: ReferencePolicy::snapshot(&params),
            pool: DataPool::new(config.lifetime),
            optimizer,
            config,
            task,
            params,
            combiner,
            episode: 0,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Samples this episode's rollouts, each from its own RNG substream.
    pub fn explore(&self) -> Result<Vec<Trajectory>> {
        let (seed, episode) = (self.config.seed, self.episode as u64);
        (0..self.config.rollouts_per_episode as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(seed, tag::ROLLOUT, &[episode, i]);
                let prefix = self.task.sample_prefix(&mut rng);
                let traj = policy::rollout(&self.params, &prefix, self.config.max_len, &mut rng)?;
                annotate(&traj, &self.task.scorers)
            })
            .collect()
    }

    /// One explore, quantize & noise, learn cycle.
    pub fn train_episode(&mut self) -> Result<EpisodeReport> {
        let start = Instant::now();
        let trajectories = self.explore()?;

        // Metrics on the policy that produced the rollouts.
        let generations: Vec<&[u32]> = trajectories.iter().map(|t| t.generated()).collect();
        let correctness = self
            .task
            .rules
            .iter()
            .map(|rule| metrics::correctness(&generations, |g| rule.satisfied(g)))
            .collect::<Result<Vec<_>>>()?;
        let mean_correctness = correctness.iter().sum::<f64>() / correctness.len().max(1) as f64;
        let dist = [1, 2, 3].map(|n| metrics::dist_n(&generations, n));
        let sequences: Vec<Sequence> = trajectories.iter().map(|t| t.sequence().clone()).collect();
        let ppl_proxy = metrics::ppl_proxy(&sequences, self.reference.params());
        let (mut kl_sum, mut ent_sum, mut positions) = (0.0, 0.0, 0usize);
        for seq in &sequences {
            for t in 0..seq.generated.len() {
                let ctx = seq.context(t);
                let d = policy::action_dist(&self.params, &ctx);
                kl_sum += d.kl(&policy::action_dist(self.reference.params(), &ctx));
                ent_sum += d.entropy();
                positions += 1;
            }
        }

        let mut raw_sum = 0.0;
        let mut raw_count = 0usize;
        for traj in &trajectories {
            let rewards = token_rewards(traj, self.task, self.config.feedback, &self.combiner)?;
            let seq = traj.sequence();
            for (t, r) in rewards.into_iter().enumerate() {
                raw_sum += r;
                raw_count += 1;
                self.pool.push(seq.context(t), seq.generated[t], r);
            }
        }

        let noise = NoiseConfig::new(self.config.sigma, rng::stream_seed(self.config.seed, tag::NOISE, self.episode as u64))?;
        shaping::apply_shaping(&mut self.pool, self.config.shaping, self.config.q, &noise)?;
        let mean_shaped_reward = self
            .pool
            .entries()
            .iter()
            .map(|e| e.shaped_reward.unwrap_or(e.raw_reward))
            .sum::<f64>()
            / self.pool.len() as f64;
        let pool_size = self.pool.len();

        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, tag::SHUFFLE, &[self.episode as u64]));
        for chunk in order.chunks(self.config.minibatch) {
            let batch: Vec<&PoolEntry> = chunk.iter().map(|&i| &self.pool.entries()[i]).collect();
            let grad = accumulate_gradient(
                &self.params,
                self.reference.params(),
                &batch,
                self.config.alpha,
                self.config.beta,
            )?;
            optimizer_step(&mut self.params, &grad, &mut self.optimizer)?;
        }
        let evictions = self.pool.tick();

        let report = EpisodeReport {
            episode: self.episode,
            correctness,
            mean_correctness,
            dist,
            ppl_proxy,
            mean_kl: kl_sum / positions.max(1) as f64,
            mean_entropy: ent_sum / positions.max(1) as f64,
            mean_raw_reward: raw_sum / raw_count.max(1) as f64,
            mean_shaped_reward,
            pool_size,
            evictions,
            wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.episode += 1;
        Ok(report)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpisodeReport>,
    pub params: PolicyParams,
    pub reference: ReferencePolicy,
}

/// Runs `config.episodes` episodes, handing each report to `on_report`.
pub fn train(
    config: &TrainConfig,
    task: &Task,
    params: PolicyParams,
    combiner: Combiner,
    mut on_report: impl FnMut(&EpisodeReport, &PolicyParams) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), task, params, combiner)?;
    let mut reports = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let report = trainer.train_episode()?;
        on_report(&report, &trainer.params)?;
        reports.push(report);
    }
    Ok(TrainOutcome {
        reports,
        params: trainer.params,
        reference: trainer.reference,
    })
}
