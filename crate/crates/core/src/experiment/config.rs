use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Feedback, TrainConfig};
use crate::optim::OptimizerKind;
use crate::policy::PolicyDims;
use crate::scorers::{LexiconScorer, SuffixScorer, TrainingMode};
use crate::shaping::ShapingMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Weigher,
    Average,
}

/// Attribute scorer definition. Each also fixes the exact rule used for
/// correctness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    /// Rule: strictly more than half the generation is in the lexicon.
    Lexicon {
        lexicon: String,
        #[serde(default = "default_gain")]
        gain: f64,
    },
    /// Rule: the last `window` tokens are in the class.
    Suffix {
        class: String,
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Rule: no token from `avoid`. The scorer is a logistic regression fit
    /// on a synthetic labelled corpus.
    Learned {
        avoid: String,
        #[serde(default = "default_mode")]
        mode: TrainingMode,
        #[serde(default = "default_corpus")]
        corpus: usize,
        #[serde(default = "default_scorer_steps")]
        steps: usize,
    },
}

fn default_gain() -> f64 {
    LexiconScorer::DEFAULT_GAIN
}
fn default_window() -> usize {
    1
}
fn default_epsilon() -> f64 {
    SuffixScorer::DEFAULT_EPSILON
}
fn default_mode() -> TrainingMode {
    TrainingMode::WholeSequence
}
fn default_corpus() -> usize {
    2000
}
fn default_scorer_steps() -> usize {
    500
}

/// Flat experiment configuration. Every field has a default; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `single_attr_lexicon`, `detox_like`, `multi_attr_2` or `multi_attr_3`.
    pub task: String,
    pub seed: u64,

    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub episodes: usize,
    pub rollouts_per_episode: usize,
    pub max_len: usize,
    pub q: usize,
    pub sigma: f64,
    pub lifetime: u32,
    pub feedback: Feedback,
    pub shaping: ShapingMode,
    pub minibatch: usize,

    /// Random prompt tokens after BOS in each exploration prefix.
    pub prefix_len: usize,
    /// Gain of the built-in lexicon scorers.
    pub gain: f64,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,

    pub combine: CombineMode,
    pub weigher_width: usize,
    pub weigher_steps: usize,
    pub weigher_lr: f64,
    /// Sequences rejection-sampled for weigher training and warm-up.
    pub corpus_size: usize,

    pub warmup_steps: usize,
    pub warmup_lr: f64,

    /// Episodes averaged for the final-correctness summary.
    pub final_window: usize,
    /// Write a policy checkpoint every k episodes (0 = only at the end).
    pub checkpoint_every: usize,

    /// Overrides the task's built-in scorers.
    pub scorers: Option<Vec<ScorerSpec>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: "single_attr_lexicon".into(),
            seed: t.seed,
            alpha: t.alpha,
            beta: t.beta,
            lr: t.lr,
            optimizer: t.optimizer,
            episodes: t.episodes,
            rollouts_per_episode: t.rollouts_per_episode,
            max_len: t.max_len,
            q: t.q,
            sigma: t.sigma,
            lifetime: t.lifetime,
            feedback: t.feedback,
            shaping: t.shaping,
            minibatch: t.minibatch,
            prefix_len: 2,
            gain: LexiconScorer::DEFAULT_GAIN,
            context_window: PolicyDims::DEFAULT_CONTEXT_WINDOW,
            embed_dim: PolicyDims::DEFAULT_EMBED_DIM,
            hidden_dim: PolicyDims::DEFAULT_HIDDEN_DIM,
            combine: CombineMode::Weigher,
            weigher_width: crate::weigher::DEFAULT_WIDTH,
            weigher_steps: 300,
            weigher_lr: crate::weigher::DEFAULT_LR,
            corpus_size: 256,
            warmup_steps: 0,
            warmup_lr: 1e-2,
            final_window: 10,
            checkpoint_every: 0,
            scorers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            lr: self.lr,
            optimizer: self.optimizer,
            episodes: self.episodes,
            rollouts_per_episode: self.rollouts_per_episode,
            max_len: self.max_len,
            q: self.q,
            sigma: self.sigma,
            lifetime: self.lifetime,
            feedback: self.feedback,
            shaping: self.shaping,
            minibatch: self.minibatch,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !super::tasks::TASKS.contains(&self.task.as_str()) {
            return Err(Error::Config(format!(
                "unknown task {:?}; expected one of {:?}",
                self.task,
                super::tasks::TASKS
            )));
        }
        if self.context_window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.weigher_width == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if !(self.gain > 0.0) || !(self.weigher_lr > 0.0) || !(self.warmup_lr > 0.0) {
            return Err(Error::Config("gain and learning rates must be positive".into()));
        }
        if self.final_window == 0 {
            return Err(Error::Config("final_window must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual value, e.g. `("q", "7")` or
    /// `("feedback", "sentence")`, re-validating the result.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_scalar(value);
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        if key == "scorers" {
            return Err(Error::Config("scorers cannot be overridden from the command line".into()));
        }
        table.insert(key.to_string(), parsed);
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_scalar(value: &str) -> toml::Value {
    if let Ok(i) = value.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = value.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = value.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(value.to_string())
    }
}
