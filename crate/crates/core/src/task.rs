//! A controllable-generation task: vocabulary, attribute scorers used for
//! rewards, and the exact rules used to judge correctness.

use rand::Rng as _;

use crate::rng::Rng;
use crate::scorers::AttributeScorer;
use crate::types::{TokenId, Vocabulary};

/// The exact rule an attribute scorer approximates.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributeRule {
    /// Strictly more than half of the generated tokens are in the lexicon.
    LexiconMajority { mask: Vec<bool> },
    /// The last `window` generated tokens are all in the class.
    SuffixIn { mask: Vec<bool>, window: usize },
    /// No generated token is in the set.
    Avoids { mask: Vec<bool> },
}

impl AttributeRule {
    pub fn satisfied(&self, generated: &[TokenId]) -> bool {
        let hit = |mask: &[bool], t: TokenId| mask.get(t as usize).copied().unwrap_or(false);
        match self {
            AttributeRule::LexiconMajority { mask } => {
                let m = generated.iter().filter(|&&t| hit(mask, t)).count();
                2 * m > generated.len()
            }
            AttributeRule::SuffixIn { mask, window } => {
                generated.len() >= *window
                    && generated[generated.len() - window..].iter().all(|&t| hit(mask, t))
            }
            AttributeRule::Avoids { mask } => generated.iter().all(|&t| !hit(mask, t)),
        }
    }
}

#[derive(Debug)]
pub struct Task {
    pub name: String,
    pub vocab: Vocabulary,
    pub scorers: Vec<Box<dyn AttributeScorer>>,
    pub rules: Vec<AttributeRule>,
    /// Number of random prompt tokens after BOS in each exploration prefix.
    pub prefix_len: usize,
}

impl Task {
    pub fn attributes(&self) -> usize {
        self.scorers.len()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.scorers.iter().map(|s| s.name().to_string()).collect()
    }

    /// BOS followed by `prefix_len` uniformly drawn sampleable tokens.
    pub fn sample_prefix(&self, rng: &mut Rng) -> Vec<TokenId> {
        let choices: Vec<TokenId> = self.vocab.sampleable().collect();
        let mut prefix = vec![self.vocab.bos()];
        for _ in 0..self.prefix_len {
            prefix.push(choices[rng.random_range(0..choices.len())]);
        }
        prefix
    }

    pub fn satisfies_all(&self, generated: &[TokenId]) -> bool {
        self.rules.iter().all(|r| r.satisfied(generated))
    }
}
