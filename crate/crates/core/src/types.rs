//! Vocabulary, sequence and trajectory types shared by every other module.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::{token_reward, AttributeScorer};

/// Dense token id. The BOS id is reserved and never sampled.
pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    labels: Vec<String>,
    bos: TokenId,
    lexicons: BTreeMap<String, BTreeSet<TokenId>>,
}

impl Vocabulary {
    pub fn new(labels: Vec<String>, bos: TokenId) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 tokens, got {}",
                labels.len()
            )));
        }
        if bos as usize >= labels.len() {
            return Err(Error::TokenOutOfRange {
                token: bos,
                size: labels.len(),
            });
        }
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(Error::Config("vocabulary labels must be unique".into()));
        }
        Ok(Self {
            labels,
            bos,
            lexicons: BTreeMap::new(),
        })
    }

    /// BOS at id 0 followed by `words`.
    pub fn with_bos<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels = std::iter::once("<bos>".to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::new(labels, 0)
    }

    pub fn add_lexicon(
        &mut self,
        name: impl Into<String>,
        ids: impl IntoIterator<Item = TokenId>,
    ) -> Result<()> {
        let ids: BTreeSet<TokenId> = ids.into_iter().collect();
        for &id in &ids {
            self.check_token(id)?;
        }
        self.lexicons.insert(name.into(), ids);
        Ok(())
    }

    /// Registers a lexicon given by token labels.
    pub fn add_lexicon_labels(&mut self, name: impl Into<String>, labels: &[&str]) -> Result<()> {
        let ids = labels
            .iter()
            .map(|l| self.id(l))
            .collect::<Result<Vec<_>>>()?;
        self.add_lexicon(name, ids)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn label(&self, id: TokenId) -> &str {
        &self.labels[id as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Result<TokenId> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|p| p as TokenId)
            .ok_or_else(|| Error::Config(format!("unknown token label {label:?}")))
    }

    pub fn lexicon(&self, name: &str) -> Result<&BTreeSet<TokenId>> {
        self.lexicons
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown lexicon {name:?}")))
    }

    pub fn lexicons(&self) -> &BTreeMap<String, BTreeSet<TokenId>> {
        &self.lexicons
    }

    /// Membership mask of a lexicon, indexed by token id.
    pub fn lexicon_mask(&self, name: &str) -> Result<Vec<bool>> {
        let lex = self.lexicon(name)?;
        Ok((0..self.size() as TokenId).map(|t| lex.contains(&t)).collect())
    }

    /// Every token id except BOS.
    pub fn sampleable(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size() as TokenId).filter(move |&t| t != self.bos)
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                size: self.size(),
            })
        }
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Parses whitespace-separated labels.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.label(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// An exploration prompt and the continuation generated after it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub prefix: Vec<TokenId>,
    pub generated: Vec<TokenId>,
}

impl Sequence {
    pub fn new(prefix: Vec<TokenId>, generated: Vec<TokenId>) -> Self {
        Self { prefix, generated }
    }

    /// Prefix followed by the first `i` generated tokens.
    pub fn context(&self, i: usize) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(self.prefix.len() + i);
        ctx.extend_from_slice(&self.prefix);
        ctx.extend_from_slice(&self.generated[..i]);
        ctx
    }

    pub fn full(&self) -> Vec<TokenId> {
        self.context(self.generated.len())
    }
}

/// A sequence together with its per-attribute scores, per-token raw rewards
/// and the policy hidden state recorded after each generated token.
///
/// Append-only: `scores[a]` always holds `generated.len() + 1` entries and
/// `raw_rewards[a]` holds `generated.len()` entries for each attached scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    sequence: Sequence,
    scores: Vec<Vec<f64>>,
    raw_rewards: Vec<Vec<f64>>,
    hidden_states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Starts a trajectory at `prefix` with the bare-prefix score of every scorer.
    pub fn new(
        vocab: &Vocabulary,
        prefix: Vec<TokenId>,
        scorers: &[Box<dyn AttributeScorer>],
    ) -> Result<Self> {
        vocab.check_tokens(&prefix)?;
        let scores = scorers.iter().map(|s| vec![s.score_tokens(&[])]).collect();
        Ok(Self {
            sequence: Sequence::new(prefix, Vec::new()),
            scores,
            raw_rewards: vec![Vec::new(); scorers.len()],
            hidden_states: Vec::new(),
        })
    }

    /// Appends one generated token, extending every attached score stream.
    ///
    /// `scorers` must be the same list the trajectory was created with.
    pub fn push_token(
        &mut self,
        token: TokenId,
        hidden: Vec<f64>,
        scorers: &[Box<dyn AttributeScorer>],
    ) -> Result<()> {
        if scorers.len() != self.scores.len() {
            return Err(Error::LengthMismatch {
                expected: self.scores.len(),
                actual: scorers.len(),
            });
        }
        self.sequence.generated.push(token);
        self.hidden_states.push(hidden);
        for (a, scorer) in scorers.iter().enumerate() {
            let next = scorer.score_tokens(&self.sequence.generated);
            let prev = *self.scores[a].last().expect("score stream starts non-empty");
            self.raw_rewards[a].push(token_reward(next, prev)?);
            self.scores[a].push(next);
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        sequence: Sequence,
        scores: Vec<Vec<f64>>,
        raw_rewards: Vec<Vec<f64>>,
        hidden_states: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            sequence,
            scores,
            raw_rewards,
            hidden_states,
        }
    }

    pub fn sequence(&self) -> &Sequence {
        &self.sequence
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.sequence.generated
    }

    pub fn len(&self) -> usize {
        self.sequence.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.generated.is_empty()
    }

    /// Number of attached attribute streams.
    pub fn attributes(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn raw_rewards(&self) -> &[Vec<f64>] {
        &self.raw_rewards
    }

    pub fn hidden_states(&self) -> &[Vec<f64>] {
        &self.hidden_states
    }

    pub fn into_sequence(self) -> Sequence {
        self.sequence
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::LexiconScorer;

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::with_bos(["a", "b", "c", "d"]).unwrap();
        v.add_lexicon("pos", [1, 2]).unwrap();
        v
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(vec!["x".into()], 0).is_err());
        assert!(Vocabulary::new(vec!["x".into(), "y".into()], 2).is_err());
        assert!(Vocabulary::new(vec!["x".into(), "x".into()], 0).is_err());
        let mut v = vocab();
        assert!(v.add_lexicon("bad", [5]).is_err());
        assert_eq!(v.sampleable().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(v.parse("a d").unwrap(), vec![1, 4]);
        assert_eq!(v.render(&[0, 2]), "<bos> b");
    }

    #[test]
    fn new_trajectory_with_bare_prefix_is_empty() {
        let v = vocab();
        let t = Trajectory::new(&v, vec![v.bos()], &[]).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.attributes(), 0);
    }

    #[test]
    fn new_trajectory_rejects_out_of_range_prefix() {
        let v = vocab();
        let err = Trajectory::new(&v, vec![0, 5], &[]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { token: 5, .. }));
    }

    #[test]
    fn new_trajectory_scores_bare_prefix() {
        let v = vocab();
        let s: Vec<Box<dyn AttributeScorer>> =
            vec![Box::new(LexiconScorer::from_vocab(&v, "pos", 4.0).unwrap())];
        let t = Trajectory::new(&v, vec![0, 3, 1], &s).unwrap();
        // Scorers only see the generated suffix, so the bare prefix is neutral.
        assert_eq!(t.scores()[0], vec![0.5]);
        assert!(t.raw_rewards()[0].is_empty());
    }

    #[test]
    fn push_is_append_only() {
        let v = vocab();
        let s: Vec<Box<dyn AttributeScorer>> =
            vec![Box::new(LexiconScorer::from_vocab(&v, "pos", 4.0).unwrap())];
        let mut t = Trajectory::new(&v, vec![0], &s).unwrap();
        let mut history: Vec<Trajectory> = Vec::new();
        for tok in [1, 3, 2, 4, 1] {
            t.push_token(tok, vec![tok as f64], &s).unwrap();
            for old in &history {
                let n = old.len();
                assert_eq!(&t.scores()[0][..=n], &old.scores()[0][..]);
                assert_eq!(&t.raw_rewards()[0][..n], &old.raw_rewards()[0][..]);
                assert_eq!(&t.hidden_states()[..n], old.hidden_states());
            }
            assert_eq!(t.scores()[0].len(), t.len() + 1);
            assert_eq!(t.raw_rewards()[0].len(), t.len());
            assert_eq!(t.hidden_states().len(), t.len());
            history.push(t.clone());
        }
    }
}
