//! Attribute scorers `P(c | y<=i)` and the probability-shift token reward.
//!
//! Scorers only look at the generated suffix of a sequence, never at the
//! exploration prompt, so the score of the bare prefix (`i = 0`) is the
//! scorer's value on an empty generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic;
use crate::types::{TokenId, Trajectory, Vocabulary};

pub trait AttributeScorer: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;

    /// Probability that the generation satisfies the attribute, in `[0, 1]`.
    fn score_tokens(&self, generated: &[TokenId]) -> f64;
}

/// `P(c | y<=i)` for the first `i` generated tokens of `traj`.
pub fn score(scorer: &dyn AttributeScorer, traj: &Trajectory, i: usize) -> Result<f64> {
    let generated = traj.generated();
    if i > generated.len() {
        return Err(Error::PositionOutOfRange {
            position: i,
            len: generated.len(),
        });
    }
    Ok(scorer.score_tokens(&generated[..i]))
}

/// Sigmoid of the probability shift caused by one token.
pub fn token_reward(p_next: f64, p_prev: f64) -> Result<f64> {
    for p in [p_next, p_prev] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
    }
    Ok(logistic(p_next - p_prev))
}

/// Recomputes every score and raw reward of `traj` against `scorers`,
/// keeping its tokens and hidden states.
pub fn annotate(traj: &Trajectory, scorers: &[Box<dyn AttributeScorer>]) -> Result<Trajectory> {
    let generated = traj.generated();
    let mut scores = Vec::with_capacity(scorers.len());
    let mut rewards = Vec::with_capacity(scorers.len());
    for scorer in scorers {
        let s: Vec<f64> = (0..=generated.len())
            .map(|i| scorer.score_tokens(&generated[..i]))
            .collect();
        let r = s
            .windows(2)
            .map(|w| token_reward(w[1], w[0]))
            .collect::<Result<Vec<_>>>()?;
        scores.push(s);
        rewards.push(r);
    }
    Ok(Trajectory::from_parts(
        traj.sequence().clone(),
        scores,
        rewards,
        traj.hidden_states().to_vec(),
    ))
}

/// Sentiment-like scorer: logistic of the lexicon fraction, centred at one half.
#[derive(Clone, Debug)]
pub struct LexiconScorer {
    name: String,
    mask: Vec<bool>,
    gain: f64,
}

impl LexiconScorer {
    pub const DEFAULT_GAIN: f64 = 4.0;

    pub fn new(name: impl Into<String>, mask: Vec<bool>, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("lexicon gain must be positive, got {gain}")));
        }
        Ok(Self {
            name: name.into(),
            mask,
            gain,
        })
    }

    pub fn from_vocab(vocab: &Vocabulary, lexicon: &str, gain: f64) -> Result<Self> {
        Self::new(lexicon, vocab.lexicon_mask(lexicon)?, gain)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn lexicon_count(&self, generated: &[TokenId]) -> usize {
        generated
            .iter()
            .filter(|&&t| self.mask.get(t as usize).copied().unwrap_or(false))
            .count()
    }
}

impl AttributeScorer for LexiconScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_tokens(&self, generated: &[TokenId]) -> f64 {
        if generated.is_empty() {
            return 0.5;
        }
        let frac = self.lexicon_count(generated) as f64 / generated.len() as f64;
        logistic(self.gain * (2.0 * frac - 1.0))
    }
}

/// Tense-like scorer: decided entirely by whether the last `window` tokens
/// belong to the target class.
#[derive(Clone, Debug)]
pub struct SuffixScorer {
    name: String,
    mask: Vec<bool>,
    window: usize,
    epsilon: f64,
}

impl SuffixScorer {
    pub const DEFAULT_EPSILON: f64 = 0.05;

    pub fn new(name: impl Into<String>, mask: Vec<bool>, window: usize, epsilon: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("suffix window must be positive".into()));
        }
        if !(0.0..0.5).contains(&epsilon) {
            return Err(Error::Config(format!("suffix epsilon must be in [0, 0.5), got {epsilon}")));
        }
        Ok(Self {
            name: name.into(),
            mask,
            window,
            epsilon,
        })
    }

    pub fn from_vocab(vocab: &Vocabulary, class: &str, window: usize, epsilon: f64) -> Result<Self> {
        Self::new(class, vocab.lexicon_mask(class)?, window, epsilon)
    }

    pub fn satisfied(&self, generated: &[TokenId]) -> bool {
        generated.len() >= self.window
            && generated[generated.len() - self.window..]
                .iter()
                .all(|&t| self.mask.get(t as usize).copied().unwrap_or(false))
    }
}

impl AttributeScorer for SuffixScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_tokens(&self, generated: &[TokenId]) -> f64 {
        if self.satisfied(generated) {
            1.0 - self.epsilon
        } else {
            self.epsilon
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// One sample `(y, c)` per labelled sequence.
    WholeSequence,
    /// `|y| + 1` samples `(y<=i, c)` per labelled sequence, `i = 0..=|y|`.
    PrefixDecomposed,
}

/// Logistic regression over length-normalised bag-of-token counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedScorer {
    name: String,
    weights: Vec<f64>,
    bias: f64,
    mode: TrainingMode,
}

impl LearnedScorer {
    pub fn new(name: impl Into<String>, weights: Vec<f64>, bias: f64, mode: TrainingMode) -> Self {
        Self {
            name: name.into(),
            weights,
            bias,
            mode,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn mode(&self) -> TrainingMode {
        self.mode
    }

    fn logit(&self, features: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

impl AttributeScorer for LearnedScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_tokens(&self, generated: &[TokenId]) -> f64 {
        logistic(self.logit(&bag_of_tokens(self.weights.len(), generated)))
    }
}

/// Token counts divided by sequence length; all zeros for an empty sequence.
pub fn bag_of_tokens(vocab_size: usize, tokens: &[TokenId]) -> Vec<f64> {
    let mut x = vec![0.0; vocab_size];
    if tokens.is_empty() {
        return x;
    }
    let inv = 1.0 / tokens.len() as f64;
    for &t in tokens {
        if let Some(slot) = x.get_mut(t as usize) {
            *slot += inv;
        }
    }
    x
}

/// Expands a labelled corpus into classifier training samples.
pub fn build_samples(corpus: &[(Vec<TokenId>, bool)], mode: TrainingMode) -> Vec<(Vec<TokenId>, bool)> {
    match mode {
        TrainingMode::WholeSequence => corpus.to_vec(),
        TrainingMode::PrefixDecomposed => corpus
            .iter()
            .flat_map(|(y, c)| (0..=y.len()).map(move |i| (y[..i].to_vec(), *c)))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnedScorerConfig {
    pub lr: f64,
    pub steps: usize,
}

impl Default for LearnedScorerConfig {
    fn default() -> Self {
        // Features have norm <= 1 so the logistic loss is 0.5-smooth and any
        // step size below 4 decreases it monotonically.
        Self { lr: 1.0, steps: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct ScorerFit {
    pub scorer: LearnedScorer,
    /// Mean log-loss before each step, plus the final value.
    pub losses: Vec<f64>,
    pub samples: usize,
    /// The corpus held a single class, so the fit is degenerate.
    pub single_class: bool,
}

/// Full-batch gradient descent on the mean logistic loss.
pub fn train_learned_scorer(
    name: impl Into<String>,
    vocab_size: usize,
    corpus: &[(Vec<TokenId>, bool)],
    mode: TrainingMode,
    config: LearnedScorerConfig,
) -> Result<ScorerFit> {
    if corpus.is_empty() {
        return Err(Error::Empty("classifier corpus"));
    }
    for (y, _) in corpus {
        if let Some(&t) = y.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, size: vocab_size });
        }
    }
    let positives = corpus.iter().filter(|(_, c)| *c).count();
    let single_class = positives == 0 || positives == corpus.len();

    let samples = build_samples(corpus, mode);
    let features: Vec<Vec<f64>> = samples.iter().map(|(y, _)| bag_of_tokens(vocab_size, y)).collect();
    let labels: Vec<f64> = samples.iter().map(|(_, c)| if *c { 1.0 } else { 0.0 }).collect();
    let n = samples.len() as f64;

    let mut scorer = LearnedScorer::new(name, vec![0.0; vocab_size], 0.0, mode);
    let mut losses = Vec::with_capacity(config.steps + 1);
    let mut grad_w = vec![0.0; vocab_size];
    for step in 0..=config.steps {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(&labels) {
            let z = scorer.logit(x);
            // log(1 + e^z) - y z, computed stably
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            let err = logistic(z) - y;
            grad_b += err;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        losses.push(loss / n);
        if step == config.steps {
            break;
        }
        for (w, g) in scorer.weights.iter_mut().zip(&grad_w) {
            *w -= config.lr * g / n;
        }
        scorer.bias -= config.lr * grad_b / n;
    }
    Ok(ScorerFit {
        scorer,
        losses,
        samples: samples.len(),
        single_class,
    })
}

/// Scorer that always returns the same probability.
#[derive(Clone, Debug)]
pub struct ConstantScorer {
    pub name: String,
    pub value: f64,
}

impl AttributeScorer for ConstantScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_tokens(&self, _generated: &[TokenId]) -> f64 {
        self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(gain: f64) -> LexiconScorer {
        // tokens 1 and 2 are in the lexicon
        LexiconScorer::new("pos", vec![false, true, true, false, false], gain).unwrap()
    }

    fn traj(tokens: &[TokenId], scorers: &[Box<dyn AttributeScorer>]) -> Trajectory {
        let v = Vocabulary::with_bos(["a", "b", "c", "d"]).unwrap();
        let mut t = Trajectory::new(&v, vec![0], scorers).unwrap();
        for &tok in tokens {
            t.push_token(tok, vec![], scorers).unwrap();
        }
        t
    }

    #[test]
    fn lexicon_score_closed_form() {
        let s = lex(4.0);
        let t = traj(&[1, 2, 1, 2], &[]);
        assert_eq!(score(&s, &t, 0).unwrap(), 0.5);
        assert!((score(&s, &t, 4).unwrap() - 0.982_013_790_037_908_4).abs() < 1e-12);
        let t = traj(&[1, 3, 2, 4], &[]);
        assert!((score(&s, &t, 4).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            score(&s, &t, 5),
            Err(Error::PositionOutOfRange { position: 5, len: 4 })
        ));
    }

    #[test]
    fn token_reward_examples() {
        assert_eq!(token_reward(0.5, 0.5).unwrap(), 0.5);
        let oracle = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((token_reward(0.9, 0.2).unwrap() - oracle(0.7)).abs() < 1e-12);
        assert!((token_reward(0.9, 0.2).unwrap() - 0.66819).abs() < 1e-5);
        assert!((token_reward(0.2, 0.9).unwrap() - 0.33181).abs() < 1e-5);
        assert!(token_reward(1.1, 0.5).is_err());
        assert!(token_reward(0.5, -0.1).is_err());
        assert!(token_reward(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn annotate_constant_scorer_gives_neutral_rewards() {
        let s: Vec<Box<dyn AttributeScorer>> = vec![Box::new(ConstantScorer {
            name: "c".into(),
            value: 0.7,
        })];
        let t = annotate(&traj(&[1, 2, 3], &[]), &s).unwrap();
        assert_eq!(t.raw_rewards()[0], vec![0.5; 3]);
        assert_eq!(t.scores()[0].len(), 4);
    }

    #[test]
    fn annotate_single_lexicon_token() {
        let s: Vec<Box<dyn AttributeScorer>> = vec![Box::new(lex(4.0))];
        let t = annotate(&traj(&[2], &[]), &s).unwrap();
        let oracle = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = oracle(oracle(4.0) - 0.5);
        assert!((t.raw_rewards()[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn annotate_matches_incremental_push() {
        let s: Vec<Box<dyn AttributeScorer>> = vec![
            Box::new(lex(4.0)),
            Box::new(SuffixScorer::new("sfx", vec![false, false, false, true, true], 1, 0.05).unwrap()),
        ];
        let incremental = traj(&[1, 3, 4, 2, 2], &s);
        let fresh = annotate(&traj(&[1, 3, 4, 2, 2], &[]), &s).unwrap();
        assert_eq!(incremental.scores(), fresh.scores());
        assert_eq!(incremental.raw_rewards(), fresh.raw_rewards());
        assert_eq!(fresh.raw_rewards()[0].len(), fresh.raw_rewards()[1].len());
    }

    #[test]
    fn suffix_scorer_values() {
        let s = SuffixScorer::new("sfx", vec![false, false, false, true, true], 2, 0.05).unwrap();
        assert_eq!(s.score_tokens(&[]), 0.05);
        assert_eq!(s.score_tokens(&[3]), 0.05);
        assert_eq!(s.score_tokens(&[1, 3, 4]), 0.95);
        assert_eq!(s.score_tokens(&[3, 4, 1]), 0.05);
        assert!(SuffixScorer::new("x", vec![], 0, 0.05).is_err());
    }

    #[test]
    fn prefix_decomposition_sample_counts() {
        let corpus = vec![(vec![1, 2, 3], true)];
        let dec = build_samples(&corpus, TrainingMode::PrefixDecomposed);
        assert_eq!(dec.len(), 4);
        assert_eq!(dec[0].0, Vec::<TokenId>::new());
        assert_eq!(dec[3].0, vec![1, 2, 3]);
        assert_eq!(build_samples(&corpus, TrainingMode::WholeSequence).len(), 1);
    }

    fn separable_corpus() -> Vec<(Vec<TokenId>, bool)> {
        vec![
            (vec![1], true),
            (vec![2], true),
            (vec![3], false),
            (vec![4], false),
            (vec![1, 2, 1], true),
            (vec![3, 4, 4], false),
            (vec![2, 2], true),
            (vec![4, 3], false),
        ]
    }

    #[test]
    fn learned_scorer_fits_separable_corpus() {
        let corpus = separable_corpus();
        let fit = train_learned_scorer("clf", 5, &corpus, TrainingMode::WholeSequence, Default::default()).unwrap();
        assert!(!fit.single_class);
        assert_eq!(fit.samples, corpus.len());
        let acc = corpus
            .iter()
            .filter(|(y, c)| (fit.scorer.score_tokens(y) > 0.5) == *c)
            .count() as f64
            / corpus.len() as f64;
        assert_eq!(acc, 1.0);
        // monotone decrease over the first ten steps
        assert!(fit.losses[..11].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn learned_scorer_modes_agree_on_full_sequences() {
        let corpus = separable_corpus();
        let whole = train_learned_scorer("w", 5, &corpus, TrainingMode::WholeSequence, Default::default()).unwrap();
        let dec = train_learned_scorer("d", 5, &corpus, TrainingMode::PrefixDecomposed, Default::default()).unwrap();
        assert_eq!(dec.samples, corpus.iter().map(|(y, _)| y.len() + 1).sum::<usize>());
        assert!(dec.losses[..11].windows(2).all(|w| w[1] < w[0]));
        for (y, _) in &corpus {
            let a = whole.scorer.score_tokens(y);
            let b = dec.scorer.score_tokens(y);
            assert!((a - b).abs() <= 0.1, "{y:?}: {a} vs {b}");
        }
    }

    #[test]
    fn single_class_corpus_is_flagged() {
        let corpus = vec![(vec![1, 2], true), (vec![3], true)];
        let fit = train_learned_scorer("c", 5, &corpus, TrainingMode::WholeSequence, Default::default()).unwrap();
        assert!(fit.single_class);
        assert!(train_learned_scorer("c", 5, &[], TrainingMode::WholeSequence, Default::default()).is_err());
    }

    proptest! {
        #[test]
        fn token_reward_antisymmetric(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = token_reward(a, b).unwrap() + token_reward(b, a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn token_reward_monotone(a in 0.0f64..0.99, b in 0.0f64..=1.0, d in 0.001f64..0.01) {
            let hi = (a + d).min(1.0);
            prop_assert!(token_reward(hi, b).unwrap() > token_reward(a, b).unwrap());
            prop_assert!(token_reward(b, hi).unwrap() < token_reward(b, a).unwrap());
        }

        #[test]
        fn lexicon_score_increases_with_fraction(len in 1usize..20, m in 0usize..20) {
            prop_assume!(m < len);
            let s = lex(4.0);
            let lo: Vec<TokenId> = (0..len).map(|i| if i < m { 1 } else { 3 }).collect();
            let hi: Vec<TokenId> = (0..len).map(|i| if i <= m { 1 } else { 3 }).collect();
            prop_assert!(s.score_tokens(&hi) > s.score_tokens(&lo));
        }
    }
}
