//! Built-in toy tasks.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ScorerSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scorers::{train_learned_scorer, AttributeScorer, LearnedScorerConfig, LexiconScorer, SuffixScorer, TrainingMode};
use crate::task::{AttributeRule, Task};
use crate::types::{TokenId, Vocabulary};

pub const TASKS: [&str; 4] = ["single_attr_lexicon", "detox_like", "multi_attr_2", "multi_attr_3"];

/// Vocabulary with named lexicons plus the default scorer line-up.
#[derive(Clone, Debug)]
pub struct TaskDefinition {
    pub vocab: Vocabulary,
    pub scorers: Vec<ScorerSpec>,
}

fn words(range: std::ops::RangeInclusive<usize>) -> Vec<String> {
    range.map(|i| format!("w{i:02}")).collect()
}

fn lexicon(vocab: &mut Vocabulary, name: &str, ids: impl IntoIterator<Item = usize>) -> Result<()> {
    vocab.add_lexicon(name, ids.into_iter().map(|i| i as TokenId))
}

pub fn task_definition(name: &str, gain: f64) -> Result<TaskDefinition> {
    let lex = |name: &str| ScorerSpec::Lexicon {
        lexicon: name.into(),
        gain,
    };
    match name {
        "single_attr_lexicon" => {
            let mut vocab = Vocabulary::with_bos(["great", "good", "happy", "the", "a", "movie", "plot", "bad"])?;
            vocab.add_lexicon_labels("positive", &["great", "good", "happy"])?;
            Ok(TaskDefinition {
                vocab,
                scorers: vec![lex("positive")],
            })
        }
        "detox_like" => {
            let mut vocab = Vocabulary::with_bos(["you", "are", "so", "nice", "kind", "calm", "idiot", "stupid"])?;
            vocab.add_lexicon_labels("toxic", &["idiot", "stupid"])?;
            Ok(TaskDefinition {
                vocab,
                scorers: vec![ScorerSpec::Learned {
                    avoid: "toxic".into(),
                    mode: TrainingMode::PrefixDecomposed,
                    corpus: 2000,
                    steps: 500,
                }],
            })
        }
        // Ids 1..=20 are w01..w20. The first two lexicons share 3 of their
        // 10 members.
        "multi_attr_2" | "multi_attr_3" => {
            let mut vocab = Vocabulary::with_bos(words(1..=20))?;
            lexicon(&mut vocab, "topic", 1..=10)?;
            lexicon(&mut vocab, "sentiment", 8..=17)?;
            let mut scorers = vec![lex("topic"), lex("sentiment")];
            if name == "multi_attr_3" {
                lexicon(&mut vocab, "tense", (15..=20).chain(1..=4))?;
                scorers.push(lex("tense"));
            }
            Ok(TaskDefinition { vocab, scorers })
        }
        other => Err(Error::Config(format!("unknown task {other:?}; expected one of {TASKS:?}"))),
    }
}

/// Outcome of fitting one learned scorer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScorerFitReport {
    pub name: String,
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub single_class: bool,
}

#[derive(Debug)]
pub struct BuiltTask {
    pub task: Task,
    pub scorer_fits: Vec<ScorerFitReport>,
}

/// Labelled sequences for a learned "avoid" scorer: half drawn from the
/// clean tokens only, half from the whole sampleable vocabulary.
pub fn avoid_corpus(vocab: &Vocabulary, mask: &[bool], size: usize, max_len: usize, rng: &mut rng::Rng) -> Vec<(Vec<TokenId>, bool)> {
    let all: Vec<TokenId> = vocab.sampleable().collect();
    let clean: Vec<TokenId> = all.iter().copied().filter(|&t| !mask[t as usize]).collect();
    let rule = AttributeRule::Avoids { mask: mask.to_vec() };
    (0..size)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let pool = if clean.is_empty() || rng.random_bool(0.5) { &all } else { &clean };
            let y: Vec<TokenId> = (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            let c = rule.satisfied(&y);
            (y, c)
        })
        .collect()
}

fn build_scorer(
    vocab: &Vocabulary,
    spec: &ScorerSpec,
    index: usize,
    config: &ExperimentConfig,
) -> Result<(Box<dyn AttributeScorer>, AttributeRule, Option<ScorerFitReport>)> {
    match spec {
        ScorerSpec::Lexicon { lexicon, gain } => {
            let scorer = LexiconScorer::from_vocab(vocab, lexicon, *gain)?;
            let rule = AttributeRule::LexiconMajority {
                mask: vocab.lexicon_mask(lexicon)?,
            };
            Ok((Box::new(scorer), rule, None))
        }
        ScorerSpec::Suffix { class, window, epsilon } => {
            let scorer = SuffixScorer::from_vocab(vocab, class, *window, *epsilon)?;
            let rule = AttributeRule::SuffixIn {
                mask: vocab.lexicon_mask(class)?,
                window: *window,
            };
            Ok((Box::new(scorer), rule, None))
        }
        ScorerSpec::Learned {
            avoid,
            mode,
            corpus,
            steps,
        } => {
            let mask = vocab.lexicon_mask(avoid)?;
            let mut rng = rng::stream(config.seed, tag::SCORER, &[index as u64]);
            let data = avoid_corpus(vocab, &mask, *corpus, config.max_len, &mut rng);
            let name = format!("non_{avoid}");
            let fit = train_learned_scorer(
                name.clone(),
                vocab.size(),
                &data,
                *mode,
                LearnedScorerConfig {
                    steps: *steps,
                    ..Default::default()
                },
            )?;
            let report = ScorerFitReport {
                name,
                samples: fit.samples,
                initial_loss: fit.losses[0],
                final_loss: *fit.losses.last().unwrap_or(&f64::NAN),
                single_class: fit.single_class,
            };
            Ok((Box::new(fit.scorer), AttributeRule::Avoids { mask }, Some(report)))
        }
    }
}

/// Instantiates the configured task, fitting any learned scorers.
pub fn build_task(config: &ExperimentConfig) -> Result<BuiltTask> {
    let def = task_definition(&config.task, config.gain)?;
    let specs = config.scorers.clone().unwrap_or(def.scorers);
    if specs.is_empty() {
        return Err(Error::Config("at least one scorer is required".into()));
    }
    let mut scorers = Vec::with_capacity(specs.len());
    let mut rules = Vec::with_capacity(specs.len());
    let mut scorer_fits = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let (scorer, rule, fit) = build_scorer(&def.vocab, spec, i, config)?;
        scorers.push(scorer);
        rules.push(rule);
        scorer_fits.extend(fit);
    }
    Ok(BuiltTask {
        task: Task {
            name: config.task.clone(),
            vocab: def.vocab,
            scorers,
            rules,
            prefix_len: config.prefix_len,
        },
        scorer_fits,
    })
}
