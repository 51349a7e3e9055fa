//! Single runs, evaluation and ablation sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CombineMode, ExperimentConfig};
use super::report::{self, ArmSummary, MetricRow, MetricWriter, RunSummary};
use super::tasks::{build_task, BuiltTask};
use crate::error::{Error, Result};
use crate::learner::{self, EpisodeReport};
use crate::metrics;
use crate::policy::{self, PolicyDims, PolicyParams};
use crate::rng::{self, tag};
use crate::task::Task;
use crate::types::Sequence;
use crate::weigher::{self, Combiner, WeigherParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Rejection sampling gives up after this many attempts per wanted sequence.
const MAX_ATTEMPTS_PER_SAMPLE: usize = 1000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub task: String,
    /// Episodes of RL already applied.
    pub episode: usize,
    pub params: PolicyParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeigherCheckpoint {
    pub version: u32,
    pub task: String,
    pub attributes: Vec<String>,
    pub params: WeigherParams,
    pub objective: Vec<f64>,
}

pub fn policy_dims(config: &ExperimentConfig, task: &Task) -> PolicyDims {
    PolicyDims {
        context_window: config.context_window,
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        ..PolicyDims::new(task.vocab.size(), task.vocab.bos())
    }
}

/// Freshly initialised policy for the configured seed.
pub fn initial_policy(config: &ExperimentConfig, task: &Task) -> PolicyParams {
    PolicyParams::init(policy_dims(config, task), &mut rng::stream(config.seed, tag::INIT, &[]))
}

/// Samples rollouts from `params` until `size` of them satisfy every task
/// rule. Attempt `i` always uses the same RNG substream, so the result does
/// not depend on the thread count.
pub fn rejection_corpus(task: &Task, params: &PolicyParams, size: usize, max_len: usize, seed: u64) -> Result<Vec<Sequence>> {
    let mut corpus = Vec::with_capacity(size);
    let limit = size.saturating_mul(MAX_ATTEMPTS_PER_SAMPLE);
    let batch = (4 * size).max(64);
    let mut start = 0usize;
    while corpus.len() < size && start < limit {
        let end = (start + batch).min(limit);
        let found = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(seed, tag::CORPUS, &[i as u64]);
                let prefix = task.sample_prefix(&mut rng);
                let traj = policy::rollout(params, &prefix, max_len, &mut rng)?;
                Ok(task.satisfies_all(traj.generated()).then(|| traj.into_sequence()))
            })
            .collect::<Result<Vec<_>>>()?;
        corpus.extend(found.into_iter().flatten().take(size - corpus.len()));
        start = end;
    }
    if corpus.is_empty() {
        return Err(Error::Empty("rejection-sampled corpus"));
    }
    Ok(corpus)
}

#[derive(Clone, Debug)]
pub struct WeigherFit {
    pub params: WeigherParams,
    pub objective: Vec<f64>,
    pub mean_weights: Vec<f64>,
    pub corpus_size: usize,
}

/// Trains a weigher on hidden states of `reference` over a corpus that
/// satisfies every attribute.
pub fn fit_weigher(config: &ExperimentConfig, task: &Task, reference: &PolicyParams) -> Result<WeigherFit> {
    let corpus = rejection_corpus(task, reference, config.corpus_size, config.max_len, config.seed)?;
    let samples = weigher::build_samples(&corpus, reference, &task.scorers)?;
    let init = WeigherParams::init(
        reference.dims().hidden_dim,
        config.weigher_width,
        task.attributes(),
        &mut rng::stream(config.seed, tag::WEIGHER_INIT, &[]),
    );
    let trained = weigher::train_weigher(&init, &samples, config.weigher_steps, config.weigher_lr)?;
    let mean_weights = mean_weights(&trained.params, &samples)?;
    Ok(WeigherFit {
        params: trained.params,
        objective: trained.objective,
        mean_weights,
        corpus_size: corpus.len(),
    })
}

fn mean_weights(wp: &WeigherParams, samples: &[weigher::WeigherSample]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; wp.outputs()];
    for s in samples {
        for (a, w) in acc.iter_mut().zip(weigher::weigher_forward(wp, &s.hidden)?) {
            *a += s.weight * w;
        }
    }
    Ok(acc)
}

/// Optional inputs that override the config-driven defaults.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub init: Option<PolicyParams>,
    pub weigher: Option<WeigherParams>,
    pub run_id: Option<String>,
}

/// Everything a run needs before the first episode.
pub struct Prepared {
    pub built: BuiltTask,
    /// Starting policy; also the frozen reference.
    pub params: PolicyParams,
    pub combiner: Combiner,
    pub warmup_log_likelihood: Vec<f64>,
    pub weigher_objective: Vec<f64>,
    pub weigher_mean_weights: Vec<f64>,
}

/// Builds the task, initialises (and optionally warms up) the policy, and
/// trains the weigher when one is needed.
pub fn prepare(config: &ExperimentConfig, init: Option<PolicyParams>, weigher: Option<WeigherParams>) -> Result<Prepared> {
    config.validate()?;
    let built = build_task(config)?;
    let task = &built.task;
    let mut warmup_log_likelihood = Vec::new();
    let params = match init {
        Some(p) => {
            if *p.dims() != policy_dims(config, task) {
                return Err(Error::Config("checkpoint dimensions do not match the config".into()));
            }
            p
        }
        None => {
            let p = initial_policy(config, task);
            if config.warmup_steps > 0 {
                let corpus = rejection_corpus(task, &p, config.corpus_size, config.max_len, config.seed)?;
                let w = policy::mle_warmup(&p, &corpus, config.warmup_steps, config.warmup_lr)?;
                warmup_log_likelihood = w.log_likelihood;
                w.params
            } else {
                p
            }
        }
    };
    let (combiner, weigher_objective, weigher_mean_weights) = match (config.combine, task.attributes()) {
        (CombineMode::Average, _) | (CombineMode::Weigher, 1) => (Combiner::Average, Vec::new(), Vec::new()),
        (CombineMode::Weigher, n) => match weigher {
            Some(wp) => {
                if wp.outputs() != n || wp.input_dim() != params.dims().hidden_dim {
                    return Err(Error::Config("weigher checkpoint does not match the task".into()));
                }
                (Combiner::Weigher(wp), Vec::new(), Vec::new())
            }
            None => {
                let fit = fit_weigher(config, task, &params)?;
                (Combiner::Weigher(fit.params), fit.objective, fit.mean_weights)
            }
        },
    };
    Ok(Prepared {
        built,
        params,
        combiner,
        warmup_log_likelihood,
        weigher_objective,
        weigher_mean_weights,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub reports: Vec<EpisodeReport>,
    pub rows: Vec<MetricRow>,
    pub summary: RunSummary,
    pub params: PolicyParams,
    pub reference: PolicyParams,
}

pub fn default_run_id(config: &ExperimentConfig) -> String {
    format!("{}-seed{}", config.task, config.seed)
}

/// Trains one policy. With `options.out` set, writes `metrics.csv` (one row
/// per episode, streamed), `summary.json`, `config.toml`, `policy.json` and,
/// for learned aggregation, `weigher.json`.
pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutput> {
    let start = Instant::now();
    let run_id = options.run_id.clone().unwrap_or_else(|| default_run_id(config));
    let prepared = prepare(config, options.init, options.weigher)?;
    let task = &prepared.built.task;
    let attributes = task.attribute_names();

    let out = options.out.as_deref();
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
            if let Combiner::Weigher(wp) = &prepared.combiner {
                report::write_json(
                    &dir.join("weigher.json"),
                    &WeigherCheckpoint {
                        version: CHECKPOINT_VERSION,
                        task: config.task.clone(),
                        attributes: attributes.clone(),
                        params: wp.clone(),
                        objective: prepared.weigher_objective.clone(),
                    },
                )?;
            }
            Some(MetricWriter::create(&dir.join("metrics.csv"), &attributes)?)
        }
        None => None,
    };

    let mut rows = Vec::with_capacity(config.episodes);
    let outcome = learner::train(
        &config.train_config(),
        task,
        prepared.params.clone(),
        prepared.combiner.clone(),
        |rep, params| {
            let row = MetricRow::from_report(&run_id, config.seed, &attributes, rep);
            if let Some(w) = writer.as_mut() {
                w.write(&row)?;
            }
            rows.push(row);
            if let (Some(dir), true) = (out, config.checkpoint_every > 0 && (rep.episode + 1) % config.checkpoint_every.max(1) == 0) {
                save_policy(&dir.join(format!("policy-ep{}.json", rep.episode + 1)), &config.task, rep.episode + 1, params)?;
            }
            Ok(())
        },
    )?;
    drop(writer);

    let summary = RunSummary {
        run_id: run_id.clone(),
        seed: config.seed,
        task: config.task.clone(),
        attributes,
        metrics: report::run_metrics(&rows, config.final_window),
        weigher_objective: prepared.weigher_objective.clone(),
        weigher_mean_weights: prepared.weigher_mean_weights.clone(),
        scorer_fits: prepared.built.scorer_fits.clone(),
        wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        config: config.clone(),
    };
    if let Some(dir) = out {
        save_policy(&dir.join("policy.json"), &config.task, outcome.reports.len(), &outcome.params)?;
        report::write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(RunOutput {
        run_id,
        reports: outcome.reports,
        rows,
        summary,
        params: outcome.params,
        reference: outcome.reference.params().clone(),
    })
}

pub fn save_policy(path: &Path, task: &str, episode: usize, params: &PolicyParams) -> Result<()> {
    report::write_json(
        path,
        &PolicyCheckpoint {
            version: CHECKPOINT_VERSION,
            task: task.to_string(),
            episode,
            params: params.clone(),
        },
    )
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    let ckpt: PolicyCheckpoint = report::read_json(path)?;
    check_version(ckpt.version)?;
    Ok(ckpt)
}

pub fn load_weigher(path: &Path) -> Result<WeigherCheckpoint> {
    let ckpt: WeigherCheckpoint = report::read_json(path)?;
    check_version(ckpt.version)?;
    Ok(ckpt)
}

fn check_version(version: u32) -> Result<()> {
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    Ok(())
}

/// Metrics of a fixed policy on fresh rollouts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: usize,
    pub correctness: Vec<(String, f64)>,
    pub mean_correctness: f64,
    pub dist: [f64; 3],
    pub ppl_proxy: f64,
    pub samples: Vec<String>,
}

/// Samples `rollouts` generations from `params` and scores them with the
/// exact task rules; `eval_model` supplies the perplexity proxy.
pub fn evaluate(task: &Task, params: &PolicyParams, eval_model: &PolicyParams, rollouts: usize, max_len: usize, seed: u64) -> Result<EvalReport> {
    let sequences = (0..rollouts as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tag::EVAL, &[i]);
            let prefix = task.sample_prefix(&mut rng);
            Ok(policy::rollout(params, &prefix, max_len, &mut rng)?.into_sequence())
        })
        .collect::<Result<Vec<Sequence>>>()?;
    let generations: Vec<&[u32]> = sequences.iter().map(|s| s.generated.as_slice()).collect();
    let correctness = task
        .attribute_names()
        .into_iter()
        .zip(&task.rules)
        .map(|(name, rule)| Ok((name, metrics::correctness(&generations, |g| rule.satisfied(g))?)))
        .collect::<Result<Vec<_>>>()?;
    let mean_correctness = correctness.iter().map(|(_, c)| c).sum::<f64>() / correctness.len() as f64;
    Ok(EvalReport {
        rollouts,
        mean_correctness,
        correctness,
        dist: [1, 2, 3].map(|n| metrics::dist_n(&generations, n)),
        ppl_proxy: metrics::ppl_proxy(&sequences, eval_model),
        samples: sequences.iter().take(10).map(|s| task.vocab.render(&s.full())).collect(),
    })
}

/// One `(value, seed)` cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub value: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub summary: RunSummary,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<SweepRun>,
}

impl SweepOutput {
    pub fn arm_runs<'a>(&'a self, value: &'a str) -> impl Iterator<Item = &'a SweepRun> + 'a {
        self.runs.iter().filter(move |r| r.value == value)
    }
}

/// Runs `config` once per `(value, seed)` with `axis` overridden. Runs are
/// independent and execute in parallel; each owns its output directory
/// `<out>/<axis>=<value>/seed-<seed>/`. The comparison table is rebuilt from
/// the written CSVs and saved as `<out>/comparison.csv`.
pub fn sweep(config: &ExperimentConfig, axis: &str, values: &[String], seeds: &[u64], out: Option<&Path>) -> Result<SweepOutput> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let cells: Vec<(String, u64, ExperimentConfig)> = values
        .iter()
        .map(|v| config.with_override(axis, v).map(|c| (v.clone(), c)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(v, c)| {
            seeds.iter().map(move |&s| {
                let cfg = ExperimentConfig { seed: s, ..c.clone() };
                (v.clone(), s, cfg)
            })
        })
        .collect();
    let run_dir = |v: &str, s: u64| out.map(|o| o.join(format!("{axis}={v}")).join(format!("seed-{s}")));
    let runs = cells
        .par_iter()
        .map(|(v, s, cfg)| {
            let output = run(
                cfg,
                RunOptions {
                    out: run_dir(v, *s),
                    run_id: Some(format!("{axis}={v}/seed-{s}")),
                    ..Default::default()
                },
            )?;
            Ok(SweepRun {
                value: v.clone(),
                seed: *s,
                rows: output.rows,
                summary: output.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let arms = match out {
        Some(dir) => {
            let groups: Vec<(String, Vec<PathBuf>)> = values
                .iter()
                .map(|v| {
                    let paths = seeds.iter().filter_map(|&s| run_dir(v, s)).map(|d| d.join("metrics.csv")).collect();
                    (v.clone(), paths)
                })
                .collect();
            let arms = report::compare_csvs(axis, &groups, config.final_window)?;
            report::write_comparison(&dir.join("comparison.csv"), &arms)?;
            report::write_json(&dir.join("comparison.json"), &arms)?;
            arms
        }
        None => values
            .iter()
            .map(|v| {
                let rows: Vec<Vec<MetricRow>> = runs.iter().filter(|r| &r.value == v).map(|r| r.rows.clone()).collect();
                report::arm_summary(axis, v, &rows, config.final_window)
            })
            .collect(),
    };
    Ok(SweepOutput { arms, runs })
}
