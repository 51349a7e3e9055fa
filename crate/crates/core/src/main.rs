use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tokrl::experiment::run::{self as runner, RunOptions, WeigherCheckpoint, CHECKPOINT_VERSION};
use tokrl::experiment::tasks::build_task;
use tokrl::experiment::{report, ExperimentConfig};
use tokrl::oracle::{self, SuiteConfig};
use tokrl::policy;
use tokrl::types::Sequence;

#[derive(Parser)]
#[command(name = "tokrl", version, about = "Token-level reward RL for attribute-controllable generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write metrics, summary and checkpoints.
    Train(TrainArgs),
    /// Repeat training over values of one config field and several seeds.
    Sweep(SweepArgs),
    /// Score a policy checkpoint on fresh rollouts.
    Eval(EvalArgs),
    /// Run the brute-force oracle checks.
    OracleCheck(OracleArgs),
    /// Maximum-likelihood warm-up of a freshly initialised policy.
    Warmup(WarmupArgs),
    /// Train and freeze a weigher for a multi-attribute task.
    TrainWeigher(TrainWeigherArgs),
}

/// Per-field overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    rollouts_per_episode: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lifetime: Option<u32>,
    #[arg(long)]
    feedback: Option<String>,
    #[arg(long)]
    shaping: Option<String>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    context_window: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    combine: Option<String>,
    #[arg(long)]
    weigher_width: Option<usize>,
    #[arg(long)]
    weigher_steps: Option<usize>,
    #[arg(long)]
    weigher_lr: Option<f64>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    warmup_lr: Option<f64>,
    #[arg(long)]
    final_window: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Generic `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        let named = [
            ("task", s(&self.task)),
            ("alpha", s(&self.alpha)),
            ("beta", s(&self.beta)),
            ("lr", s(&self.lr)),
            ("optimizer", s(&self.optimizer)),
            ("episodes", s(&self.episodes)),
            ("rollouts_per_episode", s(&self.rollouts_per_episode)),
            ("max_len", s(&self.max_len)),
            ("q", s(&self.q)),
            ("sigma", s(&self.sigma)),
            ("lifetime", s(&self.lifetime)),
            ("feedback", s(&self.feedback)),
            ("shaping", s(&self.shaping)),
            ("minibatch", s(&self.minibatch)),
            ("prefix_len", s(&self.prefix_len)),
            ("gain", s(&self.gain)),
            ("context_window", s(&self.context_window)),
            ("embed_dim", s(&self.embed_dim)),
            ("hidden_dim", s(&self.hidden_dim)),
            ("combine", s(&self.combine)),
            ("weigher_width", s(&self.weigher_width)),
            ("weigher_steps", s(&self.weigher_steps)),
            ("weigher_lr", s(&self.weigher_lr)),
            ("corpus_size", s(&self.corpus_size)),
            ("warmup_steps", s(&self.warmup_steps)),
            ("warmup_lr", s(&self.warmup_lr)),
            ("final_window", s(&self.final_window)),
            ("checkpoint_every", s(&self.checkpoint_every)),
        ];
        let mut pairs: Vec<(String, String)> = named
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in overrides.pairs()? {
        cfg = cfg.with_override(&k, &v).with_context(|| format!("override {k}={v}"))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Start from this policy checkpoint instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Use this frozen weigher checkpoint instead of training one.
    #[arg(long)]
    weigher: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config field to vary, e.g. `q`, `feedback`, `combine`, `alpha`.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: PathBuf,
    /// Evaluation model for the perplexity proxy; defaults to the config's
    /// initial policy.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    rollouts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = SuiteConfig::default().bayes_tasks)]
    bayes_tasks: u64,
    #[arg(long, default_value_t = SuiteConfig::default().quantile_cases)]
    quantile_cases: u64,
    #[arg(long, default_value_t = SuiteConfig::default().gradient_seeds)]
    gradient_seeds: u64,
    /// Write the outcomes here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WarmupArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// One sequence per line, whitespace-separated token labels. Defaults to
    /// rejection samples of the initial policy that satisfy every rule.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainWeigherArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// Policy whose hidden states feed the weigher; defaults to the config's
    /// initial policy.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&args.config), Some(args.seed), &args.overrides)?;
    let init = args
        .init
        .as_deref()
        .map(runner::load_policy)
        .transpose()?
        .map(|c| c.params);
    let weigher = args
        .weigher
        .as_deref()
        .map(runner::load_weigher)
        .transpose()?
        .map(|c| c.params);
    let output = runner::run(
        &cfg,
        RunOptions {
            out: Some(args.out.clone()),
            init,
            weigher,
            run_id: None,
        },
    )?;
    let m = &output.summary.metrics;
    println!(
        "{}: final correctness {:.4}, episodes to 0.8 {}, dist-3 {:.4}, ppl proxy {:.3}, kl {:.4}",
        output.run_id,
        m.final_correctness,
        m.episodes_to_threshold.map_or("never".to_string(), |e| e.to_string()),
        m.final_dist_3,
        m.final_ppl_proxy,
        m.final_kl
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), None, &args.overrides)?;
    let output = runner::sweep(&cfg, &args.axis, &args.values, &args.seeds, Some(&args.out))?;
    println!(
        "{:<24} {:>5} {:>10} {:>10} {:>12} {:>8}",
        "arm", "runs", "final_mean", "final_med", "ep_to_0.8", "dist3"
    );
    for arm in &output.arms {
        println!(
            "{:<24} {:>5} {:>10.4} {:>10.4} {:>12.1} {:>8.4}",
            format!("{}={}", arm.axis, arm.value),
            arm.runs,
            arm.final_correctness_mean,
            arm.final_correctness_median,
            arm.episodes_to_threshold_median,
            arm.final_dist_3_mean
        );
    }
    println!("wrote {}", args.out.join("comparison.csv").display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), None, &args.overrides)?;
    let built = build_task(&cfg)?;
    let params = runner::load_policy(&args.policy)?.params;
    let reference = match &args.reference {
        Some(p) => runner::load_policy(p)?.params,
        None => runner::initial_policy(&cfg, &built.task),
    };
    let rep = runner::evaluate(&built.task, &params, &reference, args.rollouts, cfg.max_len, args.seed)?;
    for (name, c) in &rep.correctness {
        println!("correctness[{name}] = {c:.4}");
    }
    println!("mean correctness = {:.4}", rep.mean_correctness);
    println!("dist-1/2/3 = {:.4} / {:.4} / {:.4}", rep.dist[0], rep.dist[1], rep.dist[2]);
    println!("ppl proxy = {:.4}", rep.ppl_proxy);
    for s in &rep.samples {
        println!("  {s}");
    }
    if let Some(out) = &args.out {
        report::write_json(out, &rep)?;
    }
    Ok(())
}

fn oracle_check(args: OracleArgs) -> Result<bool> {
    let start = std::time::Instant::now();
    let outcomes = oracle::run_suite(SuiteConfig {
        bayes_tasks: args.bayes_tasks,
        quantile_cases: args.quantile_cases,
        gradient_seeds: args.gradient_seeds,
    })?;
    for o in &outcomes {
        println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!("oracle suite finished in {:.2}s", start.elapsed().as_secs_f64());
    if let Some(out) = &args.out {
        report::write_json(out, &outcomes)?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

fn read_corpus(path: &Path, vocab: &tokrl::Vocabulary) -> Result<Vec<Sequence>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let corpus: Vec<Sequence> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(Sequence::new(vec![vocab.bos()], vocab.parse(l)?)))
        .collect::<tokrl::Result<_>>()?;
    if corpus.is_empty() {
        bail!("corpus {} has no sequences", path.display());
    }
    Ok(corpus)
}

fn warmup(args: WarmupArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), Some(args.seed), &args.overrides)?;
    let built = build_task(&cfg)?;
    let task = &built.task;
    let init = runner::initial_policy(&cfg, task);
    let corpus = match &args.corpus {
        Some(p) => read_corpus(p, &task.vocab)?,
        None => runner::rejection_corpus(task, &init, cfg.corpus_size, cfg.max_len, cfg.seed)?,
    };
    let steps = if cfg.warmup_steps == 0 { 200 } else { cfg.warmup_steps };
    let w = policy::mle_warmup(&init, &corpus, steps, cfg.warmup_lr)?;
    println!(
        "warm-up on {} sequences: mean log-likelihood {:.4} -> {:.4}",
        corpus.len(),
        w.log_likelihood[0],
        w.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    runner::save_policy(&args.out, &cfg.task, 0, &w.params)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn train_weigher(args: TrainWeigherArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), Some(args.seed), &args.overrides)?;
    let built = build_task(&cfg)?;
    let task = &built.task;
    if task.attributes() < 2 {
        bail!("task {} has a single attribute; nothing to weigh", cfg.task);
    }
    let params = match &args.policy {
        Some(p) => runner::load_policy(p)?.params,
        None => runner::initial_policy(&cfg, task),
    };
    let fit = runner::fit_weigher(&cfg, task, &params)?;
    println!(
        "weigher on {} sequences: objective {:.6} -> {:.6}",
        fit.corpus_size,
        fit.objective[0],
        fit.objective.last().copied().unwrap_or(f64::NAN)
    );
    for (name, w) in task.attribute_names().iter().zip(&fit.mean_weights) {
        println!("  mean weight[{name}] = {w:.4}");
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report::write_json(
        &args.out,
        &WeigherCheckpoint {
            version: CHECKPOINT_VERSION,
            task: cfg.task.clone(),
            attributes: task.attribute_names(),
            params: fit.params,
            objective: fit.objective,
        },
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::OracleCheck(a) => oracle_check(a),
        Command::Warmup(a) => warmup(a).map(|_| true),
        Command::TrainWeigher(a) => train_weigher(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
