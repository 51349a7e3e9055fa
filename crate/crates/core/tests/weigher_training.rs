use tokrl::experiment::run::{fit_weigher, initial_policy, rejection_corpus};
use tokrl::experiment::tasks::build_task;
use tokrl::experiment::ExperimentConfig;
use tokrl::policy;
use tokrl::rng::{stream, tag};
use tokrl::scorers::annotate;
use tokrl::weigher::{self, Combiner, WeigherParams, WeigherSample};

fn multi_config() -> ExperimentConfig {
    ExperimentConfig {
        task: "multi_attr_2".into(),
        ..Default::default()
    }
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

#[test]
fn weigher_rewards_spread_wider_than_average() {
    let cfg = multi_config();
    let task = build_task(&cfg).unwrap().task;
    let reference = initial_policy(&cfg, &task);
    let fit = fit_weigher(&cfg, &task, &reference).unwrap();
    let learned = Combiner::Weigher(fit.params);
    let (mut w, mut a) = (Vec::new(), Vec::new());
    for i in 0..64 {
        let mut rng = stream(cfg.seed, tag::EVAL, &[i]);
        let prefix = task.sample_prefix(&mut rng);
        let traj = annotate(&policy::rollout(&reference, &prefix, cfg.max_len, &mut rng).unwrap(), &task.scorers).unwrap();
        w.extend(weigher::multi_attribute_reward(&traj, &learned).unwrap());
        a.extend(weigher::multi_attribute_reward(&traj, &Combiner::Average).unwrap());
    }
    assert!(variance(&w) > variance(&a), "{} <= {}", variance(&w), variance(&a));
}

fn corpus_samples(cfg: &ExperimentConfig) -> (Vec<WeigherSample>, Vec<WeigherSample>, WeigherParams) {
    let task = build_task(cfg).unwrap().task;
    let reference = initial_policy(cfg, &task);
    let corpus = rejection_corpus(&task, &reference, 200, cfg.max_len, cfg.seed).unwrap();
    let (train, held) = corpus.split_at(160);
    let train = weigher::build_samples(train, &reference, &task.scorers).unwrap();
    let held = weigher::build_samples(held, &reference, &task.scorers).unwrap();
    let init = WeigherParams::init(cfg.hidden_dim, cfg.weigher_width, task.attributes(), &mut stream(cfg.seed, tag::WEIGHER_INIT, &[]));
    (train, held, init)
}

#[test]
fn held_out_objective_non_decreasing_over_first_steps() {
    let cfg = multi_config();
    let (train, held, init) = corpus_samples(&cfg);
    let values: Vec<f64> = (0..=10)
        .map(|k| {
            let p = weigher::train_weigher(&init, &train, k, cfg.weigher_lr).unwrap().params;
            weigher::objective(&p, &held).unwrap()
        })
        .collect();
    for w in values.windows(2) {
        assert!(w[1] >= w[0], "{values:?}");
    }
    let history = weigher::train_weigher(&init, &train, 10, cfg.weigher_lr).unwrap().objective;
    for w in history.windows(2) {
        assert!(w[1] >= w[0], "{history:?}");
    }
}

#[test]
fn argmax_survives_common_reward_scaling() {
    let cfg = multi_config();
    let (train, _, init) = corpus_samples(&cfg);
    let scaled: Vec<WeigherSample> = train
        .iter()
        .map(|s| WeigherSample {
            rewards: s.rewards.iter().map(|r| 4.0 * r).collect(),
            ..s.clone()
        })
        .collect();
    let a = weigher::train_weigher(&init, &train, 300, cfg.weigher_lr).unwrap().params;
    let b = weigher::train_weigher(&init, &scaled, 300, cfg.weigher_lr).unwrap().params;
    // Adam's epsilon is not scale-free, so exact ties may resolve either way;
    // every clear preference must survive.
    let argmax = |w: &[f64]| (0..w.len()).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
    let margin = |w: &[f64]| {
        let mut v = w.to_vec();
        v.sort_by(|x, y| y.total_cmp(x));
        v[0] - v[1]
    };
    let mut near_ties = 0;
    for s in &train {
        let wa = weigher::weigher_forward(&a, &s.hidden).unwrap();
        let wb = weigher::weigher_forward(&b, &s.hidden).unwrap();
        if margin(&wa) < 0.01 || margin(&wb) < 0.01 {
            near_ties += 1;
            continue;
        }
        assert_eq!(argmax(&wa), argmax(&wb), "{wa:?} vs {wb:?}");
    }
    assert!(near_ties * 100 <= train.len(), "{near_ties} near-ties of {}", train.len());
}

#[test]
fn fitted_weigher_reports_simplex_means() {
    let cfg = multi_config();
    let task = build_task(&cfg).unwrap().task;
    let fit = fit_weigher(&cfg, &task, &initial_policy(&cfg, &task)).unwrap();
    assert_eq!(fit.mean_weights.len(), 2);
    assert!((fit.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(fit.objective.last().unwrap() > &fit.objective[0]);
    assert_eq!(fit.corpus_size, cfg.corpus_size);
}
