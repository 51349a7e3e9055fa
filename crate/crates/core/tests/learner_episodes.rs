use tokrl::experiment::run::{initial_policy, run, RunOptions};
use tokrl::experiment::tasks::build_task;
use tokrl::experiment::ExperimentConfig;
use tokrl::learner::{train, EpisodeReport, Trainer};
use tokrl::shaping::ShapingMode;
use tokrl::weigher::Combiner;

fn config(episodes: usize) -> ExperimentConfig {
    ExperimentConfig {
        episodes,
        ..Default::default()
    }
}

fn strip_clock(reports: &[EpisodeReport]) -> Vec<EpisodeReport> {
    reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_clock_ms = 0.0;
            r
        })
        .collect()
}

#[test]
fn zero_episodes_leave_params_untouched() {
    let cfg = config(0);
    let task = build_task(&cfg).unwrap().task;
    let init = initial_policy(&cfg, &task);
    let out = train(&cfg.train_config(), &task, init.clone(), Combiner::Average, |_, _| Ok(())).unwrap();
    assert!(out.reports.is_empty());
    assert_eq!(out.params, init);
    assert_eq!(out.reference.params(), &init);
}

#[test]
fn same_seed_gives_identical_reports() {
    let cfg = config(4);
    let a = run(&cfg, RunOptions::default()).unwrap();
    let b = run(&cfg, RunOptions::default()).unwrap();
    assert_eq!(strip_clock(&a.reports), strip_clock(&b.reports));
    assert_eq!(a.params, b.params);
    let c = run(&ExperimentConfig { seed: 1, ..cfg }, RunOptions::default()).unwrap();
    assert_ne!(strip_clock(&a.reports), strip_clock(&c.reports));
}

#[test]
fn reference_is_frozen() {
    let cfg = config(3);
    let task = build_task(&cfg).unwrap().task;
    let init = initial_policy(&cfg, &task);
    let out = train(&cfg.train_config(), &task, init.clone(), Combiner::Average, |_, _| Ok(())).unwrap();
    assert_eq!(out.reference.params(), &init);
    assert_ne!(out.params, init);
}

#[test]
fn unshaped_single_lifetime_trains_on_raw_rewards_of_this_episode() {
    let cfg = ExperimentConfig {
        episodes: 3,
        lifetime: 1,
        shaping: ShapingMode::None,
        ..Default::default()
    };
    let out = run(&cfg, RunOptions::default()).unwrap();
    let per_episode = cfg.rollouts_per_episode * cfg.max_len;
    for r in &out.reports {
        assert_eq!(r.pool_size, per_episode);
        assert_eq!(r.evictions, per_episode);
        assert!((r.mean_shaped_reward - r.mean_raw_reward).abs() < 1e-12);
    }
}

#[test]
fn pool_grows_until_lifetime_then_plateaus() {
    let cfg = config(5);
    let task = build_task(&cfg).unwrap().task;
    let mut trainer = Trainer::new(cfg.train_config(), &task, initial_policy(&cfg, &task), Combiner::Average).unwrap();
    let per_episode = cfg.rollouts_per_episode * cfg.max_len;
    let sizes: Vec<(usize, usize)> = (0..5)
        .map(|_| {
            let r = trainer.train_episode().unwrap();
            (r.pool_size, r.evictions)
        })
        .collect();
    let expected: Vec<(usize, usize)> = [(1, 0), (2, 0), (3, 1), (3, 1), (3, 1)]
        .iter()
        .map(|&(s, e)| (s * per_episode, e * per_episode))
        .collect();
    assert_eq!(sizes, expected);
}

#[test]
fn sentence_feedback_rewards_are_flat_per_sequence() {
    let cfg = ExperimentConfig {
        episodes: 1,
        feedback: tokrl::learner::Feedback::Sentence,
        shaping: ShapingMode::None,
        lifetime: 1,
        ..Default::default()
    };
    let task = build_task(&cfg).unwrap().task;
    let mut trainer = Trainer::new(cfg.train_config(), &task, initial_policy(&cfg, &task), Combiner::Average).unwrap();
    let trajectories = trainer.explore().unwrap();
    for traj in &trajectories {
        let r = tokrl::learner::token_rewards(traj, &task, cfg.feedback, &trainer.combiner).unwrap();
        assert!(r.iter().all(|&x| x == r[0]));
    }
    trainer.train_episode().unwrap();
}

fn final_report(cfg: &ExperimentConfig) -> EpisodeReport {
    run(cfg, RunOptions::default()).unwrap().reports.pop().unwrap()
}

#[test]
fn kl_penalty_anchors_the_policy() {
    let free = final_report(&ExperimentConfig { beta: 0.0, ..config(200) });
    let anchored = final_report(&ExperimentConfig { beta: 0.2, ..config(200) });
    assert!(anchored.mean_kl < free.mean_kl, "{} >= {}", anchored.mean_kl, free.mean_kl);
}

#[test]
fn entropy_bonus_keeps_diversity() {
    let plain = final_report(&ExperimentConfig { alpha: 0.0, ..config(200) });
    let bonus = final_report(&ExperimentConfig { alpha: 0.2, ..config(200) });
    assert!(bonus.dist[2] >= plain.dist[2], "{} < {}", bonus.dist[2], plain.dist[2]);
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (num, den) = ys.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, y)| {
        let dx = i as f64 - mx;
        (a + dx * (y - my), b + dx * dx)
    });
    num / den
}

#[test]
fn raw_reward_trends_upward_early() {
    let positive = (0..5)
        .filter(|&seed| {
            let out = run(&ExperimentConfig { seed, ..config(20) }, RunOptions::default()).unwrap();
            let ys: Vec<f64> = out.reports.iter().map(|r| r.mean_raw_reward).collect();
            slope(&ys) > 0.0
        })
        .count();
    assert!(positive >= 4, "only {positive} of 5 seeds improved");
}
