//! Exact brute-force references.
//!
//! Nothing here calls into the code it checks: sequence probabilities are
//! enumerated directly, quantiles are found by counting, and gradients come
//! from central differences of the objective alone.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;
pub const BAYES_TOL: f64 = 1e-10;

/// Next-token distribution over `0..vocab_size` given a prefix.
pub type EnumPolicy = Box<dyn Fn(&[u32]) -> Vec<f64> + Send + Sync>;
pub type Predicate = Box<dyn Fn(&[u32]) -> bool + Send + Sync>;

/// A task small enough to enumerate every complete sequence.
pub struct EnumerableTask {
    pub vocab_size: usize,
    pub horizon: usize,
    pub policy: EnumPolicy,
    pub predicate: Predicate,
}

impl EnumerableTask {
    pub const MAX_SEQUENCES: usize = 10_000;

    pub fn new(vocab_size: usize, horizon: usize, policy: EnumPolicy, predicate: Predicate) -> Result<Self> {
        let count = (vocab_size as f64).powi(horizon as i32);
        if vocab_size == 0 || count > Self::MAX_SEQUENCES as f64 {
            return Err(Error::Config(format!(
                "{vocab_size}^{horizon} sequences exceed the enumeration budget"
            )));
        }
        Ok(Self {
            vocab_size,
            horizon,
            policy,
            predicate,
        })
    }

    pub fn uniform_policy(vocab_size: usize) -> EnumPolicy {
        Box::new(move |_| vec![1.0 / vocab_size as f64; vocab_size])
    }

    /// A fixed but arbitrary conditional distribution per prefix, derived
    /// from `seed` and the prefix contents.
    pub fn random_policy(vocab_size: usize, seed: u64) -> EnumPolicy {
        Box::new(move |prefix| {
            let idx: Vec<u64> = std::iter::once(prefix.len() as u64)
                .chain(prefix.iter().map(|&t| t as u64))
                .collect();
            let mut r = rng::stream(seed, 0x0AC1E, &idx);
            let n: Normal<f64> = Normal::new(0.0, 1.5).expect("valid std");
            let w: Vec<f64> = (0..vocab_size).map(|_| n.sample(&mut r).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    /// Each complete sequence independently satisfies the predicate with
    /// probability `p`, keyed by `seed`.
    pub fn random_predicate(seed: u64, p: f64) -> Predicate {
        Box::new(move |seq| {
            let idx: Vec<u64> = seq.iter().map(|&t| t as u64).collect();
            rng::stream(seed, 0xC0DE, &idx).random::<f64>() < p
        })
    }

    /// Every complete sequence with its probability under the policy.
    fn enumerate(&self) -> Vec<(Vec<u32>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for _ in 0..self.horizon {
            let mut next = Vec::with_capacity(out.len() * self.vocab_size);
            for (prefix, p) in out {
                let dist = (self.policy)(&prefix);
                for (v, pv) in dist.into_iter().enumerate() {
                    let mut s = prefix.clone();
                    s.push(v as u32);
                    next.push((s, p * pv));
                }
            }
            out = next;
        }
        out
    }
}

/// `P(c | y<=t)`: probability that a completion of `prefix` drawn from the
/// task policy satisfies the predicate.
pub fn exact_attr_posterior(task: &EnumerableTask, prefix: &[u32]) -> Result<f64> {
    if prefix.len() > task.horizon {
        return Err(Error::HorizonExceeded {
            len: prefix.len(),
            horizon: task.horizon,
        });
    }
    fn go(task: &EnumerableTask, prefix: &mut Vec<u32>) -> f64 {
        if prefix.len() == task.horizon {
            return if (task.predicate)(prefix) { 1.0 } else { 0.0 };
        }
        let dist = (task.policy)(prefix);
        let mut total = 0.0;
        for (v, pv) in dist.into_iter().enumerate() {
            prefix.push(v as u32);
            total += pv * go(task, prefix);
            prefix.pop();
        }
        total
    }
    Ok(go(task, &mut prefix.to_vec()))
}

#[derive(Clone, Debug)]
pub struct BayesReport {
    pub max_deviation: f64,
    /// (prefix, token) pairs compared.
    pub checked: usize,
    /// Prefixes skipped because `P(c | y<=t-1) = 0`.
    pub skipped: usize,
}

/// Compares the attribute-conditioned next-token distribution computed from
/// the joint over complete sequences against the posterior-ratio form
/// `P(c|y<=t) / P(c|y<=t-1) * P(y_t | y<=t-1)`, renormalised over tokens.
pub fn check_bayes_identity(task: &EnumerableTask) -> Result<BayesReport> {
    // joint[prefix] = P(prefix, c), accumulated from complete sequences
    let mut joint: HashMap<Vec<u32>, f64> = HashMap::new();
    for (seq, p) in task.enumerate() {
        if !(task.predicate)(&seq) {
            continue;
        }
        for t in 0..=seq.len() {
            *joint.entry(seq[..t].to_vec()).or_insert(0.0) += p;
        }
    }
    let joint_of = |p: &[u32]| joint.get(p).copied().unwrap_or(0.0);

    let mut report = BayesReport {
        max_deviation: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..task.horizon {
        let mut next = Vec::new();
        for prefix in frontier {
            let post_prev = exact_attr_posterior(task, &prefix)?;
            let children: Vec<Vec<u32>> = (0..task.vocab_size as u32)
                .map(|v| {
                    let mut c = prefix.clone();
                    c.push(v);
                    c
                })
                .collect();
            if post_prev == 0.0 {
                report.skipped += 1;
            } else {
                let base = (task.policy)(&prefix);
                let mut ratio_form = Vec::with_capacity(task.vocab_size);
                for (v, child) in children.iter().enumerate() {
                    ratio_form.push(exact_attr_posterior(task, child)? / post_prev * base[v]);
                }
                let norm: f64 = ratio_form.iter().sum();
                let denom = joint_of(&prefix);
                for (v, child) in children.iter().enumerate() {
                    let direct = joint_of(child) / denom;
                    let dev = (direct - ratio_form[v] / norm).abs();
                    report.max_deviation = report.max_deviation.max(dev);
                    report.checked += 1;
                }
            }
            next.extend(children);
        }
        frontier = next;
    }
    Ok(report)
}

/// Lower empirical quantiles found by counting, without sorting.
pub fn brute_force_quantiles(rewards: &[f64], q: usize) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward list"));
    }
    let n = rewards.len();
    (0..=q)
        .map(|k| {
            let rank = k * (n - 1) / q.max(1);
            rewards
                .iter()
                .copied()
                .find(|&v| {
                    let below = rewards.iter().filter(|&&x| x < v).count();
                    let at_or_below = rewards.iter().filter(|&&x| x <= v).count();
                    below <= rank && rank < at_or_below
                })
                .ok_or(Error::Empty("quantile rank"))
        })
        .collect()
}

/// Central-difference gradient of `objective` at `params`.
pub fn finite_difference(objective: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = objective(&x);
        x[i] = orig - h;
        let minus = objective(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(i));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative error, with the denominator floored so that entries
/// below `FD_ABS_FLOOR / FD_REL_TOL` are judged on absolute error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_ABS_FLOOR / FD_REL_TOL))
        .fold(0.0, f64::max)
}

/// Random tanh-squashed vector, handy as a synthetic hidden state.
pub fn random_unit_vector(len: usize, rng: &mut Rng) -> Vec<f64> {
    let n: Normal<f64> = Normal::new(0.0, 0.8).expect("valid std");
    (0..len).map(|_| n.sample(rng).tanh()).collect()
}

/// One named oracle comparison.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Random enumerable tasks (V = 4, T = 4) for the factorization identity.
    pub bayes_tasks: u64,
    /// Random reward lists for the dual quantile implementation.
    pub quantile_cases: u64,
    /// Random parameter draws per analytic gradient.
    pub gradient_seeds: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            bayes_tasks: 10,
            quantile_cases: 1000,
            gradient_seeds: 50,
        }
    }
}

/// Runs every oracle against the implementations it guards.
pub fn run_suite(config: SuiteConfig) -> Result<Vec<CheckOutcome>> {
    use crate::policy::{self, PolicyDims, PolicyParams};
    use crate::shaping::compute_quantiles;
    use crate::weigher::{self, WeigherParams, WeigherSample};

    let mut out = Vec::new();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..config.bayes_tasks {
        let task = EnumerableTask::new(
            4,
            4,
            EnumerableTask::random_policy(4, seed),
            EnumerableTask::random_predicate(seed ^ 0xBEEF, 0.3 + 0.04 * seed as f64),
        )?;
        let r = check_bayes_identity(&task)?;
        worst = worst.max(r.max_deviation);
        checked += r.checked;
    }
    out.push(CheckOutcome {
        name: "bayes_factorization_identity".into(),
        passed: worst <= BAYES_TOL,
        detail: format!("{} tasks, {checked} comparisons, max deviation {worst:.3e}", config.bayes_tasks),
    });

    let mut mismatches = 0;
    for case in 0..config.quantile_cases {
        let mut r = rng::stream(case, 0x0917, &[]);
        let n = r.random_range(1..300);
        let q = r.random_range(1..12);
        // coarse grid so ties are common
        let rewards: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 40.0).floor() / 40.0).collect();
        let fast = compute_quantiles(&rewards, q)?;
        if fast.boundaries() != brute_force_quantiles(&rewards, q)?.as_slice() {
            mismatches += 1;
        }
    }
    out.push(CheckOutcome {
        name: "quantile_dual_implementation".into(),
        passed: mismatches == 0,
        detail: format!("{} cases, {mismatches} mismatches", config.quantile_cases),
    });

    let dims = PolicyDims::new(7, 0);
    let mut worst = [0.0f64; 3];
    for seed in 0..config.gradient_seeds {
        let mut r = rng::stream(seed, 0x06AD, &[]);
        let mut params = PolicyParams::init(dims, &mut r);
        params.scale(5.0);
        let mut reference = PolicyParams::init(dims, &mut r);
        reference.scale(5.0);
        let ctx: Vec<u32> = (0..r.random_range(0..7)).map(|_| r.random_range(0..7)).collect();
        let action = r.random_range(1..7);
        let at = |x: &[f64]| PolicyParams::from_vec(dims, x.to_vec()).expect("same shape");

        let (_, g) = policy::grad_log_prob(&params, &ctx, action);
        let n = finite_difference(|x| policy::log_prob(&at(x), &ctx, action), params.as_slice(), FD_STEP)?;
        worst[0] = worst[0].max(max_relative_error(g.as_slice(), &n));

        let (_, g) = policy::grad_entropy(&params, &ctx);
        let n = finite_difference(|x| policy::entropy(&at(x), &ctx), params.as_slice(), FD_STEP)?;
        worst[1] = worst[1].max(max_relative_error(g.as_slice(), &n));

        let (_, g) = policy::grad_kl(&params, &reference, &ctx);
        let n = finite_difference(|x| policy::kl_to_reference(&at(x), &reference, &ctx), params.as_slice(), FD_STEP)?;
        worst[2] = worst[2].max(max_relative_error(g.as_slice(), &n));
    }
    for (name, w) in ["grad_log_prob", "grad_entropy", "grad_kl"].iter().zip(worst) {
        out.push(CheckOutcome {
            name: format!("finite_difference_{name}"),
            passed: w <= FD_REL_TOL,
            detail: format!("{} seeds, max relative error {w:.3e}", config.gradient_seeds),
        });
    }

    let mut worst = 0.0f64;
    for seed in 0..config.gradient_seeds {
        let mut r = rng::stream(seed, 0x3E16, &[]);
        let (d, h, n_out) = (16, 12, 3);
        let mut wp = WeigherParams::init(d, h, n_out, &mut r);
        wp.as_mut_slice().iter_mut().for_each(|x| *x *= 3.0);
        let samples: Vec<WeigherSample> = (0..12)
            .map(|_| WeigherSample {
                hidden: random_unit_vector(d, &mut r),
                rewards: (0..n_out).map(|_| r.random::<f64>()).collect(),
                weight: 1.0 / 12.0,
            })
            .collect();
        let (_, g) = weigher::objective_gradient(&wp, &samples)?;
        let numeric = finite_difference(
            |x| {
                let mut p = wp.clone();
                p.as_mut_slice().copy_from_slice(x);
                weigher::objective(&p, &samples).unwrap_or(f64::NAN)
            },
            wp.as_slice(),
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(g.as_slice(), &numeric));
    }
    out.push(CheckOutcome {
        name: "finite_difference_weigher_objective".into(),
        passed: worst <= FD_REL_TOL,
        detail: format!("{} seeds, max relative error {worst:.3e}", config.gradient_seeds),
    });

    Ok(out)
}
