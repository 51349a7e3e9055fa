//! Quantize-then-noise reward shaping.
//!
//! Pool rewards are bucketed into `q` empirical quantile intervals; each reward
//! is then perturbed by clamped Gaussian noise on its interval-relative
//! position, so order inside an interval is scrambled while order between
//! intervals is kept.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::DataPool;
use crate::rng::{self, Rng};
use crate::scorers::AttributeScorer;
use crate::types::Trajectory;

pub const DEFAULT_QUANTILES: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    boundaries: Vec<f64>,
}

impl QuantileTable {
    /// `q + 1` sorted boundaries; `q >= 1`.
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::Config("a quantile table needs at least 2 boundaries".into()));
        }
        if boundaries.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Config("quantile boundaries must be sorted".into()));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Number of intervals.
    pub fn q(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn low(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn high(&self) -> f64 {
        self.boundaries[self.q()]
    }

    /// Index `i` of the half-open interval `[b_i, b_{i+1})` holding `r`; the
    /// maximum reward belongs to the last interval. A reward equal to a
    /// repeated boundary value (a point mass filling a whole quantile) is
    /// placed in the first zero-width interval `[r, r]` instead.
    pub fn assign_interval(&self, r: f64) -> Result<usize> {
        if !(r >= self.low() && r <= self.high()) {
            return Err(Error::RewardOutOfRange {
                reward: r,
                low: self.low(),
                high: self.high(),
            });
        }
        let q = self.q();
        if let Some(k) = self.boundaries.windows(2).position(|w| w[0] == r && w[1] == r) {
            return Ok(k);
        }
        let i = self.boundaries[1..q].partition_point(|&b| b <= r);
        Ok(i.min(q - 1))
    }

    /// `[b_i, b_{i+1}]` for interval `i`.
    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }
}

/// Lower empirical quantiles: `b_k = sorted[floor(k (n - 1) / q)]`.
pub fn compute_quantiles(rewards: &[f64], q: usize) -> Result<QuantileTable> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward list"));
    }
    if q == 0 {
        return Err(Error::Config("quantile count q must be at least 1".into()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Config(format!("non-finite reward {bad}")));
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let boundaries = (0..=q).map(|k| sorted[k * (n - 1) / q]).collect();
    Ok(QuantileTable { boundaries })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }
}

/// Re-draws `r` inside its quantile interval.
pub fn noise_reward(table: &QuantileTable, r: f64, sigma: f64, rng: &mut Rng) -> Result<f64> {
    let i = table.assign_interval(r)?;
    let (lo, hi) = table.interval(i);
    let width = hi - lo;
    if sigma == 0.0 || width == 0.0 {
        return Ok(r);
    }
    let z: f64 = rng.sample(StandardNormal);
    let position = (r - lo) / width;
    let eps = (position + sigma * z).clamp(0.0, 1.0);
    Ok((lo + width * eps).clamp(lo, hi))
}

/// Adds clipped Gaussian noise straight to the raw reward, with no
/// quantization. Used by the quantization ablation.
pub fn noise_raw_reward(r: f64, sigma: f64, rng: &mut Rng) -> f64 {
    if sigma == 0.0 {
        return r;
    }
    let z: f64 = rng.sample(StandardNormal);
    r + (sigma * z).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingMode {
    /// Quantile bucketing followed by in-interval noise.
    #[default]
    QuantizeNoise,
    /// Noise applied to raw rewards, no bucketing.
    NoiseOnly,
    /// Raw rewards are used unchanged.
    None,
}

impl std::str::FromStr for ShapingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantize_noise" => Ok(Self::QuantizeNoise),
            "noise_only" => Ok(Self::NoiseOnly),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown shaping mode {other:?}"))),
        }
    }
}

/// Sets every live entry's shaped reward from quantiles over the whole pool.
///
/// Entry `j` draws its noise from the substream `(noise.seed, j)`.
pub fn shape_pool(pool: &mut DataPool, q: usize, noise: &NoiseConfig) -> Result<QuantileTable> {
    if pool.is_empty() {
        return Err(Error::Empty("data pool"));
    }
    let table = compute_quantiles(&pool.snapshot_rewards(), q)?;
    for (j, entry) in pool.entries_mut().iter_mut().enumerate() {
        let mut rng = rng::stream(noise.seed, rng::tag::NOISE, &[j as u64]);
        entry.shaped_reward = Some(noise_reward(&table, entry.raw_reward, noise.sigma, &mut rng)?);
    }
    Ok(table)
}

/// Applies `mode` to the pool; returns the quantile table when one was built.
pub fn apply_shaping(
    pool: &mut DataPool,
    mode: ShapingMode,
    q: usize,
    noise: &NoiseConfig,
) -> Result<Option<QuantileTable>> {
    match mode {
        ShapingMode::QuantizeNoise => shape_pool(pool, q, noise).map(Some),
        ShapingMode::NoiseOnly => {
            if pool.is_empty() {
                return Err(Error::Empty("data pool"));
            }
            for (j, entry) in pool.entries_mut().iter_mut().enumerate() {
                let mut rng = rng::stream(noise.seed, rng::tag::NOISE, &[j as u64]);
                entry.shaped_reward = Some(noise_raw_reward(entry.raw_reward, noise.sigma, &mut rng));
            }
            Ok(None)
        }
        ShapingMode::None => {
            for entry in pool.entries_mut() {
                entry.shaped_reward = Some(entry.raw_reward);
            }
            Ok(None)
        }
    }
}

/// Sentence-level feedback: every generated position gets `P(c | y)`.
pub fn sentence_level_rewards(traj: &Trajectory, scorer: &dyn AttributeScorer) -> Vec<f64> {
    if traj.is_empty() {
        return Vec::new();
    }
    vec![scorer.score_tokens(traj.generated()); traj.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::ConstantScorer;
    use crate::types::Vocabulary;
    use proptest::prelude::*;

    fn table(b: &[f64]) -> QuantileTable {
        QuantileTable::from_boundaries(b.to_vec()).unwrap()
    }

    #[test]
    fn quantiles_of_tenths() {
        let r: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = compute_quantiles(&r, 5).unwrap();
        assert_eq!(t.boundaries(), &[0.1, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let t1 = compute_quantiles(&[0.3, 0.9, 0.1], 1).unwrap();
        assert_eq!(t1.boundaries(), &[0.1, 0.9]);
        let flat = compute_quantiles(&[0.5; 7], 4).unwrap();
        assert!(flat.boundaries().iter().all(|&b| b == 0.5));
        assert!(compute_quantiles(&[], 3).is_err());
        assert!(compute_quantiles(&[1.0], 0).is_err());
    }

    #[test]
    fn interval_assignment() {
        let t = table(&[0.0, 0.5, 1.0]);
        assert_eq!(t.assign_interval(0.25).unwrap(), 0);
        assert_eq!(t.assign_interval(1.0).unwrap(), 1);
        assert_eq!(t.assign_interval(0.5).unwrap(), 1);
        assert_eq!(t.assign_interval(0.0).unwrap(), 0);
        assert!(t.assign_interval(1.01).is_err());
        assert!(t.assign_interval(-0.01).is_err());
        assert!(t.assign_interval(f64::NAN).is_err());
        // a repeated boundary value owns its zero-width interval
        let d = table(&[0.0, 0.5, 0.5, 1.0]);
        assert_eq!(d.assign_interval(0.5).unwrap(), 1);
        assert_eq!(d.assign_interval(0.7).unwrap(), 2);
        assert_eq!(d.assign_interval(1.0).unwrap(), 2);
        let low_tie = table(&[0.2, 0.2, 0.8]);
        assert_eq!(low_tie.assign_interval(0.2).unwrap(), 0);
        assert_eq!(low_tie.assign_interval(0.8).unwrap(), 1);
    }

    #[test]
    fn zero_noise_and_degenerate_width_are_identity() {
        let t = table(&[0.0, 0.3, 0.7, 1.0]);
        let mut rng = rng::stream(0, 0, &[]);
        for r in [0.0, 0.1, 0.3, 0.55, 0.999, 1.0] {
            assert_eq!(noise_reward(&t, r, 0.0, &mut rng).unwrap(), r);
        }
        let flat = table(&[0.5, 0.5]);
        assert_eq!(noise_reward(&flat, 0.5, 3.0, &mut rng).unwrap(), 0.5);
        assert!(noise_reward(&t, 1.5, 0.5, &mut rng).is_err());
    }

    #[test]
    fn large_noise_stays_in_unit_interval() {
        let t = table(&[0.0, 1.0]);
        let mut rng = rng::stream(42, 0, &[]);
        let mut moved = 0;
        for _ in 0..100_000 {
            let r = noise_reward(&t, 0.5, 10.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&r));
            if r != 0.5 {
                moved += 1;
            }
        }
        assert!(moved > 90_000);
    }

    #[test]
    fn two_reward_pool_keeps_order() {
        for seed in 0..200 {
            let mut pool = DataPool::new(3);
            pool.push(vec![0], 1, 0.2);
            pool.push(vec![0], 2, 0.8);
            shape_pool(&mut pool, 2, &NoiseConfig::new(50.0, seed).unwrap()).unwrap();
            let e = pool.entries();
            assert!(e[0].shaped_reward.unwrap() <= e[1].shaped_reward.unwrap());
        }
    }

    #[test]
    fn single_interval_can_permute() {
        let mut inverted = false;
        for seed in 0..200 {
            let mut pool = DataPool::new(3);
            for r in [0.1, 0.4, 0.6, 0.9] {
                pool.push(vec![0], 1, r);
            }
            shape_pool(&mut pool, 1, &NoiseConfig::new(10.0, seed).unwrap()).unwrap();
            let s: Vec<f64> = pool.entries().iter().map(|e| e.shaped_reward.unwrap()).collect();
            assert!(s.iter().all(|&x| (0.1..=0.9).contains(&x)));
            inverted |= s.windows(2).any(|w| w[0] > w[1]);
        }
        assert!(inverted);
    }

    #[test]
    fn shaping_modes() {
        let mut pool = DataPool::new(3);
        for r in [0.3, 0.45, 0.6, 0.7] {
            pool.push(vec![0], 1, r);
        }
        apply_shaping(&mut pool, ShapingMode::QuantizeNoise, 2, &NoiseConfig::new(0.0, 1).unwrap()).unwrap();
        assert!(pool.entries().iter().all(|e| e.shaped_reward == Some(e.raw_reward)));
        apply_shaping(&mut pool, ShapingMode::None, 2, &NoiseConfig::new(5.0, 1).unwrap()).unwrap();
        assert!(pool.entries().iter().all(|e| e.shaped_reward == Some(e.raw_reward)));
        apply_shaping(&mut pool, ShapingMode::NoiseOnly, 2, &NoiseConfig::new(0.5, 1).unwrap()).unwrap();
        assert!(pool.entries().iter().all(|e| {
            let d = e.shaped_reward.unwrap() - e.raw_reward;
            d != 0.0 && d.abs() <= 1.0
        }));
        let mut empty = DataPool::new(3);
        assert!(shape_pool(&mut empty, 2, &NoiseConfig::new(0.5, 1).unwrap()).is_err());
        assert!(NoiseConfig::new(-1.0, 0).is_err());
    }

    #[test]
    fn sentence_level_broadcast() {
        let v = Vocabulary::with_bos(["a", "b"]).unwrap();
        let s = ConstantScorer {
            name: "c".into(),
            value: 0.8,
        };
        let mut t = Trajectory::new(&v, vec![0], &[]).unwrap();
        assert!(sentence_level_rewards(&t, &s).is_empty());
        for _ in 0..5 {
            t.push_token(1, vec![], &[]).unwrap();
        }
        assert_eq!(sentence_level_rewards(&t, &s), vec![0.8; 5]);
    }

    #[test]
    fn sentence_level_order_survives_shaping() {
        // two trajectories scored 0.2 and 0.9, 6 tokens each
        for seed in 0..50 {
            let mut pool = DataPool::new(3);
            for _ in 0..6 {
                pool.push(vec![0], 1, 0.2);
            }
            for _ in 0..6 {
                pool.push(vec![0], 1, 0.9);
            }
            shape_pool(&mut pool, 2, &NoiseConfig::new(2.0, seed).unwrap()).unwrap();
            let (lo, hi) = pool.entries().split_at(6);
            let max_lo = lo.iter().map(|e| e.shaped_reward.unwrap()).fold(f64::MIN, f64::max);
            let min_hi = hi.iter().map(|e| e.shaped_reward.unwrap()).fold(f64::MAX, f64::min);
            assert!(max_lo <= min_hi);
        }
    }

    proptest! {
        #[test]
        fn containment_and_cross_interval_order(
            rewards in proptest::collection::vec(0.0f64..1.0, 1..80),
            q in 1usize..9,
            sigma in 0.0f64..5.0,
            seed in any::<u64>(),
        ) {
            let mut pool = DataPool::new(2);
            for &r in &rewards {
                pool.push(vec![0], 1, r);
            }
            let t = shape_pool(&mut pool, q, &NoiseConfig::new(sigma, seed).unwrap()).unwrap();
            let shaped: Vec<(usize, f64)> = pool
                .entries()
                .iter()
                .map(|e| (t.assign_interval(e.raw_reward).unwrap(), e.shaped_reward.unwrap()))
                .collect();
            for &(i, s) in &shaped {
                let (lo, hi) = t.interval(i);
                prop_assert!(lo <= s && s <= hi);
            }
            for &(i, a) in &shaped {
                for &(j, b) in &shaped {
                    if i < j {
                        prop_assert!(a <= b);
                    }
                }
            }
        }
    }
}
