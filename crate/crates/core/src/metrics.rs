//! Evaluation metrics: correctness, dist-n diversity and a perplexity proxy.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams};
use crate::types::{Sequence, TokenId};

/// Fraction of generations satisfying `predicate`.
pub fn correctness<G: AsRef<[TokenId]>>(generations: &[G], predicate: impl Fn(&[TokenId]) -> bool) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::Empty("generation set"));
    }
    let hits = generations.iter().filter(|g| predicate(g.as_ref())).count();
    Ok(hits as f64 / generations.len() as f64)
}

/// Distinct n-grams over total n-grams, pooled across all generations.
/// Generations shorter than `n` contribute nothing; returns 0 when there are
/// no n-grams at all.
pub fn dist_n<G: AsRef<[TokenId]>>(generations: &[G], n: usize) -> f64 {
    assert!(n >= 1, "dist-n needs n >= 1");
    let mut distinct: HashSet<&[TokenId]> = HashSet::new();
    let mut total = 0usize;
    for g in generations {
        for gram in g.as_ref().windows(n) {
            distinct.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// `exp` of the mean per-token negative log-likelihood of the generated
/// tokens under `eval_model`, conditioning on each sequence's prefix.
pub fn ppl_proxy(sequences: &[Sequence], eval_model: &PolicyParams) -> f64 {
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        for (t, &a) in seq.generated.iter().enumerate() {
            nll -= policy::log_prob(eval_model, &seq.context(t), a);
            count += 1;
        }
    }
    if count == 0 {
        return 1.0;
    }
    (nll / count as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{rollout, PolicyDims};
    use crate::rng::stream;

    #[test]
    fn correctness_counts() {
        let gens = vec![vec![1u32], vec![1], vec![1], vec![2]];
        assert_eq!(correctness(&gens, |g| g[0] == 1).unwrap(), 0.75);
        assert_eq!(correctness(&gens, |_| true).unwrap(), 1.0);
        assert_eq!(correctness(&gens, |_| false).unwrap(), 0.0);
        assert!(correctness::<Vec<TokenId>>(&[], |_| true).is_err());
    }

    #[test]
    fn dist_n_examples() {
        // "a b a b": bigrams ab, ba, ab
        let single = vec![vec![1u32, 2, 1, 2]];
        assert!((dist_n(&single, 2) - 2.0 / 3.0).abs() < 1e-12);
        assert!((dist_n(&single, 2) - 0.6667).abs() < 1e-4);
        let unique = vec![vec![1u32, 2, 3], vec![4, 5, 6]];
        assert_eq!(dist_n(&unique, 1), 1.0);
        assert_eq!(dist_n(&unique, 3), 1.0);
        let same = vec![vec![1u32, 2, 3]; 4];
        let diverse = vec![vec![1u32, 2, 3], vec![3, 2, 1], vec![2, 2, 2], vec![1, 3, 1]];
        assert!(dist_n(&same, 2) < dist_n(&diverse, 2));
        assert_eq!(dist_n(&vec![vec![1u32]], 2), 0.0);
    }

    #[test]
    fn ppl_proxy_uniform_and_deterministic() {
        let dims = PolicyDims::new(6, 0);
        let uniform = PolicyParams::zeros(dims);
        let seqs = vec![Sequence::new(vec![0], vec![1, 2, 5, 3]), Sequence::new(vec![0, 4], vec![2])];
        assert!((ppl_proxy(&seqs, &uniform) - 5.0).abs() < 1e-12);

        let mut point = PolicyParams::zeros(dims);
        point.out_b_mut()[3] = 1e3;
        let own = rollout(&point, &[0], 6, &mut stream(0, 0, &[])).unwrap();
        assert_eq!(ppl_proxy(&[own.into_sequence()], &point), 1.0);
    }

    #[test]
    fn ppl_proxy_of_own_samples_beats_uniform() {
        let dims = PolicyDims::new(6, 0);
        let mut p = PolicyParams::init(dims, &mut stream(5, 0, &[]));
        p.scale(8.0);
        let seqs: Vec<Sequence> = (0..1000)
            .map(|i| rollout(&p, &[0], 10, &mut stream(6, 0, &[i])).unwrap().into_sequence())
            .collect();
        assert!(ppl_proxy(&seqs, &p) <= 5.0);
    }
}
