//! Sequential selection policies and the simple batch baselines.
//!
//! All ties are broken toward the lowest dataset index.

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::data::Pool;
use crate::klr::{self, KlrError, KlrModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unlabeled set is empty")]
    EmptyPool,
    #[error("requested {requested} examples but only {available} are unlabeled")]
    PoolTooSmall { requested: usize, available: usize },
    #[error(transparent)]
    Klr(#[from] KlrError),
}

/// What a selector sees: the pool, a model fitted on its labeled set, and a
/// random stream owned by the caller.
pub struct SelectionContext<'a, R: Rng + ?Sized> {
    pub pool: &'a Pool,
    pub model: &'a KlrModel,
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> SelectionContext<'a, R> {
    pub fn new(pool: &'a Pool, model: &'a KlrModel, rng: &'a mut R) -> Self {
        Self { pool, model, rng }
    }
}

/// Entropy of the model's posterior at every unlabeled index, in pool order.
pub fn unlabeled_entropies(pool: &Pool, model: &KlrModel) -> Vec<(usize, f64)> {
    let ds = pool.dataset();
    pool.unlabeled()
        .iter()
        .map(|&i| {
            let p = model.proba_unchecked(ds.row(i));
            // p is clamped into (0, 1), so entropy cannot fail.
            (i, klr::entropy(p).unwrap_or(0.0))
        })
        .collect()
}

/// Orders `(index, score)` by descending score, then ascending index.
fn by_score_desc(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[(usize, f64)]) -> Option<usize> {
    scores
        .iter()
        .min_by(|a, b| by_score_desc(a, b))
        .map(|&(i, _)| i)
}

pub fn select_max_entropy<R: Rng + ?Sized>(
    ctx: &mut SelectionContext<'_, R>,
) -> Result<usize, PolicyError> {
    argmax_lowest(&unlabeled_entropies(ctx.pool, ctx.model)).ok_or(PolicyError::EmptyPool)
}

pub fn select_random<R: Rng + ?Sized>(
    ctx: &mut SelectionContext<'_, R>,
) -> Result<usize, PolicyError> {
    let unlabeled = ctx.pool.unlabeled();
    if unlabeled.is_empty() {
        return Err(PolicyError::EmptyPool);
    }
    Ok(unlabeled[ctx.rng.gen_range(0..unlabeled.len())])
}

fn check_batch(pool: &Pool, k: usize) -> Result<(), PolicyError> {
    let available = pool.unlabeled().len();
    if k > available || available == 0 {
        return Err(PolicyError::PoolTooSmall {
            requested: k,
            available,
        });
    }
    Ok(())
}

/// The `k` highest-entropy unlabeled indices, best first.
pub fn batch_top_k_uncertain<R: Rng + ?Sized>(
    ctx: &mut SelectionContext<'_, R>,
    k: usize,
) -> Result<Vec<usize>, PolicyError> {
    check_batch(ctx.pool, k)?;
    let mut scored = unlabeled_entropies(ctx.pool, ctx.model);
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_score_desc);
        scored.truncate(k);
    }
    scored.sort_by(by_score_desc);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// `k` unlabeled indices sampled uniformly without replacement.
pub fn batch_random<R: Rng + ?Sized>(
    ctx: &mut SelectionContext<'_, R>,
    k: usize,
) -> Result<Vec<usize>, PolicyError> {
    check_batch(ctx.pool, k)?;
    let unlabeled = ctx.pool.unlabeled();
    Ok(sample(ctx.rng, unlabeled.len(), k)
        .into_iter()
        .map(|j| unlabeled[j])
        .collect())
}

/// A rule that picks the next example to label given the current model.
pub trait SequentialPolicy: Send + Sync {
    fn select(
        &self,
        pool: &Pool,
        model: &KlrModel,
        rng: &mut dyn rand::RngCore,
    ) -> Result<usize, PolicyError>;
}

/// Picks the unlabeled example with the highest class entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxEntropy;

impl SequentialPolicy for MaxEntropy {
    fn select(
        &self,
        pool: &Pool,
        model: &KlrModel,
        rng: &mut dyn rand::RngCore,
    ) -> Result<usize, PolicyError> {
        select_max_entropy(&mut SelectionContext::new(pool, model, rng))
    }
}

/// Picks an unlabeled example uniformly at random.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl SequentialPolicy for RandomPolicy {
    fn select(
        &self,
        pool: &Pool,
        model: &KlrModel,
        rng: &mut dyn rand::RngCore,
    ) -> Result<usize, PolicyError> {
        select_random(&mut SelectionContext::new(pool, model, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::klr::{fit, KlrParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn line_pool(n: usize) -> (Pool, KlrModel) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let labels = (0..n).map(|i| u8::from(2 * i >= n)).collect();
        let ds = Arc::new(Dataset::from_rows(&rows, labels).unwrap());
        let pool = Pool::from_parts(ds, vec![0, n - 1], (1..n - 1).collect(), vec![]).unwrap();
        let params = KlrParams {
            width: 0.3,
            ..KlrParams::default()
        };
        let model = fit(&pool, &params).unwrap();
        (pool, model)
    }

    #[test]
    fn entropy_peak_and_tie_rule() {
        assert_eq!(argmax_lowest(&[(4, 0.3), (7, 0.69), (9, 0.3)]), Some(7));
        assert_eq!(argmax_lowest(&[(5, 0.69), (2, 0.69)]), Some(2));
        assert_eq!(argmax_lowest(&[]), None);
    }

    #[test]
    fn max_entropy_matches_exhaustive_scan() {
        let (pool, model) = line_pool(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = select_max_entropy(&mut SelectionContext::new(&pool, &model, &mut rng)).unwrap();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &i in pool.unlabeled() {
            let p = model.predict_proba(pool.dataset().row(i)).unwrap();
            let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
            if h > best.1 {
                best = (i, h);
            }
        }
        assert_eq!(got, best.0);
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let (pool, model) = line_pool(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
        let got = batch_top_k_uncertain(&mut ctx, 5).unwrap();
        let mut all = unlabeled_entropies(&pool, &model);
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<usize> = all.iter().take(5).map(|x| x.0).collect();
        assert_eq!(got, want);
        let first = batch_top_k_uncertain(&mut ctx, 1).unwrap();
        assert_eq!(first[0], select_max_entropy(&mut ctx).unwrap());
        let everything = batch_top_k_uncertain(&mut ctx, pool.unlabeled().len()).unwrap();
        let mut sorted = everything.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, pool.unlabeled());
        assert!(matches!(
            batch_top_k_uncertain(&mut ctx, 100),
            Err(PolicyError::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn random_selectors() {
        let (pool, model) = line_pool(20);
        let a: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
            (0..10).map(|_| select_random(&mut ctx).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
            (0..10).map(|_| select_random(&mut ctx).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| pool.is_unlabeled(i)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
        let batch = batch_random(&mut ctx, 6).unwrap();
        let mut dedup = batch.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 6);
        let mut all = batch_random(&mut ctx, pool.unlabeled().len()).unwrap();
        all.sort_unstable();
        assert_eq!(all, pool.unlabeled());
    }

    #[test]
    fn singleton_and_empty_pools() {
        let rows = vec![vec![0.0], vec![0.5], vec![1.0]];
        let ds = Arc::new(Dataset::from_rows(&rows, vec![0, 1, 1]).unwrap());
        let mut pool = Pool::from_parts(ds, vec![0, 2], vec![1], vec![]).unwrap();
        let model = fit(&pool, &KlrParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_random(&mut SelectionContext::new(&pool, &model, &mut rng)).unwrap(), 1);
        pool.reveal(&[1]).unwrap();
        let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
        assert_eq!(select_random(&mut ctx), Err(PolicyError::EmptyPool));
        assert_eq!(select_max_entropy(&mut ctx), Err(PolicyError::EmptyPool));
    }

    #[test]
    fn random_frequencies_are_uniform() {
        let (pool, model) = line_pool(6);
        assert_eq!(pool.unlabeled().len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..draws {
            counts[select_random(&mut ctx).unwrap()] += 1;
        }
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for &i in pool.unlabeled() {
            let dev = (counts[i] as f64 - draws as f64 * 0.25).abs();
            assert!(dev < 3.0 * sigma, "index {i}: {}", counts[i]);
        }

        // Chi-squared goodness of fit for batch membership: pool of 10, k = 3.
        let (pool, model) = line_pool(12);
        let mut ctx = SelectionContext::new(&pool, &model, &mut rng);
        let reps = 20_000;
        let mut counts = [0f64; 12];
        for _ in 0..reps {
            for i in batch_random(&mut ctx, 3).unwrap() {
                counts[i] += 1.0;
            }
        }
        let expected = reps as f64 * 3.0 / 10.0;
        let chi2: f64 = pool
            .unlabeled()
            .iter()
            .map(|&i| (counts[i] - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-squared with 9 degrees of freedom.
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn argmax_invariant_to_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let scores: Vec<(usize, f64)> = (0..15).map(|i| (i, (rng.gen_range(0..8) as f64) / 8.0)).collect();
            let a = argmax_lowest(&scores);
            let exp: Vec<(usize, f64)> = scores.iter().map(|&(i, s)| (i, s.exp())).collect();
            let affine: Vec<(usize, f64)> = scores.iter().map(|&(i, s)| (i, 3.0 * s + 1.0)).collect();
            assert_eq!(a, argmax_lowest(&exp));
            assert_eq!(a, argmax_lowest(&affine));
        }
    }
}
