//! Seeded learning-curve runs and their aggregation.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use coordmatch::bcm::{select_batch, BcmError};
use coordmatch::data::{load_raw_csv, split_and_init, DataError, Dataset, Pool};
use coordmatch::klr::{accuracy, fit, KlrError, KlrModel, KlrParams};
use coordmatch::policy::{
    batch_random, batch_top_k_uncertain, PolicyError, SelectionContext, SequentialPolicy,
};
use coordmatch::MaxEntropy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Method};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Klr(#[from] KlrError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Bcm(#[from] BcmError),
    #[error("query budget {budget} exceeds the {available} unlabeled training examples")]
    BudgetExceedsPool { budget: usize, available: usize },
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: csv::Error,
    },
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run`: `mix64(master + (run + 1) * 0x9E3779B97F4A7C15)`, with
/// wrapping arithmetic and the SplitMix64 output function as `mix64`.
pub fn run_seed(master: u64, run: usize) -> u64 {
    mix64(master.wrapping_add((run as u64).wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Stream 0 drives the train/test split and seed draw, stream 1 the batch
/// selection, so every method sees the same partition for a given seed.
fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut split = ChaCha8Rng::seed_from_u64(seed);
    split.set_stream(0);
    let mut select = ChaCha8Rng::seed_from_u64(seed);
    select.set_stream(1);
    (split, select)
}

/// Loads, filters and optionally normalizes the configured dataset.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let raw = load_raw_csv(&config.dataset, &config.label_column())?;
    let ds = match &config.keep_classes {
        Some((a, b)) => raw.filter_classes((a, b))?,
        None => raw.into_binary()?,
    };
    Ok(if config.normalize { ds.normalize() } else { ds })
}

/// Accuracy after each round of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub seed: u64,
    pub queries: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub final_labeled: usize,
}

/// Wall-clock time of one batch selection.
#[derive(Debug, Clone, Copy)]
pub struct BatchTiming {
    pub run: usize,
    pub round: usize,
    pub elapsed: Duration,
}

fn params(config: &ExperimentConfig) -> KlrParams {
    KlrParams {
        width: config.kernel_width,
        ridge: config.ridge,
        ..KlrParams::default()
    }
}

/// The pool a run starts from.
pub fn initial_pool(
    config: &ExperimentConfig,
    dataset: Arc<Dataset>,
    seed: u64,
) -> Result<Pool, ExperimentError> {
    let (mut split, _) = run_rngs(seed);
    Ok(split_and_init(dataset, config.train_frac, config.seeds_per_class, &mut split)?)
}

fn select(
    config: &ExperimentConfig,
    pool: &mut Pool,
    model: &KlrModel,
    klr: &KlrParams,
    rng: &mut ChaCha8Rng,
) -> Result<(), ExperimentError> {
    let k = config.k;
    let batch = match config.method {
        Method::SimMatch => select_batch(pool, &MaxEntropy, k, config.trajectories, klr, rng)?,
        Method::MaxUncertain => batch_top_k_uncertain(&mut SelectionContext::new(pool, model, rng), k)?,
        Method::Random => batch_random(&mut SelectionContext::new(pool, model, rng), k)?,
        Method::Sequential => {
            for step in 0..k {
                let current = if step == 0 { model.clone() } else { fit(pool, klr)? };
                let i = MaxEntropy.select(pool, &current, rng)?;
                pool.reveal(&[i])?;
            }
            return Ok(());
        }
    };
    pool.reveal(&batch)?;
    Ok(())
}

/// One learning curve: accuracy before any query and after every `k` queries.
pub fn run_once(
    config: &ExperimentConfig,
    dataset: Arc<Dataset>,
    run: usize,
    seed: u64,
    on_batch: Option<&(dyn Fn(BatchTiming) + Sync)>,
) -> Result<RunCurve, ExperimentError> {
    config.validate()?;
    let klr = params(config);
    let (mut split, mut rng) = run_rngs(seed);
    let mut pool = split_and_init(dataset.clone(), config.train_frac, config.seeds_per_class, &mut split)?;
    if config.budget > pool.unlabeled().len() {
        return Err(ExperimentError::BudgetExceedsPool {
            budget: config.budget,
            available: pool.unlabeled().len(),
        });
    }
    let mut model = fit(&pool, &klr)?;
    let mut queries = vec![0];
    let mut acc = vec![accuracy(&model, &dataset, pool.test())?];
    let rounds = config.budget / config.k;
    for round in 0..rounds {
        let start = Instant::now();
        select(config, &mut pool, &model, &klr, &mut rng)?;
        if let Some(callback) = on_batch {
            callback(BatchTiming {
                run,
                round,
                elapsed: start.elapsed(),
            });
        }
        model = fit(&pool, &klr)?;
        queries.push((round + 1) * config.k);
        acc.push(accuracy(&model, &dataset, pool.test())?);
    }
    Ok(RunCurve {
        seed,
        queries,
        accuracy: acc,
        final_labeled: pool.labeled().len(),
    })
}

/// Mean and population variance of accuracy across runs at each query count.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub queries: Vec<usize>,
    pub mean_accuracy: Vec<f64>,
    pub variance: Vec<f64>,
}

impl LearningCurve {
    /// Aggregates in run order, so the result does not depend on scheduling.
    pub fn from_runs(runs: &[RunCurve]) -> Self {
        let queries = runs[0].queries.clone();
        let n = runs.len() as f64;
        let mut mean_accuracy = Vec::with_capacity(queries.len());
        let mut variance = Vec::with_capacity(queries.len());
        for j in 0..queries.len() {
            let mean = runs.iter().map(|r| r.accuracy[j]).sum::<f64>() / n;
            let var = runs.iter().map(|r| (r.accuracy[j] - mean).powi(2)).sum::<f64>() / n;
            mean_accuracy.push(mean);
            variance.push(var);
        }
        Self {
            queries,
            mean_accuracy,
            variance,
        }
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), ExperimentError> {
        let path = path.as_ref();
        let wrap = |source| ExperimentError::Output {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        w.write_record(["queries", "mean_accuracy", "variance"]).map_err(wrap)?;
        for j in 0..self.queries.len() {
            w.write_record([
                self.queries[j].to_string(),
                self.mean_accuracy[j].to_string(),
                self.variance[j].to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| wrap(e.into()))?;
        Ok(())
    }
}

/// Writes every run's curve as `run,seed,queries,accuracy` rows.
pub fn write_per_run_csv<P: AsRef<Path>>(runs: &[RunCurve], path: P) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let wrap = |source| ExperimentError::Output {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["run", "seed", "queries", "accuracy"]).map_err(wrap)?;
    for (i, r) in runs.iter().enumerate() {
        for (q, a) in r.queries.iter().zip(&r.accuracy) {
            w.write_record([i.to_string(), r.seed.to_string(), q.to_string(), a.to_string()])
                .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| wrap(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub curve: LearningCurve,
    pub runs: Vec<RunCurve>,
}

/// Runs `config.runs` independent runs on an already loaded dataset.
pub fn run_experiment_on(
    config: &ExperimentConfig,
    dataset: Arc<Dataset>,
    on_batch: Option<&(dyn Fn(BatchTiming) + Sync)>,
) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let runs = (0..config.runs)
        .into_par_iter()
        .map(|r| run_once(config, dataset.clone(), r, run_seed(config.seed, r), on_batch))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult {
        curve: LearningCurve::from_runs(&runs),
        runs,
    })
}

/// Loads the dataset, runs the experiment and writes any configured outputs.
pub fn run_experiment(
    config: &ExperimentConfig,
    on_batch: Option<&(dyn Fn(BatchTiming) + Sync)>,
) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let dataset = Arc::new(load_dataset(config)?);
    let result = run_experiment_on(config, dataset, on_batch)?;
    if let Some(out) = &config.out {
        result.curve.write_csv(out)?;
    }
    if let Some(out) = &config.per_run_out {
        write_per_run_csv(&result.runs, out)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> Arc<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 0.3 } else { 0.7 };
                vec![c + rng.gen_range(-0.2..0.2), c + rng.gen_range(-0.2..0.2)]
            })
            .collect();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        Arc::new(Dataset::from_rows(&rows, labels).unwrap())
    }

    fn config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            dataset: "unused.csv".into(),
            method,
            k: 4,
            trajectories: 3,
            kernel_width: 0.3,
            runs: 3,
            budget: 8,
            seeds_per_class: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seeds_are_mixed_and_distinct() {
        let seeds: Vec<u64> = (0..100).map(|r| run_seed(42, r)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_ne!(run_seed(0, 0), run_seed(1, 0));
        assert_eq!(run_seed(7, 3), run_seed(7, 3));
    }

    #[test]
    fn single_round_has_two_records() {
        let ds = blobs(60, 1);
        let mut c = config(Method::MaxUncertain);
        c.budget = 4;
        let r = run_once(&c, ds, 0, 5, None).unwrap();
        assert_eq!(r.queries, vec![0, 4]);
        assert_eq!(r.accuracy.len(), 2);
        assert_eq!(r.final_labeled, 2 * 2 + 4);
    }

    #[test]
    fn methods_share_the_partition_and_conserve_examples() {
        let ds = blobs(60, 2);
        let seed = run_seed(9, 0);
        let first = initial_pool(&config(Method::Random), ds.clone(), seed).unwrap();
        for m in Method::ALL {
            let c = config(m);
            assert_eq!(initial_pool(&c, ds.clone(), seed).unwrap(), first);
            let r = run_once(&c, ds.clone(), 0, seed, None).unwrap();
            assert_eq!(r.final_labeled, 4 + c.budget, "{m}");
            assert_eq!(r.queries, vec![0, 4, 8]);
            assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }

    #[test]
    fn aggregation() {
        let ds = blobs(60, 3);
        let mut c = config(Method::Random);
        c.runs = 1;
        let one = run_experiment_on(&c, ds.clone(), None).unwrap();
        assert_eq!(one.curve.mean_accuracy, one.runs[0].accuracy);
        assert!(one.curve.variance.iter().all(|&v| v == 0.0));

        c.runs = 5;
        let five = run_experiment_on(&c, ds, None).unwrap();
        for j in 0..five.curve.queries.len() {
            let vals: Vec<f64> = five.runs.iter().map(|r| r.accuracy[j]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((five.curve.mean_accuracy[j] - mean).abs() < 1e-15);
            assert!((five.curve.variance[j] - var).abs() < 1e-15);
            assert!(five.curve.variance[j] >= 0.0);
        }
    }

    #[test]
    fn constant_accuracy_has_zero_variance() {
        // Two far apart clusters: every method classifies the test set perfectly.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 0.0 } else { 1.0 };
            rows.push(vec![c, c]);
            labels.push((i % 2) as u8);
        }
        let ds = Arc::new(Dataset::from_rows(&rows, labels).unwrap());
        let r = run_experiment_on(&config(Method::SimMatch), ds, None).unwrap();
        assert!(r.curve.variance.iter().all(|&v| v == 0.0));
        assert!(r.curve.mean_accuracy.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn budget_larger_than_pool_fails() {
        let ds = blobs(20, 4);
        let mut c = config(Method::Random);
        c.budget = 40;
        assert!(matches!(
            run_once(&c, ds, 0, 1, None),
            Err(ExperimentError::BudgetExceedsPool { .. })
        ));
    }
}
