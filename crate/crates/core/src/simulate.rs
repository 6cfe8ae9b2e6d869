//! Monte-Carlo rollouts of a sequential policy.
//!
//! A rollout copies the pool, then alternates refitting the classifier,
//! asking the policy for an example and labeling that example with a draw
//! from the classifier's posterior.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Pool};
use crate::klr::{self, KlrError, KlrModel, KlrParams};
use crate::policy::{PolicyError, SequentialPolicy};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("cannot simulate {steps} steps with {available} unlabeled examples")]
    PoolExhausted { steps: usize, available: usize },
    #[error("need at least one step and one trajectory")]
    Empty,
    #[error(transparent)]
    Klr(#[from] KlrError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One simulated k-step run. `sampled_labels` are posterior draws, never
/// ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub points: Vec<usize>,
    pub sampled_labels: Vec<u8>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySet {
    trajectories: Vec<Trajectory>,
    steps: usize,
}

impl TrajectorySet {
    /// Checks that every trajectory has `steps` distinct points.
    pub fn new(trajectories: Vec<Trajectory>, steps: usize) -> Result<Self, SimulateError> {
        if steps == 0 || trajectories.is_empty() {
            return Err(SimulateError::Empty);
        }
        for t in &trajectories {
            let mut pts = t.points.clone();
            pts.sort_unstable();
            pts.dedup();
            if pts.len() != steps || t.points.len() != steps {
                return Err(SimulateError::PoolExhausted {
                    steps,
                    available: pts.len(),
                });
            }
        }
        Ok(Self {
            trajectories,
            steps,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Sorted union of all trajectory points.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .trajectories
            .iter()
            .flat_map(|t| t.points.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Draws 1 with probability `P(y = 1 | x)`.
pub fn sample_label<R: Rng + ?Sized>(model: &KlrModel, x: &[f64], rng: &mut R) -> Result<u8, KlrError> {
    let p = model.predict_proba(x)?;
    Ok(u8::from(rng.gen::<f64>() < p))
}

/// Runs `policy` for `steps` rounds on a private copy of the pool.
pub fn simulate_trajectory<R: RngCore + ?Sized>(
    pool: &Pool,
    policy: &dyn SequentialPolicy,
    steps: usize,
    params: &KlrParams,
    rng: &mut R,
) -> Result<Trajectory, SimulateError> {
    if steps > pool.unlabeled().len() {
        return Err(SimulateError::PoolExhausted {
            steps,
            available: pool.unlabeled().len(),
        });
    }
    let mut sim = pool.clone();
    let mut points = Vec::with_capacity(steps);
    let mut sampled_labels = Vec::with_capacity(steps);
    let mut rng: &mut dyn RngCore = &mut RngAdapter(rng);
    for _ in 0..steps {
        let model = klr::fit(&sim, params)?;
        let x = policy.select(&sim, &model, &mut rng)?;
        let y = sample_label(&model, sim.dataset().row(x), &mut rng)?;
        sim.assign_label(x, y)?;
        points.push(x);
        sampled_labels.push(y);
    }
    Ok(Trajectory {
        points,
        sampled_labels,
    })
}

/// Wraps a possibly unsized generator so it can be handed out as `dyn RngCore`.
struct RngAdapter<'a, R: RngCore + ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// Generator for trajectory `index` under `master_seed`: ChaCha8 keyed by the
/// master seed, on stream `index`.
pub fn trajectory_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

/// `count` independent rollouts, trajectory `i` driven by
/// [`trajectory_rng`]`(master_seed, i)`. Runs in parallel; the result does not
/// depend on the number of worker threads.
pub fn simulate_trajectories_seeded(
    pool: &Pool,
    policy: &dyn SequentialPolicy,
    steps: usize,
    count: usize,
    params: &KlrParams,
    master_seed: u64,
) -> Result<TrajectorySet, SimulateError> {
    if count == 0 || steps == 0 {
        return Err(SimulateError::Empty);
    }
    let trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(master_seed, i);
            simulate_trajectory(pool, policy, steps, params, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TrajectorySet::new(trajectories, steps)
}

/// As [`simulate_trajectories_seeded`], taking the master seed from `rng`.
pub fn simulate_trajectories<R: Rng + ?Sized>(
    pool: &Pool,
    policy: &dyn SequentialPolicy,
    steps: usize,
    count: usize,
    params: &KlrParams,
    rng: &mut R,
) -> Result<TrajectorySet, SimulateError> {
    let master_seed = rng.next_u64();
    simulate_trajectories_seeded(pool, policy, steps, count, params, master_seed)
}
