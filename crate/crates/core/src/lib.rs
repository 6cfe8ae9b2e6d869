//! Batch active learning by coordinated matching.
//!
//! A sequential policy is rolled out several times on simulated labels; the
//! batch is the set of `k` pool points whose summed minimum-cost matchings to
//! those rollouts is smallest, found by greedy descent over a supermodular
//! objective.

pub mod bcm;
pub mod data;
pub mod klr;
pub mod matching;
pub mod policy;
pub mod simulate;

pub use bcm::{select_batch, BcmProblem, BcmState, GreedyOutcome};
pub use data::{Dataset, Pool};
pub use klr::{KlrModel, KlrParams};
pub use matching::{Assignment, CostMatrix, CostMetric};
pub use policy::{MaxEntropy, RandomPolicy, SequentialPolicy};
pub use simulate::{Trajectory, TrajectorySet};
