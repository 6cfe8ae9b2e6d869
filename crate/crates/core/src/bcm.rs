//! Bounded coordinated matching.
//!
//! Given `N` simulated trajectories of `k` points each, the objective of a
//! center set `mu` is
//!
//! ```text
//! g(mu) = sum_i  min over injective maps m  sum_j d(x_ij, mu_m(j))
//! ```
//!
//! `g` is non-increasing and supermodular, and `g(S_1 u ... u S_N) = 0`. The
//! batch is found by greedy descent: start from a set with zero cost and
//! repeatedly drop the center whose removal raises `g` the least.
//!
//! [`greedy_naive`] re-solves every matching for every candidate removal.
//! [`greedy_accelerated`] starts from the union of the trajectories, keeps
//! removal costs in a lazily refreshed priority queue and repairs only the
//! matchings that used the removed center. Both make identical choices: the
//! objective is evaluated exactly in quantized units, and ties go to the
//! lowest dataset index.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::data::{Dataset, Pool};
use crate::klr::KlrParams;
use crate::matching::{quantization_scale, Assignment, CostMatrix, CostMetric, MatchingError};
use crate::policy::SequentialPolicy;
use crate::simulate::{simulate_trajectories, SimulateError, TrajectorySet};

#[derive(Debug, Error)]
pub enum BcmError {
    #[error("center set has {got} elements, need at least {k}")]
    TooFewCenters { k: usize, got: usize },
    #[error("index {0} is not a candidate")]
    NotCandidate(usize),
    #[error("index {0} is not in the current center set")]
    NotInSet(usize),
    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("exact likelihood supports at most {max} points, got {got}")]
    TooLargeForExact { max: usize, got: usize },
    #[error("trajectory length {trajectory} differs from batch size {batch}")]
    BatchSizeMismatch { trajectory: usize, batch: usize },
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

/// Trajectories and the candidate centers they are matched against.
#[derive(Debug, Clone)]
pub struct BcmProblem {
    dataset: Arc<Dataset>,
    trajectories: TrajectorySet,
    candidates: Vec<usize>,
    metric: CostMetric,
    scale: f64,
}

impl BcmProblem {
    /// `candidates` is the unlabeled pool; every trajectory point must be in it.
    pub fn new(
        dataset: Arc<Dataset>,
        trajectories: TrajectorySet,
        candidates: &[usize],
        metric: CostMetric,
    ) -> Result<Self, BcmError> {
        let mut candidates = candidates.to_vec();
        candidates.sort_unstable();
        candidates.dedup();
        if let Some(&bad) = candidates.iter().find(|&&c| c >= dataset.len()) {
            return Err(BcmError::NotCandidate(bad));
        }
        for t in trajectories.trajectories() {
            if let Some(&bad) = t.points.iter().find(|p| candidates.binary_search(p).is_err()) {
                return Err(BcmError::NotCandidate(bad));
            }
        }
        let k = trajectories.steps();
        let mut max_cost = 0.0f64;
        for t in trajectories.trajectories() {
            for &p in &t.points {
                for &c in &candidates {
                    max_cost =
                        max_cost.max(crate::matching::pair_cost(&metric, dataset.row(p), dataset.row(c))?);
                }
            }
        }
        let scale = quantization_scale(max_cost, k * trajectories.len());
        Ok(Self {
            dataset,
            trajectories,
            candidates,
            metric,
            scale,
        })
    }

    /// Batch size, equal to the trajectory length.
    pub fn k(&self) -> usize {
        self.trajectories.steps()
    }

    pub fn trajectories(&self) -> &TrajectorySet {
        &self.trajectories
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn metric(&self) -> &CostMetric {
        &self.metric
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Quantization scale shared by every cost matrix of this problem.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Sorted, deduplicated copy of `mu`, checked against the candidates.
    fn normalize_set(&self, mu: &[usize]) -> Result<Vec<usize>, BcmError> {
        let mut set = mu.to_vec();
        set.sort_unstable();
        set.dedup();
        if let Some(&bad) = set.iter().find(|c| self.candidates.binary_search(c).is_err()) {
            return Err(BcmError::NotCandidate(bad));
        }
        Ok(set)
    }

    fn cost_matrix(&self, trajectory: usize, centers: &[usize]) -> CostMatrix {
        let points = &self.trajectories.trajectories()[trajectory].points;
        let mut real = Vec::with_capacity(points.len() * centers.len());
        for &p in points {
            let x = self.dataset.row(p);
            for &c in centers {
                real.push(self.metric.cost_unchecked(x, self.dataset.row(c)));
            }
        }
        CostMatrix::with_scale(points.len(), centers.len(), real, self.scale)
            .expect("metric costs are finite and non-negative")
    }

    fn solve_all(&self, set: &[usize]) -> Result<Vec<Assignment>, BcmError> {
        if set.len() < self.k() {
            return Err(BcmError::TooFewCenters {
                k: self.k(),
                got: set.len(),
            });
        }
        (0..self.trajectories.len())
            .map(|t| Ok(Assignment::solve(&self.cost_matrix(t, set))?))
            .collect()
    }

    /// `g(mu)`, summed over trajectories in order.
    pub fn objective(&self, mu: &[usize]) -> Result<f64, BcmError> {
        let set = self.normalize_set(mu)?;
        Ok(self.solve_all(&set)?.iter().map(Assignment::cost).sum())
    }

    /// `g(mu)` in exact quantized units.
    pub fn objective_scaled(&self, mu: &[usize]) -> Result<i64, BcmError> {
        let set = self.normalize_set(mu)?;
        Ok(self.solve_all(&set)?.iter().map(Assignment::scaled_cost).sum())
    }
}

/// `g(mu)`; see [`BcmProblem::objective`].
pub fn objective_g(problem: &BcmProblem, mu: &[usize]) -> Result<f64, BcmError> {
    problem.objective(mu)
}

/// Outcome of a greedy descent.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    /// Selected centers, ascending.
    pub centers: Vec<usize>,
    pub objective: f64,
    /// Centers in the order they were removed.
    pub removal_order: Vec<usize>,
    /// Number of `g(mu \ x)` evaluations (or incremental differences).
    pub evaluations: usize,
    /// Number of per-trajectory matchings solved or repaired, including the
    /// solves that produce the final objective or the starting state.
    pub matching_computations: usize,
}

/// Greedy descent from `initial`, solving every matching from scratch.
pub fn greedy_naive(problem: &BcmProblem, initial: &[usize]) -> Result<GreedyOutcome, BcmError> {
    let slots = problem.normalize_set(initial)?;
    let k = problem.k();
    if slots.len() < k {
        return Err(BcmError::TooFewCenters {
            k,
            got: slots.len(),
        });
    }
    let n = problem.trajectories.len();
    let costs: Vec<CostMatrix> = (0..n).map(|t| problem.cost_matrix(t, &slots)).collect();
    let mut active = vec![true; slots.len()];
    let mut size = slots.len();
    let mut removal_order = Vec::new();
    let mut evaluations = 0;
    let mut matching_computations = 0;
    while size > k {
        let mut best: Option<(i64, usize)> = None;
        for slot in 0..slots.len() {
            if !active[slot] {
                continue;
            }
            active[slot] = false;
            let mut total = 0i64;
            for c in &costs {
                total += Assignment::solve_active(c, &active)?.scaled_cost();
            }
            active[slot] = true;
            evaluations += 1;
            matching_computations += n;
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, slot));
            }
        }
        let (_, slot) = best.expect("set is larger than k");
        active[slot] = false;
        size -= 1;
        removal_order.push(slots[slot]);
    }
    let mut objective = 0.0;
    for c in &costs {
        objective += Assignment::solve_active(c, &active)?.cost();
    }
    matching_computations += n;
    Ok(GreedyOutcome {
        centers: slots
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(&s, _)| s)
            .collect(),
        objective,
        removal_order,
        evaluations,
        matching_computations,
    })
}

/// Current center set with one optimal assignment per trajectory, kept
/// up to date by single-path repairs as centers are removed.
#[derive(Debug, Clone)]
pub struct BcmState<'p> {
    problem: &'p BcmProblem,
    slots: Vec<usize>,
    costs: Vec<CostMatrix>,
    assignments: Vec<Assignment>,
    active: Vec<bool>,
    size: usize,
    evaluations: usize,
    matching_computations: usize,
}

type Repairs = Vec<(usize, Assignment)>;

impl<'p> BcmState<'p> {
    pub fn new(problem: &'p BcmProblem, initial: &[usize]) -> Result<Self, BcmError> {
        let slots = problem.normalize_set(initial)?;
        if slots.len() < problem.k() {
            return Err(BcmError::TooFewCenters {
                k: problem.k(),
                got: slots.len(),
            });
        }
        let n = problem.trajectories.len();
        let costs: Vec<CostMatrix> = (0..n).map(|t| problem.cost_matrix(t, &slots)).collect();
        let assignments = costs
            .iter()
            .map(Assignment::solve)
            .collect::<Result<Vec<_>, _>>()?;
        let size = slots.len();
        Ok(Self {
            problem,
            active: vec![true; size],
            slots,
            costs,
            assignments,
            size,
            evaluations: 0,
            matching_computations: n,
        })
    }

    /// Current centers, ascending.
    pub fn mu(&self) -> Vec<usize> {
        self.slots
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn objective(&self) -> f64 {
        self.assignments.iter().map(Assignment::cost).sum()
    }

    pub fn objective_scaled(&self) -> i64 {
        self.assignments.iter().map(Assignment::scaled_cost).sum()
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn matching_computations(&self) -> usize {
        self.matching_computations
    }

    fn slot_of(&self, x: usize) -> Result<usize, BcmError> {
        match self.slots.binary_search(&x) {
            Ok(s) if self.active[s] => Ok(s),
            _ => Err(BcmError::NotInSet(x)),
        }
    }

    /// `g(mu \ x) - g(mu)` in quantized units, with the repaired assignments
    /// of the trajectories that used `x`.
    fn delta_slot(&mut self, slot: usize) -> Result<(i64, Repairs), BcmError> {
        if self.size <= self.problem.k() {
            return Err(BcmError::TooFewCenters {
                k: self.problem.k(),
                got: self.size - 1,
            });
        }
        self.evaluations += 1;
        let mut delta = 0i64;
        let mut repairs = Vec::new();
        for (t, a) in self.assignments.iter().enumerate() {
            if !a.uses(slot) {
                continue;
            }
            let repaired = a.without_center(&self.costs[t], slot)?;
            delta += repaired.scaled_cost() - a.scaled_cost();
            repairs.push((t, repaired));
        }
        self.matching_computations += repairs.len();
        Ok((delta, repairs))
    }

    /// `delta(mu, x) = g(mu \ x) - g(mu) >= 0`, repairing only the matchings
    /// that use `x`.
    pub fn incremental_difference(&mut self, x: usize) -> Result<f64, BcmError> {
        let slot = self.slot_of(x)?;
        let (delta, _) = self.delta_slot(slot)?;
        Ok(delta as f64 / self.problem.scale)
    }

    fn commit(&mut self, slot: usize, repairs: Option<Repairs>) -> Result<(), BcmError> {
        let mut repairs = repairs.unwrap_or_default().into_iter().peekable();
        for t in 0..self.assignments.len() {
            match repairs.peek() {
                Some((rt, _)) if *rt == t => {
                    self.assignments[t] = repairs.next().unwrap().1;
                }
                _ => {
                    if self.assignments[t].remove_center(&self.costs[t], slot)? {
                        self.matching_computations += 1;
                    }
                }
            }
        }
        self.active[slot] = false;
        self.size -= 1;
        Ok(())
    }

    /// Removes `x` from the center set.
    pub fn remove(&mut self, x: usize) -> Result<(), BcmError> {
        let slot = self.slot_of(x)?;
        if self.size <= self.problem.k() {
            return Err(BcmError::TooFewCenters {
                k: self.problem.k(),
                got: self.size - 1,
            });
        }
        self.commit(slot, None)
    }

    /// Lazy greedy descent down to `k` centers.
    ///
    /// Stored differences are lower bounds on the current ones because
    /// differences only grow as the set shrinks. The smallest stored entry is
    /// refreshed; if it still precedes every other stored entry in
    /// `(difference, index)` order it is the exact greedy choice.
    pub fn descend(mut self) -> Result<GreedyOutcome, BcmError> {
        let k = self.problem.k();
        let mut removal_order = Vec::new();
        let mut heap: BinaryHeap<Reverse<(i64, usize, usize)>> = BinaryHeap::new();
        let mut fresh: HashMap<usize, Repairs> = HashMap::new();
        let mut round = 0usize;
        if self.size > k {
            for slot in 0..self.slots.len() {
                if self.active[slot] {
                    let (delta, repairs) = self.delta_slot(slot)?;
                    heap.push(Reverse((delta, slot, round)));
                    fresh.insert(slot, repairs);
                }
            }
        }
        while self.size > k {
            let Reverse((delta, slot, stamp)) = heap.pop().expect("heap holds every active center");
            let choose = if stamp == round {
                true
            } else {
                let (current, repairs) = self.delta_slot(slot)?;
                fresh.insert(slot, repairs);
                debug_assert!(current >= delta, "supermodularity violated");
                match heap.peek() {
                    Some(Reverse((next, next_slot, _))) if (current, slot) > (*next, *next_slot) => {
                        heap.push(Reverse((current, slot, round)));
                        false
                    }
                    _ => true,
                }
            };
            if choose {
                let repairs = fresh.remove(&slot);
                self.commit(slot, repairs)?;
                removal_order.push(self.slots[slot]);
                round += 1;
                fresh.clear();
            }
        }
        Ok(GreedyOutcome {
            centers: self.mu(),
            objective: self.objective(),
            removal_order,
            evaluations: self.evaluations,
            matching_computations: self.matching_computations,
        })
    }
}

/// Lazy greedy descent with incremental matching repair, from `initial`.
pub fn greedy_lazy(problem: &BcmProblem, initial: &[usize]) -> Result<GreedyOutcome, BcmError> {
    BcmState::new(problem, initial)?.descend()
}

/// Greedy descent from the union of the trajectories with lazy differences
/// and single-path matching repairs. Same output as
/// `greedy_naive(problem, &union)`.
pub fn greedy_accelerated(problem: &BcmProblem) -> Result<GreedyOutcome, BcmError> {
    // Each trajectory holds k distinct points, so the union has at least k.
    greedy_lazy(problem, &problem.trajectories.union())
}

/// How the k-MMM likelihood treats the sum over matchings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    /// `log (1/k!) sum_m prod_j f(x_j; mu_m(j))`.
    Exact,
    /// `log max_m prod_j f(x_j; mu_m(j))`.
    MaxMatching,
}

/// Largest set size accepted by [`LikelihoodMode::Exact`].
pub const MAX_EXACT_POINTS: usize = 20;

/// Permanent by Ryser's inclusion-exclusion formula in Gray-code order.
pub fn permanent(matrix: &[f64], n: usize) -> f64 {
    assert_eq!(matrix.len(), n * n);
    if n == 0 {
        return 1.0;
    }
    let mut row_sums = vec![0.0; n];
    let mut total = 0.0;
    let mut prev_gray = 0usize;
    for g in 1usize..(1 << n) {
        let gray = g ^ (g >> 1);
        let flipped = gray ^ prev_gray;
        let col = flipped.trailing_zeros() as usize;
        let sign = if gray & flipped != 0 { 1.0 } else { -1.0 };
        for (i, s) in row_sums.iter_mut().enumerate() {
            *s += sign * matrix[i * n + col];
        }
        let prod: f64 = row_sums.iter().product();
        if (n - gray.count_ones() as usize) % 2 == 0 {
            total += prod;
        } else {
            total -= prod;
        }
        prev_gray = gray;
    }
    total
}

/// Log-likelihood of the point set under the k-matching mixture with means
/// `mu` and the metric's covariance.
pub fn kmmm_log_likelihood(
    points: &[&[f64]],
    mu: &[&[f64]],
    metric: &CostMetric,
    mode: LikelihoodMode,
) -> Result<f64, BcmError> {
    let k = points.len();
    if mu.len() != k || k == 0 {
        return Err(BcmError::SizeMismatch {
            left: k,
            right: mu.len(),
        });
    }
    if mode == LikelihoodMode::Exact && k > MAX_EXACT_POINTS {
        return Err(BcmError::TooLargeForExact {
            max: MAX_EXACT_POINTS,
            got: k,
        });
    }
    let dim = points[0].len();
    let log_norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * metric.log_det_sigma();
    let costs = CostMatrix::from_points(points, mu, metric)?;
    let best = Assignment::solve(&costs)?;
    let base = k as f64 * log_norm;
    match mode {
        LikelihoodMode::MaxMatching => Ok(base - 0.5 * best.cost()),
        LikelihoodMode::Exact => {
            // Rescale by the optimal duals so the best matching has weight ~1
            // and every entry is at most ~1.
            let (row_pot, col_pot) = best.potentials(costs.scale());
            let mut scaled = Vec::with_capacity(k * k);
            for (i, u) in row_pot.iter().enumerate() {
                for (j, v) in col_pot.iter().enumerate() {
                    scaled.push((-0.5 * (costs.real(i, j) - u - v)).exp());
                }
            }
            let dual_total: f64 = row_pot.iter().sum::<f64>() + col_pot.iter().sum::<f64>();
            let perm = permanent(&scaled, k);
            let log_fact: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
            Ok(base - log_fact - 0.5 * dual_total + perm.ln())
        }
    }
}

/// Greedy approximation factor `(1/t) [((q + t)/q)^q - 1]`.
pub fn exact_bound_factor(t: f64, q: usize) -> f64 {
    if q == 0 || t == 0.0 {
        return 1.0;
    }
    let q = q as f64;
    (q * (t / q).ln_1p()).exp_m1() / t
}

/// The relaxation `(e^t - 1) / t` of [`exact_bound_factor`].
pub fn relaxed_bound_factor(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        t.exp_m1() / t
    }
}

/// Convention used for `g` on sets smaller than `k`, which only the
/// steepness diagnostic needs.
pub const SMALL_SET_CONVENTION: &str = "below size k matchings may reuse centers; \
g(empty) = sum_ij max_{u in A} d(x_ij, u)";

#[derive(Debug, Clone, PartialEq)]
pub enum SteepnessStatus {
    Ok,
    Degenerate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteepnessReport {
    pub s: Option<f64>,
    pub t: Option<f64>,
    /// `|A| - k`.
    pub q: usize,
    pub exact_factor: Option<f64>,
    pub relaxed_factor: Option<f64>,
    /// Elements whose ratio was undefined (`g(empty) = g({x})`).
    pub skipped: usize,
    pub status: SteepnessStatus,
    pub convention: &'static str,
}

/// Steepness of `g` over the ground set `initial` and the resulting greedy
/// approximation factors.
///
/// `s = max_x [(g(empty) - g({x})) - (g(A \ x) - g(A))] / (g(empty) - g({x}))`
/// and `t = s / (1 - s)`; `s` lies in `[0, 1]` for a non-increasing
/// supermodular `g`, and `s = 1` leaves `t` undefined.
pub fn steepness(problem: &BcmProblem, initial: &[usize]) -> Result<SteepnessReport, BcmError> {
    let set = problem.normalize_set(initial)?;
    let k = problem.k();
    if set.len() < k + 1 {
        return Err(BcmError::TooFewCenters {
            k: k + 1,
            got: set.len(),
        });
    }
    let q = set.len() - k;
    let ds = &problem.dataset;
    let metric = &problem.metric;
    let points: Vec<usize> = problem
        .trajectories
        .trajectories()
        .iter()
        .flat_map(|t| t.points.iter().copied())
        .collect();
    let g_empty: f64 = points
        .iter()
        .map(|&p| {
            set.iter()
                .map(|&u| metric.cost_unchecked(ds.row(p), ds.row(u)))
                .fold(0.0, f64::max)
        })
        .sum();
    let g_full = problem.objective(&set)?;
    let mut s: Option<f64> = None;
    let mut skipped = 0;
    for (idx, &x) in set.iter().enumerate() {
        let g_single: f64 = points
            .iter()
            .map(|&p| metric.cost_unchecked(ds.row(p), ds.row(x)))
            .sum();
        let denom = g_empty - g_single;
        if denom <= 0.0 {
            skipped += 1;
            continue;
        }
        let mut rest = set.clone();
        rest.remove(idx);
        let removal = problem.objective(&rest)? - g_full;
        let ratio = (denom - removal) / denom;
        s = Some(s.map_or(ratio, |cur: f64| cur.max(ratio)));
    }
    let degenerate = |reason: &str, s: Option<f64>| SteepnessReport {
        s,
        t: None,
        q,
        exact_factor: None,
        relaxed_factor: None,
        skipped,
        status: SteepnessStatus::Degenerate(reason.to_string()),
        convention: SMALL_SET_CONVENTION,
    };
    let Some(s) = s else {
        return Ok(degenerate("no element has g(empty) > g({x})", None));
    };
    if s >= 1.0 {
        return Ok(degenerate("s = 1: some removal is free, t is unbounded", Some(s)));
    }
    if s < 0.0 {
        return Ok(degenerate("s < 0: small-set convention is not supermodular here", Some(s)));
    }
    let t = s / (1.0 - s);
    Ok(SteepnessReport {
        s: Some(s),
        t: Some(t),
        q,
        exact_factor: Some(exact_bound_factor(t, q)),
        relaxed_factor: Some(relaxed_bound_factor(t)),
        skipped,
        status: SteepnessStatus::Ok,
        convention: SMALL_SET_CONVENTION,
    })
}

/// A selected batch with the rollouts and greedy statistics behind it.
#[derive(Debug, Clone)]
pub struct BatchSelection {
    pub batch: Vec<usize>,
    pub trajectories: TrajectorySet,
    pub outcome: GreedyOutcome,
}

/// Simulates `trajectories` rollouts of `policy` and returns the `k` centers
/// chosen by accelerated greedy descent as the batch.
pub fn select_batch_detailed<R: Rng + ?Sized>(
    pool: &Pool,
    policy: &dyn SequentialPolicy,
    k: usize,
    trajectories: usize,
    params: &KlrParams,
    rng: &mut R,
) -> Result<BatchSelection, BcmError> {
    let set = simulate_trajectories(pool, policy, k, trajectories, params, rng)?;
    let problem = BcmProblem::new(
        pool.shared_dataset().clone(),
        set.clone(),
        pool.unlabeled(),
        CostMetric::identity(),
    )?;
    let outcome = greedy_accelerated(&problem)?;
    Ok(BatchSelection {
        batch: outcome.centers.clone(),
        trajectories: set,
        outcome,
    })
}

/// The batch of [`select_batch_detailed`].
pub fn select_batch<R: Rng + ?Sized>(
    pool: &Pool,
    policy: &dyn SequentialPolicy,
    k: usize,
    trajectories: usize,
    params: &KlrParams,
    rng: &mut R,
) -> Result<Vec<usize>, BcmError> {
    Ok(select_batch_detailed(pool, policy, k, trajectories, params, rng)?.batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::klr::fit;
    use crate::policy::{select_max_entropy, MaxEntropy, SelectionContext};
    use crate::simulate::Trajectory;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: &[Vec<f64>]) -> Arc<Dataset> {
        let labels = (0..rows.len()).map(|i| (i % 2) as u8).collect();
        Arc::new(Dataset::from_rows(rows, labels).unwrap())
    }

    fn trajectories(sets: &[Vec<usize>]) -> TrajectorySet {
        let k = sets[0].len();
        let ts = sets
            .iter()
            .map(|p| Trajectory {
                points: p.clone(),
                sampled_labels: vec![0; k],
            })
            .collect();
        TrajectorySet::new(ts, k).unwrap()
    }

    /// `m` points; coordinates on a coarse grid when `grid` so ties are common.
    fn random_problem(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize, grid: bool) -> BcmProblem {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..2)
                    .map(|_| if grid { f64::from(rng.gen_range(0..4u8)) } else { rng.gen() })
                    .collect()
            })
            .collect();
        let all: Vec<usize> = (0..m).collect();
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|_| all.choose_multiple(rng, k).copied().collect())
            .collect();
        BcmProblem::new(dataset(&rows), trajectories(&sets), &all, CostMetric::identity()).unwrap()
    }

    #[test]
    fn hand_built_objective() {
        let rows = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0], vec![10.0]];
        let problem = BcmProblem::new(
            dataset(&rows),
            trajectories(&[vec![0, 1], vec![2, 3]]),
            &[0, 1, 2, 3, 4],
            CostMetric::identity(),
        )
        .unwrap();
        // Centers at 1, 3, 10. S1 = {0, 1}: 0->1, 1->3 costs 1 + 4 = 5.
        // S2 = {3, 4}: 3->1, 4->3 costs 4 + 1 = 5.
        assert_eq!(problem.objective(&[1, 2, 4]).unwrap(), 10.0);
        assert_eq!(problem.objective(&[0, 1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(problem.objective(&[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(matches!(problem.objective(&[1]), Err(BcmError::TooFewCenters { .. })));
        assert!(matches!(problem.objective(&[1, 9]), Err(BcmError::NotCandidate(9))));
    }

    #[test]
    fn trajectory_points_must_be_candidates() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        let err = BcmProblem::new(dataset(&rows), trajectories(&[vec![0, 2]]), &[0, 1], CostMetric::identity());
        assert!(matches!(err, Err(BcmError::NotCandidate(2))));
    }

    #[test]
    fn outlier_is_removed() {
        let rows = vec![vec![0.1, 0.2], vec![0.4, 0.4], vec![0.3, 0.9], vec![50.0, 50.0]];
        let problem = BcmProblem::new(
            dataset(&rows),
            trajectories(&[vec![0, 1, 2]]),
            &[0, 1, 2, 3],
            CostMetric::identity(),
        )
        .unwrap();
        let out = greedy_naive(&problem, &[0, 1, 2, 3]).unwrap();
        assert_eq!(out.centers, vec![0, 1, 2]);
        assert_eq!(out.objective, 0.0);
        assert_eq!(out.removal_order, vec![3]);
        let same = greedy_naive(&problem, &[2, 0, 1]).unwrap();
        assert_eq!(same.centers, vec![0, 1, 2]);
        assert_eq!(same.evaluations, 0);
    }

    #[test]
    fn identical_trajectories_return_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let s = vec![7, 2, 5];
        let problem = BcmProblem::new(
            dataset(&rows),
            trajectories(&[s.clone(), s.clone(), s.clone()]),
            &(0..10).collect::<Vec<_>>(),
            CostMetric::identity(),
        )
        .unwrap();
        let out = greedy_accelerated(&problem).unwrap();
        assert_eq!(out.centers, vec![2, 5, 7]);
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn accelerated_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..60 {
            let k = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(k + 1..=25);
            let problem = random_problem(&mut rng, m, n, k, trial % 2 == 0);
            let union = problem.trajectories().union();
            let naive = greedy_naive(&problem, &union).unwrap();
            let fast = greedy_accelerated(&problem).unwrap();
            assert_eq!(naive.centers, fast.centers, "trial {trial}");
            assert_eq!(naive.removal_order, fast.removal_order, "trial {trial}");
            assert_eq!(naive.objective.to_bits(), fast.objective.to_bits());
            if union.len() > k {
                assert!(fast.matching_computations < naive.matching_computations);
                assert!(fast.evaluations <= naive.evaluations);
            } else {
                assert_eq!(fast.evaluations, 0);
            }
            // Lazy descent from an arbitrary superset also agrees.
            let start: Vec<usize> = (0..m).collect();
            let naive_all = greedy_naive(&problem, &start).unwrap();
            let lazy_all = greedy_lazy(&problem, &start).unwrap();
            assert_eq!(naive_all.centers, lazy_all.centers, "trial {trial}");
        }
    }

    #[test]
    fn incremental_difference_matches_scratch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..40 {
            let k = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(k + 2..=16);
            let problem = random_problem(&mut rng, m, n, k, trial % 3 == 0);
            let mut mu: Vec<usize> = (0..m).collect();
            mu.shuffle(&mut rng);
            mu.truncate(rng.gen_range(k + 1..=m));
            mu.sort_unstable();
            let mut state = BcmState::new(&problem, &mu).unwrap();
            let g = problem.objective(&mu).unwrap();
            assert!((state.objective() - g).abs() < 1e-9);
            for &x in &mu {
                let delta = state.incremental_difference(x).unwrap();
                let rest: Vec<usize> = mu.iter().copied().filter(|&y| y != x).collect();
                let scratch = problem.objective(&rest).unwrap() - g;
                assert!(delta >= 0.0);
                assert!((delta - scratch).abs() < 1e-9, "{delta} vs {scratch}");
                let used = state.assignments().iter().any(|a| a.uses(mu.binary_search(&x).unwrap()));
                if !used {
                    assert_eq!(delta, 0.0);
                }
            }
            assert!(matches!(state.incremental_difference(m + 5), Err(BcmError::NotInSet(_))));
            // Removing keeps the cached assignments optimal.
            let x = mu[0];
            state.remove(x).unwrap();
            let rest = &mu[1..];
            assert!((state.objective() - problem.objective(rest).unwrap()).abs() < 1e-9);
            assert_eq!(state.mu(), rest);
        }
    }

    fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if items.len() < k {
            return vec![];
        }
        let mut out = subsets(&items[1..], k - 1);
        for s in &mut out {
            s.insert(0, items[0]);
        }
        out.extend(subsets(&items[1..], k));
        out
    }

    #[test]
    fn greedy_within_bound_of_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..15 {
            let k = rng.gen_range(1..=3);
            let n = rng.gen_range(2..=4);
            let m = rng.gen_range(k + 3..=10);
            let problem = random_problem(&mut rng, m, n, k, false);
            let initial: Vec<usize> = (0..m).collect();
            let greedy = greedy_naive(&problem, &initial).unwrap();
            let best = subsets(&initial, k)
                .iter()
                .map(|s| problem.objective(s).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(greedy.objective >= best - 1e-9);
            let report = steepness(&problem, &initial).unwrap();
            if let Some(factor) = report.exact_factor {
                assert!(factor >= 1.0);
                assert!(greedy.objective <= factor * best + 1e-9);
                assert!(factor <= report.relaxed_factor.unwrap() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn bound_factors() {
        assert!((relaxed_bound_factor(1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        assert_eq!(relaxed_bound_factor(0.0), 1.0);
        assert_eq!(exact_bound_factor(0.0, 5), 1.0);
        // q = 1: (1/t)(1 + t - 1) = 1.
        assert!((exact_bound_factor(2.5, 1) - 1.0).abs() < 1e-12);
        // q = 2, t = 1: ((3/2)^2 - 1) = 1.25.
        assert!((exact_bound_factor(1.0, 2) - 1.25).abs() < 1e-12);
        for q in 1..30 {
            for &t in &[0.01, 0.5, 1.0, 3.0, 10.0] {
                assert!(exact_bound_factor(t, q) <= relaxed_bound_factor(t) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn free_removals_are_degenerate() {
        // Every point has a twin, so each removal costs nothing.
        let rows = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let problem = BcmProblem::new(
            dataset(&rows),
            trajectories(&[vec![0, 1]]),
            &[0, 1, 2, 3],
            CostMetric::identity(),
        )
        .unwrap();
        let report = steepness(&problem, &[0, 1, 2, 3]).unwrap();
        assert_eq!(report.s, Some(1.0));
        assert!(matches!(report.status, SteepnessStatus::Degenerate(_)));
        assert_eq!(report.t, None);
        assert_eq!(report.q, 2);
        assert!(!report.convention.is_empty());
        assert!(steepness(&problem, &[0, 1]).is_err());
    }

    fn log_density(x: &[f64], mu: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * d2
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..k {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn permanent_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 1..=6 {
            let a: Vec<f64> = (0..k * k).map(|_| rng.gen_range(0.0..2.0)).collect();
            let direct: f64 = permutations(k)
                .iter()
                .map(|p| (0..k).map(|i| a[i * k + p[i]]).product::<f64>())
                .sum();
            assert!((permanent(&a, k) - direct).abs() < 1e-10 * direct.max(1.0), "k = {k}");
        }
        assert_eq!(permanent(&[], 0), 1.0);
    }

    #[test]
    fn likelihood_modes() {
        let metric = CostMetric::identity();
        let x = [0.3, -0.2];
        let c = [1.0, 0.5];
        let exact = kmmm_log_likelihood(&[&x], &[&c], &metric, LikelihoodMode::Exact).unwrap();
        let max = kmmm_log_likelihood(&[&x], &[&c], &metric, LikelihoodMode::MaxMatching).unwrap();
        assert!((exact - log_density(&x, &c)).abs() < 1e-12);
        assert!((max - log_density(&x, &c)).abs() < 1e-12);

        // Symmetric k = 2: both matchings cost the same.
        let pts: [&[f64]; 2] = [&[0.0, 0.0], &[1.0, 1.0]];
        let mu: [&[f64]; 2] = [&[1.0, 0.0], &[0.0, 1.0]];
        let exact = kmmm_log_likelihood(&pts, &mu, &metric, LikelihoodMode::Exact).unwrap();
        let max = kmmm_log_likelihood(&pts, &mu, &metric, LikelihoodMode::MaxMatching).unwrap();
        assert!((exact - max).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let k = 4;
            let pts: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let mu: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let pr: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
            let mr: Vec<&[f64]> = mu.iter().map(Vec::as_slice).collect();
            let direct = (permutations(k)
                .iter()
                .map(|p| (0..k).map(|j| log_density(&pts[j], &mu[p[j]])).sum::<f64>().exp())
                .sum::<f64>()
                / 24.0)
                .ln();
            let exact = kmmm_log_likelihood(&pr, &mr, &metric, LikelihoodMode::Exact).unwrap();
            let max = kmmm_log_likelihood(&pr, &mr, &metric, LikelihoodMode::MaxMatching).unwrap();
            assert!((exact - direct).abs() < 1e-9, "{exact} vs {direct}");
            let log_fact = 24f64.ln();
            assert!(max <= exact + log_fact + 1e-12);
            assert!(exact <= max + log_fact + 1e-12);
        }
        assert!(matches!(
            kmmm_log_likelihood(&pts, &mu[..1], &metric, LikelihoodMode::Exact),
            Err(BcmError::SizeMismatch { .. })
        ));
        let big: Vec<Vec<f64>> = (0..21).map(|i| vec![i as f64]).collect();
        let br: Vec<&[f64]> = big.iter().map(Vec::as_slice).collect();
        assert!(matches!(
            kmmm_log_likelihood(&br, &br, &metric, LikelihoodMode::Exact),
            Err(BcmError::TooLargeForExact { .. })
        ));
        assert!(kmmm_log_likelihood(&br, &br, &metric, LikelihoodMode::MaxMatching).is_ok());
    }

    #[test]
    fn min_cost_is_max_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let metric = CostMetric::identity();
        for _ in 0..10 {
            let k = 2;
            let problem = random_problem(&mut rng, 7, 3, k, false);
            let ds = problem.dataset();
            let sets = subsets(&(0..7).collect::<Vec<_>>(), k);
            let cost = |s: &Vec<usize>| problem.objective(s).unwrap();
            let loglik = |s: &Vec<usize>| -> f64 {
                let mu: Vec<&[f64]> = s.iter().map(|&c| ds.row(c)).collect();
                problem
                    .trajectories()
                    .trajectories()
                    .iter()
                    .map(|t| {
                        let pts: Vec<&[f64]> = t.points.iter().map(|&p| ds.row(p)).collect();
                        kmmm_log_likelihood(&pts, &mu, &metric, LikelihoodMode::MaxMatching).unwrap()
                    })
                    .sum()
            };
            let by_cost = sets.iter().min_by(|a, b| cost(a).total_cmp(&cost(b))).unwrap();
            let by_lik = sets.iter().max_by(|a, b| loglik(a).total_cmp(&loglik(b)).then(b.cmp(a))).unwrap();
            assert!((cost(by_cost) - cost(by_lik)).abs() < 1e-9);
        }
    }

    fn pool_for_batches(n: usize) -> Pool {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] + r[1] > 1.0)).collect();
        let ds = Arc::new(Dataset::from_rows(&rows, labels.clone()).unwrap());
        let first0 = labels.iter().position(|&l| l == 0).unwrap();
        let first1 = labels.iter().position(|&l| l == 1).unwrap();
        let labeled = vec![first0.min(first1), first0.max(first1)];
        let unlabeled = (0..n).filter(|i| !labeled.contains(i)).collect();
        Pool::from_parts(ds, labeled, unlabeled, vec![]).unwrap()
    }

    #[test]
    fn batch_contract_and_determinism() {
        let pool = pool_for_batches(40);
        let params = KlrParams {
            width: 0.3,
            ..KlrParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = select_batch(&pool, &MaxEntropy, 1, 1, &params, &mut rng).unwrap();
        let model = fit(&pool, &params).unwrap();
        let expected = select_max_entropy(&mut SelectionContext::new(&pool, &model, &mut rng)).unwrap();
        assert_eq!(single, vec![expected]);

        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(10);
                    select_batch_detailed(&pool, &MaxEntropy, 5, 6, &params, &mut rng).unwrap()
                })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.batch.len(), 5);
        let mut dedup = a.batch.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert!(a.batch.iter().all(|&i| pool.is_unlabeled(i)));
    }
}
