//! Minimum-cost injective assignment of trajectory positions (rows) to
//! candidate centers (columns).
//!
//! Costs are quantized to integers with a power-of-two scale before solving,
//! so optimal values are exact and comparisons between independently computed
//! objectives never disagree through rounding. The solver is the successive
//! shortest path form of the Hungarian method, which keeps row and column
//! potentials. Those potentials make it possible to drop a center and restore
//! optimality with one more shortest path, and to pick the lexicographically
//! smallest assignment among all optimal ones.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{rows} rows cannot be matched into {cols} centers")]
    TooFewCenters { rows: usize, cols: usize },
    #[error("center {0} is not available")]
    UnknownCenter(usize),
    #[error("cost {0} is negative or not finite")]
    BadCost(f64),
    #[error("inverse covariance must be symmetric positive definite")]
    NotPositiveDefinite,
}

/// `d(x, c) = (x - c)' S (x - c)` for a positive-definite `S`, by default the
/// identity (squared euclidean distance).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CostMetric {
    #[default]
    Identity,
    Mahalanobis {
        sigma_inverse: DMatrix<f64>,
        log_det_sigma_inverse: f64,
    },
}

impl CostMetric {
    pub fn identity() -> Self {
        CostMetric::Identity
    }

    pub fn mahalanobis(sigma_inverse: DMatrix<f64>) -> Result<Self, MatchingError> {
        if !sigma_inverse.is_square() {
            return Err(MatchingError::DimensionMismatch {
                left: sigma_inverse.nrows(),
                right: sigma_inverse.ncols(),
            });
        }
        let symmetric = (0..sigma_inverse.nrows()).all(|i| {
            (0..i).all(|j| {
                let (a, b) = (sigma_inverse[(i, j)], sigma_inverse[(j, i)]);
                (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
            })
        });
        if !symmetric {
            return Err(MatchingError::NotPositiveDefinite);
        }
        let chol = sigma_inverse
            .clone()
            .cholesky()
            .ok_or(MatchingError::NotPositiveDefinite)?;
        let log_det_sigma_inverse = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(CostMetric::Mahalanobis {
            sigma_inverse,
            log_det_sigma_inverse,
        })
    }

    /// `ln det S^-1`, i.e. the log-determinant of the covariance.
    pub fn log_det_sigma(&self) -> f64 {
        match self {
            CostMetric::Identity => 0.0,
            CostMetric::Mahalanobis {
                log_det_sigma_inverse,
                ..
            } => -log_det_sigma_inverse,
        }
    }

    fn check_dim(&self, d: usize) -> Result<(), MatchingError> {
        match self {
            CostMetric::Identity => Ok(()),
            CostMetric::Mahalanobis { sigma_inverse, .. } if sigma_inverse.nrows() == d => Ok(()),
            CostMetric::Mahalanobis { sigma_inverse, .. } => Err(MatchingError::DimensionMismatch {
                left: sigma_inverse.nrows(),
                right: d,
            }),
        }
    }

    #[inline]
    pub(crate) fn cost_unchecked(&self, x: &[f64], c: &[f64]) -> f64 {
        match self {
            CostMetric::Identity => x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
            CostMetric::Mahalanobis { sigma_inverse, .. } => {
                let d = x.len();
                let mut total = 0.0;
                for i in 0..d {
                    let di = x[i] - c[i];
                    let mut row = 0.0;
                    for j in 0..d {
                        row += sigma_inverse[(i, j)] * (x[j] - c[j]);
                    }
                    total += di * row;
                }
                total.max(0.0)
            }
        }
    }
}

/// Cost of matching `x` to center `c`.
pub fn pair_cost(metric: &CostMetric, x: &[f64], c: &[f64]) -> Result<f64, MatchingError> {
    if x.len() != c.len() {
        return Err(MatchingError::DimensionMismatch {
            left: x.len(),
            right: c.len(),
        });
    }
    metric.check_dim(x.len())?;
    Ok(metric.cost_unchecked(x, c))
}

/// Largest power of two `s` with `max_cost * s * terms <= 2^60`.
pub fn quantization_scale(max_cost: f64, terms: usize) -> f64 {
    let budget = 2f64.powi(60) / terms.max(1) as f64;
    if max_cost <= 0.0 {
        return 1.0;
    }
    2f64.powi((budget / max_cost).log2().floor() as i32)
}

/// Dense row-major cost matrix with a quantized copy.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    real: Vec<f64>,
    scaled: Vec<i64>,
    scale: f64,
}

impl CostMatrix {
    /// Picks a scale that keeps any sum of `rows` entries exact.
    pub fn new(rows: usize, cols: usize, real: Vec<f64>) -> Result<Self, MatchingError> {
        let max = real.iter().copied().fold(0.0, f64::max);
        Self::with_scale(rows, cols, real, quantization_scale(max, rows))
    }

    pub fn with_scale(
        rows: usize,
        cols: usize,
        real: Vec<f64>,
        scale: f64,
    ) -> Result<Self, MatchingError> {
        if real.len() != rows * cols {
            return Err(MatchingError::DimensionMismatch {
                left: real.len(),
                right: rows * cols,
            });
        }
        if let Some(&bad) = real.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(MatchingError::BadCost(bad));
        }
        let scaled = real.iter().map(|&c| (c * scale).round() as i64).collect();
        Ok(Self {
            rows,
            cols,
            real,
            scaled,
            scale,
        })
    }

    pub fn from_points(
        points: &[&[f64]],
        centers: &[&[f64]],
        metric: &CostMetric,
    ) -> Result<Self, MatchingError> {
        let real = pairwise(points, centers, metric)?;
        Self::new(points.len(), centers.len(), real)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn real(&self, r: usize, c: usize) -> f64 {
        self.real[r * self.cols + c]
    }

    #[inline]
    pub fn scaled(&self, r: usize, c: usize) -> i64 {
        self.scaled[r * self.cols + c]
    }
}

pub(crate) fn pairwise(
    points: &[&[f64]],
    centers: &[&[f64]],
    metric: &CostMetric,
) -> Result<Vec<f64>, MatchingError> {
    let mut real = Vec::with_capacity(points.len() * centers.len());
    for p in points {
        for c in centers {
            real.push(pair_cost(metric, p, c)?);
        }
    }
    Ok(real)
}

const NONE: usize = usize::MAX;
const INF: i64 = i64::MAX / 4;

/// An optimal assignment together with the dual potentials certifying it.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pairs: Vec<usize>,
    owner: Vec<usize>,
    active: Vec<bool>,
    active_count: usize,
    row_pot: Vec<i64>,
    col_pot: Vec<i64>,
    scaled_cost: i64,
    cost: f64,
}

impl Assignment {
    /// Column matched to each row.
    pub fn pairs(&self) -> &[usize] {
        &self.pairs
    }

    /// Sum of the real pair costs, accumulated in row order.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Exact optimum in quantized units.
    pub fn scaled_cost(&self) -> i64 {
        self.scaled_cost
    }

    /// Whether column `col` is matched to some row.
    pub fn uses(&self, col: usize) -> bool {
        self.owner.get(col).is_some_and(|&r| r != NONE)
    }

    pub fn is_active(&self, col: usize) -> bool {
        self.active.get(col).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    /// Row and column dual potentials divided by `scale`.
    pub fn potentials(&self, scale: f64) -> (Vec<f64>, Vec<f64>) {
        (
            self.row_pot.iter().map(|&u| u as f64 / scale).collect(),
            self.col_pot.iter().map(|&v| v as f64 / scale).collect(),
        )
    }

    /// Recomputes the real cost from the pairs.
    pub fn recompute_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs
            .iter()
            .enumerate()
            .map(|(r, &c)| costs.real(r, c))
            .sum()
    }

    fn reduced(&self, costs: &CostMatrix, r: usize, c: usize) -> i64 {
        costs.scaled(r, c) - self.row_pot[r] - self.col_pot[c]
    }

    fn refresh_cost(&mut self, costs: &CostMatrix) {
        self.scaled_cost = self
            .pairs
            .iter()
            .enumerate()
            .map(|(r, &c)| costs.scaled(r, c))
            .sum();
        self.cost = self.recompute_cost(costs);
    }

    /// One Dijkstra phase on reduced costs, inserting unmatched `row`.
    fn augment_row(&mut self, costs: &CostMatrix, row: usize) {
        let m = costs.cols();
        let virt = m;
        let mut minv = vec![INF; m];
        let mut way = vec![NONE; m + 1];
        let mut used = vec![false; m + 1];
        let mut used_list = Vec::new();
        let owner_of = |owner: &[usize], j: usize| if j == virt { row } else { owner[j] };
        let mut j0 = virt;
        loop {
            used[j0] = true;
            used_list.push(j0);
            let i0 = owner_of(&self.owner, j0);
            let mut delta = INF;
            let mut j1 = NONE;
            for j in 0..m {
                if !self.active[j] || used[j] {
                    continue;
                }
                let cur = costs.scaled(i0, j) - self.row_pot[i0] - self.col_pot[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            debug_assert!(j1 != NONE, "no free column reachable");
            for &j in &used_list {
                let i = owner_of(&self.owner, j);
                self.row_pot[i] += delta;
                if j != virt {
                    self.col_pot[j] -= delta;
                }
            }
            for j in 0..m {
                if self.active[j] && !used[j] {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if self.owner[j0] == NONE {
                break;
            }
        }
        // Flip the alternating path back to the virtual column.
        loop {
            let j1 = way[j0];
            let i = owner_of(&self.owner, j1);
            self.owner[j0] = i;
            self.pairs[i] = j0;
            j0 = j1;
            if j0 == virt {
                break;
            }
        }
    }

    /// Rewrites the matching into the lexicographically smallest optimal one.
    ///
    /// An assignment is optimal iff it uses only zero-reduced-cost edges and
    /// covers every column with a negative potential. Rows are fixed in order,
    /// each to the smallest column that still admits such a completion.
    fn canonicalize(&mut self, costs: &CostMatrix) {
        let k = self.pairs.len();
        for r in 0..k {
            let current = self.pairs[r];
            for c in 0..current {
                if !self.active[c] || self.reduced(costs, r, c) != 0 {
                    continue;
                }
                let holder = self.owner[c];
                if holder != NONE && holder < r {
                    continue;
                }
                if let Some((pairs, owner)) = self.try_reassign(costs, r, c) {
                    self.pairs = pairs;
                    self.owner = owner;
                    break;
                }
            }
        }
    }

    fn try_reassign(&self, costs: &CostMatrix, r: usize, c: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let m = costs.cols();
        let mut pairs = self.pairs.clone();
        let mut owner = self.owner.clone();
        let old = pairs[r];
        let displaced = owner[c];
        owner[old] = NONE;
        pairs[r] = c;
        owner[c] = r;
        // Columns held by rows <= r are frozen.
        let movable_col = |owner: &[usize], j: usize| {
            self.active[j] && j != c && (owner[j] == NONE || owner[j] > r)
        };
        let tight = |i: usize, j: usize| self.reduced(costs, i, j) == 0;

        if displaced != NONE {
            // Augmenting path from the displaced row to any free column.
            let mut prev_col = vec![NONE; m];
            let mut from_row = vec![NONE; m];
            let mut queue = std::collections::VecDeque::from([displaced]);
            let mut seen_row = vec![false; pairs.len()];
            seen_row[displaced] = true;
            let mut end = NONE;
            'bfs: while let Some(i) = queue.pop_front() {
                for j in 0..m {
                    if from_row[j] != NONE || !movable_col(&owner, j) || !tight(i, j) {
                        continue;
                    }
                    from_row[j] = i;
                    prev_col[j] = if i == displaced { NONE } else { pairs[i] };
                    if owner[j] == NONE {
                        end = j;
                        break 'bfs;
                    }
                    let next = owner[j];
                    if !seen_row[next] {
                        seen_row[next] = true;
                        queue.push_back(next);
                    }
                }
            }
            if end == NONE {
                return None;
            }
            let mut j = end;
            while j != NONE {
                let i = from_row[j];
                let back = prev_col[j];
                pairs[i] = j;
                owner[j] = i;
                j = back;
            }
        }

        if owner[old] == NONE && self.col_pot[old] < 0 {
            // `old` must stay covered: shift rows along tight edges until a
            // column with zero potential is released. For a released column
            // h, `mover[h]` moved off it onto `target[h]`.
            let mut mover = vec![NONE; m];
            let mut target = vec![NONE; m];
            let mut seen = vec![false; m];
            seen[old] = true;
            let mut queue = std::collections::VecDeque::from([old]);
            let mut release = NONE;
            'cover: while let Some(j) = queue.pop_front() {
                for (i, &held) in pairs.iter().enumerate() {
                    if i <= r || seen[held] || !tight(i, j) {
                        continue;
                    }
                    seen[held] = true;
                    mover[held] = i;
                    target[held] = j;
                    if self.col_pot[held] == 0 {
                        release = held;
                        break 'cover;
                    }
                    queue.push_back(held);
                }
            }
            if release == NONE {
                return None;
            }
            owner[release] = NONE;
            let mut x = release;
            while x != old {
                let (i, t) = (mover[x], target[x]);
                pairs[i] = t;
                owner[t] = i;
                x = t;
            }
        }
        Some((pairs, owner))
    }
}

impl Assignment {
    /// Solves from scratch over the columns flagged in `active`.
    pub fn solve_active(costs: &CostMatrix, active: &[bool]) -> Result<Self, MatchingError> {
        if active.len() != costs.cols() {
            return Err(MatchingError::DimensionMismatch {
                left: active.len(),
                right: costs.cols(),
            });
        }
        let k = costs.rows();
        let active_count = active.iter().filter(|&&a| a).count();
        if active_count < k {
            return Err(MatchingError::TooFewCenters {
                rows: k,
                cols: active_count,
            });
        }
        let mut a = Assignment {
            pairs: vec![NONE; k],
            owner: vec![NONE; costs.cols()],
            active: active.to_vec(),
            active_count,
            row_pot: vec![0; k],
            col_pot: vec![0; costs.cols()],
            scaled_cost: 0,
            cost: 0.0,
        };
        for r in 0..k {
            a.augment_row(costs, r);
        }
        a.canonicalize(costs);
        a.refresh_cost(costs);
        Ok(a)
    }

    /// Solves from scratch over every column.
    pub fn solve(costs: &CostMatrix) -> Result<Self, MatchingError> {
        Self::solve_active(costs, &vec![true; costs.cols()])
    }

    /// Drops column `col` and restores optimality in place. Returns whether
    /// any rematching was needed: an unmatched column is simply forgotten.
    pub fn remove_center(&mut self, costs: &CostMatrix, col: usize) -> Result<bool, MatchingError> {
        if !self.is_active(col) {
            return Err(MatchingError::UnknownCenter(col));
        }
        if self.active_count <= self.pairs.len() {
            return Err(MatchingError::TooFewCenters {
                rows: self.pairs.len(),
                cols: self.active_count - 1,
            });
        }
        self.active[col] = false;
        self.active_count -= 1;
        let row = self.owner[col];
        if row == NONE {
            return Ok(false);
        }
        self.owner[col] = NONE;
        self.pairs[row] = NONE;
        self.augment_row(costs, row);
        self.canonicalize(costs);
        self.refresh_cost(costs);
        Ok(true)
    }

    /// Copy of `self` with column `col` removed.
    pub fn without_center(&self, costs: &CostMatrix, col: usize) -> Result<Self, MatchingError> {
        let mut next = self.clone();
        next.remove_center(costs, col)?;
        Ok(next)
    }
}

/// Optimal assignment of `points` (rows) to `centers` (columns).
pub fn solve_assignment(
    points: &[&[f64]],
    centers: &[&[f64]],
    metric: &CostMetric,
) -> Result<(Assignment, CostMatrix), MatchingError> {
    if centers.len() < points.len() {
        return Err(MatchingError::TooFewCenters {
            rows: points.len(),
            cols: centers.len(),
        });
    }
    let costs = CostMatrix::from_points(points, centers, metric)?;
    let assignment = Assignment::solve(&costs)?;
    Ok((assignment, costs))
}

/// Optimal assignment after dropping center `removed`, reusing `assignment`'s
/// matching and potentials: at most one shortest-path phase.
pub fn repair_after_removal(
    assignment: &Assignment,
    costs: &CostMatrix,
    removed: usize,
) -> Result<Assignment, MatchingError> {
    assignment.without_center(costs, removed)
}
