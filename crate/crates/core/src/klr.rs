//! Kernel logistic regression with an RBF kernel, fitted by Newton's method.
//!
//! The decision function is `f(x) = sum_j alpha_j k(x_j, x) + b` over the
//! training examples `x_j`. Fitting minimizes
//!
//! ```text
//! sum_i [ log(1 + exp(f_i)) - y_i f_i ] + (ridge / 2) * |alpha|^2
//! ```
//!
//! with the bias left unpenalized. For `ridge > 0` the objective is strictly
//! convex in `(alpha, b)`, so the fit is unique.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{Dataset, LabeledExample, Pool};

/// Predicted probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KlrError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("kernel width must be positive, got {0}")]
    BadWidth(f64),
    #[error("ridge must be non-negative, got {0}")]
    BadRidge(f64),
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error("newton system is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlrParams {
    pub width: f64,
    pub ridge: f64,
    pub max_iter: usize,
    /// Stop once the euclidean norm of the gradient falls below this.
    pub tol: f64,
}

impl Default for KlrParams {
    fn default() -> Self {
        Self {
            width: 0.05,
            ridge: 1e-4,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl KlrParams {
    fn validate(&self) -> Result<(), KlrError> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(KlrError::BadWidth(self.width));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(KlrError::BadRidge(self.ridge));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn rbf_unchecked(x: &[f64], y: &[f64], width: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * width * width)).exp()
}

/// `exp(-|x - y|^2 / (2 width^2))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], width: f64) -> Result<f64, KlrError> {
    if x.len() != y.len() {
        return Err(KlrError::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if !(width > 0.0) {
        return Err(KlrError::BadWidth(width));
    }
    Ok(rbf_unchecked(x, y, width))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> Result<f64, KlrError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(KlrError::BadProbability(p));
    }
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

/// The regularized training problem over `theta = (alpha_1..alpha_n, b)`.
#[derive(Debug, Clone)]
pub struct KlrObjective {
    kernel: DMatrix<f64>,
    targets: DVector<f64>,
    ridge: f64,
}

impl KlrObjective {
    pub fn new(points: &[&[f64]], labels: &[u8], params: &KlrParams) -> Result<Self, KlrError> {
        params.validate()?;
        let n = points.len();
        if labels.len() != n {
            return Err(KlrError::DimensionMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if !(labels.contains(&0) && labels.contains(&1)) {
            return Err(KlrError::SingleClass);
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(KlrError::DimensionMismatch {
                left: dim,
                right: p.len(),
            });
        }
        let kernel =
            DMatrix::from_fn(n, n, |i, j| rbf_unchecked(points[i], points[j], params.width));
        let targets = DVector::from_iterator(n, labels.iter().map(|&l| f64::from(l)));
        Ok(Self {
            kernel,
            targets,
            ridge: params.ridge,
        })
    }

    /// Number of parameters, `n + 1`.
    pub fn num_params(&self) -> usize {
        self.targets.len() + 1
    }

    fn decision(&self, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.targets.len();
        let alpha = theta.rows(0, n);
        let mut f = &self.kernel * alpha;
        f.add_scalar_mut(theta[n]);
        f
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        let n = self.targets.len();
        let f = self.decision(theta);
        let nll: f64 = f
            .iter()
            .zip(self.targets.iter())
            .map(|(&fi, &yi)| softplus(fi) - yi * fi)
            .sum();
        nll + 0.5 * self.ridge * theta.rows(0, n).norm_squared()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.targets.len();
        let residual = self.decision(theta).map(sigmoid) - &self.targets;
        let mut grad = DVector::zeros(n + 1);
        let ga = &self.kernel * &residual + theta.rows(0, n) * self.ridge;
        grad.rows_mut(0, n).copy_from(&ga);
        grad[n] = residual.sum();
        grad
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.targets.len();
        let w = self.decision(theta).map(|z| {
            let p = sigmoid(z);
            p * (1.0 - p)
        });
        // K W as a column scaling of the symmetric kernel.
        let mut kw = self.kernel.clone();
        for (j, mut col) in kw.column_iter_mut().enumerate() {
            col *= w[j];
        }
        let mut h = DMatrix::zeros(n + 1, n + 1);
        let kwk = &kw * &self.kernel;
        h.view_mut((0, 0), (n, n)).copy_from(&kwk);
        for i in 0..n {
            h[(i, i)] += self.ridge;
        }
        let kw1: DVector<f64> = &self.kernel * &w;
        h.view_mut((0, n), (n, 1)).copy_from(&kw1);
        h.view_mut((n, 0), (1, n)).copy_from(&kw1.transpose());
        h[(n, n)] = w.sum();
        h
    }
}

/// Result of a Newton run: the final iterate and the trace of objective values.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    pub theta: DVector<f64>,
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Damped Newton iterations from `start`; each accepted step satisfies the
/// Armijo condition, so the objective trace is non-increasing.
pub fn newton(objective: &KlrObjective, start: DVector<f64>, params: &KlrParams) -> NewtonTrace {
    let mut theta = start;
    let mut value = objective.value(&theta);
    let mut trace = vec![value];
    let mut converged = false;
    // Near the optimum Newton converges quadratically, so a couple of extra
    // steps past the tolerance pin the weights down far more tightly.
    let mut polish = 2;
    for _ in 0..params.max_iter {
        let grad = objective.gradient(&theta);
        if grad.norm() <= params.tol {
            converged = true;
            if polish == 0 || grad.norm() == 0.0 {
                break;
            }
            polish -= 1;
        }
        let mut hess = objective.hessian(&theta);
        let step = match hess.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => {
                let jitter = 1e-10 * (1.0 + hess.diagonal().amax());
                for i in 0..hess.nrows() {
                    hess[(i, i)] += jitter;
                }
                match hess.lu().solve(&grad) {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        let slope = -grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta - &step * t;
            let v = objective.value(&candidate);
            if v <= value + 1e-4 * t * slope {
                theta = candidate;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left.
            converged = converged || objective.gradient(&theta).norm() <= params.tol.sqrt();
            break;
        }
        trace.push(value);
    }
    if !converged {
        converged = objective.gradient(&theta).norm() <= params.tol;
    }
    NewtonTrace {
        theta,
        objective: trace,
        converged,
    }
}

/// A fitted classifier. Immutable after fitting.
#[derive(Debug, Clone)]
pub struct KlrModel {
    support_indices: Vec<usize>,
    support: Vec<f64>,
    dim: usize,
    dual_weights: Vec<f64>,
    bias: f64,
    width: f64,
    ridge: f64,
    objective: f64,
    iterations: usize,
    converged: bool,
}

impl KlrModel {
    pub fn support_indices(&self) -> &[usize] {
        &self.support_indices
    }

    pub fn dual_weights(&self) -> &[f64] {
        &self.dual_weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kernel_width(&self) -> f64 {
        self.width
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Training objective at the returned weights.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// False when the iteration cap was hit before the gradient tolerance.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .chunks_exact(self.dim)
            .zip(&self.dual_weights)
            .map(|(s, a)| a * rbf_unchecked(s, x, self.width))
            .sum::<f64>()
            + self.bias
    }

    /// P(y = 1 | x), clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, KlrError> {
        if x.len() != self.dim {
            return Err(KlrError::DimensionMismatch {
                left: self.dim,
                right: x.len(),
            });
        }
        Ok(self.proba_unchecked(x))
    }

    #[inline]
    pub(crate) fn proba_unchecked(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x)).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    /// Thresholded prediction; p = 0.5 resolves to class 0.
    pub fn predict(&self, x: &[f64]) -> Result<u8, KlrError> {
        Ok(u8::from(self.predict_proba(x)? > 0.5))
    }
}

/// Fits on explicit examples of `dataset`, starting from the zero vector.
pub fn fit_examples(
    dataset: &Dataset,
    examples: &[LabeledExample],
    params: &KlrParams,
) -> Result<KlrModel, KlrError> {
    let n = examples.len();
    fit_examples_from(dataset, examples, params, DVector::zeros(n + 1))
}

/// Like [`fit_examples`] with an explicit starting point `(alpha, b)`.
pub fn fit_examples_from(
    dataset: &Dataset,
    examples: &[LabeledExample],
    params: &KlrParams,
    start: DVector<f64>,
) -> Result<KlrModel, KlrError> {
    let points: Vec<&[f64]> = examples.iter().map(|e| dataset.row(e.index)).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let problem = KlrObjective::new(&points, &labels, params)?;
    if start.len() != problem.num_params() {
        return Err(KlrError::DimensionMismatch {
            left: problem.num_params(),
            right: start.len(),
        });
    }
    let trace = newton(&problem, start, params);
    if !trace.converged {
        log::warn!(
            "klr fit stopped after {} iterations without reaching tolerance {}",
            trace.objective.len() - 1,
            params.tol
        );
    }
    let n = examples.len();
    let dual_weights: Vec<f64> = trace.theta.rows(0, n).iter().copied().collect();
    if dual_weights.iter().any(|w| !w.is_finite()) || !trace.theta[n].is_finite() {
        return Err(KlrError::Singular);
    }
    Ok(KlrModel {
        support_indices: examples.iter().map(|e| e.index).collect(),
        support: points.iter().flat_map(|p| p.iter().copied()).collect(),
        dim: dataset.dim(),
        dual_weights,
        bias: trace.theta[n],
        width: params.width,
        ridge: params.ridge,
        objective: *trace.objective.last().unwrap(),
        iterations: trace.objective.len() - 1,
        converged: trace.converged,
    })
}

/// Fits on the pool's labeled set.
pub fn fit(pool: &Pool, params: &KlrParams) -> Result<KlrModel, KlrError> {
    fit_examples(pool.dataset(), pool.labeled(), params)
}

/// Fraction of `test` rows whose thresholded prediction matches the true label.
pub fn accuracy(model: &KlrModel, dataset: &Dataset, test: &[usize]) -> Result<f64, KlrError> {
    if test.is_empty() {
        return Err(KlrError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for &i in test {
        if model.predict(dataset.row(i))? == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
