//! Row-weighted binary probit by Newton–Raphson.
//!
//! The log-likelihood is `Σ wᵢ ln Φ(qᵢ xᵢ'β)` with `qᵢ = 2yᵢ − 1`. Writing
//! `λᵢ = φ(qᵢzᵢ)/Φ(qᵢzᵢ)`, the score is `Σ wᵢ qᵢ λᵢ xᵢ` and the Hessian is
//! `−Σ wᵢ λᵢ (qᵢzᵢ + λᵢ) xᵢxᵢ'`, which is negative definite whenever the
//! design has full rank. Weights are normalised to sum to one internally so
//! the score tolerance does not depend on their scale, and regressors are
//! rescaled column-wise before solving.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// Fitted probabilities are clipped into `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

/// |x'β| beyond which Φ is 1 to within 1e-88; treated as separation.
const SEPARATION_INDEX: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct ProbitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the (weight-normalised) score.
    pub gradient_tolerance: f64,
    /// Relative log-likelihood change below which progress is considered stalled.
    pub relative_ll_tolerance: f64,
    pub max_halvings: usize,
    /// Warm start in the original parameterisation.
    pub start: Option<Vec<f64>>,
}

impl Default for ProbitOptions {
    fn default() -> Self {
        ProbitOptions {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            relative_ll_tolerance: 1e-12,
            max_halvings: 50,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    /// Intercept first when the design carries a constant column.
    pub coefficients: Vec<f64>,
    /// Log-likelihood at the estimate, in the caller's weight scale.
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the weight-normalised score at the estimate.
    pub max_score: f64,
    /// Clipped `Φ(xᵢ'β̂)` over the estimation rows.
    pub fitted_probabilities: Vec<f64>,
}

pub fn fit_probit(x: &DMatrix<f64>, labels: &[bool], row_weights: &[f64]) -> Result<ProbitFit> {
    fit_probit_with(x, labels, row_weights, &ProbitOptions::default())
}

pub fn fit_probit_with(
    x: &DMatrix<f64>,
    labels: &[bool],
    row_weights: &[f64],
    opts: &ProbitOptions,
) -> Result<ProbitFit> {
    let n = x.nrows();
    let p = x.ncols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
    }
    if row_weights.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: row_weights.len() });
    }
    if let Some(w) = row_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidInput(format!("row weights must be positive and finite, found {w}")));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::DegenerateLabels);
    }

    let total: f64 = row_weights.iter().sum();
    let problem = Problem::new(x, labels, row_weights.iter().map(|w| w / total).collect());
    problem.check_rank()?;

    let mut beta = match &opts.start {
        Some(s) if s.len() == p => s.iter().zip(&problem.scale).map(|(b, s)| b * s).collect(),
        Some(s) => return Err(Error::DimensionMismatch { expected: p, found: s.len() }),
        None => vec![0.0; p],
    };

    let mut eval = problem.evaluate(&beta, true);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let step = match newton_step(&eval.hessian, &eval.gradient) {
            Some(s) => s,
            None => break,
        };
        let max_grad = max_abs(&eval.gradient);
        let beta_norm = max_abs(&beta);
        if max_grad <= opts.gradient_tolerance && max_abs(&step) <= 1e-6 * (1.0 + beta_norm) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let ll = problem.log_likelihood(&trial);
            if ll.is_finite() && ll >= eval.ll - 1e-15 * eval.ll.abs() {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            converged = max_grad <= opts.gradient_tolerance;
            break;
        };
        let prev_ll = eval.ll;
        beta = next;
        eval = problem.evaluate(&beta, true);
        let rel = (eval.ll - prev_ll).abs() / prev_ll.abs().max(f64::MIN_POSITIVE);
        if rel <= opts.relative_ll_tolerance && max_abs(&eval.gradient) <= opts.gradient_tolerance {
            converged = true;
            break;
        }
    }

    let max_score = max_abs(&eval.gradient);
    let coefficients: Vec<f64> = beta.iter().zip(&problem.scale).map(|(b, s)| b / s).collect();
    // Under separation the score underflows to zero while the index diverges;
    // an index this far out means some rows are predicted with certainty.
    let separated = linear_index(&coefficients, x)?.iter().any(|z| z.abs() > SEPARATION_INDEX);
    if !converged || separated || !coefficients.iter().all(|c| c.is_finite()) {
        return Err(Error::NonConvergence { iterations, max_score, last_iterate: coefficients });
    }
    let fitted_probabilities = predict_probability(&coefficients, x)?;
    Ok(ProbitFit {
        coefficients,
        log_likelihood: eval.ll * total,
        converged,
        iterations,
        max_score,
        fitted_probabilities,
    })
}

/// `Φ(xᵢ'β)` per row, clipped into `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub fn predict_probability(coefficients: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(linear_index(coefficients, x)?.into_iter().map(|z| normal::cdf(z).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)).collect())
}

pub fn linear_index(coefficients: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != coefficients.len() {
        return Err(Error::DimensionMismatch { expected: coefficients.len(), found: x.ncols() });
    }
    let beta = DVector::from_column_slice(coefficients);
    Ok((x * beta).iter().copied().collect())
}

/// Weighted average marginal effect of regressor `column`.
///
/// Columns whose values are exactly {0, 1} (both present) are treated as
/// binary and get the discrete difference `Φ(x'β | xⱼ=1) − Φ(x'β | xⱼ=0)`;
/// anything else gets the derivative `φ(x'β)·βⱼ`.
pub fn average_marginal_effect(fit: &ProbitFit, x: &DMatrix<f64>, column: usize, row_weights: &[f64]) -> Result<f64> {
    let beta = &fit.coefficients;
    if column >= beta.len() {
        return Err(Error::InvalidInput(format!("column {column} out of range for {} regressors", beta.len())));
    }
    if row_weights.len() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), found: row_weights.len() });
    }
    let z = linear_index(beta, x)?;
    let col = x.column(column);
    let binary =
        col.iter().all(|&v| v == 0.0 || v == 1.0) && col.iter().any(|&v| v == 0.0) && col.iter().any(|&v| v == 1.0);
    let total: f64 = row_weights.iter().sum();
    let mut acc = 0.0;
    for (i, (&zi, &w)) in z.iter().zip(row_weights).enumerate() {
        let effect = if binary {
            let base = zi - col[i] * beta[column];
            normal::cdf(base + beta[column]) - normal::cdf(base)
        } else {
            normal::pdf(zi) * beta[column]
        };
        acc += w * effect;
    }
    Ok(acc / total)
}

/// Weighted log-likelihood in the caller's parameterisation, exposed for
/// finite-difference and oracle checks.
pub fn log_likelihood(coefficients: &[f64], x: &DMatrix<f64>, labels: &[bool], row_weights: &[f64]) -> f64 {
    let z = linear_index(coefficients, x).expect("dimension checked by caller");
    z.iter().zip(labels).zip(row_weights).map(|((&zi, &y), &w)| w * normal::log_cdf(if y { zi } else { -zi })).sum()
}

/// Analytic score of [`log_likelihood`].
pub fn score(coefficients: &[f64], x: &DMatrix<f64>, labels: &[bool], row_weights: &[f64]) -> Vec<f64> {
    let z = linear_index(coefficients, x).expect("dimension checked by caller");
    let mut g = vec![0.0; coefficients.len()];
    for (i, ((&zi, &y), &w)) in z.iter().zip(labels).zip(row_weights).enumerate() {
        let q = if y { 1.0 } else { -1.0 };
        let c = w * q * normal::mills(q * zi);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += c * x[(i, j)];
        }
    }
    g
}

struct Problem {
    /// Row-major scaled design.
    rows: Vec<f64>,
    n: usize,
    p: usize,
    q: Vec<f64>,
    weights: Vec<f64>,
    scale: Vec<f64>,
}

struct Evaluation {
    ll: f64,
    gradient: Vec<f64>,
    hessian: DMatrix<f64>,
}

impl Problem {
    fn new(x: &DMatrix<f64>, labels: &[bool], weights: Vec<f64>) -> Problem {
        let (n, p) = x.shape();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let m = x.column(j).amax();
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                rows.push(x[(i, j)] / scale[j]);
            }
        }
        let q = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        Problem { rows, n, p, q, weights, scale }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    fn check_rank(&self) -> Result<()> {
        let mut gram = DMatrix::<f64>::zeros(self.p, self.p);
        for i in 0..self.n {
            let r = self.row(i);
            let w = self.weights[i];
            for a in 0..self.p {
                for b in a..self.p {
                    gram[(a, b)] += w * r[a] * r[b];
                }
            }
        }
        collinear_columns(gram).map_or(Ok(()), |cols| {
            Err(Error::SingularDesign { columns: cols.into_iter().map(|j| format!("col{j}")).collect() })
        })
    }

    fn log_likelihood(&self, beta: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| {
                let z: f64 = self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
                self.weights[i] * normal::log_cdf(self.q[i] * z)
            })
            .sum()
    }

    fn evaluate(&self, beta: &[f64], with_hessian: bool) -> Evaluation {
        let p = self.p;
        let mut ll = 0.0;
        let mut gradient = vec![0.0; p];
        let mut hessian = DMatrix::<f64>::zeros(p, p);
        for i in 0..self.n {
            let r = self.row(i);
            let z: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
            let u = self.q[i] * z;
            let w = self.weights[i];
            let lambda = normal::mills(u);
            ll += w * normal::log_cdf(u);
            let g = w * self.q[i] * lambda;
            for (gj, xj) in gradient.iter_mut().zip(r) {
                *gj += g * xj;
            }
            if with_hessian {
                let h = w * lambda * (u + lambda);
                for a in 0..p {
                    let ha = h * r[a];
                    for b in a..p {
                        hessian[(a, b)] -= ha * r[b];
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hessian[(a, b)] = hessian[(b, a)];
            }
        }
        Evaluation { ll, gradient, hessian }
    }
}

/// Solves `(−H) Δ = g`; `None` if `−H` is not positive definite.
fn newton_step(hessian: &DMatrix<f64>, gradient: &[f64]) -> Option<Vec<f64>> {
    let neg = -hessian;
    let chol = neg.cholesky()?;
    let step = chol.solve(&DVector::from_column_slice(gradient));
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Indices of columns involved in a near-null direction of a symmetric
/// positive semi-definite Gram matrix (upper triangle filled), if any.
pub(crate) fn collinear_columns(mut gram: DMatrix<f64>) -> Option<Vec<usize>> {
    let p = gram.nrows();
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(gram);
    let (imin, &lmin) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let lmax = eig.eigenvalues.amax();
    if lmax > 0.0 && lmin > 1e-12 * lmax {
        return None;
    }
    let v = eig.eigenvectors.column(imin);
    let vmax = v.amax();
    Some((0..p).filter(|&j| v[j].abs() >= 0.1 * vmax).collect())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
