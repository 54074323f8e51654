//! Reweighting a source cell to a target cell's covariate distribution.
//!
//! Propensities are fitted pairwise: a probit for target membership on the
//! pooled target ∪ source rows. Within the pool the ratio
//! `p_target(x) / p_source(x)` is the fitted odds `π(x) / (1 − π(x))`, so IPW
//! weights for source rows are `wᵢ π̂ᵢ / (1 − π̂ᵢ)`, self-normalised.
//!
//! Auxiliary-to-study tilting replaces the source denominator with a tilted
//! probit `Φ(mᵢ'β̃)` chosen so that the reweighted source means equal the
//! efficient first moments `Σ wᵢ π̂ᵢ mᵢ / Σ wᵢ π̂ᵢ` taken over the whole pool,
//! in every moment column. Including the constant makes the weights sum to
//! one. The target cell itself is tilted the same way (starting from β̂), so
//! every cell compared against a target shares identical first moments.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DesignMatrix, GroupKey};
use crate::error::{Error, Result};
use crate::normal;
use crate::probit::{self, ProbitOptions, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ipw,
    #[default]
    Ast,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Ipw => "ipw",
            Estimator::Ast => "ast",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ipw" => Ok(Estimator::Ipw),
            "ast" => Ok(Estimator::Ast),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Pairwise propensity model for target membership within target ∪ source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub target_group: GroupKey,
    pub source_group: GroupKey,
    pub column_names: Vec<String>,
    /// Probit coefficients; empty when probabilities were supplied directly.
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Dataset rows of the pool, ascending.
    pub rows: Vec<usize>,
    /// Clipped `π̂(xᵢ)`, aligned with `rows`.
    pub fitted_probabilities: Vec<f64>,
    /// Unclipped in-pool source probability `1 − π̂(xᵢ)`, aligned with `rows`.
    #[serde(skip)]
    source_probabilities: Vec<f64>,
    /// Weighted share of target rows within the pool.
    pub target_share: f64,
    /// Weighted share of the pool within the dataset.
    pub pool_share: f64,
}

impl PropensityFit {
    /// Builds a fit from known in-pool target probabilities (for instance
    /// exact cell frequencies on a discrete population).
    pub fn from_probabilities(
        ds: &Dataset,
        target: GroupKey,
        source: GroupKey,
        probabilities: Vec<f64>,
    ) -> Result<PropensityFit> {
        let rows = pool_rows(ds, target, source)?;
        if probabilities.len() != rows.len() {
            return Err(Error::DimensionMismatch { expected: rows.len(), found: probabilities.len() });
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        let (target_share, pool_share) = shares(ds, target, &rows);
        Ok(PropensityFit {
            target_group: target,
            source_group: source,
            column_names: Vec::new(),
            coefficients: Vec::new(),
            log_likelihood: f64::NAN,
            converged: true,
            iterations: 0,
            source_probabilities: probabilities.iter().map(|p| 1.0 - p).collect(),
            fitted_probabilities: probabilities.iter().map(|p| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)).collect(),
            rows,
            target_share,
            pool_share,
        })
    }

    /// Group-level probabilities `(p_target(x), p_source(x))` per pool row,
    /// scaled by the pool's share of the dataset.
    pub fn group_probabilities(&self) -> (Vec<f64>, Vec<f64>) {
        let t = self.fitted_probabilities.iter().map(|p| p * self.pool_share).collect();
        let s = self.source_probabilities.iter().map(|p| p * self.pool_share).collect();
        (t, s)
    }

    /// `p_target(x) / p_source(x)` per pool row.
    pub fn odds(&self) -> Vec<f64> {
        self.fitted_probabilities.iter().zip(&self.source_probabilities).map(|(t, s)| t / s.max(PROB_FLOOR)).collect()
    }

    fn position_of(&self, row: usize) -> Option<usize> {
        self.rows.binary_search(&row).ok()
    }
}

fn pool_rows(ds: &Dataset, target: GroupKey, source: GroupKey) -> Result<Vec<usize>> {
    if target == source {
        return Err(Error::InvalidInput(format!("target and source are both {target}")));
    }
    let t = ds.group_members(target)?;
    let s = ds.group_members(source)?;
    if t.is_empty() {
        return Err(Error::EmptyCell(target));
    }
    if s.is_empty() {
        return Err(Error::EmptyCell(source));
    }
    let mut rows = t;
    rows.extend(s);
    rows.sort_unstable();
    Ok(rows)
}

fn shares(ds: &Dataset, target: GroupKey, rows: &[usize]) -> (f64, f64) {
    let units = ds.units();
    let pool: f64 = rows.iter().map(|&r| units[r].inclusion_weight).sum();
    let tgt: f64 = rows.iter().filter(|&&r| units[r].group() == target).map(|&r| units[r].inclusion_weight).sum();
    let all: f64 = units.iter().map(|u| u.inclusion_weight).sum();
    (tgt / pool, pool / all)
}

/// Design matrix over the pooled target ∪ source rows.
pub fn pair_design(ds: &Dataset, target: GroupKey, source: GroupKey, include_mediator: bool) -> Result<DesignMatrix> {
    let rows = pool_rows(ds, target, source)?;
    ds.design_matrix_rows(&rows, include_mediator)
}

pub fn fit_pair_propensity(
    ds: &Dataset,
    target: GroupKey,
    source: GroupKey,
    design: &DesignMatrix,
) -> Result<PropensityFit> {
    fit_pair_propensity_with(ds, target, source, design, &ProbitOptions::default())
}

pub fn fit_pair_propensity_with(
    ds: &Dataset,
    target: GroupKey,
    source: GroupKey,
    design: &DesignMatrix,
    opts: &ProbitOptions,
) -> Result<PropensityFit> {
    let rows = pool_rows(ds, target, source)?;
    if design.rows != rows {
        return Err(Error::InvalidInput(format!("design rows do not match the {target} ∪ {source} pool")));
    }
    let units = ds.units();
    let labels: Vec<bool> = rows.iter().map(|&r| units[r].group() == target).collect();
    let weights: Vec<f64> = rows.iter().map(|&r| units[r].inclusion_weight).collect();
    let fit = probit::fit_probit_with(&design.values, &labels, &weights, opts).map_err(|e| match e {
        Error::SingularDesign { columns } => Error::SingularDesign {
            columns: columns
                .iter()
                .map(|c| {
                    c.strip_prefix("col")
                        .and_then(|j| j.parse::<usize>().ok())
                        .and_then(|j| design.names.get(j).cloned())
                        .unwrap_or_else(|| c.clone())
                })
                .collect(),
        },
        other => other,
    })?;
    let index = probit::linear_index(&fit.coefficients, &design.values)?;
    let (target_share, pool_share) = shares(ds, target, &rows);
    Ok(PropensityFit {
        target_group: target,
        source_group: source,
        column_names: design.names.clone(),
        coefficients: fit.coefficients,
        log_likelihood: fit.log_likelihood,
        converged: fit.converged,
        iterations: fit.iterations,
        rows,
        fitted_probabilities: fit.fitted_probabilities,
        source_probabilities: index.iter().map(|&z| normal::cdf(-z)).collect(),
        target_share,
        pool_share,
    })
}

/// Efficient first moments of the target covariate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficientMoments {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    pub target_group: GroupKey,
}

pub fn efficient_first_moments(
    ds: &Dataset,
    target_fit: &PropensityFit,
    design: &DesignMatrix,
) -> Result<EfficientMoments> {
    if design.rows != target_fit.rows {
        return Err(Error::InvalidInput("design rows do not match the fitted pool".into()));
    }
    let units = ds.units();
    let p = design.ncols();
    let mut num = vec![0.0; p];
    let mut den = 0.0;
    for (k, &r) in design.rows.iter().enumerate() {
        let a = units[r].inclusion_weight * target_fit.fitted_probabilities[k];
        den += a;
        for (j, n) in num.iter_mut().enumerate() {
            *n += a * design.values[(k, j)];
        }
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    Ok(EfficientMoments {
        values: num.into_iter().map(|v| v / den).collect(),
        names: design.names.clone(),
        target_group: target_fit.target_group,
    })
}

/// Normalised weights over the whole dataset; zero outside the source cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub target_group: GroupKey,
    pub source_group: GroupKey,
    pub estimator: Estimator,
}

impl WeightVector {
    fn normalised(
        n: usize,
        entries: impl IntoIterator<Item = (usize, f64)>,
        target: GroupKey,
        source: GroupKey,
        estimator: Estimator,
    ) -> Result<WeightVector> {
        let mut weights = vec![0.0; n];
        let mut total = 0.0;
        for (r, w) in entries {
            weights[r] = w;
            total += w;
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(WeightVector { weights, target_group: target, source_group: source, estimator })
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn label(&self) -> String {
        format!("{}:{}<-{}", self.estimator, self.target_group, self.source_group)
    }
}

fn check_roles(target: GroupKey, source: GroupKey, fit: &PropensityFit) -> Result<()> {
    if target != fit.target_group || (source != fit.target_group && source != fit.source_group) {
        return Err(Error::InvalidInput(format!(
            "fit for {}<-{} cannot reweight {source} to {target}",
            fit.target_group, fit.source_group
        )));
    }
    Ok(())
}

/// Self-normalised inverse probability weights.
pub fn ipw_weights(ds: &Dataset, target: GroupKey, source: GroupKey, fit: &PropensityFit) -> Result<WeightVector> {
    check_roles(target, source, fit)?;
    let units = ds.units();
    if source == target {
        let rows = ds.group_members(target)?;
        return WeightVector::normalised(
            ds.len(),
            rows.into_iter().map(|r| (r, units[r].inclusion_weight)),
            target,
            source,
            Estimator::Ipw,
        );
    }
    let mut offending = Vec::new();
    let mut entries = Vec::new();
    for (k, &r) in fit.rows.iter().enumerate() {
        if units[r].group() != source {
            continue;
        }
        let ps = fit.source_probabilities[k];
        if ps < PROB_FLOOR {
            offending.push(units[r].id.clone());
            continue;
        }
        entries.push((r, units[r].inclusion_weight * fit.fitted_probabilities[k] / ps));
    }
    if !offending.is_empty() {
        return Err(Error::Support { units: offending });
    }
    WeightVector::normalised(ds.len(), entries, target, source, Estimator::Ipw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TiltOptions {
    fn default() -> Self {
        TiltOptions { tolerance: 1e-8, max_iterations: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedFit {
    pub target_group: GroupKey,
    pub source_group: GroupKey,
    pub column_names: Vec<String>,
    /// Target-membership coefficients β̂ of the underlying pair fit.
    pub base_coefficients: Vec<f64>,
    /// β̃ of the tilted source-membership probit.
    pub tilted_coefficients: Vec<f64>,
    /// Reweighted source moment minus efficient moment, per column.
    pub balance_residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Whether the derivative-free fallback was needed.
    pub used_fallback: bool,
    /// Source dataset rows and their unnormalised tilted weights.
    pub source_rows: Vec<usize>,
    pub raw_weights: Vec<f64>,
}

impl TiltedFit {
    pub fn max_residual(&self) -> f64 {
        self.balance_residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// The tilting problem in scaled coordinates: find β with
/// `Σ aᵢ mᵢ / Φ(mᵢ'β) = b`.
struct TiltProblem {
    /// Row-major scaled moment rows of the source cell.
    m: Vec<f64>,
    p: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    scale: Vec<f64>,
}

impl TiltProblem {
    fn row(&self, i: usize) -> &[f64] {
        &self.m[i * self.p..(i + 1) * self.p]
    }

    fn n(&self) -> usize {
        self.a.len()
    }

    /// Residual in scaled units, or `None` if some `Φ(z)` underflows.
    fn residual(&self, beta: &[f64]) -> Option<Vec<f64>> {
        let mut r: Vec<f64> = self.b.iter().map(|v| -v).collect();
        for i in 0..self.n() {
            let row = self.row(i);
            let z: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
            let phi = normal::cdf(z);
            if phi <= 0.0 {
                return None;
            }
            let c = self.a[i] / phi;
            for (rj, xj) in r.iter_mut().zip(row) {
                *rj += c * xj;
            }
        }
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    /// Negated Jacobian `Σ aᵢ φ(zᵢ)/Φ(zᵢ)² mᵢmᵢ'`, positive definite.
    fn neg_jacobian(&self, beta: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let mut jac = DMatrix::<f64>::zeros(p, p);
        for i in 0..self.n() {
            let row = self.row(i);
            let z: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
            let c = self.a[i] * normal::mills(z) / normal::cdf(z);
            for a in 0..p {
                let ca = c * row[a];
                for b in a..p {
                    jac[(a, b)] += ca * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                jac[(a, b)] = jac[(b, a)];
            }
        }
        jac
    }

    fn unscaled_residual(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.scale).map(|(v, s)| v * s).collect()
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Tilts the source denominator so the source cell reproduces the efficient
/// first moments. `source` may equal the fit's target (self-tilt).
pub fn ast_tilt(
    ds: &Dataset,
    target: GroupKey,
    source: GroupKey,
    target_fit: &PropensityFit,
    moments: &EfficientMoments,
    design: &DesignMatrix,
) -> Result<TiltedFit> {
    ast_tilt_with(ds, target, source, target_fit, moments, design, &TiltOptions::default())
}

pub fn ast_tilt_with(
    ds: &Dataset,
    target: GroupKey,
    source: GroupKey,
    target_fit: &PropensityFit,
    moments: &EfficientMoments,
    design: &DesignMatrix,
    opts: &TiltOptions,
) -> Result<TiltedFit> {
    check_roles(target, source, target_fit)?;
    if design.rows != target_fit.rows {
        return Err(Error::InvalidInput("design rows do not match the fitted pool".into()));
    }
    if moments.values.len() != design.ncols() {
        return Err(Error::DimensionMismatch { expected: design.ncols(), found: moments.values.len() });
    }
    if !design.names.iter().any(|n| n == "const") {
        return Err(Error::InvalidInput("moment columns must include the constant".into()));
    }
    if target_fit.coefficients.len() != design.ncols() {
        return Err(Error::InvalidInput("tilting needs probit coefficients for the pair fit".into()));
    }
    let units = ds.units();
    let p = design.ncols();

    let mut den = 0.0;
    for (k, &r) in target_fit.rows.iter().enumerate() {
        den += units[r].inclusion_weight * target_fit.fitted_probabilities[k];
    }
    let positions: Vec<usize> =
        (0..target_fit.rows.len()).filter(|&k| units[target_fit.rows[k]].group() == source).collect();
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let m = positions.iter().fold(0.0_f64, |m, &k| m.max(design.values[(k, j)].abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let mut m = Vec::with_capacity(positions.len() * p);
    for &k in &positions {
        for j in 0..p {
            m.push(design.values[(k, j)] / scale[j]);
        }
    }
    let problem = TiltProblem {
        a: positions
            .iter()
            .map(|&k| units[target_fit.rows[k]].inclusion_weight * target_fit.fitted_probabilities[k] / den)
            .collect(),
        b: moments.values.iter().zip(&scale).map(|(v, s)| v / s).collect(),
        m,
        p,
        scale,
    };

    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..problem.n() {
        let row = problem.row(i);
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] += problem.a[i] * row[a] * row[b];
            }
        }
    }
    if let Some(cols) = probit::collinear_columns(gram) {
        return Err(Error::SingularDesign { columns: cols.into_iter().map(|j| design.names[j].clone()).collect() });
    }

    let sign = if source == target { 1.0 } else { -1.0 };
    let start: Vec<f64> = target_fit.coefficients.iter().zip(&problem.scale).map(|(b, s)| sign * b * s).collect();
    let outcome = solve_tilt(&problem, start, opts);

    let beta = outcome.beta;
    let residual = problem.residual(&beta).unwrap_or_else(|| vec![f64::INFINITY; p]);
    let balance_residuals = problem.unscaled_residual(&residual);
    let converged = max_abs(&balance_residuals) <= opts.tolerance;
    if !converged {
        return Err(Error::TiltingFailure {
            iterations: outcome.iterations,
            max_residual: max_abs(&balance_residuals),
            residuals: balance_residuals,
        });
    }
    let raw_weights: Vec<f64> = (0..problem.n())
        .map(|i| {
            let z: f64 = problem.row(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
            problem.a[i] / normal::cdf(z)
        })
        .collect();
    Ok(TiltedFit {
        target_group: target,
        source_group: source,
        column_names: design.names.clone(),
        base_coefficients: target_fit.coefficients.clone(),
        tilted_coefficients: beta.iter().zip(&problem.scale).map(|(b, s)| b / s).collect(),
        balance_residuals,
        converged,
        iterations: outcome.iterations,
        used_fallback: outcome.used_fallback,
        source_rows: positions.iter().map(|&k| target_fit.rows[k]).collect(),
        raw_weights,
    })
}

struct TiltOutcome {
    beta: Vec<f64>,
    iterations: usize,
    used_fallback: bool,
}

/// Damped Newton on the moment residual, with a Nelder–Mead pass on the
/// squared residual whenever the line search cannot make progress.
fn solve_tilt(problem: &TiltProblem, start: Vec<f64>, opts: &TiltOptions) -> TiltOutcome {
    // Stop well inside the acceptance tolerance so the final check is not marginal.
    let stop = opts.tolerance * 1e-3;
    let mut beta = start;
    let mut used_fallback = false;
    let mut iterations = 0;
    let mut r = match problem.residual(&beta) {
        Some(r) => r,
        None => {
            used_fallback = true;
            let (b, _) = nelder_mead(problem, beta.clone(), 200 * problem.p);
            beta = b;
            problem.residual(&beta).unwrap_or_else(|| vec![f64::INFINITY; problem.p])
        }
    };
    let mut fallback_rounds = 0;
    while iterations < opts.max_iterations {
        if max_abs(&problem.unscaled_residual(&r)) <= stop {
            break;
        }
        iterations += 1;
        let step = problem
            .neg_jacobian(&beta)
            .cholesky()
            .map(|c| c.solve(&DVector::from_column_slice(&r)))
            .filter(|s| s.iter().all(|v| v.is_finite()));
        let current = sq_norm(&r);
        let mut accepted = None;
        if let Some(step) = step {
            let mut t = 1.0;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
                if let Some(rt) = problem.residual(&trial) {
                    if sq_norm(&rt) < current {
                        accepted = Some((trial, rt));
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        match accepted {
            Some((b, rt)) => {
                beta = b;
                r = rt;
            }
            None => {
                // Newton stalled; a derivative-free pass may move us to a
                // better basin, after which Newton resumes.
                if fallback_rounds >= 3 {
                    break;
                }
                fallback_rounds += 1;
                used_fallback = true;
                let (b, f) = nelder_mead(problem, beta.clone(), 200 * problem.p);
                if f >= current {
                    break;
                }
                beta = b;
                r = problem.residual(&beta).expect("finite objective implies finite residual");
            }
        }
    }
    TiltOutcome { beta, iterations, used_fallback }
}

fn nelder_mead(problem: &TiltProblem, start: Vec<f64>, max_evals: usize) -> (Vec<f64>, f64) {
    let f = |b: &[f64]| problem.residual(b).map_or(f64::INFINITY, |r| sq_norm(&r));
    let p = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    simplex.push((start.clone(), f(&start)));
    for j in 0..p {
        let mut v = start.clone();
        v[j] += if v[j].abs() > 1e-3 { 0.05 * v[j] } else { 0.05 };
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let mut evals = p + 1;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[p].1;
        if worst.is_finite() && (worst - best).abs() <= 1e-30 + 1e-15 * best.abs() {
            break;
        }
        let centroid: Vec<f64> = (0..p).map(|j| simplex[..p].iter().map(|v| v.0[j]).sum::<f64>() / p as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[p].0).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[p] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[p - 1].1 {
            simplex[p] = (xr, fr);
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            evals += 1;
            if fc < simplex[p].1 {
                simplex[p] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = x0.iter().zip(&v.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                    v.1 = f(&v.0);
                }
                evals += p;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

pub fn ast_weights(ds: &Dataset, target: GroupKey, source: GroupKey, tilted: &TiltedFit) -> Result<WeightVector> {
    if tilted.target_group != target || tilted.source_group != source {
        return Err(Error::InvalidInput(format!(
            "tilt for {}<-{} cannot reweight {source} to {target}",
            tilted.target_group, tilted.source_group
        )));
    }
    if !tilted.converged {
        return Err(Error::TiltingFailure {
            iterations: tilted.iterations,
            max_residual: tilted.max_residual(),
            residuals: tilted.balance_residuals.clone(),
        });
    }
    WeightVector::normalised(
        ds.len(),
        tilted.source_rows.iter().copied().zip(tilted.raw_weights.iter().copied()),
        target,
        source,
        Estimator::Ast,
    )
}

/// Per-month `Σᵢ ωᵢ Yᵢ(month)`.
pub fn weighted_outcome_mean(ds: &Dataset, wv: &WeightVector) -> Result<Vec<f64>> {
    if wv.weights.len() != ds.len() {
        return Err(Error::DimensionMismatch { expected: ds.len(), found: wv.weights.len() });
    }
    let mut out = vec![0.0; ds.horizon()];
    for (u, &w) in ds.units().iter().zip(&wv.weights) {
        if w != 0.0 {
            for (o, y) in out.iter_mut().zip(&u.outcomes) {
                *o += w * y;
            }
        }
    }
    Ok(out)
}

/// Reweighted means `Σᵢ ωᵢ mᵢ` of every column of `design` (rows must cover
/// the weight vector's support).
pub fn reweighted_means(wv: &WeightVector, design: &DesignMatrix) -> Vec<f64> {
    let mut out = vec![0.0; design.ncols()];
    for (k, &r) in design.rows.iter().enumerate() {
        let w = wv.weights[r];
        if w != 0.0 {
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * design.values[(k, j)];
            }
        }
    }
    out
}

/// One fitted comparison: a target, its pool partner, and everything needed
/// to reweight either cell of the pool to the target.
#[derive(Debug, Clone)]
pub struct PairModel {
    pub fit: PropensityFit,
    pub design: DesignMatrix,
    pub moments: EfficientMoments,
}

impl PairModel {
    pub fn estimate(
        ds: &Dataset,
        target: GroupKey,
        source: GroupKey,
        include_mediator: bool,
        start: Option<&[f64]>,
    ) -> Result<PairModel> {
        let design = pair_design(ds, target, source, include_mediator)?;
        let opts = ProbitOptions { start: start.map(<[f64]>::to_vec), ..ProbitOptions::default() };
        let fit = fit_pair_propensity_with(ds, target, source, &design, &opts)?;
        let moments = efficient_first_moments(ds, &fit, &design)?;
        Ok(PairModel { fit, design, moments })
    }

    /// Weights reweighting `source` (either pool cell) to the target.
    pub fn weights(
        &self,
        ds: &Dataset,
        source: GroupKey,
        estimator: Estimator,
    ) -> Result<(WeightVector, Option<TiltedFit>)> {
        let target = self.fit.target_group;
        match estimator {
            Estimator::Ipw => Ok((ipw_weights(ds, target, source, &self.fit)?, None)),
            Estimator::Ast => {
                let tilt = ast_tilt(ds, target, source, &self.fit, &self.moments, &self.design)?;
                Ok((ast_weights(ds, target, source, &tilt)?, Some(tilt)))
            }
        }
    }

    pub fn position_of(&self, row: usize) -> Option<usize> {
        self.fit.position_of(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    fn unit(id: usize, d: u8, t: u8, x: f64, y: f64, w: f64) -> Unit {
        Unit { id: format!("u{id}"), d, t, covariates: vec![x], mediator: None, outcomes: vec![y], inclusion_weight: w }
    }

    fn toy() -> Dataset {
        // Four (1,1,v), four (0,1,v), two in each pre cell.
        let mut units = Vec::new();
        let spec = [
            (1, 1, 0.1, 1.0),
            (1, 1, 0.8, 0.0),
            (1, 1, -0.3, 1.0),
            (1, 1, 1.2, 1.0),
            (0, 1, 0.0, 0.0),
            (0, 1, 0.5, 3.0),
            (0, 1, -0.9, 1.0),
            (0, 1, 0.7, 0.0),
            (1, 0, 0.2, 1.0),
            (1, 0, -0.2, 0.0),
            (0, 0, 0.4, 1.0),
            (0, 0, -0.4, 0.0),
        ];
        for (i, (d, t, x, y)) in spec.into_iter().enumerate() {
            units.push(unit(i, d, t, x, y, 1.0));
        }
        Dataset::new(units, vec!["x".into()]).unwrap()
    }

    #[test]
    fn self_weights_are_normalised_inclusion_weights() {
        let ds = toy();
        let model = PairModel::estimate(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, false, None).unwrap();
        let (wv, _) = model.weights(&ds, GroupKey::TREATED_POST, Estimator::Ipw).unwrap();
        let members = ds.group_members(GroupKey::TREATED_POST).unwrap();
        for (i, w) in wv.weights.iter().enumerate() {
            let expect = if members.contains(&i) { 0.25 } else { 0.0 };
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn ipw_odds_two_unit_source() {
        let ds = toy();
        let source = ds.group_members(GroupKey::CONTROL_POST).unwrap();
        let target = ds.group_members(GroupKey::TREATED_POST).unwrap();
        let mut rows: Vec<usize> = source.iter().chain(&target).copied().collect();
        rows.sort_unstable();
        // Two source units at odds 2 and 1; the rest at negligible odds.
        let probs: Vec<f64> = rows
            .iter()
            .map(|&r| match r {
                4 => 2.0 / 3.0,
                5 => 0.5,
                _ if source.contains(&r) => 1e-300,
                _ => 0.5,
            })
            .collect();
        let fit =
            PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, probs).unwrap();
        let wv = ipw_weights(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, &fit).unwrap();
        assert!((wv.weights[4] - 2.0 / 3.0).abs() < 1e-12);
        assert!((wv.weights[5] - 1.0 / 3.0).abs() < 1e-12);
        // Outcomes (0, 3) → 1.
        let mean = weighted_outcome_mean(&ds, &wv).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn support_violation_lists_units() {
        let ds = toy();
        let rows = pool_rows(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST).unwrap();
        let probs: Vec<f64> = rows.iter().map(|&r| if r == 6 { 1.0 } else { 0.5 }).collect();
        let fit =
            PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, probs).unwrap();
        match ipw_weights(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, &fit) {
            Err(Error::Support { units }) => assert_eq!(units, vec!["u6".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_requires_distinct_nonempty_cells() {
        let ds = toy();
        assert!(pair_design(&ds, GroupKey::TREATED_POST, GroupKey::TREATED_POST, false).is_err());
        assert!(matches!(
            pair_design(&ds, GroupKey::TREATED_POST, GroupKey::new(1, 1, crate::data::System::Mandatory), false),
            Err(Error::CounterfactualCell(_))
        ));
    }

    #[test]
    fn efficient_moments_hand_arithmetic() {
        // Five pool rows with hand-set probabilities and inclusion weights.
        let mut units = Vec::new();
        let rows = [(1, 1, 1.0, 2.0), (1, 1, 2.0, 1.0), (0, 1, 3.0, 1.0), (0, 1, 4.0, 2.0), (0, 1, 5.0, 1.0)];
        for (i, (d, t, x, w)) in rows.into_iter().enumerate() {
            units.push(unit(i, d, t, x, 0.0, w));
        }
        units.push(unit(5, 1, 0, 0.0, 0.0, 1.0));
        units.push(unit(6, 0, 0, 0.0, 0.0, 1.0));
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        let probs = vec![0.9, 0.6, 0.5, 0.2, 0.1];
        let fit =
            PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, probs).unwrap();
        let design = pair_design(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, false).unwrap();
        let em = efficient_first_moments(&ds, &fit, &design).unwrap();
        // Σ wp = 1.8 + 0.6 + 0.5 + 0.4 + 0.1 = 3.4 ; Σ wpx = 1.8 + 1.2 + 1.5 + 1.6 + 0.5 = 6.6
        assert!((em.values[0] - 1.0).abs() < 1e-15);
        assert!((em.values[1] - 6.6 / 3.4).abs() < 1e-14);

        let constant =
            PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, vec![0.3; 5])
                .unwrap();
        let em = efficient_first_moments(&ds, &constant, &design).unwrap();
        // Plain weighted mean: (2 + 2 + 3 + 8 + 5) / 7.
        assert!((em.values[1] - 20.0 / 7.0).abs() < 1e-14);

        let zero = PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, vec![0.0; 5])
            .unwrap();
        // Clipping keeps the denominator positive; the floor still yields finite moments.
        assert!(efficient_first_moments(&ds, &zero, &design).is_ok());
    }

    #[test]
    fn self_tilt_with_matched_moments_is_uniform() {
        let ds = toy();
        let model = PairModel::estimate(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, false, None).unwrap();
        // Hand the tilt the target's own weighted sample means.
        let target_rows = ds.group_members(GroupKey::TREATED_POST).unwrap();
        let design = &model.design;
        let mut means = vec![0.0; design.ncols()];
        for (k, &r) in design.rows.iter().enumerate() {
            if target_rows.contains(&r) {
                for (j, m) in means.iter_mut().enumerate() {
                    *m += design.values[(k, j)];
                }
            }
        }
        let pool_wp: f64 = model.fit.fitted_probabilities.iter().sum();
        // Self-tilt at β̂ has weights wᵢ/D with D = Σ_pool π̂; matched moments
        // are therefore the target means scaled by n_T / D.
        let moments = EfficientMoments {
            values: means.iter().map(|m| m / pool_wp).collect(),
            names: design.names.clone(),
            target_group: GroupKey::TREATED_POST,
        };
        let tilt = ast_tilt(&ds, GroupKey::TREATED_POST, GroupKey::TREATED_POST, &model.fit, &moments, design).unwrap();
        assert_eq!(tilt.iterations, 0);
        assert!(tilt.max_residual() < 1e-12);
        let wv = ast_weights(&ds, GroupKey::TREATED_POST, GroupKey::TREATED_POST, &tilt).unwrap();
        for &r in &target_rows {
            assert!((wv.weights[r] - 0.25).abs() < 1e-12, "{}", wv.weights[r]);
        }
    }
}
