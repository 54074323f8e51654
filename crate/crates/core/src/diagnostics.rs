//! Balance and overlap diagnostics.
//!
//! Standardised differences use the weighted sample variance of the
//! underlying per-unit quantity (the variable itself for means, its centred
//! powers for higher moments), not the sampling variance of the moment.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::data::{Dataset, DesignMatrix, GroupKey};
use crate::effects::{Decomposition, PairRole};
use crate::error::{Error, Result};
use crate::reweight::{Estimator, PropensityFit, WeightVector};

/// A standardised difference in percent, or the signal for differing means
/// with zero spread on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StdDiff {
    Finite(f64),
    Infinite,
}

impl StdDiff {
    pub fn value(self) -> f64 {
        match self {
            StdDiff::Finite(v) => v,
            StdDiff::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for StdDiff {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StdDiff::Finite(v) => s.serialize_f64(*v),
            StdDiff::Infinite => s.serialize_str("infinite"),
        }
    }
}

/// `|μa − μb| / √(½(σa² + σb²)) · 100`. Two zero variances give 0 for equal
/// means and [`StdDiff::Infinite`] otherwise.
pub fn standardized_difference(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> Result<StdDiff> {
    if !(var_a >= 0.0 && var_b >= 0.0) || !mean_a.is_finite() || !mean_b.is_finite() {
        return Err(Error::InvalidInput(
            "standardised difference needs finite means and non-negative variances".into(),
        ));
    }
    let scale = (0.5 * (var_a + var_b)).sqrt();
    if scale == 0.0 {
        return Ok(if mean_a == mean_b { StdDiff::Finite(0.0) } else { StdDiff::Infinite });
    }
    Ok(StdDiff::Finite((mean_a - mean_b).abs() / scale * 100.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    Mean,
    Variance,
    Skewness,
    Kurtosis,
}

impl Moment {
    pub const ALL: [Moment; 4] = [Moment::Mean, Moment::Variance, Moment::Skewness, Moment::Kurtosis];
}

/// Weighted moments 1–4 of one variable, each with the weighted variance of
/// its per-unit contribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedMoments {
    pub mean: f64,
    pub variance: f64,
    /// `None` for a constant variable.
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub constant: bool,
    #[serde(skip)]
    spread: [Option<f64>; 4],
}

impl WeightedMoments {
    /// `values` and `weights` aligned; weights need not be normalised.
    pub fn compute(values: &[f64], weights: &[f64]) -> Result<WeightedMoments> {
        let total: f64 = weights.iter().sum();
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: values.len(), found: weights.len() });
        }
        if !(total > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        let wmean = |f: &dyn Fn(f64) -> f64| values.iter().zip(weights).map(|(&x, &w)| w * f(x)).sum::<f64>() / total;
        let mean = wmean(&|x| x);
        let variance = wmean(&|x| (x - mean).powi(2));
        let spread_of = |f: &dyn Fn(f64) -> f64| {
            let c = wmean(f);
            wmean(&|x| (f(x) - c).powi(2))
        };
        let constant = variance <= 1e-14 * (1.0 + mean * mean);
        let (skewness, kurtosis, hs, hk) = if constant {
            (None, None, None, None)
        } else {
            let sd = variance.sqrt();
            let s3 = move |x: f64| ((x - mean) / sd).powi(3);
            let s4 = move |x: f64| ((x - mean) / sd).powi(4);
            (Some(wmean(&s3)), Some(wmean(&s4)), Some(spread_of(&s3)), Some(spread_of(&s4)))
        };
        Ok(WeightedMoments {
            mean,
            variance,
            skewness,
            kurtosis,
            constant,
            spread: [Some(variance), Some(spread_of(&|x| (x - mean).powi(2))), hs, hk],
        })
    }

    pub fn get(&self, m: Moment) -> Option<f64> {
        match m {
            Moment::Mean => Some(self.mean),
            Moment::Variance => Some(self.variance),
            Moment::Skewness => self.skewness,
            Moment::Kurtosis => self.kurtosis,
        }
    }

    fn spread(&self, m: Moment) -> Option<f64> {
        self.spread[m as usize]
    }
}

fn compare(a: &WeightedMoments, b: &WeightedMoments, m: Moment) -> Result<Option<StdDiff>> {
    match (a.get(m), a.spread(m), b.get(m), b.spread(m)) {
        (Some(ma), Some(va), Some(mb), Some(vb)) => standardized_difference(ma, va, mb, vb).map(Some),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentComparison {
    pub column: String,
    pub binary: bool,
    pub moment: Moment,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub sd: Option<StdDiff>,
}

fn column_values(design: &DesignMatrix, j: usize, wv: &WeightVector) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (k, &r) in design.rows.iter().enumerate() {
        let w = wv.weights[r];
        if w > 0.0 {
            xs.push(design.values[(k, j)]);
            ws.push(w);
        }
    }
    (xs, ws)
}

fn is_binary(design: &DesignMatrix, j: usize) -> bool {
    design.values.column(j).iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Weighted moments 1–4 of every non-constant design column under two weight
/// vectors, with standardised differences between them.
pub fn higher_moment_report(
    design: &DesignMatrix,
    a: &WeightVector,
    b: &WeightVector,
) -> Result<Vec<MomentComparison>> {
    let mut out = Vec::new();
    for (j, name) in design.names.iter().enumerate() {
        if name == "const" {
            continue;
        }
        let (xa, wa) = column_values(design, j, a);
        let (xb, wb) = column_values(design, j, b);
        let ma = WeightedMoments::compute(&xa, &wa)?;
        let mb = WeightedMoments::compute(&xb, &wb)?;
        for m in Moment::ALL {
            out.push(MomentComparison {
                column: name.clone(),
                binary: is_binary(design, j),
                moment: m,
                a: ma.get(m),
                b: mb.get(m),
                sd: compare(&ma, &mb, m)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub role: PairRole,
    pub target: String,
    pub source: String,
    pub column: String,
    pub binary: bool,
    pub moment: Moment,
    pub target_before: Option<f64>,
    pub source_before: Option<f64>,
    pub sd_before: Option<StdDiff>,
    pub target_after: Option<f64>,
    pub source_after: Option<f64>,
    pub sd_after: Option<StdDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryIdentity {
    /// Binary (column, pair) combinations whose reweighted means agree.
    pub checked: usize,
    /// Largest absolute gap in variance, skewness or kurtosis among them.
    pub max_higher_moment_gap: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCount {
    pub epsilon: f64,
    pub below: usize,
    pub above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSupport {
    pub group: String,
    pub n: usize,
    pub min_propensity: f64,
    pub max_propensity: f64,
    pub thresholds: Vec<ThresholdCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSupport {
    pub target: String,
    pub source: String,
    /// Fitted in-pool probability of target membership, per cell.
    pub cells: Vec<CellSupport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportSummary {
    pub epsilon: f64,
    pub pass: bool,
    pub flagged: usize,
    pub pairs: Vec<PairSupport>,
}

pub const SUPPORT_THRESHOLDS: [f64; 2] = [0.01, 0.001];

/// Counts fitted propensities outside `[ε, 1 − ε]` per pair and cell, for the
/// standard thresholds and for `epsilon`, which decides pass/fail.
pub fn support_check(ds: &Dataset, fits: &[&PropensityFit], epsilon: f64) -> Result<SupportSummary> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Config(format!("support epsilon {epsilon} outside (0, 0.5)")));
    }
    let mut eps: Vec<f64> = SUPPORT_THRESHOLDS.to_vec();
    if !eps.contains(&epsilon) {
        eps.push(epsilon);
    }
    let units = ds.units();
    let mut flagged = 0;
    let mut pairs = Vec::with_capacity(fits.len());
    for fit in fits {
        let mut cells = Vec::with_capacity(2);
        for g in [fit.target_group, fit.source_group] {
            let probs: Vec<f64> = fit
                .rows
                .iter()
                .zip(&fit.fitted_probabilities)
                .filter(|(&r, _)| units[r].group() == g)
                .map(|(_, &p)| p)
                .collect();
            let thresholds: Vec<ThresholdCount> = eps
                .iter()
                .map(|&e| ThresholdCount {
                    epsilon: e,
                    below: probs.iter().filter(|&&p| p < e).count(),
                    above: probs.iter().filter(|&&p| p > 1.0 - e).count(),
                })
                .collect();
            flagged += thresholds.iter().find(|t| t.epsilon == epsilon).map_or(0, |t| t.below + t.above);
            cells.push(CellSupport {
                group: g.to_string(),
                n: probs.len(),
                min_propensity: probs.iter().copied().fold(f64::INFINITY, f64::min),
                max_propensity: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                thresholds,
            });
        }
        pairs.push(PairSupport { target: fit.target_group.to_string(), source: fit.source_group.to_string(), cells });
    }
    Ok(SupportSummary { epsilon, pass: flagged == 0, flagged, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub estimator: Estimator,
    pub variance_convention: String,
    pub rows: Vec<BalanceRow>,
    pub binary_identity: BinaryIdentity,
    /// Rows whose reweighted SD exceeds 20, the usual rule of thumb for a
    /// large imbalance; an annotation, not a test.
    pub large_after: usize,
    pub support: SupportSummary,
}

impl BalanceReport {
    /// Largest reweighted first-moment SD over every pair and column.
    pub fn max_first_moment_sd_after(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.moment == Moment::Mean)
            .filter_map(|r| r.sd_after.map(StdDiff::value))
            .fold(0.0, f64::max)
    }
}

fn inclusion_weights(ds: &Dataset, g: GroupKey, estimator: Estimator) -> Result<WeightVector> {
    let rows = ds.group_members(g)?;
    let total: f64 = rows.iter().map(|&r| ds.units()[r].inclusion_weight).sum();
    let mut weights = vec![0.0; ds.len()];
    for &r in &rows {
        weights[r] = ds.units()[r].inclusion_weight / total;
    }
    Ok(WeightVector { weights, target_group: g, source_group: g, estimator })
}

/// Balance before and after reweighting for every pair of a run, plus the
/// support summary of the same fits.
pub fn balance_report(ds: &Dataset, run: &Decomposition, epsilon: f64) -> Result<BalanceReport> {
    let mut rows = Vec::new();
    let mut checked = 0;
    let mut gap: f64 = 0.0;
    for pair in &run.pairs {
        let target = pair.role.target();
        let source = pair.role.source();
        let target_after = match &pair.target_weights {
            Some(w) => w.clone(),
            None => pair.model.weights(ds, target, run.estimator)?.0,
        };
        let before = higher_moment_report(
            &pair.model.design,
            &inclusion_weights(ds, target, run.estimator)?,
            &inclusion_weights(ds, source, run.estimator)?,
        )?;
        let after = higher_moment_report(&pair.model.design, &target_after, &pair.source_weights)?;
        let mut mean_matched: BTreeMap<String, bool> = BTreeMap::new();
        for (b, a) in before.into_iter().zip(after) {
            if a.binary {
                if a.moment == Moment::Mean {
                    let matched = match (a.a, a.b) {
                        (Some(x), Some(y)) => (x - y).abs() <= 1e-8,
                        _ => false,
                    };
                    mean_matched.insert(a.column.clone(), matched);
                    if matched {
                        checked += 1;
                    }
                } else if mean_matched.get(&a.column).copied().unwrap_or(false) {
                    if let (Some(x), Some(y)) = (a.a, a.b) {
                        gap = gap.max((x - y).abs());
                    }
                }
            }
            rows.push(BalanceRow {
                role: pair.role,
                target: target.to_string(),
                source: source.to_string(),
                column: a.column,
                binary: a.binary,
                moment: a.moment,
                target_before: b.a,
                source_before: b.b,
                sd_before: b.sd,
                target_after: a.a,
                source_after: a.b,
                sd_after: a.sd,
            });
        }
    }
    let fits: Vec<&PropensityFit> = run.pairs.iter().map(|p| &p.model.fit).collect();
    let support = support_check(ds, &fits, epsilon)?;
    let large_after = rows.iter().filter(|r| r.sd_after.is_some_and(|s| s.value() > 20.0)).count();
    Ok(BalanceReport {
        estimator: run.estimator,
        variance_convention: "sigma^2 is the weighted sample variance of the variable (or of its centred power for higher moments), not the sampling variance of the moment".into(),
        rows,
        binary_identity: BinaryIdentity { checked, max_higher_moment_gap: gap, holds: gap <= 1e-6 },
        large_after,
        support,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSeries {
    pub group: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreTrend {
    /// Months before programme start, in the order of `values`.
    pub months_before: Vec<usize>,
    pub series: Vec<GroupSeries>,
}

/// Inclusion-weighted mean of each `hist_<j>` covariate per observed cell.
pub fn pre_trend_series(ds: &Dataset) -> Result<PreTrend> {
    let mut cols: Vec<(usize, usize)> = ds
        .covariate_names()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.strip_prefix("hist_").and_then(|j| j.parse().ok()).map(|j| (j, i)))
        .collect();
    if cols.is_empty() {
        return Err(Error::Schema("no history covariates (named hist_<months before>) in the dataset".into()));
    }
    cols.sort_unstable();
    let mut series = Vec::with_capacity(4);
    for g in GroupKey::OBSERVABLE {
        let rows = ds.group_members(g)?;
        let total: f64 = rows.iter().map(|&r| ds.units()[r].inclusion_weight).sum();
        let values = cols
            .iter()
            .map(|&(_, c)| {
                rows.iter().map(|&r| ds.units()[r].inclusion_weight * ds.units()[r].covariates[c]).sum::<f64>() / total
            })
            .collect();
        series.push(GroupSeries { group: g.to_string(), values });
    }
    Ok(PreTrend { months_before: cols.into_iter().map(|(j, _)| j).collect(), series })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    #[test]
    fn sd_unit_cases() {
        assert_eq!(standardized_difference(1.0, 1.0, 0.0, 1.0).unwrap(), StdDiff::Finite(100.0));
        assert_eq!(standardized_difference(0.3, 0.2, 0.3, 0.2).unwrap(), StdDiff::Finite(0.0));
        assert_eq!(standardized_difference(1.0, 0.0, 0.0, 0.0).unwrap(), StdDiff::Infinite);
        assert_eq!(standardized_difference(1.0, 0.0, 1.0, 0.0).unwrap(), StdDiff::Finite(0.0));
        assert!(standardized_difference(1.0, -1.0, 0.0, 1.0).is_err());
        assert_eq!(serde_json::to_string(&StdDiff::Infinite).unwrap(), "\"infinite\"");
    }

    #[test]
    fn sd_of_two_five_point_samples() {
        // a = 1..5: mean 3, population variance 2. b = (2,2,4,6,6): mean 4, variance 3.2.
        let a = WeightedMoments::compute(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]).unwrap();
        let b = WeightedMoments::compute(&[2.0, 2.0, 4.0, 6.0, 6.0], &[1.0; 5]).unwrap();
        assert!((a.variance - 2.0).abs() < 1e-14 && (b.variance - 3.2).abs() < 1e-14);
        let sd = standardized_difference(a.mean, a.variance, b.mean, b.variance).unwrap().value();
        assert!((sd - 100.0 / 2.6_f64.sqrt()).abs() < 1e-12);
        let sym = standardized_difference(b.mean, b.variance, a.mean, a.variance).unwrap().value();
        assert_eq!(sd, sym);
    }

    #[test]
    fn six_point_moments_by_hand() {
        // x = (0,0,1,1,1,3): mean 1, central powers (1,1,0,0,0,2)² etc.
        let m = WeightedMoments::compute(&[0.0, 0.0, 1.0, 1.0, 1.0, 3.0], &[1.0; 6]).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-15);
        let var = (1.0 + 1.0 + 4.0) / 6.0;
        assert!((m.variance - var).abs() < 1e-15);
        let m3 = (-1.0 - 1.0 + 8.0) / 6.0;
        let m4 = (1.0 + 1.0 + 16.0) / 6.0;
        assert!((m.skewness.unwrap() - m3 / var.powf(1.5)).abs() < 1e-12);
        assert!((m.kurtosis.unwrap() - m4 / (var * var)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_constant_samples() {
        let m = WeightedMoments::compute(&[-2.0, -1.0, 0.0, 1.0, 2.0], &[1.0; 5]).unwrap();
        assert!(m.skewness.unwrap().abs() < 1e-15);
        let c = WeightedMoments::compute(&[4.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(c.constant && c.variance == 0.0 && c.skewness.is_none());
    }

    #[test]
    fn sd_is_affine_invariant() {
        let xs = [0.3, 1.2, -0.7, 2.2, 0.9];
        let ys = [1.0, 0.1, 0.4, -0.3, 0.8];
        let w = [1.0, 2.0, 1.0, 0.5, 1.0];
        let sd = |f: &dyn Fn(f64) -> f64| {
            let a = WeightedMoments::compute(&xs.map(f), &w).unwrap();
            let b = WeightedMoments::compute(&ys.map(f), &w).unwrap();
            Moment::ALL.map(|m| compare(&a, &b, m).unwrap().unwrap().value())
        };
        let base = sd(&|x| x);
        let moved = sd(&|x| 3.0 * x - 7.0);
        for (a, b) in base.iter().zip(moved) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    fn support_fixture() -> (Dataset, PropensityFit) {
        let mut units = Vec::new();
        for (i, (d, t)) in [(1, 1), (1, 1), (0, 1), (0, 1), (1, 0), (0, 0)].into_iter().enumerate() {
            units.push(Unit {
                id: format!("u{i}"),
                d,
                t,
                covariates: vec![0.0],
                mediator: None,
                outcomes: vec![0.0],
                inclusion_weight: 1.0,
            });
        }
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        let fit = PropensityFit::from_probabilities(
            &ds,
            GroupKey::TREATED_POST,
            GroupKey::CONTROL_POST,
            vec![0.5, 0.9999, 0.5, 0.005],
        )
        .unwrap();
        (ds, fit)
    }

    #[test]
    fn support_flags_extreme_propensities() {
        let (ds, fit) = support_fixture();
        let s = support_check(&ds, &[&fit], 0.001).unwrap();
        assert!(!s.pass);
        assert_eq!(s.flagged, 1);
        let treated = &s.pairs[0].cells[0];
        assert_eq!(treated.thresholds[1], ThresholdCount { epsilon: 0.001, below: 0, above: 1 });
        let control = &s.pairs[0].cells[1];
        assert_eq!(control.thresholds[0], ThresholdCount { epsilon: 0.01, below: 1, above: 0 });
        assert_eq!(control.thresholds[1].below, 0);

        let flat = PropensityFit::from_probabilities(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, vec![0.5; 4])
            .unwrap();
        assert!(support_check(&ds, &[&flat], 0.01).unwrap().pass);
    }

    #[test]
    fn pre_trend_needs_history_and_is_flat_for_constants() {
        let (ds, _) = support_fixture();
        assert!(matches!(pre_trend_series(&ds), Err(Error::Schema(_))));
        let units = ds.units().iter().map(|u| Unit { covariates: vec![0.0, 2.0, 2.0], ..u.clone() }).collect();
        let ds = Dataset::new(units, vec!["x".into(), "hist_2".into(), "hist_1".into()]).unwrap();
        let pt = pre_trend_series(&ds).unwrap();
        assert_eq!(pt.months_before, vec![1, 2]);
        for s in &pt.series {
            assert_eq!(s.values, vec![2.0, 2.0]);
        }
    }
}
