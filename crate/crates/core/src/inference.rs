//! Nonparametric bootstrap for effect series.
//!
//! Replicate `b` draws from its own ChaCha stream (`seed`, stream `b`), so the
//! result does not depend on the number of worker threads or their order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupKey};
use crate::effects::{decompose, DecomposeOptions, Decomposition, EffectSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Draw N units with replacement from the whole sample.
    #[default]
    Individual,
    /// Draw each observed cell's size from within that cell.
    StratifiedByCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub seed: u64,
    pub confidence_level: f64,
    pub resampling: Resampling,
    /// Largest tolerated share of failed replicates.
    pub max_drop_share: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replications: 499,
            seed: 0,
            confidence_level: 0.95,
            resampling: Resampling::Individual,
            max_drop_share: 0.10,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config("bootstrap needs at least 2 replications".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.confidence_level)));
        }
        if !(0.0..1.0).contains(&self.max_drop_share) {
            return Err(Error::Config("max_drop_share must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplicate {
    pub replicate: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub method: String,
    pub resampling: Resampling,
    pub replications: usize,
    pub succeeded: usize,
    pub dropped: usize,
    pub confidence_level: f64,
    pub seed: u64,
    pub failures: Vec<FailedReplicate>,
}

#[derive(Debug, Clone)]
pub struct BootstrapOutput {
    pub series: Vec<EffectSeries>,
    pub summary: BootstrapSummary,
    /// Successful replicate estimates, indexed `[series][replicate][month]`.
    pub draws: Vec<Vec<Vec<f64>>>,
}

/// Draw counts per unit for replicate `b`.
pub fn resample_counts(ds: &Dataset, cfg: &BootstrapConfig, b: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(b as u64);
    let n = ds.len();
    let mut counts = vec![0u32; n];
    match cfg.resampling {
        Resampling::Individual => {
            for _ in 0..n {
                counts[rng.random_range(0..n)] += 1;
            }
        }
        Resampling::StratifiedByCell => {
            for g in GroupKey::OBSERVABLE {
                let members = ds.group_members(g).expect("observable cell");
                for _ in 0..members.len() {
                    counts[members[rng.random_range(0..members.len())]] += 1;
                }
            }
        }
    }
    counts
}

/// Type-7 sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval around `point`, widened if necessary so it contains
/// the point, and the two-sided p-value for a zero effect.
pub fn percentile_interval(draws: &[f64], point: f64, level: f64) -> (f64, f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lo = quantile(&sorted, alpha / 2.0).min(point);
    let hi = quantile(&sorted, 1.0 - alpha / 2.0).max(point);
    let b = draws.len() as f64;
    let below = draws.iter().filter(|&&v| v <= 0.0).count() as f64;
    let above = draws.iter().filter(|&&v| v >= 0.0).count() as f64;
    let p = (2.0 * ((below + 1.0) / (b + 1.0)).min((above + 1.0) / (b + 1.0))).min(1.0);
    (lo, hi, p)
}

/// Runs `pipeline` on the full sample and on every replicate, filling the
/// interval and p-value fields of the full-sample series.
pub fn bootstrap<F>(ds: &Dataset, pipeline: F, cfg: &BootstrapConfig) -> Result<BootstrapOutput>
where
    F: Fn(&Dataset) -> Result<Vec<EffectSeries>> + Sync,
{
    let point = pipeline(ds)?;
    bootstrap_around(ds, point, |d| Ok(pipeline(d)?.into_iter().map(|s| s.point).collect()), cfg)
}

/// As [`bootstrap`], with the full-sample series supplied and replicates
/// returning only point vectors in the same order.
pub fn bootstrap_around<F>(
    ds: &Dataset,
    mut point: Vec<EffectSeries>,
    replicate: F,
    cfg: &BootstrapConfig,
) -> Result<BootstrapOutput>
where
    F: Fn(&Dataset) -> Result<Vec<Vec<f64>>> + Sync,
{
    cfg.validate()?;
    let results: Vec<Result<Vec<Vec<f64>>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|b| {
            let counts = resample_counts(ds, cfg, b);
            let sample = ds.with_multiplicities(&counts)?;
            let est = replicate(&sample)?;
            if est.len() != point.len() || est.iter().zip(&point).any(|(e, p)| e.len() != p.horizon()) {
                return Err(Error::DimensionMismatch { expected: point.len(), found: est.len() });
            }
            Ok(est)
        })
        .collect();

    let mut draws: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.replications); point.len()];
    let mut failures = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(est) => {
                for (slot, e) in draws.iter_mut().zip(est) {
                    slot.push(e);
                }
            }
            Err(e) => failures.push(FailedReplicate { replicate: b, kind: e.kind().into(), message: e.to_string() }),
        }
    }
    let dropped = failures.len();
    let succeeded = cfg.replications - dropped;
    if dropped as f64 > cfg.max_drop_share * cfg.replications as f64 || succeeded < 2 {
        return Err(Error::InferenceDegraded { dropped, total: cfg.replications });
    }

    for (series, reps) in point.iter_mut().zip(&draws) {
        let h = series.horizon();
        let mut lo = Vec::with_capacity(h);
        let mut hi = Vec::with_capacity(h);
        let mut p = Vec::with_capacity(h);
        let mut column = vec![0.0; reps.len()];
        for m in 0..h {
            for (c, r) in column.iter_mut().zip(reps) {
                *c = r[m];
            }
            let (l, u, pv) = percentile_interval(&column, series.point[m], cfg.confidence_level);
            lo.push(l);
            hi.push(u);
            p.push(pv);
        }
        series.ci_low = Some(lo);
        series.ci_high = Some(hi);
        series.p_values = Some(p);
        series.meta.notes.push(format!(
            "percentile bootstrap, {} of {} replicates, level {}",
            succeeded, cfg.replications, cfg.confidence_level
        ));
    }

    Ok(BootstrapOutput {
        series: point,
        summary: BootstrapSummary {
            method: "percentile".into(),
            resampling: cfg.resampling,
            replications: cfg.replications,
            succeeded,
            dropped,
            confidence_level: cfg.confidence_level,
            seed: cfg.seed,
            failures,
        },
        draws,
    })
}

/// Full-sample decomposition plus bootstrap of all its series. Replicates
/// refit every pair model, starting from the full-sample coefficients.
pub fn bootstrap_decomposition(
    ds: &Dataset,
    opts: &DecomposeOptions,
    cfg: &BootstrapConfig,
) -> Result<(Decomposition, BootstrapOutput)> {
    let run = decompose(ds, opts)?;
    let series = run.all_series()?;
    let estimands: Vec<_> = series.iter().map(|s| s.estimand).collect();
    let warm = DecomposeOptions { warm_starts: Some(run.warm_starts()), ..opts.clone() };
    let out = bootstrap_around(
        ds,
        series,
        |sample| {
            let r = decompose(sample, &warm)?;
            estimands.iter().map(|&e| r.point(e)).collect()
        },
        cfg,
    )?;
    Ok((run, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;
    use crate::effects::{Estimand, SeriesMeta};
    use crate::reweight::Estimator;

    fn small() -> Dataset {
        let mut units = Vec::new();
        for i in 0..40 {
            let (d, t) = [(1, 0), (0, 0), (1, 1), (0, 1)][i % 4];
            units.push(Unit {
                id: format!("u{i}"),
                d,
                t,
                covariates: vec![(i as f64 * 0.37).sin()],
                mediator: None,
                outcomes: vec![f64::from(d) + 0.01 * i as f64, 1.0],
                inclusion_weight: 1.0,
            });
        }
        Dataset::new(units, vec!["x".into()]).unwrap()
    }

    fn constant(_: &Dataset) -> Result<Vec<EffectSeries>> {
        Ok(vec![EffectSeries::new(Estimand::Policy, Estimator::Ast, vec![0.25, -0.5], SeriesMeta::default())])
    }

    #[test]
    fn constant_estimand_gives_degenerate_interval() {
        let cfg = BootstrapConfig { replications: 19, seed: 3, ..Default::default() };
        let out = bootstrap(&small(), constant, &cfg).unwrap();
        let s = &out.series[0];
        assert_eq!(s.ci_low.as_ref().unwrap(), &vec![0.25, -0.5]);
        assert_eq!(s.ci_high.as_ref().unwrap(), &vec![0.25, -0.5]);
        let floor = 2.0 / 20.0;
        for p in s.p_values.as_ref().unwrap() {
            assert!((p - floor).abs() < 1e-15);
        }
    }

    #[test]
    fn counts_preserve_n_and_depend_only_on_seed_and_index() {
        let ds = small();
        let cfg = BootstrapConfig { seed: 11, ..Default::default() };
        let a = resample_counts(&ds, &cfg, 5);
        assert_eq!(a.iter().map(|&c| c as usize).sum::<usize>(), ds.len());
        assert_eq!(a, resample_counts(&ds, &cfg, 5));
        assert_ne!(a, resample_counts(&ds, &cfg, 6));
        let strat = BootstrapConfig { resampling: Resampling::StratifiedByCell, ..cfg };
        let c = resample_counts(&ds, &strat, 0);
        for g in GroupKey::OBSERVABLE {
            let rows = ds.group_members(g).unwrap();
            assert_eq!(rows.iter().map(|&r| c[r] as usize).sum::<usize>(), rows.len());
        }
    }

    #[test]
    fn p_value_and_percentiles_by_hand() {
        // Draws 1..=9, point 5: type-7 2.5% quantile = 1.2, 97.5% = 8.8.
        let draws: Vec<f64> = (1..=9).map(f64::from).collect();
        let (lo, hi, p) = percentile_interval(&draws, 5.0, 0.95);
        assert!((lo - 1.2).abs() < 1e-12 && (hi - 8.8).abs() < 1e-12);
        assert!((p - 0.2).abs() < 1e-15);
        // Point outside the percentile range is still covered.
        let (lo, _, _) = percentile_interval(&draws, 0.5, 0.95);
        assert_eq!(lo, 0.5);
        let sym: Vec<f64> = vec![-2.0, -1.0, 1.0, 2.0];
        let (_, _, p) = percentile_interval(&sym, 0.0, 0.9);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn failures_are_counted_and_can_degrade() {
        let ds = small();
        let cfg = BootstrapConfig { replications: 20, seed: 1, ..Default::default() };
        // Replicates that did not draw unit u0 fail (about 37% of them).
        let flaky = |d: &Dataset| -> Result<Vec<EffectSeries>> {
            if d.units().iter().any(|u| u.id == "u0") {
                constant(d)
            } else {
                Err(Error::ZeroDenominator)
            }
        };
        assert!(matches!(bootstrap(&ds, flaky, &cfg), Err(Error::InferenceDegraded { total: 20, .. })));
        let lenient = BootstrapConfig { max_drop_share: 0.9, ..cfg };
        let out = bootstrap(&ds, flaky, &lenient).unwrap();
        assert!(out.summary.dropped > 0);
        assert_eq!(out.summary.succeeded + out.summary.dropped, 20);
        assert_eq!(out.draws[0].len(), out.summary.succeeded);
        assert!(out.summary.failures.iter().all(|f| f.kind == "estimation"));
    }

    #[test]
    fn invalid_configuration() {
        let cfg = BootstrapConfig { replications: 1, ..Default::default() };
        assert!(matches!(bootstrap(&small(), constant, &cfg), Err(Error::Config(_))));
        let cfg = BootstrapConfig { confidence_level: 1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
