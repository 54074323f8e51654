//! Controlled direct and indirect effects of the allocation system.
//!
//! The pre-reform treated are reweighted to the post-reform treated on both
//! covariates and mediator moments (duration-band dummies and their
//! interactions with planned days). Replacing the covariate-only term in the
//! policy assembly with this one gives the controlled direct effect; the
//! indirect effect is the remainder of the policy effect.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DurationCategory, GroupKey, ProgrammeType};
use crate::effects::{decompose, DecomposeOptions, Decomposition, EffectSeries, Estimand, PairRole, SeriesMeta};
use crate::error::{Error, Result};
use crate::reweight::{reweighted_means, Estimator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediatorBalance {
    pub estimator: Estimator,
    pub columns: Vec<String>,
    pub efficient_moments: Vec<f64>,
    pub reweighted_moments: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Whether an AST tilt converged; `None` under IPW.
    pub tilt_converged: Option<bool>,
    pub note: String,
}

impl MediatorBalance {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationResult {
    pub direct: EffectSeries,
    pub indirect: EffectSeries,
    pub policy: EffectSeries,
    pub mediator_balance: MediatorBalance,
}

/// Every treated unit needs a mediator record, and every duration band seen
/// among the post-reform treated must also occur among the pre-reform treated.
pub fn check_mediator_overlap(ds: &Dataset) -> Result<()> {
    let mut bands = [BTreeSet::new(), BTreeSet::new()];
    for u in ds.units().iter().filter(|u| u.d == 1) {
        let med = u.mediator.as_ref().ok_or_else(|| Error::MissingMediator(u.id.clone()))?;
        bands[usize::from(u.t)].insert(med.duration_category().index());
    }
    let missing: Vec<&str> = bands[1].difference(&bands[0]).map(|&i| DurationCategory::ALL[i].label()).collect();
    if !missing.is_empty() {
        return Err(Error::MediatorOverlap(format!(
            "duration band(s) {} occur in {} but not in {}",
            missing.join(", "),
            GroupKey::TREATED_POST,
            GroupKey::TREATED_PRE
        )));
    }
    Ok(())
}

/// Builds the mediation result from a run that balanced mediators.
pub fn mediation_from(run: &Decomposition) -> Result<MediationResult> {
    let pair = run
        .pair(PairRole::Mediated)
        .ok_or_else(|| Error::InvalidInput("run did not balance mediator moments".into()))?;
    let reweighted = reweighted_means(&pair.source_weights, &pair.model.design);
    let efficient = pair.model.moments.values.clone();
    let residuals = match &pair.source_tilt {
        Some(t) => t.balance_residuals.clone(),
        None => reweighted.iter().zip(&efficient).map(|(a, b)| a - b).collect(),
    };
    let mediator_balance = MediatorBalance {
        estimator: run.estimator,
        columns: pair.model.design.names.clone(),
        efficient_moments: efficient,
        reweighted_moments: reweighted,
        residuals,
        tilt_converged: pair.source_tilt.as_ref().map(|t| t.converged),
        note: "mediator distribution of the post-reform treated enters through the moment conditions; no separate model for it is fitted".into(),
    };
    let policy = run.series(Estimand::Policy)?;
    let direct = run.series(Estimand::Direct)?;
    let indirect = indirect_effect(&policy, &direct)?;
    Ok(MediationResult { direct, indirect, policy, mediator_balance })
}

pub fn mediate(ds: &Dataset, estimator: Estimator) -> Result<MediationResult> {
    let run = decompose(ds, &DecomposeOptions { estimator, mediation: true, warm_starts: None })?;
    mediation_from(&run)
}

pub fn controlled_direct_effect(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    Ok(mediate(ds, estimator)?.direct)
}

/// Residual effect `policy − direct`, month by month.
pub fn indirect_effect(policy: &EffectSeries, direct: &EffectSeries) -> Result<EffectSeries> {
    if policy.horizon() != direct.horizon() {
        return Err(Error::DimensionMismatch { expected: policy.horizon(), found: direct.horizon() });
    }
    let point = policy.point.iter().zip(&direct.point).map(|(p, d)| p - d).collect();
    let mut components = policy.meta.components.clone();
    components.extend(direct.meta.components.iter().cloned());
    components.sort();
    components.dedup();
    Ok(EffectSeries::new(Estimand::Indirect, policy.estimator, point, SeriesMeta { components, notes: Vec::new() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub t: u8,
    pub period: String,
    pub programme_type: ProgrammeType,
    pub count: usize,
    /// Inclusion-weighted share among the period's treated.
    pub share: f64,
    pub mean_planned_days: Option<f64>,
    pub mean_actual_days: Option<f64>,
}

/// Programme-type composition of the treated, per period.
pub fn mediator_composition_table(ds: &Dataset) -> Result<Vec<CompositionRow>> {
    let mut rows = Vec::with_capacity(10);
    for t in [0u8, 1] {
        let treated: Vec<_> = ds.units().iter().filter(|u| u.d == 1 && u.t == t).collect();
        for u in &treated {
            if u.mediator.is_none() {
                return Err(Error::MissingMediator(u.id.clone()));
            }
        }
        let total: f64 = treated.iter().map(|u| u.inclusion_weight).sum();
        for ty in ProgrammeType::ALL {
            let members: Vec<_> = treated
                .iter()
                .filter_map(|u| u.mediator.as_ref().filter(|m| m.programme_type == ty).map(|m| (u.inclusion_weight, m)))
                .collect();
            let w: f64 = members.iter().map(|(w, _)| w).sum();
            let mean = |f: fn(&crate::data::MediatorRecord) -> u32| {
                (w > 0.0).then(|| members.iter().map(|(wi, m)| wi * f64::from(f(m))).sum::<f64>() / w)
            };
            rows.push(CompositionRow {
                t,
                period: if t == 0 { "pre" } else { "post" }.to_string(),
                programme_type: ty,
                count: members.len(),
                share: if total > 0.0 { w / total } else { 0.0 },
                mean_planned_days: mean(|m| m.planned_duration_days),
                mean_actual_days: mean(|m| m.actual_duration_days),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MediatorRecord, Unit};

    fn med(ty: ProgrammeType, planned: u32, actual: u32) -> Option<MediatorRecord> {
        Some(MediatorRecord { programme_type: ty, planned_duration_days: planned, actual_duration_days: actual })
    }

    fn unit(id: &str, d: u8, t: u8, x: f64, mediator: Option<MediatorRecord>, y: f64) -> Unit {
        Unit { id: id.into(), d, t, covariates: vec![x], mediator, outcomes: vec![y], inclusion_weight: 1.0 }
    }

    #[test]
    fn composition_by_hand() {
        use ProgrammeType::*;
        let units = vec![
            unit("a", 1, 0, 0.0, med(ShortTraining, 60, 50), 0.0),
            unit("b", 1, 0, 0.0, med(ShortTraining, 90, 80), 0.0),
            unit("c", 1, 0, 0.0, med(Retraining, 700, 690), 0.0),
            unit("d", 1, 1, 0.0, med(ShortTraining, 30, 30), 0.0),
            unit("e", 1, 1, 0.0, med(ShortTraining, 40, 20), 0.0),
            unit("f", 1, 1, 0.0, med(ShortTraining, 50, 40), 0.0),
            unit("g", 0, 0, 0.0, None, 0.0),
            unit("h", 0, 1, 0.0, None, 0.0),
        ];
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        let table = mediator_composition_table(&ds).unwrap();
        let find = |t: u8, ty: ProgrammeType| table.iter().find(|r| r.t == t && r.programme_type == ty).unwrap();
        let pre_short = find(0, ShortTraining);
        assert_eq!(pre_short.count, 2);
        assert!((pre_short.share - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pre_short.mean_planned_days, Some(75.0));
        assert_eq!(pre_short.mean_actual_days, Some(65.0));
        assert!((find(0, Retraining).share - 1.0 / 3.0).abs() < 1e-15);
        let post_short = find(1, ShortTraining);
        assert_eq!(post_short.share, 1.0);
        assert_eq!(post_short.mean_planned_days, Some(40.0));
        assert_eq!(post_short.mean_actual_days, Some(30.0));
        assert_eq!(find(1, Retraining).mean_planned_days, None);
        assert_eq!(table.len(), 10);
    }

    #[test]
    fn missing_band_in_pre_period_is_an_overlap_error() {
        use ProgrammeType::*;
        let units = vec![
            unit("a", 1, 0, 0.0, med(ShortTraining, 60, 50), 0.0),
            unit("b", 1, 1, 0.0, med(Retraining, 800, 790), 0.0),
            unit("g", 0, 0, 0.0, None, 0.0),
            unit("h", 0, 1, 0.0, None, 0.0),
        ];
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        let err = check_mediator_overlap(&ds).unwrap_err();
        assert!(matches!(err, Error::MediatorOverlap(ref m) if m.contains("gt24m")), "{err}");
    }

    #[test]
    fn missing_record_for_treated_unit() {
        let units = vec![
            unit("a", 1, 0, 0.0, None, 0.0),
            unit("b", 1, 1, 0.0, med(ProgrammeType::Retraining, 800, 790), 0.0),
            unit("g", 0, 0, 0.0, None, 0.0),
            unit("h", 0, 1, 0.0, None, 0.0),
        ];
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        assert!(matches!(check_mediator_overlap(&ds), Err(Error::MissingMediator(id)) if id == "a"));
    }

    #[test]
    fn indirect_is_the_exact_remainder() {
        let meta = SeriesMeta::default();
        let policy = EffectSeries::new(Estimand::Policy, Estimator::Ast, vec![0.1, 0.2, -0.3], meta.clone());
        let same = EffectSeries::new(Estimand::Direct, Estimator::Ast, policy.point.clone(), meta.clone());
        assert_eq!(indirect_effect(&policy, &same).unwrap().point, vec![0.0; 3]);
        let zero = EffectSeries::new(Estimand::Direct, Estimator::Ast, vec![0.0; 3], meta);
        assert_eq!(indirect_effect(&policy, &zero).unwrap().point, policy.point);
    }

    /// Identical treated cells across periods: mediator balancing has nothing
    /// to do, so the balanced and covariate-only terms coincide.
    #[test]
    fn balancing_matched_mediators_is_idempotent() {
        use ProgrammeType::*;
        let plans = [
            (ShortTraining, 90),
            (ShortTraining, 150),
            (LongTraining, 250),
            (LongTraining, 300),
            (LongTraining, 400),
            (LongTraining, 600),
            (Retraining, 800),
            (Retraining, 760),
        ];
        let mut units = Vec::new();
        for t in [0u8, 1] {
            for (i, &(ty, days)) in plans.iter().enumerate() {
                let x = i as f64 * 0.3 - 0.7;
                let y = 0.2 + 0.1 * x + f64::from(days) / 5000.0 + 0.1 * f64::from(t);
                units.push(unit(&format!("t{t}d{i}"), 1, t, x, med(ty, days, days), y));
                units.push(unit(&format!("t{t}c{i}"), 0, t, x + 0.05 * (i % 3) as f64, None, 0.1 + 0.1 * x));
            }
        }
        let ds = Dataset::new(units, vec!["x".into()]).unwrap();
        let run = decompose(&ds, &DecomposeOptions { estimator: Estimator::Ast, mediation: true, warm_starts: None })
            .unwrap();
        let result = mediation_from(&run).unwrap();
        assert!(result.mediator_balance.max_residual() <= 1e-8);
        let mediated = run.means.mediated.as_ref().unwrap();
        assert!((mediated[0] - run.means.treated_across[0]).abs() < 1e-8);
        assert!(result.indirect.point[0].abs() < 1e-8);
        for m in 0..ds.horizon() {
            assert!((result.direct.point[m] + result.indirect.point[m] - result.policy.point[m]).abs() < 1e-12);
        }
    }
}
