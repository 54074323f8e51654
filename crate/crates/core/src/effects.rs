//! Counterfactual means and the estimands built from them.
//!
//! One run fits every pair model once and derives all estimands from the
//! same component means, so the decomposition identities are arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupKey};
use crate::error::{Error, Result};
use crate::reweight::{weighted_outcome_mean, Estimator, PairModel, TiltedFit, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    AttPre,
    AttPost,
    OverallReform,
    Selection,
    TimeBc0,
    Policy,
    Direct,
    Indirect,
}

impl Estimand {
    pub const DECOMPOSITION: [Estimand; 6] = [
        Estimand::AttPre,
        Estimand::AttPost,
        Estimand::OverallReform,
        Estimand::Selection,
        Estimand::TimeBc0,
        Estimand::Policy,
    ];

    pub const ALL: [Estimand; 8] = [
        Estimand::AttPre,
        Estimand::AttPost,
        Estimand::OverallReform,
        Estimand::Selection,
        Estimand::TimeBc0,
        Estimand::Policy,
        Estimand::Direct,
        Estimand::Indirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::AttPre => "att_pre",
            Estimand::AttPost => "att_post",
            Estimand::OverallReform => "overall_reform",
            Estimand::Selection => "selection",
            Estimand::TimeBc0 => "time_bc0",
            Estimand::Policy => "policy",
            Estimand::Direct => "direct",
            Estimand::Indirect => "indirect",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimand::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimand '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SeriesMeta {
    /// Labels of the weight vectors whose means enter the series.
    pub components: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub point: Vec<f64>,
    pub ci_low: Option<Vec<f64>>,
    pub ci_high: Option<Vec<f64>>,
    pub p_values: Option<Vec<f64>>,
    pub meta: SeriesMeta,
}

impl EffectSeries {
    pub fn new(estimand: Estimand, estimator: Estimator, point: Vec<f64>, meta: SeriesMeta) -> EffectSeries {
        EffectSeries { estimand, estimator, point, ci_low: None, ci_high: None, p_values: None, meta }
    }

    pub fn horizon(&self) -> usize {
        self.point.len()
    }
}

/// The pooled comparisons fitted in one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    /// (1,0,m) ← (0,0,m)
    Pre,
    /// (1,1,v) ← (0,1,v)
    Post,
    /// (1,1,v) ← (1,0,m)
    TreatedAcross,
    /// (1,1,v) ← (0,0,m)
    ControlAcross,
    /// (1,1,v) ← (1,0,m), balancing mediator moments as well
    Mediated,
}

impl PairRole {
    pub const ALL: [PairRole; 5] =
        [PairRole::Pre, PairRole::Post, PairRole::TreatedAcross, PairRole::ControlAcross, PairRole::Mediated];

    pub fn as_str(self) -> &'static str {
        match self {
            PairRole::Pre => "pre",
            PairRole::Post => "post",
            PairRole::TreatedAcross => "treated_across",
            PairRole::ControlAcross => "control_across",
            PairRole::Mediated => "mediated",
        }
    }

    pub fn target(self) -> GroupKey {
        match self {
            PairRole::Pre => GroupKey::TREATED_PRE,
            _ => GroupKey::TREATED_POST,
        }
    }

    pub fn source(self) -> GroupKey {
        match self {
            PairRole::Pre => GroupKey::CONTROL_PRE,
            PairRole::Post => GroupKey::CONTROL_POST,
            PairRole::TreatedAcross | PairRole::Mediated => GroupKey::TREATED_PRE,
            PairRole::ControlAcross => GroupKey::CONTROL_PRE,
        }
    }

    pub fn uses_mediator(self) -> bool {
        self == PairRole::Mediated
    }

    /// Whether the target's own reweighted mean is part of the estimands.
    fn needs_target_mean(self) -> bool {
        matches!(self, PairRole::Pre | PairRole::Post)
    }
}

#[derive(Debug, Clone)]
pub struct PairRun {
    pub role: PairRole,
    pub model: PairModel,
    pub source_weights: WeightVector,
    pub source_tilt: Option<TiltedFit>,
    pub target_weights: Option<WeightVector>,
    pub target_tilt: Option<TiltedFit>,
}

/// Reweighted outcome means (per month) entering the estimands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMeans {
    /// (1,0,m) reweighted to itself.
    pub pre_target: Vec<f64>,
    /// (0,0,m) reweighted to (1,0,m).
    pub pre_source: Vec<f64>,
    /// (1,1,v) reweighted to itself.
    pub post_target: Vec<f64>,
    /// (0,1,v) reweighted to (1,1,v).
    pub post_source: Vec<f64>,
    /// (1,0,m) reweighted to (1,1,v).
    pub treated_across: Vec<f64>,
    /// (0,0,m) reweighted to (1,1,v).
    pub control_across: Vec<f64>,
    /// (1,0,m) reweighted to (1,1,v) on covariates and mediator moments.
    pub mediated: Option<Vec<f64>>,
}

/// Starting coefficients per pair, e.g. full-sample fits reused by bootstrap
/// replicates.
pub type WarmStarts = BTreeMap<PairRole, Vec<f64>>;

#[derive(Debug, Clone, Default)]
pub struct DecomposeOptions {
    pub estimator: Estimator,
    pub mediation: bool,
    pub warm_starts: Option<WarmStarts>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub estimator: Estimator,
    pub means: ComponentMeans,
    pub pairs: Vec<PairRun>,
}

fn lincomb(terms: &[(f64, &[f64])]) -> Vec<f64> {
    let h = terms[0].1.len();
    (0..h).map(|m| terms.iter().map(|(c, v)| c * v[m]).sum()).collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn decompose(ds: &Dataset, opts: &DecomposeOptions) -> Result<Decomposition> {
    let mut pairs = Vec::with_capacity(5);
    for role in PairRole::ALL {
        if role.uses_mediator() && !opts.mediation {
            continue;
        }
        if role.uses_mediator() {
            crate::mediation::check_mediator_overlap(ds)?;
        }
        let start = opts.warm_starts.as_ref().and_then(|w| w.get(&role)).map(Vec::as_slice);
        let model = PairModel::estimate(ds, role.target(), role.source(), role.uses_mediator(), start)?;
        let (source_weights, source_tilt) = model.weights(ds, role.source(), opts.estimator)?;
        let (target_weights, target_tilt) = if role.needs_target_mean() {
            let (w, t) = model.weights(ds, role.target(), opts.estimator)?;
            (Some(w), t)
        } else {
            (None, None)
        };
        pairs.push(PairRun { role, model, source_weights, source_tilt, target_weights, target_tilt });
    }
    let mean = |role: PairRole, target: bool| -> Result<Vec<f64>> {
        let run = pairs.iter().find(|p| p.role == role).expect("pair fitted above");
        let wv = if target { run.target_weights.as_ref().expect("target weights") } else { &run.source_weights };
        weighted_outcome_mean(ds, wv)
    };
    let means = ComponentMeans {
        pre_target: mean(PairRole::Pre, true)?,
        pre_source: mean(PairRole::Pre, false)?,
        post_target: mean(PairRole::Post, true)?,
        post_source: mean(PairRole::Post, false)?,
        treated_across: mean(PairRole::TreatedAcross, false)?,
        control_across: mean(PairRole::ControlAcross, false)?,
        mediated: if opts.mediation { Some(mean(PairRole::Mediated, false)?) } else { None },
    };
    Ok(Decomposition { estimator: opts.estimator, means, pairs })
}

impl Decomposition {
    pub fn pair(&self, role: PairRole) -> Option<&PairRun> {
        self.pairs.iter().find(|p| p.role == role)
    }

    pub fn warm_starts(&self) -> WarmStarts {
        self.pairs.iter().map(|p| (p.role, p.model.fit.coefficients.clone())).collect()
    }

    pub fn att_pre(&self) -> Vec<f64> {
        diff(&self.means.pre_target, &self.means.pre_source)
    }

    pub fn att_post(&self) -> Vec<f64> {
        diff(&self.means.post_target, &self.means.post_source)
    }

    pub fn overall_reform(&self) -> Vec<f64> {
        diff(&self.att_post(), &self.att_pre())
    }

    pub fn selection(&self) -> Vec<f64> {
        let across = diff(&self.means.treated_across, &self.means.control_across);
        diff(&across, &self.att_pre())
    }

    pub fn time_effect(&self) -> Vec<f64> {
        diff(&self.means.post_source, &self.means.control_across)
    }

    pub fn policy(&self) -> Vec<f64> {
        lincomb(&[
            (1.0, &self.att_post()),
            (-1.0, &self.att_pre()),
            (-1.0, &self.selection()),
            (-1.0, &self.time_effect()),
        ])
    }

    /// Controlled direct effect; `None` unless the run balanced mediators.
    pub fn direct(&self) -> Option<Vec<f64>> {
        let mediated = self.means.mediated.as_ref()?;
        let balanced_selection = diff(mediated, &self.means.control_across);
        Some(lincomb(&[(1.0, &self.att_post()), (-1.0, &balanced_selection), (-1.0, &self.time_effect())]))
    }

    pub fn indirect(&self) -> Option<Vec<f64>> {
        Some(diff(&self.policy(), &self.direct()?))
    }

    pub fn point(&self, estimand: Estimand) -> Result<Vec<f64>> {
        Ok(match estimand {
            Estimand::AttPre => self.att_pre(),
            Estimand::AttPost => self.att_post(),
            Estimand::OverallReform => self.overall_reform(),
            Estimand::Selection => self.selection(),
            Estimand::TimeBc0 => self.time_effect(),
            Estimand::Policy => self.policy(),
            Estimand::Direct => self.direct().ok_or_else(not_mediated)?,
            Estimand::Indirect => self.indirect().ok_or_else(not_mediated)?,
        })
    }

    fn label(&self, role: PairRole, target: bool) -> String {
        let run = self.pair(role).expect("requested pair was fitted");
        let wv = if target { run.target_weights.as_ref().expect("target weights") } else { &run.source_weights };
        let mut label = wv.label();
        if role.uses_mediator() {
            label.push_str("+mediator");
        }
        label
    }

    pub fn components(&self, estimand: Estimand) -> Vec<String> {
        use PairRole::*;
        let pre = || vec![self.label(Pre, true), self.label(Pre, false)];
        let post = || vec![self.label(Post, true), self.label(Post, false)];
        let across = || vec![self.label(TreatedAcross, false), self.label(ControlAcross, false)];
        let time = || vec![self.label(Post, false), self.label(ControlAcross, false)];
        let mut out = match estimand {
            Estimand::AttPre => pre(),
            Estimand::AttPost => post(),
            Estimand::OverallReform => [post(), pre()].concat(),
            Estimand::Selection => [across(), pre()].concat(),
            Estimand::TimeBc0 => time(),
            Estimand::Policy => [post(), pre(), across()].concat(),
            Estimand::Direct | Estimand::Indirect => {
                let mut v = [post(), vec![self.label(Mediated, false), self.label(ControlAcross, false)]].concat();
                if estimand == Estimand::Indirect {
                    v.extend([pre(), across()].concat());
                }
                v
            }
        };
        out.sort();
        out.dedup();
        out
    }

    pub fn series(&self, estimand: Estimand) -> Result<EffectSeries> {
        let mut meta = SeriesMeta { components: self.components(estimand), notes: Vec::new() };
        if estimand == Estimand::TimeBc0 {
            meta.notes.push(
                "treated time trend (time_bc1) is identified only as equal to this series under common trends".into(),
            );
        }
        Ok(EffectSeries::new(estimand, self.estimator, self.point(estimand)?, meta))
    }

    /// The six decomposition series, plus direct and indirect when mediators
    /// were balanced.
    pub fn all_series(&self) -> Result<Vec<EffectSeries>> {
        let mut list: Vec<Estimand> = Estimand::DECOMPOSITION.to_vec();
        if self.means.mediated.is_some() {
            list.extend([Estimand::Direct, Estimand::Indirect]);
        }
        list.into_iter().map(|e| self.series(e)).collect()
    }
}

fn not_mediated() -> Error {
    Error::InvalidInput("direct and indirect effects need a run with mediator balancing".into())
}

fn single(ds: &Dataset, estimator: Estimator, estimand: Estimand) -> Result<EffectSeries> {
    decompose(ds, &DecomposeOptions { estimator, ..Default::default() })?.series(estimand)
}

pub fn att_pre(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::AttPre)
}

pub fn att_post(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::AttPost)
}

pub fn overall_reform(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::OverallReform)
}

pub fn selection_effect(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::Selection)
}

pub fn time_effect(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::TimeBc0)
}

pub fn policy_effect(ds: &Dataset, estimator: Estimator) -> Result<EffectSeries> {
    single(ds, estimator, Estimand::Policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    /// Every cell holds the same covariate rows, so fitted propensities are
    /// constant and both estimators reduce to raw cell means.
    fn replicated_cells() -> Dataset {
        let xs = [-1.0, -0.5, 0.0, 0.3, 0.8, 1.5];
        let mut units = Vec::new();
        for (c, (d, t)) in [(1u8, 0u8), (0, 0), (1, 1), (0, 1)].into_iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                let y = f64::from(d) * 0.3 + f64::from(t) * 0.1 + 0.05 * x + 0.01 * (i as f64) * f64::from(d + 1);
                units.push(Unit {
                    id: format!("c{c}u{i}"),
                    d,
                    t,
                    covariates: vec![x, (i % 2) as f64],
                    mediator: None,
                    outcomes: vec![y, 2.0 * y],
                    inclusion_weight: 1.0,
                });
            }
        }
        Dataset::new(units, vec!["x1".into(), "x2".into()]).unwrap()
    }

    fn raw_mean(ds: &Dataset, g: GroupKey) -> Vec<f64> {
        let rows = ds.group_members(g).unwrap();
        let n = rows.len() as f64;
        (0..ds.horizon()).map(|m| rows.iter().map(|&r| ds.units()[r].outcomes[m]).sum::<f64>() / n).collect()
    }

    #[test]
    fn constant_propensities_give_raw_mean_differences() {
        let ds = replicated_cells();
        let a = raw_mean(&ds, GroupKey::TREATED_POST);
        let b = raw_mean(&ds, GroupKey::CONTROL_POST);
        let c = raw_mean(&ds, GroupKey::TREATED_PRE);
        let d = raw_mean(&ds, GroupKey::CONTROL_PRE);
        for estimator in [Estimator::Ipw, Estimator::Ast] {
            let run = decompose(&ds, &DecomposeOptions { estimator, ..Default::default() }).unwrap();
            for m in 0..2 {
                assert!((run.att_pre()[m] - (c[m] - d[m])).abs() < 1e-10);
                assert!((run.att_post()[m] - (a[m] - b[m])).abs() < 1e-10);
                assert!((run.time_effect()[m] - (b[m] - d[m])).abs() < 1e-10);
                assert!(run.selection()[m].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_holds_by_construction() {
        let ds = replicated_cells();
        let run = decompose(&ds, &DecomposeOptions::default()).unwrap();
        let lhs = run.policy();
        let overall = run.overall_reform();
        let sel = run.selection();
        let time = run.time_effect();
        for m in 0..ds.horizon() {
            assert!((lhs[m] - (overall[m] - sel[m] - time[m])).abs() < 1e-12);
        }
        assert!(run.direct().is_none());
        assert!(matches!(run.point(Estimand::Direct), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn components_name_the_weight_vectors() {
        let ds = replicated_cells();
        let run = decompose(&ds, &DecomposeOptions::default()).unwrap();
        let comps = run.components(Estimand::TimeBc0);
        assert_eq!(comps, vec!["ast:(1,1,v)<-(0,0,m)".to_string(), "ast:(1,1,v)<-(0,1,v)".to_string()]);
    }

    #[test]
    fn estimand_labels_round_trip() {
        for e in Estimand::ALL {
            assert_eq!(e.as_str().parse::<Estimand>().unwrap(), e);
            assert_eq!(serde_json::to_string(&e).unwrap(), format!("\"{}\"", e.as_str()));
        }
    }
}
