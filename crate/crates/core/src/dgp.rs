//! Synthetic data with exact ground truth.
//!
//! Covariates alternate between standard normal (even positions) and
//! Bernoulli(0.4) (odd positions). Period T is a fair coin and participation
//! follows a period-specific probit. Participants draw a programme from the
//! period's mediator law, independent of X. Outcomes in month `m` (0-based)
//! are linear in probability units:
//!
//! ```text
//! Y = base(X, m) + T·Δ(m) + D·[τ(X, m) + g(band, m) + T·w(m)] + noise
//! ```
//!
//! with `τ(X, m) = τ_long·(1 − e^{−m/ramp}) + τ_het·x₁`. Because the
//! selection index is linear in normal and binary covariates, the treated-cell
//! mean of x₁ has a closed form, and band probabilities under uniform duration
//! scaling are exact, so the truth needs no numerical integration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DurationCategory, MediatorRecord, ProgrammeType, Unit, DEFAULT_ACTUAL_DURATION_CAP};
use crate::effects::Estimand;
use crate::error::{Error, Result};
use crate::normal;

const BINARY_SHARE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionIndex {
    pub intercept: f64,
    /// One slope per covariate; missing entries count as zero.
    pub slopes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediatorLaw {
    /// Shares in [`ProgrammeType::ALL`] order; normalised on use.
    pub type_shares: [f64; 5],
    pub mean_planned_days: [f64; 5],
}

/// Outcome effect of the programme's duration band: a lock-in dip while the
/// programme runs, then a lasting gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEffect {
    pub lock_in: [f64; 4],
    pub lock_in_months: [usize; 4],
    pub gain: [f64; 4],
}

impl BandEffect {
    pub fn zero() -> BandEffect {
        BandEffect { lock_in: [0.0; 4], lock_in_months: [0; 4], gain: [0.0; 4] }
    }

    pub fn value(&self, band: DurationCategory, month: usize) -> f64 {
        let b = band.index();
        if month < self.lock_in_months[b] {
            -self.lock_in[b]
        } else {
            self.gain[b]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub horizon: usize,
    /// Participation index for T = 0 and T = 1.
    pub selection: [SelectionIndex; 2],
    pub baseline_intercept: f64,
    pub baseline_slopes: Vec<f64>,
    pub baseline_month_slope: f64,
    /// Common trend Δ(m) = `trend` for m ≥ `trend_from_month`.
    pub trend: f64,
    pub trend_from_month: usize,
    pub effect_long_run: f64,
    pub effect_ramp_months: f64,
    pub effect_heterogeneity: f64,
    /// System wedge w(m) = `wedge` for m ≥ `wedge_from_month`.
    pub wedge: f64,
    pub wedge_from_month: usize,
    pub mediators: [MediatorLaw; 2],
    pub band_effect: BandEffect,
    pub noise_sd: f64,
    pub binary_outcome: bool,
    /// Share of non-treated units kept; kept units carry weight 1/rate.
    pub control_sampling_rate: f64,
    /// Number of pre-programme outcome months stored as `hist_<j>` covariates.
    pub history_months: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 5000,
            k: 4,
            seed: 1,
            horizon: 84,
            selection: [
                SelectionIndex { intercept: -0.3, slopes: vec![0.3, -0.2, 0.2, 0.0] },
                SelectionIndex { intercept: -0.4, slopes: vec![0.5, 0.1, 0.2, -0.3] },
            ],
            baseline_intercept: 0.35,
            baseline_slopes: vec![0.05, -0.04, 0.03, 0.02],
            baseline_month_slope: 0.002,
            trend: 0.0,
            trend_from_month: 0,
            effect_long_run: 0.05,
            effect_ramp_months: 12.0,
            effect_heterogeneity: 0.02,
            wedge: 0.03,
            wedge_from_month: 36,
            mediators: [
                MediatorLaw {
                    type_shares: [0.16, 0.21, 0.41, 0.19, 0.02],
                    mean_planned_days: [201.0, 114.0, 352.0, 762.0, 403.0],
                },
                MediatorLaw {
                    type_shares: [0.13, 0.42, 0.19, 0.25, 0.01],
                    mean_planned_days: [156.0, 116.0, 272.0, 799.0, 467.0],
                },
            ],
            band_effect: BandEffect {
                lock_in: [0.10, 0.15, 0.20, 0.25],
                lock_in_months: [4, 9, 18, 30],
                gain: [0.0, 0.01, 0.03, 0.05],
            },
            noise_sd: 0.1,
            binary_outcome: false,
            control_sampling_rate: 1.0,
            history_months: 0,
        }
    }
}

impl DgpConfig {
    /// Same design with every structural effect switched off.
    pub fn null() -> DgpConfig {
        DgpConfig {
            trend: 0.0,
            effect_long_run: 0.0,
            effect_heterogeneity: 0.0,
            wedge: 0.0,
            band_effect: BandEffect::zero(),
            ..DgpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n < 4 {
            return bad("n must be at least 4");
        }
        if self.k == 0 || self.k > 40 {
            return bad("k must lie in 1..=40");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.control_sampling_rate > 0.0 && self.control_sampling_rate <= 1.0) {
            return bad("control_sampling_rate must lie in (0, 1]");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative");
        }
        if !(self.effect_ramp_months > 0.0) {
            return bad("effect_ramp_months must be positive");
        }
        for law in &self.mediators {
            if law.type_shares.iter().any(|s| !(*s >= 0.0)) || law.type_shares.iter().sum::<f64>() <= 0.0 {
                return bad("mediator shares must be non-negative with a positive sum");
            }
            if law.mean_planned_days.iter().any(|d| !(*d >= 2.0 && d.is_finite())) {
                return bad("mean planned durations must be at least 2 days");
            }
        }
        let finite = [
            self.baseline_intercept,
            self.baseline_month_slope,
            self.trend,
            self.effect_long_run,
            self.effect_heterogeneity,
            self.wedge,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("structural parameters must be finite");
        }
        Ok(())
    }

    fn slope(v: &[f64], j: usize) -> f64 {
        v.get(j).copied().unwrap_or(0.0)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.k).map(|j| format!("x{j}")).collect();
        names.extend((1..=self.history_months).map(|j| format!("hist_{j}")));
        names
    }

    fn base(&self, x: &[f64], month: f64) -> f64 {
        self.baseline_intercept
            + x.iter().enumerate().map(|(j, v)| Self::slope(&self.baseline_slopes, j) * v).sum::<f64>()
            + self.baseline_month_slope * month
    }

    fn trend_at(&self, m: usize) -> f64 {
        if m >= self.trend_from_month {
            self.trend
        } else {
            0.0
        }
    }

    fn wedge_at(&self, m: usize) -> f64 {
        if m >= self.wedge_from_month {
            self.wedge
        } else {
            0.0
        }
    }

    fn ramp(&self, m: usize) -> f64 {
        1.0 - (-(m as f64) / self.effect_ramp_months).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub att_pre: Vec<f64>,
    pub att_post: Vec<f64>,
    pub overall_reform: Vec<f64>,
    pub selection: Vec<f64>,
    pub time: Vec<f64>,
    pub policy: Vec<f64>,
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
    /// E[x₁ | D = 1, T = t] for t = 0, 1.
    pub treated_mean_x1: [f64; 2],
    /// Duration-band probabilities of participants, per period.
    pub band_probabilities: [[f64; 4]; 2],
}

impl DgpTruth {
    pub fn get(&self, estimand: Estimand) -> &[f64] {
        match estimand {
            Estimand::AttPre => &self.att_pre,
            Estimand::AttPost => &self.att_post,
            Estimand::OverallReform => &self.overall_reform,
            Estimand::Selection => &self.selection,
            Estimand::TimeBc0 => &self.time,
            Estimand::Policy => &self.policy,
            Estimand::Direct => &self.direct,
            Estimand::Indirect => &self.indirect,
        }
    }
}

/// Injected departures from the identifying assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "magnitude", rename_all = "snake_case")]
pub enum Violation {
    /// Adds the magnitude to post-period non-treated outcomes only.
    BrokenTrend(f64),
    /// Unobserved U ~ N(0,1) with coefficient `magnitude` in both selection
    /// indices and `0.1·magnitude` in outcomes.
    HiddenConfounder(f64),
    /// Adds the magnitude to the x₁ slope of both selection indices, pushing
    /// true propensities towards 0 and 1.
    SupportHole(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationDescriptor {
    pub violation: Violation,
    pub description: String,
    /// Bias each estimand picks up, where it has a closed form.
    pub expected_bias: Vec<(Estimand, f64)>,
    /// True P(D = 1 | X, U, T) per generated unit, in dataset order.
    pub true_propensities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Injection {
    broken_trend: f64,
    confounder: f64,
    support_slope: f64,
}

impl Injection {
    fn from(v: Option<Violation>) -> Injection {
        match v {
            None => Injection::default(),
            Some(Violation::BrokenTrend(m)) => Injection { broken_trend: m, ..Default::default() },
            Some(Violation::HiddenConfounder(m)) => Injection { confounder: m, ..Default::default() },
            Some(Violation::SupportHole(m)) => Injection { support_slope: m, ..Default::default() },
        }
    }

    fn index(&self, cfg: &DgpConfig, t: usize, x: &[f64], u: f64) -> f64 {
        let sel = &cfg.selection[t];
        let mut z = sel.intercept + self.confounder * u;
        for (j, v) in x.iter().enumerate() {
            let mut b = DgpConfig::slope(&sel.slopes, j);
            if j == 0 {
                b += self.support_slope;
            }
            z += b * v;
        }
        z
    }
}

/// Draws a dataset and returns it with the exact truth.
pub fn simulate(cfg: &DgpConfig) -> Result<(Dataset, DgpTruth)> {
    let (ds, _) = generate(cfg, Injection::default())?;
    Ok((ds, truth(cfg)?))
}

/// Draws a dataset only.
pub fn simulate_dataset(cfg: &DgpConfig) -> Result<Dataset> {
    Ok(generate(cfg, Injection::default())?.0)
}

pub fn oracle_assumption_violation(
    cfg: &DgpConfig,
    violation: Violation,
) -> Result<(Dataset, DgpTruth, ViolationDescriptor)> {
    let inj = Injection::from(Some(violation));
    let (ds, true_propensities) = generate(cfg, inj)?;
    let truth = truth_with(cfg, inj)?;
    let (description, expected_bias) = match violation {
        Violation::BrokenTrend(m) => (
            format!("post-period non-treated outcomes shifted by {m}; treated counterfactual trend unchanged"),
            vec![
                (Estimand::AttPre, 0.0),
                (Estimand::AttPost, -m),
                (Estimand::OverallReform, -m),
                (Estimand::Selection, 0.0),
                (Estimand::TimeBc0, m),
                (Estimand::Policy, -2.0 * m),
                (Estimand::Direct, -2.0 * m),
                (Estimand::Indirect, 0.0),
            ],
        ),
        Violation::HiddenConfounder(m) => (
            format!("unobserved N(0,1) factor with coefficient {m} in participation and {} in outcomes", 0.1 * m),
            Vec::new(),
        ),
        Violation::SupportHole(m) => (format!("x1 participation slope increased by {m} in both periods"), Vec::new()),
    };
    Ok((ds, truth, ViolationDescriptor { violation, description, expected_bias, true_propensities }))
}

fn generate(cfg: &DgpConfig, inj: Injection) -> Result<(Dataset, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let shares: Vec<Vec<f64>> = cfg
        .mediators
        .iter()
        .map(|l| {
            let s: f64 = l.type_shares.iter().sum();
            l.type_shares.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut units = Vec::with_capacity(cfg.n);
    let mut propensities = Vec::with_capacity(cfg.n);
    let mut x = vec![0.0; cfg.k];
    for i in 0..cfg.n {
        for (j, v) in x.iter_mut().enumerate() {
            *v = if j % 2 == 0 {
                rng.sample(StandardNormal)
            } else if rng.random_bool(BINARY_SHARE) {
                1.0
            } else {
                0.0
            };
        }
        let u: f64 = rng.sample(StandardNormal);
        let t = usize::from(rng.random_bool(0.5));
        let p = normal::cdf(inj.index(cfg, t, &x, u));
        let d = rng.random::<f64>() < p;

        // Mediator draws happen for everyone so random streams stay aligned.
        let r_type: f64 = rng.random();
        let r_planned: f64 = rng.random();
        let r_actual: f64 = rng.random();
        let keep_draw: f64 = rng.random();
        let ty = {
            let mut acc = 0.0;
            let mut chosen = 4;
            for (c, s) in shares[t].iter().enumerate() {
                acc += s;
                if r_type < acc {
                    chosen = c;
                    break;
                }
            }
            chosen
        };
        let planned = planned_days(cfg.mediators[t].mean_planned_days[ty], r_planned);
        let actual =
            ((f64::from(planned) * (0.85 + 0.15 * r_actual)).round() as u32).clamp(1, DEFAULT_ACTUAL_DURATION_CAP);
        let mediator = d.then(|| MediatorRecord {
            programme_type: ProgrammeType::ALL[ty],
            planned_duration_days: planned,
            actual_duration_days: actual,
        });
        let band = DurationCategory::from_days(planned);

        let tf = t as f64;
        let df = f64::from(u8::from(d));
        let tau_x = cfg.effect_heterogeneity * x[0];
        let confound = 0.1 * inj.confounder * u;
        let shift = if t == 1 && !d { inj.broken_trend } else { 0.0 };
        let mut outcomes = Vec::with_capacity(cfg.horizon);
        for m in 0..cfg.horizon {
            let treated_part =
                cfg.effect_long_run * cfg.ramp(m) + tau_x + cfg.band_effect.value(band, m) + tf * cfg.wedge_at(m);
            let mean = cfg.base(&x, m as f64) + confound + tf * cfg.trend_at(m) + df * treated_part + shift;
            outcomes.push(draw_outcome(cfg, mean, &noise, &mut rng));
        }
        let mut covariates = x.clone();
        let base0 = cfg.base(&x, 0.0) + confound;
        for j in 1..=cfg.history_months {
            covariates.push(base0 - cfg.baseline_month_slope * j as f64 + noise.sample(&mut rng));
        }

        if !d && keep_draw >= cfg.control_sampling_rate {
            continue;
        }
        units.push(Unit {
            id: format!("u{i}"),
            d: u8::from(d),
            t: t as u8,
            covariates,
            mediator,
            outcomes,
            inclusion_weight: if d { 1.0 } else { 1.0 / cfg.control_sampling_rate },
        });
        propensities.push(p);
    }
    Ok((Dataset::new(units, cfg.covariate_names())?, propensities))
}

fn draw_outcome(cfg: &DgpConfig, mean: f64, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.binary_outcome {
        if rng.random::<f64>() < mean.clamp(0.0, 1.0) {
            1.0
        } else {
            0.0
        }
    } else {
        mean + noise.sample(rng)
    }
}

/// Planned duration `round(mean · U(0.8, 1.2))`, at least one day.
fn planned_days(mean: f64, r: f64) -> u32 {
    ((mean * (0.8 + 0.4 * r)).round() as u32).max(1)
}

/// P(round(mean·U) ≥ boundary) for U ~ U(0.8, 1.2).
fn prob_at_least(mean: f64, boundary: u32) -> f64 {
    let cut = (f64::from(boundary) - 0.5) / mean;
    ((1.2 - cut) / 0.4).clamp(0.0, 1.0)
}

fn band_probabilities(law: &MediatorLaw) -> [f64; 4] {
    let total: f64 = law.type_shares.iter().sum();
    let mut out = [0.0; 4];
    for (share, &mean) in law.type_shares.iter().zip(&law.mean_planned_days) {
        let w = share / total;
        let ge: Vec<f64> = [183, 366, 731].iter().map(|&b| prob_at_least(mean, b)).collect();
        out[0] += w * (1.0 - ge[0]);
        out[1] += w * (ge[0] - ge[1]);
        out[2] += w * (ge[1] - ge[2]);
        out[3] += w * ge[2];
    }
    out
}

/// `E[x₁ | D = 1, T = t]` for the probit participation rule.
///
/// Normal covariates (and U) fold into one normal term, so for each pattern
/// of the binary covariates `E[Φ(c + b·Z)] = Φ(c/s)` and
/// `E[x₁ Φ(c + b·Z)] = (b₁/s)·φ(c/s)` with `s² = 1 + Σ b²` over normal terms.
fn treated_mean_x1(cfg: &DgpConfig, inj: Injection, t: usize) -> f64 {
    let sel = &cfg.selection[t];
    let slope = |j: usize| DgpConfig::slope(&sel.slopes, j) + if j == 0 { inj.support_slope } else { 0.0 };
    let mut var = 1.0 + inj.confounder * inj.confounder;
    for j in (0..cfg.k).step_by(2) {
        var += slope(j).powi(2);
    }
    let s = var.sqrt();
    let binaries: Vec<usize> = (1..cfg.k).step_by(2).collect();
    let mut mass = 0.0;
    let mut first = 0.0;
    for pattern in 0u64..(1u64 << binaries.len()) {
        let mut c = sel.intercept;
        let mut prob = 1.0;
        for (bit, &j) in binaries.iter().enumerate() {
            if pattern >> bit & 1 == 1 {
                c += slope(j);
                prob *= BINARY_SHARE;
            } else {
                prob *= 1.0 - BINARY_SHARE;
            }
        }
        mass += prob * normal::cdf(c / s);
        first += prob * slope(0) / s * normal::pdf(c / s);
    }
    first / mass
}

/// Exact per-month truth of every estimand.
pub fn truth(cfg: &DgpConfig) -> Result<DgpTruth> {
    truth_with(cfg, Injection::default())
}

fn truth_with(cfg: &DgpConfig, inj: Injection) -> Result<DgpTruth> {
    cfg.validate()?;
    let ex = [treated_mean_x1(cfg, inj, 0), treated_mean_x1(cfg, inj, 1)];
    let bands = [band_probabilities(&cfg.mediators[0]), band_probabilities(&cfg.mediators[1])];
    let h = cfg.horizon;
    let mut t = DgpTruth {
        att_pre: Vec::with_capacity(h),
        att_post: Vec::with_capacity(h),
        overall_reform: Vec::with_capacity(h),
        selection: Vec::with_capacity(h),
        time: Vec::with_capacity(h),
        policy: Vec::with_capacity(h),
        direct: Vec::with_capacity(h),
        indirect: Vec::with_capacity(h),
        treated_mean_x1: ex,
        band_probabilities: bands,
    };
    for m in 0..h {
        let tau = |p: usize| cfg.effect_long_run * cfg.ramp(m) + cfg.effect_heterogeneity * ex[p];
        let g = |p: usize| {
            DurationCategory::ALL.iter().zip(&bands[p]).map(|(&b, pr)| pr * cfg.band_effect.value(b, m)).sum::<f64>()
        };
        let att_pre = tau(0) + g(0);
        let att_post = tau(1) + g(1) + cfg.wedge_at(m);
        let overall = att_post - att_pre;
        let selection = tau(1) - tau(0);
        let time = cfg.trend_at(m);
        let policy = overall - selection - time;
        let direct = cfg.wedge_at(m) - time;
        t.att_pre.push(att_pre);
        t.att_post.push(att_post);
        t.overall_reform.push(overall);
        t.selection.push(selection);
        t.time.push(time);
        t.policy.push(policy);
        t.direct.push(direct);
        t.indirect.push(policy - direct);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpConfig {
        DgpConfig { n: 800, horizon: 40, ..DgpConfig::default() }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_dataset(&small()).unwrap();
        let b = simulate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate_dataset(&DgpConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn null_design_has_zero_truth() {
        let t = truth(&DgpConfig::null()).unwrap();
        for e in Estimand::ALL {
            assert!(t.get(e).iter().all(|v| *v == 0.0), "{e}");
        }
    }

    #[test]
    fn direct_only_channel() {
        let cfg = DgpConfig { band_effect: BandEffect::zero(), ..DgpConfig::default() };
        let t = truth(&cfg).unwrap();
        for m in 0..cfg.horizon {
            let w = if m >= 36 { 0.03 } else { 0.0 };
            assert!((t.policy[m] - t.direct[m]).abs() < 1e-15);
            assert!((t.direct[m] - w).abs() < 1e-15);
            assert!(t.indirect[m].abs() < 1e-15);
        }
    }

    #[test]
    fn identities_hold_in_truth() {
        let cfg = DgpConfig { trend: 0.02, trend_from_month: 10, ..DgpConfig::default() };
        let t = truth(&cfg).unwrap();
        for m in 0..cfg.horizon {
            assert!((t.policy[m] - (t.overall_reform[m] - t.selection[m] - t.time[m])).abs() < 1e-12);
            assert!((t.direct[m] + t.indirect[m] - t.policy[m]).abs() < 1e-12);
        }
    }

    /// Independent check of the closed forms by brute-force integration.
    #[test]
    fn closed_forms_match_simulation() {
        let cfg = DgpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 400_000;
        let mut num = [0.0; 2];
        let mut den = [0.0; 2];
        for _ in 0..draws {
            let x: Vec<f64> = (0..cfg.k)
                .map(|j| {
                    if j % 2 == 0 {
                        rng.sample(StandardNormal)
                    } else {
                        f64::from(u8::from(rng.random_bool(BINARY_SHARE)))
                    }
                })
                .collect();
            for t in 0..2 {
                let p = normal::cdf(Injection::default().index(&cfg, t, &x, 0.0));
                num[t] += p * x[0];
                den[t] += p;
            }
        }
        for t in 0..2 {
            let exact = treated_mean_x1(&cfg, Injection::default(), t);
            assert!((num[t] / den[t] - exact).abs() < 0.01, "t={t}: {} vs {exact}", num[t] / den[t]);
        }

        let mut counts = [0.0; 4];
        let law = &cfg.mediators[1];
        let shares: f64 = law.type_shares.iter().sum();
        for _ in 0..draws {
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut ty = 4;
            for (c, s) in law.type_shares.iter().enumerate() {
                acc += s / shares;
                if r < acc {
                    ty = c;
                    break;
                }
            }
            let days = planned_days(law.mean_planned_days[ty], rng.random());
            counts[DurationCategory::from_days(days).index()] += 1.0;
        }
        let exact = band_probabilities(law);
        for b in 0..4 {
            assert!((counts[b] / draws as f64 - exact[b]).abs() < 0.004, "band {b}");
        }
    }

    #[test]
    fn control_subsampling_sets_weights() {
        let cfg = DgpConfig { control_sampling_rate: 0.25, ..small() };
        let ds = simulate_dataset(&cfg).unwrap();
        for u in ds.units() {
            let expect = if u.d == 1 { 1.0 } else { 4.0 };
            assert_eq!(u.inclusion_weight, expect);
            assert_eq!(u.mediator.is_some(), u.d == 1);
        }
        assert!(ds.len() < cfg.n);
    }

    #[test]
    fn zero_magnitude_violation_is_the_plain_design() {
        let plain = simulate(&small()).unwrap();
        for v in [Violation::BrokenTrend(0.0), Violation::HiddenConfounder(0.0), Violation::SupportHole(0.0)] {
            let (ds, truth, _) = oracle_assumption_violation(&small(), v).unwrap();
            assert_eq!(ds, plain.0);
            assert_eq!(truth, plain.1);
        }
    }

    #[test]
    fn history_columns_and_invalid_configs() {
        let ds = simulate_dataset(&DgpConfig { history_months: 3, ..small() }).unwrap();
        assert_eq!(ds.covariate_names(), &["x1", "x2", "x3", "x4", "hist_1", "hist_2", "hist_3"]);
        assert!(matches!(simulate(&DgpConfig { control_sampling_rate: 0.0, ..small() }), Err(Error::Config(_))));
        assert!(matches!(simulate(&DgpConfig { k: 0, ..small() }), Err(Error::Config(_))));
    }

    #[test]
    fn default_mediator_calibration() {
        let cfg = DgpConfig::default();
        assert_eq!(cfg.mediators[0].type_shares, [0.16, 0.21, 0.41, 0.19, 0.02]);
        assert_eq!(cfg.mediators[1].type_shares, [0.13, 0.42, 0.19, 0.25, 0.01]);
        let t = truth(&cfg).unwrap();
        // Short courses gain share after the reform.
        assert!(t.band_probabilities[1][0] > t.band_probabilities[0][0]);
    }
}
