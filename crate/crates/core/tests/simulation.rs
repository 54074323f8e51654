mod common;

use reform_decomp::data::GroupKey;
use reform_decomp::dgp::{self, DgpConfig, Violation};
use reform_decomp::diagnostics::support_check;
use reform_decomp::effects::{decompose, DecomposeOptions, Estimand};
use reform_decomp::reweight::{Estimator, PairModel};

fn ast(mediation: bool) -> DecomposeOptions {
    DecomposeOptions { estimator: Estimator::Ast, mediation, warm_starts: None }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn month_average(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn null_design_estimates_centre_on_zero() {
    let reps = 200;
    let mut per_estimand = vec![Vec::with_capacity(reps); Estimand::ALL.len()];
    for r in 0..reps {
        let cfg = DgpConfig { n: 5000, seed: 90_000 + r as u64, horizon: 24, ..DgpConfig::null() };
        let ds = dgp::simulate_dataset(&cfg).unwrap();
        let run = decompose(&ds, &ast(true)).unwrap();
        for (i, e) in Estimand::ALL.iter().enumerate() {
            per_estimand[i].push(month_average(&run.point(*e).unwrap()));
        }
    }
    for (i, e) in Estimand::ALL.iter().enumerate() {
        let (mean, se) = mean_and_se(&per_estimand[i]);
        assert!(mean.abs() <= 3.0 * se, "{e}: Monte Carlo mean {mean:e}, SE {se:e}");
    }
}

#[test]
fn broken_trend_bias_matches_its_closed_form() {
    let magnitude = 0.02;
    let reps = 40;
    let mut bias = vec![Vec::with_capacity(reps); Estimand::ALL.len()];
    let mut expected = Vec::new();
    for r in 0..reps {
        let cfg = DgpConfig { n: 5000, seed: 70_000 + r as u64, horizon: 24, ..DgpConfig::default() };
        let (ds, truth, descriptor) =
            dgp::oracle_assumption_violation(&cfg, Violation::BrokenTrend(magnitude)).unwrap();
        let run = decompose(&ds, &ast(true)).unwrap();
        for (i, e) in Estimand::ALL.iter().enumerate() {
            let p = run.point(*e).unwrap();
            let err: Vec<f64> = p.iter().zip(truth.get(*e)).map(|(a, b)| a - b).collect();
            bias[i].push(month_average(&err));
        }
        expected = descriptor.expected_bias;
    }
    assert_eq!(expected.len(), Estimand::ALL.len());
    for (e, b) in expected {
        let i = Estimand::ALL.iter().position(|x| *x == e).unwrap();
        let (mean, se) = mean_and_se(&bias[i]);
        assert!((mean - b).abs() <= 3.0 * se, "{e}: mean bias {mean:.5} vs expected {b} (SE {se:.5})");
    }
    let time = Estimand::ALL.iter().position(|x| *x == Estimand::TimeBc0).unwrap();
    assert!(mean_and_se(&bias[time]).0 > magnitude / 2.0);
}

#[test]
fn support_hole_is_flagged_where_true_propensities_are_extreme() {
    let eps = 0.01;
    let cfg = DgpConfig { n: 8000, seed: 404, horizon: 2, ..DgpConfig::default() };
    let count = |magnitude: f64| -> (usize, usize) {
        let (ds, _, d) = dgp::oracle_assumption_violation(&cfg, Violation::SupportHole(magnitude)).unwrap();
        let pre = PairModel::estimate(&ds, GroupKey::TREATED_PRE, GroupKey::CONTROL_PRE, false, None).unwrap();
        let post = PairModel::estimate(&ds, GroupKey::TREATED_POST, GroupKey::CONTROL_POST, false, None).unwrap();
        let summary = support_check(&ds, &[&pre.fit, &post.fit], eps).unwrap();
        let truth = d.true_propensities.iter().filter(|&&p| !(eps..=1.0 - eps).contains(&p)).count();
        (summary.flagged, truth)
    };
    let (flagged, truth) = count(0.0);
    assert!(truth <= 5 && flagged <= 5, "no hole: flagged {flagged}, constructed {truth}");
    let (flagged, truth) = count(3.0);
    assert!(truth > 500, "construction yields {truth} extreme units");
    let gap = flagged.abs_diff(truth) as f64;
    assert!(gap <= 0.1 * truth as f64, "flagged {flagged}, constructed {truth}");
}
