#![allow(dead_code)]

use reform_decomp::data::{Dataset, GroupKey, MediatorRecord, ProgrammeType, Unit};

/// Derivative-free minimiser used as an independent oracle. Restarts from the
/// best vertex until a full pass no longer improves the objective.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let mut best = x0.to_vec();
    let mut best_f = f(&best);
    let mut scale = step;
    for _ in 0..50 {
        let (x, fx) = nm_pass(&f, &best, scale, tol, max_iter);
        let improved = best_f - fx > tol * (1.0 + best_f.abs());
        if fx < best_f {
            best = x;
            best_f = fx;
        }
        if !improved {
            break;
        }
        scale = (scale * 0.5).max(1e-4);
    }
    best
}

fn nm_pass(f: &impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let p = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..p {
        let mut v = x0.to_vec();
        v[j] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut idx: Vec<usize> = (0..=p).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let spread = (vals[p] - vals[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= tol * (1.0 + vals[0].abs()) && size <= tol {
            break;
        }
        let centroid: Vec<f64> = (0..p).map(|j| simplex[..p].iter().map(|v| v[j]).sum::<f64>() / p as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..p).map(|j| centroid[j] + t * (simplex[p][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[p] = xe;
                vals[p] = fe;
            } else {
                simplex[p] = xr;
                vals[p] = fr;
            }
        } else if fr < vals[p - 1] {
            simplex[p] = xr;
            vals[p] = fr;
        } else {
            let (xc, fc) = if fr < vals[p] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < vals[p].min(fr) {
                simplex[p] = xc;
                vals[p] = fc;
            } else {
                for i in 1..=p {
                    simplex[i] = (0..p).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let i = (0..=p).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[i].clone(), vals[i])
}

/// Small population on a grid of discrete covariate profiles with known,
/// deliberately unequal cell counts and inclusion weights.
pub fn discrete_population(horizon: usize) -> Dataset {
    let profiles: Vec<(f64, f64)> = (0..2).flat_map(|a| (0..3).map(move |b| (f64::from(a), f64::from(b)))).collect();
    let mut units = Vec::new();
    for (gi, g) in GroupKey::OBSERVABLE.iter().enumerate() {
        for (pi, &(x1, x2)) in profiles.iter().enumerate() {
            let count = 3 + (gi * 7 + pi * 5) % 11;
            for c in 0..count {
                let i = units.len();
                let outcomes = (0..horizon)
                    .map(|m| 0.3 + 0.1 * x1 - 0.05 * x2 + 0.02 * gi as f64 + 0.1 * ((i * 13 + m * 7) as f64).sin())
                    .collect();
                let mediator = (g.d == 1).then(|| MediatorRecord {
                    programme_type: ProgrammeType::ShortTraining,
                    planned_duration_days: 60 + 30 * (c as u32 % 4),
                    actual_duration_days: 60 + 30 * (c as u32 % 4),
                });
                units.push(Unit {
                    id: format!("p{i}"),
                    d: g.d,
                    t: g.t,
                    covariates: vec![x1, x2],
                    mediator,
                    outcomes,
                    inclusion_weight: 1.0 + (i % 3) as f64 * 0.5,
                });
            }
        }
    }
    Dataset::new(units, vec!["x1".into(), "x2".into()]).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
