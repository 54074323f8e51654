use std::fs::File;
use std::path::Path;

use reform_decomp::data::{load_dataset, write_dataset, Dataset};
use reform_decomp::dgp::{self, DgpConfig, Violation};
use reform_decomp::diagnostics::{balance_report, pre_trend_series, PreTrend};
use reform_decomp::effects::{
    decompose as run_decompose, DecomposeOptions, Decomposition, EffectSeries, PairRole, PairRun,
};
use reform_decomp::inference::{
    bootstrap_decomposition, BootstrapConfig, BootstrapOutput, BootstrapSummary, Resampling,
};
use reform_decomp::mediation::{mediation_from, mediator_composition_table};
use reform_decomp::reweight::{Estimator, TiltedFit, WeightVector};
use reform_decomp::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::output::{ensure_dir, write_json, write_rows, write_series_csv, SCHEMA_VERSION};
use crate::{BalanceArgs, Common, EstimateArgs, InputArgs, SimulateArgs, ViolationArg};

fn init_threads(common: &Common) {
    if common.threads > 0 {
        // A second build only fails if the pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    }
}

fn prepare_out(common: &Common) -> Result<&Path> {
    ensure_dir(&common.out)?;
    Ok(&common.out)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    init_threads(&a.common);
    let mut cfg = match &a.config {
        Some(path) => {
            serde_json::from_reader(File::open(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => DgpConfig::default(),
    };
    if a.null {
        let null = DgpConfig::null();
        cfg.trend = null.trend;
        cfg.effect_long_run = null.effect_long_run;
        cfg.effect_heterogeneity = null.effect_heterogeneity;
        cfg.wedge = null.wedge;
        cfg.band_effect = null.band_effect;
    }
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.control_rate {
        cfg.control_sampling_rate = r;
    }
    if let Some(h) = a.history {
        cfg.history_months = h;
    }
    if let Some(t) = a.trend {
        cfg.trend = t;
    }
    if a.binary_outcome {
        cfg.binary_outcome = true;
    }
    cfg.validate()?;

    let violation = a.violation.map(|v| match v {
        ViolationArg::BrokenTrend => Violation::BrokenTrend(a.magnitude),
        ViolationArg::HiddenConfounder => Violation::HiddenConfounder(a.magnitude),
        ViolationArg::SupportHole => Violation::SupportHole(a.magnitude),
    });
    let out = prepare_out(&a.common)?;
    let (ds, truth, descriptor) = match violation {
        Some(v) => {
            let (ds, truth, d) = dgp::oracle_assumption_violation(&cfg, v)?;
            (ds, truth, Some(d))
        }
        None => {
            let (ds, truth) = dgp::simulate(&cfg)?;
            (ds, truth, None)
        }
    };
    write_dataset(&ds, out.join("data.csv"), a.format.into())?;

    let violation_json = match &descriptor {
        Some(d) => {
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                true_propensity: f64,
            }
            let rows: Vec<Row> = ds
                .units()
                .iter()
                .zip(&d.true_propensities)
                .map(|(u, &p)| Row { id: &u.id, true_propensity: p })
                .collect();
            write_rows(&out.join("propensities.csv"), &rows)?;
            let bias: serde_json::Map<String, serde_json::Value> =
                d.expected_bias.iter().map(|(e, b)| (e.as_str().to_string(), json!(b))).collect();
            json!({ "violation": d.violation, "description": d.description, "expected_bias": bias })
        }
        None => serde_json::Value::Null,
    };
    write_json(
        &out.join("truth.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "truth",
            "n_units": ds.len(),
            "config": cfg,
            "truth": truth,
            "violation": violation_json,
        }),
    )?;
    Ok(())
}

fn load(input: &InputArgs) -> Result<Dataset> {
    let mut ds = load_dataset(&input.input, input.format.into()).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", input.input.display()))),
        other => other,
    })?;
    if !input.covariates.is_empty() {
        ds = ds.select_covariates(&input.covariates)?;
    }
    if !input.exclude.is_empty() {
        for name in &input.exclude {
            if !ds.covariate_names().contains(name) {
                return Err(Error::Config(format!("unknown covariate '{name}' in --exclude")));
            }
        }
        let keep: Vec<String> = ds.covariate_names().iter().filter(|n| !input.exclude.contains(n)).cloned().collect();
        if keep.is_empty() {
            return Err(Error::Config("--exclude removes every covariate".into()));
        }
        ds = ds.select_covariates(&keep)?;
    }
    Ok(ds)
}

fn bootstrap_config(a: &EstimateArgs) -> BootstrapConfig {
    BootstrapConfig {
        replications: a.reps,
        seed: a.common.seed.unwrap_or(0),
        confidence_level: a.level,
        resampling: if a.stratified { Resampling::StratifiedByCell } else { Resampling::Individual },
        ..Default::default()
    }
}

struct Estimated {
    run: Decomposition,
    series: Vec<EffectSeries>,
    boot: Option<BootstrapOutput>,
}

fn estimate(ds: &Dataset, a: &EstimateArgs, mediation: bool) -> Result<Estimated> {
    let opts = DecomposeOptions { estimator: a.input.estimator.into(), mediation, warm_starts: None };
    if a.reps == 0 {
        if !(a.level > 0.0 && a.level < 1.0) {
            return Err(Error::Config(format!("confidence level must lie in (0, 1), got {}", a.level)));
        }
        let run = run_decompose(ds, &opts)?;
        let series = run.all_series()?;
        return Ok(Estimated { run, series, boot: None });
    }
    let cfg = bootstrap_config(a);
    cfg.validate()?;
    let (run, boot) = bootstrap_decomposition(ds, &opts, &cfg)?;
    Ok(Estimated { run, series: boot.series.clone(), boot: Some(boot) })
}

#[derive(Serialize)]
struct TiltSummary<'a> {
    target: String,
    source: String,
    tilted_coefficients: &'a [f64],
    balance_residuals: &'a [f64],
    max_residual: f64,
    converged: bool,
    iterations: usize,
    used_fallback: bool,
}

impl<'a> TiltSummary<'a> {
    fn of(t: &'a TiltedFit) -> TiltSummary<'a> {
        TiltSummary {
            target: t.target_group.to_string(),
            source: t.source_group.to_string(),
            tilted_coefficients: &t.tilted_coefficients,
            balance_residuals: &t.balance_residuals,
            max_residual: t.max_residual(),
            converged: t.converged,
            iterations: t.iterations,
            used_fallback: t.used_fallback,
        }
    }
}

fn fit_json(p: &PairRun) -> serde_json::Value {
    let f = &p.model.fit;
    json!({
        "role": p.role,
        "target": f.target_group.to_string(),
        "source": f.source_group.to_string(),
        "n_pool": f.rows.len(),
        "column_names": f.column_names,
        "coefficients": f.coefficients,
        "log_likelihood": f.log_likelihood,
        "converged": f.converged,
        "iterations": f.iterations,
        "target_share": f.target_share,
        "efficient_moments": p.model.moments.values,
        "source_tilt": p.source_tilt.as_ref().map(TiltSummary::of),
        "target_tilt": p.target_tilt.as_ref().map(TiltSummary::of),
    })
}

fn write_dumps(ds: &Dataset, a: &EstimateArgs, est: &Estimated, out: &Path) -> Result<()> {
    if a.dump_weights {
        let dir = out.join("weights");
        ensure_dir(&dir)?;
        let mut vectors: Vec<(PairRole, &WeightVector)> = Vec::new();
        for p in &est.run.pairs {
            vectors.push((p.role, &p.source_weights));
            if let Some(w) = &p.target_weights {
                vectors.push((p.role, w));
            }
        }
        for (role, wv) in vectors {
            let name = format!(
                "{}_{}_{}{}{}_from_{}{}{}",
                role.as_str(),
                wv.estimator,
                wv.target_group.d,
                wv.target_group.t,
                wv.target_group.s.code(),
                wv.source_group.d,
                wv.source_group.t,
                wv.source_group.s.code()
            );
            let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
            w.write_record(["id", "weight"])?;
            for (u, &x) in ds.units().iter().zip(&wv.weights) {
                if u.group() == wv.source_group {
                    w.write_record([u.id.as_str(), &x.to_string()])?;
                }
            }
            w.flush()?;
        }
    }
    if a.dump_fits {
        let fits: Vec<_> = est.run.pairs.iter().map(fit_json).collect();
        write_json(
            &out.join("fits.json"),
            &json!({ "schema_version": SCHEMA_VERSION, "kind": "fits", "estimator": est.run.estimator, "pairs": fits }),
        )?;
    }
    if a.dump_draws {
        if let Some(boot) = &est.boot {
            let mut w = csv::Writer::from_path(out.join("draws.csv"))?;
            w.write_record(["estimand", "replicate", "month", "value"])?;
            for (s, draws) in boot.series.iter().zip(&boot.draws) {
                for (r, rep) in draws.iter().enumerate() {
                    for (m, v) in rep.iter().enumerate() {
                        w.write_record([s.estimand.as_str(), &r.to_string(), &m.to_string(), &v.to_string()])?;
                    }
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn summary(est: &Estimated) -> Option<&BootstrapSummary> {
    est.boot.as_ref().map(|b| &b.summary)
}

pub fn decompose(a: &EstimateArgs) -> Result<()> {
    init_threads(&a.common);
    let ds = load(&a.input)?;
    let est = estimate(&ds, a, a.input.mediator)?;
    let out = prepare_out(&a.common)?;
    write_json(
        &out.join("effects.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "effects",
            "estimator": est.run.estimator,
            "horizon": ds.horizon(),
            "n_units": ds.len(),
            "covariates": ds.covariate_names(),
            "components": est.run.means,
            "bootstrap": summary(&est),
            "series": est.series,
            "aliases": { "time_bc1": "time_bc0" },
        }),
    )?;
    write_series_csv(&out.join("effects.csv"), &est.series)?;
    write_dumps(&ds, a, &est, out)
}

pub fn mediate(a: &EstimateArgs) -> Result<()> {
    init_threads(&a.common);
    let ds = load(&a.input)?;
    let est = estimate(&ds, a, true)?;
    let mut result = mediation_from(&est.run)?;
    for s in &est.series {
        match s.estimand {
            e if e == result.direct.estimand => result.direct = s.clone(),
            e if e == result.indirect.estimand => result.indirect = s.clone(),
            e if e == result.policy.estimand => result.policy = s.clone(),
            _ => {}
        }
    }
    let composition = mediator_composition_table(&ds)?;
    let out = prepare_out(&a.common)?;
    write_json(
        &out.join("mediation.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "mediation",
            "estimator": est.run.estimator,
            "horizon": ds.horizon(),
            "n_units": ds.len(),
            "bootstrap": summary(&est),
            "direct": result.direct,
            "indirect": result.indirect,
            "policy": result.policy,
            "mediator_balance": result.mediator_balance,
            "composition": composition,
        }),
    )?;
    write_series_csv(
        &out.join("mediation.csv"),
        &[result.policy.clone(), result.direct.clone(), result.indirect.clone()],
    )?;
    write_rows(&out.join("composition.csv"), &composition)?;
    write_dumps(&ds, a, &est, out)
}

#[derive(Serialize)]
struct PreTrendRow<'a> {
    group: &'a str,
    months_before: usize,
    mean: f64,
}

fn pre_trend_rows(p: &PreTrend) -> Vec<PreTrendRow<'_>> {
    p.series
        .iter()
        .flat_map(|s| {
            p.months_before.iter().zip(&s.values).map(|(&m, &v)| PreTrendRow {
                group: &s.group,
                months_before: m,
                mean: v,
            })
        })
        .collect()
}

pub fn balance(a: &BalanceArgs) -> Result<()> {
    init_threads(&a.common);
    let ds = load(&a.input)?;
    let estimator: Estimator = a.input.estimator.into();
    let run = run_decompose(&ds, &DecomposeOptions { estimator, mediation: a.input.mediator, warm_starts: None })?;
    let report = balance_report(&ds, &run, a.epsilon)?;
    let has_history = ds.covariate_names().iter().any(|n| n.starts_with("hist_"));
    let pre_trend = if has_history { Some(pre_trend_series(&ds)?) } else { None };
    let out = prepare_out(&a.common)?;
    write_json(
        &out.join("balance.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "kind": "balance",
            "estimator": estimator,
            "n_units": ds.len(),
            "max_first_moment_sd_after": report.max_first_moment_sd_after(),
            "report": report,
            "pre_trend": pre_trend,
        }),
    )?;
    write_rows(&out.join("balance.csv"), &report.rows)?;
    if let Some(p) = &pre_trend {
        write_rows(&out.join("pretrend.csv"), &pre_trend_rows(p))?;
    }
    Ok(())
}
