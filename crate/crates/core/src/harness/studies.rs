//! Experiment pipelines behind the CLI subcommands.

use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::error::Error;
use crate::fd::XBoundary;
use crate::grid::{ControlSet, TimeGrid, XGrid};
use crate::model::{check_assumptions, check_cfl, DriverSpec, MarketModel, Payoff};
use crate::reference::{
    driftless_put_price, linear_quantile_price, mc_oracle, optimal_alpha, LinearQuantileProblem,
    ReferenceBoundary,
};
use crate::solver::{
    pcpt_backward_solve_retaining, solve_superreplication, FrozenPayoff, Retention, ValueSurface,
};

use super::config::{BoundarySpec, ConfigError, ConfigMap, ControlSpec, RunConfig, StepRule};
use super::report::{
    fit_loglog_rate, picard_table, GridSummary, QueryValue, RunMetadata, StudyRow, Timing,
};

/// Failure of a pipeline, mapped to the CLI exit status.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numerical(Error),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Numerical(e) => write!(f, "numerical fault: {e}"),
            RunError::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { .. } | Error::ZeroControl => {
                RunError::Config(ConfigError(e.to_string()))
            }
            other => RunError::Numerical(other),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

pub type RunResult<T> = Result<T, RunError>;

/// One acceptance check evaluated by a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Result of a study: table rows, checks, warnings and a JSON summary.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StudyOutcome {
    pub rows: Vec<StudyRow>,
    /// Secondary table written next to `study.csv`, with its file name.
    pub extra: Option<(String, Vec<StudyRow>)>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub summary: serde_json::Value,
}

/// Knobs shared by every pipeline that are not part of the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Record wall-clock times; off for byte-reproducible outputs.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { timing: true }
    }
}

fn boundary_for(cfg: &RunConfig) -> Box<dyn XBoundary> {
    match (cfg.boundary, &cfg.payoff) {
        (BoundarySpec::Reference, Payoff::Put { strike }) => {
            Box::new(ReferenceBoundary::new(&cfg.model, *strike))
        }
        _ => Box::new(FrozenPayoff(cfg.payoff.clone())),
    }
}

fn strike_of(cfg: &RunConfig) -> RunResult<f64> {
    match cfg.payoff {
        Payoff::Put { strike } => Ok(strike),
        _ => Err(ConfigError("this pipeline needs a put payoff".into()).into()),
    }
}

/// A completed backward solve with its grids.
pub struct SolveRun {
    pub surface: ValueSurface,
    pub tgrid: TimeGrid,
    pub xgrid: XGrid,
    pub controls: ControlSet,
    pub seconds: f64,
}

pub fn run_solve(cfg: &RunConfig, retention: Retention) -> RunResult<SolveRun> {
    let tgrid = cfg.tgrid()?;
    let xgrid = cfg.xgrid()?;
    let controls = cfg.control_set()?;
    let boundary = boundary_for(cfg);
    let started = Instant::now();
    let surface = pcpt_backward_solve_retaining(
        &cfg.model,
        &cfg.payoff,
        &tgrid,
        &xgrid,
        &controls,
        &cfg.params,
        boundary.as_ref(),
        retention,
    )?;
    Ok(SolveRun {
        surface,
        tgrid,
        xgrid,
        controls,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn time_index(times: &[f64], t: f64) -> RunResult<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-9)
        .ok_or_else(|| ConfigError(format!("query time {t} is not a node of the time grid")).into())
}

/// Metadata for `meta.json` of a solve run.
pub fn solve_metadata(cfg: &RunConfig, run: &SolveRun, opts: RunOptions) -> RunResult<RunMetadata> {
    let s = &run.surface;
    let queries = cfg
        .queries
        .iter()
        .map(|q| {
            let j = time_index(s.times(), q.t)?;
            Ok(QueryValue {
                t: q.t,
                x: q.x,
                p: q.p,
                value: s.value_at(j, q.x, q.p)?,
            })
        })
        .collect::<RunResult<Vec<_>>>()?;
    Ok(RunMetadata {
        config: cfg.raw.clone(),
        grid: GridSummary::new(&run.tgrid, &run.xgrid, &run.controls),
        controls: run.controls.controls().iter().map(Into::into).collect(),
        assumptions: check_assumptions(&cfg.model, &cfg.payoff),
        cfl_violations: check_cfl(
            run.tgrid.max_step(),
            run.xgrid.delta(),
            &cfg.params,
            &cfg.model,
        ),
        picard_max: s.max_picard_iterations(),
        picard: picard_table(s.diagnostics()),
        argmin_histogram: s.argmin_histogram(0, &cfg.p_samples)?,
        queries,
        timing: opts.timing.then(|| Timing {
            total_seconds: run.seconds,
            step_seconds: s.diagnostics().iter().map(|d| d.seconds).collect(),
        }),
    })
}

fn with(map: &ConfigMap, overrides: &[(&str, String)]) -> RunResult<RunConfig> {
    let mut m = map.clone();
    for (k, v) in overrides {
        m.set(&format!("{k} = {v}"))?;
    }
    Ok(RunConfig::from_map(&m)?)
}

/// Values at `t = 0` on the `(spot, p)` sample used to compare runs.
fn slice(run: &SolveRun, xs: &[f64], ps: &[f64]) -> RunResult<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len() * ps.len());
    for &x in xs {
        for &p in ps {
            out.push(run.surface.value_at(0, x, p)?);
        }
    }
    Ok(out)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn seconds(run: &SolveRun, opts: RunOptions) -> f64 {
    if opts.timing {
        run.seconds
    } else {
        0.0
    }
}

/// Delta ladder with `h = C delta`, compared with the finest run.
pub fn converge_nonlinear(map: &ConfigMap, opts: RunOptions) -> RunResult<StudyOutcome> {
    let base = RunConfig::from_map(map)?;
    let mut deltas = map.reals("study.deltas")?;
    if deltas.len() < 2 {
        return Err(ConfigError("study.deltas needs at least two entries".into()).into());
    }
    deltas.sort_by(|a, b| b.total_cmp(a));
    let xs: Vec<f64> = map.reals("study.spots")?.into_iter().map(f64::ln).collect();
    let mut runs = Vec::new();
    for &d in &deltas {
        let cfg = with(
            map,
            &[("disc.delta", d.to_string()), ("disc.h", "auto".into())],
        )?;
        let run = run_solve(&cfg, Retention::Initial)?;
        let vals = slice(&run, &xs, &base.p_samples)?;
        runs.push((d, run, vals));
    }
    let finest = &runs.last().unwrap().2;
    let rows: Vec<StudyRow> = runs
        .iter()
        .map(|(d, run, vals)| StudyRow {
            scale: *d,
            error: sup_diff(vals, finest),
            iterations_max: run.surface.max_picard_iterations(),
            seconds: seconds(run, opts),
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows[..rows.len() - 1]
        .iter()
        .map(|r| (r.scale, r.error))
        .collect();
    let fit = fit_loglog_rate(&pts).ok();
    let mut warnings = Vec::new();
    if fit.is_none() {
        warnings.push("rate fit skipped: fewer than two positive differences".into());
    }
    Ok(StudyOutcome {
        summary: json!({
            "study": "converge-nonlinear",
            "driver": base.model.driver.name(),
            "reference_delta": deltas.last(),
            "order_in_delta": fit.as_ref().map(|f| f.slope),
            "fit_residual": fit.as_ref().map(|f| f.residual),
            "grids": runs.iter().map(|(_, r, _)| GridSummary::new(&r.tgrid, &r.xgrid, &r.controls)).collect::<Vec<_>>(),
        }),
        rows,
        warnings,
        ..Default::default()
    })
}

/// Fixed large `h` across the delta ladder, and an h-ladder at fixed delta.
pub fn cfl_study(map: &ConfigMap, opts: RunOptions) -> RunResult<StudyOutcome> {
    let base = RunConfig::from_map(map)?;
    let fixed_h = map.real("study.fixed_h")?;
    let mut deltas = map.reals("study.deltas")?;
    deltas.sort_by(|a, b| b.total_cmp(a));
    let xs: Vec<f64> = map.reals("study.spots")?.into_iter().map(f64::ln).collect();
    let ps = &base.p_samples;

    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &d in &deltas {
        let good = with(
            map,
            &[("disc.delta", d.to_string()), ("disc.h", "auto".into())],
        )?;
        let bad = with(
            map,
            &[
                ("disc.delta", d.to_string()),
                ("disc.h", fixed_h.to_string()),
                ("scheme.cfl_unchecked", "true".into()),
            ],
        )?;
        let good_run = run_solve(&good, Retention::Initial)?;
        let bad_run = run_solve(&bad, Retention::Initial)?;
        let violations = check_cfl(bad_run.tgrid.max_step(), d, &base.params, &base.model);
        let (gi, bi) = (
            good_run.surface.max_picard_iterations(),
            bad_run.surface.max_picard_iterations(),
        );
        rows.push(StudyRow {
            scale: d,
            error: sup_diff(&slice(&bad_run, &xs, ps)?, &slice(&good_run, &xs, ps)?),
            iterations_max: bi,
            seconds: seconds(&bad_run, opts),
        });
        pairs.push(json!({
            "delta": d,
            "compliant_h": good_run.tgrid.max_step(),
            "compliant_iterations_max": gi,
            "violating_iterations_max": bi,
            "ratio": bi as f64 / gi as f64,
            "violations": violations.iter().map(|v| v.label()).collect::<Vec<_>>(),
        }));
    }

    let fixed_delta = map.real("study.fixed_delta")?;
    let mut h_ladder = map.reals("study.h_ladder")?;
    h_ladder.sort_by(|a, b| b.total_cmp(a));
    let anchor = run_solve(
        &with(
            map,
            &[
                ("disc.delta", fixed_delta.to_string()),
                ("disc.h", "auto".into()),
            ],
        )?,
        Retention::Initial,
    )?;
    let anchor_vals = slice(&anchor, &xs, ps)?;
    let mut h_rows = Vec::new();
    for &h in &h_ladder {
        let cfg = with(
            map,
            &[
                ("disc.delta", fixed_delta.to_string()),
                ("disc.h", h.to_string()),
                ("scheme.cfl_unchecked", "true".into()),
            ],
        )?;
        let run = run_solve(&cfg, Retention::Initial)?;
        h_rows.push(StudyRow {
            scale: h,
            error: sup_diff(&slice(&run, &xs, ps)?, &anchor_vals),
            iterations_max: run.surface.max_picard_iterations(),
            seconds: seconds(&run, opts),
        });
    }

    let last = pairs.last().cloned().unwrap_or_default();
    let gi = last["compliant_iterations_max"].as_u64().unwrap_or(0) as usize;
    let ratio = last["ratio"].as_f64().unwrap_or(0.0);
    let cap = map.integer("study.picard_max")?;
    let blowup = map.real("study.blowup_min")?;
    let d = deltas.last().copied().unwrap_or(f64::NAN);
    let checks = vec![
        Check::new(
            "picard_compliant",
            gi <= cap,
            format!("delta = {d}: compliant max Picard iterations {gi} (limit {cap})"),
        ),
        Check::new(
            "picard_blowup",
            ratio >= blowup,
            format!(
                "delta = {d}, h = {fixed_h}: violating/compliant = {ratio:.2} (need >= {blowup})"
            ),
        ),
    ];
    Ok(StudyOutcome {
        rows,
        extra: Some(("study_h.csv".into(), h_rows)),
        checks,
        warnings: Vec::new(),
        summary: json!({
            "study": "cfl-study",
            "fixed_h": fixed_h,
            "fixed_delta": fixed_delta,
            "pairs": pairs,
        }),
    })
}

/// Linear-case controls for each `n`, compared with the closed form.
pub fn converge_linear(
    map: &ConfigMap,
    opts: RunOptions,
    seed: Option<u64>,
) -> RunResult<StudyOutcome> {
    let ns = map.integers("study.n")?;
    let spot = map.real("study.spot")?;
    let p = map.real("study.p")?;
    let x = spot.ln();
    let mut outcome = StudyOutcome::default();

    let base = with(map, &[("model.driver", "linear".into())])?;
    let strike = strike_of(&base)?;
    let prob = LinearQuantileProblem::new(&base.model, strike, 0.0, x, p)?;
    let reference = linear_quantile_price(&prob);
    let (oracle_check, oracle) = oracle_check(map, &prob, seed)?;
    outcome.checks.push(oracle_check);

    let tol = base.params.picard_tol;
    let mut per_n = Vec::new();
    for &n in &ns {
        let cfg = with(
            map,
            &[
                ("model.driver", "linear".into()),
                ("controls.kind", "linear_case".into()),
                ("controls.n", n.to_string()),
                ("disc.h", "auto".into()),
            ],
        )?;
        let run = run_solve(&cfg, Retention::Initial)?;
        let v = run.surface.value_at(0, x, p)?;
        outcome.rows.push(StudyRow {
            scale: n as f64,
            error: (v - reference).abs(),
            iterations_max: run.surface.max_picard_iterations(),
            seconds: seconds(&run, opts),
        });
        for &q in &cfg.p_samples {
            let r =
                linear_quantile_price(&LinearQuantileProblem::new(&cfg.model, strike, 0.0, x, q)?);
            let signed = run.surface.value_at(0, x, q)? - r;
            if signed < -5.0 * tol {
                outcome.warnings.push(format!(
                    "n = {n}, p = {q}: scheme below reference by {:.3e}",
                    -signed
                ));
            }
        }
        per_n.push(json!({
            "n": n,
            "value": v,
            "signed_error": v - reference,
            "grid": GridSummary::new(&run.tgrid, &run.xgrid, &run.controls),
        }));
    }

    let errors: Vec<f64> = outcome.rows.iter().map(|r| r.error).collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
    outcome.checks.push(Check::new(
        "linear_errors_decreasing",
        decreasing,
        format!("errors {errors:?} for n = {ns:?}"),
    ));
    let (lo, hi) = (map.real("study.rate_min")?, map.real("study.rate_max")?);
    let pts: Vec<(f64, f64)> = outcome.rows.iter().map(|r| (r.scale, r.error)).collect();
    let fit = fit_loglog_rate(&pts);
    let rate_check = match &fit {
        Ok(f) => Check::new(
            "linear_rate",
            (lo..=hi).contains(&f.rate()),
            format!(
                "rate {:.3} (RMS residual {:.3e}), window [{lo}, {hi}]",
                f.rate(),
                f.residual
            ),
        ),
        Err(e) => Check::new("linear_rate", false, e.to_string()),
    };
    outcome.checks.push(rate_check);
    outcome.summary = json!({
        "study": "converge-linear",
        "query": {"t": 0.0, "x": x, "p": p},
        "reference": reference,
        "oracle": oracle,
        "rate": fit.as_ref().ok().map(|f| f.rate()),
        "fit_residual": fit.as_ref().ok().map(|f| f.residual),
        "runs": per_n,
    });
    Ok(outcome)
}

fn oracle_check(
    map: &ConfigMap,
    prob: &LinearQuantileProblem,
    seed: Option<u64>,
) -> RunResult<(Check, crate::reference::OracleResult)> {
    let paths = map.integer("reference.paths")?;
    let seed = match seed {
        Some(s) => s,
        None => map.integer("reference.seed")? as u64,
    };
    let closed = linear_quantile_price(prob);
    let r = mc_oracle(prob, paths, seed)?;
    let dev = (r.estimate - closed).abs();
    let check = Check::new(
        "reference_oracle",
        dev <= 3.0 * r.std_error + 1e-12,
        format!(
            "p = {}: closed form {closed:.6}, Monte-Carlo {:.6} +- {:.2e} ({} paths, seed {})",
            prob.p, r.estimate, r.std_error, r.n_paths, r.seed
        ),
    );
    Ok((check, r))
}

/// The super-replication curve; with the linear driver it is checked against
/// the driftless put price.
pub fn superrep(map: &ConfigMap) -> RunResult<(crate::solver::SuperRepCurve, StudyOutcome)> {
    let cfg = RunConfig::from_map(map)?;
    let tgrid = cfg.tgrid()?;
    let xgrid = cfg.xgrid()?;
    let boundary = boundary_for(&cfg);
    let curve = solve_superreplication(
        &cfg.model,
        &cfg.payoff,
        &tgrid,
        &xgrid,
        &cfg.params,
        boundary.as_ref(),
    )?;
    let spot = map.real("study.spot")?;
    let x = spot.ln();
    let (k, w) = xgrid
        .locate(x)
        .ok_or_else(|| ConfigError(format!("study.spot = {spot} lies outside the domain")))?;
    let v = (1.0 - w) * curve.value(0, k) + w * curve.value(0, (k + 1).min(xgrid.len() - 1));
    let mut outcome = StudyOutcome::default();
    let mut summary = json!({
        "study": "superrep",
        "delta": xgrid.delta(),
        "h_max": tgrid.max_step(),
        "steps": tgrid.steps(),
        "spot": spot,
        "value": v,
        "picard_max": curve.stats().iter().map(|s| s.iterations).max(),
    });
    if cfg.model.driver == DriverSpec::Linear {
        if let Payoff::Put { strike } = cfg.payoff {
            let exact = driftless_put_price(x, cfg.model.horizon, cfg.model.sigma, strike);
            let tol = map.real("study.superrep_tol")?;
            summary["closed_form"] = json!(exact);
            outcome.checks.push(Check::new(
                "superrep_closed_form",
                (v - exact).abs() <= tol,
                format!(
                    "theta = {}: V(0, ln {spot}) = {v:.6}, closed form {exact:.6}, |diff| = {:.4} (tol {tol})",
                    cfg.params.theta,
                    (v - exact).abs()
                ),
            ));
        }
    }
    outcome.summary = summary;
    Ok((curve, outcome))
}

/// Closed-form values, optimal controls and Monte-Carlo validation at the
/// configured query points, using the linear driver.
pub fn reference(map: &ConfigMap, seed: Option<u64>) -> RunResult<StudyOutcome> {
    let cfg = with(map, &[("model.driver", "linear".into())])?;
    let strike = strike_of(&cfg)?;
    let model: MarketModel = cfg.model;
    let mut outcome = StudyOutcome::default();
    let mut entries = Vec::new();
    for q in &cfg.queries {
        let prob = LinearQuantileProblem::new(&model, strike, q.t, q.x, q.p)?;
        let (check, oracle) = oracle_check(map, &prob, seed)?;
        entries.push(json!({
            "t": q.t,
            "x": q.x,
            "p": q.p,
            "price": linear_quantile_price(&prob),
            "zero_threshold": prob.zero_threshold(),
            "optimal_alpha": optimal_alpha(q.t, q.p, model.horizon),
            "oracle": oracle,
            "oracle_ok": check.passed,
        }));
        outcome.checks.push(check);
    }
    outcome.summary = json!({"study": "reference", "strike": strike, "points": entries});
    Ok(outcome)
}

/// Name of the control specification.
pub fn describe_controls(cfg: &RunConfig) -> &'static str {
    match cfg.controls {
        ControlSpec::Paper22 => "paper22",
        ControlSpec::Explicit(_) => "explicit",
        ControlSpec::LinearCase { .. } => "linear_case",
    }
}

/// Step rule as text for logs.
pub fn describe_step(cfg: &RunConfig) -> String {
    match cfg.step {
        StepRule::Auto => format!("h = {} delta", cfg.params.auto_step_ratio(&cfg.model)),
        StepRule::Fixed(h) => format!("h = {h}"),
    }
}
