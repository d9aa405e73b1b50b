//! Rate fits and output files.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{AdjustedControl, ControlSet, TimeGrid, XGrid};
use crate::model::{AssumptionReport, CflViolation};
use crate::solver::{StepDiagnostics, SuperRepCurve, ValueSurface};

use super::config::ConfigMap;

/// Least-squares line through `(ln scale, ln error)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    /// RMS of the fit residuals in log space.
    pub residual: f64,
}

impl LogLogFit {
    /// Convergence rate, `-slope`.
    pub fn rate(&self) -> f64 {
        -self.slope
    }
}

pub fn fit_loglog_rate(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(&(s, e)) = points.iter().find(|&&(s, e)| !(s > 0.0 && e > 0.0)) {
        return Err(Error::DegenerateFit(format!(
            "scales and errors must be positive, got ({s}, {e})"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-24 {
        return Err(Error::DegenerateFit("all scales coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - icpt - slope * x).powi(2))
        .sum();
    Ok(LogLogFit {
        slope,
        residual: (ss / n).sqrt(),
    })
}

/// One row of `study.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub scale: f64,
    pub error: f64,
    pub iterations_max: usize,
    pub seconds: f64,
}

pub fn write_study_csv(mut w: impl Write, rows: &[StudyRow]) -> io::Result<()> {
    writeln!(w, "scale,error,iterations_max,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.scale, r.error, r.iterations_max, r.seconds
        )?;
    }
    Ok(())
}

/// Rows `t,x,p,value,argmin_control` over the given time layers, every
/// x-node and every `p` sample.
pub fn write_surface_csv(
    mut w: impl Write,
    surface: &ValueSurface,
    layers: &[usize],
    p_samples: &[f64],
) -> Result<()> {
    let io = |e: io::Error| crate::error::invalid("output", e.to_string());
    writeln!(w, "t,x,p,value,argmin_control").map_err(io)?;
    let grid = surface.xgrid();
    for &j in layers {
        let t = surface.times()[j];
        for k in 0..grid.len() {
            for &p in p_samples {
                let (v, arg) = surface.value_with_argmin(j, k, p)?;
                let label = arg.map_or_else(
                    || "terminal".to_string(),
                    |i| surface.controls().controls()[i].label(),
                );
                writeln!(w, "{},{},{},{},{}", t, grid.x(k), p, v, label).map_err(io)?;
            }
        }
    }
    Ok(())
}

/// Rows `t,x,value,gradient` for every time node and x-node.
pub fn write_superrep_csv(mut w: impl Write, curve: &SuperRepCurve) -> io::Result<()> {
    writeln!(w, "t,x,value,gradient")?;
    for (j, &t) in curve.times().iter().enumerate() {
        for (k, &x) in curve.xs().iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                t,
                x,
                curve.value(j, k),
                curve.gradient(j, k)
            )?;
        }
    }
    Ok(())
}

pub fn write_metadata_json(mut w: impl Write, meta: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, meta)?;
    writeln!(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlRow {
    pub raw: f64,
    pub snapped: f64,
    pub intervals: usize,
    pub p_nodes: usize,
}

impl From<&AdjustedControl> for ControlRow {
    fn from(c: &AdjustedControl) -> Self {
        Self {
            raw: c.raw,
            snapped: c.snapped,
            intervals: c.intervals,
            p_nodes: c.p_nodes(),
        }
    }
}

/// Grid sizes in the layout of a discretisation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub delta: f64,
    pub h_max: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub n_c: usize,
    /// Total p-nodes over all controls.
    pub n_p: usize,
    pub a_max: Option<ControlRow>,
    pub a_min: Option<ControlRow>,
}

impl GridSummary {
    pub fn new(tgrid: &TimeGrid, xgrid: &XGrid, controls: &ControlSet) -> Self {
        Self {
            delta: xgrid.delta(),
            h_max: tgrid.max_step(),
            n_t: tgrid.steps(),
            n_x: xgrid.len(),
            n_c: controls.len(),
            n_p: controls.total_p_nodes(),
            a_max: controls.max_abs().map(ControlRow::from),
            a_min: controls.min_abs().map(ControlRow::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepPicard {
    pub step: usize,
    pub t: f64,
    pub max_iterations: usize,
    pub total_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryValue {
    pub t: f64,
    pub x: f64,
    pub p: f64,
    pub value: f64,
}

/// Contents of `meta.json` for a solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub config: ConfigMap,
    pub grid: GridSummary,
    pub controls: Vec<ControlRow>,
    pub assumptions: AssumptionReport,
    pub cfl_violations: Vec<CflViolation>,
    pub picard_max: usize,
    pub picard: Vec<StepPicard>,
    pub argmin_histogram: BTreeMap<String, usize>,
    pub queries: Vec<QueryValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

pub fn picard_table(diags: &[StepDiagnostics]) -> Vec<StepPicard> {
    diags
        .iter()
        .map(|d| StepPicard {
            step: d.step,
            t: d.t,
            max_iterations: d.max_iterations,
            total_iterations: d.total_iterations,
        })
        .collect()
}
