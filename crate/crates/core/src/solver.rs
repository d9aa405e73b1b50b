//! Backward piecewise constant policy timestepping.
//!
//! Each step solves one implicit system per control on that control's own
//! p-grid, reading the previous layer through the min-reduced interpolant.
//! Layers keep every per-control field; the reduced surface is evaluated
//! lazily, so the shifted probabilities `p_l - mu a h / sigma` of the next
//! step are read without an intermediate grid.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd::{
    picard_step_boundary, picard_step_interior, BoundaryRow, ControlField, PicardStats,
    PrevSurface, StepContext, XBoundary,
};
use crate::grid::{ControlSet, TimeGrid, XGrid};
use crate::model::{MarketModel, Payoff, SchemeParams};

/// Value of `field` at x-node `k` and probability `p`, linear in `p` between
/// the nodes of the control's grid.
pub fn interpolate_p(field: &ControlField, k: usize, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(field.interpolate(k, p))
}

/// Minimum over the interpolated fields with its achieving index.
///
/// Ties go to the smallest `|raw|`, positive before negative, regardless of
/// the order of `fields`.
pub fn min_reduce(fields: &[ControlField], k: usize, p: f64) -> (f64, usize) {
    assert!(!fields.is_empty(), "min over an empty control set");
    let mut best = (fields[0].interpolate(k, p), 0);
    for (i, f) in fields.iter().enumerate().skip(1) {
        let v = f.interpolate(k, p);
        if v < best.0 || (v == best.0 && f.control().tie_key() < fields[best.1].control().tie_key())
        {
            best = (v, i);
        }
    }
    best
}

/// Dirichlet data `p g(x)`: the terminal condition frozen in time.
#[derive(Debug, Clone)]
pub struct FrozenPayoff(pub Payoff);

impl XBoundary for FrozenPayoff {
    fn value(&self, _t: f64, x: f64, p: f64) -> f64 {
        p.clamp(0.0, 1.0) * self.0.eval(x)
    }
}

/// Super-replication price on the time and space grids.
#[derive(Debug, Clone, Serialize)]
pub struct SuperRepCurve {
    times: Vec<f64>,
    xs: Vec<f64>,
    delta: f64,
    values: Vec<Vec<f64>>,
    stats: Vec<PicardStats>,
}

impl SuperRepCurve {
    pub fn value(&self, j: usize, k: usize) -> f64 {
        self.values[j][k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    /// Central difference in x, one-sided at the ends.
    pub fn gradient(&self, j: usize, k: usize) -> f64 {
        let row = &self.values[j];
        let last = row.len() - 1;
        match k {
            0 => (row[1] - row[0]) / self.delta,
            k if k == last => (row[last] - row[last - 1]) / self.delta,
            k => (row[k + 1] - row[k - 1]) / (2.0 * self.delta),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Picard statistics of step `j -> j + 1`, indexed by `j`.
    pub fn stats(&self) -> &[PicardStats] {
        &self.stats
    }
}

/// Backward recursion of the one-dimensional boundary system from `g`.
pub fn solve_superreplication(
    model: &MarketModel,
    payoff: &Payoff,
    tgrid: &TimeGrid,
    xgrid: &XGrid,
    params: &SchemeParams,
    x_boundary: &dyn XBoundary,
) -> Result<SuperRepCurve> {
    let steps = tgrid.steps();
    let times = tgrid.nodes().to_vec();
    let mut values = vec![Vec::new(); steps + 1];
    values[steps] = xgrid.nodes().map(|x| payoff.eval(x)).collect();
    let mut stats = vec![PicardStats::default(); steps];
    for j in (0..steps).rev() {
        let ctx = StepContext {
            model,
            params,
            xgrid,
            t: times[j],
            h: tgrid.step(j),
        };
        let (row, st) =
            picard_step_boundary(ctx, &values[j + 1], 1.0, x_boundary).map_err(|e| {
                Error::Step {
                    step: j,
                    t: times[j],
                    control: "superrep".into(),
                    source: Box::new(e),
                }
            })?;
        values[j] = row.values;
        stats[j] = st;
    }
    Ok(SuperRepCurve {
        times,
        xs: xgrid.nodes().collect(),
        delta: xgrid.delta(),
        values,
        stats,
    })
}

/// Which time layers a backward solve keeps once the next one is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retention {
    #[default]
    All,
    /// Only the initial and terminal layers.
    Initial,
}

#[derive(Debug, Clone)]
enum Layer {
    Terminal,
    Computed(Vec<ControlField>),
    Dropped,
}

/// Per-step diagnostics of a backward solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub h: f64,
    /// Largest Picard count over the controls and the `p = 0` edge.
    pub max_iterations: usize,
    pub total_iterations: usize,
    pub max_residual: f64,
    pub seconds: f64,
}

/// Output of [`pcpt_backward_solve`].
#[derive(Debug, Clone)]
pub struct ValueSurface {
    times: Vec<f64>,
    xgrid: XGrid,
    payoff: Payoff,
    controls: ControlSet,
    layers: Vec<Layer>,
    superrep: SuperRepCurve,
    diagnostics: Vec<StepDiagnostics>,
}

struct LayerView<'a> {
    layer: &'a Layer,
    payoff: &'a Payoff,
    xs: &'a [f64],
}

impl PrevSurface for LayerView<'_> {
    fn eval(&self, k: usize, p: f64) -> f64 {
        match self.layer {
            Layer::Terminal => self.payoff.eval(self.xs[k]) * p,
            Layer::Computed(fields) => min_reduce(fields, k, p).0,
            Layer::Dropped => unreachable!("previous layer is always retained"),
        }
    }
}

impl ValueSurface {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xgrid(&self) -> &XGrid {
        &self.xgrid
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn superrep(&self) -> &SuperRepCurve {
        &self.superrep
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    /// Largest per-step Picard count of the run.
    pub fn max_picard_iterations(&self) -> usize {
        self.diagnostics
            .iter()
            .map(|d| d.max_iterations)
            .max()
            .unwrap_or(0)
    }

    pub fn is_retained(&self, j: usize) -> bool {
        !matches!(self.layers[j], Layer::Dropped)
    }

    /// Per-control fields of layer `j`, if it was computed and retained.
    pub fn fields(&self, j: usize) -> Option<&[ControlField]> {
        match &self.layers[j] {
            Layer::Computed(f) => Some(f),
            _ => None,
        }
    }

    /// Value at time node `j`, x-node `k` and probability `p`, with the index
    /// of the minimising control in the control set (`None` on the terminal
    /// layer).
    pub fn value_with_argmin(&self, j: usize, k: usize, p: f64) -> Result<(f64, Option<usize>)> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        if k >= self.xgrid.len() {
            return Err(crate::error::invalid(
                "k",
                format!("x-index {k} out of range"),
            ));
        }
        match &self.layers[j] {
            Layer::Terminal => Ok((self.payoff.eval(self.xgrid.x(k)) * p, None)),
            Layer::Computed(fields) => {
                let (v, i) = min_reduce(fields, k, p);
                Ok((v, Some(i)))
            }
            Layer::Dropped => Err(crate::error::invalid(
                "j",
                format!("time layer {j} was not retained"),
            )),
        }
    }

    pub fn value(&self, j: usize, k: usize, p: f64) -> Result<f64> {
        self.value_with_argmin(j, k, p).map(|(v, _)| v)
    }

    /// Value at an arbitrary `x` in the domain, linear between x-nodes.
    pub fn value_at(&self, j: usize, x: f64, p: f64) -> Result<f64> {
        let (k, w) = self.xgrid.locate(x).ok_or_else(|| {
            crate::error::invalid("x", format!("{x} lies outside the computational domain"))
        })?;
        let v0 = self.value(j, k, p)?;
        if w == 0.0 {
            return Ok(v0);
        }
        Ok((1.0 - w) * v0 + w * self.value(j, k + 1, p)?)
    }

    /// How often each control attains the minimum over x-nodes and `p_samples`
    /// at layer `j`, keyed by control label.
    pub fn argmin_histogram(&self, j: usize, p_samples: &[f64]) -> Result<BTreeMap<String, usize>> {
        let mut hist = BTreeMap::new();
        for k in 0..self.xgrid.len() {
            for &p in p_samples {
                if let (_, Some(i)) = self.value_with_argmin(j, k, p)? {
                    *hist.entry(self.controls.controls()[i].label()).or_insert(0) += 1;
                }
            }
        }
        Ok(hist)
    }
}

/// Full backward induction keeping every time layer.
pub fn pcpt_backward_solve(
    model: &MarketModel,
    payoff: &Payoff,
    tgrid: &TimeGrid,
    xgrid: &XGrid,
    controls: &ControlSet,
    params: &SchemeParams,
    x_boundary: &dyn XBoundary,
) -> Result<ValueSurface> {
    pcpt_backward_solve_retaining(
        model,
        payoff,
        tgrid,
        xgrid,
        controls,
        params,
        x_boundary,
        Retention::All,
    )
}

/// Full backward induction with a choice of retained layers.
#[allow(clippy::too_many_arguments)]
pub fn pcpt_backward_solve_retaining(
    model: &MarketModel,
    payoff: &Payoff,
    tgrid: &TimeGrid,
    xgrid: &XGrid,
    controls: &ControlSet,
    params: &SchemeParams,
    x_boundary: &dyn XBoundary,
    retention: Retention,
) -> Result<ValueSurface> {
    if controls.is_empty() {
        return Err(crate::error::invalid("controls", "control set is empty"));
    }
    let superrep = solve_superreplication(model, payoff, tgrid, xgrid, params, x_boundary)?;
    let steps = tgrid.steps();
    let times = tgrid.nodes().to_vec();
    let xs: Vec<f64> = xgrid.nodes().collect();
    let mut layers = vec![Layer::Dropped; steps + 1];
    layers[steps] = Layer::Terminal;
    let mut diagnostics = Vec::with_capacity(steps);

    for j in (0..steps).rev() {
        let started = Instant::now();
        let t = times[j];
        let ctx = StepContext {
            model,
            params,
            xgrid,
            t,
            h: tgrid.step(j),
        };
        let wrap = |control: String| {
            move |e: Error| Error::Step {
                step: j,
                t,
                control,
                source: Box::new(e),
            }
        };
        ctx.check().map_err(wrap("all".into()))?;
        let prev = LayerView {
            layer: &layers[j + 1],
            payoff,
            xs: &xs,
        };
        let prev_zero: Vec<f64> = (0..xs.len()).map(|k| prev.eval(k, 0.0)).collect();
        let (lower, zero_stats) =
            picard_step_boundary(ctx, &prev_zero, 0.0, x_boundary).map_err(wrap("p=0".into()))?;
        let upper = BoundaryRow {
            values: superrep.row(j).to_vec(),
        };
        let solved: Vec<(ControlField, PicardStats)> = controls
            .controls()
            .par_iter()
            .map(|&c| {
                picard_step_interior(ctx, c, &prev, &lower, &upper, x_boundary)
                    .map_err(wrap(c.label()))
            })
            .collect::<Result<_>>()?;
        let iters = solved.iter().map(|(_, s)| s.iterations);
        diagnostics.push(StepDiagnostics {
            step: j,
            t,
            h: ctx.h,
            max_iterations: iters.clone().max().unwrap_or(0).max(zero_stats.iterations),
            total_iterations: iters.sum::<usize>() + zero_stats.iterations,
            max_residual: solved
                .iter()
                .map(|(_, s)| s.residual)
                .fold(zero_stats.residual, f64::max),
            seconds: started.elapsed().as_secs_f64(),
        });
        layers[j] = Layer::Computed(solved.into_iter().map(|(f, _)| f).collect());
        if retention == Retention::Initial && j + 1 < steps {
            layers[j + 1] = Layer::Dropped;
        }
    }
    diagnostics.reverse();
    Ok(ValueSurface {
        times,
        xgrid: xgrid.clone(),
        payoff: payoff.clone(),
        controls: controls.clone(),
        layers,
        superrep,
        diagnostics,
    })
}
