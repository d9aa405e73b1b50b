//! Finite-difference stencils and the Picard solver for one implicit step.
//!
//! For a control `a` with `N` p-intervals the unknowns live on
//! `{x_k} x {l / N}`. All differences are taken along the diagonal direction
//! `(delta, sign(a) / N)`, which is the only direction in which the control-`a`
//! diffusion acts. One implicit step solves
//!
//! ```text
//! v - u(x_k, p_l - mu a h / sigma) + h Fhat(t, x_k, v, q, q_up, A) = 0
//! Fhat = -mu q_up - (sigma^2 / 2 + theta delta^2 / h) A - f(t, x, v, sigma q)
//! ```
//!
//! by Jacobi-type fixed-point sweeps of the map obtained by isolating `v`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{AdjustedControl, XGrid};
use crate::model::{check_cfl, MarketModel, SchemeParams, Upwind};

/// Values of one control's implicit step on `XGrid x {0, 1/N, .., 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    control: AdjustedControl,
    nx: usize,
    values: Vec<f64>,
}

impl ControlField {
    pub fn from_fn(
        control: AdjustedControl,
        nx: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let w = control.p_nodes();
        let mut values = Vec::with_capacity(nx * w);
        for k in 0..nx {
            for l in 0..w {
                values.push(f(k, l));
            }
        }
        Self {
            control,
            nx,
            values,
        }
    }

    pub fn control(&self) -> &AdjustedControl {
        &self.control
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn intervals(&self) -> usize {
        self.control.intervals
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * (self.control.intervals + 1) + l]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.control.intervals + 1;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation in `p` at x-node `k`.
    #[inline]
    pub fn interpolate(&self, k: usize, p: f64) -> f64 {
        let n = self.control.intervals;
        let row = self.row(k);
        let s = p * n as f64;
        let l = (s as usize).min(n - 1);
        let w = s - l as f64;
        if w == 0.0 {
            row[l]
        } else {
            (1.0 - w) * row[l] + w * row[l + 1]
        }
    }
}

/// Values of a p-boundary row (`p = 0` or `p = 1`) over the x-grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryRow {
    pub values: Vec<f64>,
}

impl BoundaryRow {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Center value and finite differences at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilSample {
    pub v: f64,
    pub grad: f64,
    pub grad_up: f64,
    pub lap: f64,
}

/// Diagonal stencil at interior node `(k, l)` of `field`.
pub fn stencil_2d(
    field: &ControlField,
    k: usize,
    l: usize,
    delta: f64,
    upwind: Upwind,
) -> Result<StencilSample> {
    let n = field.intervals();
    if k == 0 || k + 1 >= field.nx() || l == 0 || l >= n {
        return Err(Error::StencilOutOfRange { k, l });
    }
    let s = field.control().sign();
    let lp = (l as isize + s) as usize;
    let lm = (l as isize - s) as usize;
    let v = field.get(k, l);
    let vp = field.get(k + 1, lp);
    let vm = field.get(k - 1, lm);
    Ok(sample(v, vp, vm, delta, upwind))
}

/// One-dimensional stencil at interior node `k` of `row`.
pub fn stencil_1d(row: &[f64], k: usize, delta: f64, upwind: Upwind) -> Result<StencilSample> {
    if k == 0 || k + 1 >= row.len() {
        return Err(Error::StencilOutOfRange { k, l: 0 });
    }
    Ok(sample(row[k], row[k + 1], row[k - 1], delta, upwind))
}

#[inline]
fn sample(v: f64, vp: f64, vm: f64, delta: f64, upwind: Upwind) -> StencilSample {
    StencilSample {
        v,
        grad: (vp - vm) / (2.0 * delta),
        grad_up: match upwind {
            Upwind::Forward => (vp - v) / delta,
            Upwind::Backward => (v - vm) / delta,
        },
        lap: (vp + vm - 2.0 * v) / (delta * delta),
    }
}

/// Continuous Hamiltonian `F = -mu q - sigma^2 / 2 A - f(t, x, y, sigma q)`.
pub fn hamiltonian(model: &MarketModel, t: f64, x: f64, y: f64, q: f64, lap: f64) -> f64 {
    -model.mu * q - 0.5 * model.sigma * model.sigma * lap - model.driver(t, x, y, model.sigma * q)
}

/// Lax-Friedrichs numerical Hamiltonian `Fhat`.
#[allow(clippy::too_many_arguments)]
pub fn lax_friedrichs_hat(
    model: &MarketModel,
    t: f64,
    x: f64,
    y: f64,
    q: f64,
    q_up: f64,
    lap: f64,
    theta: f64,
    delta: f64,
    h: f64,
) -> f64 {
    -model.mu * q_up
        - (0.5 * model.sigma * model.sigma + theta * delta * delta / h) * lap
        - model.driver(t, x, y, model.sigma * q)
}

/// Contraction factor `(4 theta + s) / (1 + s)` of the Picard map, with
/// `s = h |mu| / delta + sigma^2 h / delta^2 + 2 theta`.
pub fn contraction_factor(h: f64, delta: f64, theta: f64, mu: f64, sigma: f64) -> f64 {
    let s = h * mu.abs() / delta + sigma * sigma * h / (delta * delta) + 2.0 * theta;
    (4.0 * theta + s) / (1.0 + s)
}

/// Previous-layer surface, evaluable at x-node `k` and any `p` in `[0, 1]`.
pub trait PrevSurface: Sync {
    fn eval(&self, k: usize, p: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64 + Sync> PrevSurface for F {
    fn eval(&self, k: usize, p: f64) -> f64 {
        self(k, p)
    }
}

/// Dirichlet data at the ends of the truncated x-domain.
pub trait XBoundary: Sync {
    fn value(&self, t: f64, x: f64, p: f64) -> f64;
}

impl<F: Fn(f64, f64, f64) -> f64 + Sync> XBoundary for F {
    fn value(&self, t: f64, x: f64, p: f64) -> f64 {
        self(t, x, p)
    }
}

/// Data shared by all implicit solves of one time step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub model: &'a MarketModel,
    pub params: &'a SchemeParams,
    pub xgrid: &'a XGrid,
    /// Start of the step; the solution is attached to this time.
    pub t: f64,
    pub h: f64,
}

impl StepContext<'_> {
    pub fn check(&self) -> Result<()> {
        if self.params.cfl_unchecked {
            return Ok(());
        }
        let violations = check_cfl(self.h, self.xgrid.delta(), self.params, self.model);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Cfl {
                h: self.h,
                delta: self.xgrid.delta(),
                violations,
            })
        }
    }

    fn coefficients(&self) -> Coefficients {
        let m = self.model;
        let d = self.xgrid.delta();
        let h = self.h;
        let drift = h * m.mu.abs() / d;
        let diff = 0.5 * m.sigma * m.sigma * h / (d * d) + self.params.theta;
        Coefficients {
            drift,
            diff,
            inv_denom: 1.0 / (1.0 + drift + 2.0 * diff),
            grad_scale: m.sigma / (2.0 * d),
            upwind: m.upwind(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Coefficients {
    drift: f64,
    diff: f64,
    inv_denom: f64,
    grad_scale: f64,
    upwind: Upwind,
}

impl Coefficients {
    /// Picard update of one node given its diagonal neighbours.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn update(
        &self,
        model: &MarketModel,
        t: f64,
        x: f64,
        h: f64,
        phi: f64,
        v: f64,
        vp: f64,
        vm: f64,
    ) -> f64 {
        let up = match self.upwind {
            Upwind::Forward => vp,
            Upwind::Backward => vm,
        };
        let z = self.grad_scale * (vp - vm);
        (phi + self.drift * up + self.diff * (vp + vm) + h * model.driver(t, x, v, z))
            * self.inv_denom
    }
}

/// Iteration statistics of one Picard solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct PicardStats {
    pub iterations: usize,
    /// Sup-norm of the last iterate increment.
    pub last_increment: f64,
    /// Sup-norm of the scheme residual at the returned iterate.
    pub residual: f64,
}

/// The interior system of one control for one time step.
///
/// `base` holds the shifted previous values `u(x_k, p_l - mu a h / sigma)` at
/// interior nodes and the pinned Dirichlet values on the four edges.
pub struct InteriorSystem<'a> {
    ctx: StepContext<'a>,
    control: AdjustedControl,
    nx: usize,
    base: Vec<f64>,
    coef: Coefficients,
}

impl<'a> InteriorSystem<'a> {
    pub fn new(
        ctx: StepContext<'a>,
        control: AdjustedControl,
        prev: &dyn PrevSurface,
        lower: &BoundaryRow,
        upper: &BoundaryRow,
        x_boundary: &dyn XBoundary,
    ) -> Self {
        let nx = ctx.xgrid.len();
        let n = control.intervals;
        let shift = ctx.model.mu * control.snapped / ctx.model.sigma * ctx.h;
        let last = nx - 1;
        let base = ControlField::from_fn(control, nx, |k, l| {
            if l == 0 {
                lower.values[k]
            } else if l == n {
                upper.values[k]
            } else if k == 0 || k == last {
                x_boundary.value(ctx.t, ctx.xgrid.x(k), control.p(l))
            } else {
                prev.eval(k, (control.p(l) - shift).clamp(0.0, 1.0))
            }
        })
        .values;
        Self {
            ctx,
            control,
            nx,
            base,
            coef: ctx.coefficients(),
        }
    }

    /// Applies the fixed-point map `psi` to `cur`, writing into `next`.
    /// Returns the sup-norm of `next - cur`.
    pub fn sweep(&self, cur: &[f64], next: &mut [f64]) -> f64 {
        let w = self.control.intervals + 1;
        let n = self.control.intervals;
        let s = self.control.sign();
        let (t, h) = (self.ctx.t, self.ctx.h);
        let model = self.ctx.model;
        let c = self.coef;
        let mut max_diff = 0.0_f64;
        for k in 1..self.nx - 1 {
            let x = self.ctx.xgrid.x(k);
            let row = k * w;
            let plus = ((k + 1) * w) as isize + s;
            let minus = ((k - 1) * w) as isize - s;
            next[row] = self.base[row];
            next[row + n] = self.base[row + n];
            for l in 1..n {
                let vp = cur[(plus + l as isize) as usize];
                let vm = cur[(minus + l as isize) as usize];
                let v = cur[row + l];
                let nv = c.update(model, t, x, h, self.base[row + l], v, vp, vm);
                max_diff = max_diff.max((nv - v).abs());
                next[row + l] = nv;
            }
        }
        let edge = (self.nx - 1) * w;
        next[..w].copy_from_slice(&self.base[..w]);
        next[edge..edge + w].copy_from_slice(&self.base[edge..edge + w]);
        max_diff
    }

    /// `psi(v)` as a fresh vector.
    pub fn psi(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.sweep(v, &mut out);
        out
    }

    /// Sup-norm of the scheme residual `S(k, l, ...)` over interior nodes.
    pub fn residual(&self, v: &[f64]) -> f64 {
        let field = ControlField {
            control: self.control,
            nx: self.nx,
            values: v.to_vec(),
        };
        let d = self.ctx.xgrid.delta();
        let upwind = self.ctx.model.upwind();
        let mut r = 0.0_f64;
        for k in 1..self.nx - 1 {
            for l in 1..self.control.intervals {
                let st = stencil_2d(&field, k, l, d, upwind).expect("interior node");
                let phi = self.base[k * (self.control.intervals + 1) + l];
                let fhat = lax_friedrichs_hat(
                    self.ctx.model,
                    self.ctx.t,
                    self.ctx.xgrid.x(k),
                    st.v,
                    st.grad,
                    st.grad_up,
                    st.lap,
                    self.ctx.params.theta,
                    d,
                    self.ctx.h,
                );
                r = r.max((st.v - phi + self.ctx.h * fhat).abs());
            }
        }
        r
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Iterates `psi` from `initial` (or from the base values) until the
    /// increment drops below the Picard tolerance.
    pub fn solve(&self, initial: Option<&[f64]>) -> Result<(ControlField, PicardStats)> {
        let mut cur = initial.map_or_else(|| self.base.clone(), <[f64]>::to_vec);
        let mut next = self.base.clone();
        let tol = self.ctx.params.picard_tol;
        let max_iters = self.ctx.params.picard_max_iters;
        let mut it = 0;
        loop {
            it += 1;
            let diff = self.sweep(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            if diff <= tol {
                let residual = self.residual(&cur);
                return Ok((
                    ControlField {
                        control: self.control,
                        nx: self.nx,
                        values: cur,
                    },
                    PicardStats {
                        iterations: it,
                        last_increment: diff,
                        residual,
                    },
                ));
            }
            if it >= max_iters || !diff.is_finite() {
                return Err(Error::PicardDivergence {
                    iterations: it,
                    last_increment: diff,
                });
            }
        }
    }
}

/// Solves the interior system of `control` for one implicit step.
pub fn picard_step_interior(
    ctx: StepContext<'_>,
    control: AdjustedControl,
    prev: &dyn PrevSurface,
    lower: &BoundaryRow,
    upper: &BoundaryRow,
    x_boundary: &dyn XBoundary,
) -> Result<(ControlField, PicardStats)> {
    ctx.check()?;
    InteriorSystem::new(ctx, control, prev, lower, upper, x_boundary).solve(None)
}

/// The one-dimensional system solved on the `p = 0` and `p = 1` edges and by
/// the super-replication recursion.
pub struct BoundarySystem<'a> {
    ctx: StepContext<'a>,
    base: Vec<f64>,
    coef: Coefficients,
}

impl<'a> BoundarySystem<'a> {
    /// `prev` are the values `u_k` at the end of the step; the x-endpoints are
    /// pinned to `x_boundary(t, x, p_edge)`.
    pub fn new(
        ctx: StepContext<'a>,
        prev: &[f64],
        p_edge: f64,
        x_boundary: &dyn XBoundary,
    ) -> Self {
        let nx = ctx.xgrid.len();
        assert_eq!(prev.len(), nx, "previous row length must match the x-grid");
        let mut base = prev.to_vec();
        base[0] = x_boundary.value(ctx.t, ctx.xgrid.x(0), p_edge);
        base[nx - 1] = x_boundary.value(ctx.t, ctx.xgrid.x(nx - 1), p_edge);
        Self {
            ctx,
            base,
            coef: ctx.coefficients(),
        }
    }

    pub fn sweep(&self, cur: &[f64], next: &mut [f64]) -> f64 {
        let nx = self.base.len();
        let model = self.ctx.model;
        let (t, h) = (self.ctx.t, self.ctx.h);
        let mut max_diff = 0.0_f64;
        next[0] = self.base[0];
        next[nx - 1] = self.base[nx - 1];
        for k in 1..nx - 1 {
            let x = self.ctx.xgrid.x(k);
            let nv = self
                .coef
                .update(model, t, x, h, self.base[k], cur[k], cur[k + 1], cur[k - 1]);
            max_diff = max_diff.max((nv - cur[k]).abs());
            next[k] = nv;
        }
        max_diff
    }

    pub fn residual(&self, v: &[f64]) -> f64 {
        let d = self.ctx.xgrid.delta();
        let upwind = self.ctx.model.upwind();
        let mut r = 0.0_f64;
        for k in 1..v.len() - 1 {
            let st = stencil_1d(v, k, d, upwind).expect("interior node");
            let fhat = lax_friedrichs_hat(
                self.ctx.model,
                self.ctx.t,
                self.ctx.xgrid.x(k),
                st.v,
                st.grad,
                st.grad_up,
                st.lap,
                self.ctx.params.theta,
                d,
                self.ctx.h,
            );
            r = r.max((st.v - self.base[k] + self.ctx.h * fhat).abs());
        }
        r
    }

    pub fn solve(&self) -> Result<(BoundaryRow, PicardStats)> {
        let mut cur = self.base.clone();
        let mut next = self.base.clone();
        let tol = self.ctx.params.picard_tol;
        let mut it = 0;
        loop {
            it += 1;
            let diff = self.sweep(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            if diff <= tol {
                let residual = self.residual(&cur);
                return Ok((
                    BoundaryRow { values: cur },
                    PicardStats {
                        iterations: it,
                        last_increment: diff,
                        residual,
                    },
                ));
            }
            if it >= self.ctx.params.picard_max_iters || !diff.is_finite() {
                return Err(Error::PicardDivergence {
                    iterations: it,
                    last_increment: diff,
                });
            }
        }
    }
}

/// Solves the one-dimensional system `S_b = 0` for one implicit step.
pub fn picard_step_boundary(
    ctx: StepContext<'_>,
    prev_row: &[f64],
    p_edge: f64,
    x_boundary: &dyn XBoundary,
) -> Result<(BoundaryRow, PicardStats)> {
    ctx.check()?;
    BoundarySystem::new(ctx, prev_row, p_edge, x_boundary).solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::adjust_control;
    use crate::model::DriverSpec;
    use proptest::prelude::*;

    const MU: f64 = 0.01875;
    const SIGMA: f64 = 0.25;

    fn model(driver: DriverSpec) -> MarketModel {
        MarketModel::new(MU, SIGMA, 1.0, driver).unwrap()
    }

    fn field_of(
        control: AdjustedControl,
        grid: &XGrid,
        f: impl Fn(f64, f64) -> f64,
    ) -> ControlField {
        ControlField::from_fn(control, grid.len(), |k, l| f(grid.x(k), control.p(l)))
    }

    #[test]
    fn stencils_on_simple_fields() {
        let grid = XGrid::new(0.0, 1.0, 0.1).unwrap();
        let c = adjust_control(0.5, 0.1, SIGMA).unwrap();
        let affine = field_of(c, &grid, |x, _| x);
        let s = stencil_2d(&affine, 3, 2, 0.1, Upwind::Forward).unwrap();
        assert!((s.grad - 1.0).abs() < 1e-12);
        assert!(s.lap.abs() < 1e-9);

        let in_p = field_of(c, &grid, |_, p| p);
        let s = stencil_2d(&in_p, 3, 2, 0.1, Upwind::Forward).unwrap();
        let expect = c.snapped / SIGMA;
        assert!((s.grad - expect).abs() < 1e-12);
        assert!((s.grad - 1.0 / (c.intervals as f64 * 0.1)).abs() < 1e-12);

        let quad = field_of(c, &grid, |x, _| x * x);
        let s = stencil_2d(&quad, 4, 2, 0.1, Upwind::Backward).unwrap();
        assert!((s.lap - 2.0).abs() < 1e-9);

        assert!(stencil_2d(&quad, 0, 2, 0.1, Upwind::Forward).is_err());
        assert!(stencil_2d(&quad, 3, 0, 0.1, Upwind::Forward).is_err());
        assert!(stencil_2d(&quad, 3, c.intervals, 0.1, Upwind::Forward).is_err());
    }

    #[test]
    fn backward_stencil_uses_lower_neighbour() {
        let grid = XGrid::new(0.0, 1.0, 0.1).unwrap();
        let c = adjust_control(-0.5, 0.1, SIGMA).unwrap();
        let f = field_of(c, &grid, |x, p| x * x + 3.0 * p);
        let (k, l) = (4, 2);
        let s = stencil_2d(&f, k, l, 0.1, Upwind::Backward).unwrap();
        // sign(a) = -1: the lower diagonal neighbour is (k - 1, l + 1).
        assert_eq!(s.grad_up, (f.get(k, l) - f.get(k - 1, l + 1)) / 0.1);
    }

    #[test]
    fn hamiltonian_examples() {
        let lin = model(DriverSpec::Linear);
        assert_eq!(
            lax_friedrichs_hat(&lin, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.2, 0.05, 0.05),
            0.0
        );

        let bs = model(DriverSpec::BorrowSpread { rate: 0.05 });
        let (q, a) = (0.7, -1.3);
        let hat = lax_friedrichs_hat(&bs, 0.0, 0.0, 0.4, q, q, a, 0.2, 0.05, 0.1);
        let plain = hamiltonian(&bs, 0.0, 0.0, 0.4, q, a);
        assert!((hat - plain - (-0.2 * 0.05 * 0.05 / 0.1 * a)).abs() < 1e-14);

        let (q, qu, a) = (0.3, 0.8, 2.0);
        let hat = lax_friedrichs_hat(&lin, 0.0, 0.0, 0.0, q, qu, a, 0.2, 0.05, 0.1);
        let expect = -MU * qu - (SIGMA * SIGMA / 2.0 + 0.2 * 0.05 * 0.05 / 0.1) * a + MU * q;
        assert!((hat - expect).abs() < 1e-14);
    }

    #[test]
    fn contraction_factor_examples() {
        let f = contraction_factor(0.05, 0.05, 0.2, MU, SIGMA);
        assert!((f - 2.46875 / 2.66875).abs() < 1e-12);
        assert!(contraction_factor(1.0, 1e-4, 1e-9, MU, SIGMA) < 1.0);
        assert!(contraction_factor(1.0, 1e-4, 1e-9, MU, SIGMA) > 0.999_999);
    }

    fn ctx<'a>(m: &'a MarketModel, p: &'a SchemeParams, g: &'a XGrid, h: f64) -> StepContext<'a> {
        StepContext {
            model: m,
            params: p,
            xgrid: g,
            t: 0.0,
            h,
        }
    }

    #[test]
    fn zero_data_gives_zero_field_in_one_sweep() {
        let m = model(DriverSpec::BorrowSpread { rate: 0.05 });
        let p = SchemeParams::default();
        let g = XGrid::reference(0.05).unwrap();
        let c = adjust_control(0.5, 0.05, SIGMA).unwrap();
        let zero = BoundaryRow {
            values: vec![0.0; g.len()],
        };
        let prev = |_: usize, _: f64| 0.0;
        let xb = |_: f64, _: f64, _: f64| 0.0;
        let (field, stats) =
            picard_step_interior(ctx(&m, &p, &g, 0.05), c, &prev, &zero, &zero, &xb).unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(field.values().iter().all(|&v| v == 0.0));

        let (row, stats) =
            picard_step_boundary(ctx(&m, &p, &g, 0.05), &zero.values, 0.0, &xb).unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(row.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_are_preserved_by_linear_driver() {
        let m = model(DriverSpec::Linear);
        let p = SchemeParams {
            picard_tol: 1e-12,
            ..Default::default()
        };
        let g = XGrid::reference(0.05).unwrap();
        let c = adjust_control(-1.0, 0.05, SIGMA).unwrap();
        let cst = BoundaryRow {
            values: vec![2.5; g.len()],
        };
        let prev = |_: usize, _: f64| 2.5;
        let xb = |_: f64, _: f64, _: f64| 2.5;
        let (field, _) =
            picard_step_interior(ctx(&m, &p, &g, 0.05), c, &prev, &cst, &cst, &xb).unwrap();
        assert!(field.values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let (row, _) = picard_step_boundary(ctx(&m, &p, &g, 0.05), &cst.values, 1.0, &xb).unwrap();
        assert!(row.values.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn affine_in_x_reproduced_without_drift() {
        let m = MarketModel::new(0.0, SIGMA, 1.0, DriverSpec::Linear).unwrap();
        let p = SchemeParams {
            picard_tol: 1e-13,
            ..Default::default()
        };
        let g = XGrid::new(0.0, 1.0, 0.05).unwrap();
        let c = adjust_control(0.7, 0.05, SIGMA).unwrap();
        let aff = |x: f64| 1.0 + 2.0 * x;
        let row = BoundaryRow {
            values: g.nodes().map(aff).collect(),
        };
        let prev = |k: usize, _: f64| aff(g.x(k));
        let xb = |_: f64, x: f64, _: f64| aff(x);
        let (field, stats) =
            picard_step_interior(ctx(&m, &p, &g, 0.05), c, &prev, &row, &row, &xb).unwrap();
        assert!(stats.residual < 1e-10);
        for k in 0..g.len() {
            for l in 0..c.p_nodes() {
                assert!((field.get(k, l) - aff(g.x(k))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cfl_violation_is_rejected_unless_unchecked() {
        let m = model(DriverSpec::BorrowSpread { rate: 0.05 });
        let g = XGrid::reference(0.005).unwrap();
        let p = SchemeParams::default();
        let c = adjust_control(1.0, 0.005, SIGMA).unwrap();
        let zero = BoundaryRow {
            values: vec![0.0; g.len()],
        };
        let prev = |_: usize, _: f64| 0.0;
        let xb = |_: f64, _: f64, _: f64| 0.0;
        let err =
            picard_step_interior(ctx(&m, &p, &g, 0.1), c, &prev, &zero, &zero, &xb).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
        let p = SchemeParams {
            cfl_unchecked: true,
            ..p
        };
        assert!(picard_step_interior(ctx(&m, &p, &g, 0.1), c, &prev, &zero, &zero, &xb).is_ok());
    }

    #[test]
    fn iteration_budget_exhaustion_is_reported() {
        let m = model(DriverSpec::Linear);
        let p = SchemeParams {
            picard_max_iters: 2,
            picard_tol: 1e-14,
            ..Default::default()
        };
        let g = XGrid::reference(0.05).unwrap();
        let c = adjust_control(0.4, 0.05, SIGMA).unwrap();
        let zero = BoundaryRow {
            values: vec![0.0; g.len()],
        };
        let one = BoundaryRow {
            values: vec![1.0; g.len()],
        };
        let prev = |_: usize, p: f64| p;
        let xb = |_: f64, _: f64, p: f64| p;
        let err =
            picard_step_interior(ctx(&m, &p, &g, 0.05), c, &prev, &zero, &one, &xb).unwrap_err();
        assert!(matches!(err, Error::PicardDivergence { iterations: 2, .. }));
    }

    fn small_problem() -> impl Strategy<Value = (f64, f64, usize, Vec<f64>, Vec<f64>)> {
        (0.2..3.0f64, prop::bool::ANY, 0usize..3).prop_flat_map(|(a, neg, drv)| {
            let a = if neg { -a } else { a };
            let c = adjust_control(a, 0.1, SIGMA).unwrap();
            let size = 8 * c.p_nodes();
            (
                Just(a),
                Just(0.0),
                Just(drv),
                prop::collection::vec(-3.0..3.0f64, size),
                prop::collection::vec(-3.0..3.0f64, size),
            )
        })
    }

    fn driver_of(i: usize) -> DriverSpec {
        match i {
            0 => DriverSpec::Linear,
            1 => DriverSpec::BorrowSpread { rate: 0.05 },
            _ => DriverSpec::TwoRates {
                lend: 0.02,
                borrow: 0.07,
            },
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn psi_contracts((a, _, drv, v1, v2) in small_problem(), phi_seed in -2.0..2.0f64) {
            let m = model(driver_of(drv));
            let p = SchemeParams::default();
            let g = XGrid::new(0.0, 0.7, 0.1).unwrap();
            let h = 0.1;
            prop_assert!(check_cfl(h, 0.1, &p, &m).is_empty());
            let c = adjust_control(a, 0.1, SIGMA).unwrap();
            let lower = BoundaryRow { values: vec![0.0; g.len()] };
            let upper = BoundaryRow { values: vec![1.0; g.len()] };
            let prev = move |k: usize, p: f64| phi_seed * (k as f64 * 0.3).sin() + p;
            let xb = |_: f64, _: f64, p: f64| p;
            let sys = InteriorSystem::new(ctx(&m, &p, &g, h), c, &prev, &lower, &upper, &xb);
            let d_in = v1.iter().zip(&v2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let p1 = sys.psi(&v1);
            let p2 = sys.psi(&v2);
            let d_out = p1.iter().zip(&p2).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let factor = contraction_factor(h, 0.1, p.theta, MU, SIGMA);
            prop_assert!(d_out <= factor * d_in + 1e-14, "{} > {} * {}", d_out, factor, d_in);
        }

        #[test]
        fn interior_step_is_monotone(
            a in 0.2..3.0f64, neg in prop::bool::ANY, drv in 0usize..3,
            base in prop::collection::vec(0.0..5.0f64, 8),
            bump in prop::collection::vec(0.0..1.0f64, 8),
        ) {
            let a = if neg { -a } else { a };
            let m = model(driver_of(drv));
            let p = SchemeParams { picard_tol: 1e-12, ..Default::default() };
            let g = XGrid::new(0.0, 0.7, 0.1).unwrap();
            let c = adjust_control(a, 0.1, SIGMA).unwrap();
            let lower = BoundaryRow { values: vec![0.0; g.len()] };
            let up1 = BoundaryRow { values: base.clone() };
            let up2 = BoundaryRow { values: base.iter().zip(&bump).map(|(b, d)| b + d).collect() };
            let b1 = base.clone();
            let b2 = up2.values.clone();
            let prev1 = move |k: usize, p: f64| p * b1[k];
            let prev2 = move |k: usize, p: f64| p * b2[k];
            let xb = |_: f64, _: f64, _: f64| 0.0;
            let c1 = ctx(&m, &p, &g, 0.1);
            let (f1, _) = picard_step_interior(c1, c, &prev1, &lower, &up1, &xb).unwrap();
            let (f2, _) = picard_step_interior(c1, c, &prev2, &lower, &up2, &xb).unwrap();
            for (x, y) in f1.values().iter().zip(f2.values()) {
                prop_assert!(*x <= *y + 1e-10);
            }
        }

        #[test]
        fn interior_step_is_stable(a in 0.2..3.0f64, drv in 0usize..3, data in prop::collection::vec(0.0..4.0f64, 8)) {
            let m = model(driver_of(drv));
            let p = SchemeParams { picard_tol: 1e-12, ..Default::default() };
            let g = XGrid::new(0.0, 0.7, 0.1).unwrap();
            let c = adjust_control(a, 0.1, SIGMA).unwrap();
            let lower = BoundaryRow { values: vec![0.0; g.len()] };
            let upper = BoundaryRow { values: data.clone() };
            let d = data.clone();
            let prev = move |k: usize, p: f64| p * d[k];
            let xb = |_: f64, _: f64, _: f64| 0.0;
            let (f, _) = picard_step_interior(ctx(&m, &p, &g, 0.1), c, &prev, &lower, &upper, &xb).unwrap();
            prop_assert!(f.values().iter().all(|&v| (-1e-10..=4.0 + 1e-10).contains(&v)));
        }
    }
}
