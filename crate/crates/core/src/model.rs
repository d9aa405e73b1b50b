//! Market model, drivers, payoffs and scheme parameters.
//!
//! The log-price follows `X_s = x + mu (s - t) + sigma (W_s - W_t)` and the
//! wealth process carries the drift `-f(t, x, y, z)`. The drivers implemented
//! here are the linear complete-market driver, a borrowing-spread driver and
//! the two-rate (lending `r`, borrowing `R`) driver.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[inline]
fn neg_part(v: f64) -> f64 {
    (-v).max(0.0)
}

/// Non-linearity of the wealth dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverSpec {
    /// `f(z) = -z mu / sigma`.
    Linear,
    /// `f(y, z) = -z mu / sigma + R (y - z / sigma)^-`.
    BorrowSpread { rate: f64 },
    /// `f(y, z) = -r y - z mu / sigma + (R - r) (y - z / sigma)^-`.
    TwoRates { lend: f64, borrow: f64 },
}

impl DriverSpec {
    pub fn borrow_spread(rate: f64) -> Result<Self> {
        let d = DriverSpec::BorrowSpread { rate };
        d.validate()?;
        Ok(d)
    }

    pub fn two_rates(lend: f64, borrow: f64) -> Result<Self> {
        let d = DriverSpec::TwoRates { lend, borrow };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DriverSpec::Linear => Ok(()),
            DriverSpec::BorrowSpread { rate } => {
                if !(rate >= 0.0 && rate.is_finite()) {
                    return Err(invalid(
                        "R",
                        format!("borrowing spread must be >= 0, got {rate}"),
                    ));
                }
                Ok(())
            }
            DriverSpec::TwoRates { lend, borrow } => {
                if !(lend >= 0.0 && lend.is_finite() && borrow.is_finite()) {
                    return Err(invalid(
                        "r",
                        format!("lending rate must be >= 0, got {lend}"),
                    ));
                }
                if borrow < lend {
                    return Err(invalid(
                        "R",
                        format!("borrowing rate {borrow} below lending rate {lend}"),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, DriverSpec::Linear)
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriverSpec::Linear => "linear",
            DriverSpec::BorrowSpread { .. } => "borrow_spread",
            DriverSpec::TwoRates { .. } => "two_rates",
        }
    }
}

/// Constant-coefficient Black-Scholes market in log-price coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub mu: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub driver: DriverSpec,
}

impl MarketModel {
    pub fn new(mu: f64, sigma: f64, horizon: f64, driver: DriverSpec) -> Result<Self> {
        if !mu.is_finite() {
            return Err(invalid("mu", "must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be > 0, got {sigma}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("T", format!("must be > 0, got {horizon}")));
        }
        driver.validate()?;
        Ok(Self {
            mu,
            sigma,
            horizon,
            driver,
        })
    }

    /// Market parameters used throughout the numerical experiments:
    /// `mu = 0.01875`, `sigma = 0.25`, `T = 1`.
    pub fn reference(driver: DriverSpec) -> Self {
        Self {
            mu: 0.01875,
            sigma: 0.25,
            horizon: 1.0,
            driver,
        }
    }

    /// Evaluates the driver `f(t, x, y, z)`.
    #[inline]
    pub fn driver(&self, _t: f64, _x: f64, y: f64, z: f64) -> f64 {
        let premium = -z * self.mu / self.sigma;
        match self.driver {
            DriverSpec::Linear => premium,
            DriverSpec::BorrowSpread { rate } => premium + rate * neg_part(y - z / self.sigma),
            DriverSpec::TwoRates { lend, borrow } => {
                -lend * y + premium + (borrow - lend) * neg_part(y - z / self.sigma)
            }
        }
    }

    /// Working Lipschitz constant used in the CFL conditions.
    ///
    /// This is the Lipschitz constant of `q -> f(t, x, y, sigma q)`, which is
    /// the form in which the driver enters the scheme.
    pub fn driver_lipschitz(&self) -> f64 {
        let m = self.mu.abs();
        match self.driver {
            DriverSpec::Linear => m,
            DriverSpec::BorrowSpread { rate } => m + rate,
            DriverSpec::TwoRates { lend, borrow } => lend + m + (borrow - lend),
        }
    }

    /// Exact bounds `(|df/dy|, |df/dz|)` of the driver's partial derivatives.
    pub fn driver_partial_bounds(&self) -> (f64, f64) {
        let m = self.mu.abs();
        let s = self.sigma;
        match self.driver {
            DriverSpec::Linear => (0.0, m / s),
            DriverSpec::BorrowSpread { rate } => (rate.abs(), (m + rate.abs()) / s),
            DriverSpec::TwoRates { lend, borrow } => (
                lend.abs().max(borrow.abs()),
                (m + (borrow - lend).abs()) / s,
            ),
        }
    }

    pub fn upwind(&self) -> Upwind {
        if self.mu >= 0.0 {
            Upwind::Forward
        } else {
            Upwind::Backward
        }
    }
}

/// Direction of the one-sided drift stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upwind {
    Forward,
    Backward,
}

/// Payoff given by tabulated samples, interpolated linearly and extended by
/// constants outside the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomPayoff {
    xs: Vec<f64>,
    gs: Vec<f64>,
    lipschitz: f64,
}

impl CustomPayoff {
    pub fn new(samples: Vec<(f64, f64)>, lipschitz: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid("payoff.table", "need at least two samples"));
        }
        if !(lipschitz >= 0.0) {
            return Err(invalid("payoff.lipschitz", "must be >= 0"));
        }
        let (xs, gs): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
        if xs.iter().chain(gs.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("payoff.table", "non-finite sample"));
        }
        for (i, w) in xs.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(invalid(
                    "payoff.table",
                    "x samples must be strictly increasing",
                ));
            }
            let slope = (gs[i + 1] - gs[i]).abs() / (w[1] - w[0]);
            if slope > lipschitz * (1.0 + 1e-12) + 1e-15 {
                return Err(invalid(
                    "payoff.lipschitz",
                    format!(
                        "slope {slope} between samples {i} and {} exceeds {lipschitz}",
                        i + 1
                    ),
                ));
            }
        }
        Ok(Self { xs, gs, lipschitz })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.gs[0];
        }
        if x >= self.xs[n - 1] {
            return self.gs[n - 1];
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let w = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        (1.0 - w) * self.gs[i] + w * self.gs[i + 1]
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.gs.iter().copied())
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    /// `g(x) = max(K - e^x, 0)`.
    Put {
        strike: f64,
    },
    Custom(CustomPayoff),
}

impl Payoff {
    pub fn put(strike: f64) -> Result<Self> {
        if !(strike >= 0.0 && strike.is_finite()) {
            return Err(invalid("K", format!("strike must be >= 0, got {strike}")));
        }
        Ok(Payoff::Put { strike })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Payoff::Put { strike } => (strike - x.exp()).max(0.0),
            Payoff::Custom(c) => c.eval(x),
        }
    }

    /// `sup |g|`.
    pub fn bound(&self) -> f64 {
        match self {
            Payoff::Put { strike } => *strike,
            Payoff::Custom(c) => c.gs.iter().fold(0.0_f64, |m, g| m.max(g.abs())),
        }
    }

    /// Lipschitz constant in the log-price variable, when one is known.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            // |d/dx (K - e^x)| = e^x <= K on the region where the put pays.
            Payoff::Put { strike } => Some(*strike),
            Payoff::Custom(c) => Some(c.lipschitz),
        }
    }
}

/// Parameters of the monotone scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Lax-Friedrichs weight `theta`, in `(0, 1/4)`.
    pub theta: f64,
    /// Upper ratio constant `M` in `delta <= M h`.
    pub m_ratio: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Override for the Lipschitz constant used by the CFL checks.
    pub lipschitz_override: Option<f64>,
    /// Skip CFL validation before each implicit step.
    pub cfl_unchecked: bool,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            theta: 0.2,
            m_ratio: 2.0,
            picard_tol: 1e-5,
            picard_max_iters: 20_000,
            lipschitz_override: None,
            cfl_unchecked: false,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 0.25) {
            return Err(invalid(
                "theta",
                format!("must lie in (0, 1/4), got {}", self.theta),
            ));
        }
        if !(self.m_ratio > 0.0) {
            return Err(invalid("M", "must be > 0"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(invalid("picard_tol", "must be > 0"));
        }
        if self.picard_max_iters == 0 {
            return Err(invalid("picard_max_iters", "must be >= 1"));
        }
        if let Some(l) = self.lipschitz_override {
            if !(l >= 0.0) {
                return Err(invalid("L", "must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn lipschitz(&self, model: &MarketModel) -> f64 {
        self.lipschitz_override
            .unwrap_or_else(|| model.driver_lipschitz())
    }

    /// Step ratio `C = min(1, 2 theta / L, 1 / |sigma^2 - mu|)` of the rule `h = C delta`.
    pub fn auto_step_ratio(&self, model: &MarketModel) -> f64 {
        let l = self.lipschitz(model);
        let by_theta = if l > 0.0 {
            2.0 * self.theta / l
        } else {
            f64::INFINITY
        };
        let gap = (model.sigma * model.sigma - model.mu).abs();
        let by_gap = if gap > 0.0 { 1.0 / gap } else { f64::INFINITY };
        1.0_f64.min(by_theta).min(by_gap)
    }
}

/// One violated step-size condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum CflViolation {
    /// `delta <= 1`.
    SpaceStepTooLarge { delta: f64 },
    /// `h L / (2 delta) <= theta`.
    ThetaBelowRequired { required: f64, theta: f64 },
    /// `theta < 1/4`.
    ThetaTooLarge { theta: f64 },
    /// `|mu| h <= delta`.
    DriftStep { drift_step: f64, delta: f64 },
    /// `delta <= M h`.
    SpaceStepAboveRatio { delta: f64, bound: f64 },
}

impl CflViolation {
    pub fn label(&self) -> &'static str {
        match self {
            CflViolation::SpaceStepTooLarge { .. } => "CFL1",
            CflViolation::ThetaBelowRequired { .. } | CflViolation::ThetaTooLarge { .. } => "CFL2",
            CflViolation::DriftStep { .. } | CflViolation::SpaceStepAboveRatio { .. } => "CFL3",
        }
    }
}

/// Returns the list of violated step-size conditions; empty means compliant.
pub fn check_cfl(
    h: f64,
    delta: f64,
    params: &SchemeParams,
    model: &MarketModel,
) -> Vec<CflViolation> {
    let mut out = Vec::new();
    if delta > 1.0 {
        out.push(CflViolation::SpaceStepTooLarge { delta });
    }
    let required = h * params.lipschitz(model) / (2.0 * delta);
    if required > params.theta {
        out.push(CflViolation::ThetaBelowRequired {
            required,
            theta: params.theta,
        });
    }
    if params.theta >= 0.25 {
        out.push(CflViolation::ThetaTooLarge {
            theta: params.theta,
        });
    }
    let drift_step = model.mu.abs() * h;
    if drift_step > delta {
        out.push(CflViolation::DriftStep { drift_step, delta });
    }
    let bound = params.m_ratio * h;
    if delta > bound {
        out.push(CflViolation::SpaceStepAboveRatio { delta, bound });
    }
    out
}

/// Outcome of one sampled assumption check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Violating sample `(t, x, y, z)` or a description.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub upwind: Upwind,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Samples the standing assumptions on a deterministic 10x10x10 lattice.
pub fn check_assumptions(model: &MarketModel, payoff: &Payoff) -> AssumptionReport {
    const PTS: usize = 10;
    let bound = payoff.bound();
    let (x_lo, x_hi) = match payoff {
        Payoff::Put { strike } if *strike > 0.0 => (strike.ln() - 3.0, strike.ln() + 3.0),
        Payoff::Put { .. } => (-3.0, 3.0),
        Payoff::Custom(c) => c.x_range(),
    };
    let y_max = bound.max(1.0);
    let mut checks = Vec::new();

    checks.push(AssumptionCheck {
        name: "driver_parameters",
        passed: model.driver.validate().is_ok(),
        detail: model.driver.validate().err().map(|e| e.to_string()),
    });

    let mut zero_fail = None;
    'zero: for t in linspace(0.0, model.horizon, PTS) {
        for x in linspace(x_lo, x_hi, PTS) {
            let v = model.driver(t, x, 0.0, 0.0);
            if v != 0.0 {
                zero_fail = Some(format!("f({t}, {x}, 0, 0) = {v}"));
                break 'zero;
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "driver_vanishes_at_origin",
        passed: zero_fail.is_none(),
        detail: zero_fail,
    });

    let mut mono_fail = None;
    let z_scale = model.sigma * y_max;
    'mono: for t in linspace(0.0, model.horizon, PTS) {
        for x in linspace(x_lo, x_hi, PTS) {
            for z in [-z_scale, 0.0, z_scale] {
                let mut prev: Option<(f64, f64)> = None;
                for y in linspace(-y_max, y_max, PTS) {
                    let v = model.driver(t, x, y, z);
                    if let Some((py, pv)) = prev {
                        if v > pv + 1e-12 * (1.0 + pv.abs()) {
                            mono_fail = Some(format!(
                                "f({t}, {x}, {y}, {z}) = {v} > f({t}, {x}, {py}, {z}) = {pv}"
                            ));
                            break 'mono;
                        }
                    }
                    prev = Some((y, v));
                }
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "driver_non_increasing_in_y",
        passed: mono_fail.is_none(),
        detail: mono_fail,
    });

    checks.push(AssumptionCheck {
        name: "payoff_bounded",
        passed: bound.is_finite(),
        detail: Some(format!("sup|g| = {bound}")),
    });

    let upwind = model.upwind();
    checks.push(AssumptionCheck {
        name: "drift_sign",
        passed: true,
        detail: Some(format!("mu = {}, upwind = {:?}", model.mu, upwind)),
    });

    AssumptionReport { checks, upwind }
}
