//! Closed-form and Monte-Carlo references for the linear driver.
//!
//! With `f(z) = -z mu / sigma` the wealth process is a martingale under the
//! measure `Q` in which the log-price is driftless, `X_T = x + sigma sqrt(tau) Z`.
//! The quantile hedging price is then the cheapest `Q`-cost of replicating the
//! put on a success event of `P`-probability `p`. The optimal event is a
//! likelihood-ratio level set in the terminal log-price; states where the put
//! pays nothing are always included since they cost nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fd::XBoundary;
use crate::model::{DriverSpec, MarketModel};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Inverse of [`normal_cdf`] on `(0, 1)`.
///
/// Rational approximation of the lower half refined by Halley steps; the upper
/// half is obtained by symmetry so that `1 - u` is computed exactly.
pub fn normal_inv(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::ProbabilityOutOfRange(u));
    }
    if u > 0.5 {
        return Ok(-lower_inv(1.0 - u));
    }
    Ok(lower_inv(u))
}

fn lower_inv(u: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if u == 0.5 {
        return 0.0;
    }
    let mut x = if u < 0.02425 {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let e = normal_cdf(x) - u;
        let t = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= t / (1.0 + 0.5 * x * t);
    }
    x
}

/// `E[(K - exp(x + sigma sqrt(tau) Z))^+]`, the put price under the driftless law.
pub fn driftless_put_price(x: f64, tau: f64, sigma: f64, strike: f64) -> f64 {
    if strike <= 0.0 {
        return 0.0;
    }
    if tau <= 0.0 {
        return (strike - x.exp()).max(0.0);
    }
    let s = sigma * tau.sqrt();
    let d1 = (x + s * s - strike.ln()) / s;
    let d2 = d1 - s;
    (strike * normal_cdf(-d2) - (x + 0.5 * s * s).exp() * normal_cdf(-d1)).max(0.0)
}

/// Optimal control `exp(-N^{-1}(p)^2 / 2) / sqrt(2 pi (T - t))`.
pub fn optimal_alpha(t: f64, p: f64, horizon: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    let z = normal_inv(p).expect("p in (0, 1)");
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI * (horizon - t)).sqrt()
}

/// Quantile hedging problem for a put under the linear driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearQuantileProblem {
    pub mu: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub strike: f64,
    pub t: f64,
    pub x: f64,
    pub p: f64,
}

impl LinearQuantileProblem {
    pub fn new(model: &MarketModel, strike: f64, t: f64, x: f64, p: f64) -> Result<Self> {
        if model.driver != DriverSpec::Linear {
            return Err(Error::NonLinearDriver);
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        if !(t < model.horizon) {
            return Err(invalid("t", format!("must be < T = {}", model.horizon)));
        }
        Ok(Self {
            mu: model.mu,
            sigma: model.sigma,
            horizon: model.horizon,
            strike,
            t,
            x,
            p,
        })
    }

    fn tau(&self) -> f64 {
        self.horizon - self.t
    }

    /// `sigma sqrt(tau)`.
    fn spread(&self) -> f64 {
        self.sigma * self.tau().sqrt()
    }

    /// `P(X_T >= y)` under the real-world law.
    fn p_above(&self, y: f64) -> f64 {
        normal_cdf((self.x + self.mu * self.tau() - y) / self.spread())
    }

    /// Threshold `p*` below which the price vanishes: the `P`-probability of
    /// the put expiring worthless.
    pub fn zero_threshold(&self) -> f64 {
        if self.strike <= 0.0 {
            return 1.0;
        }
        self.p_above(self.strike.ln())
    }

    /// Success event of the Neyman-Pearson construction.
    pub fn success_region(&self) -> SuccessRegion {
        let ln_k = if self.strike > 0.0 {
            self.strike.ln()
        } else {
            f64::NEG_INFINITY
        };
        if self.p <= 0.0 {
            return SuccessRegion { intervals: vec![] };
        }
        if self.p >= 1.0 || self.p <= self.zero_threshold() {
            // Either everything or only (part of) the free region is needed.
            let lo = if self.p >= 1.0 {
                f64::NEG_INFINITY
            } else {
                ln_k
            };
            return SuccessRegion {
                intervals: vec![(lo, f64::INFINITY)],
            };
        }
        let tau = self.tau();
        if self.mu >= 0.0 {
            // Cost per unit probability decreases in X_T: an upper half-line.
            let d = self.x + self.mu * tau - self.spread() * normal_inv(self.p).unwrap();
            return SuccessRegion {
                intervals: vec![(d, f64::INFINITY)],
            };
        }
        self.two_sided_region(ln_k)
    }

    /// For `mu < 0` the cost density `(K - e^X) exp(|mu| (X - x) / sigma^2)` is
    /// unimodal on the paying states, so its sublevel sets are a lower tail
    /// plus a band just below `ln K`.
    fn two_sided_region(&self, ln_k: f64) -> SuccessRegion {
        let kappa = -self.mu / (self.sigma * self.sigma);
        let strike = self.strike;
        let log_cost = |y: f64| (strike - y.exp()).ln() + kappa * (y - self.x);
        let peak = (kappa * strike / (1.0 + kappa)).ln().min(ln_k);
        let span = 40.0 * self.spread();
        let lo_edge = peak - span;
        // Sublevel set {log_cost <= level} on either side of the peak.
        let roots = |level: f64| -> (f64, f64) {
            let left = bisect(lo_edge, peak, |y| log_cost(y) <= level);
            let right = bisect(peak, ln_k, |y| log_cost(y) > level);
            (left, right)
        };
        let prob = |level: f64| {
            let (l, r) = roots(level);
            (1.0 - self.p_above(l)) + self.p_above(r)
        };
        let (mut a, mut b) = (
            log_cost(lo_edge).min(log_cost(ln_k - 1e-12)) - 50.0,
            log_cost(peak),
        );
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if prob(m) < self.p {
                a = m;
            } else {
                b = m;
            }
        }
        let (l, r) = roots(b);
        SuccessRegion {
            intervals: vec![(f64::NEG_INFINITY, l), (r, f64::INFINITY)],
        }
    }
}

/// Largest `y` in `[lo, hi]` for which `below(y)` holds, assuming `below` is
/// true on a prefix of the interval.
fn bisect(mut lo: f64, mut hi: f64, below: impl Fn(f64) -> bool) -> f64 {
    if !below(lo) {
        return lo;
    }
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if below(m) {
            lo = m;
        } else {
            hi = m;
        }
    }
    lo
}

/// Union of disjoint intervals of terminal log-prices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessRegion {
    pub intervals: Vec<(f64, f64)>,
}

impl SuccessRegion {
    pub fn contains(&self, y: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| a <= y && y <= b)
    }
}

/// `E^Q[(K - e^X) 1{lo <= X <= hi}]` with `X = x + s Z`, for `hi <= ln K`.
fn put_partial(x: f64, s: f64, strike: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let za = (lo - x) / s;
    let zb = (hi - x) / s;
    let cash = strike * (normal_cdf(zb) - normal_cdf(za));
    let asset = (x + 0.5 * s * s).exp() * (normal_cdf(zb - s) - normal_cdf(za - s));
    (cash - asset).max(0.0)
}

/// Closed-form quantile hedging price of the put under the linear driver.
pub fn linear_quantile_price(prob: &LinearQuantileProblem) -> f64 {
    if prob.p <= 0.0 || prob.strike <= 0.0 {
        return 0.0;
    }
    let tau = prob.tau();
    if tau <= 0.0 {
        return prob.p * (prob.strike - prob.x.exp()).max(0.0);
    }
    if prob.p >= 1.0 {
        return driftless_put_price(prob.x, tau, prob.sigma, prob.strike);
    }
    let ln_k = prob.strike.ln();
    let s = prob.spread();
    prob.success_region()
        .intervals
        .iter()
        .map(|&(a, b)| put_partial(prob.x, s, prob.strike, a, b.min(ln_k)))
        .sum()
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleResult {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

const PAIRS_PER_BLOCK: usize = 4096;

/// Antithetic Monte-Carlo estimate of `E^Q[g(X_T) 1{X_T in success region}]`.
///
/// Blocks of antithetic pairs are seeded by `(seed, block index)`, so the
/// result does not depend on how the blocks are scheduled.
pub fn mc_oracle(prob: &LinearQuantileProblem, n_paths: usize, seed: u64) -> Result<OracleResult> {
    if n_paths < 10_000 {
        return Err(invalid(
            "n_paths",
            format!("need at least 10^4 paths, got {n_paths}"),
        ));
    }
    let region = prob.success_region();
    let s = prob.spread();
    let (x, strike) = (prob.x, prob.strike);
    let eval = |z: f64| {
        let y = x + s * z;
        if region.contains(y) {
            (strike - y.exp()).max(0.0)
        } else {
            0.0
        }
    };
    let pairs = n_paths / 2;
    let blocks = pairs.div_ceil(PAIRS_PER_BLOCK);
    let sums: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = PAIRS_PER_BLOCK.min(pairs - b * PAIRS_PER_BLOCK);
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..count {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = 0.5 * (eval(z) + eval(-z));
                sum += v;
                sq += v * v;
            }
            (sum, sq)
        })
        .collect();
    let (sum, sq) = sums
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s1, s2)| (a + s1, b + s2));
    let n = pairs as f64;
    let mean = sum / n;
    let var = ((sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(OracleResult {
        estimate: mean,
        std_error: (var / n).sqrt(),
        n_paths: 2 * pairs,
        seed,
    })
}

/// Dirichlet data at the ends of the truncated log-price domain given by the
/// linear-driver closed form evaluated at the endpoint itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceBoundary {
    model: MarketModel,
    strike: f64,
}

impl ReferenceBoundary {
    /// Uses the drift and volatility of `model` with the linear driver,
    /// whatever the driver of `model` is.
    pub fn new(model: &MarketModel, strike: f64) -> Self {
        Self {
            model: MarketModel {
                driver: DriverSpec::Linear,
                ..*model
            },
            strike,
        }
    }
}

impl XBoundary for ReferenceBoundary {
    fn value(&self, t: f64, x: f64, p: f64) -> f64 {
        x_boundary_value(&self.model, self.strike, t, x, p)
    }
}

/// Linear-driver quantile price at an endpoint of the x-domain.
pub fn x_boundary_value(model: &MarketModel, strike: f64, t: f64, x: f64, p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if t >= model.horizon {
        return p * (strike - x.exp()).max(0.0);
    }
    let linear = MarketModel {
        driver: DriverSpec::Linear,
        ..*model
    };
    let prob = LinearQuantileProblem::new(&linear, strike, t, x, p).expect("valid linear problem");
    linear_quantile_price(&prob)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MU: f64 = 0.01875;
    const SIGMA: f64 = 0.25;

    fn linear() -> MarketModel {
        MarketModel::new(MU, SIGMA, 1.0, DriverSpec::Linear).unwrap()
    }

    /// Maclaurin series of the normal CDF, independent of `erfc`.
    fn cdf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        for n in 1..200 {
            term *= -z * z / 2.0 / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 + sum / SQRT_2PI
    }

    /// Trapezoidal quadrature of the put payoff against the Gaussian density.
    fn put_quadrature(x: f64, s: f64, k: f64, lo: f64, hi: f64) -> f64 {
        let n = 200_000;
        let (a, b) = ((lo - x) / s, (hi - x) / s);
        let a = a.max(-12.0);
        let dz = (b - a) / n as f64;
        (0..=n)
            .map(|i| {
                let z = a + i as f64 * dz;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (k - (x + s * z).exp()).max(0.0) * normal_pdf(z)
            })
            .sum::<f64>()
            * dz
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert_eq!(normal_inv(0.5).unwrap(), 0.0);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        for z in [-3.0, -1.2, 0.4, 1.959964, 2.7] {
            assert!((normal_cdf(z) - cdf_series(z)).abs() < 1e-13, "z = {z}");
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut u = 1e-8;
        while u < 1.0 - 1e-8 {
            let z = normal_inv(u).unwrap();
            assert!((normal_cdf(z) - u).abs() <= 1e-12, "u = {u}");
            u = if u < 0.01 { u * 1.7 } else { u + 0.0137 };
        }
        assert!(normal_inv(0.0).is_err());
        assert!(normal_inv(1.0).is_err());
        assert!(normal_inv(f64::NAN).is_err());
    }

    #[test]
    fn put_price_examples() {
        assert!((driftless_put_price(20f64.ln(), 0.0, SIGMA, 30.0) - 10.0).abs() < 1e-12);
        assert_eq!(driftless_put_price(1.0, 1.0, SIGMA, 0.0), 0.0);
        let x = 30f64.ln();
        let v = driftless_put_price(x, 1.0, SIGMA, 30.0);
        let quad = put_quadrature(x, SIGMA, 30.0, f64::NEG_INFINITY, x);
        assert!((v - quad).abs() < 1e-7, "{v} vs {quad}");
        assert!((v - 2.5790).abs() < 5e-4, "{v}");
    }

    #[test]
    fn alpha_examples() {
        let a = optimal_alpha(0.0, 0.5, 1.0);
        assert!((a - 1.0 / SQRT_2PI).abs() < 1e-15);
        assert!((optimal_alpha(0.2, 0.3, 1.0) - optimal_alpha(0.2, 0.7, 1.0)).abs() < 1e-14);
        assert_eq!(optimal_alpha(0.0, 0.0, 1.0), 0.0);
        assert!(optimal_alpha(0.0, 1e-12, 1.0) < 1e-5);
        let h = 0.05;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!(
                optimal_alpha(1.0 - h, p, 1.0)
                    <= 1.0 / (2.0 * std::f64::consts::PI * h).sqrt() + 1e-15
            );
        }
    }

    #[test]
    fn quantile_price_edges() {
        let m = linear();
        let x = 30f64.ln();
        let full = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 1.0).unwrap();
        let put = driftless_put_price(x, 1.0, SIGMA, 30.0);
        assert!((linear_quantile_price(&full) - put).abs() < 1e-10);
        let none = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 0.0).unwrap();
        assert_eq!(linear_quantile_price(&none), 0.0);

        let bs = MarketModel::new(MU, SIGMA, 1.0, DriverSpec::BorrowSpread { rate: 0.05 }).unwrap();
        assert_eq!(
            LinearQuantileProblem::new(&bs, 30.0, 0.0, x, 0.5),
            Err(Error::NonLinearDriver)
        );
    }

    #[test]
    fn flat_zero_threshold() {
        let m = linear();
        let x = 30f64.ln();
        let p_star = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 0.5)
            .unwrap()
            .zero_threshold();
        assert!((p_star - normal_cdf(MU / SIGMA)).abs() < 1e-15);
        assert!((p_star - 0.5299).abs() < 1e-4);
        let below = LinearQuantileProblem::new(&m, 30.0, 0.0, x, p_star - 1e-3).unwrap();
        let above = LinearQuantileProblem::new(&m, 30.0, 0.0, x, p_star + 1e-3).unwrap();
        assert_eq!(linear_quantile_price(&below), 0.0);
        assert!(linear_quantile_price(&above) > 0.0);
    }

    #[test]
    fn monotone_in_p() {
        let m = linear();
        for x in [2.5, 30f64.ln(), 3.7] {
            let mut last = 0.0;
            for i in 0..=50 {
                let p = i as f64 / 50.0;
                let v = linear_quantile_price(
                    &LinearQuantileProblem::new(&m, 30.0, 0.2, x, p).unwrap(),
                );
                assert!(v >= last - 1e-12, "x = {x}, p = {p}");
                last = v;
            }
        }
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let m = linear();
        let x = 30f64.ln();
        let prob = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 0.8).unwrap();
        let region = prob.success_region();
        let (d, _) = region.intervals[0];
        let quad = put_quadrature(x, SIGMA, 30.0, d, 30f64.ln());
        assert!((linear_quantile_price(&prob) - quad).abs() < 1e-7);
    }

    #[test]
    fn negative_drift_region_has_requested_probability() {
        let m = MarketModel::new(-0.1, SIGMA, 1.0, DriverSpec::Linear).unwrap();
        let x = 30f64.ln();
        let prob = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 0.8).unwrap();
        let region = prob.success_region();
        assert_eq!(region.intervals.len(), 2);
        let pr: f64 = {
            let (l, r) = (region.intervals[0].1, region.intervals[1].0);
            (1.0 - prob.p_above(l)) + prob.p_above(r)
        };
        assert!((pr - 0.8).abs() < 1e-9);
        let v = linear_quantile_price(&prob);
        assert!(v > 0.0 && v < driftless_put_price(x, 1.0, SIGMA, 30.0));
        // Any other two-sided split with the same probability costs more.
        let est = mc_oracle(&prob, 400_000, 9).unwrap();
        assert!((est.estimate - v).abs() < 4.0 * est.std_error + 1e-12);
    }

    #[test]
    fn oracle_edges() {
        let m = linear();
        let x = 30f64.ln();
        let zero = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 0.0).unwrap();
        let r = mc_oracle(&zero, 20_000, 1).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.std_error, 0.0);
        assert!(mc_oracle(&zero, 100, 1).is_err());

        let full = LinearQuantileProblem::new(&m, 30.0, 0.0, x, 1.0).unwrap();
        let r = mc_oracle(&full, 200_000, 3).unwrap();
        let put = driftless_put_price(x, 1.0, SIGMA, 30.0);
        assert!(
            (r.estimate - put).abs() < 3.0 * r.std_error,
            "{r:?} vs {put}"
        );

        let r2 = mc_oracle(&full, 800_000, 3).unwrap();
        let ratio = r.std_error / r2.std_error;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");

        assert_eq!(
            mc_oracle(&full, 50_000, 11).unwrap(),
            mc_oracle(&full, 50_000, 11).unwrap()
        );
    }

    #[test]
    fn boundary_values() {
        let m = linear();
        let hi = 45f64.ln();
        let lo = 10f64.ln();
        for p in [0.1, 0.5, 0.9] {
            assert!(
                x_boundary_value(&m, 30.0, 0.0, hi, p) <= driftless_put_price(hi, 1.0, SIGMA, 30.0)
            );
            assert_eq!(x_boundary_value(&m, 30.0, 0.0, hi, 0.0), 0.0);
        }
        let v = x_boundary_value(&m, 30.0, 0.3, lo, 1.0);
        assert!((v - driftless_put_price(lo, 0.7, SIGMA, 30.0)).abs() < 1e-12);
        let b = ReferenceBoundary::new(&m, 30.0);
        assert_eq!(b.value(0.3, lo, 1.0), v);
    }
}
