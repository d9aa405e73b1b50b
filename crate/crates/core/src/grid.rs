//! Discretisation of the time axis, the log-price axis and the control set.

use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Relative slack used when deciding whether `j |a| delta >= sigma` holds, so
/// that ratios which are integers in exact arithmetic are not pushed up by one
/// through floating-point rounding.
const SNAP_RTOL: f64 = 1e-12;

/// Relative slack for counting how many steps fit in an interval.
const COUNT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with step `h`; when `h` does not divide `T` the last step
    /// is shortened so that the grid lands on `T`.
    pub fn with_step(horizon: f64, h: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("T", "must be > 0"));
        }
        if !(h > 0.0 && h <= horizon * (1.0 + COUNT_RTOL)) {
            return Err(invalid("h", format!("must lie in (0, T], got {h}")));
        }
        let mut nodes = vec![0.0];
        let mut i = 1usize;
        loop {
            let t = i as f64 * h;
            if t >= horizon * (1.0 - COUNT_RTOL) {
                break;
            }
            nodes.push(t);
            i += 1;
        }
        nodes.push(horizon);
        Ok(Self { nodes })
    }

    /// `steps` equal steps on `[0, T]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("T", "must be > 0"));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        let mut nodes: Vec<f64> = (0..steps)
            .map(|i| horizon * i as f64 / steps as f64)
            .collect();
        nodes.push(horizon);
        Ok(Self { nodes })
    }

    /// Smallest uniform grid whose step does not exceed `max_step`.
    pub fn uniform_max_step(horizon: f64, max_step: f64) -> Result<Self> {
        if !(max_step > 0.0) {
            return Err(invalid("h", "must be > 0"));
        }
        let steps = ((horizon / max_step) * (1.0 - COUNT_RTOL)).ceil().max(1.0) as usize;
        Self::uniform(horizon, steps)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of steps `kappa`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn step(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    /// `|pi|`, the largest step.
    pub fn max_step(&self) -> f64 {
        (0..self.steps()).map(|k| self.step(k)).fold(0.0, f64::max)
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }
}

/// Truncated log-price grid `x_k = B1 + k delta`, `k = 0..Nx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XGrid {
    lower: f64,
    upper: f64,
    delta: f64,
    len: usize,
}

impl XGrid {
    pub fn new(lower: f64, upper: f64, delta: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(invalid(
                "B1/B2",
                format!("need B1 < B2, got [{lower}, {upper}]"),
            ));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid("delta", "must be > 0"));
        }
        let len = ((upper - lower) / delta * (1.0 + COUNT_RTOL)).floor() as usize + 1;
        if len < 3 {
            return Err(invalid(
                "delta",
                format!("grid on [{lower}, {upper}] with spacing {delta} has fewer than 3 nodes"),
            ));
        }
        Ok(Self {
            lower,
            upper,
            delta,
            len,
        })
    }

    /// Grid used in the experiments: `[log 10, log 45]`.
    pub fn reference(delta: f64) -> Result<Self> {
        Self::new(10f64.ln(), 45f64.ln(), delta)
    }

    #[inline]
    pub fn x(&self, k: usize) -> f64 {
        self.lower + k as f64 * self.delta
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        k == 0 || k + 1 == self.len
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|k| self.x(k))
    }

    /// Bracketing cell `(k, w)` with `x = (1 - w) x_k + w x_{k+1}`, or `None`
    /// outside the grid.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let last = self.x(self.len - 1);
        if x < self.lower - 1e-12 || x > last + 1e-12 {
            return None;
        }
        let s = ((x - self.lower) / self.delta).clamp(0.0, (self.len - 1) as f64);
        let near = s.round();
        if (s - near).abs() <= 1e-9 {
            let k = near as usize;
            return Some(if k == self.len - 1 {
                (k - 1, 1.0)
            } else {
                (k, 0.0)
            });
        }
        let k = (s.floor() as usize).min(self.len - 2);
        Some((k, s - k as f64))
    }
}

/// A control snapped so that an integer number of p-steps spans `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjustedControl {
    pub raw: f64,
    pub snapped: f64,
    /// Number of p-intervals; the p-grid has `intervals + 1` nodes.
    pub intervals: usize,
}

impl AdjustedControl {
    pub fn sign(&self) -> isize {
        if self.snapped > 0.0 {
            1
        } else {
            -1
        }
    }

    pub fn p_nodes(&self) -> usize {
        self.intervals + 1
    }

    #[inline]
    pub fn p(&self, l: usize) -> f64 {
        l as f64 / self.intervals as f64
    }

    /// Deterministic tie-break key: smaller `|raw|` first, then positive before negative.
    pub fn tie_key(&self) -> (f64, u8) {
        (self.raw.abs(), if self.raw > 0.0 { 0 } else { 1 })
    }

    pub fn label(&self) -> String {
        format!("{}", self.raw)
    }
}

/// Snaps `a` to `sign(a) sigma / (delta N)` with `N = ceil(sigma / (|a| delta))`.
pub fn adjust_control(a: f64, delta: f64, sigma: f64) -> Result<AdjustedControl> {
    if a == 0.0 {
        return Err(Error::ZeroControl);
    }
    if !a.is_finite() {
        return Err(invalid("a", "must be finite"));
    }
    if !(delta > 0.0) || !(sigma > 0.0) {
        return Err(invalid("delta/sigma", "must be > 0"));
    }
    let mag = a.abs();
    let reaches = |j: usize| j as f64 * mag * delta >= sigma * (1.0 - SNAP_RTOL);
    let seed = (sigma / (mag * delta)).floor();
    let mut n = if seed.is_finite() && seed > 2.0 {
        seed as usize - 1
    } else {
        1
    };
    while !reaches(n) {
        n += 1;
    }
    while n > 1 && reaches(n - 1) {
        n -= 1;
    }
    Ok(AdjustedControl {
        raw: a,
        snapped: a.signum() * sigma / (delta * n as f64),
        intervals: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Explicit { raw: Vec<f64> },
    PaperSet22,
    LinearCase { n: usize, step_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSet {
    controls: Vec<AdjustedControl>,
    provenance: Provenance,
}

impl ControlSet {
    /// Snaps every raw control; controls that snap to the same value are
    /// merged, keeping the first position and the smallest tie-break key.
    pub fn from_raw(raw: &[f64], delta: f64, sigma: f64, provenance: Provenance) -> Result<Self> {
        if raw.is_empty() {
            return Err(invalid("controls", "control set is empty"));
        }
        let mut controls: Vec<AdjustedControl> = Vec::with_capacity(raw.len());
        for &a in raw {
            let c = adjust_control(a, delta, sigma)?;
            match controls
                .iter_mut()
                .find(|d| d.intervals == c.intervals && d.sign() == c.sign())
            {
                Some(d) => {
                    if c.tie_key() < d.tie_key() {
                        *d = c;
                    }
                }
                None => controls.push(c),
            }
        }
        Ok(Self {
            controls,
            provenance,
        })
    }

    pub fn explicit(raw: &[f64], delta: f64, sigma: f64) -> Result<Self> {
        Self::from_raw(
            raw,
            delta,
            sigma,
            Provenance::Explicit { raw: raw.to_vec() },
        )
    }

    pub fn controls(&self) -> &[AdjustedControl] {
        &self.controls
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Total number of p-nodes over all control meshes.
    pub fn total_p_nodes(&self) -> usize {
        self.controls.iter().map(|c| c.p_nodes()).sum()
    }

    pub fn max_abs(&self) -> Option<&AdjustedControl> {
        self.controls
            .iter()
            .max_by(|a, b| a.snapped.abs().total_cmp(&b.snapped.abs()))
    }

    pub fn min_abs(&self) -> Option<&AdjustedControl> {
        self.controls
            .iter()
            .min_by(|a, b| a.snapped.abs().total_cmp(&b.snapped.abs()))
    }

    /// Returns a copy with the controls in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            controls: order.iter().map(|&i| self.controls[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Raw values `({-2, -1.5, .., 2} U {-3, -3 + 1/3, .., 3}) \ {0}` in increasing order.
pub fn paper_raw_controls() -> Vec<f64> {
    // Work with multiples of 1/6 to compare exactly.
    let mut sixths: Vec<i32> = (-4..=4)
        .filter(|&k| k != 0)
        .map(|k| 3 * k)
        .chain((-9..=9).filter(|&k| k != 0).map(|k| 2 * k))
        .collect();
    sixths.sort_unstable();
    sixths.dedup();
    sixths
        .into_iter()
        .map(|s| {
            if s % 3 == 0 {
                (s / 3) as f64 / 2.0
            } else {
                (s / 2) as f64 / 3.0
            }
        })
        .collect()
}

/// The 22-control set of the non-linear experiments, snapped for `delta`.
pub fn build_paper_control_set(delta: f64, sigma: f64) -> Result<ControlSet> {
    ControlSet::from_raw(&paper_raw_controls(), delta, sigma, Provenance::PaperSet22)
}

/// Control geometry for the linear-driver convergence study.
///
/// `delta = 2 pi C sigma^2 / n^2` is the largest spacing with
/// `sigma / (n delta) >= 1 / sqrt(2 pi C delta)`. Controls are `sigma / (m delta)`
/// starting from `m = n`, each at least `1/n` below the previous one; the
/// sequence stops after the first value below `1/n`.
pub fn build_linear_case_controls(
    n: usize,
    sigma: f64,
    step_ratio: f64,
) -> Result<(f64, ControlSet)> {
    if n < 2 {
        return Err(invalid("n", format!("must be >= 2, got {n}")));
    }
    if !(sigma > 0.0) || !(step_ratio > 0.0) {
        return Err(invalid("sigma/C", "must be > 0"));
    }
    let nf = n as f64;
    let delta = 2.0 * std::f64::consts::PI * step_ratio * sigma * sigma / (nf * nf);
    let value = |m: usize| sigma / (m as f64 * delta);
    let gap = 1.0 / nf;

    let mut ms = vec![n];
    loop {
        let mi = *ms.last().unwrap();
        let ai = value(mi);
        if ai < gap {
            break;
        }
        let target = ai - gap;
        if target <= 0.0 {
            break;
        }
        let mut m = ((sigma / (target * delta)).floor() as usize).max(mi);
        while ai - value(m) < gap {
            m += 1;
        }
        while m > mi && ai - value(m - 1) >= gap {
            m -= 1;
        }
        ms.push(m);
    }

    let mut controls = Vec::with_capacity(ms.len());
    for &m in &ms {
        let c = adjust_control(value(m), delta, sigma)?;
        debug_assert_eq!(c.intervals, m);
        controls.push(c);
    }
    Ok((
        delta,
        ControlSet {
            controls,
            provenance: Provenance::LinearCase { n, step_ratio },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SIGMA: f64 = 0.25;

    #[test]
    fn snapping_table_row_delta_01() {
        let c = adjust_control(3.0, 0.1, SIGMA).unwrap();
        assert_eq!(c.intervals, 1);
        assert_eq!(c.snapped, 2.5);
        assert_eq!(c.p_nodes(), 2);

        let c = adjust_control(1.0 / 3.0, 0.1, SIGMA).unwrap();
        assert_eq!(c.intervals, 8);
        assert_eq!(c.snapped, 0.3125);
        assert_eq!(c.p_nodes(), 9);

        assert_eq!(adjust_control(-3.0, 0.1, SIGMA).unwrap().snapped, -2.5);
        assert_eq!(adjust_control(0.0, 0.1, SIGMA), Err(Error::ZeroControl));
    }

    #[test]
    fn exact_integer_ratio_is_not_rounded_up() {
        // sigma / (|a| delta) = 15 in exact arithmetic.
        let c = adjust_control(1.0 / 3.0, 0.05, SIGMA).unwrap();
        assert_eq!(c.intervals, 15);
        let c = adjust_control(1.0 / 3.0, 0.01, SIGMA).unwrap();
        assert_eq!(c.intervals, 75);
    }

    #[test]
    fn standard_set_has_22_controls() {
        let raw = paper_raw_controls();
        assert_eq!(raw.len(), 22);
        assert!(raw.contains(&2.0) && raw.contains(&-2.0));
        assert!(!raw.contains(&0.0));
        assert!(raw.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn standard_set_snapped_extremes() {
        let set = build_paper_control_set(0.1, SIGMA).unwrap();
        assert_eq!(set.len(), 12);
        let max = set.max_abs().unwrap();
        assert_eq!(max.snapped.abs(), 2.5);
        assert_eq!(max.p_nodes(), 2);
        let min = set.min_abs().unwrap();
        assert_eq!(min.snapped.abs(), 0.3125);
        assert_eq!(min.p_nodes(), 9);

        let set = build_paper_control_set(0.01, SIGMA).unwrap();
        assert_eq!(set.len(), 22);
        let max = set.max_abs().unwrap();
        assert!((max.snapped.abs() - 25.0 / 9.0).abs() < 1e-12);
        assert_eq!(max.p_nodes(), 10);
        assert_eq!(set.min_abs().unwrap().p_nodes(), 76);
    }

    #[test]
    fn merged_duplicates_keep_smallest_key() {
        // 8/3 and 3 both snap to N = 1 at delta = 0.1.
        let set = ControlSet::explicit(&[3.0, 8.0 / 3.0], 0.1, SIGMA).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.controls()[0].raw, 8.0 / 3.0);
    }

    #[test]
    fn linear_case_geometry() {
        let (delta, set) = build_linear_case_controls(3, SIGMA, 1.0).unwrap();
        assert!((delta - 0.0436332312998582).abs() < 1e-15);
        let a_max = set.controls()[0].snapped;
        assert!((a_max - 3.0 / (2.0 * std::f64::consts::PI * SIGMA)).abs() < 1e-12);
        assert!((a_max - 1.91).abs() < 0.01);
        assert_eq!(set.len(), 5);

        let (_, set) = build_linear_case_controls(5, SIGMA, 1.0).unwrap();
        assert!((set.controls()[0].snapped - 3.18).abs() < 0.01);
        assert_eq!(set.len(), 12);
        assert!(set
            .controls()
            .iter()
            .all(|c| c.snapped > 0.0 && c.snapped <= 3.1831));

        assert!(build_linear_case_controls(1, SIGMA, 1.0).is_err());
    }

    #[test]
    fn xgrid_and_time_grid() {
        let g = XGrid::reference(0.1).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.x(0), 10f64.ln());
        assert!(g.is_boundary(0) && g.is_boundary(15) && !g.is_boundary(7));
        assert!(XGrid::new(1.0, 1.1, 0.1).is_err());
        assert!(XGrid::new(1.0, 0.0, 0.1).is_err());

        let t = TimeGrid::with_step(1.0, 0.1).unwrap();
        assert_eq!(t.steps(), 10);
        assert_eq!(t.horizon(), 1.0);
        let t = TimeGrid::with_step(1.0, 0.3).unwrap();
        assert_eq!(t.steps(), 4);
        assert!((t.nodes()[3] - 0.9).abs() < 1e-15);
        assert!((t.step(3) - 0.1).abs() < 1e-12);
        assert!(TimeGrid::with_step(1.0, 0.0).is_err());
        assert!(TimeGrid::with_step(1.0, 2.0).is_err());

        let t = TimeGrid::uniform_max_step(1.0, 0.005).unwrap();
        assert_eq!(t.steps(), 200);
        let t = TimeGrid::uniform_max_step(1.0, 0.0436).unwrap();
        assert_eq!(t.steps(), 23);
    }

    #[test]
    fn locate_in_xgrid() {
        let g = XGrid::new(0.0, 1.0, 0.25).unwrap();
        assert_eq!(g.locate(0.3), Some((1, 0.19999999999999996)));
        assert_eq!(g.locate(1.0), Some((3, 1.0)));
        assert_eq!(g.locate(1.5), None);
    }

    proptest! {
        #[test]
        fn snapping_invariants(a in 0.01..10.0f64, neg in any::<bool>(), delta in 1e-3..0.5f64, sigma in 0.05..1.0f64) {
            let a = if neg { -a } else { a };
            let c = adjust_control(a, delta, sigma).unwrap();
            let span = c.intervals as f64 * c.snapped.abs() * delta;
            prop_assert!((span - sigma).abs() <= 4.0 * f64::EPSILON * sigma);
            prop_assert_eq!(c.snapped.signum(), a.signum());
            let gap = a.abs() - c.snapped.abs();
            prop_assert!(gap >= -1e-12 * a.abs());
            prop_assert!(gap <= a * a * delta / sigma);
            let m = adjust_control(-a, delta, sigma).unwrap();
            prop_assert_eq!(m.snapped, -c.snapped);
            prop_assert_eq!(m.intervals, c.intervals);
        }

        #[test]
        fn linear_case_invariants(n in 2usize..9, c in 0.3..2.0f64) {
            let (delta, set) = build_linear_case_controls(n, SIGMA, c).unwrap();
            let expect = 2.0 * std::f64::consts::PI * c * SIGMA * SIGMA;
            prop_assert!((delta * (n * n) as f64 - expect).abs() <= 4.0 * f64::EPSILON * expect);
            for w in set.controls().windows(2) {
                prop_assert!(w[0].snapped - w[1].snapped >= 1.0 / n as f64);
            }
            let last = set.controls().last().unwrap();
            prop_assert!(last.snapped <= 1.0 / n as f64);
        }
    }
}
