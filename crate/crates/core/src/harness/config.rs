//! Run configuration.
//!
//! The on-disk format is line oriented: `block.key = value`, `#` starts a
//! comment. A JSON document with nested objects is accepted as well and is
//! flattened into the same key space, so `{"model": {"mu": 0.1}}` and
//! `model.mu = 0.1` are equivalent. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::grid::{
    build_linear_case_controls, build_paper_control_set, ControlSet, TimeGrid, XGrid,
};
use crate::model::{CustomPayoff, DriverSpec, MarketModel, Payoff, SchemeParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

const DEFAULTS: &str = "
model.mu = 0.01875
model.sigma = 0.25
model.T = 1
model.driver = borrow_spread
model.R = 0.05
model.r = 0.0
payoff.K = 30
domain.B1 = ln:10
domain.B2 = ln:45
domain.boundary = reference
scheme.theta = 0.2
scheme.M = 2
scheme.picard_tol = 1e-5
scheme.picard_max_iters = 20000
scheme.cfl_unchecked = false
disc.delta = 0.1
disc.h = auto
controls.kind = paper22
output.p_samples = 0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1
output.times = initial
output.query = 0 ln:30 0.8; 0 ln:30 0.05; 0 ln:30 0.95
study.deltas = 0.1, 0.05, 0.01, 0.005
study.spots = 30, 37
study.fixed_h = 0.1
study.fixed_delta = 0.05
study.h_ladder = 0.1, 0.05, 0.025, 0.0125
study.n = 3, 4, 5
study.spot = 30
study.p = 0.8
study.rate_min = 1.0
study.rate_max = 1.6
study.picard_max = 400
study.blowup_min = 5
study.superrep_tol = 0.05
reference.paths = 1000000
reference.seed = 20240601
";

/// Flat key/value map with typed accessors.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    /// The built-in configuration: the reference market, put strike 30 and the
    /// default study ladders.
    pub fn defaults() -> Self {
        Self::parse_kv(DEFAULTS).expect("built-in defaults parse")
    }

    pub fn parse_kv(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_assignment(line)
                .map_err(|e| ConfigError(format!("line {}: {}", no + 1, e.0)))?;
            map.insert(k, v);
        }
        Ok(Self(map))
    }

    pub fn parse_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid JSON: {e}")))?;
        let mut map = BTreeMap::new();
        flatten("", &value, &mut map)?;
        Ok(Self(map))
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: ConfigMap) {
        self.0.extend(other.0);
    }

    /// Applies a `block.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = parse_assignment(assignment)?;
        self.0.insert(k, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError(format!("missing key `{key}`")))
    }

    pub fn real(&self, key: &str) -> Result<f64, ConfigError> {
        parse_real(self.required(key)?).map_err(|e| ConfigError(format!("`{key}`: {}", e.0)))
    }

    pub fn integer(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| {
            ConfigError(format!(
                "`{key}`: expected a non-negative integer, got `{v}`"
            ))
        })
    }

    pub fn boolean(&self, key: &str) -> Result<bool, ConfigError> {
        match self.required(key)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => err(format!("`{key}`: expected a boolean, got `{v}`")),
        }
    }

    pub fn reals(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let v = self.required(key)?;
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| parse_real(s.trim()).map_err(|e| ConfigError(format!("`{key}`: {}", e.0))))
            .collect()
    }

    pub fn integers(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.required(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("`{key}`: bad integer `{}`", s.trim())))
            })
            .collect()
    }
}

fn parse_assignment(line: &str) -> Result<(String, String), ConfigError> {
    let Some((k, v)) = line.split_once('=') else {
        return err(format!("expected `block.key = value`, got `{line}`"));
    };
    let k = k.trim();
    if !k.contains('.') || k.starts_with('.') || k.ends_with('.') {
        return err(format!("key `{k}` must have the form `block.key`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Reals accept an `ln:` prefix for log-prices, e.g. `ln:30`.
fn parse_real(s: &str) -> Result<f64, ConfigError> {
    let parsed = match s.strip_prefix("ln:") {
        Some(rest) => rest.trim().parse::<f64>().map(f64::ln),
        None => s.parse::<f64>(),
    };
    match parsed {
        Ok(v) if v.is_finite() => Ok(v),
        _ => err(format!("expected a real number, got `{s}`")),
    }
}

fn flatten(
    prefix: &str,
    v: &serde_json::Value,
    out: &mut BTreeMap<String, String>,
) -> Result<(), ConfigError> {
    use serde_json::Value;
    let scalar = |v: &Value| -> Result<String, ConfigError> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            _ => err(format!("`{prefix}`: unsupported value {v}")),
        }
    };
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out)?;
            }
            Ok(())
        }
        Value::Array(items) => {
            let joined: Result<Vec<String>, ConfigError> = items.iter().map(scalar).collect();
            out.insert(prefix.to_string(), joined?.join(", "));
            Ok(())
        }
        Value::Null => err(format!("`{prefix}`: null is not a value")),
        other => {
            if !prefix.contains('.') {
                return err(format!("top-level key `{prefix}` must be an object"));
            }
            out.insert(prefix.to_string(), scalar(other)?);
            Ok(())
        }
    }
}

/// Time step rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StepRule {
    /// `h = C delta` with the step ratio from the scheme parameters.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ControlSpec {
    Paper22,
    Explicit(Vec<f64>),
    LinearCase { n: usize },
}

/// Dirichlet data at the ends of the x-domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundarySpec {
    /// Linear-driver closed form at the endpoint.
    Reference,
    /// `p g(x)` at the endpoint.
    Frozen,
}

/// A query point `(t, x, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Query {
    pub t: f64,
    pub x: f64,
    pub p: f64,
}

/// Typed configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: MarketModel,
    pub payoff: Payoff,
    pub lower: f64,
    pub upper: f64,
    pub boundary: BoundarySpec,
    pub params: SchemeParams,
    pub delta: f64,
    pub step: StepRule,
    pub controls: ControlSpec,
    pub p_samples: Vec<f64>,
    pub all_times: bool,
    pub queries: Vec<Query>,
    pub raw: ConfigMap,
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let driver = match map.required("model.driver")? {
            "linear" => DriverSpec::Linear,
            "borrow_spread" => DriverSpec::BorrowSpread {
                rate: map.real("model.R")?,
            },
            "two_rates" => DriverSpec::TwoRates {
                lend: map.real("model.r")?,
                borrow: map.real("model.R")?,
            },
            other => return err(format!("unknown driver `{other}`")),
        };
        let model = MarketModel::new(
            map.real("model.mu")?,
            map.real("model.sigma")?,
            map.real("model.T")?,
            driver,
        )
        .map_err(|e| ConfigError(e.to_string()))?;

        let payoff = match map.get("payoff.table") {
            Some(table) => {
                let samples = table
                    .split(',')
                    .map(|pair| {
                        let (x, y) = pair.split_once(':').ok_or_else(|| {
                            ConfigError(format!("payoff.table: expected `x:y`, got `{pair}`"))
                        })?;
                        Ok((parse_real(x.trim())?, parse_real(y.trim())?))
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let lip = map.real("payoff.lipschitz")?;
                Payoff::Custom(
                    CustomPayoff::new(samples, lip).map_err(|e| ConfigError(e.to_string()))?,
                )
            }
            None => Payoff::put(map.real("payoff.K")?).map_err(|e| ConfigError(e.to_string()))?,
        };

        let boundary = match map.required("domain.boundary")? {
            "reference" => BoundarySpec::Reference,
            "frozen" => BoundarySpec::Frozen,
            other => return err(format!("unknown domain.boundary `{other}`")),
        };
        if boundary == BoundarySpec::Reference && !matches!(payoff, Payoff::Put { .. }) {
            return err("domain.boundary = reference needs a put payoff; use `frozen`");
        }

        let lipschitz_override = match map.get("scheme.L") {
            Some(_) => Some(map.real("scheme.L")?),
            None => None,
        };
        let params = SchemeParams {
            theta: map.real("scheme.theta")?,
            m_ratio: map.real("scheme.M")?,
            picard_tol: map.real("scheme.picard_tol")?,
            picard_max_iters: map.integer("scheme.picard_max_iters")?,
            lipschitz_override,
            cfl_unchecked: map.boolean("scheme.cfl_unchecked")?,
        };
        params.validate().map_err(|e| ConfigError(e.to_string()))?;

        let step = match map.required("disc.h")? {
            "auto" => StepRule::Auto,
            _ => StepRule::Fixed(map.real("disc.h")?),
        };
        let controls = match map.required("controls.kind")? {
            "paper22" => ControlSpec::Paper22,
            "explicit" => ControlSpec::Explicit(map.reals("controls.values")?),
            "linear_case" => ControlSpec::LinearCase {
                n: map.integer("controls.n")?,
            },
            other => return err(format!("unknown controls.kind `{other}`")),
        };
        let p_samples = map.reals("output.p_samples")?;
        if let Some(p) = p_samples.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return err(format!("output.p_samples: {p} lies outside [0, 1]"));
        }
        let all_times = match map.required("output.times")? {
            "all" => true,
            "initial" => false,
            other => {
                return err(format!(
                    "output.times must be `all` or `initial`, got `{other}`"
                ))
            }
        };
        let queries = parse_queries(map.get("output.query").unwrap_or(""))?;

        Ok(Self {
            model,
            payoff,
            lower: map.real("domain.B1")?,
            upper: map.real("domain.B2")?,
            boundary,
            params,
            delta: map.real("disc.delta")?,
            step,
            controls,
            p_samples,
            all_times,
            queries,
            raw: map.clone(),
        })
    }

    pub fn xgrid(&self) -> Result<XGrid, ConfigError> {
        XGrid::new(self.lower, self.upper, self.delta_used()?)
            .map_err(|e| ConfigError(e.to_string()))
    }

    /// `delta`, or the value implied by `n` for the linear-case controls.
    pub fn delta_used(&self) -> Result<f64, ConfigError> {
        match self.controls {
            ControlSpec::LinearCase { n } => Ok(self.linear_case(n)?.0),
            _ => Ok(self.delta),
        }
    }

    pub fn max_step(&self) -> Result<f64, ConfigError> {
        let delta = self.delta_used()?;
        Ok(match self.step {
            StepRule::Auto => self.params.auto_step_ratio(&self.model) * delta,
            StepRule::Fixed(h) => h,
        })
    }

    pub fn tgrid(&self) -> Result<TimeGrid, ConfigError> {
        TimeGrid::uniform_max_step(self.model.horizon, self.max_step()?)
            .map_err(|e| ConfigError(e.to_string()))
    }

    fn linear_case(&self, n: usize) -> Result<(f64, ControlSet), ConfigError> {
        let c = self.params.auto_step_ratio(&self.model);
        build_linear_case_controls(n, self.model.sigma, c).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn control_set(&self) -> Result<ControlSet, ConfigError> {
        let sigma = self.model.sigma;
        let built = match &self.controls {
            ControlSpec::Paper22 => build_paper_control_set(self.delta, sigma),
            ControlSpec::Explicit(raw) => ControlSet::explicit(raw, self.delta, sigma),
            ControlSpec::LinearCase { n } => return Ok(self.linear_case(*n)?.1),
        };
        built.map_err(|e| ConfigError(e.to_string()))
    }
}

fn parse_queries(text: &str) -> Result<Vec<Query>, ConfigError> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split_whitespace().collect();
            if parts.len() != 3 {
                return err(format!("output.query: expected `t x p`, got `{item}`"));
            }
            Ok(Query {
                t: parse_real(parts[0])?,
                x: parse_real(parts[1])?,
                p: parse_real(parts[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let cfg = RunConfig::from_map(&ConfigMap::defaults()).unwrap();
        assert_eq!(
            cfg.model,
            MarketModel::reference(DriverSpec::BorrowSpread { rate: 0.05 })
        );
        assert_eq!(cfg.lower, 10f64.ln());
        assert_eq!(cfg.tgrid().unwrap().steps(), 10);
        assert_eq!(cfg.control_set().unwrap().len(), 12);
        assert_eq!(cfg.queries.len(), 3);
        assert_eq!(cfg.queries[0].x, 30f64.ln());
    }

    #[test]
    fn auto_rule_gives_unit_ratio() {
        let cfg = RunConfig::from_map(&ConfigMap::defaults()).unwrap();
        assert_eq!(cfg.params.auto_step_ratio(&cfg.model), 1.0);
        assert_eq!(cfg.max_step().unwrap(), cfg.delta);
    }

    #[test]
    fn overrides_and_comments() {
        let mut m = ConfigMap::defaults();
        m.merge(
            ConfigMap::parse_kv(
                "# comment\nmodel.driver = linear  # trailing\n\ndisc.delta = 0.05\n",
            )
            .unwrap(),
        );
        m.set("disc.h=0.1").unwrap();
        let cfg = RunConfig::from_map(&m).unwrap();
        assert_eq!(cfg.model.driver, DriverSpec::Linear);
        assert_eq!(cfg.step, StepRule::Fixed(0.1));
        assert_eq!(cfg.delta, 0.05);
    }

    #[test]
    fn json_is_flattened() {
        let m = ConfigMap::parse_json(
            r#"{"model": {"mu": 0.1, "driver": "two_rates"}, "study": {"n": [3, 4]}, "scheme": {"cfl_unchecked": true}}"#,
        )
        .unwrap();
        assert_eq!(m.get("model.mu"), Some("0.1"));
        assert_eq!(m.integers("study.n").unwrap(), vec![3, 4]);
        assert!(m.boolean("scheme.cfl_unchecked").unwrap());
        assert!(ConfigMap::parse_json(r#"{"mu": 1}"#).is_err());
        assert!(ConfigMap::parse_json("{").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ConfigMap::parse_kv("nonsense").is_err());
        assert!(ConfigMap::parse_kv("nodot = 1").is_err());
        let mut m = ConfigMap::defaults();
        m.set("model.sigma = abc").unwrap();
        assert!(RunConfig::from_map(&m).is_err());
        let mut m = ConfigMap::defaults();
        m.set("scheme.theta = 0.3").unwrap();
        assert!(RunConfig::from_map(&m).is_err());
        let mut m = ConfigMap::defaults();
        m.set("controls.kind = magic").unwrap();
        assert!(RunConfig::from_map(&m).is_err());
        let mut m = ConfigMap::defaults();
        m.set("output.p_samples = 0.5, 1.5").unwrap();
        assert!(RunConfig::from_map(&m).is_err());
    }

    #[test]
    fn custom_payoff_table() {
        let mut m = ConfigMap::defaults();
        m.set("payoff.table = 2:1, 3:0.5, 4:0").unwrap();
        m.set("payoff.lipschitz = 1").unwrap();
        assert!(RunConfig::from_map(&m).is_err());
        m.set("domain.boundary = frozen").unwrap();
        let cfg = RunConfig::from_map(&m).unwrap();
        assert_eq!(cfg.payoff.eval(2.5), 0.75);
    }

    #[test]
    fn linear_case_sets_delta() {
        let mut m = ConfigMap::defaults();
        m.set("model.driver = linear").unwrap();
        m.set("controls.kind = linear_case").unwrap();
        m.set("controls.n = 3").unwrap();
        let cfg = RunConfig::from_map(&m).unwrap();
        let d = cfg.delta_used().unwrap();
        assert!((d * 9.0 - 2.0 * std::f64::consts::PI * 0.0625).abs() < 1e-15);
        assert_eq!(cfg.control_set().unwrap().len(), 5);
    }
}
