//! Run configuration: TOML sections mapped onto the core types.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;
use optima_core::market::Coef;
use optima_core::{EndowmentModel, MarketSpec, ProblemKind, StatePreference, Utility, VarPiCache, VarPiMode, Weight};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub market: MarketSection,
    pub preference: PreferenceSection,
    #[serde(default)]
    pub endowment: EndowmentSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub n_stocks: usize,
    pub n_brownian: usize,
    pub rate: String,
    /// One coefficient per stock.
    pub drift: Vec<String>,
    /// `n_stocks` rows of `n_brownian` coefficients.
    pub vol: Vec<Vec<String>>,
    pub dividend: Option<Vec<String>>,
    /// `(p_0, p_1, ..., p_n)`.
    pub initial_prices: Vec<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSection {
    pub family: String,
    pub alpha: Option<f64>,
    /// Base utility of the separable family: "log" or "power".
    pub base: Option<String>,
    #[serde(default = "default_h")]
    pub h: String,
    #[serde(default)]
    pub bequest: f64,
}

fn default_h() -> String {
    "constant:1".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndowmentSection {
    pub kind: String,
    pub rate: Option<String>,
    pub mode: Option<String>,
    pub mc_inner_paths: usize,
    pub mc_inner_steps: usize,
    pub mc_seed: u64,
    pub cache: Option<CacheSection>,
}

impl Default for EndowmentSection {
    fn default() -> Self {
        Self {
            kind: "zero".into(),
            rate: None,
            mode: None,
            mc_inner_paths: optima_core::endowment::DEFAULT_INNER_PATHS,
            mc_inner_steps: optima_core::endowment::DEFAULT_INNER_STEPS,
            mc_seed: 0,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub times: usize,
    pub log_nodes: usize,
    /// Half-width of the `log p` range around the initial prices.
    pub log_halfwidth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: String,
    pub x: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSection {
    pub homogeneity: f64,
    pub condition: f64,
    pub z_crit: f64,
    pub oracle: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        Self { homogeneity: 1e-8, condition: 1e12, z_crit: optima_core::verify::DEFAULT_Z_CRIT, oracle: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Path CSV used for the path-based checks instead of a fresh simulation.
    pub paths_file: Option<PathBuf>,
    /// Adds `bias * t` to the budget series (seeded violation).
    #[serde(default)]
    pub inject_bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub periods: Vec<usize>,
    pub p_up: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { periods: vec![1, 2, 4], p_up: 0.5 }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok((cfg, text))
    }

    pub fn problem_kind(&self) -> Result<ProblemKind, ConfigError> {
        self.problem.kind.parse().map_err(|e: optima_core::Error| field_err("problem.kind", e.to_string()))
    }

    pub fn market(&self) -> Result<MarketSpec, ConfigError> {
        let m = &self.market;
        let n = m.n_stocks;
        let d = m.n_brownian;
        if m.drift.len() != n {
            return Err(field_err("market.drift", format!("expected {n} entries, got {}", m.drift.len())));
        }
        if m.vol.len() != n || m.vol.iter().any(|row| row.len() != d) {
            return Err(field_err("market.vol", format!("expected {n} rows of {d} entries")));
        }
        let rate = parse_time("market.rate", &m.rate)?;
        let drift = m.drift.iter().map(|s| parse_time("market.drift", s)).collect::<Result<Vec<_>, _>>()?;
        let dividend = match &m.dividend {
            Some(v) if v.len() != n => return Err(field_err("market.dividend", format!("expected {n} entries, got {}", v.len()))),
            Some(v) => v.iter().map(|s| parse_time("market.dividend", s)).collect::<Result<Vec<_>, _>>()?,
            None => vec![Weight::Constant(0.0); n],
        };
        let vol: Vec<Weight> =
            m.vol.iter().flatten().map(|s| parse_time("market.vol", s)).collect::<Result<Vec<_>, _>>()?;

        let rate_coef = match rate {
            Weight::Constant(v) => Coef::Constant(v),
            w => Coef::time(move |t| w.eval(t)),
        };
        let all_constant = |ws: &[Weight]| ws.iter().all(|w| matches!(w, Weight::Constant(_)));
        let vec_coef = |ws: Vec<Weight>| {
            if all_constant(&ws) {
                Coef::Constant(ws.iter().map(|w| w.eval(0.0)).collect())
            } else {
                Coef::time(move |t| ws.iter().map(|w| w.eval(t)).collect())
            }
        };
        let vol_coef = if all_constant(&vol) {
            Coef::Constant(DMatrix::from_row_iterator(n, d, vol.iter().map(|w| w.eval(0.0))))
        } else {
            Coef::time(move |t| DMatrix::from_row_iterator(n, d, vol.iter().map(|w| w.eval(t))))
        };
        MarketSpec::new(n, d, rate_coef, vec_coef(drift), vol_coef, vec_coef(dividend), m.initial_prices.clone(), m.horizon)
            .map_err(|e| field_err("market", e.to_string()))
    }

    pub fn preference(&self) -> Result<StatePreference, ConfigError> {
        let p = &self.preference;
        let h = parse_time("preference.h", &p.h)?;
        let horizon = self.market.horizon;
        let alpha = || p.alpha.ok_or_else(|| field_err("preference.alpha", "required for this family"));
        let built = match p.family.as_str() {
            "log" => StatePreference::log(h, p.bequest, horizon),
            "power" => StatePreference::power(alpha()?, h, p.bequest, horizon),
            "separable" => {
                let base = match p.base.as_deref() {
                    Some("log") => Utility::log(),
                    Some("power") => Utility::crra(alpha()?),
                    other => return Err(field_err("preference.base", format!("expected \"log\" or \"power\", got {other:?}"))),
                };
                StatePreference::separable(base, h, p.bequest, horizon)
            }
            other => return Err(field_err("preference.family", format!("unknown family '{other}'"))),
        };
        built.map_err(|e| field_err("preference", e.to_string()))
    }

    pub fn endowment(&self) -> Result<EndowmentModel, ConfigError> {
        let e = &self.endowment;
        let rate = || e.rate.as_deref().ok_or_else(|| field_err("endowment.rate", "required for this kind"));
        let mut model = match e.kind.as_str() {
            "zero" => EndowmentModel::zero(),
            "deterministic" => {
                let w = parse_time("endowment.rate", rate()?)?;
                EndowmentModel::deterministic(move |t| w.eval(t))
            }
            "markov" => {
                let (stock, coef) = parse_linear_in(rate()?, self.market.n_stocks)?;
                EndowmentModel::linear_in(stock, coef)
            }
            other => return Err(field_err("endowment.kind", format!("unknown kind '{other}'"))),
        };
        model = model.with_monte_carlo(e.mc_inner_paths, e.mc_inner_steps, e.mc_seed);
        match e.mode.as_deref() {
            None => {}
            Some("closed_form") => model = model.with_mode(VarPiMode::ClosedForm),
            Some("monte_carlo") => model = model.with_mode(VarPiMode::MonteCarlo),
            Some(other) => return Err(field_err("endowment.mode", format!("unknown mode '{other}'"))),
        }
        Ok(model)
    }

    /// Interpolation grid for the endowment value, when configured.
    pub fn cache(&self, model: &EndowmentModel, market: &MarketSpec) -> Result<Option<Arc<VarPiCache>>, optima_core::Error> {
        let Some(c) = &self.endowment.cache else {
            return Ok(None);
        };
        let horizon = market.horizon;
        let times: Vec<f64> = (0..c.times.max(2)).map(|k| horizon * k as f64 / (c.times.max(2) - 1) as f64).collect();
        let nodes = market
            .stock_prices0()
            .iter()
            .map(|p| {
                let m = c.log_nodes.max(2);
                (0..m).map(|k| p.ln() - c.log_halfwidth + 2.0 * c.log_halfwidth * k as f64 / (m - 1) as f64).collect()
            })
            .collect();
        VarPiCache::build(model, market, &times, nodes).map(|c| Some(Arc::new(c)))
    }
}

/// `constant:v`, `poly:c0,c1,...` (in `t`) or `table:t0:v0,t1:v1,...`.
pub fn parse_time(field: &str, s: &str) -> Result<Weight, ConfigError> {
    let bad = |msg: &str| field_err(field, format!("{msg} in '{s}'"));
    let (kind, body) = s.split_once(':').ok_or_else(|| bad("expected kind:values"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("invalid number"));
    match kind.trim() {
        "constant" => Ok(Weight::Constant(num(body)?)),
        "poly" => Ok(Weight::Poly(body.split(',').map(num).collect::<Result<_, _>>()?)),
        "table" => {
            let pts = body
                .split(',')
                .map(|pair| {
                    let (t, v) = pair.split_once(':').ok_or_else(|| bad("table entries are t:value"))?;
                    Ok((num(t)?, num(v)?))
                })
                .collect::<Result<Vec<_>, ConfigError>>()?;
            if pts.is_empty() || pts.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(bad("table times must increase"));
            }
            Ok(Weight::Table(pts))
        }
        _ => Err(bad("unknown coefficient kind")),
    }
}

/// `linear_in:P<i>,coef`: income `coef * P_i`.
fn parse_linear_in(s: &str, n_stocks: usize) -> Result<(usize, f64), ConfigError> {
    let bad = |msg: &str| field_err("endowment.rate", format!("{msg} in '{s}'"));
    let body = s.strip_prefix("linear_in:").ok_or_else(|| bad("markov income must be linear_in:P<i>,coef"))?;
    let (asset, coef) = body.split_once(',').ok_or_else(|| bad("expected P<i>,coef"))?;
    let index: usize = asset.trim().strip_prefix('P').and_then(|i| i.parse().ok()).ok_or_else(|| bad("expected P<i>"))?;
    if index == 0 || index > n_stocks {
        return Err(bad("stock index out of range"));
    }
    let coef: f64 = coef.trim().parse().map_err(|_| bad("invalid coefficient"))?;
    if coef < 0.0 {
        return Err(bad("income must be nonnegative"));
    }
    Ok((index - 1, coef))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_strings() {
        assert_eq!(parse_time("f", "constant:0.5").unwrap(), Weight::Constant(0.5));
        assert_eq!(parse_time("f", "poly:1, 0.5").unwrap(), Weight::Poly(vec![1.0, 0.5]));
        assert_eq!(parse_time("f", "table:0:1,1:2").unwrap(), Weight::Table(vec![(0.0, 1.0), (1.0, 2.0)]));
        assert!(parse_time("f", "table:1:1,0:2").is_err());
        assert!(parse_time("f", "spline:1").is_err());
        assert!(parse_time("f", "constant:abc").is_err());
        assert_eq!(parse_linear_in("linear_in:P1,0.5", 1).unwrap(), (0, 0.5));
        assert!(parse_linear_in("linear_in:P2,0.5", 1).is_err());
    }
}
