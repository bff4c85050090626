//! Optimal wealth, consumption, portfolio and value for the consumption,
//! terminal-wealth and combined problems under a homogeneous preference
//! structure.
//!
//! Utilities are applied to *discounted* arguments: the objective is
//! `E[int_s^T U1(t, H(s,t) c_t) dt + U2(H(s,T) X_T)]`. The multiplier
//! `Y` solves `X(s, Y) = x - varpi(s, p)` and is fixed at solve time.
//! Discounted consumption `H c = I1(t, Y)` is therefore deterministic.

use std::sync::Arc;

use nalgebra::DVector;

use crate::endowment::{phi_sensitivities, varpi, EndowmentModel, VarPiCache};
use crate::error::{Error, Result};
use crate::market::{MarketSpec, SamplePath};
use crate::numerics::adaptive_simpson;
use crate::preferences::{verify_homogeneity_for, Family, StatePreference};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    /// Utility from consumption and terminal wealth.
    Both,
    ConsumptionOnly,
    TerminalOnly,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Both => "both",
            ProblemKind::ConsumptionOnly => "consumption_only",
            ProblemKind::TerminalOnly => "terminal_only",
        }
    }

    pub fn has_consumption(self) -> bool {
        self != ProblemKind::TerminalOnly
    }

    pub fn has_terminal(self) -> bool {
        self != ProblemKind::ConsumptionOnly
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ProblemKind::Both),
            "consumption_only" => Ok(ProblemKind::ConsumptionOnly),
            "terminal_only" => Ok(ProblemKind::TerminalOnly),
            other => Err(Error::Domain(format!("unknown problem kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Initial wealth strictly above the floor.
    Interior,
    /// Zero consumption, discounted wealth gap held constant.
    Floor,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Interior => "interior",
            Branch::Floor => "floor",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Decision time `s`.
    pub start_time: f64,
    pub homogeneity_tol: f64,
    pub homogeneity_grid: Vec<f64>,
    /// Largest accepted condition number of `sigma sigma'`.
    pub condition_limit: f64,
    /// Interpolated endowment values used along paths instead of direct queries.
    pub cache: Option<Arc<VarPiCache>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            start_time: 0.0,
            homogeneity_tol: 1e-8,
            homogeneity_grid: vec![0.1, 1.0, 10.0, 100.0],
            condition_limit: 1e12,
            cache: None,
        }
    }
}

/// Where a solution map is evaluated: time `t`, stock prices `P(s,t,p)`
/// and deflator `H(s,t,p)`.
#[derive(Debug, Clone, Copy)]
pub struct PathState<'a> {
    pub t: f64,
    pub prices: &'a [f64],
    pub deflator: f64,
}

impl<'a> PathState<'a> {
    pub fn at_node(path: &'a SamplePath, times: &[f64], node: usize) -> Self {
        Self { t: times[node], prices: path.prices_at(node), deflator: path.deflator[node] }
    }
}

/// `Y = X_kind^{-1}(t, x - varpi)`; `FloorRegion` when `x <= varpi`.
pub fn lagrange_multiplier(pref: &StatePreference, varpi_val: f64, x: f64, kind: ProblemKind, t: f64) -> Result<f64> {
    if !x.is_finite() || !varpi_val.is_finite() {
        return Err(Error::NonFinite("wealth or endowment value".into()));
    }
    if x <= varpi_val {
        return Err(Error::FloorRegion { x, floor: varpi_val });
    }
    pref.invert_x_for(kind, t, x - varpi_val)
}

/// `G(s, y)`, `G1` or `G2` depending on `kind`.
pub fn value_function(pref: &StatePreference, kind: ProblemKind, y: f64, s: f64) -> f64 {
    let mut v = 0.0;
    if kind.has_consumption() {
        v += pref.running_value(s, y);
    }
    if kind.has_terminal() {
        v += pref.terminal_value(y);
    }
    v
}

/// `int_s^T U1(t, 0) dt`, the running utility of never consuming.
fn zero_consumption_value(pref: &StatePreference, s: f64) -> f64 {
    let horizon = pref.horizon;
    if s >= horizon {
        return 0.0;
    }
    match &pref.family {
        Family::Power { .. } => 0.0,
        Family::Log => f64::NEG_INFINITY,
        Family::Separable { base } => {
            let u0 = base.value(0.0);
            if u0 == 0.0 {
                0.0
            } else if u0.is_finite() {
                u0 * pref.h.integral(s, horizon)
            } else {
                u0
            }
        }
        Family::Custom(_) => {
            let probe = pref.u1(0.5 * (s + horizon), 0.0);
            if !probe.is_finite() {
                return probe;
            }
            adaptive_simpson(|t| pref.u1(t, 0.0), s, horizon, 1e-12, 20)
        }
    }
}

/// `(sigma sigma')^{-1} (b + delta - r 1)` at `(t, p)`.
pub fn merton_fraction(market: &MarketSpec, t: f64, p: &[f64], condition_limit: f64) -> Result<Vec<f64>> {
    let local = market.coefficients(t, p)?;
    let cov = &local.vol * local.vol.transpose();
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= condition_limit) {
        return Err(Error::SingularCovariance { condition });
    }
    let chol = nalgebra::Cholesky::new(cov).ok_or(Error::SingularCovariance { condition })?;
    let m = chol.solve(&DVector::from_vec(local.excess_return()));
    Ok(m.iter().copied().collect())
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub market: MarketSpec,
    pub pref: StatePreference,
    pub endowment: EndowmentModel,
    pub kind: ProblemKind,
    pub start_time: f64,
    pub x: f64,
    /// Stock prices at the decision time.
    pub p: Vec<f64>,
    /// `varpi(s, p)`, the floor at the decision time.
    pub varpi0: f64,
    /// `Y(s, x, p)`; `None` in the floor branch.
    pub y: Option<f64>,
    pub branch: Branch,
    /// `V(x, p)`, possibly `-inf`.
    pub value: f64,
    pub condition_limit: f64,
    pub cache: Option<Arc<VarPiCache>>,
}

impl Solution {
    fn varpi_at(&self, t: f64, p: &[f64]) -> Result<f64> {
        match &self.cache {
            Some(cache) => Ok(cache.eval(t, p)),
            None => varpi(&self.endowment, &self.market, t, p),
        }
    }

    fn phi_at(&self, t: f64, p: &[f64]) -> Result<Vec<f64>> {
        match &self.cache {
            Some(cache) if !self.endowment.is_price_independent(&self.market) => Ok(cache.phi(t, p)),
            _ => phi_sensitivities(&self.endowment, &self.market, t, p),
        }
    }

    /// Deterministic part of discounted wealth above the floor:
    /// `X_kind(t, Y)` in the interior, `x - varpi(s, p)` on the floor.
    pub fn discounted_surplus(&self, t: f64) -> Result<f64> {
        match self.y {
            Some(y) => self.pref.capital_x_for(self.kind, t, y),
            None => Ok(self.x - self.varpi0),
        }
    }

    /// `H(s,t) c(s,t) = I1(t, Y)`, zero on the floor or without consumption.
    pub fn discounted_consumption(&self, t: f64) -> f64 {
        match self.y {
            Some(y) if self.kind.has_consumption() => self.pref.i1(t, y),
            _ => 0.0,
        }
    }

    pub fn consumption(&self, state: &PathState<'_>) -> f64 {
        self.discounted_consumption(state.t) / state.deflator
    }

    /// `xi = varpi(t, P) + H^{-1} X(t, Y)`.
    pub fn wealth(&self, state: &PathState<'_>) -> Result<f64> {
        let floor = self.varpi_at(state.t, state.prices)?;
        Ok(floor + self.discounted_surplus(state.t)? / state.deflator)
    }

    /// `xi = H^{-1} (Pi + X(t, Y))` from a conditional endowment value
    /// `Pi(s,t,p)` supplied by the caller.
    pub fn wealth_from_conditional(&self, t: f64, deflator: f64, conditional_pi: f64) -> Result<f64> {
        Ok((conditional_pi + self.discounted_surplus(t)?) / deflator)
    }

    /// Amount of wealth held in each stock:
    /// `pi = (xi - varpi - phi_0) M + (phi_1, ..., phi_n)` with
    /// `M = (sigma sigma')^{-1} (b + delta - r 1)`, `varpi <= 0`, `phi_i <= 0`
    /// for nonnegative income.
    pub fn portfolio(&self, state: &PathState<'_>) -> Result<Vec<f64>> {
        let m = merton_fraction(&self.market, state.t, state.prices, self.condition_limit)?;
        let floor = self.varpi_at(state.t, state.prices)?;
        let xi = floor + self.discounted_surplus(state.t)? / state.deflator;
        let phi = self.phi_at(state.t, state.prices)?;
        let exposure = xi - floor - phi[0];
        Ok(m.iter().zip(&phi[1..]).map(|(mi, fi)| exposure * mi + fi).collect())
    }

    /// Bond holding `pi_0 = xi - sum(pi)`.
    pub fn bond_holding(&self, state: &PathState<'_>) -> Result<f64> {
        let xi = self.wealth(state)?;
        Ok(xi - self.portfolio(state)?.iter().sum::<f64>())
    }
}

/// Per-path values of a solution on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathValues {
    pub wealth: Vec<f64>,
    pub consumption: Vec<f64>,
    /// `L = varpi(t, P)`.
    pub floor: Vec<f64>,
    /// `H xi + int_s^t H (c - eps) du`, trapezoidal in time.
    pub budget: Vec<f64>,
}

/// Evaluates a [`Solution`] along simulated paths, with the deterministic
/// parts (surplus, discounted consumption and, when possible, the floor)
/// tabulated once per grid node.
pub struct PathEvaluator<'a> {
    sol: &'a Solution,
    times: Vec<f64>,
    surplus: Vec<f64>,
    discounted_consumption: Vec<f64>,
    floor: Option<Vec<f64>>,
}

impl<'a> PathEvaluator<'a> {
    pub fn new(sol: &'a Solution, times: &[f64]) -> Result<Self> {
        let surplus = times.iter().map(|&t| sol.discounted_surplus(t)).collect::<Result<Vec<_>>>()?;
        let discounted_consumption = times.iter().map(|&t| sol.discounted_consumption(t)).collect();
        let floor = if sol.cache.is_none() && sol.endowment.is_price_independent(&sol.market) {
            Some(times.iter().map(|&t| sol.varpi_at(t, &sol.p)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { sol, times: times.to_vec(), surplus, discounted_consumption, floor })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn floor_at(&self, path: &SamplePath, node: usize) -> Result<f64> {
        match &self.floor {
            Some(f) => Ok(f[node]),
            None => self.sol.varpi_at(self.times[node], path.prices_at(node)),
        }
    }

    pub fn evaluate(&self, path: &SamplePath) -> Result<PathValues> {
        let n = self.times.len();
        if path.n_nodes() != n {
            return Err(Error::Dimension(format!("path has {} nodes, grid has {n}", path.n_nodes())));
        }
        let mut wealth = Vec::with_capacity(n);
        let mut consumption = Vec::with_capacity(n);
        let mut floor = Vec::with_capacity(n);
        let mut net_flow = Vec::with_capacity(n);
        for k in 0..n {
            let h = path.deflator[k];
            let l = self.floor_at(path, k)?;
            floor.push(l);
            wealth.push(l + self.surplus[k] / h);
            consumption.push(self.discounted_consumption[k] / h);
            let income = self.sol.endowment.rate.eval(self.times[k], path.prices_at(k));
            net_flow.push(self.discounted_consumption[k] - h * income);
        }
        let spent = crate::numerics::cumulative_trapezoid(&self.times, &net_flow);
        let budget = (0..n).map(|k| path.deflator[k] * wealth[k] + spent[k]).collect();
        Ok(PathValues { wealth, consumption, floor, budget })
    }

    pub fn portfolio(&self, path: &SamplePath, node: usize) -> Result<Vec<f64>> {
        self.sol.portfolio(&PathState::at_node(path, &self.times, node))
    }
}

/// Rejects preferences whose aggregate demand is not homogeneous.
pub fn homogeneity_gate(pref: &StatePreference, kind: ProblemKind, s: f64, config: &SolveConfig) -> Result<f64> {
    let horizon = pref.horizon;
    let mut worst: f64 = 0.0;
    for frac in [0.25, 0.5, 0.75] {
        let t = s + frac * (horizon - s);
        let dev = verify_homogeneity_for(pref, kind, s, t, &config.homogeneity_grid)?;
        worst = worst.max(dev);
    }
    if !(worst <= config.homogeneity_tol) {
        return Err(Error::NotHomogeneous { deviation: worst });
    }
    Ok(worst)
}

/// Solves the problem of type `kind` from wealth `x` and stock prices `p`
/// at `config.start_time`.
pub fn solve(
    market: &MarketSpec,
    pref: &StatePreference,
    endowment: &EndowmentModel,
    kind: ProblemKind,
    x: f64,
    p: &[f64],
    config: &SolveConfig,
) -> Result<Solution> {
    let s = config.start_time;
    if (pref.horizon - market.horizon).abs() > 1e-12 * market.horizon {
        return Err(Error::Domain(format!(
            "preference horizon {} differs from market horizon {}",
            pref.horizon, market.horizon
        )));
    }
    if !(s >= 0.0 && s < market.horizon) {
        return Err(Error::Domain(format!("start time {s} outside [0, {})", market.horizon)));
    }
    if p.len() != market.n_stocks {
        return Err(Error::Dimension(format!("expected {} prices, got {}", market.n_stocks, p.len())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("initial wealth".into()));
    }
    homogeneity_gate(pref, kind, s, config)?;
    let varpi0 = match &config.cache {
        Some(cache) => cache.eval(s, p),
        None => varpi(endowment, market, s, p)?,
    };
    let base = Solution {
        market: market.clone(),
        pref: pref.clone(),
        endowment: endowment.clone(),
        kind,
        start_time: s,
        x,
        p: p.to_vec(),
        varpi0,
        y: None,
        branch: Branch::Floor,
        value: f64::NEG_INFINITY,
        condition_limit: config.condition_limit,
        cache: config.cache.clone(),
    };
    match lagrange_multiplier(pref, varpi0, x, kind, s) {
        Ok(y) => Ok(Solution { y: Some(y), branch: Branch::Interior, value: value_function(pref, kind, y, s), ..base }),
        Err(Error::FloorRegion { .. }) => {
            let value = if x < varpi0 {
                f64::NEG_INFINITY
            } else {
                let mut v = 0.0;
                if kind.has_consumption() {
                    v += zero_consumption_value(pref, s);
                }
                if kind.has_terminal() && pref.has_terminal() {
                    v += pref.u2(x - varpi0);
                }
                v
            };
            Ok(Solution { value, ..base })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preferences::Weight;
    use approx::assert_relative_eq;

    fn zero_market(horizon: f64) -> MarketSpec {
        MarketSpec::constant(0.0, vec![0.0], vec![vec![0.2]], vec![0.0], vec![1.0, 1.0], horizon).unwrap()
    }

    fn log_pref(c: f64, horizon: f64) -> StatePreference {
        StatePreference::log(Weight::Constant(1.0), c, horizon).unwrap()
    }

    #[test]
    fn multiplier_examples() {
        let y = lagrange_multiplier(&log_pref(0.0, 2.0), 0.0, 1.0, ProblemKind::ConsumptionOnly, 0.0).unwrap();
        assert_relative_eq!(y, 2.0, max_relative = 1e-12);
        let y = lagrange_multiplier(&log_pref(0.0, 1.0), -1.0, 0.5, ProblemKind::ConsumptionOnly, 0.0).unwrap();
        assert_relative_eq!(y, 2.0 / 3.0, max_relative = 1e-12);
        let pref = log_pref(1.0, 1.0);
        let x = pref.capital_x(0.0, 1.0).unwrap();
        assert_relative_eq!(lagrange_multiplier(&pref, 0.0, x, ProblemKind::Both, 0.0).unwrap(), 1.0, max_relative = 1e-12);
        assert!(matches!(
            lagrange_multiplier(&pref, 0.0, 0.0, ProblemKind::Both, 0.0),
            Err(Error::FloorRegion { .. })
        ));
    }

    #[test]
    fn value_examples() {
        let v = value_function(&log_pref(0.0, 2.0), ProblemKind::ConsumptionOnly, 2.0, 0.0);
        assert_relative_eq!(v, 2.0 * 0.5f64.ln(), epsilon = 1e-12);
        let v = value_function(&log_pref(1.0, 1.0), ProblemKind::TerminalOnly, 1.0, 0.0);
        assert_relative_eq!(v, 0.0, epsilon = 1e-15);
        let power = StatePreference::power(0.5, Weight::Constant(1.0), 0.0, 1.0).unwrap();
        assert_relative_eq!(value_function(&power, ProblemKind::ConsumptionOnly, 1.0, 0.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn log_consumption_solution() {
        let m = zero_market(2.0);
        let sol = solve(&m, &log_pref(0.0, 2.0), &EndowmentModel::zero(), ProblemKind::ConsumptionOnly, 1.0, &[1.0], &SolveConfig::default()).unwrap();
        assert_eq!(sol.branch, Branch::Interior);
        assert_relative_eq!(sol.y.unwrap(), 2.0, max_relative = 1e-12);
        for t in [0.0, 0.5, 1.5, 2.0] {
            let st = PathState { t, prices: &[1.0], deflator: 1.0 };
            assert_relative_eq!(sol.consumption(&st), 0.5, max_relative = 1e-12);
            assert_relative_eq!(sol.wealth(&st).unwrap(), 1.0 - t / 2.0, epsilon = 1e-12);
        }
        assert_relative_eq!(sol.value, 2.0 * 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn floor_branch() {
        let m = zero_market(1.0);
        let e = EndowmentModel::constant(1.0);
        let sol = solve(&m, &log_pref(0.0, 1.0), &e, ProblemKind::ConsumptionOnly, -1.5, &[1.0], &SolveConfig::default()).unwrap();
        assert_eq!(sol.branch, Branch::Floor);
        assert_eq!(sol.value, f64::NEG_INFINITY);
        let st = PathState { t: 0.5, prices: &[1.0], deflator: 1.3 };
        assert_eq!(sol.consumption(&st), 0.0);
        // H xi - Pi stays at x - varpi0
        let xi = sol.wealth(&st).unwrap();
        assert_relative_eq!(1.3 * xi - 1.3 * -0.5, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn merton_fraction_is_family_free() {
        let m = MarketSpec::constant(0.01, vec![0.05], vec![vec![0.2]], vec![0.0], vec![1.0, 1.0], 1.0).unwrap();
        let st = PathState { t: 0.3, prices: &[1.1], deflator: 0.9 };
        for pref in [
            StatePreference::power(0.3, Weight::Constant(1.0), 1.0, 1.0).unwrap(),
            log_pref(1.0, 1.0),
        ] {
            let sol = solve(&m, &pref, &EndowmentModel::zero(), ProblemKind::Both, 2.0, &[1.0], &SolveConfig::default()).unwrap();
            let pi = sol.portfolio(&st).unwrap();
            assert_relative_eq!(pi[0] / sol.wealth(&st).unwrap(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let m = MarketSpec::constant(0.0, vec![0.0, 0.0], vec![vec![0.2, 0.0], vec![0.2, 1e-9]], vec![0.0, 0.0], vec![1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(matches!(merton_fraction(&m, 0.0, &[1.0, 1.0], 1e12), Err(Error::SingularCovariance { .. })));
    }
}
