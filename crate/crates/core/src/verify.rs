//! Statistical diagnostics and independent oracles.
//!
//! * martingale and one-sided supermartingale tests on per-path series
//! * self-financing wealth replay and the admissibility (feasibility) bound
//! * a brute-force binomial oracle for the discounted-utility problem
//! * the explicit wealth `X = L + (x - L(s,s)) / H`

use crate::endowment::{varpi, EndowmentModel, EndowmentRate};
use crate::error::{Error, Result};
use crate::market::{MarketSpec, SamplePath};
use crate::numerics::{cumulative_trapezoid, invert_decreasing, RootOptions, SampleStats};
use crate::optimizer::ProblemKind;
use crate::preferences::StatePreference;

pub const DEFAULT_Z_CRIT: f64 = 3.5;
/// Smallest standard error used in z statistics, relative to `max(1, |reference|)`.
/// Deterministic series have zero sample variance.
pub const SE_FLOOR: f64 = 1e-12;
pub const MAX_BINOMIAL_PERIODS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub reference: f64,
    pub max_z: f64,
    pub z_crit: f64,
    pub pass: bool,
}

impl MartingaleReport {
    pub fn verdict(&self) -> &'static str {
        if self.pass {
            "pass"
        } else {
            "fail"
        }
    }
}

fn column(samples: &[Vec<f64>], node: usize) -> Vec<f64> {
    samples.iter().map(|s| s[node]).collect()
}

fn check_samples(times: &[f64], samples: &[Vec<f64>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Domain("no sample paths".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != times.len()) {
        return Err(Error::Dimension(format!("series of length {} on a grid of {}", bad.len(), times.len())));
    }
    Ok(())
}

fn effective_se(se: f64, reference: f64) -> f64 {
    se.max(SE_FLOOR * reference.abs().max(1.0))
}

/// Per-time means of path-major `samples` compared against `reference`.
pub fn martingale_test(times: &[f64], samples: &[Vec<f64>], reference: f64, z_crit: f64) -> Result<MartingaleReport> {
    check_samples(times, samples)?;
    let mut means = Vec::with_capacity(times.len());
    let mut std_errors = Vec::with_capacity(times.len());
    let mut max_z: f64 = 0.0;
    for k in 0..times.len() {
        let stats = SampleStats::from_samples(&column(samples, k));
        let se = stats.std_error();
        let z = (stats.mean - reference).abs() / effective_se(se, reference);
        max_z = if z.is_nan() { f64::INFINITY } else { max_z.max(z) };
        means.push(stats.mean);
        std_errors.push(se);
    }
    Ok(MartingaleReport { times: times.to_vec(), means, std_errors, reference, max_z, z_crit, pass: max_z <= z_crit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Supermartingale: means must not rise.
    NonIncreasing,
    /// Submartingale: means must not fall.
    NonDecreasing,
}

/// One-sided test of `E[Y_t] <= E[Y_0]` (or `>=`), using per-path
/// increments `Y_t - Y_0`. `reference` in the report is the mean of `Y_0`.
pub fn supermartingale_test(times: &[f64], samples: &[Vec<f64>], direction: Direction, z_crit: f64) -> Result<MartingaleReport> {
    check_samples(times, samples)?;
    let start = SampleStats::from_samples(&column(samples, 0)).mean;
    let sign = match direction {
        Direction::NonIncreasing => 1.0,
        Direction::NonDecreasing => -1.0,
    };
    let mut means = Vec::with_capacity(times.len());
    let mut std_errors = Vec::with_capacity(times.len());
    let mut max_z = f64::NEG_INFINITY;
    for k in 0..times.len() {
        let diffs: Vec<f64> = samples.iter().map(|s| s[k] - s[0]).collect();
        let stats = SampleStats::from_samples(&diffs);
        let se = stats.std_error();
        let z = sign * stats.mean / effective_se(se, start);
        max_z = if z.is_nan() { f64::INFINITY } else { max_z.max(z) };
        means.push(start + stats.mean);
        std_errors.push(se);
    }
    Ok(MartingaleReport { times: times.to_vec(), means, std_errors, reference: start, max_z, z_crit, pass: max_z <= z_crit })
}

/// `H(s,t) L(s,t) - int_s^t H eps du` along one path. A martingale for
/// consistent income.
pub fn floor_process(model: &EndowmentModel, market: &MarketSpec, path: &SamplePath, times: &[f64]) -> Result<Vec<f64>> {
    let fixed = if model.is_price_independent(market) {
        Some(times.iter().map(|&t| varpi(model, market, t, market.stock_prices0())).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(times.len());
    let mut flow = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let p = path.prices_at(k);
        let l = match &fixed {
            Some(f) => f[k],
            None => varpi(model, market, t, p)?,
        };
        out.push(path.deflator[k] * l);
        flow.push(path.deflator[k] * model.rate.eval(t, p));
    }
    let received = cumulative_trapezoid(times, &flow);
    Ok(out.iter().zip(received).map(|(a, b)| a - b).collect())
}

/// Decisions of a trading strategy at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Consumption rate over the next step (may be negative for a seeded violation).
    pub consumption: f64,
    /// Wealth held in each stock.
    pub holdings: Vec<f64>,
}

/// Self-financing wealth along a path. At each node the step's income and
/// consumption (left-endpoint rates times `dt`) are settled, `holdings` go
/// into the stocks (collecting dividends) and the rest into the bond. With
/// this timing `H X + sum H (c - eps) dt` is an exact discrete martingale.
pub fn replay_wealth<F>(market: &MarketSpec, income: &EndowmentRate, path: &SamplePath, times: &[f64], x: f64, strategy: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize, f64) -> Result<Decision>,
{
    let n = market.n_stocks;
    let mut wealth = Vec::with_capacity(times.len());
    let mut consumption = Vec::with_capacity(times.len());
    let mut w = x;
    for k in 0..times.len() {
        wealth.push(w);
        if k + 1 == times.len() {
            consumption.push(strategy(k, w)?.consumption);
            break;
        }
        let decision = strategy(k, w)?;
        if decision.holdings.len() != n {
            return Err(Error::Dimension(format!("strategy returned {} holdings for {n} stocks", decision.holdings.len())));
        }
        let dt = times[k + 1] - times[k];
        let p_now = path.prices_at(k);
        let p_next = path.prices_at(k + 1);
        let dividend = market.coefficients(times[k], p_now)?.dividend;
        let bond_return = path.bond[k + 1] / path.bond[k] - 1.0;
        let mut gain = 0.0;
        let mut in_stock = 0.0;
        for i in 0..n {
            gain += decision.holdings[i] * (p_next[i] / p_now[i] - 1.0 + dividend[i] * dt);
            in_stock += decision.holdings[i];
        }
        let net_flow = (income.eval(times[k], p_now) - decision.consumption) * dt;
        gain += (w + net_flow - in_stock) * bond_return;
        w += gain + net_flow;
        consumption.push(decision.consumption);
    }
    Ok((wealth, consumption))
}

/// `H(s,T) L(s,T) + int_s^T H (c - eps) du` for one path.
pub fn strategy_cost(times: &[f64], deflator: &[f64], consumption: &[f64], income: &[f64], terminal_floor: f64) -> f64 {
    let flow: Vec<f64> = (0..times.len()).map(|k| deflator[k] * (consumption[k] - income[k])).collect();
    let spent = cumulative_trapezoid(times, &flow);
    deflator[times.len() - 1] * terminal_floor + spent[times.len() - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub x: f64,
    pub mean_cost: f64,
    pub std_error: f64,
    pub z: f64,
    pub pass: bool,
}

/// Admissibility bound `x >= E[H L(T) + int H (c - eps)]`, one-sided at `z_crit`.
pub fn feasibility_check(x: f64, costs: &[f64], z_crit: f64) -> FeasibilityReport {
    let stats = SampleStats::from_samples(costs);
    let se = stats.std_error();
    let z = (stats.mean - x) / effective_se(se, x);
    FeasibilityReport { x, mean_cost: stats.mean, std_error: se, z, pass: z <= z_crit }
}

/// `X = L + (x - L(s,s)) / H` pathwise, from path-major floor and deflator
/// samples whose first column is the decision time.
pub fn existence_construction(floor: &[Vec<f64>], x: f64, deflator: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if floor.len() != deflator.len() {
        return Err(Error::Dimension("floor and deflator sample counts differ".into()));
    }
    floor
        .iter()
        .zip(deflator)
        .map(|(l, h)| {
            if l.len() != h.len() || l.is_empty() {
                return Err(Error::Dimension("floor and deflator series lengths differ".into()));
            }
            if x < l[0] {
                return Err(Error::FloorRegion { x, floor: l[0] });
            }
            Ok(l.iter().zip(h).map(|(li, hi)| li + (x - l[0]) / hi).collect())
        })
        .collect()
}

/// Recombining-free binomial market with one stock and a bond, small
/// enough to enumerate every path.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomialMarket {
    pub n_periods: usize,
    pub horizon: f64,
    pub rate: f64,
    pub up: f64,
    pub down: f64,
    /// Physical probability of an up move.
    pub p_up: f64,
}

impl BinomialMarket {
    pub fn new(n_periods: usize, horizon: f64, rate: f64, up: f64, down: f64, p_up: f64) -> Result<Self> {
        if n_periods == 0 || n_periods > MAX_BINOMIAL_PERIODS {
            return Err(Error::Domain(format!("binomial oracle supports 1..={MAX_BINOMIAL_PERIODS} periods, got {n_periods}")));
        }
        if !(horizon > 0.0) || !(p_up > 0.0 && p_up < 1.0) || !(up > down && down > 0.0) {
            return Err(Error::Domain("binomial market needs T > 0, 0 < p < 1 and 0 < d < u".into()));
        }
        let m = Self { n_periods, horizon, rate, up, down, p_up };
        let q = m.risk_neutral_up();
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("binomial market admits arbitrage (q = {q})")));
        }
        Ok(m)
    }

    /// Tree matching volatility `sigma`: `u = exp(sigma sqrt(dt))`, `d = 1/u`.
    pub fn from_volatility(n_periods: usize, horizon: f64, rate: f64, sigma: f64, p_up: f64) -> Result<Self> {
        let dt = horizon / n_periods.max(1) as f64;
        let up = (sigma * dt.sqrt()).exp();
        Self::new(n_periods, horizon, rate, up, 1.0 / up, p_up)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_periods as f64
    }

    pub fn risk_neutral_up(&self) -> f64 {
        ((self.rate * self.dt()).exp() - self.down) / (self.up - self.down)
    }

    /// State price density after `k` steps with `j` up moves.
    pub fn deflator(&self, k: usize, j: usize) -> f64 {
        let q = self.risk_neutral_up();
        let p = self.p_up;
        (-self.rate * self.dt() * k as f64).exp() * (q / p).powi(j as i32) * ((1.0 - q) / (1.0 - p)).powi((k - j) as i32)
    }

    /// Every node of the (non-recombining) tree as `(k, ups, probability)`.
    pub fn nodes(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for k in 0..=self.n_periods {
            for bits in 0..(1usize << k) {
                let j = bits.count_ones() as usize;
                let prob = self.p_up.powi(j as i32) * (1.0 - self.p_up).powi((k - j) as i32);
                out.push((k, j, prob));
            }
        }
        out
    }

    /// Largest `|E[H_k S_k] - S_0|` over periods, with `S_0 = 1`.
    pub fn pricing_error(&self) -> f64 {
        let mut acc = vec![0.0; self.n_periods + 1];
        for (k, j, prob) in self.nodes() {
            let s = self.up.powi(j as i32) * self.down.powi((k - j) as i32);
            acc[k] += prob * self.deflator(k, j) * s;
        }
        acc.iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub multiplier: f64,
    pub value: f64,
    /// Discounted consumption `H c` in each period.
    pub discounted_consumption: Vec<f64>,
    /// Discounted terminal wealth `H X_T`.
    pub discounted_terminal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Scalar-multiplier solution of the collapsed problem.
    pub collapsed: OracleSolution,
    /// Objective of the full per-node program.
    pub node_value: f64,
    pub node_multiplier: f64,
    /// Largest spread of `H c` across nodes of one period.
    pub node_spread: f64,
}

fn periods(bin: &BinomialMarket) -> Vec<f64> {
    (0..bin.n_periods).map(|k| k as f64 * bin.dt()).collect()
}

/// `max sum_k dt U1(t_k, H c_k) + U2(H X_T)` subject to the state-price
/// budget, with zero income. Solved by a scalar multiplier on the collapsed
/// problem `sum_k dt I1(t_k, y) + I2(y) = x`, and again as a per-node
/// program with numerical marginals.
pub fn binomial_oracle(bin: &BinomialMarket, pref: &StatePreference, kind: ProblemKind, x: f64) -> Result<OracleReport> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("oracle wealth must be positive, got {x}")));
    }
    if (pref.horizon - bin.horizon).abs() > 1e-12 * bin.horizon {
        return Err(Error::Domain("preference and tree horizons differ".into()));
    }
    if kind == ProblemKind::TerminalOnly && !pref.has_terminal() {
        return Err(Error::Domain("terminal-wealth problem needs a terminal utility".into()));
    }
    let times = periods(bin);
    let dt = bin.dt();
    let uses_terminal = kind.has_terminal() && pref.has_terminal();
    let uses_running = kind.has_consumption();

    let demand = |y: f64| {
        let running: f64 = if uses_running { times.iter().map(|&t| dt * pref.i1(t, y)).sum() } else { 0.0 };
        running + if uses_terminal { pref.i2(y) } else { 0.0 }
    };
    let y = invert_decreasing(demand, x, RootOptions { rel_tol: 1e-13, ..RootOptions::default() })?;
    let discounted_consumption: Vec<f64> = times.iter().map(|&t| if uses_running { pref.i1(t, y) } else { 0.0 }).collect();
    let discounted_terminal = if uses_terminal { pref.i2(y) } else { 0.0 };
    let mut value = 0.0;
    if uses_running {
        value += times.iter().zip(&discounted_consumption).map(|(&t, &z)| dt * pref.u1(t, z)).sum::<f64>();
    }
    if uses_terminal {
        value += pref.u2(discounted_terminal);
    }
    let collapsed = OracleSolution { multiplier: y, value, discounted_consumption, discounted_terminal };

    let nodes = bin.nodes();
    // fourth-order central difference
    let fd_marginal = |u: &dyn Fn(f64) -> f64, z: f64| {
        let h = 1e-3 * z;
        (8.0 * (u(z + h) - u(z - h)) - (u(z + 2.0 * h) - u(z - 2.0 * h))) / (12.0 * h)
    };
    let node_opts = RootOptions { rel_tol: 1e-10, ..RootOptions::default() };
    // Each node solves U'(H c) = y for its own amount c; budget is then
    // matched by the outer multiplier.
    let node_plan = |y: f64| -> Result<(Vec<f64>, f64)> {
        let mut amounts = Vec::with_capacity(nodes.len());
        let mut budget = 0.0;
        for &(k, j, prob) in &nodes {
            let h = bin.deflator(k, j);
            let amount = if k < bin.n_periods && uses_running {
                let t = times[k];
                let u = |z: f64| pref.u1(t, z);
                let z = invert_decreasing(|z| fd_marginal(&u, z), y, node_opts)?;
                let c = z / h;
                budget += prob * dt * h * c;
                c
            } else if k == bin.n_periods && uses_terminal {
                let u = |z: f64| pref.u2(z);
                let z = invert_decreasing(|z| fd_marginal(&u, z), y, node_opts)?;
                let w = z / h;
                budget += prob * h * w;
                w
            } else {
                0.0
            };
            amounts.push(amount);
        }
        Ok((amounts, budget))
    };
    let node_y = invert_decreasing(
        |y| node_plan(y).map(|(_, b)| b).unwrap_or(f64::NAN),
        x,
        node_opts,
    )?;
    let (amounts, _) = node_plan(node_y)?;
    let mut node_value = 0.0;
    let mut spread_min = vec![f64::INFINITY; bin.n_periods + 1];
    let mut spread_max = vec![f64::NEG_INFINITY; bin.n_periods + 1];
    for (&(k, j, prob), &a) in nodes.iter().zip(&amounts) {
        let h = bin.deflator(k, j);
        if k < bin.n_periods && uses_running {
            node_value += prob * dt * pref.u1(times[k], h * a);
        } else if k == bin.n_periods && uses_terminal {
            node_value += prob * pref.u2(h * a);
        } else {
            continue;
        }
        spread_min[k] = spread_min[k].min(h * a);
        spread_max[k] = spread_max[k].max(h * a);
    }
    let node_spread = spread_min
        .iter()
        .zip(&spread_max)
        .filter(|(lo, _)| lo.is_finite())
        .map(|(lo, hi)| (hi - lo) / hi.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(OracleReport { collapsed, node_value, node_multiplier: node_y, node_spread })
}
