//! Labour-income model and the present value of future endowments.
//!
//! `varpi(t, p) = -E[ int_t^T H(t,u,p) eps(u, P(t,u,p)) du ]` is the
//! (negated) value of the income still to be received. Along a path
//! started at `s`, the minimal wealth floor is `L(s,t,p) = varpi(t, P(s,t,p))`
//! and the conditional value is `Pi(s,t,p) = H(s,t,p) varpi(t, P(s,t,p))`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::market::{path_noise, MarketSpec, PathBundle, PathSimulator, TimeGrid};
use crate::numerics::{adaptive_simpson, trapezoid, Estimate};

pub const DEFAULT_INNER_PATHS: usize = 20_000;
pub const DEFAULT_INNER_STEPS: usize = 50;
/// Relative bump for the log-price sensitivities.
pub const PHI_BUMP: f64 = 1e-3;

/// Endowment rate `eps >= 0`, wealth per unit time.
#[derive(Clone)]
pub enum EndowmentRate {
    Zero,
    Deterministic(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Depends on time and the stock prices.
    Markov(Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>),
}

impl EndowmentRate {
    pub fn eval(&self, t: f64, p: &[f64]) -> f64 {
        match self {
            EndowmentRate::Zero => 0.0,
            EndowmentRate::Deterministic(f) => f(t),
            EndowmentRate::Markov(f) => f(t, p),
        }
    }
}

impl fmt::Debug for EndowmentRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndowmentRate::Zero => "Zero",
            EndowmentRate::Deterministic(_) => "Deterministic(<fn>)",
            EndowmentRate::Markov(_) => "Markov(<fn>)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarPiMode {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct EndowmentModel {
    pub rate: EndowmentRate,
    pub mc_inner_paths: usize,
    pub mc_inner_steps: usize,
    pub mc_seed: u64,
    /// Forces an evaluation mode; `None` picks the closed form when available.
    pub mode: Option<VarPiMode>,
    pub exec: ExecMode,
}

impl EndowmentModel {
    fn with_rate(rate: EndowmentRate) -> Self {
        Self {
            rate,
            mc_inner_paths: DEFAULT_INNER_PATHS,
            mc_inner_steps: DEFAULT_INNER_STEPS,
            mc_seed: 0,
            mode: None,
            exec: ExecMode::Parallel,
        }
    }

    pub fn zero() -> Self {
        Self::with_rate(EndowmentRate::Zero)
    }

    pub fn deterministic<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::with_rate(EndowmentRate::Deterministic(Arc::new(f)))
    }

    pub fn constant(rate: f64) -> Self {
        Self::deterministic(move |_| rate)
    }

    pub fn markov<F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::with_rate(EndowmentRate::Markov(Arc::new(f)))
    }

    /// `eps(t, p) = coef * p_stock` (stock index is zero-based).
    pub fn linear_in(stock: usize, coef: f64) -> Self {
        Self::markov(move |_, p| coef * p[stock])
    }

    pub fn with_monte_carlo(mut self, inner_paths: usize, inner_steps: usize, seed: u64) -> Self {
        self.mc_inner_paths = inner_paths;
        self.mc_inner_steps = inner_steps;
        self.mc_seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: VarPiMode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.rate, EndowmentRate::Zero)
    }

    /// Mode actually used against `market`.
    pub fn resolve_mode(&self, market: &MarketSpec) -> Result<VarPiMode> {
        let closed_available = match self.rate {
            EndowmentRate::Zero => true,
            EndowmentRate::Deterministic(_) => market.has_deterministic_rate(),
            EndowmentRate::Markov(_) => false,
        };
        match self.mode {
            Some(VarPiMode::ClosedForm) if !closed_available => Err(Error::Domain(
                "closed-form endowment value needs a deterministic income and interest rate".into(),
            )),
            Some(mode) => Ok(mode),
            None if closed_available => Ok(VarPiMode::ClosedForm),
            None => Ok(VarPiMode::MonteCarlo),
        }
    }

    /// True when `varpi(t, p)` does not depend on `p`.
    pub fn is_price_independent(&self, market: &MarketSpec) -> bool {
        match self.rate {
            EndowmentRate::Zero => true,
            EndowmentRate::Deterministic(_) => market.has_deterministic_rate(),
            EndowmentRate::Markov(_) => false,
        }
    }

    fn inner_grid(&self, t: f64, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::uniform(t, horizon, self.mc_inner_steps.max(1))
    }

    /// `int_t^T H(t,u) eps(u, P(t,u)) du` per inner path, for each start
    /// point. All start points share the same Gaussian increments.
    fn pathwise_integrals(&self, market: &MarketSpec, t: f64, starts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let grid = self.inner_grid(t, market.horizon)?;
        let sim = PathSimulator::new(market, &grid)?;
        let d = market.n_brownian;
        let times = grid.times().to_vec();
        let per_path = map_indexed(self.mc_inner_paths, self.exec, |k| {
            let noise = path_noise(self.mc_seed, k as u64, grid.n_steps(), d);
            starts
                .iter()
                .map(|p| {
                    let path = sim.simulate(p, &noise)?;
                    let integrand: Vec<f64> = (0..path.n_nodes())
                        .map(|j| path.deflator[j] * self.rate.eval(times[j], path.prices_at(j)))
                        .collect();
                    Ok(trapezoid(&times, &integrand))
                })
                .collect::<Result<Vec<f64>>>()
        });
        per_path.into_iter().collect()
    }

    fn closed_form(&self, market: &MarketSpec, t: f64) -> f64 {
        let horizon = market.horizon;
        let p0 = market.stock_prices0();
        let eps = |u: f64| self.rate.eval(u, p0);
        let discount: Box<dyn Fn(f64) -> f64> = match &market.rate {
            crate::market::Coef::Constant(r) => {
                let r = *r;
                Box::new(move |u: f64| (-r * (u - t)).exp())
            }
            rate => Box::new(move |u: f64| (-adaptive_simpson(|v| rate.eval(v, p0), t, u, 1e-14, 30)).exp()),
        };
        -adaptive_simpson(|u| eps(u) * discount(u), t, horizon, 1e-14, 30)
    }
}

fn check_point(market: &MarketSpec, t: f64, p: &[f64]) -> Result<()> {
    if !(t >= 0.0 && t <= market.horizon) {
        return Err(Error::Domain(format!("time {t} outside [0, {}]", market.horizon)));
    }
    if p.len() != market.n_stocks || p.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Domain("price vector must have one positive entry per stock".into()));
    }
    Ok(())
}

/// `varpi(t, p)` with its Monte Carlo standard error (zero in closed form).
pub fn varpi_estimate(model: &EndowmentModel, market: &MarketSpec, t: f64, p: &[f64]) -> Result<Estimate> {
    check_point(market, t, p)?;
    if model.is_zero() || t >= market.horizon {
        return Ok(Estimate::exact(0.0));
    }
    let est = match model.resolve_mode(market)? {
        VarPiMode::ClosedForm => Estimate::exact(model.closed_form(market, t)),
        VarPiMode::MonteCarlo => {
            let samples: Vec<f64> = model.pathwise_integrals(market, t, &[p.to_vec()])?.into_iter().map(|v| -v[0]).collect();
            Estimate::from_samples(&samples)
        }
    };
    if !est.mean.is_finite() {
        return Err(Error::NonFinite(format!("endowment value at t={t}")));
    }
    Ok(est)
}

/// Present value of future endowments, negated (`<= 0`).
pub fn varpi(model: &EndowmentModel, market: &MarketSpec, t: f64, p: &[f64]) -> Result<f64> {
    varpi_estimate(model, market, t, p).map(|e| e.mean)
}

/// `phi_i = p_i d varpi / d p_i` with standard errors, index 0 being the
/// deflating asset (identically zero here: `varpi` is built from `H`, not
/// from a simulated `P_0`). Central differences with relative bump
/// [`PHI_BUMP`] and common random numbers.
pub fn phi_estimates(model: &EndowmentModel, market: &MarketSpec, t: f64, p: &[f64]) -> Result<Vec<Estimate>> {
    check_point(market, t, p)?;
    let n = market.n_stocks;
    let mut out = vec![Estimate::exact(0.0); n + 1];
    if model.is_price_independent(market) || t >= market.horizon {
        return Ok(out);
    }
    let mut starts = Vec::with_capacity(2 * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut q = p.to_vec();
            q[i] *= 1.0 + sign * PHI_BUMP;
            starts.push(q);
        }
    }
    let integrals = model.pathwise_integrals(market, t, &starts)?;
    for i in 0..n {
        // varpi = -integral
        let diffs: Vec<f64> = integrals.iter().map(|v| -(v[2 * i] - v[2 * i + 1]) / (2.0 * PHI_BUMP)).collect();
        out[i + 1] = Estimate::from_samples(&diffs);
        if !out[i + 1].mean.is_finite() {
            return Err(Error::NonFinite(format!("endowment sensitivity {i} at t={t}")));
        }
    }
    Ok(out)
}

pub fn phi_sensitivities(model: &EndowmentModel, market: &MarketSpec, t: f64, p: &[f64]) -> Result<Vec<f64>> {
    Ok(phi_estimates(model, market, t, p)?.into_iter().map(|e| e.mean).collect())
}

/// Minimal wealth `L(s, t_k, p) = varpi(t_k, P(s, t_k, p))` on a simulated path.
pub fn minimal_wealth(model: &EndowmentModel, market: &MarketSpec, bundle: &PathBundle, path_index: usize, node_index: usize) -> Result<f64> {
    let path = bundle
        .paths
        .get(path_index)
        .ok_or_else(|| Error::Domain(format!("path index {path_index} out of range")))?;
    if node_index >= path.n_nodes() {
        return Err(Error::Domain(format!("node index {node_index} out of range")));
    }
    varpi(model, market, bundle.grid.times()[node_index], path.prices_at(node_index))
}

/// Direct estimate of `-(1/H(s,t)) E[int_t^T H(s,u) eps du | F_{s,t}]` at a
/// path node, by simulating continuations from the node and carrying the
/// deflator accumulated so far. Independent of [`varpi`] up to the seed.
pub fn direct_floor_estimate(
    model: &EndowmentModel,
    market: &MarketSpec,
    bundle: &PathBundle,
    path_index: usize,
    node_index: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let path = &bundle.paths[path_index];
    let t = bundle.grid.times()[node_index];
    let h_st = path.deflator[node_index];
    if t >= market.horizon {
        return Ok(Estimate::exact(0.0));
    }
    let grid = TimeGrid::uniform(t, market.horizon, model.mc_inner_steps.max(1))?;
    let sim = PathSimulator::new(market, &grid)?;
    let start = path.prices_at(node_index).to_vec();
    let times = grid.times().to_vec();
    let samples = map_indexed(inner_paths, model.exec, |k| {
        let noise = path_noise(seed, k as u64, grid.n_steps(), market.n_brownian);
        sim.simulate(&start, &noise).map(|cont| {
            let integrand: Vec<f64> = (0..cont.n_nodes())
                .map(|j| h_st * cont.deflator[j] * model.rate.eval(times[j], cont.prices_at(j)))
                .collect();
            -trapezoid(&times, &integrand) / h_st
        })
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// `varpi` tabulated on a tensor grid in `(t, log p)` with multilinear
/// interpolation, for evaluating the floor along many paths.
#[derive(Debug, Clone)]
pub struct VarPiCache {
    times: Vec<f64>,
    log_nodes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl VarPiCache {
    /// Tabulates `varpi` at every `(t, exp(log_nodes))` combination.
    pub fn build(model: &EndowmentModel, market: &MarketSpec, times: &[f64], log_nodes: Vec<Vec<f64>>) -> Result<Self> {
        if log_nodes.len() != market.n_stocks || log_nodes.iter().any(|v| v.is_empty()) || times.is_empty() {
            return Err(Error::Dimension("cache needs a non-empty node list per stock".into()));
        }
        let dims: Vec<usize> = log_nodes.iter().map(Vec::len).collect();
        let per_t: usize = dims.iter().product();
        let mut values = Vec::with_capacity(times.len() * per_t);
        for &t in times {
            for flat in 0..per_t {
                let p = Self::point(&log_nodes, &dims, flat);
                values.push(varpi(model, market, t, &p)?);
            }
        }
        Ok(Self { times: times.to_vec(), log_nodes, values })
    }

    fn point(log_nodes: &[Vec<f64>], dims: &[usize], mut flat: usize) -> Vec<f64> {
        let mut idx = vec![0; dims.len()];
        for i in (0..dims.len()).rev() {
            idx[i] = flat % dims[i];
            flat /= dims[i];
        }
        idx.iter().enumerate().map(|(i, &k)| log_nodes[i][k].exp()).collect()
    }

    fn bracket(nodes: &[f64], x: f64) -> (usize, usize, f64) {
        if nodes.len() == 1 || x <= nodes[0] {
            return (0, 0, 0.0);
        }
        if x >= nodes[nodes.len() - 1] {
            let last = nodes.len() - 1;
            return (last, last, 0.0);
        }
        let k = nodes.partition_point(|&v| v <= x);
        (k - 1, k, (x - nodes[k - 1]) / (nodes[k] - nodes[k - 1]))
    }

    /// Interpolated `varpi(t, p)`; clamps outside the tabulated box.
    pub fn eval(&self, t: f64, p: &[f64]) -> f64 {
        let dims: Vec<usize> = self.log_nodes.iter().map(Vec::len).collect();
        let per_t: usize = dims.iter().product();
        let mut axes = vec![Self::bracket(&self.times, t)];
        for (i, nodes) in self.log_nodes.iter().enumerate() {
            axes.push(Self::bracket(nodes, p[i].ln()));
        }
        let corners = 1usize << axes.len();
        let mut acc = 0.0;
        for corner in 0..corners {
            let mut weight = 1.0;
            let mut flat = 0;
            let mut t_idx = 0;
            for (a, &(lo, hi, w)) in axes.iter().enumerate() {
                let upper = corner >> a & 1 == 1;
                weight *= if upper { w } else { 1.0 - w };
                let k = if upper { hi } else { lo };
                if a == 0 {
                    t_idx = k;
                } else {
                    flat = flat * dims[a - 1] + k;
                }
            }
            if weight != 0.0 {
                acc += weight * self.values[t_idx * per_t + flat];
            }
        }
        acc
    }

    /// `p_i d varpi / d p_i` of the interpolant, as a slope in `log p_i`.
    pub fn phi(&self, t: f64, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len() + 1];
        for i in 0..p.len() {
            let mut up = p.to_vec();
            let mut down = p.to_vec();
            up[i] *= PHI_BUMP.exp();
            down[i] *= (-PHI_BUMP).exp();
            out[i + 1] = (self.eval(t, &up) - self.eval(t, &down)) / (2.0 * PHI_BUMP);
        }
        out
    }
}
