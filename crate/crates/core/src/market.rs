//! The financial market: coefficient functions, market price of risk,
//! log-Euler path simulation of prices, bond, exponential martingale and
//! state price density, plus the path CSV format.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};

/// Default relative tolerance on the residual of `sigma * theta = excess`.
pub const TOL_LSQ: f64 = 1e-10;

/// A market coefficient, either constant, a function of time, or a
/// function of time and the stock price vector.
pub enum Coef<T> {
    Constant(T),
    Time(Arc<dyn Fn(f64) -> T + Send + Sync>),
    State(Arc<dyn Fn(f64, &[f64]) -> T + Send + Sync>),
}

impl<T: Clone> Coef<T> {
    pub fn time<F: Fn(f64) -> T + Send + Sync + 'static>(f: F) -> Self {
        Coef::Time(Arc::new(f))
    }

    pub fn state<F: Fn(f64, &[f64]) -> T + Send + Sync + 'static>(f: F) -> Self {
        Coef::State(Arc::new(f))
    }

    pub fn eval(&self, t: f64, p: &[f64]) -> T {
        match self {
            Coef::Constant(v) => v.clone(),
            Coef::Time(f) => f(t),
            Coef::State(f) => f(t, p),
        }
    }

    pub fn depends_on_state(&self) -> bool {
        matches!(self, Coef::State(_))
    }
}

impl<T: Clone> Clone for Coef<T> {
    fn clone(&self) -> Self {
        match self {
            Coef::Constant(v) => Coef::Constant(v.clone()),
            Coef::Time(f) => Coef::Time(Arc::clone(f)),
            Coef::State(f) => Coef::State(Arc::clone(f)),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Coef<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coef::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Coef::Time(_) => f.write_str("Time(<fn>)"),
            Coef::State(_) => f.write_str("State(<fn>)"),
        }
    }
}

/// Market with `n` stocks driven by a `d`-dimensional Brownian motion.
///
/// Coefficients are evaluated on the stock prices only. The deflating
/// asset of index 0 is represented by the state price density itself, so
/// `initial_prices[0]` is carried for bookkeeping and never simulated.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    pub n_stocks: usize,
    pub n_brownian: usize,
    pub rate: Coef<f64>,
    pub drift: Coef<Vec<f64>>,
    /// `n x d` volatility matrix.
    pub vol: Coef<DMatrix<f64>>,
    pub dividend: Coef<Vec<f64>>,
    /// `(p_0, p_1, ..., p_n)`, all positive.
    pub initial_prices: Vec<f64>,
    pub horizon: f64,
    pub tol_lsq: f64,
}

/// Coefficients of the market frozen at one `(t, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients {
    pub rate: f64,
    pub drift: Vec<f64>,
    pub vol: DMatrix<f64>,
    pub dividend: Vec<f64>,
    pub theta: Vec<f64>,
}

impl LocalCoefficients {
    /// `b + delta - r 1`.
    pub fn excess_return(&self) -> Vec<f64> {
        self.drift.iter().zip(&self.dividend).map(|(b, d)| b + d - self.rate).collect()
    }
}

impl MarketSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_stocks: usize,
        n_brownian: usize,
        rate: Coef<f64>,
        drift: Coef<Vec<f64>>,
        vol: Coef<DMatrix<f64>>,
        dividend: Coef<Vec<f64>>,
        initial_prices: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if n_stocks == 0 || n_brownian == 0 {
            return Err(Error::Dimension("market needs at least one stock and one Brownian factor".into()));
        }
        if initial_prices.len() != n_stocks + 1 {
            return Err(Error::Dimension(format!(
                "expected {} initial prices (deflator plus stocks), got {}",
                n_stocks + 1,
                initial_prices.len()
            )));
        }
        if initial_prices.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Domain("initial prices must be positive and finite".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let spec = Self {
            n_stocks,
            n_brownian,
            rate,
            drift,
            vol,
            dividend,
            initial_prices,
            horizon,
            tol_lsq: TOL_LSQ,
        };
        spec.coefficients(0.0, spec.stock_prices0())?;
        Ok(spec)
    }

    /// Constant-coefficient market; `vol` is given row by row (`n` rows of `d`).
    pub fn constant(
        rate: f64,
        drift: Vec<f64>,
        vol: Vec<Vec<f64>>,
        dividend: Vec<f64>,
        initial_prices: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let n = vol.len();
        let d = vol.first().map_or(0, Vec::len);
        if vol.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension("ragged volatility matrix".into()));
        }
        let flat: Vec<f64> = vol.into_iter().flatten().collect();
        let sigma = DMatrix::from_row_slice(n, d, &flat);
        Self::new(
            n,
            d,
            Coef::Constant(rate),
            Coef::Constant(drift),
            Coef::Constant(sigma),
            Coef::Constant(dividend),
            initial_prices,
            horizon,
        )
    }

    /// Initial stock prices `(p_1, ..., p_n)`.
    pub fn stock_prices0(&self) -> &[f64] {
        &self.initial_prices[1..]
    }

    /// True when no coefficient depends on the price state.
    pub fn is_state_independent(&self) -> bool {
        !(self.rate.depends_on_state()
            || self.drift.depends_on_state()
            || self.vol.depends_on_state()
            || self.dividend.depends_on_state())
    }

    pub fn has_deterministic_rate(&self) -> bool {
        !self.rate.depends_on_state()
    }

    fn raw_coefficients(&self, t: f64, p: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>, Vec<f64>)> {
        let rate = self.rate.eval(t, p);
        let drift = self.drift.eval(t, p);
        let vol = self.vol.eval(t, p);
        let dividend = self.dividend.eval(t, p);
        if drift.len() != self.n_stocks || dividend.len() != self.n_stocks {
            return Err(Error::Dimension(format!(
                "drift/dividend must have {} entries, got {}/{}",
                self.n_stocks,
                drift.len(),
                dividend.len()
            )));
        }
        if vol.nrows() != self.n_stocks || vol.ncols() != self.n_brownian {
            return Err(Error::Dimension(format!(
                "volatility must be {}x{}, got {}x{}",
                self.n_stocks,
                self.n_brownian,
                vol.nrows(),
                vol.ncols()
            )));
        }
        let finite = rate.is_finite()
            && drift.iter().all(|x| x.is_finite())
            && dividend.iter().all(|x| x.is_finite())
            && vol.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("market coefficients at t={t}")));
        }
        Ok((rate, drift, vol, dividend))
    }

    /// All coefficients and the market price of risk at `(t, p)`.
    pub fn coefficients(&self, t: f64, p: &[f64]) -> Result<LocalCoefficients> {
        let (rate, drift, vol, dividend) = self.raw_coefficients(t, p)?;
        let excess: Vec<f64> = drift.iter().zip(&dividend).map(|(b, d)| b + d - rate).collect();
        let theta = min_norm_solve(&vol, &excess, self.tol_lsq).map_err(|residual| Error::NoRiskPrice { t, residual })?;
        Ok(LocalCoefficients { rate, drift, vol, dividend, theta })
    }

    /// Evaluates every coefficient on a small grid of times and price
    /// multiples around `p0`.
    pub fn smoke_check(&self) -> Result<()> {
        let p0 = self.stock_prices0();
        for k in 0..=4 {
            let t = self.horizon * k as f64 / 4.0;
            for m in [0.25, 1.0, 4.0] {
                let p: Vec<f64> = p0.iter().map(|x| x * m).collect();
                self.coefficients(t, &p)?;
            }
        }
        Ok(())
    }
}

/// Minimum-norm least-squares solution of `a x = b`; `Err(residual)` when
/// the relative residual exceeds `tol`.
pub(crate) fn min_norm_solve(a: &DMatrix<f64>, b: &[f64], tol: f64) -> std::result::Result<Vec<f64>, f64> {
    let rhs = DVector::from_column_slice(b);
    let b_norm = rhs.norm();
    if b_norm == 0.0 {
        return Ok(vec![0.0; a.ncols()]);
    }
    // 1x1 and row-vector systems are the common case; skip the SVD there
    if a.nrows() == 1 {
        let row_sq: f64 = a.iter().map(|x| x * x).sum();
        if row_sq == 0.0 {
            return Err(b_norm);
        }
        return Ok(a.iter().map(|s| s * b[0] / row_sq).collect());
    }
    let svd = a.clone().svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-12 * a.nrows().max(a.ncols()) as f64;
    let x = svd.solve(&rhs, cutoff).map_err(|_| f64::INFINITY)?;
    let residual = (a * &x - &rhs).norm();
    if residual > tol * b_norm {
        return Err(residual / b_norm);
    }
    Ok(x.iter().copied().collect())
}

/// Market price of risk: the minimum-norm `theta` with
/// `sigma theta = b + delta - r 1`.
pub fn market_price_of_risk(spec: &MarketSpec, t: f64, p: &[f64]) -> Result<Vec<f64>> {
    Ok(spec.coefficients(t, p)?.theta)
}

/// Discretisation of `[start, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(start: f64, end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(end > start) {
            return Err(Error::Domain(format!("bad grid [{start}, {end}] with {n_steps} steps")));
        }
        let h = (end - start) / n_steps as f64;
        let mut times: Vec<f64> = (0..=n_steps).map(|k| start + h * k as f64).collect();
        times[n_steps] = end;
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("grid times must be strictly increasing with at least two nodes".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    /// Sub-grid starting at node `j`. Needs at least one step remaining.
    pub fn tail(&self, j: usize) -> Result<Self> {
        Self::from_times(self.times[j..].to_vec())
    }

    pub fn head(&self, j: usize) -> Result<Self> {
        Self::from_times(self.times[..=j].to_vec())
    }

    /// Index of the node equal to `t` (within 1e-12).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }
}

/// One simulated trajectory. Series are node-major; vectors are flattened
/// (`prices[k * n + i]`, `theta[k * d + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub prices: Vec<f64>,
    pub bond: Vec<f64>,
    pub expmart: Vec<f64>,
    pub deflator: Vec<f64>,
    /// Empty when the path was read back from CSV.
    pub theta: Vec<f64>,
}

impl SamplePath {
    pub fn n_nodes(&self) -> usize {
        self.bond.len()
    }

    pub fn prices_at(&self, node: usize) -> &[f64] {
        let n = self.prices.len() / self.n_nodes();
        &self.prices[node * n..(node + 1) * n]
    }
}

/// Sample paths on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_stocks: usize,
    pub n_brownian: usize,
    pub seed: u64,
    pub paths: Vec<SamplePath>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn price(&self, path: usize, node: usize, stock: usize) -> f64 {
        self.paths[path].prices[node * self.n_stocks + stock]
    }

    pub fn deflator(&self, path: usize, node: usize) -> f64 {
        self.paths[path].deflator[node]
    }

    /// Per-path series of the deflator, for the martingale testers.
    pub fn deflator_series(&self) -> Vec<Vec<f64>> {
        self.paths.iter().map(|p| p.deflator.clone()).collect()
    }

    pub fn expmart_series(&self) -> Vec<Vec<f64>> {
        self.paths.iter().map(|p| p.expmart.clone()).collect()
    }

    /// Writes `time,path_id,P_1..P_n,B,Z,H` rows, path-major, using the
    /// shortest round-trip decimal form of each value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = String::from("time,path_id");
        for i in 1..=self.n_stocks {
            header.push_str(&format!(",P_{i}"));
        }
        header.push_str(",B,Z,H\n");
        out.write_all(header.as_bytes())?;
        let mut line = String::new();
        for (id, path) in self.paths.iter().enumerate() {
            for (k, t) in self.grid.times().iter().enumerate() {
                line.clear();
                line.push_str(&format!("{t:?},{id}"));
                for p in path.prices_at(k) {
                    line.push_str(&format!(",{p:?}"));
                }
                line.push_str(&format!(",{:?},{:?},{:?}\n", path.bond[k], path.expmart[k], path.deflator[k]));
                out.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the CSV produced by [`PathBundle::write_csv`]. The market price
    /// of risk and the seed are not part of the format and come back empty/zero.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Domain("empty path file".into()))?
            .map_err(|e| Error::Domain(e.to_string()))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 6 || cols[0] != "time" || cols[1] != "path_id" || cols[cols.len() - 3..] != ["B", "Z", "H"] {
            return Err(Error::Domain(format!("unexpected path file header: {header}")));
        }
        let n = cols.len() - 5;
        let mut paths: Vec<SamplePath> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Domain(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Domain(format!("path file line {}: malformed row", lineno + 2));
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(bad());
            }
            let t: f64 = fields[0].parse().map_err(|_| bad())?;
            let id: usize = fields[1].parse().map_err(|_| bad())?;
            let vals: Vec<f64> = fields[2..].iter().map(|f| f.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            if id == paths.len() {
                paths.push(SamplePath { prices: vec![], bond: vec![], expmart: vec![], deflator: vec![], theta: vec![] });
            } else if id + 1 != paths.len() {
                return Err(Error::Domain(format!("path file line {}: path ids must be contiguous", lineno + 2)));
            }
            let path = paths.last_mut().unwrap();
            if id == 0 {
                times.push(t);
            } else if times.get(path.bond.len()) != Some(&t) {
                return Err(Error::Domain(format!("path file line {}: time grid differs between paths", lineno + 2)));
            }
            path.prices.extend_from_slice(&vals[..n]);
            path.bond.push(vals[n]);
            path.expmart.push(vals[n + 1]);
            path.deflator.push(vals[n + 2]);
        }
        if paths.is_empty() || paths.iter().any(|p| p.bond.len() != times.len()) {
            return Err(Error::Domain("path file has no paths or paths of unequal length".into()));
        }
        Ok(Self { grid: TimeGrid::from_times(times)?, n_stocks: n, n_brownian: 0, seed: 0, paths })
    }
}

/// Standard normal draws for path `path_index`: ChaCha8 keyed by `seed`
/// on stream `path_index`, `n_steps * d` values in step-major order.
pub fn path_noise(seed: u64, path_index: u64, n_steps: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    (0..n_steps * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Per-node coefficients in the form the stepper consumes.
#[derive(Debug, Clone)]
struct StepCoefficients {
    rate: f64,
    /// `b_i - |sigma_i|^2 / 2`
    log_drift: Vec<f64>,
    vol: DMatrix<f64>,
    theta: Vec<f64>,
    theta_sq: f64,
}

impl StepCoefficients {
    fn from_local(c: LocalCoefficients) -> Self {
        let log_drift = (0..c.vol.nrows())
            .map(|i| c.drift[i] - 0.5 * c.vol.row(i).iter().map(|s| s * s).sum::<f64>())
            .collect();
        let theta_sq = c.theta.iter().map(|x| x * x).sum();
        Self { rate: c.rate, log_drift, vol: c.vol, theta: c.theta, theta_sq }
    }
}

/// Log-Euler stepper bound to one market and grid. Coefficients are
/// tabulated once per grid node when the market does not depend on the
/// price state, and evaluated per step otherwise.
pub struct PathSimulator<'a> {
    spec: &'a MarketSpec,
    grid: TimeGrid,
    frozen: Option<Vec<StepCoefficients>>,
}

impl<'a> PathSimulator<'a> {
    pub fn new(spec: &'a MarketSpec, grid: &TimeGrid) -> Result<Self> {
        let frozen = if spec.is_state_independent() {
            let p0 = spec.stock_prices0();
            Some(
                grid.times()
                    .iter()
                    .map(|&t| spec.coefficients(t, p0).map(StepCoefficients::from_local))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { spec, grid: grid.clone(), frozen })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// One path from `p_start` driven by `noise` (`n_steps * d` standard
    /// normals, step-major).
    pub fn simulate(&self, p_start: &[f64], noise: &[f64]) -> Result<SamplePath> {
        simulate_with_table(self, p_start, noise)
    }

    fn at(&self, node: usize, t: f64, p: &[f64]) -> Result<std::borrow::Cow<'_, StepCoefficients>> {
        match &self.frozen {
            Some(table) => Ok(std::borrow::Cow::Borrowed(&table[node])),
            None => Ok(std::borrow::Cow::Owned(StepCoefficients::from_local(self.spec.coefficients(t, p)?))),
        }
    }
}

fn simulate_with_table(table: &PathSimulator<'_>, p_start: &[f64], noise: &[f64]) -> Result<SamplePath> {
    let spec = table.spec;
    let grid = &table.grid;
    let n = spec.n_stocks;
    let d = spec.n_brownian;
    let n_nodes = grid.n_nodes();
    if p_start.len() != n {
        return Err(Error::Dimension(format!("expected {n} start prices, got {}", p_start.len())));
    }
    if noise.len() < grid.n_steps() * d {
        return Err(Error::Dimension("not enough Gaussian increments for the grid".into()));
    }
    let mut prices = Vec::with_capacity(n_nodes * n);
    let mut bond = Vec::with_capacity(n_nodes);
    let mut expmart = Vec::with_capacity(n_nodes);
    let mut deflator = Vec::with_capacity(n_nodes);
    let mut theta = Vec::with_capacity(n_nodes * d);

    let mut p = p_start.to_vec();
    let mut b = 1.0f64;
    let mut z = 1.0f64;
    prices.extend_from_slice(&p);
    bond.push(b);
    expmart.push(z);
    deflator.push(z / b);

    let times = grid.times();
    let mut dw = vec![0.0; d];
    for k in 0..grid.n_steps() {
        let t = times[k];
        let dt = times[k + 1] - t;
        let sq = dt.sqrt();
        let c = table.at(k, t, &p)?;
        theta.extend_from_slice(&c.theta);
        for (j, w) in dw.iter_mut().enumerate() {
            *w = sq * noise[k * d + j];
        }
        for (i, pi) in p.iter_mut().enumerate() {
            let mut incr = c.log_drift[i] * dt;
            for (j, w) in dw.iter().enumerate() {
                incr += c.vol[(i, j)] * w;
            }
            *pi *= incr.exp();
        }
        b *= (c.rate * dt).exp();
        let theta_dw: f64 = c.theta.iter().zip(&dw).map(|(a, w)| a * w).sum();
        z *= (-theta_dw - 0.5 * c.theta_sq * dt).exp();
        if p.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || !(b > 0.0 && b.is_finite()) || !(z > 0.0 && z.is_finite()) {
            return Err(Error::NonFinite(format!("path state at t={}", times[k + 1])));
        }
        prices.extend_from_slice(&p);
        bond.push(b);
        expmart.push(z);
        deflator.push(z / b);
    }
    let last = table.at(n_nodes - 1, grid.end(), &p)?;
    theta.extend_from_slice(&last.theta);
    Ok(SamplePath { prices, bond, expmart, deflator, theta })
}

/// Simulates one path from `p_start` on `grid` using the supplied standard
/// normal increments (`grid.n_steps() * d` values, step-major).
pub fn simulate_with_noise(spec: &MarketSpec, grid: &TimeGrid, p_start: &[f64], noise: &[f64]) -> Result<SamplePath> {
    PathSimulator::new(spec, grid)?.simulate(p_start, noise)
}

/// Simulates path number `path_index` of the stream keyed by `seed`.
pub fn simulate_path(spec: &MarketSpec, grid: &TimeGrid, p0: &[f64], seed: u64, path_index: u64) -> Result<SamplePath> {
    let noise = path_noise(seed, path_index, grid.n_steps(), spec.n_brownian);
    simulate_with_noise(spec, grid, p0, &noise)
}

fn check_grid(spec: &MarketSpec, grid: &TimeGrid) -> Result<()> {
    if grid.start() < -1e-12 || grid.end() > spec.horizon * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "grid [{}, {}] outside [0, {}]",
            grid.start(),
            grid.end(),
            spec.horizon
        )));
    }
    Ok(())
}

/// Simulates paths and hands each one to `f` without storing the bundle.
/// Output is in path order and independent of `mode`.
pub fn map_paths<T, F>(
    spec: &MarketSpec,
    grid: &TimeGrid,
    p0: &[f64],
    n_paths: usize,
    seed: u64,
    mode: ExecMode,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &SamplePath) -> T + Sync + Send,
{
    check_grid(spec, grid)?;
    let sim = PathSimulator::new(spec, grid)?;
    let d = spec.n_brownian;
    map_indexed(n_paths, mode, |k| {
        let noise = path_noise(seed, k as u64, grid.n_steps(), d);
        sim.simulate(p0, &noise).map(|path| f(k, &path))
    })
    .into_iter()
    .collect()
}

/// Simulates `n_paths` paths in parallel.
pub fn simulate_paths(spec: &MarketSpec, grid: &TimeGrid, p0: &[f64], n_paths: usize, seed: u64) -> Result<PathBundle> {
    simulate_paths_with(spec, grid, p0, n_paths, seed, ExecMode::Parallel)
}

pub fn simulate_paths_with(
    spec: &MarketSpec,
    grid: &TimeGrid,
    p0: &[f64],
    n_paths: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be positive".into()));
    }
    if p0.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Domain("start prices must be positive".into()));
    }
    let paths = map_paths(spec, grid, p0, n_paths, seed, mode, |_, p| p.clone())?;
    Ok(PathBundle { grid: grid.clone(), n_stocks: spec.n_stocks, n_brownian: spec.n_brownian, seed, paths })
}

/// Maximum absolute difference of terminal prices between a full run and
/// a run restarted at node `split` from the intermediate state. The first
/// leg uses the stream `seed_first`, the restarted leg `seed_second`; with
/// equal seeds the increments match and the result is exactly zero.
pub fn restart_deviation(
    spec: &MarketSpec,
    grid: &TimeGrid,
    p0: &[f64],
    seed_first: u64,
    seed_second: u64,
    split: usize,
) -> Result<f64> {
    if split >= grid.n_steps() {
        return Err(Error::Domain(format!("split node {split} leaves no steps")));
    }
    let d = spec.n_brownian;
    let full_noise = path_noise(seed_first, 0, grid.n_steps(), d);
    let full = simulate_with_noise(spec, grid, p0, &full_noise)?;

    let mid = if split == 0 {
        p0.to_vec()
    } else {
        let head = simulate_with_noise(spec, &grid.head(split)?, p0, &full_noise)?;
        head.prices_at(split).to_vec()
    };
    let tail_noise = path_noise(seed_second, 0, grid.n_steps(), d);
    let tail = simulate_with_noise(spec, &grid.tail(split)?, &mid, &tail_noise[split * d..])?;

    let last_full = full.prices_at(full.n_nodes() - 1);
    let last_restart = tail.prices_at(tail.n_nodes() - 1);
    Ok(last_full.iter().zip(last_restart).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Flow-property check with matched increments; returns exactly 0 for a
/// consistent scheme.
pub fn restart_consistency_check(spec: &MarketSpec, grid: &TimeGrid, p0: &[f64], seed: u64, split: usize) -> Result<f64> {
    restart_deviation(spec, grid, p0, seed, seed, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bs(r: f64, b: f64, sigma: f64) -> MarketSpec {
        MarketSpec::constant(r, vec![b], vec![vec![sigma]], vec![0.0], vec![1.0, 100.0], 2.0).unwrap()
    }

    #[test]
    fn scalar_price_of_risk() {
        let m = MarketSpec::constant(0.04, vec![0.09], vec![vec![0.3]], vec![0.01], vec![1.0, 1.0], 1.0).unwrap();
        let theta = market_price_of_risk(&m, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(theta[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zero_excess_gives_zero_theta() {
        let m = MarketSpec::constant(0.05, vec![0.03, 0.05], vec![vec![0.2, 0.1], vec![0.0, 0.3]], vec![0.02, 0.0], vec![1.0, 1.0, 1.0], 1.0)
            .unwrap();
        assert_eq!(market_price_of_risk(&m, 0.3, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn minimum_norm_theta_for_wide_sigma() {
        let m = MarketSpec::constant(0.0, vec![0.05], vec![vec![0.3, 0.4]], vec![0.0], vec![1.0, 1.0], 1.0).unwrap();
        let theta = market_price_of_risk(&m, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(theta[0], 0.06, epsilon = 1e-15);
        assert_relative_eq!(theta[1], 0.08, epsilon = 1e-15);
        assert_relative_eq!(0.3 * theta[0] + 0.4 * theta[1], 0.05, epsilon = 1e-15);
        // kernel of sigma is spanned by (0.4, -0.3)
        assert!((0.4 * theta[0] - 0.3 * theta[1]).abs() < 1e-15);
    }

    #[test]
    fn minimum_norm_theta_via_svd() {
        // 2 stocks, 3 factors: theta must be orthogonal to ker(sigma)
        let m = MarketSpec::constant(
            0.01,
            vec![0.06, 0.04],
            vec![vec![0.2, 0.1, 0.0], vec![0.0, 0.1, 0.3]],
            vec![0.0, 0.01],
            vec![1.0, 1.0, 1.0],
            1.0,
        )
        .unwrap();
        let c = m.coefficients(0.0, &[1.0, 1.0]).unwrap();
        let th = DVector::from_vec(c.theta.clone());
        let resid = &c.vol * &th - DVector::from_vec(c.excess_return());
        assert!(resid.norm() < 1e-14);
        // kernel vector of [[.2,.1,0],[0,.1,.3]] is (0.15, -0.3, 0.1)
        let k = DVector::from_vec(vec![0.15, -0.3, 0.1]);
        assert!((&c.vol * &k).norm() < 1e-15);
        assert!(th.dot(&k).abs() < 1e-14);
    }

    #[test]
    fn inconsistent_excess_is_reported() {
        let m = MarketSpec::constant(0.0, vec![0.05, 0.05], vec![vec![0.2], vec![0.3]], vec![0.0, 0.0], vec![1.0, 1.0, 1.0], 1.0);
        assert!(matches!(m, Err(Error::NoRiskPrice { .. })));
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            MarketSpec::constant(0.0, vec![0.05], vec![vec![0.2]], vec![0.0], vec![1.0], 1.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            MarketSpec::constant(0.0, vec![0.05, 0.1], vec![vec![0.2]], vec![0.0], vec![1.0, 1.0], 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_coefficient_is_reported() {
        let m = MarketSpec::new(
            1,
            1,
            Coef::time(|t| if t > 0.5 { f64::NAN } else { 0.0 }),
            Coef::Constant(vec![0.0]),
            Coef::Constant(DMatrix::from_element(1, 1, 0.2)),
            Coef::Constant(vec![0.0]),
            vec![1.0, 1.0],
            1.0,
        )
        .unwrap();
        assert!(matches!(m.smoke_check(), Err(Error::NonFinite(_))));
        let grid = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        assert!(matches!(simulate_paths(&m, &grid, &[1.0], 4, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn neutral_market_has_unit_deflator() {
        let m = bs(0.0, 0.0, 0.25);
        let grid = TimeGrid::uniform(0.0, 2.0, 20).unwrap();
        let bundle = simulate_paths(&m, &grid, &[100.0], 50, 3).unwrap();
        for path in &bundle.paths {
            assert!(path.deflator.iter().all(|&h| h == 1.0));
        }
    }

    #[test]
    fn bond_is_exponential_in_rate() {
        let m = bs(0.05, 0.05, 0.2);
        let grid = TimeGrid::uniform(0.0, 2.0, 100).unwrap();
        let bundle = simulate_paths(&m, &grid, &[100.0], 8, 11).unwrap();
        for path in &bundle.paths {
            assert_relative_eq!(*path.bond.last().unwrap(), 0.1f64.exp(), max_relative = 1e-13);
            assert_relative_eq!(*path.bond.last().unwrap(), 1.105170918, epsilon = 1e-9);
        }
    }

    #[test]
    fn bundle_invariants() {
        let m = bs(0.03, 0.08, 0.3);
        let grid = TimeGrid::uniform(0.0, 1.0, 25).unwrap();
        let bundle = simulate_paths(&m, &grid, &[100.0], 200, 5).unwrap();
        for path in &bundle.paths {
            assert_eq!(path.bond[0], 1.0);
            assert_eq!(path.expmart[0], 1.0);
            assert_eq!(path.deflator[0], 1.0);
            assert_eq!(path.prices[0], 100.0);
            for k in 0..path.n_nodes() {
                assert_eq!(path.deflator[k], path.expmart[k] / path.bond[k]);
                assert!(path.prices[k] > 0.0 && path.bond[k] > 0.0 && path.expmart[k] > 0.0);
            }
            assert_eq!(path.theta.len(), path.n_nodes());
            assert_relative_eq!(path.theta[0], 0.05 / 0.3, epsilon = 1e-15);
        }
    }

    #[test]
    fn serial_and_parallel_bundles_are_identical() {
        let m = bs(0.02, 0.07, 0.2);
        let grid = TimeGrid::uniform(0.0, 1.0, 16).unwrap();
        let a = simulate_paths_with(&m, &grid, &[50.0], 64, 99, ExecMode::Serial).unwrap();
        let b = simulate_paths_with(&m, &grid, &[50.0], 64, 99, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
        // a prefix of paths is stable when more paths are requested
        let c = simulate_paths(&m, &grid, &[50.0], 80, 99).unwrap();
        assert_eq!(a.paths[..], c.paths[..64]);
    }

    #[test]
    fn restart_is_exact_with_matched_increments() {
        let m = MarketSpec::new(
            1,
            1,
            Coef::Constant(0.02),
            Coef::state(|_, p: &[f64]| vec![0.05 + 0.01 * (p[0] / 100.0).ln()]),
            Coef::state(|t, p: &[f64]| DMatrix::from_element(1, 1, 0.2 + 0.05 * t + 0.02 * (p[0] / 100.0).ln().abs().min(1.0))),
            Coef::Constant(vec![0.0]),
            vec![1.0, 100.0],
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 40).unwrap();
        assert_eq!(restart_consistency_check(&m, &grid, &[100.0], 7, 20).unwrap(), 0.0);
        assert_eq!(restart_consistency_check(&m, &grid, &[100.0], 7, 0).unwrap(), 0.0);
        assert_eq!(restart_consistency_check(&m, &grid, &[100.0], 7, 1).unwrap(), 0.0);
        assert!(restart_deviation(&m, &grid, &[100.0], 7, 8, 20).unwrap() > 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let m = MarketSpec::constant(0.01, vec![0.05, 0.06], vec![vec![0.2, 0.0], vec![0.1, 0.25]], vec![0.0, 0.0], vec![1.0, 10.0, 20.0], 1.0)
            .unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 7).unwrap();
        let bundle = simulate_paths(&m, &grid, &[10.0, 20.0], 5, 42).unwrap();
        let mut buf = Vec::new();
        bundle.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,path_id,P_1,P_2,B,Z,H\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 8);
        let back = PathBundle::read_csv(&buf[..]).unwrap();
        assert_eq!(back.grid, bundle.grid);
        for (a, b) in back.paths.iter().zip(&bundle.paths) {
            assert_eq!(a.prices, b.prices);
            assert_eq!(a.bond, b.bond);
            assert_eq!(a.expmart, b.expmart);
            assert_eq!(a.deflator, b.deflator);
        }
    }

    #[test]
    fn csv_reader_rejects_garbage() {
        assert!(PathBundle::read_csv(&b"a,b,c\n"[..]).is_err());
        assert!(PathBundle::read_csv(&b"time,path_id,P_1,B,Z,H\n0,0,1,1,x,1\n"[..]).is_err());
    }

    #[test]
    fn grid_outside_horizon_rejected() {
        let m = bs(0.0, 0.0, 0.2);
        let grid = TimeGrid::uniform(0.0, 3.0, 3).unwrap();
        assert!(matches!(simulate_paths(&m, &grid, &[1.0], 1, 0), Err(Error::Domain(_))));
    }
}
