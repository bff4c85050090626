//! The four commands and their exit-code contract.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use optima_core::market::{map_paths, restart_consistency_check, simulate_paths};
use optima_core::numerics::{cumulative_trapezoid, Estimate};
use optima_core::optimizer::{homogeneity_gate, PathEvaluator};
use optima_core::verify::{
    binomial_oracle, feasibility_check, martingale_test, strategy_cost, BinomialMarket,
    MAX_BINOMIAL_PERIODS,
};
use optima_core::{exec, market::Coef, Branch, ExecMode, PathBundle, Solution, SolveConfig, TimeGrid};

use crate::config::{ConfigError, RunConfig};

const DEFAULT_OUTPUT_DIR: &str = "optima-out";
/// Recorded in every manifest; not tested statistically.
const CONTINUITY_ASSUMPTION: &str =
    "wealth paths satisfy the equicontinuity moment bound (holds for Lipschitz coefficients)";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(#[from] optima_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} checks failed")]
    VerifyFailed { failed: usize, total: usize },
    #[error("oracle mismatch: max |dV| = {worst:e} above {tol:e}")]
    OracleMismatch { worst: f64, tol: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::VerifyFailed { .. } => 1,
            CliError::Solver(_) | CliError::Io(_) | CliError::OracleMismatch { .. } => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
}

/// A loaded configuration with command-line overrides applied.
pub struct Context {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub raw: String,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Context {
    pub fn load(path: Option<&Path>, overrides: Overrides) -> CliResult<Self> {
        let path = path.ok_or_else(|| CliError::Config("--config is required".into()))?;
        let (mut config, raw) = RunConfig::load(path)?;
        if let Some(seed) = overrides.seed {
            config.problem.seed = seed;
        }
        if let Some(n) = overrides.paths {
            config.problem.n_paths = n;
        }
        if config.problem.n_paths == 0 || config.problem.steps == 0 {
            return Err(CliError::Config("problem.n_paths and problem.steps must be positive".into()));
        }
        let out_dir = overrides
            .out
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        let threads = match std::env::var("OPTIMA_THREADS") {
            Ok(v) => {
                let n: usize =
                    v.trim().parse().map_err(|_| CliError::Config(format!("OPTIMA_THREADS must be an integer, got '{v}'")))?;
                exec::configure_threads(n);
                Some(n)
            }
            Err(_) => None,
        };
        Ok(Self { config, config_path: path.to_path_buf(), raw, out_dir, threads })
    }

    fn grid(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::uniform(0.0, self.config.market.horizon, self.config.problem.steps)?)
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(BufWriter::new(File::create(self.out_dir.join(name))?))
    }

    fn solve_config(&self, cache: Option<std::sync::Arc<optima_core::VarPiCache>>) -> SolveConfig {
        let tol = &self.config.tolerances;
        SolveConfig { homogeneity_tol: tol.homogeneity, condition_limit: tol.condition, cache, ..SolveConfig::default() }
    }

    fn solve_problem(&self) -> CliResult<Solution> {
        let market = self.config.market()?;
        let pref = self.config.preference()?;
        let endowment = self.config.endowment()?;
        let kind = self.config.problem_kind()?;
        let cache = self.config.cache(&endowment, &market)?;
        let p0 = market.stock_prices0().to_vec();
        Ok(optima_core::solve(&market, &pref, &endowment, kind, self.config.problem.x, &p0, &self.solve_config(cache))?)
    }

    /// Writes `manifest.toml`: the verbatim config, the effective settings
    /// after overrides, and the run's extra facts.
    fn write_manifest(&self, command: &str, extra: toml::Table) -> CliResult<()> {
        let mut run = toml::Table::new();
        run.insert("command".into(), command.into());
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("config_file".into(), self.config_path.display().to_string().into());
        run.insert("seed".into(), to_toml_int(self.config.problem.seed));
        run.insert("n_paths".into(), to_toml_int(self.config.problem.n_paths as u64));
        run.insert("steps".into(), to_toml_int(self.config.problem.steps as u64));
        run.insert("mc_seed".into(), to_toml_int(self.config.endowment.mc_seed));
        run.insert("parallel_build".into(), ExecMode::parallel_available().into());
        if let Some(n) = self.threads {
            run.insert("threads".into(), to_toml_int(n as u64));
        }
        run.insert("assumptions".into(), toml::Value::Array(vec![CONTINUITY_ASSUMPTION.into()]));
        let mut doc = toml::Table::new();
        doc.insert("run".into(), run.into());
        doc.insert("results".into(), extra.into());
        let effective = toml::Table::try_from(&self.config).map_err(|e| CliError::Config(e.to_string()))?;
        doc.insert("effective".into(), effective.into());
        doc.insert("config_text".into(), self.raw.clone().into());
        let text = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
        let mut out = self.create("manifest.toml")?;
        out.write_all(text.as_bytes())?;
        out.flush()?;
        Ok(())
    }
}

/// TOML integers are signed; seeds above `i64::MAX` are kept as strings.
fn to_toml_int(v: u64) -> toml::Value {
    match i64::try_from(v) {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

/// Shortest round-trip decimal.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn solve(ctx: &Context) -> CliResult<()> {
    let sol = ctx.solve_problem()?;
    let grid = ctx.grid()?;
    let market = &sol.market;
    let n = market.n_stocks;
    let problem = &ctx.config.problem;
    let evaluator = PathEvaluator::new(&sol, grid.times())?;

    // per path: node-major (xi, c, pi_1..pi_n)
    let rows = map_paths(market, &grid, &sol.p, problem.n_paths, problem.seed, ExecMode::Parallel, |_, path| {
        let values = evaluator.evaluate(path)?;
        let mut out = Vec::with_capacity(grid.n_nodes() * (n + 2));
        for k in 0..grid.n_nodes() {
            out.push(values.wealth[k]);
            out.push(values.consumption[k]);
            out.extend(evaluator.portfolio(path, k)?);
        }
        Ok::<_, optima_core::Error>(out)
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let width = n + 2;
    let mut table = ctx.create("solution.csv")?;
    let mut header = String::from("t,mean_xi,se_xi,mean_c,se_c");
    for i in 1..=n {
        write!(header, ",mean_pi_{i},se_pi_{i}").unwrap();
    }
    writeln!(table, "{header}")?;
    for (k, t) in grid.times().iter().enumerate() {
        let mut line = num(*t);
        for j in 0..width {
            let column: Vec<f64> = rows.iter().map(|r| r[k * width + j]).collect();
            let est = Estimate::from_samples(&column);
            write!(line, ",{},{}", num(est.mean), num(est.std_error)).unwrap();
        }
        writeln!(table, "{line}")?;
    }
    table.flush()?;

    let y = sol.y.map(num).unwrap_or_default();
    let mut scalars = ctx.create("scalars.csv")?;
    writeln!(scalars, "x,y,V,branch,varpi0")?;
    writeln!(scalars, "{},{},{},{},{}", num(sol.x), y, num(sol.value), sol.branch.name(), num(sol.varpi0))?;
    scalars.flush()?;

    let mut results = toml::Table::new();
    results.insert("branch".into(), sol.branch.name().into());
    results.insert("value".into(), num(sol.value).into());
    results.insert("multiplier".into(), y.clone().into());
    results.insert("varpi0".into(), num(sol.varpi0).into());
    ctx.write_manifest("solve", results)?;

    println!("branch = {}", sol.branch.name());
    println!("x = {}", num(sol.x));
    println!("y = {}", if y.is_empty() { "none" } else { &y });
    println!("V = {}", num(sol.value));
    println!("varpi0 = {}", num(sol.varpi0));
    Ok(())
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let market = ctx.config.market()?;
    let grid = ctx.grid()?;
    let problem = &ctx.config.problem;
    let bundle = simulate_paths(&market, &grid, market.stock_prices0(), problem.n_paths, problem.seed)?;
    let mut out = ctx.create("paths.csv")?;
    bundle.write_csv(&mut out)?;
    out.flush()?;
    ctx.write_manifest("simulate", toml::Table::new())?;
    println!("wrote {} paths of {} nodes to {}", bundle.n_paths(), grid.n_nodes(), ctx.out_dir.join("paths.csv").display());
    Ok(())
}

struct Check {
    name: &'static str,
    statistic: f64,
    threshold: f64,
    pass: bool,
}

impl Check {
    /// Passes when `statistic <= threshold`.
    fn upper(name: &'static str, statistic: f64, threshold: f64) -> Self {
        Self { name, statistic, threshold, pass: statistic <= threshold }
    }
}

fn load_bundle(ctx: &Context) -> CliResult<PathBundle> {
    let market = ctx.config.market()?;
    match &ctx.config.verify.paths_file {
        Some(file) => {
            let file = if file.is_relative() {
                ctx.config_path.parent().unwrap_or(Path::new(".")).join(file)
            } else {
                file.clone()
            };
            let reader = File::open(&file)
                .map_err(|e| CliError::Config(format!("verify.paths_file {}: {e}", file.display())))?;
            let bundle = PathBundle::read_csv(BufReader::new(reader))
                .map_err(|e| CliError::Config(format!("verify.paths_file {}: {e}", file.display())))?;
            if bundle.n_stocks != market.n_stocks {
                return Err(CliError::Config(format!(
                    "verify.paths_file has {} stocks, market has {}",
                    bundle.n_stocks, market.n_stocks
                )));
            }
            if (bundle.grid.end() - market.horizon).abs() > 1e-12 * market.horizon || bundle.grid.start() != 0.0 {
                return Err(CliError::Config("verify.paths_file grid does not span [0, horizon]".into()));
            }
            Ok(bundle)
        }
        None => {
            let grid = ctx.grid()?;
            let problem = &ctx.config.problem;
            Ok(simulate_paths(&market, &grid, market.stock_prices0(), problem.n_paths, problem.seed)?)
        }
    }
}

fn run_checks(ctx: &Context) -> CliResult<Vec<Check>> {
    let bundle = load_bundle(ctx)?;
    let sol = ctx.solve_problem()?;
    let market = &sol.market;
    let times = bundle.grid.times().to_vec();
    let z_crit = ctx.config.tolerances.z_crit;
    let bias = ctx.config.verify.inject_bias;
    let mut checks = Vec::new();

    let expmart = bundle.expmart_series();
    let report = martingale_test(&times, &expmart, 1.0, z_crit)?;
    checks.push(Check::upper("unit_mean_deflator", report.max_z, z_crit));

    let identity = bundle
        .paths
        .iter()
        .flat_map(|p| p.deflator.iter().zip(&p.expmart).zip(&p.bond).map(|((h, z), b)| (h - z / b).abs() / h.abs().max(1.0)))
        .fold(0.0, f64::max);
    checks.push(Check::upper("deflator_identity", identity, 1e-12));

    for i in 0..market.n_stocks {
        let gains = bundle
            .paths
            .iter()
            .map(|path| {
                let mut value = Vec::with_capacity(times.len());
                let mut paid = Vec::with_capacity(times.len());
                for (k, &t) in times.iter().enumerate() {
                    let p = path.prices_at(k);
                    let delta = market.dividend.eval(t, p)[i];
                    value.push(path.deflator[k] * p[i]);
                    paid.push(path.deflator[k] * p[i] * delta);
                }
                let acc = cumulative_trapezoid(&times, &paid);
                value.iter().zip(acc).map(|(v, a)| v + a).collect()
            })
            .collect::<Vec<Vec<f64>>>();
        let report = martingale_test(&times, &gains, market.stock_prices0()[i], z_crit)?;
        checks.push(Check::upper("deflated_gains_martingale", report.max_z, z_crit));
    }

    let restart_grid = TimeGrid::uniform(0.0, market.horizon, 16)?;
    let restart = restart_consistency_check(market, &restart_grid, market.stock_prices0(), ctx.config.problem.seed, 8)?;
    checks.push(Check::upper("restart_consistency", restart, 0.0));

    let evaluator = PathEvaluator::new(&sol, &times)?;
    let values = bundle.paths.iter().map(|p| evaluator.evaluate(p)).collect::<Result<Vec<_>, _>>()?;

    let budget: Vec<Vec<f64>> =
        values.iter().map(|v| v.budget.iter().zip(&times).map(|(b, t)| b + bias * t).collect()).collect();
    let report = martingale_test(&times, &budget, sol.x, z_crit)?;
    checks.push(Check::upper("budget_martingale", report.max_z, z_crit));

    let floors: Vec<Vec<f64>> = values
        .iter()
        .zip(&bundle.paths)
        .map(|(v, p)| {
            let received: Vec<f64> =
                times.iter().enumerate().map(|(k, &t)| p.deflator[k] * sol.endowment.rate.eval(t, p.prices_at(k))).collect();
            let received = cumulative_trapezoid(&times, &received);
            (0..times.len()).map(|k| p.deflator[k] * v.floor[k] - received[k]).collect()
        })
        .collect();
    let report = martingale_test(&times, &floors, floors[0][0], z_crit)?;
    checks.push(Check::upper("floor_martingale", report.max_z, z_crit));

    let mut spread: f64 = 0.0;
    for k in 0..times.len() {
        let hc: Vec<f64> = values.iter().zip(&bundle.paths).map(|(v, p)| p.deflator[k] * v.consumption[k]).collect();
        let lo = hc.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = hc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        spread = spread.max((hi - lo) / hi.abs().max(1.0));
    }
    checks.push(Check::upper("deterministic_discounted_consumption", spread, 1e-12));

    let last = times.len() - 1;
    let costs: Vec<f64> = values
        .iter()
        .zip(&bundle.paths)
        .map(|(v, p)| {
            let income: Vec<f64> =
                times.iter().enumerate().map(|(k, &t)| sol.endowment.rate.eval(t, p.prices_at(k))).collect();
            strategy_cost(&times, &p.deflator, &v.consumption, &income, v.floor[last])
        })
        .collect();
    let feasibility = feasibility_check(sol.x, &costs, z_crit);
    checks.push(Check::upper("feasibility_bound", feasibility.z, z_crit));

    let deviation = homogeneity_gate(&sol.pref, sol.kind, sol.start_time, &ctx.solve_config(None))?;
    checks.push(Check::upper("homogeneity", deviation, ctx.config.tolerances.homogeneity));

    Ok(checks)
}

pub fn verify(ctx: &Context) -> CliResult<()> {
    let checks = run_checks(ctx)?;
    let mut table = ctx.create("verify.csv")?;
    writeln!(table, "name,statistic,threshold,verdict")?;
    println!("{:<38} {:>24} {:>12}  verdict", "check", "statistic", "threshold");
    for c in &checks {
        let verdict = if c.pass { "pass" } else { "fail" };
        writeln!(table, "{},{},{},{}", c.name, num(c.statistic), num(c.threshold), verdict)?;
        println!("{:<38} {:>24} {:>12}  {verdict}", c.name, num(c.statistic), num(c.threshold));
    }
    table.flush()?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    let mut results = toml::Table::new();
    results.insert("checks".into(), to_toml_int(checks.len() as u64));
    results.insert("failed".into(), to_toml_int(failed as u64));
    ctx.write_manifest("verify", results)?;
    if failed > 0 {
        return Err(CliError::VerifyFailed { failed, total: checks.len() });
    }
    Ok(())
}

/// Rate and volatility of a one-stock constant-coefficient market.
fn scalar_market(ctx: &Context) -> CliResult<(f64, f64)> {
    let market = ctx.config.market()?;
    let not_scalar = || CliError::Config("oracle needs a one-stock, one-factor market with constant coefficients".into());
    if market.n_stocks != 1 || market.n_brownian != 1 {
        return Err(not_scalar());
    }
    match (&market.rate, &market.vol, &market.drift, &market.dividend) {
        (Coef::Constant(r), Coef::Constant(v), Coef::Constant(_), Coef::Constant(_)) => Ok((*r, v[(0, 0)])),
        _ => Err(not_scalar()),
    }
}

pub fn oracle(ctx: &Context) -> CliResult<()> {
    let oracle_cfg = &ctx.config.oracle;
    if let Some(&too_big) = oracle_cfg.periods.iter().find(|&&n| n == 0 || n > MAX_BINOMIAL_PERIODS) {
        return Err(CliError::Config(format!(
            "oracle.periods: {too_big} outside 1..={MAX_BINOMIAL_PERIODS} (every path is enumerated)"
        )));
    }
    let (rate, sigma) = scalar_market(ctx)?;
    if ctx.config.endowment()?.is_zero().then_some(()).is_none() {
        return Err(CliError::Config("oracle runs need endowment.kind = \"zero\"".into()));
    }
    let sol = ctx.solve_problem()?;
    if sol.branch != Branch::Interior {
        return Err(CliError::Config("oracle needs wealth above the floor".into()));
    }
    let tol = ctx.config.tolerances.oracle;
    let mut table = ctx.create("oracle.csv")?;
    writeln!(table, "periods,v_solver,v_oracle,abs_dv,node_dv,verdict")?;
    println!("{:>7} {:>24} {:>24} {:>12} {:>12}  verdict", "periods", "V solver", "V oracle", "|dV|", "node |dV|");
    let mut worst: f64 = 0.0;
    for &n in &oracle_cfg.periods {
        let bin = BinomialMarket::from_volatility(n, ctx.config.market.horizon, rate, sigma, oracle_cfg.p_up)?;
        let report = binomial_oracle(&bin, &sol.pref, sol.kind, sol.x)?;
        let dv = (sol.value - report.collapsed.value).abs();
        let node_dv = (report.node_value - report.collapsed.value).abs();
        let ok = dv <= tol && node_dv <= tol;
        worst = worst.max(dv).max(node_dv);
        let verdict = if ok { "pass" } else { "fail" };
        writeln!(table, "{n},{},{},{},{},{verdict}", num(sol.value), num(report.collapsed.value), num(dv), num(node_dv))?;
        println!(
            "{n:>7} {:>24} {:>24} {:>12.3e} {:>12.3e}  {verdict}",
            num(sol.value),
            num(report.collapsed.value),
            dv,
            node_dv
        );
    }
    table.flush()?;
    let mut results = toml::Table::new();
    results.insert("max_abs_dv".into(), num(worst).into());
    ctx.write_manifest("oracle", results)?;
    if worst > tol || worst.is_nan() {
        return Err(CliError::OracleMismatch { worst, tol });
    }
    Ok(())
}
