//! State preference structures `(U1, U2)`: running utility over discounted
//! consumption and terminal utility over discounted wealth, their marginal
//! inverses, the aggregate demand `X(t, y) = I2(y) + int_t^T I1(t', y) dt'`
//! and its inverse, homogeneity coefficients and the convex-duality gap.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{adaptive_simpson, invert_decreasing, RootOptions};
use crate::optimizer::ProblemKind;

/// Absolute/relative tolerance for quadrature of custom preferences.
pub const TOL_QUAD: f64 = 1e-10;
const QUAD_DEPTH: u32 = 20;

/// Positive time weight `h` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Constant(f64),
    /// Polynomial coefficients `c0 + c1 t + c2 t^2 + ...`.
    Poly(Vec<f64>),
    /// `(t, h(t))` knots with linear interpolation, flat beyond the ends.
    Table(Vec<(f64, f64)>),
}

impl Weight {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Weight::Constant(v) => *v,
            Weight::Poly(c) => c.iter().rev().fold(0.0, |acc, a| acc * t + a),
            Weight::Table(knots) => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = knots.partition_point(|(s, _)| *s <= t);
                let (t0, h0) = knots[k - 1];
                let (t1, h1) = knots[k];
                h0 + (h1 - h0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Exact `int_a^b h`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Weight::Constant(v) => v * (b - a),
            Weight::Poly(c) => {
                let anti = |t: f64| c.iter().enumerate().rev().fold(0.0, |acc, (k, ck)| acc * t + ck / (k + 1) as f64) * t;
                anti(b) - anti(a)
            }
            Weight::Table(knots) => {
                let mut pts = vec![a];
                pts.extend(knots.iter().map(|k| k.0).filter(|&s| s > a && s < b));
                pts.push(b);
                pts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (self.eval(w[0]) + self.eval(w[1]))).sum()
            }
        }
    }

    /// `int_a^b h^q`; exact for constants, adaptive Simpson otherwise.
    pub fn power_integral(&self, q: f64, a: f64, b: f64) -> f64 {
        if q == 1.0 {
            return self.integral(a, b);
        }
        match self {
            Weight::Constant(v) => v.powf(q) * (b - a),
            _ => adaptive_simpson(|t| self.eval(t).powf(q), a, b, 1e-14, 30),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        if let Weight::Table(knots) = self {
            if knots.is_empty() || knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return Err(Error::Domain("weight table needs increasing knot times".into()));
            }
        }
        if let Weight::Poly(c) = self {
            if c.is_empty() {
                return Err(Error::Domain("empty weight polynomial".into()));
            }
        }
        for k in 0..=200 {
            let v = self.eval(horizon * k as f64 / 200.0);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("weight must be positive on [0, T], got {v}")));
            }
        }
        Ok(())
    }
}

/// A scaled one-dimensional utility: `scale * log x` or `scale * x^alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    Log { scale: f64 },
    Power { alpha: f64, scale: f64 },
}

impl Utility {
    /// `x^alpha / alpha`.
    pub fn crra(alpha: f64) -> Self {
        Utility::Power { alpha, scale: 1.0 / alpha }
    }

    pub fn log() -> Self {
        Utility::Log { scale: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Utility::Log { scale } if scale > 0.0 => Ok(()),
            Utility::Power { alpha, scale } if alpha > 0.0 && alpha < 1.0 && scale > 0.0 => Ok(()),
            _ => Err(Error::Domain(format!("invalid utility {self:?}"))),
        }
    }

    /// Extended to `x = 0` by continuity (`-inf` for log).
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Utility::Log { scale } => scale * x.ln(),
            Utility::Power { alpha, scale } => scale * x.powf(alpha),
        }
    }

    pub fn marginal(&self, x: f64) -> f64 {
        match *self {
            Utility::Log { scale } => scale / x,
            Utility::Power { alpha, scale } => scale * alpha * x.powf(alpha - 1.0),
        }
    }

    /// `I = (U')^{-1}`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        match *self {
            Utility::Log { scale } => scale / y,
            Utility::Power { alpha, scale } => (scale * alpha / y).powf(1.0 / (1.0 - alpha)),
        }
    }
}

pub type RunningFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied `(U1, I1)` and optional `(U2, I2)`. The caller guarantees
/// that `I1(t, .)` inverts `dU1/dx(t, .)`.
#[derive(Clone)]
pub struct CustomPreference {
    pub u1: RunningFn,
    pub i1: RunningFn,
    pub terminal: Option<(TerminalFn, TerminalFn)>,
}

#[derive(Clone)]
pub enum Family {
    /// `U1 = h(t) x^alpha`, `U2 = c x^alpha`.
    Power { alpha: f64 },
    /// `U1 = h(t) log x`, `U2 = c log x`.
    Log,
    /// `U1 = h(t) u(x / h(t))`, `U2 = c u(x / c)`.
    Separable { base: Utility },
    Custom(CustomPreference),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Power { .. } => "power",
            Family::Log => "log",
            Family::Separable { .. } => "separable",
            Family::Custom(_) => "custom",
        }
    }
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Power { alpha } => f.debug_struct("Power").field("alpha", alpha).finish(),
            Family::Log => f.write_str("Log"),
            Family::Separable { base } => f.debug_struct("Separable").field("base", base).finish(),
            Family::Custom(c) => f.debug_struct("Custom").field("terminal", &c.terminal.is_some()).finish(),
        }
    }
}

/// Coefficients of the linear maps `alpha(s,t)` and `alpha^I(t,t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneityCoefficients {
    pub alpha_st: f64,
    pub alpha_i_t: f64,
}

#[derive(Debug, Clone)]
pub struct StatePreference {
    pub family: Family,
    pub h: Weight,
    /// Weight `c` of the terminal utility; zero removes the terminal term.
    pub bequest: f64,
    pub horizon: f64,
}

impl StatePreference {
    pub fn power(alpha: f64, h: Weight, bequest: f64, horizon: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("power exponent must lie in (0, 1), got {alpha}")));
        }
        Self::build(Family::Power { alpha }, h, bequest, horizon)
    }

    pub fn log(h: Weight, bequest: f64, horizon: f64) -> Result<Self> {
        Self::build(Family::Log, h, bequest, horizon)
    }

    pub fn separable(base: Utility, h: Weight, bequest: f64, horizon: f64) -> Result<Self> {
        base.validate()?;
        Self::build(Family::Separable { base }, h, bequest, horizon)
    }

    pub fn custom(custom: CustomPreference, horizon: f64) -> Result<Self> {
        Self::build(Family::Custom(custom), Weight::Constant(1.0), 0.0, horizon)
    }

    fn build(family: Family, h: Weight, bequest: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if !(bequest >= 0.0) || !bequest.is_finite() {
            return Err(Error::Domain(format!("bequest weight must be nonnegative, got {bequest}")));
        }
        h.validate(horizon)?;
        Ok(Self { family, h, bequest, horizon })
    }

    pub fn has_terminal(&self) -> bool {
        match &self.family {
            Family::Custom(c) => c.terminal.is_some(),
            _ => self.bequest > 0.0,
        }
    }

    /// `1 / (1 - alpha)` for the power family, 1 otherwise.
    fn beta(&self) -> f64 {
        match self.family {
            Family::Power { alpha } => 1.0 / (1.0 - alpha),
            _ => 1.0,
        }
    }

    pub fn u1(&self, t: f64, x: f64) -> f64 {
        let h = self.h.eval(t);
        match &self.family {
            Family::Power { alpha } => h * x.powf(*alpha),
            Family::Log => h * x.ln(),
            Family::Separable { base } => h * base.value(x / h),
            Family::Custom(c) => (c.u1)(t, x),
        }
    }

    /// `dU1/dx`; central difference with step `1e-6 x` for custom families.
    pub fn marginal_u1(&self, t: f64, x: f64) -> f64 {
        let h = self.h.eval(t);
        match &self.family {
            Family::Power { alpha } => h * alpha * x.powf(alpha - 1.0),
            Family::Log => h / x,
            Family::Separable { base } => base.marginal(x / h),
            Family::Custom(c) => {
                let dx = 1e-6 * x;
                ((c.u1)(t, x + dx) - (c.u1)(t, x - dx)) / (2.0 * dx)
            }
        }
    }

    pub fn i1(&self, t: f64, y: f64) -> f64 {
        let h = self.h.eval(t);
        match &self.family {
            Family::Power { alpha } => (alpha * h / y).powf(1.0 / (1.0 - alpha)),
            Family::Log => h / y,
            Family::Separable { base } => h * base.inverse_marginal(y),
            Family::Custom(c) => (c.i1)(t, y),
        }
    }

    /// Terminal utility; zero when there is no terminal term.
    pub fn u2(&self, x: f64) -> f64 {
        if !self.has_terminal() {
            return 0.0;
        }
        let c = self.bequest;
        match &self.family {
            Family::Power { alpha } => c * x.powf(*alpha),
            Family::Log => c * x.ln(),
            Family::Separable { base } => c * base.value(x / c),
            Family::Custom(cp) => (cp.terminal.as_ref().unwrap().0)(x),
        }
    }

    pub fn i2(&self, y: f64) -> f64 {
        if !self.has_terminal() {
            return 0.0;
        }
        let c = self.bequest;
        match &self.family {
            Family::Power { alpha } => (alpha * c / y).powf(1.0 / (1.0 - alpha)),
            Family::Log => c / y,
            Family::Separable { base } => c * base.inverse_marginal(y),
            Family::Custom(cp) => (cp.terminal.as_ref().unwrap().1)(y),
        }
    }

    /// For closed-form families `X(t, y) = K(t) g(y)`; this is `g`.
    fn demand_shape(&self, y: f64) -> f64 {
        match &self.family {
            Family::Power { alpha } => (alpha / y).powf(self.beta()),
            Family::Log => 1.0 / y,
            Family::Separable { base } => base.inverse_marginal(y),
            Family::Custom(_) => unreachable!("custom preferences have no closed-form demand"),
        }
    }

    /// `int_t^T h^beta`, the running part of `K(t)`.
    fn running_weight(&self, t: f64) -> f64 {
        self.h.power_integral(self.beta(), t, self.horizon)
    }

    /// `c^beta`, the terminal part of `K(t)`.
    fn terminal_weight(&self) -> f64 {
        if self.has_terminal() {
            self.bequest.powf(self.beta())
        } else {
            0.0
        }
    }

    fn demand_weight(&self, kind: ProblemKind, t: f64) -> f64 {
        match kind {
            ProblemKind::Both => self.terminal_weight() + self.running_weight(t),
            ProblemKind::ConsumptionOnly => self.running_weight(t),
            ProblemKind::TerminalOnly => self.terminal_weight(),
        }
    }

    fn check_kind(&self, kind: ProblemKind) -> Result<()> {
        if kind == ProblemKind::TerminalOnly && !self.has_terminal() {
            return Err(Error::Domain("terminal-wealth problem needs a terminal utility (bequest weight > 0)".into()));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    /// Aggregate demand for the given problem: `X`, `X1 = int I1` or `X2 = I2`.
    pub fn capital_x_for(&self, kind: ProblemKind, t: f64, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("multiplier must be positive, got {y}")));
        }
        self.check_time(t)?;
        self.check_kind(kind)?;
        Ok(match &self.family {
            Family::Custom(_) => {
                let running = || {
                    let scale = 0.5 * (self.i1(t, y) + self.i1(self.horizon, y)).abs() * (self.horizon - t);
                    let tol = TOL_QUAD * scale.max(f64::MIN_POSITIVE);
                    adaptive_simpson(|s| self.i1(s, y), t, self.horizon, tol, QUAD_DEPTH)
                };
                match kind {
                    ProblemKind::Both => self.i2(y) + running(),
                    ProblemKind::ConsumptionOnly => running(),
                    ProblemKind::TerminalOnly => self.i2(y),
                }
            }
            _ => self.demand_weight(kind, t) * self.demand_shape(y),
        })
    }

    pub fn capital_x(&self, t: f64, y: f64) -> Result<f64> {
        self.capital_x_for(ProblemKind::Both, t, y)
    }

    /// Solves `X_kind(t, y) = x` for `y`.
    pub fn invert_x_for(&self, kind: ProblemKind, t: f64, x: f64) -> Result<f64> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Domain(format!("wealth to invert must be positive, got {x}")));
        }
        self.check_time(t)?;
        self.check_kind(kind)?;
        invert_decreasing(|y| self.capital_x_for(kind, t, y).unwrap_or(f64::NAN), x, RootOptions::default())
    }

    pub fn invert_x(&self, t: f64, x: f64) -> Result<f64> {
        self.invert_x_for(ProblemKind::Both, t, x)
    }

    /// Closed-form `alpha_{s,t}` and `alpha^I_t`.
    pub fn homogeneity_coefficients(&self, s: f64, t: f64) -> Result<HomogeneityCoefficients> {
        if let Family::Custom(_) = self.family {
            return Err(Error::UnsupportedFamily("custom"));
        }
        self.check_time(s)?;
        self.check_time(t)?;
        let ks = self.demand_weight(ProblemKind::Both, s);
        let kt = self.demand_weight(ProblemKind::Both, t);
        if !(kt > 0.0) {
            return Err(Error::Domain(format!("no remaining demand weight at t={t}")));
        }
        Ok(HomogeneityCoefficients { alpha_st: ks / kt, alpha_i_t: self.h.eval(t).powf(self.beta()) / kt })
    }

    /// `int_s^T U1(t, I1(t, y)) dt`.
    pub fn running_value(&self, s: f64, y: f64) -> f64 {
        let horizon = self.horizon;
        match &self.family {
            Family::Power { alpha } => (alpha / y).powf(alpha * self.beta()) * self.running_weight(s),
            Family::Log => match self.h {
                Weight::Constant(h) => h * (h / y).ln() * (horizon - s),
                _ => adaptive_simpson(|t| self.u1(t, self.i1(t, y)), s, horizon, 1e-13, 30),
            },
            Family::Separable { base } => base.value(base.inverse_marginal(y)) * self.h.integral(s, horizon),
            Family::Custom(_) => adaptive_simpson(|t| self.u1(t, self.i1(t, y)), s, horizon, TOL_QUAD, QUAD_DEPTH),
        }
    }

    /// `U2(I2(y))`, zero without a terminal term.
    pub fn terminal_value(&self, y: f64) -> f64 {
        if self.has_terminal() {
            self.u2(self.i2(y))
        } else {
            0.0
        }
    }
}

fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    if scale == 0.0 {
        return 0.0;
    }
    (max - min) / scale
}

/// Ratios `alpha(s,t)(x)/x` and `alpha^I(s,s)(x)/x` over `x_grid`.
pub fn homogeneity_ratios(pref: &StatePreference, kind: ProblemKind, s: f64, t: f64, x_grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut alpha = Vec::with_capacity(x_grid.len());
    let mut alpha_i = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        if s == t {
            // alpha(s, s) is the identity map
            alpha.push(1.0);
        } else {
            let y_t = pref.invert_x_for(kind, t, x)?;
            alpha.push(pref.capital_x_for(kind, s, y_t)? / x);
        }
        if kind != ProblemKind::TerminalOnly {
            let y_s = pref.invert_x_for(kind, s, x)?;
            alpha_i.push(pref.i1(s, y_s) / x);
        }
    }
    Ok((alpha, alpha_i))
}

/// Maximum relative spread over `x_grid` of `alpha(s,t)(x)/x` and of
/// `alpha^I(s,s)(x)/x`, using the aggregate demand of problem `kind`.
pub fn verify_homogeneity_for(pref: &StatePreference, kind: ProblemKind, s: f64, t: f64, x_grid: &[f64]) -> Result<f64> {
    let (alpha, alpha_i) = homogeneity_ratios(pref, kind, s, t, x_grid)?;
    let mut dev = relative_spread(&alpha);
    if !alpha_i.is_empty() {
        dev = dev.max(relative_spread(&alpha_i));
    }
    Ok(dev)
}

pub fn verify_homogeneity(pref: &StatePreference, s: f64, t: f64, x_grid: &[f64]) -> Result<f64> {
    verify_homogeneity_for(pref, ProblemKind::Both, s, t, x_grid)
}

/// `max_x (U(x) - x y) - (U(I(y)) - y I(y))` over `x_grid`; never positive
/// beyond roundoff.
pub fn duality_gap(u: &Utility, y: f64, x_grid: &[f64]) -> f64 {
    let i = u.inverse_marginal(y);
    let sup = u.value(i) - y * i;
    let grid_max = x_grid.iter().map(|&x| u.value(x) - x * y).fold(f64::NEG_INFINITY, f64::max);
    grid_max - sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn log_pref(c: f64, t: f64) -> StatePreference {
        StatePreference::log(Weight::Constant(1.0), c, t).unwrap()
    }

    #[test]
    fn log_demand_closed_form() {
        let p = log_pref(1.0, 1.0);
        assert_relative_eq!(p.capital_x(0.0, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.invert_x(0.0, 4.0).unwrap(), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn power_demand_closed_form() {
        let p = StatePreference::power(0.5, Weight::Constant(1.0), 0.0, 1.0).unwrap();
        assert_relative_eq!(p.capital_x(0.0, 1.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.i1(0.3, 1.0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.invert_x(0.0, 0.25).unwrap(), 1.0, max_relative = 1e-13);
    }

    #[test]
    fn demand_at_horizon_is_terminal_inverse() {
        let prefs = [
            log_pref(0.7, 2.0),
            StatePreference::power(0.3, Weight::Poly(vec![1.0, 0.5]), 1.5, 2.0).unwrap(),
            StatePreference::separable(Utility::crra(0.4), Weight::Constant(2.0), 0.8, 2.0).unwrap(),
        ];
        for p in &prefs {
            for y in [0.1, 1.0, 7.0] {
                assert_relative_eq!(p.capital_x(2.0, y).unwrap(), p.i2(y), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn domain_errors() {
        let p = log_pref(1.0, 1.0);
        assert!(matches!(p.capital_x(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(p.capital_x(0.0, -1.0), Err(Error::Domain(_))));
        assert!(matches!(p.invert_x(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(p.capital_x(1.5, 1.0), Err(Error::Domain(_))));
        assert!(StatePreference::power(1.0, Weight::Constant(1.0), 0.0, 1.0).is_err());
        assert!(StatePreference::log(Weight::Poly(vec![1.0, -2.0]), 0.0, 1.0).is_err());
        let no_terminal = log_pref(0.0, 1.0);
        assert!(no_terminal.capital_x_for(ProblemKind::TerminalOnly, 0.0, 1.0).is_err());
    }

    #[test]
    fn homogeneity_coefficients_log() {
        let p = log_pref(0.0, 1.0);
        let c = p.homogeneity_coefficients(0.0, 0.5).unwrap();
        assert_relative_eq!(c.alpha_st, 2.0, epsilon = 1e-15);
        let c = p.homogeneity_coefficients(0.0, 0.0).unwrap();
        assert_eq!(c.alpha_st, 1.0);
        assert_relative_eq!(c.alpha_i_t, 1.0, epsilon = 1e-15);
        assert!(matches!(p.homogeneity_coefficients(0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn homogeneity_coefficients_power_match_numeric_maps() {
        let p = StatePreference::power(0.6, Weight::Poly(vec![1.0, 0.3]), 0.5, 1.0).unwrap();
        let c = p.homogeneity_coefficients(0.2, 0.7).unwrap();
        let (alpha, _) = homogeneity_ratios(&p, ProblemKind::Both, 0.2, 0.7, &[0.5, 3.0]).unwrap();
        assert_relative_eq!(alpha[0], c.alpha_st, max_relative = 1e-9);
        let c0 = p.homogeneity_coefficients(0.2, 0.2).unwrap();
        let (_, alpha_i) = homogeneity_ratios(&p, ProblemKind::Both, 0.2, 0.2, &[0.5, 3.0]).unwrap();
        assert_relative_eq!(alpha_i[1], c0.alpha_i_t, max_relative = 1e-9);
    }

    #[test]
    fn custom_family_has_no_closed_coefficients() {
        let custom = CustomPreference {
            u1: Arc::new(|_, x: f64| x.ln()),
            i1: Arc::new(|_, y: f64| 1.0 / y),
            terminal: None,
        };
        let p = StatePreference::custom(custom, 1.0).unwrap();
        assert!(matches!(p.homogeneity_coefficients(0.0, 0.5), Err(Error::UnsupportedFamily("custom"))));
        // quadrature agrees with the log closed form
        assert_relative_eq!(p.capital_x(0.25, 2.0).unwrap(), 0.375, max_relative = 1e-10);
    }

    #[test]
    fn weight_integrals() {
        let poly = Weight::Poly(vec![1.0, 2.0, 3.0]);
        assert_relative_eq!(poly.integral(0.0, 1.0), 3.0, epsilon = 1e-15);
        let table = Weight::Table(vec![(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)]);
        assert_relative_eq!(table.eval(0.5), 2.0);
        assert_relative_eq!(table.integral(0.5, 2.0), 1.25 + 3.0, epsilon = 1e-15);
        assert_relative_eq!(Weight::Constant(2.0).power_integral(2.0, 0.0, 0.5), 2.0);
        assert_relative_eq!(poly.power_integral(1.5, 0.0, 1.0), adaptive_simpson(|t| poly.eval(t).powf(1.5), 0.0, 1.0, 1e-14, 30));
    }

    #[test]
    fn duality_gap_examples() {
        let grid: Vec<f64> = (0..=400).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 400.0)).collect();
        let gap = duality_gap(&Utility::log(), 1.0, &grid);
        assert!(gap <= 1e-12 && gap > -1e-12, "{gap}");
        let root = Utility::Power { alpha: 0.5, scale: 2.0 };
        assert_relative_eq!(root.inverse_marginal(1.0), 1.0);
        assert!(duality_gap(&root, 1.0, &grid) <= 1e-12);
        let u = Utility::log();
        assert_relative_eq!(u.value(u.inverse_marginal(10.0)) - 10.0 * u.inverse_marginal(10.0), -1.0 - 10f64.ln(), epsilon = 1e-14);
        assert!(duality_gap(&u, 10.0, &grid) <= 1e-12);
    }
}
