//! Small numerical kernels shared by the modules: order-stable summation,
//! sample statistics, adaptive quadrature and a monotone root finder.

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation. The split points depend only on the
/// length, so the result is independent of how the input was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, std_error: 0.0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let stats = SampleStats::from_samples(xs);
        Self { mean: stats.mean, std_error: stats.std_error() }
    }

    pub fn scale(self, k: f64) -> Self {
        Self { mean: self.mean * k, std_error: self.std_error * k.abs() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance (zero for a single sample).
    pub variance: f64,
}

impl SampleStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { n, mean: f64::NAN, variance: f64::NAN };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let variance = if n > 1 {
            let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
            pairwise_sum(&sq) / (n - 1) as f64
        } else {
            0.0
        };
        Self { n, mean, variance }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn std_error(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }
}

/// Trapezoidal rule on a (possibly non-uniform) grid.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(times.len(), values.len());
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Running trapezoidal integral; `out[k]` is the integral over `times[..=k]`.
pub fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..times.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (values[k] + values[k - 1]);
        out.push(acc);
    }
    out
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
///
/// Refinement stops on an interval when the Richardson error estimate is
/// below its share of `tol` or after `max_depth` halvings.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, max_depth: u32) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol || !delta.is_finite() {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Settings for [`invert_decreasing`].
#[derive(Debug, Clone, Copy)]
pub struct RootOptions {
    /// Required relative residual `|f(y) - target| / target`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Bracket search stops at `1/limit` and `limit`.
    pub bracket_limit: f64,
    pub expansion: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter: 200, bracket_limit: 1e8, expansion: 10.0 }
    }
}

/// Solves `f(y) = target` for a strictly decreasing positive `f` on
/// `(0, inf)`.
///
/// The bracket grows geometrically from `y = 1`; inside it, Newton steps on
/// `ln f` against `ln y` are taken whenever they stay inside the bracket,
/// otherwise the bracket is bisected in log space.
pub fn invert_decreasing<F: Fn(f64) -> f64>(f: F, target: f64, opts: RootOptions) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Domain(format!("inversion target must be positive, got {target}")));
    }
    let ln_target = target.ln();
    // g is decreasing in u = ln y
    let g = |u: f64| {
        let v = f(u.exp());
        if v <= 0.0 {
            f64::NEG_INFINITY
        } else {
            v.ln() - ln_target
        }
    };

    let step = opts.expansion.ln();
    let limit = opts.bracket_limit.ln();
    let mut lo = 0.0;
    let mut hi = 0.0;
    let g0 = g(0.0);
    if g0 == 0.0 {
        return Ok(1.0);
    }
    let (mut g_lo, mut g_hi);
    if g0 > 0.0 {
        g_lo = g0;
        g_hi = g0;
        while g_hi > 0.0 {
            lo = hi;
            g_lo = g_hi;
            hi += step;
            if hi > limit + 1e-9 {
                return Err(Error::Convergence {
                    what: format!("no bracket for target {target} below y = {:e}", opts.bracket_limit),
                    iterations: 0,
                });
            }
            g_hi = g(hi);
        }
    } else {
        g_hi = g0;
        g_lo = g0;
        while g_lo < 0.0 {
            hi = lo;
            g_hi = g_lo;
            lo -= step;
            if lo < -limit - 1e-9 {
                return Err(Error::Convergence {
                    what: format!("no bracket for target {target} above y = {:e}", 1.0 / opts.bracket_limit),
                    iterations: 0,
                });
            }
            g_lo = g(lo);
        }
    }
    if g_lo == 0.0 {
        return Ok(lo.exp());
    }
    if g_hi == 0.0 {
        return Ok(hi.exp());
    }

    let mut u = 0.5 * (lo + hi);
    for _ in 0..opts.max_iter {
        let gu = g(u);
        if gu.abs() <= 1e-15 {
            break;
        }
        if gu > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        if hi - lo <= 1e-15 * (1.0 + u.abs()) {
            break;
        }
        let h = 1e-6;
        let slope = (g(u + h) - g(u - h)) / (2.0 * h);
        let newton = u - gu / slope;
        u = if slope < 0.0 && newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let y = u.exp();
    let residual = (f(y) - target).abs() / target;
    if residual <= opts.rel_tol {
        Ok(y)
    } else {
        Err(Error::Convergence {
            what: format!("inversion residual {residual:e} for target {target}"),
            iterations: opts.max_iter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_exact_small_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn stats_of_known_sample() {
        let s = SampleStats::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_relative_eq!(s.variance, 5.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.std_error(), (5.0f64 / 12.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let v = adaptive_simpson(|x| x.exp(), 0.0, 1.0, 1e-12, 20);
        assert_relative_eq!(v, std::f64::consts::E - 1.0, epsilon = 1e-11);
        let v = adaptive_simpson(|x| 1.0 / x, 1.0, 10.0, 1e-12, 20);
        assert_relative_eq!(v, 10f64.ln(), epsilon = 1e-11);
    }

    #[test]
    fn trapezoid_exact_for_linear() {
        let t = [0.0, 0.3, 1.0];
        let v = [1.0, 1.6, 3.0];
        assert_relative_eq!(trapezoid(&t, &v), 2.0, epsilon = 1e-15);
        assert_eq!(cumulative_trapezoid(&t, &v).len(), 3);
    }

    #[test]
    fn inverts_power_law() {
        let y = invert_decreasing(|y| 2.0 / y, 4.0, RootOptions::default()).unwrap();
        assert_relative_eq!(y, 0.5, epsilon = 1e-12);
        let y = invert_decreasing(|y| y.powf(-5.0), 1e-20, RootOptions::default()).unwrap();
        assert_relative_eq!(y, 1e4, max_relative = 1e-11);
    }

    #[test]
    fn inversion_rejects_bad_targets() {
        assert!(matches!(
            invert_decreasing(|y| 1.0 / y, -1.0, RootOptions::default()),
            Err(Error::Domain(_))
        ));
        // 1/y never reaches 1e-10 within y <= 1e8
        assert!(matches!(
            invert_decreasing(|y| 1.0 / y, 1e-10, RootOptions::default()),
            Err(Error::Convergence { .. })
        ));
    }
}
