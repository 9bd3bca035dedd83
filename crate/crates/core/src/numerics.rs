//! Quadrature, monotone interpolation and bracketing root finders shared by
//! the embedding constructions.

use std::cell::Cell;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Stopping rule for [`integrate`]: a panel is accepted once its Richardson
/// error estimate is below `max(rel * |I|, abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const DEFAULT: Tolerance = Tolerance { rel: 1e-8, abs: 1e-14 };
    /// Relative-only tolerance for tail integrals whose value may be far
    /// below the default absolute floor.
    pub const TAIL: Tolerance = Tolerance { rel: 1e-11, abs: 1e-300 };
    pub const TIGHT: Tolerance = Tolerance { rel: 1e-12, abs: 1e-16 };
}

impl Default for Tolerance {
    fn default() -> Self {
        Self::DEFAULT
    }
}

const MAX_DEPTH: u32 = 50;
const INITIAL_PANELS: usize = 4;

/// Adaptive Simpson quadrature with Richardson correction.
///
/// Any NaN or infinite integrand value aborts with
/// [`Error::NonFiniteDensity`] carrying the offending abscissa.
pub fn integrate<F>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, tol).map(|v| -v);
    }
    let bad: Cell<Option<f64>> = Cell::new(None);
    let mut eval = |x: f64| {
        let v = f(x);
        if !v.is_finite() && bad.get().is_none() {
            bad.set(Some(x));
        }
        v
    };

    let h = (b - a) / INITIAL_PANELS as f64;
    let mut panels = Vec::with_capacity(INITIAL_PANELS);
    let mut coarse = 0.0;
    let mut f_left = eval(a);
    for i in 0..INITIAL_PANELS {
        let lo = a + h * i as f64;
        let hi = if i + 1 == INITIAL_PANELS { b } else { lo + h };
        let mid = 0.5 * (lo + hi);
        let fm = eval(mid);
        let fr = eval(hi);
        let s = (hi - lo) / 6.0 * (f_left + 4.0 * fm + fr);
        coarse += s;
        panels.push((lo, hi, f_left, fm, fr, s));
        f_left = fr;
    }
    if let Some(x) = bad.get() {
        return Err(Error::NonFiniteDensity { x });
    }
    let eps = (tol.rel * coarse.abs()).max(tol.abs) / INITIAL_PANELS as f64;
    let mut total = 0.0;
    for (lo, hi, fl, fm, fr, s) in panels {
        total += simpson_step(&mut eval, lo, hi, fl, fm, fr, s, eps, MAX_DEPTH);
    }
    if let Some(x) = bad.get() {
        return Err(Error::NonFiniteDensity { x });
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
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
    // Stop on convergence, exhausted depth, or when the panel can no longer be split.
    if depth == 0 || delta.abs() <= 15.0 * eps || !delta.is_finite() || lm <= a || rm >= b {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on [-1, 1].
fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl20() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| legendre_rule(20))
}

/// Fixed 20-point Gauss-Legendre rule. Never evaluates the endpoints, so it is
/// used where the integrand is only defined as a limit at one end.
pub fn gauss_legendre<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gl20();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes
        .iter()
        .zip(weights)
        .map(|(z, w)| w * f(mid + half * z))
        .sum::<f64>()
        * half
}

fn gl8() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| legendre_rule(8))
}

/// Nodes and weights of the 8-point Gauss-Legendre rule mapped to `[a, b]`,
/// for nested quadratures on short panels of a smooth integrand.
pub fn gauss_legendre8_points(a: f64, b: f64) -> [(f64, f64); 8] {
    let (nodes, weights) = gl8();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    std::array::from_fn(|i| (mid + half * nodes[i], half * weights[i]))
}

/// `n` points log-spaced on `[lo, hi]`, both endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

/// Bisection on a bracketing interval, to absolute width `xtol`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || flo.is_nan() || fhi.is_nan() {
        return Err(Error::NoBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= xtol || mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Piecewise-cubic Hermite interpolant whose slopes are limited so that the
/// interpolant is monotone on every interval where the data are.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneCubic {
    /// Builds the interpolant from knot values and (exact or estimated) slopes.
    pub fn with_slopes(x: Vec<f64>, y: Vec<f64>, mut d: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len() && y.len() == d.len());
        debug_assert!(x.windows(2).all(|w| w[0] < w[1]));
        let n = x.len();
        for i in 0..n - 1 {
            let delta = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
            if delta == 0.0 {
                d[i] = 0.0;
                d[i + 1] = 0.0;
                continue;
            }
            if d[i] * delta < 0.0 {
                d[i] = 0.0;
            }
            if d[i + 1] * delta < 0.0 {
                d[i + 1] = 0.0;
            }
            let a = d[i] / delta;
            let b = d[i + 1] / delta;
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                d[i] = t * a * delta;
                d[i + 1] = t * b * delta;
            }
        }
        Self { x, y, d }
    }

    /// Fritsch-Butland slope estimates (PCHIP).
    pub fn pchip(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        assert!(n >= 2);
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
            return Self::with_slopes(x, y, d);
        }
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Self::with_slopes(x, y, d)
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn slopes(&self) -> &[f64] {
        &self.d
    }

    pub fn x_min(&self) -> f64 {
        self.x[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.x.len();
        self.x.partition_point(|&k| k <= x).clamp(1, n - 1) - 1
    }

    /// Value at `x`; linear extrapolation with the end slopes outside the knots.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return self.y[0] + self.d[0] * (x - self.x[0]);
        }
        if x >= self.x[n - 1] {
            return self.y[n - 1] + self.d[n - 1] * (x - self.x[n - 1]);
        }
        self.eval_in(self.segment(x), x)
    }

    fn eval_in(&self, i: usize, x: f64) -> f64 {
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return self.d[0];
        }
        if x >= self.x[n - 1] {
            return self.d[n - 1];
        }
        let i = self.segment(x);
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let t2 = t * t;
        let dh00 = (6.0 * t2 - 6.0 * t) / h;
        let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
        let dh01 = (-6.0 * t2 + 6.0 * t) / h;
        let dh11 = 3.0 * t2 - 2.0 * t;
        dh00 * self.y[i] + dh10 * self.d[i] + dh01 * self.y[i + 1] + dh11 * self.d[i + 1]
    }

    /// Solves `eval(x) = target` for a monotone interpolant by locating the
    /// knot interval and bisecting the cubic inside it. Targets outside the
    /// knot range are resolved on the linear extrapolation.
    pub fn inverse(&self, target: f64, xtol: f64) -> f64 {
        let n = self.x.len();
        let increasing = self.y[n - 1] >= self.y[0];
        let (first, last) = (self.y[0], self.y[n - 1]);
        let before = if increasing { target <= first } else { target >= first };
        let after = if increasing { target >= last } else { target <= last };
        if before {
            return if self.d[0] != 0.0 {
                self.x[0] + (target - first) / self.d[0]
            } else {
                self.x[0]
            };
        }
        if after {
            return if self.d[n - 1] != 0.0 {
                self.x[n - 1] + (target - last) / self.d[n - 1]
            } else {
                self.x[n - 1]
            };
        }
        let i = if increasing {
            self.y.partition_point(|&v| v <= target)
        } else {
            self.y.partition_point(|&v| v >= target)
        }
        .clamp(1, n - 1)
            - 1;
        let (mut lo, mut hi) = (self.x[i], self.x[i + 1]);
        let sign = if increasing { 1.0 } else { -1.0 };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= xtol || mid <= lo || mid >= hi {
                break;
            }
            if sign * (self.eval_in(i, mid) - target) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_matches_closed_forms() {
        let v = integrate(|x| (-2.0 * x).exp(), 1.0, 30.0, Tolerance::TIGHT).unwrap();
        assert!((v - ((-2.0f64).exp() - (-60.0f64).exp()) / 2.0).abs() < 1e-12);
        let v = integrate(|x| x.sin(), 0.0, std::f64::consts::PI, Tolerance::TIGHT).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let v = integrate(|x| x * x, 2.0, 0.0, Tolerance::DEFAULT).unwrap();
        assert!((v + 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_reports_non_finite_integrand() {
        let err = integrate(|x| if x > 0.5 { f64::NAN } else { 1.0 }, 0.0, 1.0, Tolerance::DEFAULT);
        assert!(matches!(err, Err(Error::NonFiniteDensity { .. })));
    }

    #[test]
    fn eight_point_rule_is_exact_to_degree_fifteen() {
        let v: f64 = gauss_legendre8_points(-1.0, 3.0).iter().map(|(x, w)| w * x.powi(15)).sum();
        assert!((v - (3f64.powi(16) - 1.0) / 16.0).abs() < 1e-6 * 3f64.powi(16));
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let v = gauss_legendre(|x| x.powi(9) - 3.0 * x.powi(4), 0.0, 2.0);
        assert!((v - (1024.0 / 10.0 - 3.0 * 32.0 / 5.0)).abs() < 1e-11);
        let v = gauss_legendre(|x| (-x).exp(), 0.0, 0.5);
        assert!((v - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn bisect_finds_roots_and_rejects_bad_brackets() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
        assert!(matches!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-10), Err(Error::NoBracket { .. })));
    }

    #[test]
    fn hermite_with_exact_slopes_reproduces_cubics() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v * v + v).collect();
        let d: Vec<f64> = x.iter().map(|v| 3.0 * v * v + 1.0).collect();
        let c = MonotoneCubic::with_slopes(x, y, d);
        for &t in &[0.05, 0.77, 1.31, 2.69] {
            assert!((c.eval(t) - (t * t * t + t)).abs() < 1e-12);
            assert!((c.derivative(t) - (3.0 * t * t + 1.0)).abs() < 1e-10);
            assert!((c.inverse(t * t * t + t, 1e-14) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn pchip_preserves_monotonicity() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![0.0, 0.0, 0.1, 3.0, 3.05, 10.0];
        let c = MonotoneCubic::pchip(x, y);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=500 {
            let v = c.eval(i as f64 * 0.01);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn inverse_of_decreasing_interpolant() {
        let x: Vec<f64> = (0..250).map(|i| i as f64 * 0.02).collect();
        let y: Vec<f64> = x.iter().map(|v| (-v).exp()).collect();
        let d: Vec<f64> = x.iter().map(|v| -(-v).exp()).collect();
        let c = MonotoneCubic::with_slopes(x, y, d);
        let t = c.inverse((-1.234f64).exp(), 1e-14);
        assert!((t - 1.234).abs() < 1e-7);
    }
}
