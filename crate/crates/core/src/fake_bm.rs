//! Fake Brownian motion from a continuum of nested Vallois embeddings.
//!
//! For a peacock `(mu_t)` whose maps satisfy `phi_s <= phi_t` for `s <= t`, the
//! stopping times `tau_t` increase along a single Brownian path and
//! `X_t = B_{tau_t}` is a Markov martingale with marginals `mu_t`. With
//! `mu_t = N(0, t)` it is a fake Brownian motion.
//!
//! Maps are computed from the log-tail ratio
//! `psi_t(x) = int_0^x log(R_t(y) / R_t(x)) dy`, which is better conditioned in the
//! tail than the ratio `y mu(y) / R(y)`. Here `R_t(x) = mu_t([x, inf))`.

use serde::Serialize;

use crate::embedding::{embedding_grid, EmbeddingMap};
use crate::error::{Error, Result};
use crate::marginal::SymmetricMarginal;
use crate::numerics::{gauss_legendre, gauss_legendre8_points, log_grid};
use crate::simulate::{excess_kurtosis, ks_distance, mean_se, simulate_nested, Barrier, EmpiricalCDF, SimConfig};

/// Tolerance of the ordering check, relative to `max(1, psi)`.
pub const ORDERING_TOL: f64 = 1e-8;

/// Smooth test function with its derivative.
#[derive(Debug, Clone, Copy)]
pub struct TestFunction {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub derivative: fn(f64) -> f64,
}

impl TestFunction {
    pub fn constant() -> Self {
        Self { name: "one", value: |_| 1.0, derivative: |_| 0.0 }
    }

    pub fn identity() -> Self {
        Self { name: "id", value: |y| y, derivative: |_| 1.0 }
    }

    pub fn square() -> Self {
        Self { name: "square", value: |y| y * y, derivative: |y| 2.0 * y }
    }

    /// Five smooth functions used to cross-check the generator.
    pub fn suite() -> Vec<Self> {
        vec![
            Self::square(),
            Self { name: "quartic", value: |y| y.powi(4), derivative: |y| 4.0 * y.powi(3) },
            Self { name: "cos", value: f64::cos, derivative: |y| -y.sin() },
            Self { name: "bump", value: |y| (-y * y).exp(), derivative: |y| -2.0 * y * (-y * y).exp() },
            Self {
                name: "softplus",
                value: |y| y.max(0.0) + (-y.abs()).exp().ln_1p(),
                derivative: |y| 1.0 / (1.0 + (-y).exp()),
            },
        ]
    }
}

/// Embedding maps of a peacock on a time grid.
#[derive(Debug, Clone)]
pub struct PeacockFamily {
    horizon: f64,
    times: Vec<f64>,
    marginals: Vec<SymmetricMarginal>,
    maps: Vec<EmbeddingMap>,
    /// Map of `N(0, 1)` when the family is Gaussian; every time derives from it by scaling.
    unit: Option<EmbeddingMap>,
}

/// `psi_t` at an arbitrary admissible time: `psi_t(x) = scale * psi(x / scale)`.
#[derive(Debug, Clone, Copy)]
struct TimeMap<'a> {
    map: &'a EmbeddingMap,
    scale: f64,
}

impl TimeMap<'_> {
    fn psi(&self, x: f64) -> f64 {
        self.scale * self.map.psi(x / self.scale)
    }

    fn psi_derivative(&self, x: f64) -> f64 {
        self.map.psi_derivative(x / self.scale)
    }

    fn phi(&self, l: f64) -> f64 {
        self.scale * self.map.phi(l / self.scale)
    }

    fn gamma_at_x(&self, x: f64) -> f64 {
        self.map.gamma_at_x(x / self.scale)
    }

    fn gamma_at_x_derivative(&self, x: f64) -> f64 {
        self.map.gamma_at_x_derivative(x / self.scale) / self.scale
    }
}

impl PeacockFamily {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn maps(&self) -> &[EmbeddingMap] {
        &self.maps
    }

    pub fn marginals(&self) -> &[SymmetricMarginal] {
        &self.marginals
    }

    pub fn is_gaussian(&self) -> bool {
        self.unit.is_some()
    }

    fn grid_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * t.max(1.0))
    }

    fn time_map(&self, t: f64) -> Result<TimeMap<'_>> {
        if !(t > 0.0) {
            return Err(Error::Config(format!("time must be positive, got {t}")));
        }
        if let Some(unit) = &self.unit {
            return Ok(TimeMap { map: unit, scale: t.sqrt() });
        }
        match self.grid_index(t) {
            Some(k) => Ok(TimeMap { map: &self.maps[k], scale: 1.0 }),
            None => Err(Error::Config(format!("time {t} is not on the family's grid"))),
        }
    }

    /// `psi_t(x)`; any `t > 0` for Gaussian families, grid times otherwise.
    pub fn psi(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.time_map(t)?.psi(x.abs()))
    }

    /// `d psi_t(x) / dt`. Gaussian families use the scaling form
    /// `(psi_1(u) - u psi_1'(u)) / (2 sqrt t)` with `u = x / sqrt t`; others a
    /// centered difference across neighbouring grid times.
    pub fn dpsi_dt(&self, t: f64, x: f64) -> Result<f64> {
        let x = x.abs();
        if let Some(unit) = &self.unit {
            let r = t.sqrt();
            let u = x / r;
            return Ok((unit.psi(u) - u * unit.psi_derivative(u)) / (2.0 * r));
        }
        let k = self
            .grid_index(t)
            .ok_or_else(|| Error::Config(format!("time {t} is not on the family's grid")))?;
        if k == 0 || k + 1 == self.times.len() {
            return Err(Error::Config(format!("time {t} is not interior to the grid")));
        }
        Ok((self.maps[k + 1].psi(x) - self.maps[k - 1].psi(x)) / (self.times[k + 1] - self.times[k - 1]))
    }

    /// Largest `|psi_t(x) - sqrt(t) psi_1(x / sqrt t)| / max(1, psi_t(x))` over the
    /// knots of every grid map; `None` for non-Gaussian families.
    pub fn scaling_error(&self) -> Option<f64> {
        let unit = self.unit.as_ref()?;
        let mut worst: f64 = 0.0;
        for (t, map) in self.times.iter().zip(&self.maps) {
            let r = t.sqrt();
            for (&x, &p) in map.grid().iter().zip(map.psi_knots()) {
                let scaled = r * unit.psi(x / r);
                worst = worst.max((p - scaled).abs() / p.max(1.0));
            }
        }
        Some(worst)
    }
}

/// Map of a marginal from the log-tail ratio. `Gamma = -log(2 R)` is exact.
pub fn log_tail_map(m: &SymmetricMarginal) -> Result<EmbeddingMap> {
    let grid = embedding_grid(m.x_max());
    let table = m.mass_table(&grid)?;
    let tail = |y: f64| m.closed_form_tail(y).unwrap_or_else(|| table.tail(y));
    let n = grid.len();
    let (mut psi, mut dpsi, mut gamma, mut dgamma) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut cum = 0.0;
    for j in 0..n {
        if j > 0 {
            cum += gauss_legendre(|y| tail(y).ln(), grid[j - 1], grid[j]);
        }
        let x = grid[j];
        let r = tail(x);
        if !(r > 0.0) {
            return Err(Error::InvalidDensity(format!("tail mass vanishes at x = {x}")));
        }
        psi[j] = cum - x * r.ln();
        gamma[j] = -(2.0 * r).ln();
        dgamma[j] = m.density(x) / r;
        dpsi[j] = x * dgamma[j];
    }
    psi[0] = 0.0;
    gamma[0] = 0.0;
    Ok(EmbeddingMap::from_knots(grid, psi, dpsi, gamma, dgamma))
}

/// Fails when `psi_t(x)` is not nonincreasing in `t` on a probe grid.
pub fn check_ordering(times: &[f64], maps: &[EmbeddingMap]) -> Result<()> {
    let x_hi = maps.iter().map(|m| m.x_max()).fold(f64::INFINITY, f64::min);
    let probe = log_grid(1e-3 * x_hi, x_hi, 256);
    for k in 0..maps.len().saturating_sub(1) {
        for &x in &probe {
            let (a, b) = (maps[k].psi(x), maps[k + 1].psi(x));
            if b - a > ORDERING_TOL * a.max(1.0) {
                return Err(Error::OrderingViolation(format!(
                    "psi_t({x:.6}) increases from {a:.10e} at t = {} to {b:.10e} at t = {}",
                    times[k],
                    times[k + 1]
                )));
            }
        }
    }
    Ok(())
}

/// Gaussian peacock `N(0, t)` on `t_k = T (k + 1) / n_times`, `k = 0..n_times`.
pub fn build_peacock(horizon: f64, n_times: usize) -> Result<PeacockFamily> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    if n_times < 2 {
        return Err(Error::Config(format!("need at least two times, got {n_times}")));
    }
    let times: Vec<f64> = (1..=n_times).map(|k| horizon * k as f64 / n_times as f64).collect();
    let marginals = times.iter().map(|&t| SymmetricMarginal::gaussian(t)).collect::<Result<Vec<_>>>()?;
    let maps = marginals.iter().map(log_tail_map).collect::<Result<Vec<_>>>()?;
    check_ordering(&times, &maps)?;
    let unit = log_tail_map(&SymmetricMarginal::gaussian(1.0)?)?;
    Ok(PeacockFamily { horizon, times, marginals, maps, unit: Some(unit) })
}

/// Family from user-supplied marginals at increasing times.
pub fn peacock_from_marginals(times: Vec<f64>, marginals: Vec<SymmetricMarginal>) -> Result<PeacockFamily> {
    if times.len() != marginals.len() || times.len() < 2 {
        return Err(Error::Config("need matching times and marginals, at least two".into()));
    }
    if times[0] <= 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("times must be positive and increasing".into()));
    }
    let maps = marginals.iter().map(log_tail_map).collect::<Result<Vec<_>>>()?;
    check_ordering(&times, &maps)?;
    Ok(PeacockFamily { horizon: *times.last().unwrap(), times, marginals, maps, unit: None })
}

/// `E[f(X_s) | X_t = x]` for `t < s`, from the exit law of the time-`s` barrier
/// started at `(x, l)` with `l = psi_t(|x|)`:
///
/// ```text
/// E = (f(p) - c) / p * x^+ + (f(-p) - c) / p * x^- + c,   p = phi_s(l)
/// c = exp(Gamma_s(p)) / 2 * int_p^inf (f(y) + f(-y)) Gamma_s'(y) exp(-Gamma_s(y)) dy
/// ```
pub fn conditional_expectation(fam: &PeacockFamily, f: &TestFunction, x: f64, t: f64, s: f64) -> Result<f64> {
    if !(s > t) {
        return Err(Error::Config(format!("need t < s, got t = {t}, s = {s}")));
    }
    let (mt, ms) = (fam.time_map(t)?, fam.time_map(s)?);
    let l = mt.psi(x.abs());
    let p = ms.phi(l);
    let even = |y: f64| (f.value)(y) + (f.value)(-y);

    let knots = ms.map.grid();
    let top = ms.scale * ms.map.x_max();
    let c = if p >= top {
        0.5 * even(p)
    } else {
        let weight = |y: f64| even(y) * ms.gamma_at_x_derivative(y) * (ms.gamma_at_x(p) - ms.gamma_at_x(y)).exp();
        let first = knots.partition_point(|&u| ms.scale * u <= p);
        let mut acc = 0.0;
        let mut a = p;
        for &u in &knots[first..] {
            let b = ms.scale * u;
            for (y, w) in gauss_legendre8_points(a, b) {
                acc += w * weight(y);
            }
            a = b;
        }
        // remaining mass beyond the last knot, at the last value
        acc += even(top) * (ms.gamma_at_x(p) - ms.gamma_at_x(top)).exp();
        0.5 * acc
    };
    if p == 0.0 {
        return Ok(c);
    }
    Ok(((f.value)(p) - c) / p * x.max(0.0) + ((f.value)(-p) - c) / p * (-x).max(0.0) + c)
}

/// Generator of the fake Brownian motion at `(t, x)`, `x != 0`:
///
/// ```text
/// L_t f(x) = -(d_t psi_t / d_x psi_t)(|x|)
///            * ( sgn(x) f'(x) - exp(Gamma_t(|x|)) / (2|x|) * int_|x|^inf (f(y) + f(-y) - 2 f(x)) d exp(-Gamma_t(y)) )
/// ```
///
/// The Stieltjes integral differences `exp(-Gamma_t)` exactly at the map knots
/// and evaluates the integrand at segment midpoints; the mass beyond the last
/// knot is charged at the last knot.
pub fn generator_apply(fam: &PeacockFamily, f: &TestFunction, t: f64, x: f64) -> Result<f64> {
    if x == 0.0 {
        return Err(Error::ZeroSpot);
    }
    let ax = x.abs();
    let mt = fam.time_map(t)?;
    let ratio = fam.dpsi_dt(t, ax)? / mt.psi_derivative(ax);
    let fx = (f.value)(x);
    let g = |y: f64| (f.value)(y) + (f.value)(-y) - 2.0 * fx;

    // exp(Gamma_t(|x|)) folded into every difference to keep the terms O(1)
    let g0 = mt.gamma_at_x(ax);
    let knots = mt.map.grid();
    let values = mt.map.gamma_knots();
    let first = knots.partition_point(|&u| mt.scale * u <= ax);
    let mut sum = 0.0;
    let (mut a, mut ea) = (ax, 1.0);
    for (&u, &gk) in knots[first..].iter().zip(&values[first..]) {
        let b = mt.scale * u;
        let eb = (g0 - gk).exp();
        sum += g(0.5 * (a + b)) * (eb - ea);
        a = b;
        ea = eb;
    }
    sum -= g(a) * ea;

    let sign = if x > 0.0 { 1.0 } else { -1.0 };
    let jump = sum / (2.0 * ax);
    Ok(-ratio * (sign * (f.derivative)(x) - jump))
}

/// Values of `X_t` along simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeBmPaths {
    pub times: Vec<f64>,
    /// `values[i][k] = X_{t_k}` on path `i`.
    pub values: Vec<Vec<f64>>,
    pub censored: Vec<bool>,
}

impl FakeBmPaths {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }

    pub fn censor_rate(&self) -> f64 {
        self.censored.iter().filter(|&&c| c).count() as f64 / self.censored.len().max(1) as f64
    }
}

/// One Brownian path per sample, stopped successively at each grid time's
/// barrier with a single running local time.
pub fn simulate_fake_bm(fam: &PeacockFamily, cfg: &SimConfig) -> Result<FakeBmPaths> {
    check_ordering(&fam.times, &fam.maps)?;
    let barriers: Vec<&dyn Barrier> = fam.maps.iter().map(|m| m as &dyn Barrier).collect();
    let runs = simulate_nested(&barriers, cfg)?;
    let censored = runs.iter().map(|r| r.iter().any(|s| s.censored)).collect();
    let values = runs.into_iter().map(|r| r.into_iter().map(|s| s.b_tau).collect()).collect();
    Ok(FakeBmPaths { times: fam.times.clone(), values, censored })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalFit {
    pub t: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FakeBmDiagnostics {
    pub marginals: Vec<MarginalFit>,
    /// Times of the increment `X_to - X_from` summarized below.
    pub increment_from: f64,
    pub increment_to: f64,
    pub increment_mean: f64,
    pub increment_mean_se: f64,
    pub increment_excess_kurtosis: f64,
    pub increment_excess_kurtosis_se: f64,
    pub censor_rate: f64,
}

/// KS fit of every marginal (outside `exclusion`) and moments of the increment
/// between grid indices `from` and `to`.
pub fn diagnose(
    fam: &PeacockFamily,
    paths: &FakeBmPaths,
    exclusion: Option<(f64, f64)>,
    from: usize,
    to: usize,
) -> Result<FakeBmDiagnostics> {
    let n_times = fam.times.len();
    if from >= n_times || to >= n_times || from >= to {
        return Err(Error::Config(format!("bad increment indices {from} -> {to}")));
    }
    let marginals = (0..n_times)
        .map(|k| {
            let emp = EmpiricalCDF::new(paths.column(k));
            Ok(MarginalFit { t: fam.times[k], ks: ks_distance(&emp, &fam.marginals[k], exclusion)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let inc: Vec<f64> = paths.values.iter().map(|v| v[to] - v[from]).collect();
    let (mean, se) = mean_se(&inc);
    let (kurt, kurt_se) = excess_kurtosis(&inc);
    Ok(FakeBmDiagnostics {
        marginals,
        increment_from: fam.times[from],
        increment_to: fam.times[to],
        increment_mean: mean,
        increment_mean_se: se,
        increment_excess_kurtosis: kurt,
        increment_excess_kurtosis_se: kurt_se,
        censor_rate: paths.censor_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family() -> PeacockFamily {
        build_peacock(1.0, 4).unwrap()
    }

    #[test]
    fn grid_times_and_zero_start() {
        let fam = family();
        assert_eq!(fam.times(), &[0.25, 0.5, 0.75, 1.0]);
        for t in fam.times() {
            assert_eq!(fam.psi(*t, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_tail_map_agrees_with_ratio_form() {
        let m = SymmetricMarginal::gaussian(1.0).unwrap();
        let a = log_tail_map(&m).unwrap();
        let b = crate::embedding::build_psi(&m).unwrap();
        for &x in &[0.01, 0.3, 1.0, 2.5, 5.0] {
            assert!((a.psi(x) - b.psi(x)).abs() < 1e-9 * b.psi(x).max(1.0), "x={x}");
            assert!((a.gamma_at_x(x) - b.gamma_at_x(x)).abs() < 1e-9 * b.gamma_at_x(x).max(1.0), "x={x}");
        }
    }

    #[test]
    fn scaling_holds_on_the_grid() {
        let err = family().scaling_error().unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn psi_decreases_in_time() {
        let fam = family();
        let vals: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|&t| fam.psi(t, 1.0).unwrap()).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn shrinking_variances_violate_ordering() {
        let marginals = vec![SymmetricMarginal::gaussian(1.0).unwrap(), SymmetricMarginal::gaussian(0.5).unwrap()];
        let err = peacock_from_marginals(vec![0.5, 1.0], marginals).unwrap_err();
        assert!(matches!(err, Error::OrderingViolation(_)), "{err}");
    }

    #[test]
    fn conditional_expectation_examples() {
        let fam = family();
        for &(x, t, s) in &[(0.0, 0.25, 1.0), (0.4, 0.25, 0.5), (-1.3, 0.5, 0.75)] {
            let one = conditional_expectation(&fam, &TestFunction::constant(), x, t, s).unwrap();
            assert!((one - 1.0).abs() < 1e-10, "{one}");
            let id = conditional_expectation(&fam, &TestFunction::identity(), x, t, s).unwrap();
            assert!((id - x).abs() < 1e-10, "{id} vs {x}");
        }
        let var = conditional_expectation(&fam, &TestFunction::square(), 0.0, 0.25, 1.0).unwrap();
        assert!((var - 1.0).abs() < 1e-8, "{var}");
    }

    #[test]
    fn generator_kills_constants_and_identity() {
        let fam = family();
        for &(t, x) in &[(0.5, 0.7), (0.3, -1.1), (0.9, 2.0)] {
            let c = generator_apply(&fam, &TestFunction::constant(), t, x).unwrap();
            let i = generator_apply(&fam, &TestFunction::identity(), t, x).unwrap();
            assert!(c.abs() < 1e-12, "{c}");
            assert!(i.abs() < 1e-10, "{i}");
        }
    }

    #[test]
    fn generator_refuses_zero() {
        assert!(matches!(generator_apply(&family(), &TestFunction::square(), 0.5, 0.0), Err(Error::ZeroSpot)));
    }

    #[test]
    fn generator_matches_finite_difference_of_conditional_expectation() {
        let fam = family();
        let f = TestFunction::square();
        let (t, x, h) = (0.5, 0.7, 1e-3);
        let gen = generator_apply(&fam, &f, t, x).unwrap();
        let fd = (conditional_expectation(&fam, &f, x, t, t + h).unwrap() - (f.value)(x)) / h;
        assert!((fd - gen).abs() <= 0.05 * gen.abs(), "gen {gen} fd {fd}");
    }

    #[test]
    fn generator_of_square_integrates_to_one() {
        // d/dt E[X_t^2] = 1, so E[L_t f(X_t)] = 1 for f(y) = y^2 under N(0, t)
        let fam = family();
        let f = TestFunction::square();
        let t: f64 = 0.5;
        let sd = t.sqrt();
        let dens = |x: f64| (-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
        let mut acc = 0.0;
        let n = 4000;
        let hi = 8.0 * sd;
        let h = hi / n as f64;
        for k in 0..n {
            let x = (k as f64 + 0.5) * h;
            acc += 2.0 * generator_apply(&fam, &f, t, x).unwrap() * dens(x) * h;
        }
        assert!((acc - 1.0).abs() < 1e-3, "{acc}");
    }
}
