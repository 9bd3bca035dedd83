//! Vallois embedding maps.
//!
//! For a symmetric marginal the stopping rule is `tau = inf{t : |B_t| >= phi(L_t)}`
//! with `phi` the inverse of
//!
//! ```text
//! psi(x) = int_0^x y mu(y) / mu([y, inf)) dy
//! ```
//!
//! and `gamma(l) = int_0^l dm / phi(m)`, so that `P(L_tau > l) = exp(-gamma(l))`.
//! Maps are tabulated on a grid in `x` and interpolated with monotone cubic
//! Hermite splines whose knot slopes are the exact derivatives. `gamma` is
//! stored through `Gamma(x) = gamma(psi(x)) = int_0^x psi'(y) / y dy`, which
//! stays finite near zero where `1 / phi` does not.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::marginal::{MassTable, SymmetricMarginal};
use crate::numerics::{bisect, gauss_legendre, integrate, log_grid, MonotoneCubic, Tolerance};

/// Log-spaced points on `(x_min, x_max]`; zero is prepended.
pub const GRID_POINTS: usize = 4096;
/// `x_min = GRID_FLOOR * x_max`.
pub const GRID_FLOOR: f64 = 1e-6;

/// Relative width at which inversions by bisection stop.
const INVERSION_TOL: f64 = 1e-13;

/// `0` followed by [`GRID_POINTS`] log-spaced points up to `x_max`.
pub fn embedding_grid(x_max: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(GRID_POINTS + 1);
    g.push(0.0);
    g.extend(log_grid(GRID_FLOOR * x_max, x_max, GRID_POINTS));
    g
}

/// Monotone embedding map `psi` with its inverse `phi` and `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    psi: MonotoneCubic,
    gamma_at_psi: MonotoneCubic,
    x_max: f64,
    l_max: f64,
}

impl EmbeddingMap {
    /// Assembles a map from knot values and slopes of `psi` and `Gamma = gamma o psi`.
    pub fn from_knots(
        x: Vec<f64>,
        psi: Vec<f64>,
        psi_slope: Vec<f64>,
        gamma_at_psi: Vec<f64>,
        gamma_slope: Vec<f64>,
    ) -> Self {
        let x_max = *x.last().unwrap();
        let l_max = *psi.last().unwrap();
        Self {
            psi: MonotoneCubic::with_slopes(x.clone(), psi, psi_slope),
            gamma_at_psi: MonotoneCubic::with_slopes(x, gamma_at_psi, gamma_slope),
            x_max,
            l_max,
        }
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// `psi(x_max)`; beyond it both maps are continued linearly.
    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn grid(&self) -> &[f64] {
        self.psi.knots()
    }

    pub fn psi_knots(&self) -> &[f64] {
        self.psi.values()
    }

    pub fn gamma_knots(&self) -> &[f64] {
        self.gamma_at_psi.values()
    }

    pub fn psi(&self, x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            return 0.0;
        }
        self.psi.eval(x)
    }

    pub fn psi_derivative(&self, x: f64) -> f64 {
        self.psi.derivative(x.abs())
    }

    /// Barrier level `phi(l)`, the inverse of `psi`.
    pub fn phi(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let guess_scale = self.x_max.max(1.0);
        self.psi.inverse(l, INVERSION_TOL * guess_scale).max(0.0)
    }

    /// `Gamma(x) = gamma(psi(x))`.
    pub fn gamma_at_x(&self, x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            return 0.0;
        }
        self.gamma_at_psi.eval(x)
    }

    pub fn gamma_at_x_derivative(&self, x: f64) -> f64 {
        self.gamma_at_psi.derivative(x.abs())
    }

    pub fn gamma(&self, l: f64) -> f64 {
        self.gamma_at_x(self.phi(l))
    }

    /// `P(L_tau > l) = exp(-gamma(l))`.
    pub fn local_time_tail(&self, l: f64) -> f64 {
        (-self.gamma(l)).exp()
    }

    /// Writes the knots as CSV `x,psi,gamma_at_psi` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "psi", "gamma_at_psi"]).map_err(csv_err)?;
        for ((x, p), g) in self.grid().iter().zip(self.psi_knots()).zip(self.gamma_knots()) {
            out.write_record([fmt17(*x), fmt17(*p), fmt17(*g)]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a map written by [`EmbeddingMap::write_csv`]; slopes are
    /// re-estimated with PCHIP.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let want = ["x", "psi", "gamma_at_psi"];
        if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| h.trim() != w) {
            return Err(Error::Csv(format!("expected header x,psi,gamma_at_psi, got {:?}", headers)));
        }
        let (mut x, mut psi, mut gamma) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].trim().parse().map_err(|_| Error::Csv(format!("bad number '{}'", &rec[i])))
            };
            x.push(parse(0)?);
            psi.push(parse(1)?);
            gamma.push(parse(2)?);
        }
        if x.len() < 2 || x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Csv("x column must be strictly increasing with at least two rows".into()));
        }
        if psi.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Csv("psi column must be nondecreasing".into()));
        }
        let x_max = *x.last().unwrap();
        let l_max = *psi.last().unwrap();
        Ok(Self {
            psi: MonotoneCubic::pchip(x.clone(), psi),
            gamma_at_psi: MonotoneCubic::pchip(x, gamma),
            x_max,
            l_max,
        })
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Checks that `Gamma` converges at zero: refined estimates of
/// `int_eps^x1 f` must settle as `eps -> 0`.
fn probe_gamma_integrability<F: Fn(f64) -> f64>(f: F, x1: f64) -> Result<()> {
    let est = |k: i32| {
        let lo = x1 * 2f64.powi(-k);
        // log-spaced panels keep the probe accurate for integrands ~ 1/y
        let mut acc = 0.0;
        let mut b = x1;
        while b > lo * 1.000001 {
            let a = (b * 0.5).max(lo);
            acc += gauss_legendre(&f, a, b);
            b = a;
        }
        acc
    };
    let (i10, i20, i30, i40) = (est(10), est(20), est(30), est(40));
    if !(i40.is_finite() && i10.is_finite()) {
        return Err(Error::GammaDivergence("non-finite integrand near zero".into()));
    }
    let early = (i20 - i10).abs();
    let late = (i40 - i30).abs();
    if late > 0.5 * early + 1e-15 {
        return Err(Error::GammaDivergence(format!(
            "refined estimates keep growing: {i10:e}, {i20:e}, {i30:e}, {i40:e}"
        )));
    }
    Ok(())
}

fn check_positive_tails(table: &MassTable<'_>) -> Result<()> {
    let grid = table.grid();
    if let Some(j) = (0..grid.len()).find(|&j| !(table.tail_at_node(j) > 0.0)) {
        return Err(Error::InvalidDensity(format!("tail mass vanishes at x = {}", grid[j])));
    }
    Ok(())
}

/// Vallois map of a symmetric marginal.
pub fn build_psi(m: &SymmetricMarginal) -> Result<EmbeddingMap> {
    let grid = embedding_grid(m.x_max());
    let table = m.mass_table(&grid)?;
    check_positive_tails(&table)?;
    probe_gamma_integrability(|y| m.density(y) / table.tail(y), grid[1])?;

    let n = grid.len();
    let mut psi = vec![0.0; n];
    let mut gamma = vec![0.0; n];
    let mut psi_slope = vec![0.0; n];
    let mut gamma_slope = vec![0.0; n];
    for j in 0..n {
        let r = table.tail_at_node(j);
        gamma_slope[j] = m.density(grid[j]) / r;
        psi_slope[j] = grid[j] * gamma_slope[j];
    }
    for j in 0..n - 1 {
        let (a, b) = (grid[j], grid[j + 1]);
        let dpsi = integrate(|y| y * m.density(y) / table.tail(y), a, b, Tolerance::TAIL)?;
        let dgamma = integrate(|y| m.density(y) / table.tail(y), a, b, Tolerance::TAIL)?;
        psi[j + 1] = psi[j] + dpsi;
        gamma[j + 1] = gamma[j] + dgamma;
    }
    Ok(EmbeddingMap::from_knots(grid, psi, psi_slope, gamma, gamma_slope))
}

/// Nonincreasing barrier for the subhedging side: stop when `|B| >= phi(L)`
/// with `phi` decreasing from `x_max` at `l = 0` to `0` at `l = l_end`.
///
/// The map is `psi(x) = int_x^{x_max} y mu(y) / mu([0, y]) dy`, which makes
/// `exp(-gamma(psi(x))) = 2 mu([0, x])`. It is a derived construction and
/// carries [`ReversedEmbedding::is_derived`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReversedEmbedding {
    psi: MonotoneCubic,
    gamma_at_psi: MonotoneCubic,
    x_max: f64,
    l_end: f64,
    /// Exponent of the lower mass near zero, `mu([0, y]) ~ c y^k`.
    zero_exponent: f64,
}

impl ReversedEmbedding {
    pub fn is_derived(&self) -> bool {
        true
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// `psi(0+)`: local time at which the barrier collapses to zero.
    pub fn l_end(&self) -> f64 {
        self.l_end
    }

    pub fn grid(&self) -> &[f64] {
        self.psi.knots()
    }

    pub fn psi(&self, x: f64) -> f64 {
        let x = x.abs();
        if x >= self.x_max {
            return 0.0;
        }
        self.psi.eval(x)
    }

    pub fn psi_derivative(&self, x: f64) -> f64 {
        self.psi.derivative(x.abs())
    }

    pub fn phi(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return self.x_max;
        }
        if l >= self.l_end {
            return 0.0;
        }
        self.psi.inverse(l, INVERSION_TOL * self.x_max.max(1.0)).clamp(0.0, self.x_max)
    }

    pub fn gamma_at_x(&self, x: f64) -> f64 {
        let x = x.abs();
        let x1 = self.psi.knots()[1];
        if x >= self.x_max {
            return 0.0;
        }
        if x <= 0.0 {
            return f64::INFINITY;
        }
        if x < x1 {
            return self.gamma_at_psi.values()[1] + self.zero_exponent * (x1 / x).ln();
        }
        self.gamma_at_psi.eval(x)
    }

    pub fn gamma(&self, l: f64) -> f64 {
        if l >= self.l_end {
            return f64::INFINITY;
        }
        self.gamma_at_x(self.phi(l))
    }

    pub fn local_time_tail(&self, l: f64) -> f64 {
        (-self.gamma(l)).exp()
    }
}

pub fn build_reversed_psi(m: &SymmetricMarginal) -> Result<ReversedEmbedding> {
    let grid = embedding_grid(m.x_max());
    let table = m.mass_table(&grid)?;
    let n = grid.len();
    if !(table.lower_at_node(1) > 0.0) {
        return Err(Error::GammaDivergence("no mass near zero".into()));
    }
    let x1 = grid[1];
    let zero_exponent = x1 * m.density(x1) / table.lower_at_node(1);
    if !zero_exponent.is_finite() || zero_exponent <= 0.0 {
        return Err(Error::GammaDivergence(format!("degenerate behaviour at zero (k = {zero_exponent})")));
    }

    let mut psi = vec![0.0; n];
    let mut gamma = vec![0.0; n];
    let mut psi_slope = vec![0.0; n];
    let mut gamma_slope = vec![0.0; n];
    for j in 1..n {
        let low = table.lower_at_node(j);
        gamma_slope[j] = -m.density(grid[j]) / low;
        psi_slope[j] = grid[j] * gamma_slope[j];
    }
    psi_slope[0] = -zero_exponent;
    for j in (1..n - 1).rev() {
        let (a, b) = (grid[j], grid[j + 1]);
        let dpsi = integrate(|y| y * m.density(y) / table.lower(y), a, b, Tolerance::TAIL)?;
        let dgamma = integrate(|y| m.density(y) / table.lower(y), a, b, Tolerance::TAIL)?;
        psi[j] = psi[j + 1] + dpsi;
        gamma[j] = gamma[j + 1] + dgamma;
    }
    // integrand y mu / mu([0,y]) has a finite limit at 0: open rule
    psi[0] = psi[1] + gauss_legendre(|y| y * m.density(y) / table.lower(y), 0.0, x1);
    // Gamma(0) is infinite; the knot only anchors the interpolant and
    // gamma_at_x uses the power-law asymptote below x1.
    gamma[0] = gamma[1] + zero_exponent * 50.0;
    gamma_slope[0] = 0.0;
    if psi.iter().chain(&gamma[1..]).any(|v| !v.is_finite()) {
        return Err(Error::GammaDivergence("non-finite reversed map".into()));
    }
    let l_end = psi[0];
    Ok(ReversedEmbedding {
        psi: MonotoneCubic::with_slopes(grid.clone(), psi, psi_slope),
        gamma_at_psi: MonotoneCubic::with_slopes(grid, gamma, gamma_slope),
        x_max: m.x_max(),
        l_end,
        zero_exponent,
    })
}

/// A law on the real line given by its density and tail `mu([x, inf))`.
pub trait RealLaw: Sync {
    fn density(&self, x: f64) -> f64;
    fn tail(&self, x: f64) -> f64;
}

impl RealLaw for SymmetricMarginal {
    fn density(&self, x: f64) -> f64 {
        SymmetricMarginal::density(self, x)
    }

    fn tail(&self, x: f64) -> f64 {
        let r = self
            .closed_form_tail(x)
            .unwrap_or_else(|| self.tail_mass(x.abs()).unwrap_or(f64::NAN));
        if x >= 0.0 {
            r
        } else {
            1.0 - r
        }
    }
}

/// Two-sided Vallois barriers `phi_- < 0 < phi_+` for a centered law.
///
/// Stored as functions of `s = phi_+`: `l(s)`, `phi_-(s)` and `gamma(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralEmbedding {
    l_of_s: MonotoneCubic,
    minus_of_s: MonotoneCubic,
    gamma_of_s: MonotoneCubic,
    l_max: f64,
    /// Mass outside the bracket at the last knot.
    residual_mass: f64,
}

impl GeneralEmbedding {
    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn residual_mass(&self) -> f64 {
        self.residual_mass
    }

    pub fn phi_plus(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let s_max = self.l_of_s.x_max();
        self.l_of_s.inverse(l, INVERSION_TOL * s_max.max(1.0)).max(0.0)
    }

    pub fn phi_minus(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        self.minus_of_s.eval(self.phi_plus(l)).min(0.0)
    }

    /// `gamma(l) = 1/2 int_0^l (1/phi_+ - 1/phi_-)`.
    pub fn gamma(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        self.gamma_of_s.eval(self.phi_plus(l))
    }

    pub fn local_time_tail(&self, l: f64) -> f64 {
        (-self.gamma(l)).exp()
    }

    /// Knots in `s = phi_+`.
    pub fn s_knots(&self) -> &[f64] {
        self.l_of_s.knots()
    }

    /// `(l, dl/ds)` at `s = phi_+`.
    pub fn level_at(&self, s: f64) -> (f64, f64) {
        (self.l_of_s.eval(s), self.l_of_s.derivative(s))
    }

    /// `(phi_-, dphi_-/ds)` at `s = phi_+`.
    pub fn minus_at(&self, s: f64) -> (f64, f64) {
        (self.minus_of_s.eval(s).min(0.0), self.minus_of_s.derivative(s))
    }

    pub fn gamma_at(&self, s: f64) -> f64 {
        self.gamma_of_s.eval(s)
    }

    /// Inverts `phi_-`: the `s = phi_+` paired with a negative level `x`.
    pub fn s_of_minus(&self, x: f64) -> f64 {
        let s_max = self.minus_of_s.x_max();
        self.minus_of_s.inverse(x, INVERSION_TOL * s_max.max(1.0)).max(0.0)
    }

    /// `(l, phi_+, phi_-, gamma)` at every knot.
    pub fn knots(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        (0..self.l_of_s.knots().len()).map(move |i| {
            (
                self.l_of_s.values()[i],
                self.l_of_s.knots()[i],
                self.minus_of_s.values()[i],
                self.gamma_of_s.values()[i],
            )
        })
    }
}

/// Stop once the mass outside the bracket falls below this level.
pub const GENERAL_STOP_MASS: f64 = 1e-10;
const ODE_RTOL: f64 = 1e-10;
const ODE_ATOL: f64 = 1e-14;
/// Steps are capped at this fraction of `s` so the knots resolve the maps
/// for Hermite interpolation.
const ODE_MAX_REL_STEP: f64 = 0.02;

struct OdeSystem<'a> {
    law: &'a dyn RealLaw,
}

impl OdeSystem<'_> {
    fn outside(&self, s: f64, minus: f64) -> f64 {
        self.law.tail(s) + (1.0 - self.law.tail(minus))
    }

    /// Derivatives of `(l, phi_-, gamma)` with respect to `s = phi_+`.
    fn rhs(&self, s: f64, y: [f64; 3]) -> [f64; 3] {
        let minus = y[1];
        let q = self.outside(s, minus);
        let ds = self.law.density(s);
        let dl = 2.0 * s * ds / q;
        let dminus = s * ds / (minus * self.law.density(minus));
        let dgamma = 0.5 * (1.0 / s - 1.0 / minus) * dl;
        [dl, dminus, dgamma]
    }

    fn rk4(&self, s: f64, y: [f64; 3], h: f64) -> [f64; 3] {
        let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = self.rhs(s, y);
        let k2 = self.rhs(s + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = self.rhs(s + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = self.rhs(s + h, add(y, k3, h));
        [0, 1, 2].map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }
}

/// Solves the barrier ODE of a centered law with a positive density,
/// parametrised by `s = phi_+`:
///
/// ```text
/// dl/ds     = 2 s mu(s) / (1 - mu([phi_-, s]))
/// dphi_-/ds = s mu(s) / (phi_- mu(phi_-))
/// ```
///
/// using RK4 with step doubling for error control.
pub fn build_phi_general(law: &dyn RealLaw) -> Result<GeneralEmbedding> {
    let sys = OdeSystem { law };
    let s0 = 1e-6;
    // Start-up: phi_-(s0) from first-moment balance on the bracket, l and
    // gamma from the leading-order integrals (bracket mass ~ s0).
    let right = gauss_legendre(|y| y * law.density(y), 0.0, s0);
    let left_moment = |a: f64| gauss_legendre(|y| -y * law.density(y), a, 0.0);
    let mut lo = -s0;
    let mut tries = 0;
    while left_moment(lo) < right {
        lo *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::OdeStall { s: s0 });
        }
    }
    let minus0 = bisect(|a| left_moment(a) - right, lo, 0.0, 1e-18)?;
    let ratio = minus0 / s0;
    let l0 = gauss_legendre(|y| 2.0 * y * law.density(y), 0.0, s0);
    let gamma0 = gauss_legendre(|y| (1.0 - 1.0 / ratio) * law.density(y), 0.0, s0);

    let mut s = s0;
    let mut y = [l0, minus0, gamma0];
    let mut knots_s = vec![0.0, s];
    let mut knots_y = vec![[0.0, 0.0, 0.0], y];
    let first = sys.rhs(s, y);
    let mut knots_d = vec![[0.0, ratio, gamma0 / s0], first];
    let mut h = s0;
    let mut q = sys.outside(s, y[1]);
    let mut steps = 0usize;
    while q >= GENERAL_STOP_MASS {
        steps += 1;
        h = h.min(ODE_MAX_REL_STEP * s);
        if steps > 1_000_000 {
            return Err(Error::OdeStall { s });
        }
        let full = sys.rk4(s, y, h);
        let half = sys.rk4(s, y, 0.5 * h);
        let two = sys.rk4(s + 0.5 * h, half, 0.5 * h);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            let scale = ODE_ATOL + ODE_RTOL * two[i].abs().max(y[i].abs());
            err = err.max((two[i] - full[i]).abs() / 15.0 / scale);
        }
        let bad = two.iter().any(|v| !v.is_finite()) || two[1] >= 0.0;
        if !bad && err <= 1.0 {
            s += h;
            y = [0, 1, 2].map(|i| two[i] + (two[i] - full[i]) / 15.0);
            knots_s.push(s);
            knots_y.push(y);
            knots_d.push(sys.rhs(s, y));
            q = sys.outside(s, y[1]);
            let grow = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 4.0 };
            h *= grow.clamp(0.2, 4.0);
        } else {
            h *= if bad { 0.25 } else { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) };
        }
        if h < 1e-15 * s.max(1e-300) {
            return Err(Error::OdeStall { s });
        }
    }
    let col = |k: usize| -> Vec<f64> { knots_y.iter().map(|v| v[k]).collect() };
    let dcol = |k: usize| -> Vec<f64> { knots_d.iter().map(|v| v[k]).collect() };
    let l_max = *col(0).last().unwrap();
    Ok(GeneralEmbedding {
        l_of_s: MonotoneCubic::with_slopes(knots_s.clone(), col(0), dcol(0)),
        minus_of_s: MonotoneCubic::with_slopes(knots_s.clone(), col(1), dcol(1)),
        gamma_of_s: MonotoneCubic::with_slopes(knots_s, col(2), dcol(2)),
        l_max,
        residual_mass: q,
    })
}
