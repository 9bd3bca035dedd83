//! Symmetric marginal laws, their tails, and convex-order diagnostics.
//!
//! A marginal is stored on the half-line `x >= 0`; the law on the real line
//! is its even extension, so `tail_mass(0) = 1/2` for a probability measure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bisect, gauss_legendre, integrate, MonotoneCubic, Tolerance};

/// Tail mass below which the support is truncated.
pub const TRUNCATION_TAIL: f64 = 1e-12;
/// Tolerance on the unit-mass check.
pub const MASS_TOLERANCE: f64 = 1e-6;
/// Tolerance of the convex-order comparison of call prices.
pub const CONVEX_ORDER_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinName {
    /// Density `e^{-2|x|}`.
    SymExp,
    /// Second marginal of the two-marginal example, paired with `sym_exp`.
    Mu2,
    /// Centered normal law with variance `t`.
    Gaussian,
}

/// Serializable description of a symmetric density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Builtin {
        name: BuiltinName,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        params: BTreeMap<String, f64>,
    },
    /// `(x, density)` pairs on `x >= 0`, strictly increasing in `x`.
    Tabulated { points: Vec<[f64; 2]> },
}

impl DensitySpec {
    pub fn sym_exp() -> Self {
        Self::Builtin { name: BuiltinName::SymExp, params: BTreeMap::new() }
    }

    pub fn mu2() -> Self {
        Self::Builtin { name: BuiltinName::Mu2, params: BTreeMap::new() }
    }

    pub fn gaussian(variance: f64) -> Self {
        Self::Builtin {
            name: BuiltinName::Gaussian,
            params: BTreeMap::from([("t".to_string(), variance)]),
        }
    }

    pub fn tabulated(points: Vec<[f64; 2]>) -> Self {
        Self::Tabulated { points }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Accepts `sym_exp`, `mu2`, `gaussian` / `gaussian:t=0.5`, or a JSON document.
impl FromStr for DensitySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Self::from_json(s);
        }
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let mut params = BTreeMap::new();
        for kv in args.split(',').filter(|a| !a.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidDensity(format!("malformed parameter '{kv}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidDensity(format!("parameter '{k}' is not a number")))?;
            params.insert(k.trim().to_string(), v);
        }
        let name = match name {
            "sym_exp" => BuiltinName::SymExp,
            "mu2" => BuiltinName::Mu2,
            "gaussian" => BuiltinName::Gaussian,
            other => return Err(Error::InvalidDensity(format!("unknown builtin '{other}'"))),
        };
        Ok(Self::Builtin { name, params })
    }
}

impl fmt::Display for DensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Builtin { name, params } => {
                let n = match name {
                    BuiltinName::SymExp => "sym_exp",
                    BuiltinName::Mu2 => "mu2",
                    BuiltinName::Gaussian => "gaussian",
                };
                write!(f, "{n}")?;
                for (i, (k, v)) in params.iter().enumerate() {
                    write!(f, "{}{k}={v}", if i == 0 { ':' } else { ',' })?;
                }
                Ok(())
            }
            Self::Tabulated { points } => write!(f, "tabulated[{}]", points.len()),
        }
    }
}

/// Calibration of the `mu2` builtin: `alpha` solves
/// `delta(1) = alpha * delta([1, inf))`, with the tail mass obtained by quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mu2Calibration {
    pub alpha: f64,
    /// `mu2(1) - mu1(1)`.
    pub delta_at_one: f64,
    /// `delta([1, inf))` from unit mass, by quadrature.
    pub delta_tail_at_one: f64,
}

impl Mu2Calibration {
    /// Quadrature-defined value the root finder must reproduce.
    pub fn target(&self) -> f64 {
        self.delta_at_one / self.delta_tail_at_one
    }
}

pub fn calibrate_mu2() -> Result<Mu2Calibration> {
    let delta_at_one = 2.5 * (-1.25f64).exp() - (-2.0f64).exp();
    let inner = integrate(|x| 2.5 * x.powi(3) * (-1.25 * x.powi(4)).exp(), 0.0, 1.0, Tolerance::TIGHT)?;
    // mu1([1, inf)) on [1, 40]; the remainder is below 1e-34
    let mu1_tail = integrate(|x| (-2.0 * x).exp(), 1.0, 40.0, Tolerance::TIGHT)?;
    let delta_tail_at_one = 0.5 - inner - mu1_tail;
    let alpha = bisect(|a| delta_at_one - a * delta_tail_at_one, 2.0, 50.0, 1e-13)?;
    Ok(Mu2Calibration { alpha, delta_at_one, delta_tail_at_one })
}

#[derive(Debug, Clone)]
enum Law {
    SymExp,
    Mu2(Mu2Calibration),
    Gaussian { t: f64 },
    Tabulated(Table),
}

#[derive(Debug, Clone)]
struct Table {
    x: Vec<f64>,
    d: Vec<f64>,
    /// PCHIP in log-density when every entry is positive.
    log_interp: Option<MonotoneCubic>,
    /// Log-density slope used beyond the last point (exponential tail), if decreasing.
    tail_slope: Option<f64>,
}

impl Table {
    fn new(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidDensity("tabulated density needs at least two points".into()));
        }
        let x: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let d: Vec<f64> = points.iter().map(|p| p[1]).collect();
        if x.iter().chain(&d).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity("non-finite table entry".into()));
        }
        if x[0] < 0.0 {
            return Err(Error::InvalidDensity("table abscissae must be nonnegative".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDensity("table abscissae must be strictly increasing".into()));
        }
        let positive = d.iter().all(|&v| v > 0.0);
        let log_interp = positive.then(|| MonotoneCubic::pchip(x.clone(), d.iter().map(|v| v.ln()).collect()));
        let n = x.len();
        let tail_slope = if positive {
            let s = (d[n - 1].ln() - d[n - 2].ln()) / (x[n - 1] - x[n - 2]);
            (s < 0.0).then_some(s)
        } else {
            None
        };
        Ok(Self { x, d, log_interp, tail_slope })
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return self.d[0];
        }
        if x >= self.x[n - 1] {
            return match self.tail_slope {
                Some(s) => self.d[n - 1] * (s * (x - self.x[n - 1])).exp(),
                None if x == self.x[n - 1] => self.d[n - 1],
                None => 0.0,
            };
        }
        match &self.log_interp {
            Some(c) => c.eval(x).exp(),
            None => {
                let i = self.x.partition_point(|&k| k <= x) - 1;
                let t = (x - self.x[i]) / (self.x[i + 1] - self.x[i]);
                self.d[i] + t * (self.d[i + 1] - self.d[i])
            }
        }
    }

    fn support_end(&self) -> f64 {
        if self.tail_slope.is_some() {
            f64::INFINITY
        } else {
            *self.x.last().unwrap()
        }
    }
}

/// A centered symmetric law with a density, seen on the half-line.
#[derive(Debug, Clone)]
pub struct SymmetricMarginal {
    spec: DensitySpec,
    law: Law,
    x_max: f64,
    abs_moment: f64,
}

impl SymmetricMarginal {
    pub fn new(spec: DensitySpec) -> Result<Self> {
        let law = match &spec {
            DensitySpec::Builtin { name, params } => {
                let allowed: &[&str] = match name {
                    BuiltinName::Gaussian => &["t"],
                    _ => &[],
                };
                if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
                    return Err(Error::InvalidDensity(format!("unknown parameter '{k}'")));
                }
                match name {
                    BuiltinName::SymExp => Law::SymExp,
                    BuiltinName::Mu2 => Law::Mu2(calibrate_mu2()?),
                    BuiltinName::Gaussian => {
                        let t = params.get("t").copied().unwrap_or(1.0);
                        if !(t > 0.0 && t.is_finite()) {
                            return Err(Error::InvalidDensity(format!("gaussian variance must be positive, got {t}")));
                        }
                        Law::Gaussian { t }
                    }
                }
            }
            DensitySpec::Tabulated { points } => Law::Tabulated(Table::new(points)?),
        };
        let mut m = Self { spec, law, x_max: f64::INFINITY, abs_moment: f64::NAN };
        m.x_max = m.find_x_max()?;
        m.abs_moment = 2.0 * m.integrate_to_infinity(|x| x * m.density(x), 0.0)?;
        Ok(m)
    }

    pub fn sym_exp() -> Self {
        Self::new(DensitySpec::sym_exp()).expect("builtin")
    }

    pub fn mu2() -> Self {
        Self::new(DensitySpec::mu2()).expect("builtin")
    }

    pub fn gaussian(t: f64) -> Result<Self> {
        Self::new(DensitySpec::gaussian(t))
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    /// Density of the law at `x` (even in `x`).
    pub fn density(&self, x: f64) -> f64 {
        let x = x.abs();
        match &self.law {
            Law::SymExp => (-2.0 * x).exp(),
            Law::Mu2(c) => {
                if x <= 1.0 {
                    2.5 * x.powi(3) * (-1.25 * x.powi(4)).exp()
                } else {
                    let a = c.alpha;
                    (-2.0 * x).exp() + c.delta_at_one * x.powf(a - 2.0) * (-a * (x.powf(a - 1.0) - 1.0) / (a - 1.0)).exp()
                }
            }
            Law::Gaussian { t } => (-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt(),
            Law::Tabulated(tab) => tab.eval(x),
        }
    }

    /// Closed-form tail `mu([x, inf))` for the builtins; `None` for tables.
    pub fn closed_form_tail(&self, x: f64) -> Option<f64> {
        let x = x.abs();
        match &self.law {
            Law::SymExp => Some(0.5 * (-2.0 * x).exp()),
            Law::Mu2(c) => Some(if x <= 1.0 {
                0.5 * (-1.25 * x.powi(4)).exp()
            } else {
                let a = c.alpha;
                0.5 * (-2.0 * x).exp() + c.delta_at_one / a * (-a * (x.powf(a - 1.0) - 1.0) / (a - 1.0)).exp()
            }),
            Law::Gaussian { t } => Some(0.5 * libm::erfc(x / (2.0 * t).sqrt())),
            Law::Tabulated(_) => None,
        }
    }

    pub fn mu2_calibration(&self) -> Option<Mu2Calibration> {
        match &self.law {
            Law::Mu2(c) => Some(*c),
            _ => None,
        }
    }

    /// Characteristic width used to size integration chunks.
    fn scale(&self) -> f64 {
        match &self.law {
            Law::SymExp | Law::Mu2(_) => 0.5,
            Law::Gaussian { t } => t.sqrt(),
            Law::Tabulated(tab) => (tab.x.last().unwrap() - tab.x[0]).max(1e-3) / 8.0,
        }
    }

    fn support_end(&self) -> f64 {
        match &self.law {
            Law::Tabulated(tab) => tab.support_end(),
            _ => f64::INFINITY,
        }
    }

    /// `int_a^inf f` by doubling chunks, each integrated to relative accuracy.
    pub(crate) fn integrate_to_infinity<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64) -> Result<f64> {
        let end = self.support_end();
        let mut lo = a;
        let mut h = self.scale();
        let mut total = 0.0;
        for _ in 0..400 {
            if lo >= end {
                break;
            }
            let hi = (lo + h).min(end);
            let part = integrate(&mut f, lo, hi, Tolerance::TAIL)?;
            total += part;
            let edge = f(hi).abs() * h;
            if !edge.is_finite() {
                return Err(Error::NonFiniteDensity { x: hi });
            }
            if total != 0.0 && part.abs() <= 1e-17 * total.abs() && edge <= 1e-17 * total.abs() {
                break;
            }
            lo = hi;
            h *= 2.0;
        }
        Ok(total)
    }

    /// `R(x) = mu([x, inf))` by adaptive quadrature.
    pub fn tail_mass(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::InvalidDensity(format!("tail_mass requires x >= 0, got {x}")));
        }
        self.integrate_to_infinity(|y| self.density(y), x)
    }

    /// `mu([0, x])` on the half-line.
    pub fn lower_mass(&self, x: f64) -> Result<f64> {
        integrate(|y| self.density(y), 0.0, x, Tolerance::TAIL)
    }

    fn find_x_max(&self) -> Result<f64> {
        let mut x = self.scale();
        for _ in 0..64 {
            if self.tail_mass(x)? < TRUNCATION_TAIL {
                return Ok(x);
            }
            x *= 2.0;
        }
        Err(Error::InvalidDensity("no truncation point found: tail too heavy".into()))
    }

    /// Truncation point with `R(x_max) < 1e-12`.
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// `E|X|`.
    pub fn abs_moment(&self) -> f64 {
        self.abs_moment
    }

    /// Cumulative masses on `grid`, used wherever many tail evaluations are needed.
    pub fn mass_table(&self, grid: &[f64]) -> Result<MassTable<'_>> {
        MassTable::new(self, grid)
    }
}

/// Per-segment masses of a marginal on a fixed grid.
///
/// Tails are accumulated from the right and lower masses from the left, so
/// both keep relative accuracy where they are small.
#[derive(Debug, Clone)]
pub struct MassTable<'a> {
    marginal: &'a SymmetricMarginal,
    grid: Vec<f64>,
    tail: Vec<f64>,
    lower: Vec<f64>,
}

impl<'a> MassTable<'a> {
    fn new(marginal: &'a SymmetricMarginal, grid: &[f64]) -> Result<Self> {
        assert!(grid.len() >= 2 && grid[0] == 0.0);
        let n = grid.len();
        let mut seg = Vec::with_capacity(n - 1);
        for w in grid.windows(2) {
            seg.push(integrate(|y| marginal.density(y), w[0], w[1], Tolerance::TAIL)?);
        }
        let mut tail = vec![0.0; n];
        tail[n - 1] = marginal.tail_mass(grid[n - 1])?;
        for j in (0..n - 1).rev() {
            tail[j] = tail[j + 1] + seg[j];
        }
        let mut lower = vec![0.0; n];
        for j in 0..n - 1 {
            lower[j + 1] = lower[j] + seg[j];
        }
        Ok(Self { marginal, grid: grid.to_vec(), tail, lower })
    }

    fn locate(&self, y: f64) -> usize {
        let n = self.grid.len();
        self.grid.partition_point(|&k| k <= y).clamp(1, n - 1) - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn tail_at_node(&self, j: usize) -> f64 {
        self.tail[j]
    }

    pub fn lower_at_node(&self, j: usize) -> f64 {
        self.lower[j]
    }

    /// `R(y)` for `y` inside the grid.
    pub fn tail(&self, y: f64) -> f64 {
        let j = self.locate(y);
        if y >= self.grid[j + 1] {
            return self.tail[j + 1];
        }
        self.tail[j + 1] + gauss_legendre(|s| self.marginal.density(s), y, self.grid[j + 1])
    }

    /// `mu([0, y])` for `y` inside the grid.
    pub fn lower(&self, y: f64) -> f64 {
        let j = self.locate(y);
        if y <= self.grid[j] {
            return self.lower[j];
        }
        self.lower[j] + gauss_legendre(|s| self.marginal.density(s), self.grid[j], y)
    }
}

/// Pass/fail diagnostic line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Structural checks of a marginal. Never fails; problems are reported.
pub fn validate_marginal(m: &SymmetricMarginal) -> ValidationReport {
    let mut checks = Vec::new();

    match m.integrate_to_infinity(|x| m.density(x), 0.0) {
        Ok(half) => {
            let mass = 2.0 * half;
            checks.push(Check::new(
                "unit_mass",
                (mass - 1.0).abs() <= MASS_TOLERANCE,
                format!("total mass {mass:.12}"),
            ));
        }
        Err(e) => checks.push(Check::new("unit_mass", false, e.to_string())),
    }

    let mut bad = None;
    if let Law::Tabulated(tab) = &m.law {
        bad = tab.x.iter().zip(&tab.d).find(|(x, d)| **d < 0.0 || (**d == 0.0 && **x > 0.0)).map(|(x, _)| *x);
    }
    if bad.is_none() {
        let n = 2000;
        bad = (1..=n)
            .map(|i| m.x_max * i as f64 / n as f64)
            .find(|&x| !(m.density(x) > 0.0));
    }
    checks.push(match bad {
        Some(x) => Check::new("positivity", false, format!("density not positive at x = {x}")),
        None => Check::new("positivity", true, "density positive on (0, x_max]"),
    });

    let moment = m.abs_moment;
    checks.push(Check::new("finite_abs_moment", moment.is_finite() && moment > 0.0, format!("E|X| = {moment}")));

    match m.tail_mass(m.x_max) {
        Ok(r) => checks.push(Check::new(
            "truncation",
            r < TRUNCATION_TAIL,
            format!("R(x_max = {}) = {r:e}", m.x_max),
        )),
        Err(e) => checks.push(Check::new("truncation", false, e.to_string())),
    }

    ValidationReport { checks }
}

/// A pair of marginals `(mu1, mu2)` and their signed difference `mu2 - mu1`.
#[derive(Debug, Clone)]
pub struct DeltaMu {
    pub mu1: SymmetricMarginal,
    pub mu2: SymmetricMarginal,
}

impl DeltaMu {
    pub fn new(mu1: SymmetricMarginal, mu2: SymmetricMarginal) -> Self {
        Self { mu1, mu2 }
    }

    /// The two-marginal example pair `(sym_exp, mu2)`.
    pub fn example_pair() -> Self {
        Self::new(SymmetricMarginal::sym_exp(), SymmetricMarginal::mu2())
    }

    pub fn delta_density(&self, x: f64) -> f64 {
        self.mu2.density(x) - self.mu1.density(x)
    }

    pub fn delta_tail(&self, x: f64) -> Result<f64> {
        Ok(self.mu2.tail_mass(x)? - self.mu1.tail_mass(x)?)
    }

    pub fn x_max(&self) -> f64 {
        self.mu1.x_max().max(self.mu2.x_max())
    }

    /// `int (x - K)^+ d(mu2 - mu1)` on the real line.
    pub fn call_difference(&self, strike: f64) -> Result<f64> {
        // Symmetry and zero mean give C(K) = |K| + C(|K|) for K < 0, so the
        // difference only depends on |K|.
        let k = strike.abs();
        let c2 = self.mu2.integrate_to_infinity(|x| (x - k) * self.mu2.density(x), k)?;
        let c1 = self.mu1.integrate_to_infinity(|x| (x - k) * self.mu1.density(x), k)?;
        Ok(c2 - c1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexOrderReport {
    pub strikes: Vec<f64>,
    pub differences: Vec<f64>,
    pub min_difference: f64,
    pub passed: bool,
}

pub fn convex_order_check(pair: &DeltaMu, strike_grid: &[f64]) -> Result<ConvexOrderReport> {
    if strike_grid.is_empty() {
        return Err(Error::Config("strike grid is empty".into()));
    }
    let differences = strike_grid
        .iter()
        .map(|&k| pair.call_difference(k))
        .collect::<Result<Vec<_>>>()?;
    let min_difference = differences.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConvexOrderReport {
        strikes: strike_grid.to_vec(),
        differences,
        min_difference,
        passed: min_difference >= -CONVEX_ORDER_TOLERANCE,
    })
}
