//! Two-marginal extension of the Vallois embedding.
//!
//! The first stop uses the Vallois map `psi1` of `mu1`. The second stop is
//! `tau2 = inf{t >= tau1 : |B_t| >= phi2(L_t)}` where `psi2` alternates between
//! two integrands, switching whenever it crosses `psi1`:
//!
//! ```text
//! mu2 regime:    psi2' = y mu2(y) / mu2([y, inf))    (starts at 0)
//! delta regime:  psi2' = y dmu(y) / dmu([y, inf))    (dmu = mu2 - mu1)
//! ```
//!
//! The map is stored piecewise between breakpoints so the slope jump at each
//! crossing is represented exactly.

use serde::Serialize;

use crate::embedding::{build_psi, EmbeddingMap};
use crate::error::{Error, Result};
use crate::marginal::{convex_order_check, Check, ConvexOrderReport, DeltaMu, MassTable};
use crate::numerics::{bisect, gauss_legendre, log_grid, MonotoneCubic};
use crate::simulate::Barrier;

/// Log-spaced scan points up to `x_max` (zero is prepended).
pub const SCAN_POINTS: usize = 8192;
/// Absolute width to which crossings are refined.
pub const BREAKPOINT_TOL: f64 = 1e-9;
/// Crossings closer than this to the previous one are treated as tangencies.
pub const TANGENCY_GAP: f64 = 1e-6;
/// The delta regime is followed while `dmu([y, inf)) > RESOLUTION * mu2([y, inf))`.
/// Beyond that the difference is lost in the rounding of `mu2 - mu1` and the
/// map is continued linearly.
pub const RESOLUTION: f64 = 1e-9;
/// Relative gap between `psi2` and `psi1` required at the end of the probe
/// to certify that the last regime never switches.
pub const CERTIFICATION_MARGIN: f64 = 1e-3;
/// Upper end of the neighbourhood of zero probed for the sign of `dmu`, as a
/// fraction of `x_max`.
const ZERO_PROBE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Mu2,
    Delta,
}

impl Regime {
    fn other(self) -> Self {
        match self {
            Regime::Mu2 => Regime::Delta,
            Regime::Delta => Regime::Mu2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Mu2 => "mu2",
            Regime::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone)]
struct Piece {
    regime: Regime,
    psi: MonotoneCubic,
    /// `Gamma2 = gamma2 o psi2`.
    gamma: MonotoneCubic,
}

/// Second-stop map of a two-marginal embedding together with the first map.
#[derive(Debug, Clone)]
pub struct TwoMarginalEmbedding {
    psi1: EmbeddingMap,
    pieces: Vec<Piece>,
    breakpoints: Vec<f64>,
    levels: Vec<f64>,
    resolution_limit: Option<f64>,
    certification: Certification,
    x_max: f64,
}

/// Outcome of probing the last regime up to `x_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certification {
    /// The last regime kept `psi2 - psi1` one-sided on the whole scan.
    pub one_sided: bool,
    /// `|psi2 - psi1| / psi1` at the end of the scan.
    pub final_gap: f64,
    pub probed_to: f64,
}

impl Certification {
    pub fn passed(&self) -> bool {
        self.one_sided && self.final_gap >= CERTIFICATION_MARGIN
    }
}

/// Serializable summary of the construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakpointReport {
    /// Finite breakpoints `x_1 < x_2 < ...`; the next one is infinite.
    pub breakpoints: Vec<f64>,
    /// `l_i = psi1(x_i) = psi2(x_i)`.
    pub levels: Vec<f64>,
    /// Regime of each piece, starting at zero.
    pub regimes: Vec<Regime>,
    pub resolution_limit: Option<f64>,
    pub certification: Certification,
    /// Always "finite-probe": the infinite condition is only checked up to `probed_to`.
    pub certification_kind: &'static str,
}

impl TwoMarginalEmbedding {
    pub fn psi1(&self) -> &EmbeddingMap {
        &self.psi1
    }

    /// Finite breakpoints.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Levels `l_i` at the finite breakpoints.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Where the delta regime stopped being resolvable, if it did.
    pub fn resolution_limit(&self) -> Option<f64> {
        self.resolution_limit
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn certification(&self) -> &Certification {
        &self.certification
    }

    fn piece_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&b| b < x)
    }

    pub fn regime(&self, x: f64) -> Regime {
        self.pieces[self.piece_index(x.abs())].regime
    }

    pub fn psi2(&self, x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            return 0.0;
        }
        self.pieces[self.piece_index(x)].psi.eval(x)
    }

    pub fn psi2_derivative(&self, x: f64) -> f64 {
        let x = x.abs();
        self.pieces[self.piece_index(x)].psi.derivative(x)
    }

    /// `gamma2(psi2(x))`.
    pub fn gamma2_at_x(&self, x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            return 0.0;
        }
        self.pieces[self.piece_index(x)].gamma.eval(x)
    }

    pub fn phi2(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let k = self.levels.partition_point(|&v| v < l);
        self.pieces[k].psi.inverse(l, 1e-13 * self.x_max.max(1.0)).max(0.0)
    }

    pub fn gamma2(&self, l: f64) -> f64 {
        self.gamma2_at_x(self.phi2(l))
    }

    /// `S_i(x) = exp(-Gamma2(x)) / 2 * sum_{j <= i} (-1)^j exp(Gamma2(x_j) - Gamma1(x_j))`
    /// with `x_0 = 0` and `i` the piece containing `x`. Equals `mu2([x, inf))`
    /// on mu2 pieces and `dmu([x, inf))` on delta pieces.
    pub fn tail_recursion(&self, x: f64) -> f64 {
        let x = x.abs();
        let i = self.piece_index(x);
        let g2 = self.gamma2_at_x(x);
        let mut sum = (-g2).exp();
        for (j, &xj) in self.breakpoints[..i].iter().enumerate() {
            let term = (self.gamma2_at_x(xj) - self.psi1.gamma_at_x(xj) - g2).exp();
            sum += if j % 2 == 0 { -term } else { term };
        }
        0.5 * sum
    }

    pub fn report(&self) -> BreakpointReport {
        BreakpointReport {
            breakpoints: self.breakpoints.clone(),
            levels: self.levels.clone(),
            regimes: self.pieces.iter().map(|p| p.regime).collect(),
            resolution_limit: self.resolution_limit,
            certification: self.certification.clone(),
            certification_kind: "finite-probe",
        }
    }
}

impl Barrier for TwoMarginalEmbedding {
    fn bounds(&self, l: f64) -> (f64, f64) {
        let p = self.phi2(l);
        (-p, p)
    }
}

/// Density of `B_tau2` implied by the two maps:
///
/// ```text
/// psi1 > psi2:  nu = psi2'(x) / x * S(x)
/// otherwise:    nu = psi1'(x) / (2x) * exp(-Gamma1(x)) + psi2'(x) / x * S(x)
/// ```
///
/// with `S` from [`TwoMarginalEmbedding::tail_recursion`].
pub fn implied_density(t: &TwoMarginalEmbedding, x: f64) -> f64 {
    let x = x.abs();
    let s = t.tail_recursion(x);
    let jump = t.psi2_derivative(x) / x * s;
    match t.regime(x) {
        Regime::Mu2 => jump,
        Regime::Delta => 0.5 * t.psi1.psi_derivative(x) / x * (-t.psi1.gamma_at_x(x)).exp() + jump,
    }
}

/// `dmu([y, inf))` accumulated from the right out of per-segment integrals of
/// `mu2 - mu1`, which keeps it accurate long after the two tails agree to
/// many digits.
struct DeltaTail<'a> {
    pair: &'a DeltaMu,
    grid: &'a [f64],
    tail: Vec<f64>,
}

impl<'a> DeltaTail<'a> {
    fn new(pair: &'a DeltaMu, grid: &'a [f64], t1: &MassTable<'_>, t2: &MassTable<'_>) -> Self {
        let n = grid.len();
        let mut tail = vec![0.0; n];
        tail[n - 1] = t2.tail_at_node(n - 1) - t1.tail_at_node(n - 1);
        for j in (0..n - 1).rev() {
            tail[j] = tail[j + 1] + gauss_legendre(|y| pair.delta_density(y), grid[j], grid[j + 1]);
        }
        Self { pair, grid, tail }
    }

    fn at(&self, y: f64) -> f64 {
        let n = self.grid.len();
        if y >= self.grid[n - 1] {
            return self.tail[n - 1];
        }
        let j = self.grid.partition_point(|&g| g <= y).clamp(1, n - 1);
        self.tail[j] + gauss_legendre(|s| self.pair.delta_density(s), y, self.grid[j])
    }
}

struct Scan<'a> {
    pair: &'a DeltaMu,
    t2: MassTable<'a>,
    dtail: DeltaTail<'a>,
}

impl Scan<'_> {
    /// `(rate, tail)` of the regime integrand; `psi2' = y rate / tail`.
    fn parts(&self, r: Regime, y: f64) -> (f64, f64) {
        match r {
            Regime::Mu2 => (self.pair.mu2.density(y), self.t2.tail(y)),
            Regime::Delta => (self.pair.delta_density(y), self.dtail.at(y)),
        }
    }

    fn gamma_rate(&self, r: Regime, y: f64) -> f64 {
        let (d, t) = self.parts(r, y);
        d / t
    }

    fn dpsi(&self, r: Regime, a: f64, b: f64) -> f64 {
        gauss_legendre(|y| y * self.gamma_rate(r, y), a, b)
    }

    fn dgamma(&self, r: Regime, a: f64, b: f64) -> f64 {
        gauss_legendre(|y| self.gamma_rate(r, y), a, b)
    }
}

#[derive(Default)]
struct Knots {
    x: Vec<f64>,
    psi: Vec<f64>,
    dpsi: Vec<f64>,
    gamma: Vec<f64>,
    dgamma: Vec<f64>,
}

impl Knots {
    fn push(&mut self, x: f64, psi: f64, gamma: f64, rate: f64) {
        if self.x.last().is_some_and(|&last| x <= last) {
            return;
        }
        self.x.push(x);
        self.psi.push(psi);
        self.dpsi.push(x * rate);
        self.gamma.push(gamma);
        self.dgamma.push(rate);
    }

    fn last(&self) -> (f64, f64, f64) {
        let n = self.x.len() - 1;
        (self.x[n], self.psi[n], self.gamma[n])
    }

    fn finish(self, regime: Regime) -> Piece {
        Piece {
            regime,
            psi: MonotoneCubic::with_slopes(self.x.clone(), self.psi, self.dpsi),
            gamma: MonotoneCubic::with_slopes(self.x, self.gamma, self.dgamma),
        }
    }
}

/// Sign of `dmu` on a neighbourhood of zero: `Err` carries the diagnostic.
fn check_near_zero(pair: &DeltaMu) -> std::result::Result<String, String> {
    let hi = ZERO_PROBE * pair.x_max();
    let pts = log_grid(1e-6 * pair.x_max(), hi, 256);
    let scale = pts.iter().map(|&x| pair.mu1.density(x).max(pair.mu2.density(x))).fold(0.0, f64::max);
    let floor = 1e-12 * scale;
    if let Some(&x) = pts.iter().find(|&&x| pair.delta_density(x) > floor) {
        return Err(format!("mu2 - mu1 > 0 at x = {x:.6e} near zero"));
    }
    if pts.iter().all(|&x| pair.delta_density(x) >= -floor) {
        return Err(format!("mu2 - mu1 vanishes identically on (0, {hi:.4e}]"));
    }
    Ok(format!("mu2 - mu1 <= 0 and not identically zero on (0, {hi:.4e}]"))
}

/// Two-marginal map for a pair of symmetric marginals.
pub fn build_psi2(pair: &DeltaMu) -> Result<TwoMarginalEmbedding> {
    check_near_zero(pair).map_err(Error::DegeneratePair)?;
    let psi1 = build_psi(&pair.mu1)?;
    let x_max = pair.x_max();
    let mut grid = Vec::with_capacity(SCAN_POINTS + 1);
    grid.push(0.0);
    grid.extend(log_grid(1e-6 * x_max, x_max, SCAN_POINTS));
    let t1 = pair.mu1.mass_table(&grid)?;
    let t2 = pair.mu2.mass_table(&grid)?;
    let dtail = DeltaTail::new(pair, &grid, &t1, &t2);
    let scan = Scan { pair, t2, dtail };

    let mut regime = Regime::Mu2;
    let mut pieces = Vec::new();
    let mut breakpoints: Vec<f64> = Vec::new();
    let mut levels = Vec::new();
    let mut resolution_limit = None;
    let mut knots = Knots::default();
    knots.push(0.0, 0.0, 0.0, scan.gamma_rate(regime, 0.0));

    let mut j = 0;
    while j + 1 < grid.len() {
        let b = grid[j + 1];
        let (a, psi_a, gamma_a) = knots.last();
        if regime == Regime::Delta {
            let (d, t) = scan.parts(regime, b);
            if t <= RESOLUTION * scan.t2.tail(b) && knots.x.len() >= 2 {
                resolution_limit = Some(a);
                break;
            }
            if !(t > 0.0) {
                return Err(Error::DeltaTailVanishes { x: b });
            }
            if !(d > 0.0) {
                return Err(Error::NonIncreasingPsi2 { x: b });
            }
        }
        let psi_b = psi_a + scan.dpsi(regime, a, b);
        let gap = psi_b - psi1.psi(b);
        let crossed = match regime {
            Regime::Mu2 => gap > 0.0,
            Regime::Delta => gap < 0.0,
        };
        if !crossed {
            knots.push(b, psi_b, gamma_a + scan.dgamma(regime, a, b), scan.gamma_rate(regime, b));
            j += 1;
            continue;
        }
        let xb = bisect(|x| psi_a + scan.dpsi(regime, a, x) - psi1.psi(x), a, b, BREAKPOINT_TOL)?;
        if let Some(&prev) = breakpoints.last() {
            if xb - prev < TANGENCY_GAP {
                return Err(Error::DegeneratePair(format!(
                    "psi2 touches psi1 at x = {xb:.9} right after the crossing at {prev:.9} (tangency)"
                )));
            }
        }
        let lb = psi1.psi(xb);
        let gamma_b = gamma_a + scan.dgamma(regime, a, xb);
        if xb <= a {
            // crossing at the current knot: pin it there
            let n = knots.x.len() - 1;
            knots.psi[n] = lb;
        } else {
            knots.push(xb, lb, gamma_b, scan.gamma_rate(regime, xb));
        }
        if knots.x.len() < 2 {
            return Err(Error::DegeneratePair(format!("empty regime ending at x = {xb}")));
        }
        let (xb, _, gamma_b) = knots.last();
        pieces.push(std::mem::take(&mut knots).finish(regime));
        breakpoints.push(xb);
        levels.push(lb);
        regime = regime.other();
        if regime == Regime::Delta {
            let (d, t) = scan.parts(regime, xb);
            if !(t > 0.0) {
                return Err(Error::DeltaTailVanishes { x: xb });
            }
            if !(d > 0.0) {
                return Err(Error::NonIncreasingPsi2 { x: xb });
            }
        }
        knots.push(xb, lb, gamma_b, scan.gamma_rate(regime, xb));
        if b - xb < 1e-12 * b {
            j += 1;
        }
    }
    if knots.x.len() < 2 {
        return Err(Error::DegeneratePair("last regime has no extent".into()));
    }
    let last = knots.finish(regime);

    // probe the last regime (continued linearly past a resolution limit) up to x_max
    let start = resolution_limit.unwrap_or(x_max);
    let side = |x: f64| last.psi.eval(x) - psi1.psi(x);
    let mut one_sided = true;
    for &x in grid.iter().filter(|&&x| x > start) {
        let g = side(x);
        let ok = match regime {
            Regime::Mu2 => g <= 0.0,
            Regime::Delta => g >= 0.0,
        };
        if !ok {
            one_sided = false;
            break;
        }
    }
    let final_gap = side(x_max).abs() / psi1.psi(x_max);
    pieces.push(last);

    Ok(TwoMarginalEmbedding {
        psi1,
        pieces,
        breakpoints,
        levels,
        resolution_limit,
        certification: Certification { one_sided, final_gap, probed_to: x_max },
        x_max,
    })
}

/// Report on the hypotheses of the two-marginal construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<Check>,
    pub convex_order: Option<ConvexOrderReport>,
    pub breakpoints: Option<BreakpointReport>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks, in order: `dmu <= 0` and not identically zero near zero (`i`);
/// `dmu > 0` wherever `psi1 < psi2` (`ii`, during construction); the last
/// regime never switches (`iii`, finite-probe certification up to `x_max`);
/// and convex order of the pair.
pub fn check_assumptions(pair: &DeltaMu) -> AssumptionReport {
    let mut checks = Vec::new();
    let near_zero = check_near_zero(pair);
    let (ok, detail) = match &near_zero {
        Ok(d) => (true, d.clone()),
        Err(d) => (false, d.clone()),
    };
    checks.push(Check::new("i", ok, detail));

    let mut breakpoints = None;
    if near_zero.is_ok() {
        match build_psi2(pair) {
            Ok(t) => {
                checks.push(Check::new("ii", true, "mu2 - mu1 > 0 on every delta regime"));
                let c = t.certification();
                let detail = format!(
                    "finite-probe certification: breakpoints {:?}, next one infinite; last regime one-sided up to {:.4} ({}), final relative gap {:.3e}",
                    t.breakpoints(),
                    c.probed_to,
                    if c.one_sided { "yes" } else { "no" },
                    c.final_gap
                );
                checks.push(Check::new("iii", c.passed(), detail));
                breakpoints = Some(t.report());
            }
            Err(e @ (Error::NonIncreasingPsi2 { .. } | Error::DeltaTailVanishes { .. })) => {
                checks.push(Check::new("ii", false, e.to_string()));
                checks.push(Check::new("iii", false, "construction aborted"));
            }
            Err(e) => {
                checks.push(Check::new("ii", false, format!("construction failed: {e}")));
                checks.push(Check::new("iii", false, "construction aborted"));
            }
        }
    } else {
        checks.push(Check::new("ii", false, "not checked: (i) fails"));
        checks.push(Check::new("iii", false, "not checked: (i) fails"));
    }

    let strikes: Vec<f64> = (0..=64).map(|k| pair.x_max() * k as f64 / 64.0).collect();
    let convex_order = match convex_order_check(pair, &strikes) {
        Ok(r) => {
            checks.push(Check::new(
                "convex_order",
                r.passed,
                format!("min call difference {:.3e} over {} strikes", r.min_difference, strikes.len()),
            ));
            Some(r)
        }
        Err(e) => {
            checks.push(Check::new("convex_order", false, e.to_string()));
            None
        }
    };
    AssumptionReport { checks, convex_order, breakpoints }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginal::SymmetricMarginal;

    fn example() -> TwoMarginalEmbedding {
        build_psi2(&DeltaMu::example_pair()).unwrap()
    }

    #[test]
    fn example_breakpoints_and_regimes() {
        let t = example();
        assert_eq!(t.breakpoints().len(), 1);
        assert!((t.breakpoints()[0] - 1.0).abs() < 1e-8, "{:?}", t.breakpoints());
        assert!((t.levels()[0] - 1.0).abs() < 1e-8);
        assert_eq!(t.regime(0.5), Regime::Mu2);
        assert_eq!(t.regime(1.2), Regime::Delta);
        assert!(t.certification().passed(), "{:?}", t.certification());
    }

    #[test]
    fn example_map_is_quintic_then_power_alpha() {
        let t = example();
        let alpha = SymmetricMarginal::mu2().mu2_calibration().unwrap().alpha;
        for &x in &[0.01f64, 0.2, 0.5, 0.9, 0.999] {
            let want: f64 = x.powi(5);
            assert!((t.psi2(x) - want).abs() < 1e-8 * want.max(1e-3), "x={x}: {} vs {want}", t.psi2(x));
        }
        for &x in &[1.001f64, 1.1, 1.3, 1.45] {
            let want: f64 = x.powf(alpha);
            assert!((t.psi2(x) - want).abs() < 1e-6 * want, "x={x}: {} vs {want}", t.psi2(x));
            assert!(t.psi2(x) > t.psi1().psi(x));
        }
    }

    #[test]
    fn phi2_inverts_psi2() {
        let t = example();
        for &x in &[0.05, 0.5, 0.99, 1.0, 1.2, 1.5] {
            let l = t.psi2(x);
            assert!((t.phi2(l) - x).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn tail_recursion_matches_regime_tails() {
        let pair = DeltaMu::example_pair();
        let t = build_psi2(&pair).unwrap();
        for &x in &[0.1, 0.5, 0.9] {
            let want = pair.mu2.closed_form_tail(x).unwrap();
            assert!((t.tail_recursion(x) - want).abs() < 1e-8 * want);
        }
        let alpha = pair.mu2.mu2_calibration().unwrap().alpha;
        let d1 = pair.mu2.mu2_calibration().unwrap().delta_at_one;
        for &x in &[1.05f64, 1.2, 1.4] {
            // dmu([x, inf)) for x > 1 in closed form
            let want = d1 / alpha * (-alpha * (x.powf(alpha - 1.0) - 1.0) / (alpha - 1.0)).exp();
            let got = t.tail_recursion(x);
            assert!(got > 0.0);
            assert!((got - want).abs() < 1e-6 * want, "x={x}: {got} vs {want}");
        }
    }

    /// Density from the un-simplified form, with closed-form maps and the
    /// `S` integral taken over the level sets directly.
    fn oracle_density(x: f64, alpha: f64) -> f64 {
        let psi1 = |x: f64| x * x;
        let dpsi1 = |x: f64| 2.0 * x;
        let gamma1 = |l: f64| 2.0 * l.sqrt();
        let psi2 = |x: f64| if x <= 1.0 { x.powi(5) } else { x.powf(alpha) };
        let dpsi2 = |x: f64| if x <= 1.0 { 5.0 * x.powi(4) } else { alpha * x.powf(alpha - 1.0) };
        let gamma2 = |l: f64| {
            if l <= 1.0 {
                1.25 * l.powf(0.8)
            } else {
                1.25 + alpha / (alpha - 1.0) * (l.powf((alpha - 1.0) / alpha) - 1.0)
            }
        };
        // {phi1 < phi2} = (0, 1) in level
        let l2 = psi2(x);
        let top = l2.min(1.0);
        let integral = (gamma2(top) - gamma1(top)).exp() - 1.0;
        let s = -(-gamma2(l2)).exp() * integral;
        if psi1(x) > psi2(x) {
            dpsi2(x) / (2.0 * x) * (s + (-gamma1(l2)).exp())
        } else {
            dpsi1(x) / (2.0 * x) * (-gamma1(psi1(x))).exp() + dpsi2(x) / (2.0 * x) * s
        }
    }

    #[test]
    fn implied_density_reproduces_mu2() {
        let pair = DeltaMu::example_pair();
        let t = build_psi2(&pair).unwrap();
        let alpha = pair.mu2.mu2_calibration().unwrap().alpha;
        let want = 2.5 * 0.125 * (-1.25f64 * 0.0625).exp();
        assert!((want - 0.289015254).abs() < 1e-8);
        assert!((implied_density(&t, 0.5) - want).abs() < 1e-4 * want);
        for &x in &[0.3, 0.5, 0.8, 1.1, 1.3, 2.0] {
            let m = pair.mu2.density(x);
            let o = oracle_density(x, alpha);
            assert!((o - m).abs() < 1e-9 * m, "oracle x={x}: {o} vs {m}");
            let nu = implied_density(&t, x);
            assert!((nu - m).abs() < 1e-6 * m, "x={x}: {nu} vs {m}");
        }
    }

    #[test]
    fn rejects_degenerate_and_swapped_pairs() {
        let same = DeltaMu::new(SymmetricMarginal::sym_exp(), SymmetricMarginal::sym_exp());
        assert!(matches!(build_psi2(&same), Err(Error::DegeneratePair(_))));
        let r = check_assumptions(&same);
        assert!(!r.check("i").unwrap().passed);

        let swapped = DeltaMu::new(SymmetricMarginal::mu2(), SymmetricMarginal::sym_exp());
        let r = check_assumptions(&swapped);
        assert!(!r.check("i").unwrap().passed);
        assert!(r.check("i").unwrap().detail.contains("> 0"));
    }

    #[test]
    fn example_pair_passes_all_assumptions() {
        let r = check_assumptions(&DeltaMu::example_pair());
        assert!(r.passed(), "{:#?}", r.checks);
        assert!(r.check("iii").unwrap().detail.contains("finite-probe"));
    }

    #[test]
    fn well_ordered_pair_has_no_breakpoint() {
        // gaussian(1) vs gaussian(2): psi of the wider law stays below
        let pair = DeltaMu::new(SymmetricMarginal::gaussian(1.0).unwrap(), SymmetricMarginal::gaussian(2.0).unwrap());
        let t = build_psi2(&pair).unwrap();
        assert!(t.breakpoints().is_empty(), "{:?}", t.breakpoints());
        let m = &pair.mu2;
        for &x in &[0.2, 1.0, 2.5] {
            let nu = implied_density(&t, x);
            assert!((nu - m.density(x)).abs() < 1e-6 * m.density(x), "x={x}");
        }
    }
}
