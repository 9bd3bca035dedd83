//! Semi-static hedges of convex local-time payoffs `F(L_T)`.
//!
//! A plan holds the hedge ratios `A_+`, `A_-`, the static payoff `H` and its
//! price `mu(H)` for a barrier pair. Payoffs are piecewise linear, so every
//! integral against `F''` is a finite sum over atoms, and the dynamic position
//! is
//!
//! ```text
//! Delta = -A_+(L) 1{x > 0} - A_-(L) 1{x <= 0}
//! ```
//!
//! which is the sign for which `u(X_T, L_T) = int Delta dX` holds by
//! Ito-Tanaka (`d_x u = -A_+` for `x > 0`, `-A_-` for `x < 0`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMap, GeneralEmbedding, RealLaw, ReversedEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{gauss_legendre, gauss_legendre8_points, MonotoneCubic};

/// Grid size used by [`check_relations`].
pub const RELATION_GRID: usize = 512;

/// Convex piecewise-linear payoff of the local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPayoff {
    pub f0: f64,
    pub slope0: f64,
    /// `(k_i, w_i)`: kinks of `F` and the jumps of `F'` there.
    pub atoms: Vec<(f64, f64)>,
}

impl ConvexPayoff {
    /// Validates the payoff. Atoms at zero only change the right slope at 0 and
    /// are folded into `slope0`.
    pub fn new(f0: f64, slope0: f64, atoms: Vec<(f64, f64)>) -> Result<Self> {
        if !f0.is_finite() || !slope0.is_finite() {
            return Err(Error::InvalidPayoff("F(0) and F'(0) must be finite".into()));
        }
        let mut slope0 = slope0;
        let mut kept = Vec::with_capacity(atoms.len());
        for &(k, w) in &atoms {
            if !(k.is_finite() && w.is_finite()) || k < 0.0 {
                return Err(Error::InvalidPayoff(format!("atom ({k}, {w}) must have finite k >= 0")));
            }
            if w <= 0.0 {
                return Err(Error::InvalidPayoff(format!("atom weight {w} at k = {k} must be positive")));
            }
            if let Some(&(prev, _)) = kept.last() {
                if k <= prev {
                    return Err(Error::InvalidPayoff("atom levels must be strictly increasing".into()));
                }
            }
            if k == 0.0 {
                slope0 += w;
            } else {
                kept.push((k, w));
            }
        }
        Ok(Self { f0, slope0, atoms: kept })
    }

    pub fn linear() -> Self {
        Self { f0: 0.0, slope0: 1.0, atoms: vec![] }
    }

    pub fn constant(c: f64) -> Self {
        Self { f0: c, slope0: 0.0, atoms: vec![] }
    }

    /// `(l - k)^+`.
    pub fn call_on_l(k: f64) -> Result<Self> {
        Self::new(0.0, 0.0, vec![(k, 1.0)])
    }

    pub fn value(&self, l: f64) -> f64 {
        self.f0
            + self.slope0 * l
            + self.atoms.iter().map(|&(k, w)| w * (l - k).max(0.0)).sum::<f64>()
    }

    /// Right derivative `F'(l)`.
    pub fn slope(&self, l: f64) -> f64 {
        self.slope0 + self.atoms.iter().filter(|a| a.0 <= l).map(|a| a.1).sum::<f64>()
    }

    pub fn slope_inf(&self) -> f64 {
        self.slope0 + self.atoms.iter().map(|a| a.1).sum::<f64>()
    }

    /// `sup |F'|`.
    pub fn lipschitz(&self) -> f64 {
        self.slope0.abs().max(self.slope_inf().abs())
    }
}

impl FromStr for ConvexPayoff {
    type Err = Error;

    /// Parses `linear`, `call_on_L:K=<k>` or `pwl:[(k,w),...]`.
    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = |why: &str| Error::InvalidPayoff(format!("'{s}': {why}"));
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(&format!("'{t}' is not a number")));
        if compact == "linear" {
            return Ok(Self::linear());
        }
        if let Some(rest) = compact.strip_prefix("call_on_L:") {
            let k = rest.strip_prefix("K=").ok_or_else(|| bad("expected K=<level>"))?;
            return Self::call_on_l(num(k)?);
        }
        if let Some(rest) = compact.strip_prefix("pwl:") {
            let inner = rest
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| bad("expected a bracketed list"))?;
            let mut atoms = Vec::new();
            if !inner.is_empty() {
                let body = inner
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| bad("expected (k,w) pairs"))?;
                for pair in body.split("),(") {
                    let (k, w) = pair.split_once(',').ok_or_else(|| bad("expected (k,w) pairs"))?;
                    atoms.push((num(k)?, num(w)?));
                }
            }
            return Self::new(0.0, 0.0, atoms);
        }
        Err(bad("unknown payoff; use linear, call_on_L:K=<k> or pwl:[(k,w),...]"))
    }
}

impl fmt::Display for ConvexPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.f0 == 0.0 && self.slope0 == 1.0 && self.atoms.is_empty() {
            return write!(f, "linear");
        }
        if self.f0 == 0.0 && self.slope0 == 0.0 && self.atoms.len() == 1 && self.atoms[0].1 == 1.0 {
            return write!(f, "call_on_L:K={}", self.atoms[0].0);
        }
        if self.f0 == 0.0 && self.slope0 == 0.0 {
            let parts: Vec<String> = self.atoms.iter().map(|(k, w)| format!("({k},{w})")).collect();
            return write!(f, "pwl:[{}]", parts.join(","));
        }
        write!(f, "F(0)={} F'(0)={} atoms={:?}", self.f0, self.slope0, self.atoms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Super,
    Sub,
}

/// Borrowed barrier pair usable by the hedging formulas.
#[derive(Debug, Clone, Copy)]
pub enum BarrierRef<'a> {
    Vallois(&'a EmbeddingMap),
    Reversed(&'a ReversedEmbedding),
    General(&'a GeneralEmbedding),
}

impl<'a> From<&'a EmbeddingMap> for BarrierRef<'a> {
    fn from(e: &'a EmbeddingMap) -> Self {
        BarrierRef::Vallois(e)
    }
}

impl<'a> From<&'a ReversedEmbedding> for BarrierRef<'a> {
    fn from(e: &'a ReversedEmbedding) -> Self {
        BarrierRef::Reversed(e)
    }
}

impl<'a> From<&'a GeneralEmbedding> for BarrierRef<'a> {
    fn from(e: &'a GeneralEmbedding) -> Self {
        BarrierRef::General(e)
    }
}

/// State along one half-line, indexed by a monotone parameter `p`
/// (`|x|` for symmetric maps, `phi_+` for the general one).
#[derive(Debug, Clone, Copy)]
struct Point {
    x: f64,
    dx: f64,
    l: f64,
    dl: f64,
    gamma: f64,
    /// `phi_+` at this local time, used by the general-embedding kernels.
    s: f64,
}

impl BarrierRef<'_> {
    fn symmetric(&self) -> bool {
        !matches!(self, BarrierRef::General(_))
    }

    fn knots(&self) -> &[f64] {
        match self {
            BarrierRef::Vallois(e) => e.grid(),
            BarrierRef::Reversed(r) => r.grid(),
            BarrierRef::General(g) => g.s_knots(),
        }
    }

    /// `sign` is `+1` for the positive half-line and `-1` for the negative one.
    fn point(&self, sign: f64, p: f64) -> Point {
        match self {
            BarrierRef::Vallois(e) => Point {
                x: sign * p,
                dx: sign,
                l: e.psi(p),
                dl: e.psi_derivative(p),
                gamma: e.gamma_at_x(p),
                s: p,
            },
            BarrierRef::Reversed(r) => {
                if p >= r.x_max() {
                    Point { x: sign * p, dx: sign, l: 0.0, dl: 0.0, gamma: 0.0, s: p }
                } else {
                    Point {
                        x: sign * p,
                        dx: sign,
                        l: r.psi(p),
                        dl: r.psi_derivative(p),
                        gamma: r.gamma_at_x(p),
                        s: p,
                    }
                }
            }
            BarrierRef::General(g) => {
                let (l, dl) = g.level_at(p);
                let (x, dx) = if sign > 0.0 { (p, 1.0) } else { g.minus_at(p) };
                Point { x, dx, l, dl, gamma: g.gamma_at(p), s: p }
            }
        }
    }

    /// Parameter of the barrier point `phi_+(l)`.
    fn param_of_l(&self, l: f64) -> f64 {
        match self {
            BarrierRef::Vallois(e) => e.phi(l),
            BarrierRef::Reversed(r) => r.phi(l),
            BarrierRef::General(g) => g.phi_plus(l),
        }
    }

    fn param_of_x(&self, x: f64) -> f64 {
        match self {
            BarrierRef::General(g) if x < 0.0 => g.s_of_minus(x),
            _ => x.abs(),
        }
    }

    /// `(phi_-(l), phi_+(l))`.
    pub fn bounds(&self, l: f64) -> (f64, f64) {
        match self {
            BarrierRef::Vallois(e) => {
                let p = e.phi(l);
                (-p, p)
            }
            BarrierRef::Reversed(r) => {
                let p = r.phi(l);
                (-p, p)
            }
            BarrierRef::General(g) => (g.phi_minus(l), g.phi_plus(l)),
        }
    }

    pub fn gamma(&self, l: f64) -> f64 {
        match self {
            BarrierRef::Vallois(e) => e.gamma(l),
            BarrierRef::Reversed(r) => r.gamma(l),
            BarrierRef::General(g) => g.gamma(l),
        }
    }

    /// Largest local time covered by the tabulation.
    fn l_top(&self) -> f64 {
        match self {
            BarrierRef::Vallois(e) => e.l_max(),
            BarrierRef::Reversed(r) => r.l_end(),
            BarrierRef::General(g) => g.l_max(),
        }
    }

    /// Knots of the parameter merged with the images of `levels`, so that
    /// kinks of `A` fall on panel ends.
    fn nodes(&self, levels: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = self.knots().to_vec();
        for &k in levels {
            let p = self.param_of_l(k);
            if p > 0.0 {
                v.push(p);
            }
        }
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs().max(1e-300));
        v
    }

    /// `int_0^{level} exp(gamma(z)) dz` for each (sorted) level, by quadrature
    /// in the parameter.
    fn exp_gamma_integrals(&self, levels: &[f64]) -> Vec<f64> {
        debug_assert!(levels.windows(2).all(|w| w[0] <= w[1]));
        let nodes = self.nodes(levels);
        let decreasing = matches!(self, BarrierRef::Reversed(_));
        // panels ordered by increasing local time
        let mut panels: Vec<(f64, f64)> = nodes.windows(2).map(|w| (w[0], w[1])).collect();
        if decreasing {
            panels.reverse();
        }
        let mut out = Vec::with_capacity(levels.len());
        let mut acc = 0.0;
        let mut li = 0;
        let integral = |a: f64, b: f64| -> f64 {
            gauss_legendre8_points(a, b)
                .iter()
                .map(|&(p, w)| {
                    let pt = self.point(1.0, p);
                    w * pt.gamma.exp() * pt.dl.abs()
                })
                .sum()
        };
        for &(a, b) in &panels {
            let (la, lb) = {
                let (pa, pb) = (self.point(1.0, a).l, self.point(1.0, b).l);
                if decreasing {
                    (pb, pa)
                } else {
                    (pa, pb)
                }
            };
            while li < levels.len() && levels[li] <= lb {
                if levels[li] <= la {
                    out.push(acc);
                } else {
                    let pc = self.param_of_l(levels[li]);
                    let part = if decreasing { integral(pc, b) } else { integral(a, pc) };
                    out.push(acc + part);
                }
                li += 1;
            }
            acc += integral(a, b);
        }
        while out.len() < levels.len() {
            out.push(acc);
        }
        out
    }
}

/// Per-atom data cached in a plan.
#[derive(Debug, Clone, PartialEq)]
struct Atom {
    k: f64,
    w: f64,
    gamma: f64,
    s: f64,
}

/// `K_+/-(s) = int_0^{l(s)} exp(gamma(z)) / phi_+/-(z) dz` for the general pair.
#[derive(Debug, Clone, PartialEq)]
struct Kernels {
    plus: MonotoneCubic,
    minus: MonotoneCubic,
}

impl Kernels {
    fn new(g: &GeneralEmbedding) -> Self {
        let s = g.s_knots().to_vec();
        let integrand = |sv: f64, sign: f64| -> f64 {
            let (_, dl) = g.level_at(sv);
            let phi = if sign > 0.0 { sv } else { g.minus_at(sv).0 };
            g.gamma_at(sv).exp() * dl / phi
        };
        let build = |sign: f64| {
            let mut vals = vec![0.0; s.len()];
            for j in 0..s.len() - 1 {
                vals[j + 1] = vals[j] + gauss_legendre(|v| integrand(v, sign), s[j], s[j + 1]);
            }
            let mut slopes: Vec<f64> = s.iter().map(|&v| integrand(v, sign)).collect();
            slopes[0] = integrand(1e-3 * s[1], sign);
            MonotoneCubic::with_slopes(s.clone(), vals, slopes)
        };
        Self { plus: build(1.0), minus: build(-1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // one per plan
enum Geometry {
    Vallois(EmbeddingMap),
    Reversed(ReversedEmbedding),
    General(GeneralEmbedding, Kernels),
}

impl Geometry {
    fn barrier(&self) -> BarrierRef<'_> {
        match self {
            Geometry::Vallois(e) => BarrierRef::Vallois(e),
            Geometry::Reversed(r) => BarrierRef::Reversed(r),
            Geometry::General(g, _) => BarrierRef::General(g),
        }
    }
}

/// Static payoff tabulated along one half-line.
#[derive(Debug, Clone, PartialEq)]
struct Branch {
    sign: f64,
    nodes: Vec<f64>,
    h: Vec<f64>,
}

/// Hedge ratios, static payoff and price for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgePlan {
    side: Side,
    payoff: ConvexPayoff,
    atoms: Vec<Atom>,
    /// `F'(inf)` on the super side, `F'(l_end-)` on the sub side.
    slope_top: f64,
    geometry: Geometry,
    h0: f64,
    plus: Branch,
    minus: Option<Branch>,
    price: f64,
}

impl HedgePlan {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn payoff(&self) -> &ConvexPayoff {
        &self.payoff
    }

    /// `mu(H)`.
    pub fn price(&self) -> f64 {
        self.price
    }

    pub fn barrier(&self) -> BarrierRef<'_> {
        self.geometry.barrier()
    }

    pub fn h_at_zero(&self) -> f64 {
        self.h0
    }

    /// Atoms used by the plan; on the sub side those at or beyond `l_end` are
    /// dropped since the stopped local time never reaches them.
    pub fn active_atoms(&self) -> Vec<(f64, f64)> {
        self.atoms.iter().map(|a| (a.k, a.w)).collect()
    }

    fn ratios_at(&self, l: f64, gamma: f64, s: f64) -> (f64, f64) {
        match (&self.side, &self.geometry) {
            (Side::Super, Geometry::General(_, kern)) => {
                let mut base = self.payoff.slope0;
                let (mut ap, mut am) = (0.0, 0.0);
                for a in &self.atoms {
                    let e = (-a.gamma).exp();
                    base += a.w * e;
                    let sc = s.min(a.s);
                    ap += a.w * e * kern.plus.eval(sc);
                    am += a.w * e * kern.minus.eval(sc);
                }
                (base + ap, -base + am)
            }
            (Side::Super, _) => {
                let a = self.payoff.slope0
                    + self
                        .atoms
                        .iter()
                        .map(|a| if l < a.k { a.w * (gamma - a.gamma).exp() } else { a.w })
                        .sum::<f64>();
                (a, -a)
            }
            (Side::Sub, _) => {
                let a = self.slope_top
                    - self
                        .atoms
                        .iter()
                        .filter(|a| a.k >= l)
                        .map(|a| a.w * (1.0 - (gamma - a.gamma).exp()))
                        .sum::<f64>();
                (a, -a)
            }
        }
    }

    fn ratio_at_point(&self, sign: f64, pt: &Point) -> f64 {
        let (ap, am) = self.ratios_at(pt.l, pt.gamma, pt.s);
        if sign > 0.0 {
            ap
        } else {
            am
        }
    }

    /// `(A_+(l), A_-(l))`.
    pub fn hedge_ratios(&self, l: f64) -> (f64, f64) {
        let b = self.barrier();
        match b {
            BarrierRef::General(g) => {
                let s = g.phi_plus(l);
                self.ratios_at(l, g.gamma_at(s), s)
            }
            BarrierRef::Reversed(r) if l >= r.l_end() => (self.slope_top, -self.slope_top),
            _ => {
                let p = b.param_of_l(l);
                self.ratios_at(l, b.point(1.0, p).gamma, p)
            }
        }
    }

    fn branch(&self, sign: f64) -> &Branch {
        if sign > 0.0 {
            &self.plus
        } else {
            self.minus.as_ref().unwrap_or(&self.plus)
        }
    }

    /// `int_{p_j}^{p} A(l) dx` along the branch.
    fn partial(&self, sign: f64, a: f64, b: f64) -> f64 {
        let barrier = self.barrier();
        gauss_legendre8_points(a, b)
            .iter()
            .map(|&(p, w)| {
                let pt = barrier.point(sign, p);
                w * self.ratio_at_point(sign, &pt) * pt.dx
            })
            .sum()
    }

    /// Static payoff `H(x)`.
    pub fn h(&self, x: f64) -> f64 {
        if x == 0.0 {
            return self.h0;
        }
        let sign = if x > 0.0 { 1.0 } else { -1.0 };
        let barrier = self.barrier();
        let br = self.branch(sign);
        let p = barrier.param_of_x(x);
        let n = br.nodes.len();
        let last = br.nodes[n - 1];
        if p >= last {
            let pt = barrier.point(sign, last);
            return br.h[n - 1] + self.ratio_at_point(sign, &pt) * (x - pt.x);
        }
        let j = br.nodes.partition_point(|&v| v <= p).clamp(1, n - 1) - 1;
        br.h[j] + self.partial(sign, br.nodes[j], p)
    }

    /// Hedge ratio at spot `x` and running local time `l`.
    pub fn delta(&self, x: f64, l: f64) -> f64 {
        let (ap, am) = self.hedge_ratios(l);
        if x > 0.0 {
            -ap
        } else {
            -am
        }
    }

    /// `u(x,l) = -A_+ x^+ + A_- x^- + A_+ phi_+ - H(phi_+) + F(l)`.
    pub fn u(&self, x: f64, l: f64) -> f64 {
        let (ap, am) = self.hedge_ratios(l);
        let (_, phi_plus) = self.barrier().bounds(l);
        -ap * x.max(0.0) + am * (-x).max(0.0) + ap * phi_plus - self.h(phi_plus) + self.payoff.value(l)
    }

    /// `sup |A_+/-|` over the tabulated levels.
    pub fn sup_ratio(&self) -> f64 {
        let barrier = self.barrier();
        let mut m: f64 = 0.0;
        for &p in &self.plus.nodes {
            let pt = barrier.point(1.0, p);
            let (ap, am) = self.ratios_at(pt.l, pt.gamma, pt.s);
            m = m.max(ap.abs()).max(am.abs());
        }
        m
    }
}

pub fn eval_delta(p: &HedgePlan, x: f64, l: f64) -> f64 {
    p.delta(x, l)
}

pub fn eval_u(p: &HedgePlan, x: f64, l: f64) -> f64 {
    p.u(x, l)
}

fn atoms_for(barrier: BarrierRef<'_>, atoms: &[(f64, f64)]) -> Vec<Atom> {
    atoms
        .iter()
        .map(|&(k, w)| {
            let s = barrier.param_of_l(k);
            let gamma = match barrier {
                BarrierRef::General(g) => g.gamma_at(s),
                _ => barrier.point(1.0, s).gamma,
            };
            Atom { k, w, gamma, s }
        })
        .collect()
}

fn assemble(
    side: Side,
    payoff: &ConvexPayoff,
    atoms: Vec<Atom>,
    slope_top: f64,
    geometry: Geometry,
    h0: f64,
    law: &dyn RealLaw,
) -> HedgePlan {
    let mut plan = HedgePlan {
        side,
        payoff: payoff.clone(),
        atoms,
        slope_top,
        geometry,
        h0,
        plus: Branch { sign: 1.0, nodes: vec![], h: vec![] },
        minus: None,
        price: f64::NAN,
    };
    let levels: Vec<f64> = plan.atoms.iter().map(|a| a.k).collect();
    let nodes = plan.barrier().nodes(&levels);
    let tabulate = |plan: &HedgePlan, sign: f64| -> Branch {
        let mut h = vec![h0; nodes.len()];
        for j in 0..nodes.len() - 1 {
            h[j + 1] = h[j] + plan.partial(sign, nodes[j], nodes[j + 1]);
        }
        Branch { sign, nodes: nodes.clone(), h }
    };
    plan.plus = tabulate(&plan, 1.0);
    if !plan.barrier().symmetric() {
        plan.minus = Some(tabulate(&plan, -1.0));
    }
    plan.price = price_of(&plan, law);
    plan
}

/// `mu(H)`: nested Gauss rules on every panel of each branch, plus the mass
/// beyond the last node at the last tabulated value.
fn price_of(plan: &HedgePlan, law: &dyn RealLaw) -> f64 {
    let barrier = plan.barrier();
    let mut total = 0.0;
    let signs: &[f64] = if plan.minus.is_some() { &[1.0, -1.0] } else { &[1.0] };
    for &sign in signs {
        let br = plan.branch(sign);
        let mut side_sum = 0.0;
        for j in 0..br.nodes.len() - 1 {
            let a = br.nodes[j];
            for (p, w) in gauss_legendre8_points(a, br.nodes[j + 1]) {
                let pt = barrier.point(sign, p);
                let hv = br.h[j] + plan.partial(sign, a, p);
                side_sum += w * hv * law.density(pt.x) * pt.dx.abs();
            }
        }
        let n = br.nodes.len();
        let x_end = barrier.point(sign, br.nodes[n - 1]).x;
        let beyond = if sign > 0.0 { law.tail(x_end) } else { 1.0 - law.tail(x_end) };
        side_sum += br.h[n - 1] * beyond;
        total += if plan.minus.is_none() { 2.0 * side_sum } else { side_sum };
    }
    // the atom of mu at zero (none for densities) contributes H(0) mu({0})
    total
}

/// Superhedge from a nondecreasing barrier pair.
pub fn build_super_hedge<'a>(
    f: &ConvexPayoff,
    e: impl Into<BarrierRef<'a>>,
    law: &dyn RealLaw,
) -> Result<HedgePlan> {
    let barrier = e.into();
    let geometry = match barrier {
        BarrierRef::Vallois(m) => Geometry::Vallois(m.clone()),
        BarrierRef::General(g) => Geometry::General(g.clone(), Kernels::new(g)),
        BarrierRef::Reversed(_) => {
            return Err(Error::Config("the superhedge needs a nondecreasing barrier".into()))
        }
    };
    let l_max = barrier.l_top();
    if let Some(&(k, _)) = f.atoms.iter().find(|a| a.0 > l_max) {
        return Err(Error::DomainExceeded { level: k, l_max });
    }
    let atoms = atoms_for(geometry.barrier(), &f.atoms);
    Ok(assemble(Side::Super, f, atoms, f.slope_inf(), geometry, f.f0, law))
}

/// Subhedge from the reversed (nonincreasing) barrier.
pub fn build_sub_hedge(f: &ConvexPayoff, r: &ReversedEmbedding, law: &dyn RealLaw) -> Result<HedgePlan> {
    let barrier = BarrierRef::Reversed(r);
    let l_end = r.l_end();
    let kept: Vec<(f64, f64)> = f.atoms.iter().copied().filter(|a| a.0 < l_end).collect();
    let slope_top = f.slope0 + kept.iter().map(|a| a.1).sum::<f64>();
    let atoms = atoms_for(barrier, &kept);
    let levels: Vec<f64> = atoms.iter().map(|a| a.k).collect();
    let e = barrier.exp_gamma_integrals(&levels);
    let h0 = f.f0
        - atoms
            .iter()
            .zip(&e)
            .map(|(a, ei)| a.w * (-a.gamma).exp() * ei)
            .sum::<f64>();
    Ok(assemble(Side::Sub, f, atoms, slope_top, Geometry::Reversed(r.clone()), h0, law))
}

/// `E[F(L_tau)] = F(0) + int F'(l) exp(-gamma(l)) dl` under the barrier's
/// stopping rule, integrated in the barrier parameter.
pub fn analytic_price<'a>(f: &ConvexPayoff, e: impl Into<BarrierRef<'a>>) -> f64 {
    let barrier = e.into();
    let levels: Vec<f64> = f.atoms.iter().map(|a| a.0).filter(|&k| k < barrier.l_top()).collect();
    let nodes = barrier.nodes(&levels);
    let mut sum = 0.0;
    for w in nodes.windows(2) {
        for (p, wt) in gauss_legendre8_points(w[0], w[1]) {
            let pt = barrier.point(1.0, p);
            sum += wt * f.slope(pt.l) * (-pt.gamma).exp() * pt.dl.abs();
        }
    }
    if !matches!(barrier, BarrierRef::Reversed(_)) {
        // beyond the table gamma' = (1/phi_+ - 1/phi_-)/2 is nearly constant
        let (lo, hi) = barrier.bounds(barrier.l_top());
        let rate = 0.5 * (1.0 / hi - 1.0 / lo);
        sum += f.slope_inf() * (-barrier.gamma(barrier.l_top())).exp() / rate;
    }
    f.f0 + sum
}

/// Residuals of the structural identities of a plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationReport {
    /// `max |(A_+ - A_-)/2 - F'(l) - exp(gamma(l)) int_l^inf exp(-gamma) dF'|`.
    pub half_spread: f64,
    /// `max |H(phi_+) - A_+ phi_+ - H(phi_-) + A_- phi_-|`.
    pub boundary_match: f64,
    /// `max |H(phi_+) - A_+ phi_+ - F(0) + int_0^l exp(gamma(z)) int_z^inf exp(-gamma) dF' dz|`.
    pub boundary_value: f64,
    pub sup_ratio: f64,
    /// `3 sup |F'|`.
    pub ratio_bound: f64,
    /// `H'` monotone on each half-line in the direction of the side.
    pub h_shape: bool,
}

impl RelationReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.half_spread <= tol
            && self.boundary_match <= tol
            && self.boundary_value <= tol
            && self.sup_ratio <= self.ratio_bound * (1.0 + 1e-9) + 1e-12
            && self.h_shape
    }
}

pub fn check_relations(p: &HedgePlan) -> RelationReport {
    let barrier = p.barrier();
    let top = barrier.l_top();
    let levels: Vec<f64> = (1..=RELATION_GRID).map(|i| top * i as f64 / (RELATION_GRID as f64 + 1.0)).collect();
    let atoms = &p.atoms;
    let e_levels = barrier.exp_gamma_integrals(&levels);
    let e_atoms = barrier.exp_gamma_integrals(&atoms.iter().map(|a| a.k).collect::<Vec<_>>());
    let (mut r1, mut r2, mut r3) = (0.0f64, 0.0f64, 0.0f64);
    for (&l, &el) in levels.iter().zip(&e_levels) {
        let (ap, am) = p.hedge_ratios(l);
        let g = barrier.gamma(l);
        let tail: f64 = atoms.iter().filter(|a| a.k >= l).map(|a| a.w * (g - a.gamma).exp()).sum();
        let slope = match p.side {
            Side::Super => p.payoff.slope(l),
            Side::Sub => p.payoff.slope0 + atoms.iter().filter(|a| a.k <= l).map(|a| a.w).sum::<f64>(),
        };
        r1 = r1.max((0.5 * (ap - am) - slope - tail).abs());
        let (lo, hi) = barrier.bounds(l);
        let left = p.h(hi) - ap * hi;
        let right = p.h(lo) - am * lo;
        r2 = r2.max((left - right).abs());
        let integral: f64 = atoms
            .iter()
            .zip(&e_atoms)
            .map(|(a, ea)| a.w * (-a.gamma).exp() * if l < a.k { el } else { *ea })
            .sum();
        r3 = r3.max((left - (p.payoff.f0 - integral)).abs());
    }
    let h_shape = [1.0, -1.0].iter().all(|&sign| {
        let br = p.branch(sign);
        let slopes: Vec<f64> = br
            .nodes
            .windows(2)
            .zip(br.h.windows(2))
            .map(|(x, h)| {
                let (xa, xb) = (barrier.point(sign, x[0]).x, barrier.point(sign, x[1]).x);
                (h[1] - h[0]) / (xb - xa)
            })
            .collect();
        let scale = p.payoff.lipschitz().max(1e-300);
        slopes.windows(2).all(|s| {
            // derivative in |x|; convex on the half-line means nondecreasing
            // slope in x
            let d = sign * (s[1] - s[0]);
            match p.side {
                Side::Super => d >= -1e-9 * scale,
                Side::Sub => d <= 1e-9 * scale,
            }
        })
    });
    RelationReport {
        half_spread: r1,
        boundary_match: r2,
        boundary_value: r3,
        sup_ratio: p.sup_ratio(),
        ratio_bound: 3.0 * p.payoff.lipschitz(),
        h_shape,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{build_psi, build_reversed_psi};
    use crate::marginal::SymmetricMarginal;

    fn sym_exp() -> (SymmetricMarginal, EmbeddingMap) {
        let m = SymmetricMarginal::sym_exp();
        let e = build_psi(&m).unwrap();
        (m, e)
    }

    #[test]
    fn payoff_language_round_trips() {
        for s in ["linear", "call_on_L:K=1", "pwl:[(0.5,1),(2,0.25)]", "pwl:[]"] {
            let p: ConvexPayoff = s.parse().unwrap();
            assert_eq!(p.to_string().parse::<ConvexPayoff>().unwrap(), p);
        }
        let p: ConvexPayoff = "pwl:[ (0.5, 1), (2, 0.25) ]".parse().unwrap();
        assert_eq!(p.atoms, vec![(0.5, 1.0), (2.0, 0.25)]);
        assert!("pwl:[(1,-1)]".parse::<ConvexPayoff>().is_err());
        assert!("pwl:[(2,1),(1,1)]".parse::<ConvexPayoff>().is_err());
        assert!("call_on_L:X=1".parse::<ConvexPayoff>().is_err());
        assert!("quadratic".parse::<ConvexPayoff>().is_err());
    }

    #[test]
    fn payoff_values() {
        let p = ConvexPayoff::new(1.0, -0.5, vec![(1.0, 1.0), (3.0, 0.5)]).unwrap();
        assert_eq!(p.value(0.0), 1.0);
        assert_eq!(p.value(2.0), 1.0 - 1.0 + 1.0);
        assert_eq!(p.slope(0.5), -0.5);
        assert_eq!(p.slope(1.0), 0.5);
        assert_eq!(p.slope_inf(), 1.0);
        assert_eq!(p.lipschitz(), 1.0);
        let folded = ConvexPayoff::new(0.0, 0.0, vec![(0.0, 2.0)]).unwrap();
        assert_eq!(folded.slope0, 2.0);
        assert!(folded.atoms.is_empty());
    }

    #[test]
    fn linear_payoff_on_sym_exp() {
        let (m, e) = sym_exp();
        let p = build_super_hedge(&ConvexPayoff::linear(), &e, &m).unwrap();
        assert_eq!(p.hedge_ratios(0.7), (1.0, -1.0));
        assert!((p.h(0.8) - 0.8).abs() < 1e-12);
        assert!((p.h(-0.8) - 0.8).abs() < 1e-12);
        assert!((p.price() - 0.5).abs() < 1e-9, "{}", p.price());
        assert_eq!(eval_delta(&p, 0.3, 0.7), -1.0);
        assert_eq!(eval_delta(&p, -0.3, 0.7), 1.0);
        let l: f64 = 0.7;
        assert!((eval_u(&p, e.phi(l), l) - (l - l.sqrt())).abs() < 1e-8);
    }

    #[test]
    fn constant_payoff_is_static() {
        let (m, e) = sym_exp();
        let p = build_super_hedge(&ConvexPayoff::constant(2.5), &e, &m).unwrap();
        assert_eq!(eval_delta(&p, 0.4, 1.0), 0.0);
        assert_eq!(p.h(3.0), 2.5);
        assert!((p.price() - 2.5).abs() < 1e-9);
        assert!((eval_u(&p, 0.3, 1.0)).abs() < 1e-12);
        let r = check_relations(&p);
        assert_eq!(r.half_spread, 0.0);
        assert!(r.passed(1e-12));
    }

    #[test]
    fn call_on_local_time_matches_closed_form() {
        let (m, e) = sym_exp();
        let f = ConvexPayoff::call_on_l(1.0).unwrap();
        let p = build_super_hedge(&f, &e, &m).unwrap();
        for &l in &[0.1f64, 0.5, 0.99, 1.0, 2.0, 9.0] {
            let want = (2.0 * (l.min(1.0).sqrt() - 1.0)).exp();
            assert!((p.hedge_ratios(l).0 - want).abs() < 1e-8, "l={l}");
        }
        let exact = 1.5 * (-2.0f64).exp();
        assert!((p.price() - exact).abs() < 1e-8, "{}", p.price());
        assert!((analytic_price(&f, &e) - exact).abs() < 1e-8);
    }

    #[test]
    fn relations_hold_for_a_call() {
        let (m, e) = sym_exp();
        let f = ConvexPayoff::new(0.2, -0.3, vec![(0.5, 1.0), (2.0, 0.5)]).unwrap();
        let p = build_super_hedge(&f, &e, &m).unwrap();
        let r = check_relations(&p);
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn u_dominates_and_touches_at_the_barrier() {
        let (m, e) = sym_exp();
        let p = build_super_hedge(&ConvexPayoff::call_on_l(1.0).unwrap(), &e, &m).unwrap();
        let l = 0.64;
        let phi = e.phi(l);
        let gap = |x: f64| p.u(x, l) - (p.payoff().value(l) - p.h(x));
        for i in 0..=400 {
            let x = -4.0 + 8.0 * i as f64 / 400.0;
            assert!(gap(x) >= -1e-9, "x={x} gap={}", gap(x));
        }
        assert!(gap(phi).abs() < 1e-9);
        assert!(gap(-phi).abs() < 1e-9);
    }

    #[test]
    fn atoms_beyond_the_domain_are_rejected() {
        let (m, e) = sym_exp();
        let f = ConvexPayoff::call_on_l(e.l_max() * 2.0).unwrap();
        assert!(matches!(build_super_hedge(&f, &e, &m), Err(Error::DomainExceeded { .. })));
    }

    #[test]
    fn sub_hedge_linear_and_ordering() {
        let m = SymmetricMarginal::sym_exp();
        let r = build_reversed_psi(&m).unwrap();
        let e = build_psi(&m).unwrap();
        let lin = build_sub_hedge(&ConvexPayoff::linear(), &r, &m).unwrap();
        assert!((lin.price() - 0.5).abs() < 1e-9, "{}", lin.price());
        assert!((lin.h(-1.3) - 1.3).abs() < 1e-12);
        for k in [0.1, 0.25, 0.5] {
            let f = ConvexPayoff::call_on_l(k).unwrap();
            let sub = build_sub_hedge(&f, &r, &m).unwrap();
            let sup = build_super_hedge(&f, &e, &m).unwrap();
            assert!(sub.price() < sup.price());
            assert!((sub.price() - analytic_price(&f, &r)).abs() < 1e-6, "k={k}");
            let rep = check_relations(&sub);
            assert!(rep.passed(1e-6), "k={k} {rep:?}");
        }
        // the stopped local time never exceeds l_end < 1
        let far = build_sub_hedge(&ConvexPayoff::call_on_l(1.0).unwrap(), &r, &m).unwrap();
        assert!(far.active_atoms().is_empty());
        assert!(far.price().abs() < 1e-12);
    }

    #[test]
    fn general_pair_reproduces_symmetric_hedge() {
        let (m, e) = sym_exp();
        let g = crate::embedding::build_phi_general(&m).unwrap();
        let f = ConvexPayoff::new(0.0, 0.5, vec![(0.5, 1.0), (2.0, 0.5)]).unwrap();
        let ps = build_super_hedge(&f, &e, &m).unwrap();
        let pg = build_super_hedge(&f, &g, &m).unwrap();
        assert!((ps.price() - pg.price()).abs() < 1e-6, "{} {}", ps.price(), pg.price());
        for &l in &[0.1, 1.0, 3.0] {
            let (a, b) = (ps.hedge_ratios(l), pg.hedge_ratios(l));
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6, "l={l} {a:?} {b:?}");
        }
        assert!(check_relations(&pg).passed(1e-6));
    }
}
