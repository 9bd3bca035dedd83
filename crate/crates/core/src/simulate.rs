//! Monte-Carlo engine: Brownian paths with a discretised local time at zero,
//! stopped at local-time barriers.
//!
//! Stopping uses the window scheme `L_k = L_{k-1} + dt / (2 eps) 1{|B_{k-1}| <= eps}`.
//! Hedge gains use the discrete Ito-Tanaka local time of the same path,
//! `Lambda_k = Lambda_{k-1} + |B_k| - |B_{k-1}| - sgn(B_{k-1}) dB_k` with
//! `sgn(0) = -1`, for which `int Delta dB + H(B) - F(Lambda)` is an exact
//! discrete identity up to the curvature of `u` along the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMap, GeneralEmbedding, RealLaw, ReversedEmbedding};
use crate::error::{Error, Result};
use crate::hedging::{BarrierRef, HedgePlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub eps: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Brownian time after which a path is censored.
    pub t_budget: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 1.0 / 4000.0, eps: 0.04, n_paths: 1 << 17, seed: 0, t_budget: 64.0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if !(self.t_budget > 0.0) {
            return Err(Error::Config(format!("t_budget must be positive, got {}", self.t_budget)));
        }
        Ok(())
    }

    fn max_steps(&self) -> u64 {
        (self.t_budget / self.dt).ceil() as u64
    }

    /// Generator for path `index`: one ChaCha stream per path, so draws do not
    /// depend on scheduling.
    pub fn path_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Window local-time update.
pub fn step_local_time(prev_l: f64, prev_b: f64, cfg: &SimConfig) -> f64 {
    if prev_b.abs() <= cfg.eps {
        prev_l + cfg.dt / (2.0 * cfg.eps)
    } else {
        prev_l
    }
}

/// Ito-Tanaka local-time increment `|b + db| - |b| - sgn(b) db`, which is
/// `2|b + db|` on a sign change and zero otherwise.
pub fn tanaka_increment(prev_b: f64, new_b: f64) -> f64 {
    if (prev_b > 0.0) != (new_b > 0.0) {
        2.0 * new_b.abs()
    } else {
        0.0
    }
}

/// Barriers `phi_-(l) <= 0 <= phi_+(l)` driven by the running local time.
pub trait Barrier: Sync {
    fn bounds(&self, l: f64) -> (f64, f64);
}

impl Barrier for EmbeddingMap {
    fn bounds(&self, l: f64) -> (f64, f64) {
        let p = self.phi(l);
        (-p, p)
    }
}

impl Barrier for ReversedEmbedding {
    fn bounds(&self, l: f64) -> (f64, f64) {
        let p = self.phi(l);
        (-p, p)
    }
}

impl Barrier for GeneralEmbedding {
    fn bounds(&self, l: f64) -> (f64, f64) {
        (self.phi_minus(l), self.phi_plus(l))
    }
}

impl Barrier for BarrierRef<'_> {
    fn bounds(&self, l: f64) -> (f64, f64) {
        BarrierRef::bounds(self, l)
    }
}

/// Fixed interval `(-c, c)`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBarrier(pub f64);

impl Barrier for ConstantBarrier {
    fn bounds(&self, _l: f64) -> (f64, f64) {
        (-self.0, self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StoppedSample {
    pub b_tau: f64,
    /// Window local time at the stop.
    pub l_tau: f64,
    /// Ito-Tanaka local time of the discrete path at the stop.
    pub l_tanaka: f64,
    pub tau: f64,
    pub gains: Option<f64>,
    /// `gains + H(b_tau) - F(l_tanaka)`.
    pub slack: Option<f64>,
    pub censored: bool,
}

/// Running state of one path.
struct PathState {
    b: f64,
    l: f64,
    lam: f64,
    steps: u64,
    gains: f64,
}

/// Advances the path until it leaves `(lo(L), hi(L))`; returns `false` if the
/// budget ran out first. Bounds are recomputed only when `L` moves, hedge
/// ratios only when the Tanaka local time moves.
fn run_until_exit(
    st: &mut PathState,
    barrier: &dyn Barrier,
    plan: Option<&HedgePlan>,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
    max_steps: u64,
) -> bool {
    let sqrt_dt = cfg.dt.sqrt();
    let (mut lo, mut hi) = barrier.bounds(st.l);
    // a later stage may start already outside its barrier
    if st.steps > 0 && (st.b >= hi || st.b <= lo) {
        return true;
    }
    let mut ratios = plan.map(|p| p.hedge_ratios(st.lam));
    while st.steps < max_steps {
        let z: f64 = rng.sample(StandardNormal);
        let db = sqrt_dt * z;
        if let Some((ap, am)) = ratios {
            let delta = if st.b > 0.0 { -ap } else { -am };
            st.gains += delta * db;
        }
        let new_l = step_local_time(st.l, st.b, cfg);
        let new_b = st.b + db;
        let dlam = tanaka_increment(st.b, new_b);
        st.b = new_b;
        st.steps += 1;
        if dlam > 0.0 {
            st.lam += dlam;
            if let Some(p) = plan {
                ratios = Some(p.hedge_ratios(st.lam));
            }
        }
        if new_l != st.l {
            st.l = new_l;
            (lo, hi) = barrier.bounds(st.l);
        }
        if st.b >= hi || st.b <= lo {
            return true;
        }
    }
    false
}

fn sample_of(st: &PathState, plan: Option<&HedgePlan>, cfg: &SimConfig, censored: bool) -> StoppedSample {
    let gains = plan.map(|_| st.gains);
    let slack = plan.map(|p| st.gains + p.h(st.b) - p.payoff().value(st.lam));
    StoppedSample {
        b_tau: st.b,
        l_tau: st.l,
        l_tanaka: st.lam,
        tau: st.steps as f64 * cfg.dt,
        gains,
        slack,
        censored,
    }
}

/// One stopped path per index, in index order.
pub fn simulate_stopped(
    barrier: &dyn Barrier,
    cfg: &SimConfig,
    plan: Option<&HedgePlan>,
) -> Result<Vec<StoppedSample>> {
    cfg.validate()?;
    let max_steps = cfg.max_steps();
    Ok((0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = cfg.path_rng(i);
            let mut st = PathState { b: 0.0, l: 0.0, lam: 0.0, steps: 0, gains: 0.0 };
            let done = run_until_exit(&mut st, barrier, plan, cfg, &mut rng, max_steps);
            sample_of(&st, plan, cfg, !done)
        })
        .collect())
}

/// Nested stopping along one path: stage `j` continues from the stop of
/// stage `j - 1` with the same running local time.
pub fn simulate_nested(barriers: &[&dyn Barrier], cfg: &SimConfig) -> Result<Vec<Vec<StoppedSample>>> {
    cfg.validate()?;
    if barriers.is_empty() {
        return Err(Error::Config("at least one barrier is required".into()));
    }
    let max_steps = cfg.max_steps();
    Ok((0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = cfg.path_rng(i);
            let mut st = PathState { b: 0.0, l: 0.0, lam: 0.0, steps: 0, gains: 0.0 };
            let mut out = Vec::with_capacity(barriers.len());
            let mut censored = false;
            for b in barriers {
                if !censored {
                    censored = !run_until_exit(&mut st, *b, None, cfg, &mut rng, max_steps);
                }
                out.push(sample_of(&st, None, cfg, censored));
            }
            out
        })
        .collect())
}

/// Two-stage stopping: first at `first`, then at `second` on the same path.
pub fn simulate_sequential(
    first: &dyn Barrier,
    second: &dyn Barrier,
    cfg: &SimConfig,
) -> Result<Vec<(StoppedSample, StoppedSample)>> {
    Ok(simulate_nested(&[first, second], cfg)?
        .into_iter()
        .map(|v| (v[0], v[1]))
        .collect())
}

/// Right-continuous empirical distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCDF {
    sorted: Vec<f64>,
}

impl EmpiricalCDF {
    /// Non-finite values are dropped.
    pub fn new(values: impl IntoIterator<Item = f64>) -> Self {
        let mut sorted: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    /// Terminal values of the uncensored samples.
    pub fn from_samples(samples: &[StoppedSample]) -> Self {
        Self::new(samples.iter().filter(|s| !s.censored).map(|s| s.b_tau))
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of the sample `<= x`.
    pub fn query(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return f64::NAN;
        }
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }
}

/// Kolmogorov distance to `cdf`, taken over sample points outside the closed
/// interval `exclusion` (both one-sided limits of the step function count).
pub fn ks_distance_with<F: Fn(f64) -> f64>(
    emp: &EmpiricalCDF,
    cdf: F,
    exclusion: Option<(f64, f64)>,
) -> Result<f64> {
    if emp.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = emp.len() as f64;
    let v = emp.values();
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < v.len() {
        let x = v[i];
        let mut j = i;
        while j < v.len() && v[j] == x {
            j += 1;
        }
        if exclusion.is_none_or(|(a, b)| x < a || x > b) {
            let f = cdf(x);
            d = d.max((j as f64 / n - f).abs()).max((i as f64 / n - f).abs());
        }
        i = j;
    }
    Ok(d)
}

/// CDF of a law given by its tail.
pub fn law_cdf(law: &dyn RealLaw, x: f64) -> f64 {
    1.0 - law.tail(x)
}

/// Kolmogorov distance to a marginal outside `exclusion`.
pub fn ks_distance(emp: &EmpiricalCDF, analytic: &dyn RealLaw, exclusion: Option<(f64, f64)>) -> Result<f64> {
    ks_distance_with(emp, |x| law_cdf(analytic, x), exclusion)
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Excess kurtosis and its delta-method standard error from the second,
/// fourth, sixth and eighth central moments.
pub fn excess_kurtosis(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let (m2, m4, m6, m8) = (m(2), m(4), m(6), m(8));
    let kurt = m4 / (m2 * m2);
    // gradient of m4 / m2^2 with respect to (m2, m4)
    let (g2, g4) = (-2.0 * m4 / m2.powi(3), 1.0 / (m2 * m2));
    let c22 = m4 - m2 * m2;
    let c24 = m6 - m2 * m4;
    let c44 = m8 - m4 * m4;
    let var = (g2 * g2 * c22 + 2.0 * g2 * g4 * c24 + g4 * g4 * c44) / n;
    (kurt - 3.0, var.max(0.0).sqrt())
}

/// Summary diagnostics of a batch of stopped samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub n: usize,
    pub censored: usize,
    pub mean_b: f64,
    pub se_b: f64,
    pub mean_l: f64,
    pub se_l: f64,
    pub mean_tau: f64,
}

pub fn summarize(samples: &[StoppedSample]) -> SampleSummary {
    let ok: Vec<&StoppedSample> = samples.iter().filter(|s| !s.censored).collect();
    let b: Vec<f64> = ok.iter().map(|s| s.b_tau).collect();
    let l: Vec<f64> = ok.iter().map(|s| s.l_tau).collect();
    let (mean_b, se_b) = mean_se(&b);
    let (mean_l, se_l) = mean_se(&l);
    let mean_tau = ok.iter().map(|s| s.tau).sum::<f64>() / ok.len().max(1) as f64;
    SampleSummary { n: samples.len(), censored: samples.len() - ok.len(), mean_b, se_b, mean_l, se_l, mean_tau }
}

/// Declared discretisation tolerance for pathwise hedge checks,
/// `5 (sup|A| + sup|H'|) sqrt(dt)`; `H' = A` along the barrier image, so both
/// terms are `sup|A|`.
pub fn hedge_tolerance(plan: &HedgePlan, dt: f64) -> f64 {
    let a = plan.sup_ratio();
    5.0 * (a + a) * dt.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SimConfig {
        SimConfig { n_paths: n, seed: 7, ..SimConfig::default() }
    }

    #[test]
    fn window_update_examples() {
        let cfg = SimConfig::default();
        assert!((step_local_time(0.0, 0.0, &cfg) - 0.003125).abs() < 1e-15);
        assert_eq!(step_local_time(0.5, 1.0, &cfg), 0.5);
        assert_eq!(step_local_time(0.5, 0.04, &cfg), 0.5 + 0.003125);
    }

    #[test]
    fn tanaka_increment_matches_definition() {
        for &(a, b) in &[(0.3, -0.1), (-0.2, 0.5), (0.1, 0.4), (0.0, 0.2), (0.0, -0.2), (-0.3, 0.0)] {
            let sgn = if a > 0.0 { 1.0 } else { -1.0 };
            let def = f64::abs(b) - f64::abs(a) - sgn * (b - a);
            assert!((tanaka_increment(a, b) - def).abs() < 1e-15, "{a} {b}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { dt: 0.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { eps: -1.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { n_paths: 0, ..SimConfig::default() }.validate().is_err());
        assert!(simulate_stopped(&ConstantBarrier(1.0), &SimConfig { dt: -1.0, ..small(1) }, None).is_err());
    }

    #[test]
    fn constant_barrier_stops_at_the_level() {
        let cfg = small(2000);
        let s = simulate_stopped(&ConstantBarrier(0.5), &cfg, None).unwrap();
        for x in &s {
            assert!(!x.censored);
            assert!(x.b_tau.abs() >= 0.5 && x.b_tau.abs() < 0.5 + 6.0 * cfg.dt.sqrt());
        }
        // E[tau] = c^2 for exit from (-c, c), up to overshoot
        let m = s.iter().map(|x| x.tau).sum::<f64>() / s.len() as f64;
        assert!((m - 0.25).abs() < 0.03, "{m}");
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small(300);
        let a = simulate_stopped(&ConstantBarrier(0.3), &cfg, None).unwrap();
        let b = simulate_stopped(&ConstantBarrier(0.3), &cfg, None).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| simulate_stopped(&ConstantBarrier(0.3), &cfg, None).unwrap());
        assert_eq!(a, c);
        let d = simulate_stopped(&ConstantBarrier(0.3), &SimConfig { seed: 8, ..cfg }, None).unwrap();
        assert_ne!(a, d);
    }

    /// `E[L_1]` of the window scheme: `dt/(2 eps) sum_k P(|B_{k dt}| <= eps)`.
    fn window_mean(cfg: &SimConfig) -> f64 {
        let n = (1.0 / cfg.dt) as usize;
        let p = |k: usize| libm::erf(cfg.eps / (2.0 * k as f64 * cfg.dt).sqrt());
        cfg.dt / (2.0 * cfg.eps) * (1.0 + (1..n).map(p).sum::<f64>())
    }

    #[test]
    fn window_scheme_bias_against_tanaka() {
        // the continuum value is E|B_1| = sqrt(2/pi); the window average sits
        // about 2.3% below it at eps = 0.04 and shrinks with eps
        let want = (2.0 / std::f64::consts::PI).sqrt();
        let at = |eps: f64| window_mean(&SimConfig { eps, ..SimConfig::default() });
        assert!((at(0.04) / want - 1.0 + 0.0229).abs() < 5e-4, "{}", at(0.04));
        assert!((at(0.01) / want - 1.0).abs() < 0.01);
    }

    #[test]
    fn free_local_time_matches_window_mean() {
        let cfg = SimConfig::default();
        let n = 4000;
        let steps = (1.0 / cfg.dt) as usize;
        let (mut total, mut sq) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = cfg.path_rng(i);
            let (mut b, mut l) = (0.0f64, 0.0);
            for _ in 0..steps {
                l = step_local_time(l, b, &cfg);
                let z: f64 = rng.sample(StandardNormal);
                b += cfg.dt.sqrt() * z;
            }
            total += l;
            sq += l * l;
        }
        let m = total / n as f64;
        let se = ((sq / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - window_mean(&cfg)).abs() < 3.0 * se, "{m} {se}");
    }

    #[test]
    fn empirical_cdf_and_ks() {
        let e = EmpiricalCDF::new([3.0, 1.0, 2.0, f64::NAN, 2.0]);
        assert_eq!(e.len(), 4);
        assert_eq!(e.query(0.5), 0.0);
        assert_eq!(e.query(2.0), 0.75);
        assert_eq!(e.query(5.0), 1.0);
        let cdf = |x: f64| (x / 4.0).clamp(0.0, 1.0);
        let d = ks_distance_with(&e, cdf, Some((1.5, 2.5))).unwrap();
        // points 1 and 3: |0.25 - 0.25|, |0 - 0.25|, |1 - 0.75|, |0.75 - 0.75|
        assert!((d - 0.25).abs() < 1e-15);
        assert!(matches!(ks_distance_with(&EmpiricalCDF::new([]), cdf, None), Err(Error::EmptySample)));
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        // the sample at the (i + 1/2)/n quantiles of U(0,1) has KS distance 1/(2n)
        let n = 1000;
        let e = EmpiricalCDF::new((0..n).map(|i| (i as f64 + 0.5) / n as f64));
        let d = ks_distance_with(&e, |x| x.clamp(0.0, 1.0), None).unwrap();
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn moments_helpers() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<f64> = (0..200_000).map(|_| rng.sample(StandardNormal)).collect();
        let (k, se) = excess_kurtosis(&g);
        assert!(k.abs() < 4.0 * se, "{k} {se}");
        let lap: Vec<f64> = g.chunks(2).map(|c| c[0] * c[1]).collect();
        // product of two standard normals has excess kurtosis 6
        let (k, se) = excess_kurtosis(&lap);
        assert!((k - 6.0).abs() < 5.0 * se, "{k} {se}");
    }
}
