//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line per
//! checked part and fails if any part fails. The two Monte-Carlo reproductions
//! at 2^17 paths are tagged slow (`#[ignore]`); run them with
//! `cargo test -p vallois-core --test acceptance -- --ignored --nocapture`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vallois::embedding::{build_psi, build_reversed_psi, EmbeddingMap};
use vallois::fake_bm::{
    build_peacock, conditional_expectation, diagnose, generator_apply, simulate_fake_bm, TestFunction,
};
use vallois::hedging::{analytic_price, build_sub_hedge, build_super_hedge, ConvexPayoff};
use vallois::marginal::{calibrate_mu2, DeltaMu, SymmetricMarginal};
use vallois::simulate::{
    hedge_tolerance, ks_distance, mean_se, simulate_sequential, simulate_stopped, EmpiricalCDF, SimConfig,
};
use vallois::two_marginal::{build_psi2, implied_density};

const KS_MAX: f64 = 0.02;
const KS_EXCLUSION: (f64, f64) = (-0.1, 0.1);

#[derive(Default)]
struct Verdict {
    failures: Vec<String>,
}

impl Verdict {
    fn part(&mut self, criterion: u32, name: &str, pass: bool, detail: String) {
        println!("criterion {criterion} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(format!("criterion {criterion} [{name}]: {detail}"));
        }
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "failed parts:\n{}", self.failures.join("\n"));
    }
}

fn marginals() -> Vec<(&'static str, SymmetricMarginal)> {
    vec![
        ("sym_exp", SymmetricMarginal::sym_exp()),
        ("mu2", SymmetricMarginal::mu2()),
        ("gaussian(1)", SymmetricMarginal::gaussian(1.0).unwrap()),
    ]
}

/// `int_K^inf exp(-2 sqrt l) dl` in closed form.
fn sym_exp_call(k: f64) -> f64 {
    let r = k.sqrt();
    (-2.0 * r).exp() * (r + 0.5)
}

fn payoffs() -> Vec<(String, ConvexPayoff)> {
    let mut v = vec![("linear".to_string(), ConvexPayoff::linear())];
    for k in [0.25, 1.0, 4.0] {
        v.push((format!("call K={k}"), ConvexPayoff::call_on_l(k).unwrap()));
    }
    v
}

#[test]
#[ignore = "slow: 2^17 paths"]
fn criterion_1_figure2_reproduction() {
    let mut v = Verdict::default();
    let pair = DeltaMu::example_pair();
    let e1 = build_psi(&pair.mu1).unwrap();
    let e2 = build_psi2(&pair).unwrap();
    let cfg = SimConfig::default();
    assert_eq!((cfg.eps, cfg.dt, cfg.n_paths), (0.04, 1.0 / 4000.0, 1 << 17));
    let start = Instant::now();
    let runs = simulate_sequential(&e1, &e2, &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let emp1 = EmpiricalCDF::new(runs.iter().map(|r| r.0.b_tau));
    let emp2 = EmpiricalCDF::new(runs.iter().map(|r| r.1.b_tau));
    let ks1 = ks_distance(&emp1, &pair.mu1, Some(KS_EXCLUSION)).unwrap();
    let ks2 = ks_distance(&emp2, &pair.mu2, Some(KS_EXCLUSION)).unwrap();
    let censored = runs.iter().filter(|r| r.1.censored).count();
    v.part(1, "KS first stop vs mu1", ks1 <= KS_MAX, format!("KS {ks1:.4}, limit {KS_MAX}"));
    v.part(1, "KS second stop vs mu2", ks2 <= KS_MAX, format!("KS {ks2:.4}, limit {KS_MAX}"));
    v.part(1, "runtime", elapsed <= 600.0, format!("{elapsed:.1} s, {censored} censored"));
    // the second-stop fit is also the Monte-Carlo part of criterion 6
    v.part(6, "sequential MC second stop vs mu2", ks2 <= KS_MAX, format!("KS {ks2:.4}, limit {KS_MAX}"));
    v.finish();
}

#[test]
fn criterion_2_embedding_identities() {
    let mut v = Verdict::default();
    let sym = build_psi(&SymmetricMarginal::sym_exp()).unwrap();
    let worst = sym.grid().iter().map(|&x| (sym.psi(x) - x * x).abs()).fold(0.0, f64::max);
    v.part(2, "psi = x^2 on sym_exp grid", worst <= 1e-8, format!("max error {worst:.2e}"));
    for (name, m) in marginals() {
        let e = build_psi(&m).unwrap();
        let worst = tail_identity_error(&e, &m);
        v.part(2, &format!("tail identity {name}"), worst <= 1e-6, format!("max error {worst:.2e}"));
    }
    v.finish();
}

fn tail_identity_error(e: &EmbeddingMap, m: &SymmetricMarginal) -> f64 {
    e.grid()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| ((-e.gamma_at_x(x)).exp() - 2.0 * m.tail_mass(x).unwrap()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_3_duality() {
    let mut v = Verdict::default();
    let m = SymmetricMarginal::sym_exp();
    let e = build_psi(&m).unwrap();
    for (name, f) in payoffs() {
        let price = build_super_hedge(&f, &e, &m).unwrap().price();
        let analytic = analytic_price(&f, &e);
        let closed = f.f0 + f.slope0 * 0.5 + f.atoms.iter().map(|&(k, w)| w * sym_exp_call(k)).sum::<f64>();
        let gap = (price - analytic).abs().max((price - closed).abs());
        v.part(
            3,
            &format!("mu(H) = price, {name}"),
            gap <= 1e-6,
            format!("mu(H) {price:.10}, analytic {analytic:.10}, closed form {closed:.10}"),
        );
    }
    let k1 = build_super_hedge(&ConvexPayoff::call_on_l(1.0).unwrap(), &e, &m).unwrap().price();
    let target = 1.5 * (-2.0f64).exp();
    v.part(3, "K=1 target 1.5 e^-2", (k1 - target).abs() <= 1e-6, format!("{k1:.10} vs {target:.10}"));
    v.finish();
}

#[test]
fn criterion_4_pathwise_superreplication() {
    let mut v = Verdict::default();
    let m = SymmetricMarginal::sym_exp();
    let e = build_psi(&m).unwrap();
    let plan = build_super_hedge(&ConvexPayoff::call_on_l(1.0).unwrap(), &e, &m).unwrap();
    let cfg = SimConfig { seed: 4, ..SimConfig::default() };
    let fine = SimConfig { dt: cfg.dt / 2.0, ..cfg };

    let mut mean_abs_slack = Vec::new();
    for (label, c) in [("default dt", cfg), ("half dt", fine)] {
        let samples = simulate_stopped(&e, &c, Some(&plan)).unwrap();
        let ok: Vec<_> = samples.iter().filter(|s| !s.censored).collect();
        let tol = hedge_tolerance(&plan, c.dt);
        let slack: Vec<f64> = ok.iter().map(|s| s.slack.unwrap()).collect();
        let violations = slack.iter().filter(|&&s| s < -tol).count() as f64 / ok.len() as f64;
        mean_abs_slack.push(slack.iter().map(|s| s.abs()).sum::<f64>() / slack.len() as f64);
        if label == "default dt" {
            v.part(
                4,
                "violation rate",
                violations <= 1e-3,
                format!("{violations:.5} beyond tolerance {tol:.3}, {} censored", samples.len() - ok.len()),
            );
            // censored paths carry the martingale stopped at the budget, so
            // dropping them would bias the mean
            let gains: Vec<f64> = samples.iter().map(|s| s.gains.unwrap()).collect();
            let (mean, se) = mean_se(&gains);
            v.part(4, "zero-mean gains", mean.abs() <= 3.0 * se, format!("{mean:.5} +- {se:.5}"));
        }
    }
    v.part(
        4,
        "mean |slack| shrinks with dt",
        mean_abs_slack[1] < mean_abs_slack[0],
        format!("{:.5} -> {:.5}", mean_abs_slack[0], mean_abs_slack[1]),
    );
    v.finish();
}

#[test]
fn criterion_5_sub_super_ordering() {
    let mut v = Verdict::default();
    let mut extra = payoffs();
    extra.push(("two atoms".into(), ConvexPayoff::new(0.3, -0.5, vec![(0.2, 0.7), (0.9, 1.1)]).unwrap()));
    extra.push(("constant".into(), ConvexPayoff::constant(2.0)));
    for (mname, m) in marginals() {
        let e = build_psi(&m).unwrap();
        let r = build_reversed_psi(&m).unwrap();
        let mut worst = f64::NEG_INFINITY;
        for (_, f) in &extra {
            let sup = build_super_hedge(f, &e, &m).unwrap().price();
            let sub = build_sub_hedge(f, &r, &m).unwrap().price();
            worst = worst.max(sub - sup);
        }
        v.part(5, &format!("sub <= super on {mname}"), worst <= 1e-9, format!("max(sub - super) {worst:.3e}"));
    }
    let m = SymmetricMarginal::sym_exp();
    let f = ConvexPayoff::linear();
    let sup = build_super_hedge(&f, &build_psi(&m).unwrap(), &m).unwrap().price();
    let sub = build_sub_hedge(&f, &build_reversed_psi(&m).unwrap(), &m).unwrap().price();
    let ok = (sup - 0.5).abs() <= 1e-6 && (sub - 0.5).abs() <= 1e-6;
    v.part(5, "linear F equality on sym_exp", ok, format!("sub {sub:.10}, super {sup:.10}, expected 0.5"));
    v.finish();
}

#[test]
fn criterion_6_two_marginal() {
    let mut v = Verdict::default();
    let pair = DeltaMu::example_pair();
    let t = build_psi2(&pair).unwrap();
    let x_max = t.x_max();
    let worst = (1..=512)
        .map(|k| x_max * k as f64 / 512.0)
        .filter(|&x| pair.mu2.density(x) > 0.0)
        .map(|x| (implied_density(&t, x) / pair.mu2.density(x) - 1.0).abs())
        .fold(0.0, f64::max);
    v.part(6, "implied density vs mu2 (512 points)", worst <= 1e-4, format!("max relative error {worst:.2e}"));

    let bp = t.breakpoints();
    let ok = bp.len() == 1 && (bp[0] - 1.0).abs() <= 1e-8 && t.certification().passed();
    v.part(
        6,
        "breakpoints x1 = 1, x2 = inf (finite-probe)",
        ok,
        format!("{bp:?}, certification {:?}", t.certification()),
    );

    // closed-form oracle: delta([1, inf)) = (e^-1.25 - e^-2) / 2
    let (a, b) = ((-1.25f64).exp(), (-2.0f64).exp());
    let oracle = (2.5 * a - b) / (0.5 * (a - b));
    let cal = calibrate_mu2().unwrap();
    let gap = (cal.alpha - cal.target()).abs().max((cal.alpha - oracle).abs());
    v.part(6, "alpha root", gap <= 1e-10, format!("alpha {:.12}, oracle {oracle:.12}", cal.alpha));
    v.finish();
}

#[test]
#[ignore = "slow: 2^17 paths"]
fn criterion_7_fake_bm_paths() {
    let mut v = Verdict::default();
    let fam = build_peacock(1.0, 4).unwrap();
    let paths = simulate_fake_bm(&fam, &SimConfig::default()).unwrap();
    let d = diagnose(&fam, &paths, Some(KS_EXCLUSION), 1, 3).unwrap();
    for fit in d.marginals.iter().filter(|f| [0.25, 0.5, 1.0].contains(&f.t)) {
        v.part(7, &format!("KS marginal t={}", fit.t), fit.ks <= KS_MAX, format!("KS {:.4}, limit {KS_MAX}", fit.ks));
    }
    let z = d.increment_excess_kurtosis / d.increment_excess_kurtosis_se;
    v.part(
        7,
        "increment excess kurtosis",
        z.abs() >= 5.0,
        format!("{:.3} +- {:.3} ({z:.1} SE)", d.increment_excess_kurtosis, d.increment_excess_kurtosis_se),
    );
    v.finish();
}

#[test]
fn criterion_7_fake_bm_analytic() {
    let mut v = Verdict::default();
    let fam = build_peacock(1.0, 4).unwrap();
    let grid = fam.maps()[0].grid().to_vec();
    let mut worst = f64::NEG_INFINITY;
    for w in fam.times().windows(2) {
        for &x in grid.iter().filter(|&&x| x > 0.0) {
            worst = worst.max(fam.psi(w[1], x).unwrap() - fam.psi(w[0], x).unwrap());
        }
    }
    v.part(7, "psi_t decreasing in t", worst < 0.0, format!("max psi(t') - psi(t) {worst:.3e}"));

    let points = [(0.3, 0.4), (0.5, 0.7), (0.5, -0.3), (0.75, 1.0), (0.9, -1.8)];
    let h = 1e-3;
    let mut rel: f64 = 0.0;
    for f in TestFunction::suite() {
        for &(t, x) in &points {
            let gen = generator_apply(&fam, &f, t, x).unwrap();
            let fd = (conditional_expectation(&fam, &f, x, t, t + h).unwrap() - (f.value)(x)) / h;
            rel = rel.max((fd - gen).abs() / gen.abs());
        }
    }
    v.part(7, "generator vs finite difference", rel <= 0.05, format!("max relative gap {rel:.4}"));

    let mut kill: f64 = 0.0;
    for &(t, x) in &points {
        kill = kill.max(generator_apply(&fam, &TestFunction::constant(), t, x).unwrap().abs());
        kill = kill.max(generator_apply(&fam, &TestFunction::identity(), t, x).unwrap().abs());
    }
    v.part(7, "generator annihilates 1 and x", kill <= 1e-8, format!("max |L f| {kill:.2e}"));
    v.finish();
}

/// Headless sweep of the embedding and hedging invariants within the time budget.
#[test]
fn criterion_8_property_sweep_runtime() {
    let mut v = Verdict::default();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut round_trip: f64 = 0.0;
    let mut tails: f64 = 0.0;
    let mut local_time: f64 = 0.0;
    for (_, m) in marginals() {
        let e = build_psi(&m).unwrap();
        for _ in 0..100 {
            let x = rng.random_range(0.0..e.x_max());
            round_trip = round_trip.max((e.phi(e.psi(x)) - x).abs() / (1.0 + x));
        }
        tails = tails.max(tail_identity_error(&e, &m));
        local_time = local_time.max((analytic_price(&ConvexPayoff::linear(), &e) - m.abs_moment()).abs());
    }
    v.part(8, "round trip", round_trip <= 1e-8, format!("{round_trip:.2e}"));
    v.part(8, "tail identity", tails <= 1e-6, format!("{tails:.2e}"));
    v.part(8, "E[L] = E|X|", local_time <= 1e-6, format!("{local_time:.2e}"));

    let m = SymmetricMarginal::sym_exp();
    let e = build_psi(&m).unwrap();
    let mut duality: f64 = 0.0;
    for _ in 0..20 {
        let mut k = 0.0;
        let atoms = (0..3)
            .map(|_| {
                k += rng.random_range(0.05..1.5);
                (k, rng.random_range(0.1..2.0))
            })
            .collect();
        let f = ConvexPayoff::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), atoms).unwrap();
        let price = build_super_hedge(&f, &e, &m).unwrap().price();
        duality = duality.max((price - analytic_price(&f, &e)).abs());
    }
    v.part(8, "duality on random payoffs", duality <= 1e-6, format!("{duality:.2e}"));

    let elapsed = start.elapsed().as_secs_f64();
    v.part(8, "runtime", elapsed <= 120.0, format!("{elapsed:.1} s"));
    v.finish();
}
