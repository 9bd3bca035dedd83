use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use vallois::embedding::{build_psi, build_reversed_psi};
use vallois::error::Error;
use vallois::fake_bm::{build_peacock, diagnose, simulate_fake_bm};
use vallois::hedging::{analytic_price, build_sub_hedge, build_super_hedge, check_relations, ConvexPayoff, HedgePlan};
use vallois::marginal::{DeltaMu, DensitySpec, SymmetricMarginal};
use vallois::simulate::{
    hedge_tolerance, ks_distance, law_cdf, mean_se, simulate_sequential, simulate_stopped, summarize, Barrier,
    EmpiricalCDF, SimConfig, StoppedSample,
};
use vallois::two_marginal::{build_psi2, check_assumptions, implied_density};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const KS_EXCLUSION: (f64, f64) = (-0.1, 0.1);

#[derive(Parser, Debug)]
#[command(name = "vallois", version, about = "Local-time embeddings, robust hedges and fake Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Tabulate the embedding map of a marginal.
    Embed(EmbedArgs),
    /// Robust upper and lower prices of a payoff on the local time, with hedge tables.
    Price(PriceArgs),
    /// Simulate the stopped Brownian motion, optionally with the super-hedge.
    Simulate(SimulateArgs),
    /// Two-marginal construction: maps, breakpoints and implied density.
    TwoMarginal(TwoMarginalArgs),
    /// Paired analytic and empirical CDFs of the two stopped marginals.
    Figure2(Figure2Args),
    /// Fake Brownian motion from nested Gaussian embeddings.
    FakeBm(FakeBmArgs),
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "vallois-out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads, 0 = automatic. Falls back to VALLOIS_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Serialize)]
struct SimArgs {
    #[arg(long, default_value_t = 1 << 17)]
    paths: usize,
    #[arg(long, default_value_t = 1.0 / 4000.0, allow_negative_numbers = true)]
    dt: f64,
    #[arg(long, default_value_t = 0.04, allow_negative_numbers = true)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Brownian time after which a path is censored.
    #[arg(long, default_value_t = 64.0, allow_negative_numbers = true)]
    t_budget: f64,
    /// JSON file with simulation settings; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SimArgs {
    fn resolve(&self) -> Result<SimConfig, Error> {
        let mut cfg = SimConfig { dt: self.dt, eps: self.eps, n_paths: self.paths, seed: self.seed, t_budget: self.t_budget };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            let overrides: serde_json::Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(cfg)?;
            for (k, v) in overrides {
                merged[k] = v;
            }
            cfg = serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    #[arg(long, default_value = "sym_exp")]
    marginal: String,
    /// Tabulate the nonincreasing (sub-side) map instead.
    #[arg(long)]
    reversed: bool,
    /// Evaluation points on [0, x_max].
    #[arg(long, default_value_t = 1600)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct PriceArgs {
    #[arg(long, default_value = "sym_exp")]
    marginal: String,
    #[arg(long, default_value = "linear")]
    payoff: String,
    /// Rows of the hedge tables.
    #[arg(long, default_value_t = 400)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value = "sym_exp")]
    marginal: String,
    /// Attach the super-hedge of this payoff and record gains and slack.
    #[arg(long)]
    payoff: Option<String>,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct TwoMarginalArgs {
    #[arg(long, default_value = "sym_exp")]
    mu1: String,
    #[arg(long, default_value = "mu2")]
    mu2: String,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct Figure2Args {
    #[arg(long, default_value = "sym_exp")]
    mu1: String,
    #[arg(long, default_value = "mu2")]
    mu2: String,
    /// Rows of the CDF table on [-x_hi, x_hi].
    #[arg(long, default_value_t = 801)]
    points: usize,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    x_hi: f64,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct FakeBmArgs {
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    horizon: f64,
    #[arg(long, default_value_t = 4)]
    times: usize,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    common: Common,
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn marginal(spec: &str) -> Result<SymmetricMarginal, Error> {
    let spec: DensitySpec = if spec.trim_start().starts_with('{') { DensitySpec::from_json(spec)? } else { spec.parse()? };
    SymmetricMarginal::new(spec)
}

/// A table written as CSV or as a JSON array of records.
struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, dir: &Path, stem: &str, format: Format) -> Result<PathBuf, Error> {
        match format {
            Format::Csv => {
                let path = dir.join(format!("{stem}.csv"));
                let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Csv(e.to_string()))?;
                w.write_record(&self.header).map_err(|e| Error::Csv(e.to_string()))?;
                for r in &self.rows {
                    w.write_record(r).map_err(|e| Error::Csv(e.to_string()))?;
                }
                w.flush()?;
                Ok(path)
            }
            Format::Json => {
                let path = dir.join(format!("{stem}.json"));
                let records: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| {
                        let obj = self.header.iter().zip(r).map(|(h, v)| (h.to_string(), cell(v))).collect();
                        Value::Object(obj)
                    })
                    .collect();
                fs::write(&path, serde_json::to_string_pretty(&records)?)?;
                Ok(path)
            }
        }
    }
}

fn cell(v: &str) -> Value {
    if let Ok(x) = v.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    match v {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(v.to_string()),
    }
}

struct Run {
    dir: PathBuf,
    format: Format,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(common: &Common) -> Result<Self, Error> {
        fs::create_dir_all(&common.out)?;
        Ok(Self { dir: common.out.clone(), format: common.format, outputs: Vec::new() })
    }

    fn table(&mut self, stem: &str, t: &Table) -> Result<(), Error> {
        let p = t.write(&self.dir, stem, self.format)?;
        self.outputs.push(p);
        Ok(())
    }

    fn json(&mut self, stem: &str, v: &Value) -> Result<(), Error> {
        let p = self.dir.join(format!("{stem}.json"));
        fs::write(&p, serde_json::to_string_pretty(v)?)?;
        self.outputs.push(p);
        Ok(())
    }

    fn finish(self, command: &Command, summary: Value) -> Result<(), Error> {
        let outputs: Vec<String> =
            self.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        let manifest = json!({
            "version": VERSION,
            "config": command,
            "outputs": outputs,
        });
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut out = std::io::stdout().lock();
        match writeln!(out, "{}", serde_json::to_string_pretty(&summary)?) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        }
    }
}

fn embed(a: &EmbedArgs, command: &Command) -> Result<(), Error> {
    let m = marginal(&a.marginal)?;
    if a.points < 1 {
        return Err(Error::Config("points must be at least 1".into()));
    }
    let mut run = Run::new(&a.common)?;
    let mut t = Table::new(&["x", "psi", "gamma_at_psi"]);
    let (x_max, l_max) = if a.reversed {
        let e = build_reversed_psi(&m)?;
        for k in 0..=a.points {
            let x = e.x_max() * k as f64 / a.points as f64;
            t.push(vec![fmt(x), fmt(e.psi(x)), fmt(e.gamma_at_x(x))]);
        }
        (e.x_max(), e.l_end())
    } else {
        let e = build_psi(&m)?;
        for k in 0..=a.points {
            let x = e.x_max() * k as f64 / a.points as f64;
            t.push(vec![fmt(x), fmt(e.psi(x)), fmt(e.gamma_at_x(x))]);
        }
        (e.x_max(), e.l_max())
    };
    run.table("embed", &t)?;
    let summary = json!({ "marginal": m.spec().to_string(), "reversed": a.reversed, "x_max": x_max, "l_max": l_max });
    run.finish(command, summary)
}

fn hedge_table(plan: &HedgePlan, b: &dyn Barrier, l_top: f64, points: usize) -> Table {
    let mut t = Table::new(&["l", "phi_minus", "phi_plus", "a_plus", "a_minus", "h_at_phi_plus"]);
    for k in 0..=points {
        let l = l_top * k as f64 / points as f64;
        let (lo, hi) = b.bounds(l);
        let (ap, am) = plan.hedge_ratios(l);
        t.push(vec![fmt(l), fmt(lo), fmt(hi), fmt(ap), fmt(am), fmt(plan.h(hi))]);
    }
    t
}

fn price(a: &PriceArgs, command: &Command) -> Result<(), Error> {
    let m = marginal(&a.marginal)?;
    let f: ConvexPayoff = a.payoff.parse()?;
    let mut run = Run::new(&a.common)?;
    let e = build_psi(&m)?;
    let sup = build_super_hedge(&f, &e, &m)?;
    let upper_analytic = analytic_price(&f, &e);
    let relations = check_relations(&sup);
    let top = f.atoms.iter().map(|a| a.0).fold(1.0f64, f64::max) * 2.0;
    run.table("hedge_super", &hedge_table(&sup, &e, top.min(e.l_max()), a.points))?;

    let r = build_reversed_psi(&m)?;
    let sub = build_sub_hedge(&f, &r, &m)?;
    run.table("hedge_sub", &hedge_table(&sub, &r, r.l_end(), a.points))?;

    let mut h = Table::new(&["x", "h_super", "h_sub"]);
    let x_hi = e.x_max().min(8.0 * m.abs_moment().max(0.1));
    for k in 0..=a.points {
        let x = -x_hi + 2.0 * x_hi * k as f64 / a.points as f64;
        h.push(vec![fmt(x), fmt(sup.h(x)), fmt(sub.h(x))]);
    }
    run.table("static_payoff", &h)?;

    let summary = json!({
        "marginal": m.spec().to_string(),
        "payoff": f.to_string(),
        "upper": sup.price(),
        "upper_analytic": upper_analytic,
        "lower": sub.price(),
        "lower_analytic": analytic_price(&f, &r),
        "relations": relations,
    });
    run.json("price", &summary)?;
    run.finish(command, summary)
}

fn samples_table(s: &[StoppedSample]) -> Table {
    let mut t = Table::new(&["path_id", "b_tau", "l_tau", "tau", "gains", "slack", "censored"]);
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for (i, x) in s.iter().enumerate() {
        t.push(vec![i.to_string(), fmt(x.b_tau), fmt(x.l_tau), fmt(x.tau), opt(x.gains), opt(x.slack), x.censored.to_string()]);
    }
    t
}

fn simulate(a: &SimulateArgs, command: &Command) -> Result<(), Error> {
    let m = marginal(&a.marginal)?;
    let cfg = a.sim.resolve()?;
    let e = build_psi(&m)?;
    let plan = a.payoff.as_deref().map(|p| -> Result<HedgePlan, Error> { build_super_hedge(&p.parse()?, &e, &m) }).transpose()?;
    let mut run = Run::new(&a.common)?;
    let s = simulate_stopped(&e, &cfg, plan.as_ref())?;
    run.table("samples", &samples_table(&s))?;

    let mut summary = json!({
        "marginal": m.spec().to_string(),
        "sim": cfg,
        "summary": summarize(&s),
        "ks_outside_0.1": ks_distance(&EmpiricalCDF::from_samples(&s), &m, Some(KS_EXCLUSION))?,
    });
    if let Some(plan) = &plan {
        let tol = hedge_tolerance(plan, cfg.dt);
        let ok: Vec<&StoppedSample> = s.iter().filter(|x| !x.censored).collect();
        // gains stopped at the budget still belong to the martingale
        let gains: Vec<f64> = s.iter().filter_map(|x| x.gains).collect();
        let slack: Vec<f64> = ok.iter().filter_map(|x| x.slack).collect();
        let (gm, gse) = mean_se(&gains);
        let violations = slack.iter().filter(|&&v| v < -tol).count();
        summary["hedge"] = json!({
            "price": plan.price(),
            "tolerance": tol,
            "violation_fraction": violations as f64 / slack.len().max(1) as f64,
            "mean_abs_slack": slack.iter().map(|v| v.abs()).sum::<f64>() / slack.len().max(1) as f64,
            "gains_mean": gm,
            "gains_se": gse,
        });
    }
    run.json("summary", &summary)?;
    run.finish(command, summary)
}

fn two_marginal(a: &TwoMarginalArgs, command: &Command) -> Result<(), Error> {
    let pair = DeltaMu::new(marginal(&a.mu1)?, marginal(&a.mu2)?);
    let report = check_assumptions(&pair);
    let t = build_psi2(&pair)?;
    let mut run = Run::new(&a.common)?;
    let mut tab = Table::new(&["x", "psi1", "psi2", "regime", "nu", "mu2_density"]);
    let mut worst: f64 = 0.0;
    for k in 1..=a.points {
        let x = pair.mu2.x_max() * k as f64 / a.points as f64;
        let nu = implied_density(&t, x);
        let d = pair.mu2.density(x);
        if d > 0.0 {
            worst = worst.max((nu - d).abs() / d);
        }
        tab.push(vec![fmt(x), fmt(t.psi1().psi(x)), fmt(t.psi2(x)), t.regime(x).as_str().into(), fmt(nu), fmt(d)]);
    }
    run.table("two_marginal", &tab)?;
    let summary = json!({
        "breakpoints": t.report(),
        "assumptions": report,
        "max_relative_density_error": worst,
    });
    run.json("breakpoints", &summary)?;
    run.finish(command, summary)
}

fn figure2(a: &Figure2Args, command: &Command) -> Result<(), Error> {
    let pair = DeltaMu::new(marginal(&a.mu1)?, marginal(&a.mu2)?);
    let cfg = a.sim.resolve()?;
    if a.points < 2 || a.x_hi.is_nan() || a.x_hi <= 0.0 {
        return Err(Error::Config("points must be at least 2 and x_hi positive".into()));
    }
    let psi1 = build_psi(&pair.mu1)?;
    let psi2 = build_psi2(&pair)?;
    let mut run = Run::new(&a.common)?;
    let s = simulate_sequential(&psi1, &psi2, &cfg)?;
    let e1 = EmpiricalCDF::new(s.iter().map(|p| p.0.b_tau));
    let e2 = EmpiricalCDF::new(s.iter().map(|p| p.1.b_tau));
    let mut t = Table::new(&["x", "cdf_mu1", "cdf_emp1", "cdf_mu2", "cdf_emp2"]);
    for k in 0..a.points {
        let x = -a.x_hi + 2.0 * a.x_hi * k as f64 / (a.points - 1) as f64;
        t.push(vec![fmt(x), fmt(law_cdf(&pair.mu1, x)), fmt(e1.query(x)), fmt(law_cdf(&pair.mu2, x)), fmt(e2.query(x))]);
    }
    run.table("figure2", &t)?;
    let ks1 = ks_distance(&e1, &pair.mu1, Some(KS_EXCLUSION))?;
    let ks2 = ks_distance(&e2, &pair.mu2, Some(KS_EXCLUSION))?;
    let summary = json!({
        "sim": cfg,
        "exclusion": [KS_EXCLUSION.0, KS_EXCLUSION.1],
        "threshold": 0.02,
        "ks_first_stop": ks1,
        "ks_second_stop": ks2,
        "within_threshold": ks1 <= 0.02 && ks2 <= 0.02,
        "ordered_paths": s.iter().all(|p| p.1.tau >= p.0.tau),
        "censored": s.iter().filter(|p| p.1.censored).count(),
    });
    run.json("ks_report", &summary)?;
    run.finish(command, summary)
}

fn fake_bm(a: &FakeBmArgs, command: &Command) -> Result<(), Error> {
    let fam = build_peacock(a.horizon, a.times)?;
    let cfg = a.sim.resolve()?;
    let mut run = Run::new(&a.common)?;
    let paths = simulate_fake_bm(&fam, &cfg)?;
    let mut t = Table::new(&["path_id", "t", "value"]);
    for (i, row) in paths.values.iter().enumerate() {
        for (tk, v) in paths.times.iter().zip(row) {
            t.push(vec![i.to_string(), fmt(*tk), fmt(*v)]);
        }
    }
    run.table("fake_bm", &t)?;
    let n = fam.times().len();
    let mid = fam.times().iter().position(|&s| s >= 0.5 * a.horizon - 1e-12).unwrap_or(0).min(n - 2);
    let diag = diagnose(&fam, &paths, Some(KS_EXCLUSION), mid, n - 1)?;
    let summary = json!({ "sim": cfg, "diagnostics": diag });
    run.json("diagnostics", &summary)?;
    run.finish(command, summary)
}

fn threads(common: &Common) -> Result<usize, Error> {
    if let Some(n) = common.threads {
        return Ok(n);
    }
    match std::env::var("VALLOIS_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("VALLOIS_THREADS must be an integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn common(c: &Command) -> &Common {
    match c {
        Command::Embed(a) => &a.common,
        Command::Price(a) => &a.common,
        Command::Simulate(a) => &a.common,
        Command::TwoMarginal(a) => &a.common,
        Command::Figure2(a) => &a.common,
        Command::FakeBm(a) => &a.common,
    }
}

fn dispatch(c: &Command) -> Result<(), Error> {
    let n = threads(common(c))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    match c {
        Command::Embed(a) => embed(a, c),
        Command::Price(a) => price(a, c),
        Command::Simulate(a) => simulate(a, c),
        Command::TwoMarginal(a) => two_marginal(a, c),
        Command::Figure2(a) => figure2(a, c),
        Command::FakeBm(a) => fake_bm(a, c),
    }
}

/// Errors caused by the inputs exit with 2, everything else with 1.
fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::InvalidPayoff(_)
            | Error::InvalidDensity(_)
            | Error::DomainExceeded { .. }
            | Error::DegeneratePair(_)
            | Error::NonIncreasingPsi2 { .. }
            | Error::DeltaTailVanishes { .. }
            | Error::OrderingViolation(_)
            | Error::GammaDivergence(_)
            | Error::Json(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
