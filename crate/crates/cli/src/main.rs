use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use divest::distributions::{gaussian_mutual_information, mine_pair};
use divest::experiments::{
    approx_check, fit_rate, read_results, run_sweep, write_results, ApproxOptions, ApproxRow, Axis, RateFit,
    ResultFormat, SweepConfig,
};
use divest::{
    compute_oracle, estimate, parse_distribution, Activation, ClassChoice, Distribution, DivergenceKind,
    EstimateResult, OracleChoice, OracleResult, Regime, ScheduleRequest, Support, TrainOptions,
};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "divest", version, about = "Neural estimators of statistical divergences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a divergence from samples of two distributions.
    Estimate(EstimateArgs),
    /// Reference value of a divergence.
    Oracle(OracleArgs),
    /// Run a sweep described by a JSON config and write its records.
    Sweep(SweepArgs),
    /// Fit a log-log error rate to sweep records.
    RateFit(RateFitArgs),
    /// Fit the optimal KL potential of a 1-d pair at several widths.
    ApproxCheck(ApproxArgs),
    /// Mutual information of a correlated Gaussian pair via the DV estimator.
    Mine(MineArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Json,
    Text,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    KnownM,
    UnknownM,
    Consistency,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SupportArg {
    /// Cube when both distributions are compact, ball otherwise.
    Auto,
    Cube,
    Ball,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Sigmoid,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Sigmoid => Activation::Sigmoid,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Auto,
    ClosedForm,
    Quadrature,
    McPlugin,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Minibatch size; full batch when omitted.
    #[arg(long)]
    batch: Option<usize>,
}

impl TrainArgs {
    fn options(&self, record_trace: bool) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            step_size: self.lr,
            batch: self.batch,
            restarts: self.restarts,
            seed: self.seed,
            record_trace,
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    divergence: String,
    #[arg(long)]
    dist_p: String,
    #[arg(long)]
    dist_q: String,
    /// Samples from each distribution.
    #[arg(long)]
    n: usize,
    /// Samples from q when it differs from --n.
    #[arg(long)]
    n_q: Option<usize>,
    /// Network width (ignored by the consistency schedule).
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::UnknownM)]
    schedule: ScheduleArg,
    /// Bound on the problem class for --schedule known-m.
    #[arg(long)]
    m: Option<f64>,
    /// Width exponent of the consistency schedule.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = SupportArg::Auto)]
    support: SupportArg,
    /// Fixed mask radius; derived from k and M when omitted.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    /// Use the Donsker-Varadhan objective (KL only).
    #[arg(long)]
    dv: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
    /// Include the per-step objective of the winning restart.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    divergence: String,
    #[arg(long)]
    dist_p: String,
    #[arg(long)]
    dist_q: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    method: MethodArg,
    /// Quadrature nodes per axis.
    #[arg(long, default_value_t = 2048)]
    nodes: usize,
    /// Monte Carlo samples per distribution.
    #[arg(long, default_value_t = 100_000)]
    mc_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file; `.json` writes JSON, anything else CSV. Overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    N,
    K,
}

#[derive(Args, Debug)]
struct RateFitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = AxisArg::N)]
    axis: AxisArg,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
}

#[derive(Args, Debug)]
struct ApproxArgs {
    #[arg(long)]
    dist_p: String,
    #[arg(long)]
    dist_q: String,
    /// Widths to fit, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256")]
    k: Vec<usize>,
    /// Class parameter a of the fitted class.
    #[arg(long, default_value_t = 10.0)]
    a: f64,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 4096)]
    grid: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Bound on the problem class; sets the parameter bound and mask radius.
    #[arg(long, default_value_t = 10.0)]
    m: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
    #[arg(long)]
    trace: bool,
}

/// Bad input from the command line; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_dist(flag: &str, spec: &str) -> Result<Distribution> {
    parse_distribution(spec).map_err(|e| usage(format!("--{flag}: {e}")))
}

fn parse_kind(flag: &str, s: &str) -> Result<DivergenceKind> {
    s.parse().map_err(|e| usage(format!("--{flag}: {e}")))
}

fn log_config<T: Serialize>(what: &str, cfg: &T) {
    match serde_json::to_string(cfg) {
        Ok(s) => eprintln!("{what}: {s}"),
        Err(e) => eprintln!("{what}: <unserializable: {e}>"),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct ResolvedEstimate<'a> {
    kind: DivergenceKind,
    dist_p: &'a str,
    dist_q: &'a str,
    n_mu: usize,
    n_nu: usize,
    class: &'a ClassChoice,
    train: &'a TrainOptions,
    sample_seeds: [u64; 2],
}

fn sample_seeds(seed: u64) -> [u64; 2] {
    [divest::rng::derive_seed(seed, 1), divest::rng::derive_seed(seed, 2)]
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let mut kind = parse_kind("divergence", &args.divergence)?;
    if args.dv {
        if kind.base() != DivergenceKind::Kl {
            return Err(usage(format!("--dv applies to kl only, got --divergence {kind}")));
        }
        kind = DivergenceKind::KlDv;
    }
    let p = parse_dist("dist-p", &args.dist_p)?;
    let q = parse_dist("dist-q", &args.dist_q)?;
    if p.dim() != q.dim() {
        return Err(usage(format!("--dist-p has d = {} but --dist-q has d = {}", p.dim(), q.dim())));
    }
    let regime = match args.schedule {
        ScheduleArg::KnownM => Regime::KnownM { m: args.m.ok_or_else(|| usage("--schedule known-m requires --m"))? },
        ScheduleArg::UnknownM => Regime::UnknownM,
        ScheduleArg::Consistency => Regime::Consistency { rho: args.rho },
    };
    if args.m.is_some() && args.schedule != ScheduleArg::KnownM {
        return Err(usage("--m is only used with --schedule known-m"));
    }
    let compact = p.is_compact() && q.is_compact();
    let support = match (args.support, args.radius) {
        (SupportArg::Cube, Some(_)) => return Err(usage("--radius conflicts with --support cube")),
        (SupportArg::Cube, None) => Support::CompactUnitCube,
        (SupportArg::Auto, None) if compact => Support::CompactUnitCube,
        (_, radius) => Support::Ball { radius },
    };
    if matches!(support, Support::Ball { radius: None }) && !matches!(regime, Regime::KnownM { .. }) {
        return Err(usage("an automatic mask radius needs --schedule known-m with --m, or pass --radius"));
    }
    let mut req = ScheduleRequest::new(kind, args.k, p.dim(), regime, support);
    req.activation = args.activation.into();
    let class = ClassChoice::Schedule(req);
    let opts = args.train.options(args.trace);
    let n_mu = args.n;
    let n_nu = args.n_q.unwrap_or(args.n);
    let seeds = sample_seeds(args.train.seed);
    log_config(
        "config",
        &ResolvedEstimate {
            kind,
            dist_p: &args.dist_p,
            dist_q: &args.dist_q,
            n_mu,
            n_nu,
            class: &class,
            train: &opts,
            sample_seeds: seeds,
        },
    );

    let x = p.sample(n_mu, seeds[0])?;
    let y = q.sample(n_nu, seeds[1])?;
    let result = estimate(kind, &class, &x, &y, &opts)?;
    match args.out {
        OutFormat::Json => print_json(&result),
        OutFormat::Text => {
            print_estimate_text(&result);
            Ok(())
        }
    }
}

fn print_estimate_text(r: &EstimateResult) {
    println!("{} estimate: {:.6}", r.kind, r.value);
    println!("width k = {}, n_mu = {}, n_nu = {}", r.spec.k, r.n_mu, r.n_nu);
    let restarts: Vec<String> = r.per_restart.iter().map(|v| format!("{v:.6}")).collect();
    println!("restarts: {}", restarts.join(" "));
}

fn run_oracle(args: &OracleArgs) -> Result<()> {
    let kind = parse_kind("divergence", &args.divergence)?;
    let p = parse_dist("dist-p", &args.dist_p)?;
    let q = parse_dist("dist-q", &args.dist_q)?;
    let choice = match args.method {
        MethodArg::Auto => OracleChoice::Auto,
        MethodArg::ClosedForm => OracleChoice::ClosedForm,
        MethodArg::Quadrature => OracleChoice::Quadrature { nodes: args.nodes },
        MethodArg::McPlugin => OracleChoice::McPlugin { n: args.mc_n, seed: args.seed },
    };
    log_config(
        "config",
        &serde_json::json!({ "kind": kind, "dist_p": args.dist_p, "dist_q": args.dist_q, "method": choice }),
    );
    let res: OracleResult = compute_oracle(kind, &p, &q, choice)?;
    match args.out {
        OutFormat::Json => print_json(&serde_json::json!({
            "kind": kind,
            "method": res.method,
            "value": res.value,
            "stderr": res.stderr,
            "detail": res.detail,
        })),
        OutFormat::Text => {
            println!("{kind} = {:.10} ({}, stderr {:.3e}, detail {})", res.value, res.method, res.stderr, res.detail);
            Ok(())
        }
    }
}

fn run_sweep_cmd(args: &SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading sweep config {}", args.config.display()))?;
    let mut cfg: SweepConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", args.config.display())))?;
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    let out = cfg.output.clone().ok_or_else(|| usage("no output path: pass --out or set \"output\" in the config"))?;
    cfg.validate().map_err(|e| usage(format!("--config {}: {e}", args.config.display())))?;
    log_config("config", &cfg);
    let records = run_sweep(&cfg)?;
    write_results(&records, &out, ResultFormat::from_path(&out))?;
    let ok = records.iter().filter(|r| r.is_ok()).count();
    eprintln!("wrote {} records ({} ok) to {}", records.len(), ok, out.display());
    print_json(&serde_json::json!({ "records": records.len(), "ok": ok, "output": out }))
}

fn run_rate_fit(args: &RateFitArgs) -> Result<()> {
    let axis = match args.axis {
        AxisArg::N => Axis::N,
        AxisArg::K => Axis::K,
    };
    log_config("config", &serde_json::json!({ "in": args.input, "axis": axis }));
    let records = read_results(&args.input)?;
    let fit: RateFit = fit_rate(&records, axis)?;
    match args.out {
        OutFormat::Json => print_json(&fit),
        OutFormat::Text => {
            println!("slope {:.4}  intercept {:.4}  r2 {:.4}", fit.slope, fit.intercept, fit.r2);
            for p in &fit.table {
                println!(
                    "{:>8}  mean {:.6}  median {:.6}  ({} cells)",
                    p.x, p.mean_abs_error, p.median_abs_error, p.count
                );
            }
            Ok(())
        }
    }
}

fn run_approx(args: &ApproxArgs) -> Result<()> {
    let p = parse_dist("dist-p", &args.dist_p)?;
    let q = parse_dist("dist-q", &args.dist_q)?;
    if args.k.is_empty() {
        return Err(usage("--k needs at least one width"));
    }
    let opts = ApproxOptions {
        a: args.a,
        seeds: args.seeds,
        grid: args.grid,
        activation: args.activation.into(),
        train: TrainOptions { steps: args.steps, step_size: args.lr, seed: args.seed, ..TrainOptions::default() },
    };
    log_config(
        "config",
        &serde_json::json!({ "dist_p": args.dist_p, "dist_q": args.dist_q, "k": args.k, "options": opts }),
    );
    let rows: Vec<ApproxRow> = approx_check(&p, &q, &args.k, &opts)?;
    match args.out {
        OutFormat::Json => print_json(&rows),
        OutFormat::Text => {
            println!("{:>6}  {:>12}  {:>12}", "k", "sup", "l2");
            for r in &rows {
                println!("{:>6}  {:>12.6e}  {:>12.6e}", r.k, r.sup_error, r.l2_error);
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Reference {
    value: f64,
    formula: &'static str,
    note: &'static str,
}

#[derive(Serialize)]
struct MineOutput {
    rho: f64,
    #[serde(flatten)]
    result: EstimateResult,
    reference: Reference,
}

fn run_mine(args: &MineArgs) -> Result<()> {
    if args.rho.is_nan() || args.rho.abs() >= 1.0 {
        return Err(usage(format!("--rho must satisfy |rho| < 1, got {}", args.rho)));
    }
    let (joint, product) = mine_pair(args.rho)?;
    let req = ScheduleRequest::new(
        DivergenceKind::KlDv,
        args.k,
        joint.dim(),
        Regime::KnownM { m: args.m },
        Support::Ball { radius: None },
    );
    let class = ClassChoice::Schedule(req);
    let opts = args.train.options(args.trace);
    let seeds = sample_seeds(args.train.seed);
    log_config(
        "config",
        &serde_json::json!({ "rho": args.rho, "n": args.n, "class": class, "train": opts, "sample_seeds": seeds }),
    );
    let x = joint.sample(args.n, seeds[0])?;
    let y = product.sample(args.n, seeds[1])?;
    let result = estimate(DivergenceKind::KlDv, &class, &x, &y, &opts)?;
    let reference = Reference {
        value: gaussian_mutual_information(args.rho)?,
        formula: "-0.5 ln(1 - rho^2)",
        note: "closed-form mutual information of the Gaussian pair, a cross-check and not the estimate",
    };
    match args.out {
        OutFormat::Json => print_json(&MineOutput { rho: args.rho, result, reference }),
        OutFormat::Text => {
            print_estimate_text(&result);
            println!("reference (closed form): {:.6}", reference.value + 0.0);
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Sweep(a) => run_sweep_cmd(a),
        Command::RateFit(a) => run_rate_fit(a),
        Command::ApproxCheck(a) => run_approx(a),
        Command::Mine(a) => run_mine(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
