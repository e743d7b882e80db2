//! Benchmark harness: sweeps over (kind, pair, n, seed), log-log rate fits,
//! the approximation check, and result files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{log_ratio, parse_distribution, Distribution, SampleBatch};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::estimator::{estimate, fit_least_squares, ClassChoice, TrainOptions};
use crate::net::{net_eval, Activation, NetClassSpec};
use crate::oracle::{compute_oracle, OracleChoice};
use crate::rng::{derive_seed, derive_seed_path, tag_of};
use crate::schedule::{consistency_width, resolve_schedule, Regime, Schedule, ScheduleRequest, Support};

/// How the width follows the sample size. Every rule is capped by
/// `SweepConfig::k_cap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KRule {
    Fixed {
        k: usize,
    },
    EqualN,
    SqrtN,
    /// `k = n` for the known/unknown-M regimes; the consistency regime uses
    /// its own width.
    PaperSchedule,
}

impl KRule {
    pub fn width(self, n: usize, cap: usize) -> usize {
        let k = match self {
            KRule::Fixed { k } => k,
            KRule::EqualN | KRule::PaperSchedule => n,
            KRule::SqrtN => (n as f64).sqrt().round() as usize,
        };
        k.min(cap).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    /// Label used in records; defaults to `pair<index>`.
    #[serde(default)]
    pub id: Option<String>,
    pub p: String,
    pub q: String,
}

fn default_cap() -> usize {
    512
}
fn default_oracle() -> OracleChoice {
    OracleChoice::Auto
}
fn default_regime() -> Regime {
    Regime::UnknownM
}
fn default_activation() -> Activation {
    Activation::Relu
}

/// A sweep, read from JSON. `train.seed` is ignored: every cell derives its
/// own seeds from `root_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kinds: Vec<DivergenceKind>,
    pub pairs: Vec<PairSpec>,
    pub n_grid: Vec<usize>,
    pub k_rule: KRule,
    #[serde(default = "default_cap")]
    pub k_cap: usize,
    pub seeds: usize,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_oracle")]
    pub oracle: OracleChoice,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    /// Defaults to the unit cube when both laws are compact, else an
    /// automatic ball mask.
    #[serde(default)]
    pub support: Option<Support>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub train: TrainOptions,
    /// Record `wall_ms`. Off by default so that reruns give identical files.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl SweepConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.pairs.is_empty() || self.n_grid.is_empty() {
            return Err(Error::InvalidRequest("kinds, pairs and n_grid must be nonempty".into()));
        }
        if self.seeds < 1 {
            return Err(Error::InvalidRequest("seeds must be >= 1".into()));
        }
        if self.n_grid.contains(&0) {
            return Err(Error::InvalidRequest("sample sizes must be >= 1".into()));
        }
        if self.k_cap < 1 {
            return Err(Error::InvalidRequest("k_cap must be >= 1".into()));
        }
        self.train.validate()
    }

    fn pair_id(&self, i: usize) -> String {
        self.pairs[i].id.clone().unwrap_or_else(|| format!("pair{i}"))
    }
}

/// One sweep cell. Failed cells carry `status != "ok"` and no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub kind: DivergenceKind,
    pub pair: String,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub oracle: Option<f64>,
    pub abs_error: Option<f64>,
    pub signed_error: Option<f64>,
    pub wall_ms: Option<u64>,
    pub restarts: usize,
    pub m_k: Option<f64>,
    pub t_k: Option<f64>,
    pub r_k: Option<f64>,
    pub status: String,
}

impl SweepRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const CSV_HEADER: &str =
    "kind,pair,d,n,k,seed,estimate,oracle,abs_error,signed_error,wall_ms,restarts,m_k,t_k,r_k,status";

struct Cell {
    kind: DivergenceKind,
    pair: usize,
    n: usize,
    seed: u64,
}

fn schedule_for(cfg: &SweepConfig, kind: DivergenceKind, d: usize, support: Support, n: usize) -> Result<Schedule> {
    let k = match cfg.regime {
        Regime::Consistency { rho } => consistency_width(kind, n, rho)?,
        _ => cfg.k_rule.width(n, cfg.k_cap),
    };
    let mut req = ScheduleRequest::new(kind, k, d, cfg.regime, support);
    req.activation = cfg.activation;
    resolve_schedule(&req)
}

fn worker_threads() -> usize {
    std::env::var("DIVEST_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

/// Runs every cell and returns records sorted by (kind, pair, n, k, seed).
/// Results do not depend on the number of worker threads.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let mut pairs: Vec<(Distribution, Distribution)> = Vec::with_capacity(cfg.pairs.len());
    for pair in &cfg.pairs {
        let p = parse_distribution(&pair.p)?;
        let q = parse_distribution(&pair.q)?;
        if p.dim() != q.dim() {
            return Err(Error::DimensionMismatch { what: "pair dimension", expected: p.dim(), got: q.dim() });
        }
        pairs.push((p, q));
    }

    let mut oracles: BTreeMap<(DivergenceKind, usize), std::result::Result<f64, String>> = BTreeMap::new();
    for &kind in &cfg.kinds {
        for (i, (p, q)) in pairs.iter().enumerate() {
            let value = compute_oracle(kind.base(), p, q, cfg.oracle).map(|o| o.value).map_err(|e| e.to_string());
            oracles.insert((kind, i), value);
        }
    }

    let mut cells = Vec::new();
    for &kind in &cfg.kinds {
        for pair in 0..pairs.len() {
            for &n in &cfg.n_grid {
                for seed in 0..cfg.seeds as u64 {
                    cells.push(Cell { kind, pair, n, seed });
                }
            }
        }
    }

    let run = |cell: &Cell| -> SweepRecord {
        let (p, q) = &pairs[cell.pair];
        let id = cfg.pair_id(cell.pair);
        let d = p.dim();
        let support = cfg.support.unwrap_or(if p.is_compact() && q.is_compact() {
            Support::CompactUnitCube
        } else {
            Support::Ball { radius: None }
        });
        let mut record = SweepRecord {
            kind: cell.kind,
            pair: id.clone(),
            d,
            n: cell.n,
            k: 0,
            seed: cell.seed,
            estimate: None,
            oracle: None,
            abs_error: None,
            signed_error: None,
            wall_ms: None,
            restarts: cfg.train.restarts,
            m_k: None,
            t_k: None,
            r_k: None,
            status: "ok".into(),
        };
        let schedule = match schedule_for(cfg, cell.kind, d, support, cell.n) {
            Ok(s) => s,
            Err(e) => {
                record.status = format!("error: {e}");
                return record;
            }
        };
        record.k = schedule.spec.k;
        record.m_k = Some(schedule.m_k);
        record.t_k = schedule.t_k;
        record.r_k = schedule.r_k;
        let oracle = match &oracles[&(cell.kind, cell.pair)] {
            Ok(v) => *v,
            Err(e) => {
                record.status = format!("oracle error: {e}");
                return record;
            }
        };
        record.oracle = Some(oracle);

        let cell_seed =
            derive_seed_path(cfg.root_seed, &[tag_of(cell.kind.as_str()), tag_of(&id), cell.n as u64, cell.seed]);
        let start = Instant::now();
        let outcome = (|| -> Result<f64> {
            let x = p.sample(cell.n, derive_seed(cell_seed, 1))?;
            let y = q.sample(cell.n, derive_seed(cell_seed, 2))?;
            let opts = TrainOptions { seed: derive_seed(cell_seed, 3), record_trace: false, ..cfg.train.clone() };
            Ok(estimate(cell.kind, &ClassChoice::Spec(schedule.spec.clone()), &x, &y, &opts)?.value)
        })();
        if cfg.record_wall_time {
            record.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
        match outcome {
            Ok(value) => {
                record.estimate = Some(value);
                record.signed_error = Some(value - oracle);
                record.abs_error = Some((value - oracle).abs());
            }
            Err(e) => record.status = format!("error: {e}"),
        }
        record
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::InvalidRequest(format!("cannot build worker pool: {e}")))?;
    let mut records: Vec<SweepRecord> = pool.install(|| cells.par_iter().map(run).collect());
    records.sort_by(|a, b| (a.kind, &a.pair, a.n, a.k, a.seed).cmp(&(b.kind, &b.pair, b.n, b.k, b.seed)));
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultFormat {
    Csv,
    Json,
}

impl ResultFormat {
    /// `.json` means JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ResultFormat::Json,
            _ => ResultFormat::Csv,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn write_results(records: &[SweepRecord], path: &Path, format: ResultFormat) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match format {
        ResultFormat::Csv => {
            writeln!(out, "{CSV_HEADER}").map_err(io_err(path))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            for r in records {
                w.serialize(r).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
            }
            w.flush().map_err(io_err(path))?;
        }
        ResultFormat::Json => {
            serde_json::to_writer_pretty(&mut out, records)
                .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
            writeln!(out).map_err(io_err(path))?;
            out.flush().map_err(io_err(path))?;
        }
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let fmt_err = |message: String| Error::Format { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| fmt_err(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(fmt_err(format!("unexpected header, want `{CSV_HEADER}`")));
    }
    rdr.deserialize().map(|r| r.map_err(|e| fmt_err(e.to_string()))).collect()
}

/// Reads CSV or JSON results, chosen by extension.
pub fn read_results(path: &Path) -> Result<Vec<SweepRecord>> {
    match ResultFormat::from_path(path) {
        ResultFormat::Csv => read_csv(path),
        ResultFormat::Json => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    N,
    K,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Axis::N),
            "k" => Ok(Axis::K),
            _ => Err(Error::Parse { input: s.into(), pos: 0, expected: "axis n or k".into() }),
        }
    }
}

/// Seed statistics at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub x: usize,
    pub mean_abs_error: f64,
    pub median_abs_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub axis: Axis,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
    pub table: Vec<RatePoint>,
    /// Cells left out of the fit (non-ok status).
    pub excluded: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// OLS of log₂(seed-mean abs error) on log₂(axis value). All ok records must
/// come from one (kind, pair), and the other axis must be a function of the
/// fitted one.
pub fn fit_rate(records: &[SweepRecord], axis: Axis) -> Result<RateFit> {
    let ok: Vec<&SweepRecord> = records.iter().filter(|r| r.is_ok() && r.abs_error.is_some()).collect();
    let excluded = records.len() - ok.len();
    if let Some(first) = ok.first() {
        if ok.iter().any(|r| r.kind != first.kind || r.pair != first.pair) {
            return Err(Error::InvalidRequest("fit_rate needs records from a single (kind, pair)".into()));
        }
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for r in &ok {
        let (x, other) = match axis {
            Axis::N => (r.n, r.k),
            Axis::K => (r.k, r.n),
        };
        let entry = groups.entry(x).or_default();
        entry.0.push(r.abs_error.unwrap_or(0.0));
        entry.1.push(other);
    }
    if groups.values().any(|(_, other)| other.iter().any(|&o| o != other[0])) {
        return Err(Error::InvalidRequest("the other axis varies at a fixed axis value".into()));
    }
    if groups.len() < 3 {
        return Err(Error::DegenerateFit(format!("need at least 3 distinct axis values, got {}", groups.len())));
    }
    let mut table = Vec::with_capacity(groups.len());
    for (x, (mut errs, _)) in groups {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        if mean == 0.0 {
            return Err(Error::DegenerateFit(format!("mean error is 0 at {x}")));
        }
        table.push(RatePoint { x, mean_abs_error: mean, count: errs.len(), median_abs_error: median(&mut errs) });
    }
    let xs: Vec<f64> = table.iter().map(|p| (p.x as f64).log2()).collect();
    let ys: Vec<f64> = table.iter().map(|p| p.mean_abs_error.log2()).collect();
    let (slope, intercept, r2) = ols(&xs, &ys);
    Ok(RateFit { axis, slope, intercept, r2, points: table.len(), table, excluded })
}

/// Ordinary least squares `y ≈ slope·x + intercept`; returns `r²` clamped to
/// `[0, 1]` (1 when `y` is constant and fitted exactly).
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    };
    (slope, intercept, r2)
}

fn default_grid() -> usize {
    4096
}
fn default_seeds() -> usize {
    5
}

/// Options for [`approx_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxOptions {
    /// Class parameter `a` of the fitted class `(1, 2a/k, a, a)`.
    pub a: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// `train.seed` is the root of the per-fit seeds; `restarts` is unused.
    #[serde(default)]
    pub train: TrainOptions,
}

/// Errors of the fits at one width (medians over seeds plus every seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub k: usize,
    pub sup_error: f64,
    pub l2_error: f64,
    pub sup_errors: Vec<f64>,
    pub l2_errors: Vec<f64>,
}

/// Fits `target` on an evenly spaced grid over `[lo, hi]` and reports the
/// sup-grid error and the RMS error weighted by `weight`.
pub fn approx_check_target<F, W>(
    target: F,
    weight: W,
    window: (f64, f64),
    k_grid: &[usize],
    opts: &ApproxOptions,
) -> Result<Vec<ApproxRow>>
where
    F: Fn(f64) -> Result<f64>,
    W: Fn(f64) -> Result<f64>,
{
    let (lo, hi) = window;
    if !(lo < hi) || opts.grid < 2 || opts.seeds < 1 {
        return Err(Error::InvalidRequest("approx check needs lo < hi, grid >= 2 and seeds >= 1".into()));
    }
    let xs: Vec<f64> = (0..opts.grid).map(|i| lo + (hi - lo) * i as f64 / (opts.grid - 1) as f64).collect();
    let targets = xs.iter().map(|&x| target(x)).collect::<Result<Vec<f64>>>()?;
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("approximation target"));
    }
    let weights = xs.iter().map(|&x| weight(x)).collect::<Result<Vec<f64>>>()?;
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidRequest("weights vanish on the grid".into()));
    }
    let points = SampleBatch::from_points(1, xs.clone())?;

    let mut rows = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let spec = match opts.activation {
            Activation::Relu => NetClassSpec::relu(1, k, opts.a),
            Activation::Sigmoid => NetClassSpec::sigmoid(1, k, opts.a),
        };
        let mut sups = Vec::with_capacity(opts.seeds);
        let mut l2s = Vec::with_capacity(opts.seeds);
        for s in 0..opts.seeds as u64 {
            let seed = derive_seed_path(opts.train.seed, &[k as u64, s]);
            let (params, _) = fit_least_squares(&spec, &points, &targets, &opts.train, seed)?;
            let mut sup: f64 = 0.0;
            let mut l2 = 0.0;
            for ((&x, &t), &w) in xs.iter().zip(&targets).zip(&weights) {
                let e = (net_eval(&spec, &params, &[x])? - t).abs();
                sup = sup.max(e);
                l2 += w * e * e;
            }
            sups.push(sup);
            l2s.push((l2 / wsum).sqrt());
        }
        let sup_error = median(&mut sups.clone());
        let l2_error = median(&mut l2s.clone());
        rows.push(ApproxRow { k, sup_error, l2_error, sup_errors: sups, l2_errors: l2s });
    }
    Ok(rows)
}

/// Fits the KL potential `ln dμ/dν` of a 1-d pair with widths `k_grid`;
/// the RMS error is weighted by the density of `q`.
pub fn approx_check(
    p: &Distribution,
    q: &Distribution,
    k_grid: &[usize],
    opts: &ApproxOptions,
) -> Result<Vec<ApproxRow>> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "approx check dimension",
            expected: 1,
            got: p.dim().max(q.dim()),
        });
    }
    let (wp, wq) = (p.window()[0], q.window()[0]);
    let window = if p.is_compact() && q.is_compact() { (0.0, 1.0) } else { (wp.0.min(wq.0), wp.1.max(wq.1)) };
    approx_check_target(|x| log_ratio(p, q, &[x]), |x| q.density(&[x]), window, k_grid, opts)
}
