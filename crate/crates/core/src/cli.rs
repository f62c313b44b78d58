//! Command-line front end: `calibrate` prints policy parameters, `simulate`
//! runs a sweep and writes a CSV or JSON table plus a run manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::engine::{sweep, Protocol, SumRateReport, SweepPlan, SweepRow};
use crate::error::Error;
use crate::policy::{calibrate_on, CalibrationReport, PolicyParams};

/// Exit code for solver failures.
pub const EXIT_SOLVER: i32 = 3;
/// Exit code for I/O and other runtime failures.
pub const EXIT_RUNTIME: i32 = 1;

/// CSV header, in column order.
pub const CSV_COLUMNS: [&str; 22] = [
    "omega1_db",
    "pr_db",
    "protocol",
    "sum_rate",
    "r1r_bar",
    "r2r_bar",
    "rr1_bar",
    "rr2_bar",
    "residual_c1",
    "residual_c2",
    "region",
    "mu1",
    "mu2",
    "t_share",
    "frac_m1",
    "frac_m2",
    "frac_m3",
    "frac_m4",
    "frac_m5",
    "frac_m6",
    "std_error",
    "seed",
];

#[derive(Debug, Parser)]
#[command(name = "bufrelay", version, about = "Mode selection for bidirectional buffer-aided relaying")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate the selection policy and print its parameters as JSON.
    Calibrate(CalibrateArgs),
    /// Simulate a sweep and write one row per (relay power, omega1, protocol).
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// P1 = P2 = 10 dB, omega2 = 0 dB, omega1 from -10 to 10 dB in 2 dB steps, relay 5/10/15 dB.
    Fig3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Proposed,
    Twoway,
    Tdbc,
    Mabc,
    MabcOpt,
    Threemode,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Mean gain of the user 1 link in dB (comma-separated list allowed).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    omega1_db: Vec<f64>,
    /// Mean gain of the user 2 link in dB.
    #[arg(long, allow_hyphen_values = true)]
    omega2_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p1_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p2_db: Option<f64>,
    /// Relay power in dB (comma-separated list allowed).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pr_db: Vec<f64>,
    /// Calibration sample size.
    #[arg(long, default_value_t = 100_000)]
    calib_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// JSON file of calibrated policies, read and extended.
    #[arg(long)]
    calib_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include region tests and expected residuals.
    #[arg(long)]
    report: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1_000_000)]
    n_slots: u64,
    /// Leading slots left out of the averages.
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Proposed)]
    protocol: ProtocolArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Manifest path; defaults to `<out>.manifest.json` when `--out` is set.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Scenario {
    omega1_db: Vec<f64>,
    omega2_db: f64,
    p1_db: f64,
    p2_db: f64,
    pr_db: Vec<f64>,
    calib_samples: usize,
    seed: u64,
}

enum Failure {
    Usage(clap::Error),
    Solver(String),
    Runtime(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::CaseInfeasible { .. } | Error::NumericalFailure { .. } => Failure::Solver(e.to_string()),
            Error::InvalidArgument(_) | Error::Internal { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(kind: ErrorKind, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(Cli::command().error(kind, msg))
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<Scenario, Failure> {
        let fig3 = self.preset == Some(Preset::Fig3);
        let pick = |v: Option<f64>, default: f64, name: &str| match v {
            Some(x) => Ok(x),
            None if fig3 => Ok(default),
            None => Err(usage(ErrorKind::MissingRequiredArgument, format!("--{name} is required without --preset"))),
        };
        let omega1_db = if !self.omega1_db.is_empty() {
            self.omega1_db.clone()
        } else if fig3 {
            (0..11).map(|i| -10.0 + 2.0 * i as f64).collect()
        } else {
            return Err(usage(ErrorKind::MissingRequiredArgument, "--omega1-db is required without --preset"));
        };
        let pr_db = if !self.pr_db.is_empty() {
            self.pr_db.clone()
        } else if fig3 {
            vec![5.0, 10.0, 15.0]
        } else {
            return Err(usage(ErrorKind::MissingRequiredArgument, "--pr-db is required without --preset"));
        };
        let s = Scenario {
            omega1_db,
            omega2_db: pick(self.omega2_db, 0.0, "omega2-db")?,
            p1_db: pick(self.p1_db, 10.0, "p1-db")?,
            p2_db: pick(self.p2_db, 10.0, "p2-db")?,
            pr_db,
            calib_samples: self.calib_samples,
            seed: self.seed,
        };
        let all = s.omega1_db.iter().chain(&s.pr_db).chain([&s.omega2_db, &s.p1_db, &s.p2_db]);
        if let Some(bad) = all.into_iter().find(|x| !x.is_finite()) {
            return Err(usage(ErrorKind::InvalidValue, format!("non-finite dB value {bad}")));
        }
        Ok(s)
    }
}

impl Scenario {
    fn plan(&self, protocols: Vec<Protocol>, n_slots: u64, warmup: u64, threads: usize) -> SweepPlan {
        SweepPlan {
            omega1_db: self.omega1_db.clone(),
            omega2_db: self.omega2_db,
            p1_db: self.p1_db,
            p2_db: self.p2_db,
            pr_db: self.pr_db.clone(),
            protocols,
            n_slots,
            warmup_discard: warmup,
            seed: self.seed,
            calibration_samples: self.calib_samples,
            parallelism: threads,
            cached: BTreeMap::new(),
        }
    }

    /// Cache key: everything the calibration depends on.
    fn cache_key(&self, plan: &SweepPlan, i: usize, j: usize) -> String {
        let seed = plan.config(i, j, Protocol::Proposed).map(|c| c.seed).unwrap_or_default();
        format!(
            "omega1_db={};omega2_db={};p1_db={};p2_db={};pr_db={};calib_samples={};seed={}",
            self.omega1_db[i], self.omega2_db, self.p1_db, self.p2_db, self.pr_db[j], self.calib_samples, seed
        )
    }
}

struct Cache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, PolicyParams>,
    hits: usize,
    misses: usize,
}

impl Cache {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut entries: BTreeMap<String, PolicyParams> = BTreeMap::new();
        if let Some(p) = path.filter(|p| p.exists()) {
            let text = fs::read_to_string(p)?;
            if !text.trim().is_empty() {
                entries = serde_json::from_str(&text)
                    .map_err(|e| Failure::Runtime(format!("calibration cache {}: {e}", p.display())))?;
            }
            for v in entries.values() {
                v.validate().map_err(|e| Failure::Runtime(format!("calibration cache {}: {e}", p.display())))?;
            }
        }
        Ok(Self { path: path.map(Path::to_path_buf), entries, hits: 0, misses: 0 })
    }

    fn save(&self) -> Result<(), Failure> {
        if let Some(p) = &self.path {
            let text = serde_json::to_string_pretty(&self.entries).expect("cache serializes");
            fs::write(p, text + "\n")?;
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV fields of a finished sweep row, in [`CSV_COLUMNS`] order.
pub fn csv_record(row: &SweepRow, r: &SumRateReport) -> Vec<String> {
    let mut f = vec![row.omega1_db.to_string(), row.pr_db.to_string(), row.protocol.to_string()];
    f.extend(
        [r.sum_rate, r.r1r_bar, r.r2r_bar, r.rr1_bar, r.rr2_bar, r.residual_c1, r.residual_c2].map(|x| x.to_string()),
    );
    f.push(r.region.map(|g| g.to_string()).unwrap_or_default());
    f.extend([r.mu1, r.mu2, r.t_share].map(fmt_opt));
    f.extend(r.mode_histogram.map(|x| x.to_string()));
    f.push(r.std_error.to_string());
    f.push(row.seed.to_string());
    f
}

/// Full CSV table of the successful rows.
pub fn render_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("write to memory");
    for row in rows {
        if let Ok(r) = &row.result {
            w.write_record(csv_record(row, r)).expect("write to memory");
        }
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

#[derive(Serialize)]
struct JsonRow<'a> {
    omega1_db: f64,
    pr_db: f64,
    protocol: Protocol,
    seed: u64,
    #[serde(flatten)]
    report: &'a SumRateReport,
}

fn render_json(rows: &[SweepRow]) -> String {
    let out: Vec<JsonRow> = rows
        .iter()
        .filter_map(|row| {
            row.result.as_ref().ok().map(|r| JsonRow {
                omega1_db: row.omega1_db,
                pr_db: row.pr_db,
                protocol: row.protocol,
                seed: row.seed,
                report: r,
            })
        })
        .collect();
    serde_json::to_string_pretty(&out).expect("rows serialize") + "\n"
}

fn protocols(arg: ProtocolArg) -> Vec<Protocol> {
    match arg {
        ProtocolArg::Proposed => vec![Protocol::Proposed],
        ProtocolArg::Twoway => vec![Protocol::TwoWay],
        ProtocolArg::Tdbc => vec![Protocol::Tdbc],
        ProtocolArg::Mabc => vec![Protocol::Mabc],
        ProtocolArg::MabcOpt => vec![Protocol::MabcOpt],
        ProtocolArg::Threemode => vec![Protocol::ThreeMode],
        ProtocolArg::All => Protocol::ALL.to_vec(),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationEntry {
    omega1_db: f64,
    pr_db: f64,
    seed: u64,
    params: PolicyParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<CalibrationReport>,
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<(), Failure> {
    let scenario = args.scenario.resolve()?;
    let plan = scenario.plan(vec![Protocol::Proposed], crate::engine::MIN_SLOTS, 0, 1);
    let mut cache = Cache::load(args.scenario.calib_cache.as_deref())?;
    let mut entries = Vec::new();
    for j in 0..scenario.pr_db.len() {
        for i in 0..scenario.omega1_db.len() {
            let config = plan.config(i, j, Protocol::Proposed)?;
            let key = scenario.cache_key(&plan, i, j);
            let (params, report) = match cache.entries.get(&key) {
                Some(p) if !args.report => {
                    cache.hits += 1;
                    (*p, None)
                }
                _ => {
                    cache.misses += 1;
                    let cal = calibrate_on(&config.calibration_sample()?, &config.powers)?;
                    cache.entries.insert(key, cal.params);
                    (cal.params, Some(cal.report))
                }
            };
            entries.push(CalibrationEntry {
                omega1_db: scenario.omega1_db[i],
                pr_db: scenario.pr_db[j],
                seed: config.seed,
                params,
                report: if args.report { report } else { None },
            });
        }
    }
    cache.save()?;
    let text = if entries.len() == 1 && !args.report {
        entries[0].params.to_json()
    } else {
        serde_json::to_string_pretty(&entries).expect("entries serialize")
    };
    write_output(args.out.as_deref(), &(text + "\n"))
}

#[derive(Serialize)]
struct TupleRecord {
    omega1_db: f64,
    pr_db: f64,
    protocol: Protocol,
    seed: u64,
    status: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    timestamp_unix: u64,
    argv: Vec<String>,
    scenario: &'a Scenario,
    n_slots: u64,
    warmup: u64,
    protocols: Vec<Protocol>,
    threads: usize,
    format: &'static str,
    calibration_cache: Option<String>,
    cache_hits: usize,
    cache_misses: usize,
    tuples: Vec<TupleRecord>,
}

fn simulate_cmd(args: &SimulateArgs, argv: &[String]) -> Result<(), Failure> {
    let scenario = args.scenario.resolve()?;
    let protocols = protocols(args.protocol);
    let mut plan = scenario.plan(protocols.clone(), args.n_slots, args.warmup, args.threads);
    let mut cache = Cache::load(args.scenario.calib_cache.as_deref())?;
    let wants_policy = protocols.contains(&Protocol::Proposed);
    let mut keys = BTreeMap::new();
    if wants_policy {
        for j in 0..scenario.pr_db.len() {
            for i in 0..scenario.omega1_db.len() {
                let key = scenario.cache_key(&plan, i, j);
                match cache.entries.get(&key) {
                    Some(p) => {
                        cache.hits += 1;
                        plan.cached.insert((i, j), *p);
                    }
                    None => cache.misses += 1,
                }
                keys.insert((i, j), key);
            }
        }
    }
    let rows = sweep(&plan)?;
    for row in &rows {
        if let (Ok(r), Some(key)) = (&row.result, keys.get(&(row.omega1_idx, row.pr_idx))) {
            if let Some(p) = r.policy {
                cache.entries.entry(key.clone()).or_insert(p);
            }
        }
    }
    cache.save()?;

    let text = match args.format {
        Format::Csv => render_csv(&rows),
        Format::Json => render_json(&rows),
    };
    write_output(args.out.as_deref(), &text)?;

    let manifest_path = args.manifest.clone().or_else(|| {
        args.out.as_ref().map(|p| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    });
    if let Some(path) = manifest_path {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            argv: argv.to_vec(),
            scenario: &scenario,
            n_slots: args.n_slots,
            warmup: args.warmup,
            protocols,
            threads: args.threads,
            format: match args.format {
                Format::Csv => "csv",
                Format::Json => "json",
            },
            calibration_cache: args.scenario.calib_cache.as_ref().map(|p| p.display().to_string()),
            cache_hits: cache.hits,
            cache_misses: cache.misses,
            tuples: rows
                .iter()
                .map(|r| TupleRecord {
                    omega1_db: r.omega1_db,
                    pr_db: r.pr_db,
                    protocol: r.protocol,
                    seed: r.seed,
                    status: match &r.result {
                        Ok(_) => "ok".into(),
                        Err(e) => e.to_string(),
                    },
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    }

    let failures: Vec<&SweepRow> = rows.iter().filter(|r| r.result.is_err()).collect();
    if failures.is_empty() {
        return Ok(());
    }
    let mut msg = String::new();
    let mut solver = true;
    for row in &failures {
        let e = row.result.as_ref().expect_err("filtered");
        solver &= matches!(e, Error::CaseInfeasible { .. } | Error::NumericalFailure { .. });
        let _ = writeln!(msg, "omega1_db={} pr_db={} protocol={}: {e}", row.omega1_db, row.pr_db, row.protocol);
    }
    Err(if solver { Failure::Solver(msg) } else { Failure::Runtime(msg) })
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = match &cli.command {
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Simulate(a) => simulate_cmd(a, &argv),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure:\n{msg}");
            EXIT_SOLVER
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
