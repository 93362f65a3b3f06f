//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or other runtime failure, 2 parse error
//! (including bad command lines), 3 validation error, 4 divergence.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ScenarioError, SimError, TraceError};
use crate::graph::CyberGraph;
use crate::metrics::{self, MetricReport, ObjectiveBands};
use crate::scenario::Scenario;
use crate::sim;
use crate::trace::Trace;
use crate::wire::{self, SvFrame};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Default output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "DERSIM_OUT";

pub const TRACE_FILE: &str = "trace.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "dersim", version, about = "DER secondary-control simulator with a cyber-attack layer")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write trace, event log and manifest.
    Run(RunArgs),
    /// Largest Laplacian eigenvalue and the uniform delay bound of a graph.
    Bound(BoundArgs),
    /// Convergence times over one scenario parameter.
    Sweep(SweepArgs),
    /// Metric report (JSON) for a written trace.
    Metrics(MetricsArgs),
    /// Long-format CSV series for a figure.
    Plotdata(PlotArgs),
    /// Encode or decode a single sampled-value frame.
    #[command(subcommand)]
    Codec(CodecCmd),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Bypass the semantic compensation layer.
    #[arg(long)]
    pub no_compensation: bool,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// `complete`, `ring` or `line`.
    #[arg(long, conflicts_with = "weights")]
    pub preset: Option<String>,
    #[arg(long, short, default_value_t = 7)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub weight: f64,
    /// Weight matrix file: one row per line, entries separated by spaces or commas.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Downsampling factor of the inner-loop error.
    #[value(name = "D")]
    D,
    Alpha,
    /// Uniform link latency in seconds.
    Tau,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_compensation: bool,
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Run directory or trace CSV. Events are read from `events.jsonl` next to it.
    pub trace: PathBuf,
    /// Disturbance time to measure from; defaults to the latest one in the event log.
    #[arg(long)]
    pub from: Option<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// fig5..fig9, fig11..fig15 read a trace; fig10 runs scenarios.
    pub figure: String,
    /// Run directory or trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// fig10 inputs in case order (I, II, III).
    #[arg(long, num_args = 1..)]
    pub scenarios: Vec<PathBuf>,
    /// Zero-based agent for single-agent figures.
    #[arg(long, default_value_t = 0)]
    pub agent: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CodecCmd {
    /// Print the hex encoding of one frame.
    Encode {
        #[arg(long, default_value = "DER01")]
        sv_id: String,
        #[arg(long, default_value_t = 0)]
        smp_cnt: u16,
        #[arg(long, default_value_t = 0.0)]
        stamp_s: f64,
        #[arg(long, allow_hyphen_values = true)]
        omega: f64,
        #[arg(long, allow_hyphen_values = true)]
        mpp: f64,
        #[arg(long, allow_hyphen_values = true)]
        nqq: f64,
    },
    /// Decode a hex frame and print it as JSON.
    Decode { hex: String },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn new(code: i32, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Parse { .. } => EXIT_PARSE,
            ScenarioError::Io { .. } => EXIT_RUNTIME,
            ScenarioError::Invalid(_) | ScenarioError::Graph(_) => EXIT_INVALID,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        let code = match e {
            TraceError::Io(_) => EXIT_RUNTIME,
            _ => EXIT_PARSE,
        };
        Self::new(code, e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_RUNTIME, format!("{}: {e}", path.display()))
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    return EXIT_OK;
                }
                _ => EXIT_PARSE,
            };
            eprint!("{e}");
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            if !e.msg.is_empty() {
                eprintln!("error: {}", e.msg);
            }
            e.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.cmd {
        Command::Run(a) => cmd_run(&a, out),
        Command::Bound(a) => cmd_bound(&a, out).map(|_| EXIT_OK),
        Command::Sweep(a) => cmd_sweep(&a, out).map(|_| EXIT_OK),
        Command::Metrics(a) => cmd_metrics(&a, out).map(|_| EXIT_OK),
        Command::Plotdata(a) => cmd_plotdata(&a, out).map(|_| EXIT_OK),
        Command::Codec(c) => cmd_codec(&c, out).map(|_| EXIT_OK),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    match out.write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        // a closed pipe (`| head`) is the reader's choice, not a failure
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Err(CliError::new(EXIT_OK, "")),
        Err(e) => Err(CliError::new(EXIT_RUNTIME, format!("stdout: {e}"))),
    }
}

// ----- run -----

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

/// Enough to rerun bit-exactly: scenario, seed, flags and build.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub scenario_path: String,
    pub scenario_sha256: String,
    pub seed: u64,
    pub compensation: bool,
    pub build: String,
    pub output_dir: String,
    pub diverged: bool,
    pub files: Vec<FileChecksum>,
}

pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn load_scenario(path: &Path, seed: Option<u64>, no_comp: bool) -> Result<Scenario, CliError> {
    let mut scn = Scenario::load(path)?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    if no_comp {
        scn.compensation_enabled = false;
    }
    Ok(scn)
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let scn = load_scenario(&a.scenario, a.seed, a.no_compensation)?;
    let scenario_bytes = fs::read(&a.scenario).map_err(|e| io_err(&a.scenario, e))?;
    let (trace, abort) = match sim::run(&scn) {
        Ok(t) => (t, None),
        Err(abort) => match abort.error {
            SimError::Scenario(e) => return Err(e.into()),
            err => (abort.partial, Some(err)),
        },
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let csv = trace.to_csv_string().into_bytes();
    let mut events = Vec::new();
    trace.write_events(&mut events)?;
    write_atomic(&a.out.join(TRACE_FILE), &csv)?;
    write_atomic(&a.out.join(EVENTS_FILE), &events)?;
    let manifest = RunManifest {
        scenario_path: a.scenario.display().to_string(),
        scenario_sha256: sha256_hex(&scenario_bytes),
        seed: scn.seed,
        compensation: scn.compensation_enabled,
        build: build_id(),
        output_dir: a.out.display().to_string(),
        diverged: abort.is_some(),
        files: vec![
            FileChecksum { file: TRACE_FILE.into(), sha256: sha256_hex(&csv) },
            FileChecksum { file: EVENTS_FILE.into(), sha256: sha256_hex(&events) },
        ],
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&a.out.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    emit(out, &format!("{}\n", a.out.join(MANIFEST_FILE).display()))?;
    match abort {
        Some(e) => {
            eprintln!("error: {e} (partial outputs kept in {})", a.out.display());
            Ok(EXIT_DIVERGED)
        }
        None => Ok(EXIT_OK),
    }
}

// ----- bound -----

fn parse_matrix(text: &str, origin: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect();
        rows.push(row.map_err(|e| {
            CliError::new(EXIT_PARSE, format!("{origin}: line {}: {e}", i + 1))
        })?);
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct BoundReport {
    n: usize,
    edges: usize,
    symmetric: bool,
    lambda_max: f64,
    delay_bound_s: f64,
    bound_exact: bool,
}

fn cmd_bound(a: &BoundArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let inv = |e: crate::error::GraphError| CliError::new(EXIT_INVALID, e.to_string());
    let g = match (&a.preset, &a.weights) {
        (_, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            CyberGraph::from_weights(parse_matrix(&text, &p.display().to_string())?).map_err(inv)?
        }
        (Some(name), None) => CyberGraph::preset(name, a.n, a.weight).map_err(inv)?,
        (None, None) => return Err(CliError::new(EXIT_PARSE, "give --preset or --weights")),
    };
    let rep = g.laplacian_report().map_err(inv)?;
    let r = BoundReport {
        n: g.n(),
        edges: g.edge_count(),
        symmetric: g.is_symmetric(),
        lambda_max: rep.lambda_max,
        delay_bound_s: rep.delay_bound_s,
        bound_exact: rep.bound_exact,
    };
    let text = if a.json {
        format!("{}\n", serde_json::to_string_pretty(&r).expect("serializes"))
    } else {
        let mut s = format!(
            "agents        {}\nedges         {}\nsymmetric     {}\nlambda_max    {:.12}\ndelay_bound_s {:.12}\n",
            r.n, r.edges, r.symmetric, r.lambda_max, r.delay_bound_s
        );
        if !r.bound_exact {
            s.push_str("note          directed graph; bound is indicative only\n");
        }
        s
    };
    emit(out, &text)
}

// ----- sweep -----

/// Applies one sweep value. `tau` also moves the self delay when the
/// scenario delays its own state.
pub fn apply_axis(scn: &mut Scenario, axis: Axis, v: f64) -> Result<(), CliError> {
    match axis {
        Axis::D => {
            if v < 1.0 || v.fract() != 0.0 {
                return Err(CliError::new(EXIT_INVALID, format!("D must be a positive integer, got {v}")));
            }
            scn.sampler.downsample_d = v as usize;
        }
        Axis::Alpha => scn.sampler.alpha = v,
        Axis::Tau => {
            scn.set_uniform_latency(v);
            if scn.local_delay_s > 0.0 {
                scn.local_delay_s = v;
            }
        }
    }
    scn.validate()?;
    Ok(())
}

/// Metrics of a finished or aborted run; divergence becomes sentinels.
pub fn run_report(scn: &Scenario, bands: &ObjectiveBands) -> Result<MetricReport, CliError> {
    let trace = match sim::run(scn) {
        Ok(t) => t,
        Err(abort) => match abort.error {
            SimError::Scenario(e) => return Err(e.into()),
            _ => abort.partial,
        },
    };
    metrics::report(&trace, bands, None).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))
}

pub const SWEEP_HEADER: &str = "axis,value,tc_o1_s,tc_o2_s,trigger_rate";

fn sweep_row(axis: Axis, v: f64, r: &MetricReport) -> String {
    let name = match axis {
        Axis::D => "D",
        Axis::Alpha => "alpha",
        Axis::Tau => "tau",
    };
    format!("{name},{v},{},{},{}", r.tc_o1_s, r.tc_o2_s, r.trigger_rate)
}

pub fn sweep(base: &Scenario, axis: Axis, values: &[f64], bands: &ObjectiveBands) -> Result<String, CliError> {
    if values.is_empty() {
        return Err(CliError::new(EXIT_INVALID, "empty value list"));
    }
    let rows: Result<Vec<String>, CliError> = values
        .par_iter()
        .map(|&v| {
            let mut s = base.clone();
            apply_axis(&mut s, axis, v)?;
            Ok(sweep_row(axis, v, &run_report(&s, bands)?))
        })
        .collect();
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for r in rows? {
        text.push_str(&r);
        text.push('\n');
    }
    Ok(text)
}

fn bands(b: f64) -> Result<ObjectiveBands, CliError> {
    ObjectiveBands::new(b).map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scn = load_scenario(&a.scenario, a.seed, a.no_compensation)?;
    let text = sweep(&scn, a.axis, &a.values, &bands(a.band)?)?;
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => emit(out, &text),
    }
}

// ----- metrics -----

/// Loads a trace from a run directory or a CSV path, with its event log
/// when one sits next to it.
pub fn load_trace(path: &Path) -> Result<Trace, CliError> {
    let (csv, events) = if path.is_dir() {
        (path.join(TRACE_FILE), path.join(EVENTS_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(EVENTS_FILE))
    };
    let f = fs::File::open(&csv).map_err(|e| io_err(&csv, e))?;
    let mut trace = Trace::read_csv(BufReader::new(f))?;
    if events.exists() {
        let f = fs::File::open(&events).map_err(|e| io_err(&events, e))?;
        trace.events = Trace::read_events(BufReader::new(f))?;
    }
    Ok(trace)
}

fn cmd_metrics(a: &MetricsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = load_trace(&a.trace)?;
    let r = metrics::report(&trace, &bands(a.band)?, a.from)
        .map_err(|e| CliError::new(EXIT_INVALID, e.to_string()))?;
    emit(out, &format!("{}\n", serde_json::to_string_pretty(&r).expect("serializes")))
}

// ----- plotdata -----

/// Trace columns plotted per figure, and whether only one agent is shown.
fn figure_columns(id: &str) -> Option<(&'static [&'static str], bool)> {
    const STATES: &[&str] = &["omega", "mpp", "nqq"];
    Some(match id {
        "fig5" | "fig6" | "fig7" | "fig8" | "fig9" | "fig11" | "fig12" => (STATES, false),
        "fig13" => (&["edvc", "edd", "epphi", "eqvc", "eqd", "eqphi"], true),
        "fig14" => (&["fresh", "rp", "rq"], false),
        "fig15" => (&["up", "upf", "uq", "uqf", "trig"], false),
        _ => return None,
    })
}

pub const PLOT_HEADER: &str = "t,series,agent,value";

/// Long-format rows `t,series,agent,value` for a trace figure.
pub fn plot_trace(trace: &Trace, figure: &str, agent: usize) -> Result<String, CliError> {
    let (cols, single) = figure_columns(figure)
        .ok_or_else(|| CliError::new(EXIT_INVALID, format!("unknown figure id `{figure}`")))?;
    if trace.is_empty() {
        return Err(CliError::new(EXIT_INVALID, "trace is empty"));
    }
    if agent >= trace.n_agents() {
        return Err(CliError::new(
            EXIT_INVALID,
            format!("agent {agent} out of range for {} agents", trace.n_agents()),
        ));
    }
    let agents: Vec<usize> = if single { vec![agent] } else { (0..trace.n_agents()).collect() };
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for &c in cols {
        for &j in &agents {
            let col = trace.agents[j]
                .column(c)
                .ok_or_else(|| CliError::new(EXIT_INVALID, format!("trace lacks column `{c}`")))?;
            for (t, v) in trace.t.iter().zip(col) {
                s.push_str(&format!("{t},{c},{j},{v}\n"));
            }
        }
    }
    Ok(s)
}

pub const FIG10_HEADER: &str = "case,compensation,objective,tc_s";

/// Convergence-time bars for each case, with and without the scheme.
pub fn plot_fig10(cases: &[Scenario]) -> Result<String, CliError> {
    if cases.is_empty() {
        return Err(CliError::new(EXIT_INVALID, "fig10 needs at least one --scenarios entry"));
    }
    const LABELS: [&str; 6] = ["I", "II", "III", "IV", "V", "VI"];
    let jobs: Vec<(usize, bool)> = (0..cases.len()).flat_map(|i| [(i, false), (i, true)]).collect();
    let reports: Result<Vec<MetricReport>, CliError> = jobs
        .par_iter()
        .map(|&(i, comp)| {
            let mut s = cases[i].clone();
            s.compensation_enabled = comp;
            run_report(&s, &ObjectiveBands::default())
        })
        .collect();
    let mut out = String::from(FIG10_HEADER);
    out.push('\n');
    for ((i, comp), r) in jobs.iter().zip(reports?) {
        let label = LABELS.get(*i).map_or_else(|| format!("{}", i + 1), |l| l.to_string());
        let tag = if *comp { "with" } else { "without" };
        for (obj, m) in [("O1", r.tc_o1_s), ("O2", r.tc_o2_s)] {
            out.push_str(&format!("{label},{tag},{obj},{m}\n"));
        }
    }
    Ok(out)
}

fn cmd_plotdata(a: &PlotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = if a.figure == "fig10" {
        let cases: Result<Vec<Scenario>, CliError> =
            a.scenarios.iter().map(|p| load_scenario(p, None, false)).collect();
        plot_fig10(&cases?)?
    } else {
        if figure_columns(&a.figure).is_none() {
            return Err(CliError::new(EXIT_INVALID, format!("unknown figure id `{}`", a.figure)));
        }
        let p = a
            .trace
            .as_ref()
            .ok_or_else(|| CliError::new(EXIT_PARSE, format!("{} needs --trace", a.figure)))?;
        plot_trace(&load_trace(p)?, &a.figure, a.agent)?
    };
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => emit(out, &text),
    }
}

// ----- codec -----

#[derive(Serialize)]
struct DecodedFrame<'a> {
    sv_id: &'a str,
    smp_cnt: u16,
    conf_rev: u32,
    stamp_us: u64,
    omega: f64,
    mpp: f64,
    nqq: f64,
}

fn cmd_codec(c: &CodecCmd, out: &mut dyn Write) -> Result<(), CliError> {
    let wire_err = |code: i32| move |e: crate::error::WireError| CliError::new(code, e.to_string());
    match c {
        CodecCmd::Encode { sv_id, smp_cnt, stamp_s, omega, mpp, nqq } => {
            let sigma = crate::secondary::SigmaPayload { omega: *omega, mp_p: *mpp, nq_q: *nqq };
            let f = SvFrame::from_sigma(sv_id, *smp_cnt, *stamp_s, &sigma).map_err(wire_err(EXIT_INVALID))?;
            emit(out, &format!("{}\n", wire::encode_hex(&f).map_err(wire_err(EXIT_INVALID))?))
        }
        CodecCmd::Decode { hex } => {
            let f = wire::decode_hex(hex.trim()).map_err(wire_err(EXIT_PARSE))?;
            let s = f.sigma();
            let d = DecodedFrame {
                sv_id: &f.sv_id,
                smp_cnt: f.smp_cnt,
                conf_rev: f.conf_rev,
                stamp_us: f.stamp_us,
                omega: s.omega,
                mpp: s.mp_p,
                nqq: s.nq_q,
            };
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&d).expect("serializes")))
        }
    }
}

