use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ftcaqr_core::caqr::{factor, reconstruct_q, Distribution, FactorConfig, Factorization, Mode};
use ftcaqr_core::fabric::{FaultPlan, KillEvent, TraceKind};
use ftcaqr_core::gen::random_matrix;
use ftcaqr_core::report::RunReport;
use ftcaqr_core::verify::{compare_runs, metrics, oracle_qr, Metrics};
use ftcaqr_core::{Error, Matrix, Variant};

/// Accuracy threshold for backward error, orthogonality and R against the oracle.
const TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(
    name = "ftcaqr",
    version,
    about = "Fault-tolerant CAQR on a simulated fabric"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Factor a matrix and print the run report.
    Factor(RunArgs),
    /// Factor with injected failures; print the report and the recovery log.
    Inject(RunArgs),
    /// Run every single-failure injection point and compare with the fault-free run.
    Sweep(RunArgs),
    /// Compare a distributed run against the sequential oracle.
    Verify(RunArgs),
    /// Write the message trace.
    Trace(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Panel width b; must divide --cols.
    #[arg(long)]
    panel: usize,
    /// Number of ranks; a power of two.
    #[arg(long)]
    ranks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ft", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value = "symmetric", value_parser = parse_variant)]
    variant: Variant,
    /// RANK@PHASE:PANEL:STEP:POINT, e.g. 2@TSQR:0:0:BEFORE_EXCHANGE. Repeatable.
    #[arg(long = "fault")]
    faults: Vec<KillEvent>,
    /// Write the trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Raw row-major little-endian f64 matrix instead of the seeded generator.
    #[arg(long)]
    input: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Outcomes that map to exit codes other than 0.
enum Fail {
    Verification(String),
    Usage(anyhow::Error),
    Unrecoverable(anyhow::Error),
    Other(anyhow::Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Fail::Usage(e.into()),
            Error::Unrecoverable(_) => Fail::Unrecoverable(e.into()),
            other => Fail::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail::Other(e)
    }
}

fn load_raw(path: &Path, rows: usize, cols: usize) -> anyhow::Result<Matrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != rows * cols * 8 {
        bail!(
            "{} holds {} bytes; a {rows}x{cols} matrix needs {}",
            path.display(),
            bytes.len(),
            rows * cols * 8
        );
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Matrix::new(rows, cols, data)?)
}

struct Setup {
    a: Matrix,
    dist: Distribution,
    cfg: FactorConfig,
    plan: FaultPlan,
}

fn setup(args: &RunArgs) -> Result<Setup, Fail> {
    let a = match &args.input {
        Some(p) => load_raw(p, args.rows, args.cols).map_err(Fail::Usage)?,
        None => random_matrix(args.rows, args.cols, args.seed),
    };
    let dist = Distribution::even(args.rows, args.cols, args.panel, args.ranks)?;
    let cfg = FactorConfig {
        mode: args.mode,
        variant: args.variant,
    };
    Ok(Setup {
        a,
        dist,
        cfg,
        plan: FaultPlan::new(args.faults.clone()),
    })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn measure(s: &Setup, f: &Factorization) -> Result<Metrics, Fail> {
    let q = reconstruct_q(f)?;
    let mut m = metrics(&s.a, &q, &f.r)?;
    let (_, r_oracle) = oracle_qr(&s.a)?;
    m.max_diff = compare_runs(&f.r, &r_oracle)?;
    Ok(m)
}

fn accurate(m: &Metrics) -> bool {
    m.backward_error <= TOL && m.orthogonality <= TOL && m.max_diff <= TOL && m.triangularity == 0.0
}

/// Runs the factorisation and writes the optional trace and report files.
fn run_and_report(args: &RunArgs) -> Result<(Setup, Factorization, RunReport), Fail> {
    let s = setup(args)?;
    let f = factor(&s.a, &s.dist, &s.cfg, &s.plan)?;
    let m = measure(&s, &f)?;
    let report = RunReport::new(&f, m);
    if let Some(p) = &args.trace {
        write_file(p, &f.trace.to_text())?;
    }
    if let Some(p) = &args.report {
        write_file(p, &report.to_text())?;
    }
    Ok((s, f, report))
}

fn check(report: &RunReport) -> Result<(), Fail> {
    if accurate(&report.metrics) {
        Ok(())
    } else {
        Err(Fail::Verification(format!(
            "accuracy outside {TOL:e}: {:?}",
            report.metrics
        )))
    }
}

fn cmd_factor(args: &RunArgs) -> Result<(), Fail> {
    let (_, _, report) = run_and_report(args)?;
    print!("{}", report.to_text());
    check(&report)
}

fn cmd_inject(args: &RunArgs) -> Result<(), Fail> {
    if args.faults.is_empty() {
        return Err(Fail::Usage(anyhow::anyhow!(
            "inject needs at least one --fault"
        )));
    }
    let (_, f, report) = run_and_report(args)?;
    print!("{}", report.to_text());
    println!("recovery log:");
    for e in f.trace.events.iter().filter(|e| {
        matches!(
            e.kind,
            TraceKind::Fail | TraceKind::Respawn | TraceKind::Recover
        )
    }) {
        println!("  {e}");
    }
    check(&report)
}

fn cmd_sweep(args: &RunArgs) -> Result<(), Fail> {
    let s = setup(args)?;
    let sw = ftcaqr_core::sweep::sweep(&s.a, &s.dist, &s.cfg)?;
    print!("{}", sw.to_text());
    for c in sw.failures() {
        println!("failed {}: {c:?}", c.event);
    }
    if sw.passed() {
        Ok(())
    } else {
        Err(Fail::Verification(
            "some injections diverged from the fault-free run".into(),
        ))
    }
}

fn cmd_verify(args: &RunArgs) -> Result<(), Fail> {
    let (_, _, report) = run_and_report(args)?;
    let m = &report.metrics;
    let line = |name: &str, v: f64, ok: bool| {
        println!("{name:<16} {v:e} {}", if ok { "ok" } else { "FAIL" });
    };
    line("backward_error", m.backward_error, m.backward_error <= TOL);
    line("orthogonality", m.orthogonality, m.orthogonality <= TOL);
    line("triangularity", m.triangularity, m.triangularity == 0.0);
    line("max_diff", m.max_diff, m.max_diff <= TOL);
    check(&report)
}

fn cmd_trace(args: &RunArgs) -> Result<(), Fail> {
    let s = setup(args)?;
    let f = factor(&s.a, &s.dist, &s.cfg, &s.plan)?;
    let text = f.trace.to_text();
    match &args.trace {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.report {
        let report = RunReport::new(&f, measure(&s, &f)?);
        write_file(p, &report.to_text())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Factor(a) => cmd_factor(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Fail::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Fail::Unrecoverable(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Fail::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
