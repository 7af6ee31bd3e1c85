//! Subcommands and artifact emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use jumpbsde::cascade::{run_cascade, solve_quadratic, QuadraticSolution};
use jumpbsde::solver::{AprioriReport, BsdeSolution};
use jumpbsde::utility::{optimal_strategy, random_strategies, verify_optimality, StrategyTable};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    Solve,
    CascadeTrace,
    Validate,
    Optimize,
}

/// Runs one subcommand and returns the paths written.
pub fn execute(cmd: Subcommand, config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out)?;
    match cmd {
        Subcommand::Solve => run_solve(config, out),
        Subcommand::CascadeTrace => run_cascade_trace(config, out),
        Subcommand::Validate => run_validate(config, out),
        Subcommand::Optimize => run_optimize(config, out),
    }
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn write_json<S: Serialize>(out: &Path, name: &str, value: &S, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    let path = out.join(name);
    write_atomic(&path, text.as_bytes())?;
    written.push(path);
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(
    out: &Path,
    name: &str,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let path = out.join(name);
    write_atomic(&path, &bytes)?;
    written.push(path);
    Ok(())
}

fn solution_csv(
    out: &Path,
    name: &str,
    sol: &BsdeSolution<f64>,
    times: &[f64],
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let j = sol.n_atoms;
    let mut header: Vec<String> = ["time_index", "node", "t", "Y", "Z"].iter().map(|s| s.to_string()).collect();
    header.extend((0..j).map(|k| format!("U_{k}")));
    let n = sol.n_steps();
    let rows = (0..=n).flat_map(|i| {
        (0..sol.y[i].len()).map(move |k| {
            let mut row = vec![i.to_string(), k.to_string(), num(times[i]), num(sol.y[i][k])];
            if i < n {
                row.push(num(sol.z[i][k]));
                row.extend(sol.u_at(i, k).iter().map(|v| num(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), j + 1));
            }
            row
        })
    });
    write_csv(out, name, &header, rows, written)
}

#[derive(Serialize)]
struct SolveSummary {
    #[serde(rename = "Y_0")]
    y0: f64,
    #[serde(rename = "sup_abs_Y")]
    sup_abs_y: f64,
    residual: f64,
    iterations: usize,
    #[serde(rename = "N")]
    n: usize,
    heuristic: bool,
    warnings: Vec<String>,
    apriori_passed: bool,
}

struct Prepared {
    market: jumpbsde::MarketSpec<f64>,
    lattice: jumpbsde::Lattice<f64>,
    terminal: Vec<f64>,
    times: Vec<f64>,
}

fn prepare(config: &RunConfig) -> Result<Prepared, CliError> {
    let market = config.market()?;
    let lattice = config.lattice(&market)?;
    let terminal = config.terminal(&market, &lattice)?;
    let times = (0..=lattice.n_steps()).map(|i| lattice.time(i)).collect();
    Ok(Prepared { market, lattice, terminal, times })
}

fn quadratic(config: &RunConfig, p: &Prepared) -> Result<QuadraticSolution<f64>, CliError> {
    let cfg = config.cascade(&p.market)?;
    Ok(solve_quadratic(&p.lattice, &p.market, &p.terminal, &cfg)?)
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

pub fn run_solve(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let p = prepare(config)?;
    let q = quadratic(config, &p)?;
    warn(&q.trace.warnings);
    let s = q.solution.summary();
    let summary = SolveSummary {
        y0: s.y0,
        sup_abs_y: s.sup_abs_y,
        residual: q.residual,
        iterations: s.iterations,
        n: q.trace.n,
        heuristic: q.trace.heuristic,
        warnings: q.trace.warnings.clone(),
        apriori_passed: q.apriori_original.passed() && q.apriori_shifted.passed(),
    };
    let mut written = Vec::new();
    if config.wants(Format::Json) {
        write_json(out, "summary.json", &summary, &mut written)?;
    }
    if config.wants(Format::Csv) {
        solution_csv(out, "solution.csv", &q.solution, &p.times, &mut written)?;
    }
    Ok(written)
}

pub fn run_cascade_trace(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let p = prepare(config)?;
    let cfg = config.cascade(&p.market)?;
    let outcome = run_cascade(&p.lattice, &p.market, &p.terminal, &cfg)?;
    let trace = &outcome.trace;
    warn(&trace.warnings);
    let mut written = Vec::new();
    if config.wants(Format::Json) {
        write_json(out, "cascade_trace.json", trace, &mut written)?;
    }
    if config.wants(Format::Csv) {
        let header: Vec<String> = ["stage", "level", "Y_0", "sup_abs_Y", "stage_bound", "bound_ok", "residual", "z_gap", "u_gap"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = trace.stages.iter().flat_map(|st| {
            st.levels.iter().map(move |lv| {
                vec![
                    st.stage.to_string(),
                    lv.level.clone(),
                    num(lv.y0),
                    num(lv.sup_abs_y),
                    num(trace.stage_bound),
                    lv.bound_ok.to_string(),
                    num(lv.residual),
                    num(lv.z_gap),
                    num(lv.u_gap),
                ]
            })
        });
        write_csv(out, "cascade_stages.csv", &header, rows, &mut written)?;
    }
    Ok(written)
}

#[derive(Serialize)]
struct Validation {
    passed: bool,
    failures: Vec<String>,
    residual: f64,
    picard_tol: f64,
    stage_bounds_ok: bool,
    telescoping: f64,
    monotone_in_level: Option<f64>,
    apriori_shifted: AprioriReport,
    apriori_original: AprioriReport,
}

pub fn run_validate(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let p = prepare(config)?;
    let q = quadratic(config, &p)?;
    warn(&q.trace.warnings);
    let tol = config.solver.picard_tol;
    let telescoping = q.trace.worst_telescoping();
    let monotone = q.trace.stages.first().and_then(|s| s.monotone_gap);
    let mut failures = Vec::new();
    if !q.trace.bounds_ok() {
        failures.push("stage sup bound".to_string());
    }
    if telescoping > 1e-10 {
        failures.push("telescoping identity".to_string());
    }
    if monotone.is_some_and(|g| g < -1e-12) {
        failures.push("monotonicity in truncation level".to_string());
    }
    if q.residual.is_nan() || q.residual > tol {
        failures.push("transported residual".to_string());
    }
    for (family, report) in [("shifted", &q.apriori_shifted), ("original", &q.apriori_original)] {
        failures.extend(report.checks.iter().filter(|c| !c.passed).map(|c| format!("{family}: {}", c.name)));
    }
    let report = Validation {
        passed: failures.is_empty(),
        failures: failures.clone(),
        residual: q.residual,
        picard_tol: tol,
        stage_bounds_ok: q.trace.bounds_ok(),
        telescoping,
        monotone_in_level: monotone,
        apriori_shifted: q.apriori_shifted.clone(),
        apriori_original: q.apriori_original.clone(),
    };
    let mut written = Vec::new();
    write_json(out, "validation.json", &report, &mut written)?;
    if failures.is_empty() {
        Ok(written)
    } else {
        Err(CliError::Validation(failures.join(", ")))
    }
}

pub fn run_optimize(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mc = config.mc.as_ref().ok_or_else(|| CliError::Config("mc: required by optimize".into()))?;
    let p = prepare(config)?;
    let q = quadratic(config, &p)?;
    warn(&q.trace.warnings);
    let x = config.initial_wealth;
    let strategies = random_strategies(&p.lattice, &p.market.constraint, mc.strategies, mc.seed);
    let report = verify_optimality(&p.market, &p.lattice, &q.solution, x, &strategies, mc.paths, mc.seed)?;
    let pi: StrategyTable<f64> = optimal_strategy(&q.solution, &p.market, &p.lattice)?;
    let mut written = Vec::new();
    if config.wants(Format::Json) {
        write_json(out, "optimality.json", &report, &mut written)?;
    }
    if config.wants(Format::Csv) {
        let header: Vec<String> = ["time_index", "node", "t", "pi"].iter().map(|s| s.to_string()).collect();
        let times = &p.times;
        let rows = pi
            .values
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(k, v)| vec![i.to_string(), k.to_string(), num(times[i]), num(*v)]));
        write_csv(out, "strategy.csv", &header, rows, &mut written)?;
    }
    Ok(written)
}
