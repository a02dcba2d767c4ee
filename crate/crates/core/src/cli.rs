//! Command-line front end: measure files in, CSV fields and JSON reports out.
//!
//! Exit codes: 0 success, 2 bad configuration, 3 numerical failure,
//! 4 a verification check failed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::condensate::{asymptotic_levels, condensate_measure, q_condensate_via_y, CondensateSpec};
use crate::darboux::{darboux_transform, DarbouxOptions};
use crate::dyson::{kay_moses, DysonSolver};
use crate::error::Error;
use crate::field::{Grid, Scheme, SolutionField};
use crate::jost::SeedPotential;
use crate::measures::SpectralMeasure;
use crate::verify::{bounds_check, count_bound_states, kdv_residual, BOUND_SLACK};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Environment variable capping the worker threads (0 = all cores).
pub const THREADS_VAR: &str = "SOLITON_FORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "soliton-forge", version, about = "Reflectionless KdV fields from spectral measures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dyson field of a measure.
    Gas(GasArgs),
    /// N-soliton field of a purely atomic measure.
    Solitons(GasArgs),
    /// Step-like condensate field.
    Condensate(CondensateArgs),
    /// Dress a seed potential by a measure.
    Darboux(DarbouxArgs),
    /// Run verification checks and write a JSON report.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    pub xmin: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub xmax: f64,
    #[arg(long, default_value_t = 401)]
    pub nx: usize,
    /// One or more times, comma separated.
    #[arg(long = "t", value_delimiter = ',', default_value = "0", allow_negative_numbers = true)]
    pub t: Vec<f64>,
    /// Quadrature nodes per density piece.
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Trace)]
    pub scheme: SchemeArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Fd,
    Trace,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Fd => Scheme::Fd,
            SchemeArg::Trace => Scheme::Trace,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GasArgs {
    /// Measure JSON file.
    #[arg(long)]
    pub measure: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Route {
    Dyson,
    Y,
}

#[derive(Debug, Clone, Args)]
pub struct CondensateArgs {
    /// Spectral edge.
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
    #[arg(long, value_enum, default_value_t = Route::Dyson)]
    pub route: Route,
    /// Also fit the plateau levels and write them here as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DarbouxArgs {
    /// Measure σ added to the data.
    #[arg(long)]
    pub measure: PathBuf,
    /// Reflectionless seed given by its measure; zero seed when absent.
    #[arg(long)]
    pub seed: Option<PathBuf>,
    /// RK4 step bound for the Jost solutions.
    #[arg(long, default_value_t = crate::jost::DEFAULT_STEP)]
    pub step: f64,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub measure: PathBuf,
    /// Checks to run, comma separated; all applicable ones when absent.
    #[arg(long, value_delimiter = ',')]
    pub checks: Vec<String>,
    /// Tolerance override, `name=value`; repeatable.
    #[arg(long = "tol")]
    pub tol: Vec<String>,
    /// Step Δx = Δt of the residual stencils.
    #[arg(long, default_value_t = 1e-2)]
    pub residual_step: f64,
    #[command(flatten)]
    pub grid: GridArgs,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::CarlesonViolated(_)
        | Error::DegenerateDiscretization { .. }
        | Error::DataPositivityViolated(_) => EXIT_CONFIG,
        Error::NotPositiveDefinite { .. }
        | Error::SingularDeterminant { .. }
        | Error::IntegrationDiverged { .. }
        | Error::ExponentOverflow { .. }
        | Error::InconclusiveAsymptotics(_)
        | Error::BoundViolated { .. }
        | Error::TailNotNegligible { .. }
        | Error::Inconclusive(_) => EXIT_NUMERIC,
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(&cli.command)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("{THREADS_VAR} must be a non-negative integer, got {v:?}")))?;
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Outcome {
    match cmd {
        Command::Gas(a) => cmd_gas(a, false),
        Command::Solitons(a) => cmd_gas(a, true),
        Command::Condensate(a) => cmd_condensate(a),
        Command::Darboux(a) => cmd_darboux(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn read_measure(path: &Path) -> std::result::Result<SpectralMeasure, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    SpectralMeasure::from_json(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn grid_of(g: &GridArgs) -> std::result::Result<Grid, Failure> {
    if g.n == 0 {
        return Err(Failure::config("--n must be at least 1"));
    }
    if g.t.is_empty() || g.t.iter().any(|t| !t.is_finite()) {
        return Err(Failure::config("--t needs finite times"));
    }
    if g.t.len() > 1 && g.out.is_none() {
        return Err(Failure::config("--out is required with several times"));
    }
    Ok(Grid::new(g.xmin, g.xmax, g.nx)?)
}

/// `out` with `_t<value>` inserted before the extension.
pub fn time_suffixed(out: &Path, t: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_t{t}.{}", ext.to_string_lossy()),
        None => format!("{stem}_t{t}"),
    };
    out.with_file_name(name)
}

fn emit(text: &str, out: Option<&Path>) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::config(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .map_err(|e| Failure::config(format!("cannot write to stdout: {e}")))
        }
    }
}

fn write_fields<F>(g: &GridArgs, mut produce: F) -> Outcome
where
    F: FnMut(f64) -> std::result::Result<SolutionField, Failure>,
{
    for &t in &g.t {
        let field = produce(t)?;
        for w in &field.meta.warnings {
            eprintln!("warning (t={t}): {w}");
        }
        let path = match (&g.out, g.t.len()) {
            (Some(p), 1) => Some(p.clone()),
            (Some(p), _) => Some(time_suffixed(p, t)),
            (None, _) => None,
        };
        emit(&field.to_csv(), path.as_deref())?;
        if field.is_singular() {
            return Err(Failure {
                code: EXIT_NUMERIC,
                message: format!("q has a pole at t = {t}: tau vanishes near {}", pole_sites(&field)),
            });
        }
    }
    Ok(())
}

/// Centres of the runs of singular samples, e.g. `x = 1.000`.
fn pole_sites(field: &SolutionField) -> String {
    let mut sites = Vec::new();
    let mut i = 0;
    while i < field.len() {
        if field.singular[i] {
            let start = i;
            while i < field.len() && field.singular[i] {
                i += 1;
            }
            sites.push(format!("x = {:.3}", 0.5 * (field.x[start] + field.x[i - 1])));
        } else {
            i += 1;
        }
    }
    sites.join(", ")
}

fn cmd_gas(a: &GasArgs, atomic_only: bool) -> Outcome {
    let m = read_measure(&a.measure)?;
    let grid = grid_of(&a.grid)?;
    let scheme = a.grid.scheme.into();
    if atomic_only {
        if !m.densities.is_empty() {
            return Err(Failure::config(format!(
                "{}: solitons needs a purely atomic measure, found {} density pieces",
                a.measure.display(),
                m.densities.len()
            )));
        }
        return write_fields(&a.grid, |t| Ok(kay_moses(&m.atoms, &grid, t, scheme)?));
    }
    let solver = DysonSolver::new(&m, a.grid.n)?;
    write_fields(&a.grid, |t| Ok(solver.field(&grid, t, scheme)?))
}

#[derive(Debug, Serialize)]
struct LevelsReport {
    h: f64,
    t: f64,
    left_level: f64,
    right_level: f64,
    left_slope: f64,
    right_slope: f64,
}

fn cmd_condensate(a: &CondensateArgs) -> Outcome {
    let grid = grid_of(&a.grid)?;
    let m = condensate_measure(a.h)?;
    let solver = DysonSolver::new(&m, a.grid.n)?;
    let scheme = a.grid.scheme.into();
    let mut reports = Vec::new();
    write_fields(&a.grid, |t| {
        let field = match a.route {
            Route::Dyson => solver.field(&grid, t, scheme)?,
            Route::Y => q_condensate_via_y(&CondensateSpec::new(a.h, a.grid.n, t)?, &grid)?,
        };
        if a.report.is_some() {
            let l = asymptotic_levels(&field)?;
            eprintln!("t={t}: left level {:.6}, right level {:.3e}", l.left, l.right);
            reports.push(LevelsReport {
                h: a.h,
                t,
                left_level: l.left,
                right_level: l.right,
                left_slope: l.left_slope,
                right_slope: l.right_slope,
            });
        }
        Ok(field)
    })?;
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&reports).expect("report serializes");
        emit(&(json + "\n"), Some(p))?;
    }
    Ok(())
}

fn cmd_darboux(a: &DarbouxArgs) -> Outcome {
    let sigma = read_measure(&a.measure)?;
    let seed = match &a.seed {
        Some(p) => SeedPotential::from_measure(&read_measure(p)?, a.grid.n)?,
        None => SeedPotential::zero(),
    };
    let grid = grid_of(&a.grid)?;
    let options = DarbouxOptions {
        n: a.grid.n,
        scheme: a.grid.scheme.into(),
        step: a.step,
        ..DarbouxOptions::default()
    };
    write_fields(&a.grid, |t| Ok(darboux_transform(&seed, &sigma, &grid, t, options)?.field))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    checks: Vec<Check>,
    config_echo: ConfigEcho,
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    command: &'static str,
    measure: String,
    grid: GridArgs,
    checks: Vec<String>,
    tolerances: Vec<(String, f64)>,
    residual_step: f64,
}

const CHECKS: [(&str, f64); 7] = [
    ("kdv_residual", 1e-3),
    ("residual_order", 1.0),
    ("scheme_agreement", 1e-6),
    ("bounds", BOUND_SLACK),
    ("darboux_reduction", 1e-6),
    ("kay_moses", 1e-12),
    ("bound_states", 1e-3),
];

fn applicable(name: &str, m: &SpectralMeasure) -> bool {
    let atomic = m.densities.is_empty() && !m.atoms.is_empty();
    match name {
        "bounds" => m.is_nonnegative() && !m.is_empty(),
        "darboux_reduction" => m.is_nonnegative(),
        "kay_moses" => atomic,
        "bound_states" => atomic && m.is_nonnegative(),
        _ => true,
    }
}

fn parse_tolerances(raw: &[String]) -> std::result::Result<Vec<(String, f64)>, Failure> {
    raw.iter()
        .map(|s| {
            let (name, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("--tol expects name=value, got {s:?}")))?;
            if !CHECKS.iter().any(|(c, _)| *c == name) {
                return Err(Failure::config(format!("--tol: unknown check {name:?}")));
            }
            let v: f64 = v
                .parse()
                .map_err(|_| Failure::config(format!("--tol {name}: {v:?} is not a number")))?;
            if !(v >= 0.0) {
                return Err(Failure::config(format!("--tol {name}: tolerance must be non-negative")));
            }
            Ok((name.to_string(), v))
        })
        .collect()
}

fn run_check(name: &str, m: &SpectralMeasure, a: &VerifyArgs, grid: &Grid, t: f64, tol: f64) -> std::result::Result<Check, Failure> {
    let solver = DysonSolver::new(m, a.grid.n)?;
    let window = (a.grid.xmin, a.grid.xmax);
    let step = a.residual_step;
    let (value, pass) = match name {
        "kdv_residual" => {
            let r = kdv_residual(&solver, window, t, step, step, 41)?;
            (r.sup, r.sup <= tol)
        }
        "residual_order" => {
            let r = kdv_residual(&solver, window, t, step, step, 41)?;
            match r.order {
                Some(o) => ((o - 4.0).abs(), (o - 4.0).abs() <= tol),
                None => (0.0, true),
            }
        }
        "scheme_agreement" => {
            let trace = solver.field(grid, t, Scheme::Trace)?;
            let d = solver.field(grid, t, Scheme::Fd)?.sup_distance(&trace)?;
            let dx = grid.spacing();
            let q4 = trace
                .q
                .windows(5)
                .map(|w| ((w[0] - 4.0 * w[1] + 6.0 * w[2] - 4.0 * w[3] + w[4]) / dx.powi(4)).abs())
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max);
            let tol = tol.max(10.0 * dx * dx * q4);
            return Ok(Check {
                name: name.to_string(),
                value: d,
                tolerance: tol,
                pass: d <= tol,
            });
        }
        "bounds" => {
            let h = m.support_bounds().map(|(_, h)| h).unwrap_or(0.0);
            let field = solver.field(grid, t, a.grid.scheme.into())?;
            let lower = -2.0 * h * h;
            let excess = field
                .q
                .iter()
                .map(|&q| q.max(lower - q))
                .fold(f64::NEG_INFINITY, f64::max);
            match bounds_check(&field, h) {
                Ok(_) => (excess, excess <= tol),
                Err(Error::BoundViolated { .. }) => (excess, false),
                Err(e) => return Err(e.into()),
            }
        }
        "darboux_reduction" => {
            let options = DarbouxOptions {
                n: a.grid.n,
                scheme: a.grid.scheme.into(),
                ..DarbouxOptions::default()
            };
            let dressed = darboux_transform(&SeedPotential::zero(), m, grid, t, options)?.field;
            let reference = if m.densities.is_empty() {
                kay_moses(&m.atoms, grid, t, a.grid.scheme.into())?
            } else {
                solver.field(grid, t, a.grid.scheme.into())?
            };
            let d = dressed.sup_distance(&reference)?;
            (d, d <= tol)
        }
        "kay_moses" => {
            let scheme = a.grid.scheme.into();
            let d = solver
                .field(grid, t, scheme)?
                .sup_distance(&kay_moses(&m.atoms, grid, t, scheme)?)?;
            (d, d <= tol)
        }
        "bound_states" => {
            let mut kappas: Vec<f64> = m.atoms.iter().filter(|a| a.weight > 0.0).map(|a| a.kappa).collect();
            kappas.sort_by(|a, b| b.total_cmp(a));
            kappas.dedup();
            let kmin = kappas.last().copied().unwrap_or(1.0);
            let span = 40.0 / kmin.max(0.1);
            let centre = 0.5 * (a.grid.xmin + a.grid.xmax);
            let c = count_bound_states(&solver, t, (centre - span, centre + span), -0.25 * kmin * kmin, 1e-2)?;
            let err = if c.count == kappas.len() {
                c.eigenvalues()
                    .iter()
                    .zip(&kappas)
                    .map(|(e, k)| (e + k * k).abs())
                    .fold(0.0, f64::max)
            } else {
                f64::INFINITY
            };
            (err, err <= tol)
        }
        other => return Err(Failure::config(format!("unknown check {other:?}"))),
    };
    Ok(Check {
        name: name.to_string(),
        value,
        tolerance: tol,
        pass,
    })
}

fn cmd_verify(a: &VerifyArgs) -> Outcome {
    let m = read_measure(&a.measure)?;
    let grid = grid_of(&a.grid)?;
    let tolerances = parse_tolerances(&a.tol)?;
    if !(a.residual_step > 0.0) {
        return Err(Failure::config("--residual-step must be positive"));
    }
    let names: Vec<String> = if a.checks.is_empty() {
        CHECKS
            .iter()
            .filter(|(c, _)| applicable(c, &m))
            .map(|(c, _)| c.to_string())
            .collect()
    } else {
        for c in &a.checks {
            if !CHECKS.iter().any(|(k, _)| k == c) {
                return Err(Failure::config(format!("--checks: unknown check {c:?}")));
            }
            if !applicable(c, &m) {
                return Err(Failure::config(format!("--checks: {c} does not apply to measure {}", m.name)));
            }
        }
        a.checks.clone()
    };
    let mut checks = Vec::new();
    for &t in &a.grid.t {
        for name in &names {
            let default = CHECKS.iter().find(|(c, _)| c == name).map(|(_, v)| *v).unwrap_or(0.0);
            let tol = tolerances
                .iter()
                .rev()
                .find(|(c, _)| c == name)
                .map(|(_, v)| *v)
                .unwrap_or(default);
            let mut check = run_check(name, &m, a, &grid, t, tol)?;
            if a.grid.t.len() > 1 {
                check.name = format!("{name}@t={t}");
            }
            checks.push(check);
        }
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    let report = VerifyReport {
        checks,
        config_echo: ConfigEcho {
            command: "verify",
            measure: a.measure.display().to_string(),
            grid: a.grid.clone(),
            checks: names,
            tolerances,
            residual_step: a.residual_step,
        },
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&(json + "\n"), a.grid.out.as_deref())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("checks failed: {}", failed.join(", ")),
        })
    }
}
