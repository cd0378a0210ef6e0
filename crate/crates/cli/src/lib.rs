//! Command-line front end for the stochastic barrier-function toolkit.
//!
//! Exit codes: `0` success, `1` usage or I/O error, `2` empirical exit
//! frequency inconsistent with the theoretical bound, `3` tainted trials
//! under `--strict`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stochcbf_core::bounds::{bound_grid, scenario_bound, write_grid_csv, BoundReport, GridAxis};
use stochcbf_core::filter::{FallbackPolicy, SolverOptions};
use stochcbf_core::presets::{preset, PresetId};
use stochcbf_core::scenario::Scenario;
use stochcbf_core::sim::{run_batch, write_batch_csv, BatchSummary, SimOptions};
use stochcbf_core::verify::{run_verification, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_BOUND_VIOLATED: i32 = 2;
pub const EXIT_TAINTED: i32 = 3;

/// Caps worker threads for Monte-Carlo batches and grids.
pub const THREADS_ENV: &str = "STOCHCBF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "stochcbf", version, about = "Safety filters and exit-probability bounds for stochastic systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte-Carlo closed-loop trials; writes summary.json and trajectories.csv.
    Run(RunArgs),
    /// Theoretical bound of one scenario, or of every preset.
    Bounds(BoundsArgs),
    /// Bound heatmap over a 1D or 2D state grid, as CSV.
    Grid(GridArgs),
    /// Invariant self-checks.
    Verify(VerifyArgs),
    /// Preset ids with their figure references.
    ListScenarios,
    /// Writes a preset as a scenario JSON document.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fallback {
    Error,
    MaxResidual,
}

impl From<Fallback> for FallbackPolicy {
    fn from(f: Fallback) -> Self {
        match f {
            Fallback::Error => FallbackPolicy::Error,
            Fallback::MaxResidual => FallbackPolicy::MaxResidual,
        }
    }
}

#[derive(Debug, Args)]
pub struct Source {
    /// Preset id (see `list-scenarios`).
    #[arg(long, conflicts_with = "scenario")]
    pub preset: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario horizon K.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-10)]
    pub solver_tol: f64,
    /// Extra low-discrepancy starts for the multi-start solver.
    #[arg(long, default_value_t = 4)]
    pub multistart: usize,
    #[arg(long, value_enum, default_value_t = Fallback::Error)]
    pub fallback: Fallback,
}

impl SolverArgs {
    fn options(&self) -> Result<SolverOptions<f64>> {
        if self.solver_tol.is_nan() || self.solver_tol <= 0.0 {
            bail!("--solver-tol must be > 0");
        }
        Ok(SolverOptions {
            tol: self.solver_tol,
            multistart_extra: self.multistart,
            fallback: self.fallback.into(),
            ..SolverOptions::default()
        })
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Trajectories written to trajectories.csv (first N trials).
    #[arg(long, default_value_t = 1000)]
    pub max_trajectories: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Exit with code 3 when any trial used the infeasibility fallback.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub source: Source,
    /// `lo,hi,points` per state axis; defaults to a preset-specific box.
    #[arg(long = "axis", value_parser = parse_axis, allow_hyphen_values = true)]
    pub axes: Vec<GridAxis>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Reduced sample sizes.
    #[arg(long)]
    pub fast: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplies every tolerance (test hook).
    #[arg(long, default_value_t = 1.0, hide = true)]
    pub tolerance_scale: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub preset: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_axis(s: &str) -> std::result::Result<GridAxis, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("expected lo,hi,points, got `{s}`"));
    };
    let lo: f64 = lo.parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("{e}"))?;
    let n: usize = n.parse().map_err(|e| format!("{e}"))?;
    GridAxis::new(lo, hi, n).map_err(|e| e.to_string())
}

fn load(source: &Source) -> Result<Scenario<f64>> {
    let mut scenario = match (&source.preset, &source.scenario) {
        (Some(id), None) => preset(id.parse()?)?.scenario,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Scenario::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => bail!("give exactly one of --preset or --scenario"),
    };
    if let Some(k) = source.horizon {
        if k == 0 {
            bail!("--horizon must be >= 1");
        }
        scenario.horizon = k;
    }
    Ok(scenario)
}

fn write_output(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => stdout.write_all(text.as_bytes()).context("writing stdout"),
    }
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<i32> {
    if args.trials == 0 {
        bail!("--trials must be >= 1");
    }
    let scenario = load(&args.source)?;
    let opts = SimOptions {
        filter: args.solver.options()?,
        noise_enabled: true,
    };
    let run = run_batch(&scenario, &opts, args.trials, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let summary = BatchSummary::new(&scenario, args.seed, &run);
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(args.out.join("summary.json"), format!("{json}\n")).context("writing summary.json")?;
    let cap = args.max_trajectories.min(run.records.len());
    let file = fs::File::create(args.out.join("trajectories.csv")).context("creating trajectories.csv")?;
    write_batch_csv(
        &run.records[..cap],
        scenario.system.state_dim(),
        scenario.system.input_dim(),
        std::io::BufWriter::new(file),
    )?;
    let r = &run.result;
    writeln!(
        stdout,
        "{}: {} trials, {} exited, {} tainted, {} aborted, frequency {:.6}, CP95 [{:.6}, {:.6}], bound {:.6e}",
        scenario.name,
        r.n_trials,
        r.n_exited,
        r.n_tainted,
        r.n_aborted,
        r.exit_frequency,
        r.clopper_pearson_95.0,
        r.clopper_pearson_95.1,
        r.theoretical_bound
    )?;
    for (i, e) in &run.aborted {
        writeln!(stdout, "trial {i} aborted: {e}")?;
    }
    if r.n_tainted > 0 {
        writeln!(stdout, "warning: {} tainted trials are not covered by the bound", r.n_tainted)?;
    }
    Ok(if !r.bound_satisfied {
        EXIT_BOUND_VIOLATED
    } else if args.strict && r.n_tainted > 0 {
        EXIT_TAINTED
    } else {
        EXIT_OK
    })
}

fn bounds_csv(reports: &[(String, BoundReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "family", "horizon", "raw", "bound", "per_barrier_terms"])?;
    for (name, r) in reports {
        let terms = r.per_barrier_terms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
        w.write_record([
            name.clone(),
            r.family.clone(),
            r.horizon.to_string(),
            r.raw.to_string(),
            r.bound.to_string(),
            terms,
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn cmd_bounds(args: &BoundsArgs, stdout: &mut dyn Write) -> Result<i32> {
    let reports = if args.source.preset.is_none() && args.source.scenario.is_none() {
        PresetId::ALL
            .iter()
            .map(|id| {
                let mut s = preset(*id)?.scenario;
                if let Some(k) = args.source.horizon {
                    s.horizon = k;
                }
                Ok((s.name.clone(), scenario_bound(&s)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let s = load(&args.source)?;
        vec![(s.name.clone(), scenario_bound(&s)?)]
    };
    let text = match args.format {
        Format::Json => {
            let map: serde_json::Map<String, serde_json::Value> = reports
                .iter()
                .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
                .collect::<Result<_>>()?;
            format!("{}\n", serde_json::to_string_pretty(&map)?)
        }
        Format::Csv => bounds_csv(&reports)?,
    };
    stdout.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

fn default_axes(scenario: &Scenario<f64>) -> Vec<GridAxis> {
    match scenario.system.state_dim() {
        1 => vec![GridAxis { lo: 0.0, hi: 3.0, points: 301 }],
        _ if scenario.name.starts_with("pendulum") => vec![GridAxis { lo: -0.6, hi: 0.6, points: 121 }; 2],
        _ => vec![
            GridAxis { lo: -3.0, hi: 3.0, points: 121 },
            GridAxis { lo: -1.5, hi: 1.5, points: 61 },
        ],
    }
}

pub fn cmd_grid(args: &GridArgs, stdout: &mut dyn Write) -> Result<i32> {
    let scenario = load(&args.source)?;
    let axes = if args.axes.is_empty() { default_axes(&scenario) } else { args.axes.clone() };
    let grid = bound_grid(&scenario, &axes, scenario.horizon)?;
    let mut buf = Vec::new();
    write_grid_csv(&grid, &mut buf)?;
    write_output(args.out.as_deref(), &String::from_utf8(buf)?, stdout)?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut opts = VerifyOptions {
        fast: args.fast,
        tolerance_scale: args.tolerance_scale,
        ..VerifyOptions::default()
    };
    if args.seed != 0 {
        opts.seed = args.seed;
    }
    let outcomes = run_verification(&opts)?;
    let mut failed = 0;
    for c in &outcomes {
        writeln!(stdout, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        failed += usize::from(!c.passed);
    }
    writeln!(stdout, "{} checks, {} failed", outcomes.len(), failed)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_USAGE })
}

pub fn cmd_list(stdout: &mut dyn Write) -> Result<i32> {
    for id in PresetId::ALL {
        let p = preset(id)?;
        let reference = p.reference_bound.map(|b| format!("{b}")).unwrap_or_else(|| "-".into());
        writeln!(stdout, "{:<22} K={:<4} reference={:<7} {}", id, p.scenario.horizon, reference, p.figure_ref)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_export(args: &ExportArgs, stdout: &mut dyn Write) -> Result<i32> {
    let s = preset(args.preset.parse()?)?.scenario;
    write_output(args.out.as_deref(), &format!("{}\n", s.to_json()?), stdout)?;
    Ok(EXIT_OK)
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if the global pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    configure_threads();
    match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Bounds(a) => cmd_bounds(a, stdout),
        Command::Grid(a) => cmd_grid(a, stdout),
        Command::Verify(a) => cmd_verify(a, stdout),
        Command::ListScenarios => cmd_list(stdout),
        Command::Export(a) => cmd_export(a, stdout),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_cli<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_USAGE
        }
    }
}
