//! Subcommands behind the `ddr` binary. Each `cmd_*` takes a validated
//! config and an output directory and returns what it wrote, so tests can
//! drive them without spawning a process.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ddr_core::coordinator::{simulate_day, CoordinatorError, DayResult};
use ddr_core::fleet::{write_fleet_csv, FleetError, PevProfile};
use ddr_core::market::MarketError;
use ddr_core::report::{emit, emit_day, run_cases, CaseId, CaseSet, ReportError};
use ddr_core::scenario::{build_scenario, sample_scenario_fleet, ScenarioConfig, ScenarioError};
use thiserror::Error;

pub const FLEET_FILE: &str = "fleet.csv";

#[derive(Debug, Parser)]
#[command(name = "ddr", version, about = "Day-ahead shaping and real-time altering for V2G fleets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample a fleet and write it as CSV.
    GenFleet,
    /// Simulate one day with shaping, altering and the cap as configured.
    Simulate,
    /// Run the four-case cost comparison.
    CompareCases,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Scenario TOML; built-in reference scenario when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. Repeat to run several independent scenarios.
    #[arg(long, global = true)]
    pub seed: Vec<u64>,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Scenarios to run at once when several seeds are given.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<FleetError> for CliError {
    fn from(e: FleetError) -> Self {
        match e {
            FleetError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CoordinatorError> for CliError {
    fn from(e: CoordinatorError) -> Self {
        match e {
            CoordinatorError::Infeasible(_) => CliError::Infeasible(e.to_string()),
            CoordinatorError::Fleet(f) => f.into(),
            CoordinatorError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config { .. } => CliError::Config(e.to_string()),
            ScenarioError::Io { .. } => CliError::Io(e.to_string()),
            ScenarioError::Fleet(f) => f.into(),
            ScenarioError::Market(m) => m.into(),
            ScenarioError::Coordinator(c) => c.into(),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::Io(e.to_string()),
            ReportError::Empty(_) => CliError::Config(e.to_string()),
        }
    }
}

/// Loads and validates the config, applying a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(io)?.next().is_some();
        if occupied && !force {
            return Err(CliError::Io(format!(
                "{}: output directory is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FleetSummary {
    pub path: PathBuf,
    pub n_users: usize,
    pub v2g_users: usize,
    pub window_min: usize,
    pub window_mean: f64,
    pub window_max: usize,
    pub total_energy_kwh: f64,
}

impl FleetSummary {
    fn new(path: PathBuf, fleet: &[PevProfile], windows: &[usize]) -> Self {
        FleetSummary {
            path,
            n_users: fleet.len(),
            v2g_users: fleet.iter().filter(|p| p.v2g).count(),
            window_min: windows.iter().copied().min().unwrap_or(0),
            window_mean: windows.iter().sum::<usize>() as f64 / windows.len().max(1) as f64,
            window_max: windows.iter().copied().max().unwrap_or(0),
            total_energy_kwh: fleet.iter().map(|p| p.required_energy_kwh).sum(),
        }
    }
}

impl fmt::Display for FleetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {}", self.path.display())?;
        writeln!(f, "users: {} ({} with V2G)", self.n_users, self.v2g_users)?;
        writeln!(
            f,
            "window length (h): min {} mean {:.2} max {}",
            self.window_min, self.window_mean, self.window_max
        )?;
        write!(f, "total energy demand: {:.3} kWh", self.total_energy_kwh)
    }
}

pub fn cmd_gen_fleet(config: &ScenarioConfig, out: &Path, force: bool) -> Result<FleetSummary, CliError> {
    let fleet = sample_scenario_fleet(config)?;
    let windows = fleet
        .iter()
        .map(|p| p.window(config.horizon).map(|w| w.len()))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out_dir(out, force)?;
    let path = out.join(FLEET_FILE);
    let mut buf = Vec::new();
    write_fleet_csv(&mut buf, &fleet)?;
    fs::write(&path, buf).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(FleetSummary::new(path, &fleet, &windows))
}

#[derive(Clone, Debug)]
pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
    pub day: DayResult,
}

impl fmt::Display for SimulateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let day = &self.day;
        writeln!(f, "day-ahead sweeps: {}", day.da_sweeps.len())?;
        if let Some(last) = day.da_sweeps.last() {
            writeln!(f, "final sweep mse: {:.3e} kWh^2", last.mse)?;
        }
        writeln!(f, "triggered slots: {:?}", day.triggered_slots())?;
        writeln!(f, "flagged users: {}", day.flagged.len())?;
        writeln!(
            f,
            "cost: {:.2} USD (day-ahead {:.2}, real-time {:.2})",
            day.cost.total, day.cost.day_ahead, day.cost.real_time
        )?;
        write!(f, "wrote {} files", self.files.len())
    }
}

pub fn cmd_simulate(config: &ScenarioConfig, out: &Path, force: bool) -> Result<SimulateSummary, CliError> {
    let scenario = build_scenario(config)?;
    let day = simulate_day(
        &scenario.participants,
        &scenario.market,
        &scenario.day_config(),
        config.horizon,
    )?;
    prepare_out_dir(out, force)?;
    let files = emit_day(&day, &scenario.run_info(), out)?;
    Ok(SimulateSummary { files, day })
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub files: Vec<PathBuf>,
    pub cases: CaseSet,
}

impl fmt::Display for CompareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for case in CaseId::ALL {
            let c = self.cases.get(case);
            writeln!(
                f,
                "case {} {:<28} {:>12.2} USD  peak {:.1} kWh at slot {}",
                case.number(),
                case.label(),
                c.cost.total,
                c.peak_kwh,
                c.peak_slot
            )?;
        }
        for d in &self.cases.deltas {
            writeln!(f, "case {} -> {}: saves {:.2} USD", d.from.number(), d.to.number(), d.saving_usd)?;
        }
        write!(f, "wrote {} files", self.files.len())
    }
}

pub fn cmd_compare_cases(config: &ScenarioConfig, out: &Path, force: bool) -> Result<CompareSummary, CliError> {
    let scenario = build_scenario(config)?;
    let cases = run_cases(
        &scenario.participants,
        &scenario.market,
        &scenario.case_config(),
        config.horizon,
    )?;
    prepare_out_dir(out, force)?;
    let files = emit(&cases, &scenario.run_info(), out)?;
    Ok(CompareSummary { files, cases })
}

fn run_one(command: Command, config: &ScenarioConfig, out: &Path, force: bool) -> Result<String, CliError> {
    Ok(match command {
        Command::GenFleet => cmd_gen_fleet(config, out, force)?.to_string(),
        Command::Simulate => cmd_simulate(config, out, force)?.to_string(),
        Command::CompareCases => cmd_compare_cases(config, out, force)?.to_string(),
    })
}

/// Runs a parsed command line and returns the text to print. With several
/// seeds each scenario writes to `<out>/seed-<s>`; up to `jobs` run at once.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let args = &cli.run;
    if args.jobs == 0 {
        return Err(CliError::Config("`--jobs` must be at least 1".into()));
    }
    let base = load_config(args.config.as_deref(), None)?;
    let out = args
        .out
        .clone()
        .or_else(|| base.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output_dir`".into()))?;

    if args.seed.len() <= 1 {
        let cfg = load_config(args.config.as_deref(), args.seed.first().copied())?;
        return run_one(cli.command, &cfg, &out, args.force);
    }

    let jobs: Vec<(u64, ScenarioConfig, PathBuf)> = args
        .seed
        .iter()
        .map(|&s| {
            let cfg = load_config(args.config.as_deref(), Some(s))?;
            Ok((s, cfg, out.join(format!("seed-{s}"))))
        })
        .collect::<Result<_, CliError>>()?;
    let mut reports = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(args.jobs) {
        let results: Vec<Result<String, CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(_, cfg, dir)| scope.spawn(move || run_one(cli.command, cfg, dir, args.force)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
        });
        for ((seed, _, _), r) in chunk.iter().zip(results) {
            reports.push(format!("== seed {seed}\n{}", r?));
        }
    }
    Ok(reports.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Infeasible(String::new()).exit_code(), 3);
        assert_eq!(CliError::Io(String::new()).exit_code(), 4);
    }

    #[test]
    fn invalid_field_maps_to_config_error() {
        let mut cfg = ScenarioConfig::default();
        cfg.cap.kappa = Some(0.5);
        let err = CliError::from(cfg.validate().unwrap_err());
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("cap.kappa"), "{err}");
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "").unwrap();
        assert_eq!(prepare_out_dir(dir.path(), false).unwrap_err().exit_code(), 4);
        prepare_out_dir(dir.path(), true).unwrap();
    }

    fn small(n: usize, spike: bool, kappa: Option<f64>) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.fleet.n_users = n;
        cfg.cap.kappa = kappa;
        if !spike {
            if let ddr_core::scenario::MarketSource::Synthetic { prices } = &mut cfg.market {
                prices.spike = None;
            }
        }
        cfg
    }

    #[test]
    fn gen_fleet_writes_one_row_per_user() {
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_gen_fleet(&small(37, true, None), dir.path(), false).unwrap();
        let text = fs::read_to_string(&summary.path).unwrap();
        assert_eq!(text.lines().count(), 1 + 37);
        assert_eq!(summary.n_users, 37);
        assert!(summary.window_min >= 1 && summary.window_max <= 24);
    }

    #[test]
    fn gen_fleet_refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(5, true, None);
        cmd_gen_fleet(&cfg, dir.path(), false).unwrap();
        assert_eq!(cmd_gen_fleet(&cfg, dir.path(), false).unwrap_err().exit_code(), 4);
        cmd_gen_fleet(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn same_seed_same_fleet_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(50, true, None);
        let a = cmd_gen_fleet(&cfg, &dir.path().join("a"), false).unwrap();
        let b = cmd_gen_fleet(&cfg, &dir.path().join("b"), false).unwrap();
        assert_eq!(fs::read(&a.path).unwrap(), fs::read(&b.path).unwrap());
        let other = ScenarioConfig { seed: 9, ..cfg };
        let c = cmd_gen_fleet(&other, &dir.path().join("c"), false).unwrap();
        assert_ne!(fs::read(&b.path).unwrap(), fs::read(c.path).unwrap());
    }

    #[test]
    fn spike_day_triggers_at_the_spike() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(80, true, Some(1.5));
        let spike = match &cfg.market {
            ddr_core::scenario::MarketSource::Synthetic { prices } => prices.spike.as_ref().unwrap().slots[0],
            _ => unreachable!(),
        };
        let out = cmd_simulate(&cfg, dir.path(), false).unwrap();
        assert!(out.day.triggered_slots().contains(&spike), "{:?}", out.day.triggered_slots());
        assert!(dir.path().join("summary.json").is_file());
    }

    #[test]
    fn flat_prices_never_trigger() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_simulate(&small(40, false, Some(1.5)), dir.path(), false).unwrap();
        assert!(out.day.triggered_slots().is_empty());
    }

    #[test]
    fn flat_prices_make_cases_two_and_three_equal() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_compare_cases(&small(40, false, Some(1.5)), dir.path(), false).unwrap();
        assert_eq!(out.cases.cost(CaseId::DaShaping), out.cases.cost(CaseId::ShapingAltering));
    }

    #[test]
    fn no_cap_makes_case_four_case_three() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_compare_cases(&small(40, true, None), dir.path(), false).unwrap();
        let (c3, c4) = (out.cases.get(CaseId::ShapingAltering), out.cases.get(CaseId::Ddr));
        assert_eq!(c3.aggregate, c4.aggregate);
        assert_eq!(c3.cost, c4.cost);
        let text = out.to_string();
        assert!(text.contains("case 1 -> 2"), "{text}");
    }

    #[test]
    fn several_seeds_write_separate_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("scenario.toml");
        fs::write(&config, small(12, true, Some(1.5)).to_toml()).unwrap();
        let out = dir.path().join("runs");
        let cli = Cli::try_parse_from([
            "ddr",
            "gen-fleet",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
            "--seed",
            "4",
            "--jobs",
            "2",
        ])
        .unwrap();
        let report = run(&cli).unwrap();
        assert!(report.contains("== seed 3") && report.contains("== seed 4"));
        assert!(out.join("seed-3").join(FLEET_FILE).is_file());
        assert!(out.join("seed-4").join(FLEET_FILE).is_file());
    }

    #[test]
    fn bad_config_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("bad.toml");
        fs::write(&config, "seed = 1\n[cap]\nkappa = 0.9\n").unwrap();
        let err = load_config(Some(&config), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let missing = load_config(Some(&dir.path().join("nope.toml")), None).unwrap_err();
        assert_eq!(missing.exit_code(), 4);
    }

    #[test]
    fn parses_repeated_seeds_and_global_flags() {
        let cli = Cli::try_parse_from(["ddr", "compare-cases", "--seed", "1", "--seed", "2", "--jobs", "2", "--out", "o"])
            .unwrap();
        assert_eq!(cli.command, Command::CompareCases);
        assert_eq!(cli.run.seed, vec![1, 2]);
        assert_eq!(cli.run.jobs, 2);
    }
}
