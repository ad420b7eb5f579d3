//! The four-case cost comparison and its file outputs.
//!
//! | case | DA purchase        | RT altering | cap |
//! |------|--------------------|-------------|-----|
//! | 1    | none, all at RT    | no          | no  |
//! | 2    | shaped             | no          | no  |
//! | 3    | shaped             | yes         | no  |
//! | 4    | shaped             | yes         | yes |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::coordinator::{simulate_day, AlteringSpec, CoordinatorConfig, CoordinatorError, DayConfig, DayResult, Participant};
use crate::market::{cost_breakdown, write_profile, CostBreakdown, MarketDay};
use crate::profile::{Horizon, LoadProfile};
pub use crate::profile::profile_mse;
use crate::scenario::Seeds;
use crate::subproblem::CapBound;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to emit: {0}")]
    Empty(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CaseId {
    /// Plug-and-charge, everything bought at RT.
    NoDr = 1,
    DaShaping = 2,
    ShapingAltering = 3,
    /// Shaping and altering under the aggregate cap.
    Ddr = 4,
}

impl CaseId {
    pub const ALL: [CaseId; 4] = [CaseId::NoDr, CaseId::DaShaping, CaseId::ShapingAltering, CaseId::Ddr];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            CaseId::NoDr => "no demand response",
            CaseId::DaShaping => "day-ahead shaping",
            CaseId::ShapingAltering => "shaping + real-time altering",
            CaseId::Ddr => "shaping + altering + cap",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: CaseId,
    pub cost: CostBreakdown,
    pub aggregate: LoadProfile,
    /// DA purchase the cost was settled against.
    pub da_profile: LoadProfile,
    /// 1-based.
    pub peak_slot: usize,
    pub peak_kwh: f64,
    /// Day-ahead plus real-time sweeps.
    pub sweeps_used: usize,
    /// `None` for case 1, which runs no coordination.
    pub day: Option<DayResult>,
}

impl CaseResult {
    fn new(case: CaseId, market: &MarketDay, aggregate: LoadProfile, day: Option<DayResult>) -> Self {
        let (t, v) = aggregate.peak();
        let sweeps_used = day
            .as_ref()
            .map_or(0, |d| d.da_sweeps.len() + d.alterations.iter().map(|a| a.sweeps.len()).sum::<usize>());
        CaseResult {
            case,
            cost: cost_breakdown(market, &aggregate),
            aggregate,
            da_profile: market.da_profile,
            peak_slot: t + 1,
            peak_kwh: v,
            sweeps_used,
            day,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaseDelta {
    pub from: CaseId,
    pub to: CaseId,
    /// `cost(from) − cost(to)`; positive means `to` is cheaper.
    pub saving_usd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseConfig {
    pub coordinator: CoordinatorConfig,
    pub altering: AlteringSpec,
    pub cap: Option<CapBound>,
}

/// Provenance carried into `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub seeds: Seeds,
    pub n_users: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseSet {
    pub cases: Vec<CaseResult>,
    pub deltas: Vec<CaseDelta>,
    pub cap: Option<CapBound>,
}

impl CaseSet {
    pub fn get(&self, case: CaseId) -> &CaseResult {
        self.cases.iter().find(|c| c.case == case).expect("all four cases present")
    }

    pub fn cost(&self, case: CaseId) -> f64 {
        self.get(case).cost.total
    }
}

/// Runs all four cases on the same fleet and prices. Cases 2 to 4 run on
/// separate threads; results do not depend on scheduling.
pub fn run_cases(
    participants: &[Participant],
    market: &MarketDay,
    config: &CaseConfig,
    horizon: Horizon,
) -> Result<CaseSet, CoordinatorError> {
    let day_config = |altering: bool, cap: Option<CapBound>| DayConfig {
        coordinator: config.coordinator,
        altering: altering.then_some(config.altering),
        cap,
    };
    let configs = [
        (CaseId::DaShaping, day_config(false, None)),
        (CaseId::ShapingAltering, day_config(true, None)),
        (CaseId::Ddr, day_config(true, config.cap)),
    ];
    let days: Vec<Result<DayResult, CoordinatorError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|(_, cfg)| s.spawn(move || simulate_day(participants, market, cfg, horizon)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("case thread panicked")).collect()
    });

    let mut cases = Vec::with_capacity(4);
    let mut uncoordinated = None;
    let mut rest = Vec::new();
    for ((case, _), day) in configs.iter().zip(days) {
        let day = day?;
        uncoordinated.get_or_insert(day.uncoordinated);
        rest.push(CaseResult::new(*case, market, day.realized, Some(day)));
    }
    let no_dr_market = market.with_da_profile(LoadProfile::zeros());
    cases.push(CaseResult::new(
        CaseId::NoDr,
        &no_dr_market,
        uncoordinated.expect("three coordinated cases ran"),
        None,
    ));
    cases.extend(rest);

    let pair = |from: CaseId, to: CaseId| CaseDelta {
        from,
        to,
        saving_usd: cases[from.number() - 1].cost.total - cases[to.number() - 1].cost.total,
    };
    let deltas = vec![
        pair(CaseId::NoDr, CaseId::DaShaping),
        pair(CaseId::DaShaping, CaseId::ShapingAltering),
        pair(CaseId::ShapingAltering, CaseId::Ddr),
    ];
    Ok(CaseSet {
        cases,
        deltas,
        cap: config.cap,
    })
}

pub const CASE_COSTS_FILE: &str = "case_costs.csv";
pub const MSE_TRACE_FILE: &str = "mse_trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn aggregate_file(case: CaseId) -> String {
    format!("aggregate_{}.csv", case.number())
}

fn profile_csv(p: &LoadProfile) -> String {
    let mut buf = Vec::new();
    write_profile(&mut buf, p).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

fn mse_rows(out: &mut String, case: usize, day: &DayResult) {
    for s in &day.da_sweeps {
        let _ = writeln!(out, "{case},day_ahead,,{},{}", s.sweep, s.mse);
    }
    for a in &day.alterations {
        for s in &a.sweeps {
            let _ = writeln!(out, "{case},real_time,{},{},{}", a.slot, s.sweep, s.mse);
        }
    }
}

#[derive(Serialize)]
struct CaseSummary<'a> {
    case: usize,
    label: &'a str,
    cost: CostBreakdown,
    peak_slot: usize,
    peak_kwh: f64,
    sweeps_used: usize,
    da_sweeps: usize,
    triggered_slots: Vec<usize>,
    flagged_users: usize,
}

#[derive(Serialize)]
struct CaseSetSummary<'a> {
    run: &'a RunInfo,
    cap_kwh: Option<f64>,
    cases: Vec<CaseSummary<'a>>,
    deltas: &'a [CaseDelta],
}

fn write_all(out_dir: &Path, files: Vec<(String, String)>) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Renders every output in memory, then writes them. Nothing is written when
/// the set is incomplete.
pub fn emit(set: &CaseSet, run: &RunInfo, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    for case in CaseId::ALL {
        if !set.cases.iter().any(|c| c.case == case) {
            return Err(ReportError::Empty(format!("case {} missing", case.number())));
        }
    }
    if set.cases.iter().any(|c| !c.aggregate.is_finite() || !c.cost.total.is_finite()) {
        return Err(ReportError::Empty("non-finite case result".into()));
    }
    let mut files = Vec::new();

    let mut costs = String::from("case,cost_usd,peak_kwh,peak_slot\n");
    for c in &set.cases {
        let _ = writeln!(costs, "{},{:.6},{:.6},{}", c.case.number(), c.cost.total, c.peak_kwh, c.peak_slot);
    }
    files.push((CASE_COSTS_FILE.to_string(), costs));
    for c in &set.cases {
        files.push((aggregate_file(c.case), profile_csv(&c.aggregate)));
    }
    let mut trace = String::from("case,phase,slot,sweep,mse\n");
    for c in &set.cases {
        if let Some(day) = &c.day {
            mse_rows(&mut trace, c.case.number(), day);
        }
    }
    files.push((MSE_TRACE_FILE.to_string(), trace));

    let summary = CaseSetSummary {
        run,
        cap_kwh: set.cap.map(|c| c.level()),
        cases: set
            .cases
            .iter()
            .map(|c| CaseSummary {
                case: c.case.number(),
                label: c.case.label(),
                cost: c.cost,
                peak_slot: c.peak_slot,
                peak_kwh: c.peak_kwh,
                sweeps_used: c.sweeps_used,
                da_sweeps: c.day.as_ref().map_or(0, |d| d.da_sweeps.len()),
                triggered_slots: c.day.as_ref().map_or_else(Vec::new, DayResult::triggered_slots),
                flagged_users: c.day.as_ref().map_or(0, |d| d.flagged.len()),
            })
            .collect(),
        deltas: &set.deltas,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
    files.push((SUMMARY_FILE.to_string(), json));
    write_all(out_dir, files)
}

pub const UNCOORDINATED_FILE: &str = "uncoordinated.csv";
pub const DAY_AHEAD_FILE: &str = "day_ahead.csv";
pub const REALIZED_FILE: &str = "realized.csv";
pub const DA_PROFILE_OUT_FILE: &str = "da_profile.csv";

#[derive(Serialize)]
struct DaySummary<'a> {
    run: &'a RunInfo,
    cost: CostBreakdown,
    da_sweeps: usize,
    triggered_slots: Vec<usize>,
    alterations: &'a [crate::coordinator::AlterOutcome],
    flagged: &'a [crate::coordinator::FlaggedUser],
    mse_to_da_uncoordinated: f64,
    mse_to_da_shaped: f64,
}

/// Outputs of a single simulated day.
pub fn emit_day(day: &DayResult, run: &RunInfo, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if day.schedules.is_empty() {
        return Err(ReportError::Empty("day result has no users".into()));
    }
    let mut trace = String::from("case,phase,slot,sweep,mse\n");
    mse_rows(&mut trace, 0, day);
    let summary = DaySummary {
        run,
        cost: day.cost,
        da_sweeps: day.da_sweeps.len(),
        triggered_slots: day.triggered_slots(),
        alterations: &day.alterations,
        flagged: &day.flagged,
        mse_to_da_uncoordinated: profile_mse(&day.uncoordinated, &day.da_profile),
        mse_to_da_shaped: profile_mse(&day.day_ahead, &day.da_profile),
    };
    let files = vec![
        (UNCOORDINATED_FILE.to_string(), profile_csv(&day.uncoordinated)),
        (DAY_AHEAD_FILE.to_string(), profile_csv(&day.day_ahead)),
        (REALIZED_FILE.to_string(), profile_csv(&day.realized)),
        (DA_PROFILE_OUT_FILE.to_string(), profile_csv(&day.da_profile)),
        (MSE_TRACE_FILE.to_string(), trace),
        (
            SUMMARY_FILE.to_string(),
            serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n",
        ),
    ];
    write_all(out_dir, files)
}
