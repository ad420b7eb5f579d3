//! Sequential best-response scheduling: day-ahead shaping followed by the
//! hourly real-time altering loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{FleetError, PevProfile, Window};
use crate::flow::FlowNetwork;
use crate::market::{cost_breakdown, imbalance, CostBreakdown, MarketDay};
use crate::profile::{profile_mse, Horizon, LoadProfile, SLOTS};
use crate::subproblem::{build_subproblem, solve, CapBound, ConstraintClass, Infeasibility, SubproblemRequest, UserSubproblem};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error(transparent)]
    Infeasible(#[from] Infeasibility),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("{0}")]
    Config(String),
}

/// One user as the coordinator sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Participant {
    pub pev: PevProfile,
    pub window: Window,
    pub household: LoadProfile,
}

impl Participant {
    pub fn new(pev: PevProfile, household: LoadProfile, horizon: Horizon) -> Result<Self, FleetError> {
        let window = pev.validate(horizon)?;
        Ok(Participant { pev, window, household })
    }
}

pub fn participants(
    fleet: &[PevProfile],
    households: &[LoadProfile],
    horizon: Horizon,
) -> Result<Vec<Participant>, CoordinatorError> {
    if fleet.len() != households.len() {
        return Err(CoordinatorError::Config(format!(
            "{} vehicles but {} household profiles",
            fleet.len(),
            households.len()
        )));
    }
    fleet
        .iter()
        .zip(households)
        .map(|(p, h)| Participant::new(p.clone(), *h, horizon).map_err(Into::into))
        .collect()
}

/// Per-slot cap at `kappa` times the mean hourly aggregate demand of the day.
pub fn demand_cap(participants: &[Participant], kappa: f64) -> f64 {
    let total: f64 = participants
        .iter()
        .map(|p| p.household.total() + p.pev.required_energy_kwh)
        .sum();
    kappa * total / SLOTS as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub max_sweeps: usize,
    /// Threshold on the MSE between successive sweep aggregates, kWh².
    pub mse_tol: f64,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec {
            max_sweeps: 10,
            mse_tol: 1e-6,
        }
    }
}

impl ConvergenceSpec {
    pub fn validate(&self) -> Result<(), CoordinatorError> {
        if self.max_sweeps == 0 {
            return Err(CoordinatorError::Config("max_sweeps must be at least 1".into()));
        }
        if !(self.mse_tol.is_finite() && self.mse_tol >= 0.0) {
            return Err(CoordinatorError::Config("mse_tol must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum SweepOrder {
    /// Ascending user index.
    #[default]
    Index,
    /// A fresh permutation every sweep.
    Shuffled { seed: u64 },
}

/// PEV schedules the day-ahead sweep starts from when no cap is active. A
/// capped sweep always starts from [`cap_feasible_schedules`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSchedule {
    /// No vehicle load; the aggregate starts at the household baseline.
    #[default]
    Idle,
    /// Plug-and-charge at full rate from arrival.
    Uncoordinated,
}

/// Size of the epoch term relative to the tracking term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", rename_all = "snake_case")]
pub enum AlteringScale {
    /// Mean hourly aggregate demand of the day, kWh.
    #[default]
    MeanHourlyDemand,
    Fixed { kwh: f64 },
}

/// Which way a triggered slot pushes demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlterDirection {
    /// RT price spiked: consume less at the epoch.
    Shed,
    /// RT price collapsed: consume more at the epoch.
    Absorb,
}

impl AlterDirection {
    fn sign(self) -> f64 {
        match self {
            AlterDirection::Shed => 1.0,
            AlterDirection::Absorb => -1.0,
        }
    }
}

pub fn decide_altering(rt_price: f64, da_price: f64, trigger: f64) -> bool {
    altering_direction(rt_price, da_price, trigger).is_some()
}

pub fn altering_direction(rt_price: f64, da_price: f64, trigger: f64) -> Option<AlterDirection> {
    if rt_price >= trigger * da_price {
        Some(AlterDirection::Shed)
    } else if rt_price <= da_price / trigger {
        Some(AlterDirection::Absorb)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepStats {
    pub sweep: usize,
    /// MSE between this sweep's aggregate and the previous one, kWh².
    pub mse: f64,
    /// Users re-solved in this sweep.
    pub resolved: usize,
    /// Largest rise in a user's own objective across its re-solve.
    pub max_objective_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlaggedUser {
    pub user_id: usize,
    pub slot: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub schedules: Vec<LoadProfile>,
    pub households: Vec<LoadProfile>,
    pub da_profile: LoadProfile,
    /// 0 during day-ahead shaping, otherwise the 1-based slot being altered.
    pub t0: usize,
    pub cap: Option<CapBound>,
    /// Sweeps run so far, over both phases.
    pub iterations: usize,
    pub last_sweep_aggregate: LoadProfile,
    pub flagged: Vec<FlaggedUser>,
    aggregate: LoadProfile,
}

impl ScheduleState {
    pub fn new(
        participants: &[Participant],
        schedules: Vec<LoadProfile>,
        da_profile: LoadProfile,
        cap: Option<CapBound>,
    ) -> Self {
        assert_eq!(participants.len(), schedules.len());
        let households: Vec<LoadProfile> = participants.iter().map(|p| p.household).collect();
        let mut state = ScheduleState {
            schedules,
            households,
            da_profile,
            t0: 0,
            cap,
            iterations: 0,
            last_sweep_aggregate: LoadProfile::zeros(),
            flagged: Vec::new(),
            aggregate: LoadProfile::zeros(),
        };
        state.resync();
        state.last_sweep_aggregate = state.aggregate;
        state
    }

    pub fn len(&self) -> usize {
        self.schedules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedules.is_empty()
    }

    /// Incrementally maintained Σ (pev + household).
    pub fn aggregate(&self) -> LoadProfile {
        self.aggregate
    }

    pub fn recompute_aggregate(&self) -> LoadProfile {
        let mut total = LoadProfile::zeros();
        for (s, h) in self.schedules.iter().zip(&self.households) {
            total += *s + *h;
        }
        total
    }

    fn resync(&mut self) {
        self.aggregate = self.recompute_aggregate();
    }

    fn replace(&mut self, n: usize, schedule: LoadProfile) {
        self.aggregate += schedule - self.schedules[n];
        self.schedules[n] = schedule;
    }
}

/// Σ_{i≠n} (pev_i + household_i).
pub fn others_aggregate(state: &ScheduleState, n: usize) -> LoadProfile {
    state.aggregate - state.schedules[n] - state.households[n]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    #[serde(default)]
    pub convergence: ConvergenceSpec,
    #[serde(default)]
    pub order: SweepOrder,
    #[serde(default)]
    pub init: InitialSchedule,
}

fn sweep_order(n: usize, order: SweepOrder, sweep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let SweepOrder::Shuffled { seed } = order {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sweep as u64);
        idx.shuffle(&mut rng);
    }
    idx
}

struct Epoch {
    t0: usize,
    lambda: f64,
    altering_scale: f64,
}

fn user_subproblem(
    p: &Participant,
    state: &ScheduleState,
    n: usize,
    epoch: &Epoch,
) -> Result<UserSubproblem, Infeasibility> {
    let others = others_aggregate(state, n);
    build_subproblem(&SubproblemRequest {
        user: &p.pev,
        window: p.window,
        household: &p.household,
        others: &others,
        da_profile: &state.da_profile,
        lambda: epoch.lambda,
        t0: epoch.t0,
        history: &state.schedules[n],
        cap: state.cap,
        altering_scale: epoch.altering_scale,
    })
}

/// Pinned fallback: full rate from `t0` until the remaining need is met.
fn max_rate_from(p: &Participant, history: &LoadProfile, t0: usize) -> LoadProfile {
    let mut out = LoadProfile::from_fn(|t| if t < t0 { history[t] } else { 0.0 });
    let rate = p.pev.max_slot_energy();
    let mut remaining = p.pev.required_energy_kwh - out.total();
    for t in t0.max(p.window.first)..=p.window.last {
        if remaining <= 0.0 {
            break;
        }
        let e = rate.min(remaining);
        out[t] = e;
        remaining -= e;
    }
    out
}

fn improvement_tolerance(sp: &UserSubproblem) -> f64 {
    let scale = sp.costs.iter().fold(1.0_f64, |m, c| m.max(c.abs())) * sp.p_max.max(1.0);
    1e-9 * scale
}

/// One Gauss-Seidel pass over `users`. Infeasible users abort the pass when
/// `pin_infeasible` is false and are pinned to max-rate charging otherwise.
fn sweep(
    participants: &[Participant],
    state: &mut ScheduleState,
    users: &[usize],
    epoch: &Epoch,
    pin_infeasible: bool,
    number: usize,
) -> Result<SweepStats, CoordinatorError> {
    let before = state.aggregate;
    let mut max_increase = f64::NEG_INFINITY;
    let mut resolved = 0;
    for &n in users {
        let p = &participants[n];
        let outcome = user_subproblem(p, state, n, epoch).and_then(|sp| solve(&sp).map(|s| (sp, s)));
        match outcome {
            Ok((sp, schedule)) => {
                let old = state.schedules[n];
                let feasible_before = crate::subproblem::check_feasible(
                    &crate::subproblem::PevSchedule {
                        user_id: p.pev.user_id,
                        slots: old,
                    },
                    &sp,
                    1e-9,
                )
                .is_empty();
                if feasible_before {
                    let gain = sp.objective(&old) - sp.objective(&schedule.slots);
                    max_increase = max_increase.max(-gain);
                    // Move only on strict improvement; ties keep the current plan.
                    if gain <= improvement_tolerance(&sp) {
                        resolved += 1;
                        continue;
                    }
                }
                state.replace(n, schedule.slots);
            }
            Err(e) if pin_infeasible => {
                let pinned = max_rate_from(p, &state.schedules[n], epoch.t0);
                state.replace(n, pinned);
                if !state.flagged.iter().any(|f| f.user_id == p.pev.user_id && f.slot == epoch.t0 + 1) {
                    state.flagged.push(FlaggedUser {
                        user_id: p.pev.user_id,
                        slot: epoch.t0 + 1,
                        reason: e.to_string(),
                    });
                }
            }
            Err(e) => return Err(e.into()),
        }
        resolved += 1;
    }
    state.resync();
    state.iterations += 1;
    state.last_sweep_aggregate = state.aggregate;
    Ok(SweepStats {
        sweep: number,
        mse: profile_mse(&before, &state.aggregate),
        resolved,
        max_objective_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
    })
}

fn run_sweeps(
    participants: &[Participant],
    state: &mut ScheduleState,
    users: &[usize],
    epoch: &Epoch,
    config: &CoordinatorConfig,
    pin_infeasible: bool,
) -> Result<Vec<SweepStats>, CoordinatorError> {
    let mut trace = Vec::new();
    for k in 1..=config.convergence.max_sweeps {
        let order: Vec<usize> = match config.order {
            SweepOrder::Index => users.to_vec(),
            order => sweep_order(users.len(), order, k).into_iter().map(|i| users[i]).collect(),
        };
        let stats = sweep(participants, state, &order, epoch, pin_infeasible, k)?;
        trace.push(stats);
        if stats.mse <= config.convergence.mse_tol {
            break;
        }
    }
    Ok(trace)
}

/// Joint charging-only plan meeting every energy need with the aggregate at
/// or below `cap` in every slot: a max flow from users through their window
/// slots into the per-slot headroom `cap − Σ household`. Starting a sweep
/// here keeps every later best response feasible, since each user's current
/// schedule stays a feasible point of its own subproblem.
pub fn cap_feasible_schedules(participants: &[Participant], cap: f64) -> Result<Vec<LoadProfile>, CoordinatorError> {
    let n = participants.len();
    let (source, sink) = (0, n + SLOTS + 1);
    let slot_node = |t: usize| n + 1 + t;
    let households: LoadProfile = participants.iter().map(|p| p.household).sum();
    let mut g = FlowNetwork::new(n + SLOTS + 2);
    let mut user_edges = Vec::with_capacity(n);
    for (i, p) in participants.iter().enumerate() {
        g.add_edge(source, i + 1, p.pev.required_energy_kwh);
        let edges: Vec<(usize, usize)> = p
            .window
            .slots()
            .map(|t| (t, g.add_edge(i + 1, slot_node(t), p.pev.max_slot_energy())))
            .collect();
        user_edges.push(edges);
    }
    for t in 0..SLOTS {
        g.add_edge(slot_node(t), sink, (cap - households[t]).max(0.0));
    }
    g.max_flow(source, sink);

    let mut schedules = Vec::with_capacity(n);
    for (p, edges) in participants.iter().zip(&user_edges) {
        let mut s = LoadProfile::zeros();
        for &(t, e) in edges {
            s[t] = g.flow(e);
        }
        let short = p.pev.required_energy_kwh - s.total();
        if short > 1e-9 {
            return Err(Infeasibility {
                user_id: p.pev.user_id,
                class: ConstraintClass::DemandCap,
                slot: None,
                detail: format!("no joint schedule under a {cap:.6} kWh cap; {short:.6} kWh short"),
            }
            .into());
        }
        schedules.push(s);
    }
    Ok(schedules)
}

/// Day-ahead shaping: best responses with λ = 1 and no history.
pub fn shape_day_ahead(
    participants: &[Participant],
    da_profile: &LoadProfile,
    cap: Option<CapBound>,
    config: &CoordinatorConfig,
    horizon: Horizon,
) -> Result<(ScheduleState, Vec<SweepStats>), CoordinatorError> {
    config.convergence.validate()?;
    let init = match (cap, config.init) {
        (Some(c), _) => cap_feasible_schedules(participants, c.level())?,
        (None, InitialSchedule::Idle) => vec![LoadProfile::zeros(); participants.len()],
        (None, InitialSchedule::Uncoordinated) => participants
            .iter()
            .map(|p| crate::fleet::greedy_schedule(&p.pev, horizon))
            .collect::<Result<_, _>>()?,
    };
    let mut state = ScheduleState::new(participants, init, *da_profile, cap);
    let users: Vec<usize> = (0..participants.len()).collect();
    let epoch = Epoch {
        t0: 0,
        lambda: 1.0,
        altering_scale: 0.0,
    };
    let trace = run_sweeps(participants, &mut state, &users, &epoch, config, false)?;
    Ok((state, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlteringSpec {
    /// Tracking weight during altering, in `[0, 1)`.
    pub lambda: f64,
    /// RT/DA price ratio that triggers altering (and its inverse for dips).
    pub trigger: f64,
    #[serde(default)]
    pub scale: AlteringScale,
}

impl Default for AlteringSpec {
    fn default() -> Self {
        AlteringSpec {
            lambda: 0.5,
            trigger: 2.0,
            scale: AlteringScale::default(),
        }
    }
}

impl AlteringSpec {
    pub fn validate(&self) -> Result<(), CoordinatorError> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(CoordinatorError::Config("lambda must lie in [0, 1)".into()));
        }
        if !(self.trigger.is_finite() && self.trigger > 1.0) {
            return Err(CoordinatorError::Config("trigger must be > 1".into()));
        }
        if let AlteringScale::Fixed { kwh } = self.scale {
            if !(kwh.is_finite() && kwh > 0.0) {
                return Err(CoordinatorError::Config("altering scale must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn scale_kwh(&self, participants: &[Participant]) -> f64 {
        match self.scale {
            AlteringScale::MeanHourlyDemand => demand_cap(participants, 1.0),
            AlteringScale::Fixed { kwh } => kwh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlterOutcome {
    /// 1-based slot.
    pub slot: usize,
    pub direction: AlterDirection,
    pub connected: usize,
    pub sweeps: Vec<SweepStats>,
    pub aggregate_before: f64,
    pub aggregate_after: f64,
}

/// Re-optimises connected users from 0-based slot `t0` onward; slots before
/// `t0` are frozen.
pub fn alter_real_time(
    participants: &[Participant],
    state: &mut ScheduleState,
    t0: usize,
    direction: AlterDirection,
    lambda: f64,
    altering_scale: f64,
    config: &CoordinatorConfig,
) -> Result<AlterOutcome, CoordinatorError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(CoordinatorError::Config("lambda must lie in [0, 1)".into()));
    }
    assert!(t0 < SLOTS, "epoch slot out of range");
    state.t0 = t0 + 1;
    let connected: Vec<usize> = (0..participants.len())
        .filter(|&n| participants[n].window.contains(t0))
        .collect();
    let before = state.aggregate[t0];
    let epoch = Epoch {
        t0,
        lambda,
        altering_scale: altering_scale * direction.sign(),
    };
    let sweeps = if connected.is_empty() {
        Vec::new()
    } else {
        run_sweeps(participants, state, &connected, &epoch, config, true)?
    };
    Ok(AlterOutcome {
        slot: t0 + 1,
        direction,
        connected: connected.len(),
        sweeps,
        aggregate_before: before,
        aggregate_after: state.aggregate[t0],
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DayConfig {
    pub coordinator: CoordinatorConfig,
    /// `None` disables real-time altering.
    pub altering: Option<AlteringSpec>,
    pub cap: Option<CapBound>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayResult {
    pub uncoordinated: LoadProfile,
    pub day_ahead: LoadProfile,
    pub realized: LoadProfile,
    pub da_profile: LoadProfile,
    pub schedules: Vec<LoadProfile>,
    pub da_sweeps: Vec<SweepStats>,
    pub alterations: Vec<AlterOutcome>,
    pub flagged: Vec<FlaggedUser>,
    pub imbalance: LoadProfile,
    pub cost: CostBreakdown,
}

impl DayResult {
    /// 1-based slots where altering ran.
    pub fn triggered_slots(&self) -> Vec<usize> {
        self.alterations.iter().map(|a| a.slot).collect()
    }
}

pub fn simulate_day(
    participants: &[Participant],
    market: &MarketDay,
    config: &DayConfig,
    horizon: Horizon,
) -> Result<DayResult, CoordinatorError> {
    if let Some(a) = &config.altering {
        a.validate()?;
    }
    let uncoordinated = {
        let fleet: Vec<PevProfile> = participants.iter().map(|p| p.pev.clone()).collect();
        let households: Vec<LoadProfile> = participants.iter().map(|p| p.household).collect();
        crate::fleet::uncoordinated_profile(&fleet, &households, horizon)?
    };
    let (mut state, da_sweeps) =
        shape_day_ahead(participants, &market.da_profile, config.cap, &config.coordinator, horizon)?;
    let day_ahead = state.aggregate();
    let mut alterations = Vec::new();
    if let Some(spec) = &config.altering {
        let scale = spec.scale_kwh(participants);
        for t0 in 0..SLOTS {
            let Some(direction) = altering_direction(market.rt_prices.at(t0), market.da_prices.at(t0), spec.trigger)
            else {
                continue;
            };
            alterations.push(alter_real_time(
                participants,
                &mut state,
                t0,
                direction,
                spec.lambda,
                scale,
                &config.coordinator,
            )?);
        }
    }
    let realized = state.recompute_aggregate();
    Ok(DayResult {
        uncoordinated,
        day_ahead,
        realized,
        da_profile: market.da_profile,
        imbalance: imbalance(&realized, &market.da_profile),
        cost: cost_breakdown(market, &realized),
        schedules: state.schedules,
        da_sweeps,
        alterations,
        flagged: state.flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::PriceSeries;
    use crate::market::Market;
    use crate::subproblem::{brute_force_oracle, check_feasible, PevSchedule};

    fn horizon() -> Horizon {
        Horizon::new(0)
    }

    /// Vehicle connected over 0-based horizon positions `first..=last`.
    fn participant(id: usize, first: usize, last: usize, energy: f64, household: LoadProfile) -> Participant {
        let pev = PevProfile {
            user_id: id,
            arrival: (first % 24) as u8 + if first == 0 { 24 } else { 0 },
            departure: (last % 24) as u8 + if last == 0 { 24 } else { 0 },
            required_energy_kwh: energy,
            capacity_kwh: 24.0,
            initial_soc_kwh: 12.0,
            outlet_rate_kw: 1.8,
            v2g: true,
        };
        Participant::new(pev, household, horizon()).unwrap()
    }

    fn day(rt_factor: impl Fn(usize) -> f64, da_profile: LoadProfile) -> MarketDay {
        let da = LoadProfile::from_fn(|t| 0.03 + 0.001 * t as f64);
        MarketDay {
            da_prices: PriceSeries::new(Market::DayAhead, "test", da),
            rt_prices: PriceSeries::new(Market::RealTime, "test", LoadProfile::from_fn(|t| da[t] * rt_factor(t))),
            da_profile,
        }
    }

    fn small_fleet() -> Vec<Participant> {
        let hh = |k: f64| LoadProfile::from_fn(|t| k * (1.0 + 0.5 * ((t as f64) / 3.0).sin()));
        vec![
            participant(0, 2, 12, 5.4, hh(1.0)),
            participant(1, 4, 16, 7.2, hh(0.8)),
            participant(2, 6, 20, 3.6, hh(1.2)),
            participant(3, 1, 9, 9.0, hh(0.5)),
            participant(4, 8, 22, 1.8, hh(0.9)),
        ]
    }

    #[test]
    fn capped_sweep_starts_from_joint_plan() {
        // User 0 prefers slots 2 and 3 but user 1 can only charge there.
        let fleet = vec![
            participant(0, 0, 3, 3.6, LoadProfile::zeros()),
            participant(1, 2, 3, 3.6, LoadProfile::zeros()),
        ];
        let da = LoadProfile::from_fn(|t| if t == 2 || t == 3 { 5.0 } else { 0.0 });
        let cap = Some(CapBound::Ceiling { level: 1.8 });
        let (state, _) = shape_day_ahead(&fleet, &da, cap, &CoordinatorConfig::default(), horizon()).unwrap();
        for t in 0..SLOTS {
            assert!(state.aggregate()[t] <= 1.8 + 1e-9, "slot {t}: {}", state.aggregate()[t]);
        }
        for (p, s) in fleet.iter().zip(&state.schedules) {
            assert!((s.total() - p.pev.required_energy_kwh).abs() < 1e-9);
        }
    }

    #[test]
    fn jointly_infeasible_cap_is_reported() {
        let fleet = vec![
            participant(0, 2, 3, 3.6, LoadProfile::zeros()),
            participant(1, 2, 3, 1.8, LoadProfile::zeros()),
        ];
        let err = cap_feasible_schedules(&fleet, 1.8).unwrap_err();
        match err {
            CoordinatorError::Infeasible(i) => assert_eq!(i.class, ConstraintClass::DemandCap),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn altering_triggers() {
        assert!(decide_altering(10.0, 1.0, 2.0));
        assert!(!decide_altering(1.0, 1.0, 2.0));
        assert!(decide_altering(0.4, 1.0, 2.0));
        assert_eq!(altering_direction(0.4, 1.0, 2.0), Some(AlterDirection::Absorb));
        assert_eq!(altering_direction(2.0, 1.0, 2.0), Some(AlterDirection::Shed));
    }

    #[test]
    fn others_aggregate_cases() {
        let single = vec![participant(0, 2, 6, 1.8, LoadProfile::constant(1.0))];
        let state = ScheduleState::new(&single, vec![LoadProfile::constant(0.3)], LoadProfile::zeros(), None);
        assert!(others_aggregate(&state, 0).max_abs_diff(&LoadProfile::zeros()) < 1e-12);

        let twins = vec![
            participant(0, 2, 6, 1.8, LoadProfile::constant(1.0)),
            participant(1, 2, 6, 1.8, LoadProfile::constant(1.0)),
        ];
        let s = LoadProfile::from_fn(|t| if (2..4).contains(&t) { 0.9 } else { 0.0 });
        let state = ScheduleState::new(&twins, vec![s, s], LoadProfile::zeros(), None);
        assert!(others_aggregate(&state, 0).max_abs_diff(&(s + LoadProfile::constant(1.0))) < 1e-12);

        let fleet = small_fleet();
        let schedules: Vec<LoadProfile> =
            (0..5).map(|n| LoadProfile::from_fn(|t| ((n * 7 + t * 3) % 5) as f64 * 0.3)).collect();
        let state = ScheduleState::new(&fleet, schedules.clone(), LoadProfile::zeros(), None);
        for n in 0..5 {
            let mut direct = LoadProfile::zeros();
            for i in (0..5).filter(|&i| i != n) {
                direct += schedules[i] + fleet[i].household;
            }
            assert!(others_aggregate(&state, n).max_abs_diff(&direct) < 1e-9);
        }
    }

    #[test]
    fn single_user_fills_valley_in_one_sweep() {
        let hh = LoadProfile::constant(2.0);
        let user = vec![participant(0, 4, 12, 3.6, hh)];
        let mut da = hh;
        da[7] += 1.8;
        da[9] += 1.8;
        let (state, trace) = shape_day_ahead(&user, &da, None, &CoordinatorConfig::default(), horizon()).unwrap();
        assert!(state.aggregate().max_abs_diff(&da) < 1e-9);
        // Second sweep confirms the fixed point.
        assert_eq!(trace.len(), 2);
        assert!(trace[1].mse < 1e-12);
    }

    #[test]
    fn sweeps_descend_and_keep_aggregate_exact() {
        let fleet = small_fleet();
        let total: LoadProfile = fleet.iter().map(|p| p.household).sum();
        let da = total + LoadProfile::from_fn(|t| if (6..14).contains(&t) { 3.0 } else { 0.0 });
        let (state, trace) = shape_day_ahead(&fleet, &da, None, &CoordinatorConfig::default(), horizon()).unwrap();
        for s in &trace {
            assert!(s.max_objective_increase <= 1e-9, "{s:?}");
        }
        assert!(state.aggregate().max_abs_diff(&state.recompute_aggregate()) < 1e-9);
        for (n, p) in fleet.iter().enumerate() {
            assert!((state.schedules[n].total() - p.pev.required_energy_kwh).abs() < 1e-9);
        }
    }

    #[test]
    fn idle_connected_set_leaves_state() {
        let fleet = small_fleet();
        let (mut state, _) =
            shape_day_ahead(&fleet, &LoadProfile::zeros(), None, &CoordinatorConfig::default(), horizon()).unwrap();
        let before = state.clone();
        // Nobody is connected in the last slot.
        let out =
            alter_real_time(&fleet, &mut state, 23, AlterDirection::Shed, 0.5, 10.0, &CoordinatorConfig::default())
                .unwrap();
        assert_eq!(out.connected, 0);
        assert_eq!(state.schedules, before.schedules);
    }

    #[test]
    fn altering_freezes_history_and_skips_disconnected() {
        let fleet = small_fleet();
        let total: LoadProfile = fleet.iter().map(|p| p.household).sum();
        let (mut state, _) =
            shape_day_ahead(&fleet, &total, None, &CoordinatorConfig::default(), horizon()).unwrap();
        let before = state.schedules.clone();
        let t0 = 10;
        let out =
            alter_real_time(&fleet, &mut state, t0, AlterDirection::Shed, 0.5, 20.0, &CoordinatorConfig::default())
                .unwrap();
        for (n, p) in fleet.iter().enumerate() {
            for t in 0..t0 {
                assert_eq!(state.schedules[n][t].to_bits(), before[n][t].to_bits());
            }
            if !p.window.contains(t0) {
                assert_eq!(state.schedules[n], before[n]);
            }
        }
        assert_eq!(out.connected, 4);
        assert!(out.aggregate_after < out.aggregate_before);
    }

    #[test]
    fn flat_prices_never_alter() {
        let fleet = small_fleet();
        let market = day(|_| 1.0, fleet.iter().map(|p| p.household).sum());
        let cfg = DayConfig {
            altering: Some(AlteringSpec::default()),
            ..DayConfig::default()
        };
        let r = simulate_day(&fleet, &market, &cfg, horizon()).unwrap();
        assert!(r.alterations.is_empty());
        assert_eq!(r.realized, r.day_ahead);
    }

    #[test]
    fn spike_slot_alone_triggers() {
        let fleet = small_fleet();
        let market = day(|t| if t == 10 { 6.0 } else { 1.1 }, fleet.iter().map(|p| p.household).sum());
        let cfg = DayConfig {
            altering: Some(AlteringSpec::default()),
            ..DayConfig::default()
        };
        let r = simulate_day(&fleet, &market, &cfg, horizon()).unwrap();
        assert_eq!(r.triggered_slots(), vec![11]);
        // Cost equals the two inner products recomputed by hand.
        let mut expected = 0.0;
        for t in 0..SLOTS {
            expected += r.da_profile[t] * market.da_prices.at(t)
                + (r.realized[t] - r.da_profile[t]) * market.rt_prices.at(t);
        }
        assert!((r.cost.total - expected).abs() < 1e-9);
        let direct: LoadProfile = r.schedules.iter().zip(&fleet).map(|(s, p)| *s + p.household).sum();
        assert!(r.realized.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn cap_holds_after_altering() {
        let fleet = small_fleet();
        let total: LoadProfile = fleet.iter().map(|p| p.household).sum();
        let da = total + LoadProfile::from_fn(|t| if (8..11).contains(&t) { 6.0 } else { 0.0 });
        let cap = demand_cap(&fleet, 1.5);
        let market = day(|t| if t == 9 { 6.0 } else { 1.0 }, da);
        let cfg = DayConfig {
            altering: Some(AlteringSpec::default()),
            cap: Some(CapBound::Ceiling { level: cap }),
            ..DayConfig::default()
        };
        let r = simulate_day(&fleet, &market, &cfg, horizon()).unwrap();
        assert_eq!(r.triggered_slots(), vec![10]);
        for t in 0..SLOTS {
            assert!(r.realized[t] <= cap + 1e-6, "slot {t}: {} > {cap}", r.realized[t]);
        }
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let fleet = small_fleet();
        let market = day(|t| if t == 10 { 6.0 } else { 1.0 }, fleet.iter().map(|p| p.household).sum());
        let cfg = DayConfig {
            altering: Some(AlteringSpec::default()),
            coordinator: CoordinatorConfig {
                order: SweepOrder::Shuffled { seed: 9 },
                ..CoordinatorConfig::default()
            },
            cap: None,
        };
        let a = simulate_day(&fleet, &market, &cfg, horizon()).unwrap();
        let b = simulate_day(&fleet, &market, &cfg, horizon()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_shaping_aborts_with_user() {
        let mut fleet = small_fleet();
        fleet[2].pev.required_energy_kwh = 100.0;
        let err = shape_day_ahead(&fleet, &LoadProfile::zeros(), None, &CoordinatorConfig::default(), horizon())
            .unwrap_err();
        match err {
            CoordinatorError::Infeasible(i) => assert_eq!(i.user_id, 2),
            e => panic!("unexpected {e}"),
        }
    }

    /// Three users on a 0.6 kWh grid with four free slots each: replaying the
    /// sweeps with exhaustive best responses reaches the same aggregate, and
    /// no user can improve on the final state by any grid schedule.
    #[test]
    fn micro_instance_matches_joint_enumeration() {
        let hh = |a: f64, b: f64| LoadProfile::from_fn(|t| a + b * (t as f64 * 0.7).cos());
        let fleet = vec![
            participant(0, 3, 6, 3.6, hh(1.0, 0.31)),
            participant(1, 4, 7, 2.4, hh(0.7, 0.17)),
            participant(2, 5, 8, 4.2, hh(1.3, 0.23)),
        ];
        let base: LoadProfile = fleet.iter().map(|p| p.household).sum();
        let da = base + LoadProfile::from_fn(|t| [0.0, 0.0, 0.0, 1.1, 3.7, 2.9, 0.4, 3.3, 1.9][t.min(8)]);
        let cfg = CoordinatorConfig::default();
        let (state, trace) = shape_day_ahead(&fleet, &da, None, &cfg, horizon()).unwrap();

        let epoch = Epoch {
            t0: 0,
            lambda: 1.0,
            altering_scale: 0.0,
        };
        let mut replay = ScheduleState::new(&fleet, vec![LoadProfile::zeros(); 3], da, None);
        for _ in 0..trace.len() {
            for n in 0..3 {
                let mut others = LoadProfile::zeros();
                for i in (0..3).filter(|&i| i != n) {
                    others += replay.schedules[i] + fleet[i].household;
                }
                let sp = build_subproblem(&SubproblemRequest {
                    user: &fleet[n].pev,
                    window: fleet[n].window,
                    household: &fleet[n].household,
                    others: &others,
                    da_profile: &da,
                    lambda: 1.0,
                    t0: 0,
                    history: &LoadProfile::zeros(),
                    cap: None,
                    altering_scale: 0.0,
                })
                .unwrap();
                let best = brute_force_oracle(&sp, 0.6).unwrap();
                replay.replace(n, best.slots);
            }
        }
        assert!(state.recompute_aggregate().max_abs_diff(&replay.recompute_aggregate()) < 1e-9);

        // Fixed point: each final schedule is a best grid response to the others.
        for n in 0..3 {
            let sp = user_subproblem(&fleet[n], &state, n, &epoch).unwrap();
            let best = brute_force_oracle(&sp, 0.6).unwrap();
            let current = PevSchedule {
                user_id: n,
                slots: state.schedules[n],
            };
            assert!(check_feasible(&current, &sp, 1e-9).is_empty());
            assert!(sp.objective(&current.slots) <= sp.objective(&best.slots) + 1e-9);
        }
    }
}
