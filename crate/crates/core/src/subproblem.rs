//! One user's scheduling program at one decision epoch.
//!
//! The user picks the energy `x_t` its vehicle draws (or returns) in every
//! slot from the epoch `t0` onward. Slots before `t0` are history and are not
//! decision variables. The program is
//!
//! ```text
//! minimise   λ Σ_{t≥t0} x_t (household_t + others_t − da_t) + (1 − λ) s (x_t0 + others_t0 + household_t0)
//! subject to Σ_{t≥t0} x_t = E − Σ_{t<t0} history_t
//!            −p_max ≤ x_t ≤ p_max in the window (x_t ≥ 0 without V2G), x_t = 0 outside
//!            x_t ≤ cap − others_t − household_t              (when a demand cap is set)
//!            soc(t0−1) + Σ_{k=t0..t} x_k ≥ floor             for every window slot t ≥ t0
//! ```
//!
//! `s` is the altering scale (see [`SubproblemRequest::altering_scale`]).

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::fleet::{PevProfile, Window};
use crate::lp::{LinearProgram, LpError, Row, Sense};
use crate::profile::{LoadProfile, SLOTS};

/// Constraint families of the per-user program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    /// Slots before the epoch keep their realized values.
    History,
    /// Remaining energy need is delivered exactly.
    Energy,
    /// Per-slot aggregate demand cap.
    DemandCap,
    /// |x_t| bounded by the outlet rating; no discharge without V2G.
    PowerLimit,
    /// No exchange outside the connection window.
    Window,
    /// State of charge stays above the battery-protection floor.
    SocFloor,
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintClass::History => "history",
            ConstraintClass::Energy => "energy",
            ConstraintClass::DemandCap => "demand cap",
            ConstraintClass::PowerLimit => "power limit",
            ConstraintClass::Window => "connection window",
            ConstraintClass::SocFloor => "soc floor",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("user {user_id}: infeasible {class} constraint{}: {detail}", .slot.map(|t| format!(" at slot {}", t + 1)).unwrap_or_default())]
pub struct Infeasibility {
    pub user_id: usize,
    pub class: ConstraintClass,
    pub slot: Option<usize>,
    pub detail: String,
}

/// How the aggregate demand cap is imposed on one user.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CapBound {
    /// Aggregate demand in every slot at most `level` kWh.
    Ceiling { level: f64 },
    /// Aggregate demand in every slot exactly `level` kWh.
    Exact { level: f64 },
}

impl CapBound {
    pub fn level(&self) -> f64 {
        match *self {
            CapBound::Ceiling { level } | CapBound::Exact { level } => level,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SubproblemRequest<'a> {
    pub user: &'a PevProfile,
    pub window: Window,
    pub household: &'a LoadProfile,
    /// Aggregate of every other user (vehicle plus household).
    pub others: &'a LoadProfile,
    pub da_profile: &'a LoadProfile,
    /// Weight of the tracking term, in `[0, 1]`.
    pub lambda: f64,
    /// First free slot (0-based). Day-ahead shaping uses 0.
    pub t0: usize,
    /// Realized schedule; only slots before `t0` are read.
    pub history: &'a LoadProfile,
    pub cap: Option<CapBound>,
    /// Multiplier on the `(1 − λ)` epoch term. `1.0` is the bare kWh form; a
    /// negative value rewards consumption at `t0` instead of penalising it.
    pub altering_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSubproblem {
    pub user_id: usize,
    pub t0: usize,
    pub window: Window,
    pub v2g: bool,
    pub p_max: f64,
    pub history: LoadProfile,
    /// Objective coefficient for every free slot (zero before `t0`).
    pub costs: LoadProfile,
    /// Part of the objective that does not depend on the decision.
    pub constant: f64,
    /// Energy still to deliver from `t0` onward.
    pub energy_target: f64,
    /// Bounds from the power limit and the window.
    pub power_lower: LoadProfile,
    pub power_upper: LoadProfile,
    /// Per-slot headroom left by the aggregate cap, for capped slots.
    pub cap_headroom: Option<LoadProfile>,
    pub cap_exact: bool,
    pub soc_start: f64,
    pub soc_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PevSchedule {
    pub user_id: usize,
    pub slots: LoadProfile,
}

impl UserSubproblem {
    /// True for slots that are decision variables.
    pub fn is_free(&self, t: usize) -> bool {
        t >= self.t0 && self.window.contains(t)
    }

    pub fn free_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (self.t0.max(self.window.first)..=self.window.last).filter(move |&t| t >= self.t0)
    }

    /// Effective bounds after the cap is applied.
    pub fn bounds(&self, t: usize) -> (f64, f64) {
        let (lo, hi) = (self.power_lower[t], self.power_upper[t]);
        match (&self.cap_headroom, self.is_free(t)) {
            // Headroom within rounding of the power range was accepted at build
            // time; clamping keeps the LP box non-empty.
            (Some(h), true) if self.cap_exact => {
                let v = h[t].clamp(lo, hi);
                (v, v)
            }
            (Some(h), true) => (lo, hi.min(h[t]).max(lo)),
            _ => (lo, hi),
        }
    }

    /// Required lower bound on `Σ_{k=t0..t} x_k`.
    pub fn cumulative_floor(&self) -> f64 {
        self.soc_floor - self.soc_start
    }

    pub fn objective(&self, schedule: &LoadProfile) -> f64 {
        (self.t0..SLOTS).map(|t| self.costs[t] * schedule[t]).sum::<f64>() + self.constant
    }

    pub fn to_lp(&self) -> (LinearProgram, Vec<usize>) {
        let vars: Vec<usize> = self.free_slots().collect();
        let n = vars.len();
        let mut lp = LinearProgram {
            costs: vars.iter().map(|&t| self.costs[t]).collect(),
            lower: Vec::with_capacity(n),
            upper: Vec::with_capacity(n),
            rows: Vec::new(),
        };
        for &t in &vars {
            let (lo, hi) = self.bounds(t);
            lp.lower.push(lo);
            lp.upper.push(hi);
        }
        lp.rows.push(Row {
            coeffs: vec![1.0; n],
            sense: Sense::Eq,
            rhs: self.energy_target,
        });
        let floor = self.cumulative_floor();
        let mut prefix_lo = 0.0;
        for k in 0..n {
            prefix_lo += lp.lower[k];
            // A row already implied by the lower bounds, or by the energy
            // equality on the last slot, adds nothing.
            let implied_by_energy = k + 1 == n && self.energy_target >= floor - 1e-12;
            if prefix_lo >= floor - 1e-12 || implied_by_energy {
                continue;
            }
            let mut coeffs = vec![0.0; n];
            coeffs[..=k].fill(1.0);
            lp.rows.push(Row {
                coeffs,
                sense: Sense::Ge,
                rhs: floor,
            });
        }
        (lp, vars)
    }

    fn infeasible(&self, class: ConstraintClass, slot: Option<usize>, detail: String) -> Infeasibility {
        Infeasibility {
            user_id: self.user_id,
            class,
            slot,
            detail,
        }
    }

    /// Names the constraint family responsible for an empty feasible set.
    fn diagnose(&self) -> Infeasibility {
        let (mut lo, mut hi, mut plo, mut phi) = (0.0, 0.0, 0.0, 0.0);
        for t in self.free_slots() {
            let (l, h) = self.bounds(t);
            lo += l;
            hi += h;
            plo += self.power_lower[t];
            phi += self.power_upper[t];
        }
        let r = self.energy_target;
        let outside = |a: f64, b: f64| r < a - 1e-9 || r > b + 1e-9;
        if outside(plo, phi) {
            self.infeasible(
                ConstraintClass::Energy,
                None,
                format!("need {r:.6} kWh but the window admits [{plo:.6}, {phi:.6}]"),
            )
        } else if outside(lo, hi) {
            self.infeasible(
                ConstraintClass::DemandCap,
                None,
                format!("need {r:.6} kWh but the capped bounds admit [{lo:.6}, {hi:.6}]"),
            )
        } else {
            let floor = self.cumulative_floor();
            let final_floor = self.soc_start + r < self.soc_floor - 1e-9;
            self.infeasible(
                ConstraintClass::SocFloor,
                None,
                if final_floor {
                    format!("final soc {:.6} kWh below floor {:.6}", self.soc_start + r, self.soc_floor)
                } else {
                    format!("cumulative energy cannot stay above {floor:.6} kWh")
                },
            )
        }
    }

    /// Plain-text dump of the instance for inspection (`.lp.txt`).
    pub fn to_lp_text(&self) -> String {
        let (lp, vars) = self.to_lp();
        let name = |k: usize| format!("x{}", vars[k] + 1);
        let mut s = String::new();
        let _ = writeln!(s, "\\ user {} epoch slot {}", self.user_id, self.t0 + 1);
        let _ = writeln!(s, "minimize");
        let terms: Vec<String> = (0..vars.len()).map(|k| format!("{:+.9} {}", lp.costs[k], name(k))).collect();
        let _ = writeln!(s, "  obj: {} {:+.9}", terms.join(" "), self.constant);
        let _ = writeln!(s, "subject to");
        for (i, row) in lp.rows.iter().enumerate() {
            let lhs: Vec<String> = row
                .coeffs
                .iter()
                .enumerate()
                .filter(|(_, &a)| a != 0.0)
                .map(|(k, a)| format!("{:+} {}", a, name(k)))
                .collect();
            let op = match row.sense {
                Sense::Eq => "=",
                Sense::Ge => ">=",
                Sense::Le => "<=",
            };
            let label = if i == 0 { "energy".to_string() } else { format!("soc{i}") };
            let _ = writeln!(s, "  {label}: {} {op} {:.9}", lhs.join(" "), row.rhs);
        }
        let _ = writeln!(s, "bounds");
        for k in 0..vars.len() {
            let _ = writeln!(s, "  {:.9} <= {} <= {:.9}", lp.lower[k], name(k), lp.upper[k]);
        }
        let _ = writeln!(s, "end");
        s
    }
}

pub fn build_subproblem(req: &SubproblemRequest<'_>) -> Result<UserSubproblem, Infeasibility> {
    let user = req.user;
    let window = req.window;
    let t0 = req.t0;
    assert!(t0 < SLOTS, "epoch slot out of range");
    assert!((0.0..=1.0).contains(&req.lambda), "lambda must lie in [0, 1]");

    let p_max = user.max_slot_energy();
    let history = LoadProfile::from_fn(|t| if t < t0 { req.history[t] } else { 0.0 });
    let delivered: f64 = history.total();
    let soc_start = user.initial_soc_kwh + delivered;

    let power_lower = LoadProfile::from_fn(|t| match window.contains(t) && t >= t0 {
        true if user.v2g => -p_max,
        _ => 0.0,
    });
    let power_upper = LoadProfile::from_fn(|t| if window.contains(t) && t >= t0 { p_max } else { 0.0 });

    let lambda = req.lambda;
    let mut costs = LoadProfile::from_fn(|t| {
        if t < t0 {
            0.0
        } else {
            lambda * (req.household[t] + req.others[t] - req.da_profile[t])
        }
    });
    let epoch_weight = (1.0 - lambda) * req.altering_scale;
    costs[t0] += epoch_weight;
    let constant = epoch_weight * (req.others[t0] + req.household[t0]);

    let mut sp = UserSubproblem {
        user_id: user.user_id,
        t0,
        window,
        v2g: user.v2g,
        p_max,
        history,
        costs,
        constant,
        energy_target: user.required_energy_kwh - delivered,
        power_lower,
        power_upper,
        cap_headroom: None,
        cap_exact: false,
        soc_start,
        // Arrival below the floor only forbids further depletion.
        soc_floor: user.soc_floor_kwh().min(soc_start),
    };

    if let Some(cap) = req.cap {
        let level = cap.level();
        let headroom = LoadProfile::from_fn(|t| level - req.others[t] - req.household[t]);
        sp.cap_exact = matches!(cap, CapBound::Exact { .. });
        for t in sp.free_slots() {
            let (lo, hi) = (sp.power_lower[t], sp.power_upper[t]);
            let bad = if sp.cap_exact {
                headroom[t] < lo - 1e-12 || headroom[t] > hi + 1e-12
            } else {
                headroom[t] < lo - 1e-12
            };
            if bad {
                return Err(sp.infeasible(
                    ConstraintClass::DemandCap,
                    Some(t),
                    format!("cap leaves {:.6} kWh, outside the power range [{lo:.6}, {hi:.6}]", headroom[t]),
                ));
            }
        }
        sp.cap_headroom = Some(headroom);
    }
    Ok(sp)
}

/// Weight on discharged energy in the tie-break; exceeds any gain from
/// reordering (at most twice the horizon length per kWh).
const DISCHARGE_WEIGHT: f64 = 4.0 * SLOTS as f64;

/// Splits every variable that may take both signs into charge minus
/// discharge parts, so the tie-break can see throughput.
fn split_signed(lp: &LinearProgram, order: &[f64]) -> (LinearProgram, Vec<f64>, Vec<Option<usize>>) {
    let mut out = lp.clone();
    let mut secondary = order.to_vec();
    let mut partner = vec![None; lp.costs.len()];
    for k in 0..lp.costs.len() {
        if lp.lower[k] < 0.0 && lp.upper[k] > 0.0 {
            let q = out.costs.len();
            partner[k] = Some(q);
            out.lower[k] = 0.0;
            out.costs.push(-lp.costs[k]);
            out.lower.push(0.0);
            out.upper.push(-lp.lower[k]);
            for row in &mut out.rows {
                let a = row.coeffs[k];
                row.coeffs.push(-a);
            }
            secondary.push(DISCHARGE_WEIGHT - order[k]);
        }
    }
    (out, secondary, partner)
}

/// Exact optimum of the program. Among optimal schedules the solver takes
/// the one with least discharge, then the one charging earliest.
pub fn solve(sp: &UserSubproblem) -> Result<PevSchedule, Infeasibility> {
    let (lp, vars) = sp.to_lp();
    let mut slots = sp.history;
    if !vars.is_empty() {
        let order: Vec<f64> = vars.iter().map(|&t| (t + 1) as f64).collect();
        let (split, secondary, partner) = split_signed(&lp, &order);
        match split.solve_lexicographic(Some(&secondary)) {
            Ok(sol) => {
                for (k, &t) in vars.iter().enumerate() {
                    slots[t] = sol.x[k] - partner[k].map_or(0.0, |q| sol.x[q]);
                }
            }
            Err(LpError::Infeasible { .. }) => return Err(sp.diagnose()),
            Err(e) => {
                return Err(sp.infeasible(ConstraintClass::Energy, None, format!("solver failure: {e}")));
            }
        }
    } else if sp.energy_target.abs() > 1e-9 {
        return Err(sp.diagnose());
    }
    Ok(PevSchedule {
        user_id: sp.user_id,
        slots,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Violation {
    pub class: ConstraintClass,
    pub slot: Option<usize>,
    pub magnitude: f64,
}

/// Every constraint `schedule` breaks by more than `tol`.
pub fn check_feasible(schedule: &PevSchedule, sp: &UserSubproblem, tol: f64) -> Vec<Violation> {
    let x = &schedule.slots;
    let mut out = Vec::new();
    let mut push = |class, slot, magnitude: f64| {
        out.push(Violation { class, slot, magnitude });
    };
    for t in 0..sp.t0 {
        let d = (x[t] - sp.history[t]).abs();
        if d > tol {
            push(ConstraintClass::History, Some(t), d);
        }
    }
    for t in sp.t0..SLOTS {
        if !sp.window.contains(t) {
            if x[t].abs() > tol {
                push(ConstraintClass::Window, Some(t), x[t].abs());
            }
            continue;
        }
        let (lo, hi) = (sp.power_lower[t], sp.power_upper[t]);
        if x[t] > hi + tol {
            push(ConstraintClass::PowerLimit, Some(t), x[t] - hi);
        } else if x[t] < lo - tol {
            push(ConstraintClass::PowerLimit, Some(t), lo - x[t]);
        }
        if let Some(h) = &sp.cap_headroom {
            let excess = if sp.cap_exact { (x[t] - h[t]).abs() } else { x[t] - h[t] };
            if excess > tol {
                push(ConstraintClass::DemandCap, Some(t), excess);
            }
        }
    }
    let delivered: f64 = (sp.t0..SLOTS).map(|t| x[t]).sum();
    let gap = (delivered - sp.energy_target).abs();
    if gap > tol {
        push(ConstraintClass::Energy, None, gap);
    }
    let floor = sp.cumulative_floor();
    let mut cum = 0.0;
    for t in sp.free_slots() {
        cum += x[t];
        if cum < floor - tol {
            push(ConstraintClass::SocFloor, Some(t), floor - cum);
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle limited to 6 free slots, instance has {free_slots}")]
    TooLarge { free_slots: usize },
    #[error("grid step {step} does not divide {what}")]
    GridMismatch { step: f64, what: String },
    #[error("no grid point is feasible")]
    Infeasible,
}

/// Exhaustive search over grid-valued schedules.
pub fn brute_force_oracle(sp: &UserSubproblem, grid_step: f64) -> Result<PevSchedule, OracleError> {
    let slots: Vec<usize> = sp.free_slots().collect();
    let free = slots.iter().filter(|&&t| sp.bounds(t).0 < sp.bounds(t).1).count();
    if free > 6 {
        return Err(OracleError::TooLarge { free_slots: free });
    }
    let units = |v: f64, what: &str| -> Result<i64, OracleError> {
        let u = (v / grid_step).round();
        if (u * grid_step - v).abs() > 1e-9 {
            return Err(OracleError::GridMismatch {
                step: grid_step,
                what: format!("{what} = {v}"),
            });
        }
        Ok(u as i64)
    };
    let mut lo = Vec::with_capacity(slots.len());
    let mut hi = Vec::with_capacity(slots.len());
    for &t in &slots {
        let (l, h) = sp.bounds(t);
        if h < l {
            return Err(OracleError::Infeasible);
        }
        lo.push(units(l, &format!("lower bound at slot {}", t + 1))?);
        hi.push(units(h, &format!("upper bound at slot {}", t + 1))?);
    }
    let target = units(sp.energy_target, "energy target")?;
    let floor = (sp.cumulative_floor() / grid_step - 1e-9).ceil() as i64;
    let cost: Vec<f64> = slots.iter().map(|&t| sp.costs[t] * grid_step).collect();

    let n = slots.len();
    let mut suffix_lo = vec![0i64; n + 1];
    let mut suffix_hi = vec![0i64; n + 1];
    for k in (0..n).rev() {
        suffix_lo[k] = suffix_lo[k + 1] + lo[k];
        suffix_hi[k] = suffix_hi[k + 1] + hi[k];
    }

    struct Search<'a> {
        lo: &'a [i64],
        hi: &'a [i64],
        cost: &'a [f64],
        suffix_lo: &'a [i64],
        suffix_hi: &'a [i64],
        target: i64,
        floor: i64,
        current: Vec<i64>,
        best: Option<(f64, Vec<i64>)>,
    }

    impl Search<'_> {
        fn run(&mut self, k: usize, cum: i64, value: f64) {
            let n = self.lo.len();
            if k == n {
                if cum == self.target && self.best.as_ref().is_none_or(|(b, _)| value < *b - 1e-12) {
                    self.best = Some((value, self.current.clone()));
                }
                return;
            }
            for v in self.lo[k]..=self.hi[k] {
                let c = cum + v;
                let rest = self.target - c;
                if rest < self.suffix_lo[k + 1] || rest > self.suffix_hi[k + 1] {
                    continue;
                }
                // Every window slot's running total must clear the floor, except
                // that totals already at or above it never need checking.
                if c < self.floor {
                    continue;
                }
                self.current[k] = v;
                self.run(k + 1, c, value + self.cost[k] * v as f64);
            }
        }
    }

    let mut search = Search {
        lo: &lo,
        hi: &hi,
        cost: &cost,
        suffix_lo: &suffix_lo,
        suffix_hi: &suffix_hi,
        target,
        floor,
        current: vec![0; n],
        best: None,
    };
    if n == 0 {
        return if target == 0 {
            Ok(PevSchedule {
                user_id: sp.user_id,
                slots: sp.history,
            })
        } else {
            Err(OracleError::Infeasible)
        };
    }
    search.run(0, 0, 0.0);
    let (_, best) = search.best.ok_or(OracleError::Infeasible)?;
    let mut out = sp.history;
    for (k, &t) in slots.iter().enumerate() {
        out[t] = best[k] as f64 * grid_step;
    }
    Ok(PevSchedule {
        user_id: sp.user_id,
        slots: out,
    })
}
