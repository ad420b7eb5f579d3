//! Fleet synthesis: PEV usage patterns, household baselines and the
//! plug-and-charge reference profile.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{Horizon, LoadProfile};

/// Fraction of battery capacity the scheduled state of charge may not drop below.
pub const SOC_FLOOR_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("invalid fleet configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("user {user_id}: cannot deliver {required:.6} kWh inside its window (at most {deliverable:.6} kWh)")]
    Infeasible {
        user_id: usize,
        required: f64,
        deliverable: f64,
    },
    #[error("user {user_id}: {reason}")]
    InvalidProfile { user_id: usize, reason: String },
    #[error("fleet csv row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("fleet csv: {0}")]
    Csv(#[from] csv::Error),
}

fn config_err(field: &str, reason: impl Into<String>) -> FleetError {
    FleetError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Parametric stand-in for one of the usage-pattern histograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distribution {
    Point { value: f64 },
    Uniform { min: f64, max: f64 },
    /// Normal restricted to `[min, max]` by rejection.
    TruncatedNormal { mean: f64, sd: f64, min: f64, max: f64 },
}

impl Distribution {
    fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Point { value } => (value, value),
            Distribution::Uniform { min, max } => (min, max),
            Distribution::TruncatedNormal { min, max, .. } => (min, max),
        }
    }

    /// Checks the parameters and that the support lies inside `[lo, hi]`.
    pub fn validate(&self, field: &str, lo: f64, hi: f64) -> Result<(), FleetError> {
        match *self {
            Distribution::Point { value } if !value.is_finite() => {
                return Err(config_err(field, "point value must be finite"))
            }
            Distribution::Uniform { min, max } if !(min.is_finite() && max.is_finite() && min <= max) => {
                return Err(config_err(field, "uniform needs finite min <= max"))
            }
            Distribution::TruncatedNormal { mean, sd, min, max } => {
                if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
                    return Err(config_err(field, "truncated normal needs finite mean and sd > 0"));
                }
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return Err(config_err(field, "truncated normal needs finite min < max"));
                }
                // Rejection sampling needs non-negligible mass inside the support.
                if mean < min - 4.0 * sd || mean > max + 4.0 * sd {
                    return Err(config_err(field, "truncation interval is more than 4 sd from the mean"));
                }
            }
            _ => {}
        }
        let (a, b) = self.support();
        if a < lo || b > hi {
            return Err(config_err(
                field,
                format!("support [{a}, {b}] leaves the legal range [{lo}, {hi}]"),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Point { value } => value,
            Distribution::Uniform { min, max } => {
                if min == max {
                    min
                } else {
                    rng.random_range(min..max)
                }
            }
            Distribution::TruncatedNormal { mean, sd, min, max } => {
                let normal = Normal::new(mean, sd).expect("validated sd > 0");
                for _ in 0..10_000 {
                    let x = normal.sample(rng);
                    if (min..=max).contains(&x) {
                        return x;
                    }
                }
                mean.clamp(min, max)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub n_users: usize,
    /// Arrival clock time in hours, `[0, 24)`.
    pub arrival: Distribution,
    /// Departure clock time in hours, `[0, 24)`.
    pub departure: Distribution,
    /// Charging time in hours at the outlet rate.
    pub charging_time: Distribution,
    /// Initial state of charge as a fraction of capacity.
    pub initial_soc: Distribution,
    pub outlet_rate_kw: f64,
    pub capacity_kwh: f64,
    pub v2g_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub horizon: Horizon,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            n_users: 1000,
            arrival: Distribution::TruncatedNormal {
                mean: 18.0,
                sd: 2.0,
                min: 12.0,
                max: 23.999,
            },
            departure: Distribution::TruncatedNormal {
                mean: 7.0,
                sd: 1.5,
                min: 0.0,
                max: 11.999,
            },
            charging_time: Distribution::TruncatedNormal {
                mean: 4.0,
                sd: 2.0,
                min: 0.0,
                max: 24.0,
            },
            initial_soc: Distribution::Uniform { min: 0.2, max: 0.8 },
            outlet_rate_kw: 1.8,
            capacity_kwh: 24.0,
            v2g_fraction: 1.0,
            seed: 0,
            horizon: Horizon::default(),
        }
    }
}

impl FleetSpec {
    pub fn validate(&self) -> Result<(), FleetError> {
        if self.n_users == 0 {
            return Err(config_err("n_users", "must be at least 1"));
        }
        self.arrival.validate("arrival", 0.0, 24.0)?;
        self.departure.validate("departure", 0.0, 24.0)?;
        self.charging_time.validate("charging_time", 0.0, f64::INFINITY)?;
        self.initial_soc.validate("initial_soc", 0.0, 1.0)?;
        if !(self.outlet_rate_kw.is_finite() && self.outlet_rate_kw > 0.0) {
            return Err(config_err("outlet_rate_kw", "must be > 0"));
        }
        if !(self.capacity_kwh.is_finite() && self.capacity_kwh > 0.0) {
            return Err(config_err("capacity_kwh", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.v2g_fraction) {
            return Err(config_err("v2g_fraction", "must lie in [0, 1]"));
        }
        if self.horizon.start_hour >= 24 {
            return Err(config_err("horizon.start_hour", "must lie in 0..24"));
        }
        Ok(())
    }
}

/// Contiguous connection window in horizon positions (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub first: usize,
    pub last: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.first..=self.last).contains(&t)
    }

    pub fn slots(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// One vehicle's daily usage pattern.
///
/// `arrival` and `departure` are clock slots 1..=24 (24 is the hour starting at
/// midnight); the window wraps midnight when `departure < arrival`. Both ends
/// are connected slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PevProfile {
    pub user_id: usize,
    pub arrival: u8,
    pub departure: u8,
    pub required_energy_kwh: f64,
    pub capacity_kwh: f64,
    pub initial_soc_kwh: f64,
    pub outlet_rate_kw: f64,
    pub v2g: bool,
}

impl PevProfile {
    /// Maximum energy per one-hour slot, in either direction.
    pub fn max_slot_energy(&self) -> f64 {
        self.outlet_rate_kw
    }

    pub fn soc_floor_kwh(&self) -> f64 {
        SOC_FLOOR_FRACTION * self.capacity_kwh
    }

    /// Connection window mapped onto the horizon; fails if the mapped window
    /// would straddle the horizon boundary.
    pub fn window(&self, horizon: Horizon) -> Result<Window, FleetError> {
        let first = horizon.position(self.arrival);
        let last = horizon.position(self.departure);
        if last < first {
            return Err(FleetError::InvalidProfile {
                user_id: self.user_id,
                reason: format!(
                    "window {}..{} is not contiguous in a horizon starting at hour {}",
                    self.arrival, self.departure, horizon.start_hour
                ),
            });
        }
        Ok(Window { first, last })
    }

    pub fn validate(&self, horizon: Horizon) -> Result<Window, FleetError> {
        let bad = |reason: String| FleetError::InvalidProfile {
            user_id: self.user_id,
            reason,
        };
        if !(1..=24).contains(&self.arrival) || !(1..=24).contains(&self.departure) {
            return Err(bad("arrival and departure must be slots 1..=24".into()));
        }
        if !(self.capacity_kwh.is_finite() && self.capacity_kwh > 0.0) {
            return Err(bad("capacity must be > 0".into()));
        }
        if !(self.outlet_rate_kw.is_finite() && self.outlet_rate_kw > 0.0) {
            return Err(bad("outlet rate must be > 0".into()));
        }
        if !(0.0..=self.capacity_kwh).contains(&self.initial_soc_kwh) {
            return Err(bad(format!(
                "initial soc {} outside [0, {}]",
                self.initial_soc_kwh, self.capacity_kwh
            )));
        }
        if !(self.required_energy_kwh >= 0.0) {
            return Err(bad("required energy must be >= 0".into()));
        }
        if self.required_energy_kwh > self.capacity_kwh - self.initial_soc_kwh + 1e-9 {
            return Err(bad("required energy exceeds battery headroom".into()));
        }
        let window = self.window(horizon)?;
        let deliverable = self.outlet_rate_kw * window.len() as f64;
        if self.required_energy_kwh > deliverable + 1e-9 {
            return Err(FleetError::Infeasible {
                user_id: self.user_id,
                required: self.required_energy_kwh,
                deliverable,
            });
        }
        Ok(window)
    }
}

/// Energy drawn by `charging_time_h` hours at `outlet_rate_kw`.
pub fn required_energy(charging_time_h: f64, outlet_rate_kw: f64) -> Result<f64, FleetError> {
    if !(charging_time_h >= 0.0) {
        return Err(FleetError::Domain(format!(
            "charging time must be >= 0 h, got {charging_time_h}"
        )));
    }
    if !(outlet_rate_kw > 0.0) {
        return Err(FleetError::Domain(format!(
            "outlet rate must be > 0 kW, got {outlet_rate_kw}"
        )));
    }
    Ok(outlet_rate_kw * charging_time_h)
}

fn clock_slot(hour: f64) -> u8 {
    let h = hour.floor().rem_euclid(24.0) as u8;
    if h == 0 {
        24
    } else {
        h
    }
}

/// Draws `n_users` usage patterns. Deterministic in `spec.seed`.
pub fn sample_fleet(spec: &FleetSpec) -> Result<Vec<PevProfile>, FleetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let omega = spec.outlet_rate_kw;
    let cap = spec.capacity_kwh;
    let mut fleet = Vec::with_capacity(spec.n_users);
    for user_id in 0..spec.n_users {
        let arrival = clock_slot(spec.arrival.sample(&mut rng));
        let departure = clock_slot(spec.departure.sample(&mut rng));
        let hours = spec.charging_time.sample(&mut rng);
        let soc_frac = spec.initial_soc.sample(&mut rng);
        let v2g = rng.random_bool(spec.v2g_fraction);

        let first = spec.horizon.position(arrival);
        let last = spec.horizon.position(departure);
        if last < first {
            return Err(config_err(
                "departure",
                format!(
                    "user {user_id} arrives at slot {arrival} and departs at slot {departure}, \
                     which wraps the horizon starting at hour {}",
                    spec.horizon.start_hour
                ),
            ));
        }
        let window_len = (last - first + 1) as f64;
        let initial_soc_kwh = soc_frac * cap;
        let energy = required_energy(hours, omega)?
            .min(cap - initial_soc_kwh)
            .min(omega * window_len)
            .max(0.0);
        fleet.push(PevProfile {
            user_id,
            arrival,
            departure,
            required_energy_kwh: energy,
            capacity_kwh: cap,
            initial_soc_kwh,
            outlet_rate_kw: omega,
            v2g,
        });
    }
    Ok(fleet)
}

/// Shape of the household baseline: a flat base plus morning and evening bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdSpec {
    pub mean_daily_kwh: f64,
    pub morning_peak_hour: f64,
    pub morning_peak_factor: f64,
    pub evening_peak_hour: f64,
    pub evening_peak_factor: f64,
    pub peak_width_hours: f64,
    /// Log-space standard deviation of the per-user scale factor.
    pub scale_sigma: f64,
}

impl Default for HouseholdSpec {
    fn default() -> Self {
        HouseholdSpec {
            mean_daily_kwh: 20.0,
            morning_peak_hour: 7.5,
            morning_peak_factor: 0.8,
            evening_peak_hour: 19.5,
            evening_peak_factor: 1.6,
            peak_width_hours: 2.0,
            scale_sigma: 0.25,
        }
    }
}

impl HouseholdSpec {
    pub fn validate(&self) -> Result<(), FleetError> {
        let nonneg = |v: f64, field: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_err(field, "must be finite and >= 0"))
            }
        };
        nonneg(self.mean_daily_kwh, "mean_daily_kwh")?;
        nonneg(self.morning_peak_factor, "morning_peak_factor")?;
        nonneg(self.evening_peak_factor, "evening_peak_factor")?;
        nonneg(self.scale_sigma, "scale_sigma")?;
        if !(self.peak_width_hours.is_finite() && self.peak_width_hours > 0.0) {
            return Err(config_err("peak_width_hours", "must be > 0"));
        }
        for (v, field) in [
            (self.morning_peak_hour, "morning_peak_hour"),
            (self.evening_peak_hour, "evening_peak_hour"),
        ] {
            if !(0.0..24.0).contains(&v) {
                return Err(config_err(field, "must lie in [0, 24)"));
            }
        }
        Ok(())
    }

    /// Normalised daily shape over the horizon (sums to 1).
    pub fn shape(&self, horizon: Horizon) -> LoadProfile {
        let bump = |hour: f64, centre: f64| {
            let d = (hour - centre).rem_euclid(24.0);
            let d = d.min(24.0 - d);
            (-d * d / (2.0 * self.peak_width_hours.powi(2))).exp()
        };
        let raw = LoadProfile::from_fn(|t| {
            let hour = horizon.clock_hour(t) as f64 + 0.5;
            1.0 + self.morning_peak_factor * bump(hour, self.morning_peak_hour)
                + self.evening_peak_factor * bump(hour, self.evening_peak_hour)
        });
        raw.scale(1.0 / raw.total())
    }
}

/// One non-negative baseline profile per user, deterministic in `seed`.
pub fn baseline_household(
    spec: &HouseholdSpec,
    n_users: usize,
    horizon: Horizon,
    seed: u64,
) -> Result<Vec<LoadProfile>, FleetError> {
    spec.validate()?;
    let shape = spec.shape(horizon).scale(spec.mean_daily_kwh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = spec.scale_sigma;
    Ok((0..n_users)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            // Mean-one lognormal scale.
            shape.scale((sigma * z - 0.5 * sigma * sigma).exp())
        })
        .collect())
}

/// Plug-and-charge: full outlet rate from arrival until the need is met.
pub fn greedy_schedule(profile: &PevProfile, horizon: Horizon) -> Result<LoadProfile, FleetError> {
    let window = profile.window(horizon)?;
    let rate = profile.max_slot_energy();
    let mut schedule = LoadProfile::zeros();
    let mut remaining = profile.required_energy_kwh;
    for t in window.slots() {
        if remaining <= 0.0 {
            break;
        }
        let e = rate.min(remaining);
        schedule[t] = e;
        remaining -= e;
    }
    if remaining > 1e-9 {
        return Err(FleetError::Infeasible {
            user_id: profile.user_id,
            required: profile.required_energy_kwh,
            deliverable: rate * window.len() as f64,
        });
    }
    Ok(schedule)
}

/// Charges in the cheapest window slots under `prices`, full rate first;
/// equal prices go to the earlier slot.
pub fn cheapest_slot_schedule(
    profile: &PevProfile,
    horizon: Horizon,
    prices: &LoadProfile,
) -> Result<LoadProfile, FleetError> {
    let window = profile.window(horizon)?;
    let rate = profile.max_slot_energy();
    let mut slots: Vec<usize> = window.slots().collect();
    slots.sort_by(|&a, &b| prices[a].total_cmp(&prices[b]).then(a.cmp(&b)));
    let mut schedule = LoadProfile::zeros();
    let mut remaining = profile.required_energy_kwh;
    for t in slots {
        if remaining <= 0.0 {
            break;
        }
        let e = rate.min(remaining);
        schedule[t] = e;
        remaining -= e;
    }
    if remaining > 1e-9 {
        return Err(FleetError::Infeasible {
            user_id: profile.user_id,
            required: profile.required_energy_kwh,
            deliverable: rate * window.len() as f64,
        });
    }
    Ok(schedule)
}

/// Aggregate of all household baselines plus every vehicle charging greedily.
pub fn uncoordinated_profile(
    fleet: &[PevProfile],
    households: &[LoadProfile],
    horizon: Horizon,
) -> Result<LoadProfile, FleetError> {
    let mut total: LoadProfile = households.iter().sum();
    for pev in fleet {
        total += greedy_schedule(pev, horizon)?;
    }
    Ok(total)
}

const FLEET_HEADER: [&str; 8] = [
    "user_id",
    "arrival",
    "departure",
    "energy_kwh",
    "capacity_kwh",
    "soc0_kwh",
    "rate_kw",
    "v2g",
];

pub fn write_fleet_csv<W: Write>(writer: W, fleet: &[PevProfile]) -> Result<(), FleetError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FLEET_HEADER)?;
    for p in fleet {
        w.write_record([
            p.user_id.to_string(),
            p.arrival.to_string(),
            p.departure.to_string(),
            format!("{:.6}", p.required_energy_kwh),
            format!("{:.6}", p.capacity_kwh),
            format!("{:.6}", p.initial_soc_kwh),
            format!("{:.6}", p.outlet_rate_kw),
            p.v2g.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_fleet_csv<R: Read>(reader: R) -> Result<Vec<PevProfile>, FleetError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != FLEET_HEADER {
        return Err(FleetError::Row {
            row: 1,
            reason: format!("expected header `{}`", FLEET_HEADER.join(",")),
        });
    }
    let mut fleet = Vec::new();
    for (i, record) in r.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let bad = |k: usize| FleetError::Row {
            row,
            reason: format!("cannot parse `{}` value `{}`", FLEET_HEADER[k], field(k)),
        };
        let num = |k: usize| field(k).parse::<f64>().map_err(|_| bad(k));
        let slot = |k: usize| {
            field(k)
                .parse::<u8>()
                .ok()
                .filter(|s| (1..=24).contains(s))
                .ok_or_else(|| bad(k))
        };
        let v2g = match field(7) {
            "true" | "1" => true,
            "false" | "0" => false,
            _ => return Err(bad(7)),
        };
        fleet.push(PevProfile {
            user_id: field(0).parse().map_err(|_| bad(0))?,
            arrival: slot(1)?,
            departure: slot(2)?,
            required_energy_kwh: num(3)?,
            capacity_kwh: num(4)?,
            initial_soc_kwh: num(5)?,
            outlet_rate_kw: num(6)?,
            v2g,
        });
    }
    Ok(fleet)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(v: f64) -> Distribution {
        Distribution::Point { value: v }
    }

    #[test]
    fn required_energy_examples() {
        assert!((required_energy(4.0, 1.8).unwrap() - 7.2).abs() < 1e-12);
        assert_eq!(required_energy(0.0, 1.8).unwrap(), 0.0);
        assert!((required_energy(40.0 / 3.0, 1.8).unwrap() - 24.0).abs() < 1e-9);
        assert!(matches!(required_energy(-1.0, 1.8), Err(FleetError::Domain(_))));
    }

    #[test]
    fn reference_fleet_uses_fixed_hardware() {
        let spec = FleetSpec::default();
        let fleet = sample_fleet(&spec).unwrap();
        assert_eq!(fleet.len(), 1000);
        for p in &fleet {
            assert_eq!(p.capacity_kwh, 24.0);
            assert_eq!(p.outlet_rate_kw, 1.8);
            p.validate(spec.horizon).unwrap();
        }
    }

    #[test]
    fn degenerate_point_fleet() {
        let spec = FleetSpec {
            n_users: 1,
            arrival: point(18.0),
            departure: point(7.0),
            charging_time: point(4.0),
            initial_soc: point(0.2),
            ..FleetSpec::default()
        };
        let fleet = sample_fleet(&spec).unwrap();
        assert_eq!(fleet.len(), 1);
        let p = &fleet[0];
        assert_eq!((p.arrival, p.departure), (18, 7));
        assert!((p.required_energy_kwh - 7.2).abs() < 1e-12);
        assert_eq!(p.window(spec.horizon).unwrap().len(), 14);
    }

    #[test]
    fn energy_is_clipped_to_headroom_and_window() {
        let spec = FleetSpec {
            n_users: 1,
            arrival: point(18.0),
            departure: point(19.0),
            charging_time: point(10.0),
            initial_soc: point(0.2),
            ..FleetSpec::default()
        };
        let p = &sample_fleet(&spec).unwrap()[0];
        assert!((p.required_energy_kwh - 3.6).abs() < 1e-12);

        let spec = FleetSpec {
            n_users: 1,
            arrival: point(14.0),
            departure: point(10.0),
            charging_time: point(12.0),
            initial_soc: point(0.8),
            ..FleetSpec::default()
        };
        let p = &sample_fleet(&spec).unwrap()[0];
        assert!((p.required_energy_kwh - 24.0 * 0.2).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = FleetSpec {
            n_users: 50,
            seed: 7,
            ..FleetSpec::default()
        };
        assert_eq!(sample_fleet(&spec).unwrap(), sample_fleet(&spec).unwrap());
        let other = FleetSpec { seed: 8, ..spec.clone() };
        assert_ne!(sample_fleet(&spec).unwrap(), sample_fleet(&other).unwrap());
    }

    #[test]
    fn bad_distribution_names_field() {
        let spec = FleetSpec {
            initial_soc: Distribution::Uniform { min: 0.5, max: 1.5 },
            ..FleetSpec::default()
        };
        match sample_fleet(&spec) {
            Err(FleetError::Config { field, .. }) => assert_eq!(field, "initial_soc"),
            other => panic!("expected config error, got {other:?}"),
        }
        let spec = FleetSpec {
            arrival: Distribution::TruncatedNormal {
                mean: 18.0,
                sd: 0.0,
                min: 12.0,
                max: 24.0,
            },
            ..FleetSpec::default()
        };
        assert!(matches!(sample_fleet(&spec), Err(FleetError::Config { field, .. }) if field == "arrival"));
    }

    #[test]
    fn wrapping_window_is_rejected() {
        let spec = FleetSpec {
            n_users: 1,
            arrival: point(8.0),
            departure: point(20.0),
            ..FleetSpec::default()
        };
        assert!(matches!(sample_fleet(&spec), Err(FleetError::Config { field, .. }) if field == "departure"));
    }

    #[test]
    fn household_total_tracks_mean() {
        let spec = HouseholdSpec::default();
        let h = baseline_household(&spec, 1000, Horizon::default(), 3).unwrap();
        assert_eq!(h.len(), 1000);
        let total: f64 = h.iter().map(|p| p.total()).sum();
        assert!((total - 20_000.0).abs() / 20_000.0 < 0.05, "total {total}");
        assert!(h.iter().all(|p| p.iter().all(|&v| v >= 0.0)));
        assert_eq!(h, baseline_household(&spec, 1000, Horizon::default(), 3).unwrap());
    }

    #[test]
    fn zero_mean_household_is_zero() {
        let spec = HouseholdSpec {
            mean_daily_kwh: 0.0,
            ..HouseholdSpec::default()
        };
        let h = baseline_household(&spec, 10, Horizon::default(), 1).unwrap();
        assert!(h.iter().all(|p| *p == LoadProfile::zeros()));
    }

    #[test]
    fn household_peaks_in_the_evening() {
        let horizon = Horizon::default();
        let shape = HouseholdSpec::default().shape(horizon);
        let (t, _) = shape.peak();
        assert_eq!(horizon.clock_hour(t), 19);
    }

    fn pev(arrival: u8, departure: u8, energy: f64) -> PevProfile {
        PevProfile {
            user_id: 0,
            arrival,
            departure,
            required_energy_kwh: energy,
            capacity_kwh: 24.0,
            initial_soc_kwh: 10.0,
            outlet_rate_kw: 1.8,
            v2g: true,
        }
    }

    #[test]
    fn greedy_fills_from_arrival() {
        // Horizon starting at hour 1 makes horizon position = slot number - 1.
        let horizon = Horizon::new(1);
        let s = greedy_schedule(&pev(18, 24, 3.6), horizon).unwrap();
        for t in 0..crate::profile::SLOTS {
            let expected = if t == 17 || t == 18 { 1.8 } else { 0.0 };
            assert_eq!(s[t], expected, "slot {}", t + 1);
        }
    }

    #[test]
    fn greedy_detects_infeasible_need() {
        let horizon = Horizon::new(1);
        assert!(matches!(
            greedy_schedule(&pev(18, 19, 3.7), horizon),
            Err(FleetError::Infeasible { .. })
        ));
    }

    #[test]
    fn cheapest_slots_take_the_need() {
        let horizon = Horizon::new(1);
        let prices = LoadProfile::from_fn(|t| [5.0, 1.0, 3.0, 1.0, 2.0][t % 5]);
        let s = cheapest_slot_schedule(&pev(18, 24, 4.5), horizon, &prices).unwrap();
        // Window is positions 17..=23; prices there are 3,1,2,5,1,3,1.
        let mut expected = LoadProfile::zeros();
        expected[18] = 1.8;
        expected[21] = 1.8;
        expected[23] = 0.9;
        assert!(s.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn empty_fleet_is_household_sum() {
        let h = vec![LoadProfile::constant(1.0), LoadProfile::constant(0.5)];
        let u = uncoordinated_profile(&[], &h, Horizon::default()).unwrap();
        assert_eq!(u, LoadProfile::constant(1.5));
    }

    #[test]
    fn two_user_fleet_matches_hourly_simulation() {
        let horizon = Horizon::default();
        let fleet = vec![pev(18, 7, 5.0), PevProfile { user_id: 1, ..pev(21, 3, 2.5) }];
        let households = vec![LoadProfile::constant(0.7), LoadProfile::constant(0.3)];
        // Hour-by-hour plug-and-charge replay over wall-clock time.
        let mut oracle = LoadProfile::constant(1.0);
        for p in &fleet {
            let mut remaining = p.required_energy_kwh;
            let mut hour = p.arrival as usize % 24;
            loop {
                let t = (hour + 24 - 12) % 24;
                let e = remaining.min(1.8);
                oracle[t] += e;
                remaining -= e;
                if remaining <= 0.0 || hour == p.departure as usize % 24 {
                    break;
                }
                hour = (hour + 1) % 24;
            }
        }
        let got = uncoordinated_profile(&fleet, &households, horizon).unwrap();
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn csv_has_expected_header() {
        let fleet = vec![pev(18, 7, 7.2)];
        let mut buf = Vec::new();
        write_fleet_csv(&mut buf, &fleet).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("user_id,arrival,departure,energy_kwh,capacity_kwh,soc0_kwh,rate_kw,v2g\n"));
        assert!(text.contains("0,18,7,7.200000,24.000000,10.000000,1.800000,true"));
    }

    #[test]
    fn csv_rejects_bad_slot() {
        let text = "user_id,arrival,departure,energy_kwh,capacity_kwh,soc0_kwh,rate_kw,v2g\n0,25,7,1,24,5,1.8,true\n";
        match read_fleet_csv(text.as_bytes()) {
            Err(FleetError::Row { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }
}
