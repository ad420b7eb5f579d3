//! Day-ahead and real-time price series, the cleared day-ahead purchase, and
//! the retailer's procurement cost.
//!
//! Prices are stored in $/kWh. Price files carry $/MWh and are converted on
//! ingest.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{Horizon, LoadProfile, SLOTS};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("{path}: row {row}: {reason}")]
    Parse {
        path: String,
        row: usize,
        reason: String,
    },
    #[error("{path}: expected {SLOTS} data rows, found {found} ({deficit})")]
    RowCount {
        path: String,
        found: usize,
        deficit: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid market parameter `{field}`: {reason}")]
    Config { field: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Market {
    #[serde(rename = "DA")]
    DayAhead,
    #[serde(rename = "RT")]
    RealTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub market: Market,
    pub label: String,
    /// $/kWh per slot.
    pub prices: LoadProfile,
}

impl PriceSeries {
    pub fn new(market: Market, label: impl Into<String>, prices: LoadProfile) -> Self {
        PriceSeries {
            market,
            label: label.into(),
            prices,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        self.prices[t]
    }

    pub fn mean_per_mwh(&self) -> f64 {
        self.prices.total() / SLOTS as f64 * 1000.0
    }
}

/// Everything the retailer knows (or will learn) about one delivery day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketDay {
    pub da_prices: PriceSeries,
    pub rt_prices: PriceSeries,
    /// Energy cleared in the day-ahead market, kWh per slot.
    pub da_profile: LoadProfile,
}

impl MarketDay {
    pub fn with_da_profile(&self, da_profile: LoadProfile) -> MarketDay {
        MarketDay {
            da_profile,
            ..self.clone()
        }
    }
}

/// Realized minus purchased energy; negative slots are sold back.
pub fn imbalance(actual: &LoadProfile, da_profile: &LoadProfile) -> LoadProfile {
    *actual - *da_profile
}

/// Cost split into the day-ahead purchase and the real-time settlement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub day_ahead: f64,
    pub real_time: f64,
    pub total: f64,
}

pub fn cost_breakdown(day: &MarketDay, actual: &LoadProfile) -> CostBreakdown {
    let day_ahead = day.da_profile.dot(&day.da_prices.prices);
    let real_time = imbalance(actual, &day.da_profile).dot(&day.rt_prices.prices);
    CostBreakdown {
        day_ahead,
        real_time,
        total: day_ahead + real_time,
    }
}

/// ⟨l^DA, p^DA⟩ + ⟨actual − l^DA, p^RT⟩ in dollars.
pub fn procurement_cost(day: &MarketDay, actual: &LoadProfile) -> f64 {
    cost_breakdown(day, actual).total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSpec {
    /// 1-based horizon slots that spike.
    pub slots: Vec<usize>,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPriceSpec {
    /// Mean day-ahead level, $/MWh.
    pub base_level_per_mwh: f64,
    /// Relative amplitude of the daily price swing.
    #[serde(default = "default_diurnal_amplitude")]
    pub diurnal_amplitude: f64,
    /// Clock hour of the day-ahead price maximum.
    #[serde(default = "default_peak_hour")]
    pub peak_hour: f64,
    /// Relative sd of the day-level DA multiplier.
    #[serde(default = "default_day_sigma")]
    pub da_day_sigma: f64,
    /// Relative sd of per-slot RT deviations (truncated at 3 sd).
    #[serde(default = "default_rt_sigma")]
    pub rt_noise_sigma: f64,
    #[serde(default)]
    pub spike: Option<SpikeSpec>,
}

fn default_diurnal_amplitude() -> f64 {
    0.35
}
fn default_peak_hour() -> f64 {
    19.0
}
fn default_day_sigma() -> f64 {
    0.1
}
fn default_rt_sigma() -> f64 {
    0.1
}

impl Default for SynthPriceSpec {
    fn default() -> Self {
        SynthPriceSpec {
            base_level_per_mwh: 33.94,
            diurnal_amplitude: default_diurnal_amplitude(),
            peak_hour: default_peak_hour(),
            da_day_sigma: default_day_sigma(),
            rt_noise_sigma: default_rt_sigma(),
            spike: None,
        }
    }
}

impl SynthPriceSpec {
    pub fn validate(&self) -> Result<(), MarketError> {
        let cfg = |field: &str, reason: &str| MarketError::Config {
            field: field.into(),
            reason: reason.into(),
        };
        if !(self.base_level_per_mwh.is_finite() && self.base_level_per_mwh >= 0.0) {
            return Err(cfg("base_level_per_mwh", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.diurnal_amplitude) {
            return Err(cfg("diurnal_amplitude", "must lie in [0, 1)"));
        }
        if !(0.0..0.25).contains(&self.da_day_sigma) {
            return Err(cfg("da_day_sigma", "must lie in [0, 0.25)"));
        }
        if !(0.0..0.25).contains(&self.rt_noise_sigma) {
            return Err(cfg("rt_noise_sigma", "must lie in [0, 0.25)"));
        }
        if let Some(spike) = &self.spike {
            if !(spike.multiplier.is_finite() && spike.multiplier >= 1.0) {
                return Err(cfg("spike.multiplier", "must be >= 1"));
            }
            if spike.slots.iter().any(|s| !(1..=SLOTS).contains(s)) {
                return Err(cfg("spike.slots", "slots must lie in 1..=24"));
            }
        }
        Ok(())
    }
}

/// Synthetic delivery day: a smooth DA curve and a noisier RT curve with
/// optional spikes. The returned day carries an all-zero DA profile; attach the
/// cleared purchase with [`MarketDay::with_da_profile`].
pub fn synth_prices(seed: u64, spec: &SynthPriceSpec, horizon: Horizon) -> Result<MarketDay, MarketError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let day_factor = 1.0 + spec.da_day_sigma * gauss().clamp(-3.0, 3.0);
    let base = spec.base_level_per_mwh / 1000.0;
    let da = LoadProfile::from_fn(|t| {
        let hour = horizon.clock_hour(t) as f64 + 0.5;
        let phase = 2.0 * std::f64::consts::PI * (hour - spec.peak_hour) / 24.0;
        base * day_factor * (1.0 + spec.diurnal_amplitude * phase.cos())
    });
    let mut rt = LoadProfile::from_fn(|t| da[t] * (1.0 + spec.rt_noise_sigma * gauss().clamp(-3.0, 3.0)));
    if let Some(spike) = &spec.spike {
        for &s in &spike.slots {
            let t = s - 1;
            rt[t] = spike.multiplier * rt[t].max(da[t]);
        }
    }
    let label = format!("synthetic-{seed}");
    Ok(MarketDay {
        da_prices: PriceSeries::new(Market::DayAhead, label.clone(), da),
        rt_prices: PriceSeries::new(Market::RealTime, label, rt),
        da_profile: LoadProfile::zeros(),
    })
}

/// How much of the retailer's bid the day-ahead market clears.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ClearingPolicy {
    Full,
    Fraction { fraction: f64 },
    PerSlotFraction { fractions: LoadProfile },
    Clamp { caps: LoadProfile },
}

impl Default for ClearingPolicy {
    fn default() -> Self {
        ClearingPolicy::Full
    }
}

pub fn build_da_profile(shaped_target: &LoadProfile, policy: &ClearingPolicy) -> LoadProfile {
    match policy {
        ClearingPolicy::Full => *shaped_target,
        ClearingPolicy::Fraction { fraction } => shaped_target.scale(*fraction),
        ClearingPolicy::PerSlotFraction { fractions } => shaped_target.zip_with(fractions, |v, f| v * f),
        ClearingPolicy::Clamp { caps } => shaped_target.zip_with(caps, f64::min),
    }
}

fn read_slot_csv<R: Read>(reader: R, path: &str, value_column: &str) -> Result<LoadProfile, MarketError> {
    let parse_err = |row: usize, reason: String| MarketError::Parse {
        path: path.to_string(),
        row,
        reason,
    };
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if header != ["slot", value_column] {
        return Err(parse_err(1, format!("expected header `slot,{value_column}`")));
    }
    let mut values: [Option<f64>; SLOTS] = [None; SLOTS];
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        rows += 1;
        let slot: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .filter(|s| (1..=SLOTS).contains(s))
            .ok_or_else(|| parse_err(row, format!("slot `{}` is not in 1..=24", rec.get(0).unwrap_or(""))))?;
        let raw = rec.get(1).unwrap_or("");
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(row, format!("`{raw}` is not a number")))?;
        if values[slot - 1].replace(value).is_some() {
            return Err(parse_err(row, format!("slot {slot} appears twice")));
        }
    }
    if rows != SLOTS {
        let deficit = if rows < SLOTS {
            format!("{} missing", SLOTS - rows)
        } else {
            format!("{} extra", rows - SLOTS)
        };
        return Err(MarketError::RowCount {
            path: path.to_string(),
            found: rows,
            deficit,
        });
    }
    Ok(LoadProfile::from_fn(|t| values[t].expect("24 distinct slots present")))
}

/// Parses a `slot,price_per_mwh` file; prices are returned in $/kWh.
pub fn read_prices<R: Read>(reader: R, path: &str, market: Market) -> Result<PriceSeries, MarketError> {
    let per_mwh = read_slot_csv(reader, path, "price_per_mwh")?;
    if let Some(t) = (0..SLOTS).find(|&t| per_mwh[t] < 0.0) {
        return Err(MarketError::Parse {
            path: path.to_string(),
            row: t + 2,
            reason: format!("negative price {} at slot {}", per_mwh[t], t + 1),
        });
    }
    let label = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PriceSeries::new(market, label, per_mwh.scale(1e-3)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MarketError + '_ {
    move |source| MarketError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_prices(path: &Path, market: Market) -> Result<PriceSeries, MarketError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_prices(file, &path.display().to_string(), market)
}

/// Parses a `slot,kwh` profile; values must be non-negative.
pub fn read_profile<R: Read>(reader: R, path: &str) -> Result<LoadProfile, MarketError> {
    let p = read_slot_csv(reader, path, "kwh")?;
    if let Some(t) = (0..SLOTS).find(|&t| p[t] < 0.0) {
        return Err(MarketError::Parse {
            path: path.to_string(),
            row: t + 2,
            reason: format!("negative energy at slot {}", t + 1),
        });
    }
    Ok(p)
}

pub fn load_profile(path: &Path) -> Result<LoadProfile, MarketError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_profile(file, &path.display().to_string())
}

/// Writes `slot,kwh` rows at full precision, so reading back is exact.
pub fn write_profile<W: Write>(mut w: W, profile: &LoadProfile) -> std::io::Result<()> {
    writeln!(w, "slot,kwh")?;
    for (t, v) in profile.iter().enumerate() {
        writeln!(w, "{},{}", t + 1, v)?;
    }
    Ok(())
}

pub fn write_prices<W: Write>(mut w: W, series: &PriceSeries) -> std::io::Result<()> {
    writeln!(w, "slot,price_per_mwh")?;
    for (t, v) in series.prices.iter().enumerate() {
        writeln!(w, "{},{:.6}", t + 1, v * 1000.0)?;
    }
    Ok(())
}

pub const DA_PRICES_FILE: &str = "da_prices.csv";
pub const RT_PRICES_FILE: &str = "rt_prices.csv";
pub const DA_PROFILE_FILE: &str = "da_profile.csv";

/// Reads a bundle directory holding the two price files and the DA profile.
pub fn load_market_day(dir: &Path) -> Result<MarketDay, MarketError> {
    Ok(MarketDay {
        da_prices: load_prices(&dir.join(DA_PRICES_FILE), Market::DayAhead)?,
        rt_prices: load_prices(&dir.join(RT_PRICES_FILE), Market::RealTime)?,
        da_profile: load_profile(&dir.join(DA_PROFILE_FILE))?,
    })
}

pub fn save_market_day(dir: &Path, day: &MarketDay) -> Result<(), MarketError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| {
        let path: PathBuf = dir.join(name);
        let mut buf = Vec::new();
        f(&mut buf).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))
    };
    write(DA_PRICES_FILE, &|b| write_prices(b, &day.da_prices))?;
    write(RT_PRICES_FILE, &|b| write_prices(b, &day.rt_prices))?;
    write(DA_PROFILE_FILE, &|b| write_profile(b, &day.da_profile))?;
    Ok(())
}
