//! Scenario configuration: one TOML file describing the fleet, households,
//! market day, altering and cap parameters, plus the seeds that make a run
//! reproducible.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coordinator::{
    demand_cap, participants, AlteringSpec, CoordinatorConfig, CoordinatorError, DayConfig, Participant,
};
use crate::fleet::{
    baseline_household, cheapest_slot_schedule, greedy_schedule, read_fleet_csv, sample_fleet, FleetError,
    FleetSpec, HouseholdSpec, PevProfile,
};
use crate::market::{
    build_da_profile, load_prices, load_profile, synth_prices, ClearingPolicy, Market, MarketDay, MarketError,
    SpikeSpec, SynthPriceSpec, DA_PRICES_FILE, DA_PROFILE_FILE, RT_PRICES_FILE,
};
use crate::profile::{Horizon, LoadProfile};
use crate::report::{CaseConfig, RunInfo};
use crate::subproblem::CapBound;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
}

fn config_err(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// What the retailer bids day-ahead when the market source has no profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaTarget {
    /// Household forecast plus every vehicle charging in its cheapest DA hours.
    #[default]
    CheapestHours,
    /// Household forecast plus plug-and-charge vehicles.
    Uncoordinated,
    /// Household forecast only.
    Household,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DayAheadSpec {
    #[serde(default)]
    pub target: DaTarget,
    #[serde(default)]
    pub clearing: ClearingPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketSource {
    Synthetic {
        #[serde(flatten)]
        prices: SynthPriceSpec,
    },
    /// Directory with `da_prices.csv`, `rt_prices.csv` and optionally
    /// `da_profile.csv`.
    Files { dir: PathBuf },
}

impl Default for MarketSource {
    fn default() -> Self {
        MarketSource::Synthetic {
            prices: SynthPriceSpec {
                spike: Some(SpikeSpec {
                    slots: vec![8],
                    multiplier: 5.0,
                }),
                ..SynthPriceSpec::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapForm {
    /// Aggregate at most the cap in every slot.
    #[default]
    Ceiling,
    /// Aggregate pinned to the cap in every slot; kept for inspection only,
    /// it cannot meet the energy constraints.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapSpec {
    /// Cap as a multiple of the mean hourly aggregate demand; absent = no cap.
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub form: CapForm,
}

impl Default for CapSpec {
    fn default() -> Self {
        CapSpec {
            kappa: Some(1.5),
            form: CapForm::Ceiling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Master seed; fleet, household and price seeds derive from it.
    pub seed: u64,
    #[serde(default)]
    pub horizon: Horizon,
    /// Read the fleet from this CSV instead of sampling it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet_csv: Option<PathBuf>,
    #[serde(default)]
    pub fleet: FleetSpec,
    #[serde(default)]
    pub households: HouseholdSpec,
    #[serde(default)]
    pub market: MarketSource,
    #[serde(default)]
    pub day_ahead: DayAheadSpec,
    #[serde(default)]
    pub altering: AlteringSpec,
    #[serde(default)]
    pub cap: CapSpec,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    /// The reference spike day: 1000 vehicles, a 5x RT spike at the 19:00 slot,
    /// λ = 0.5, κ = 1.5.
    fn default() -> Self {
        ScenarioConfig {
            seed: 2015,
            horizon: Horizon::default(),
            fleet_csv: None,
            fleet: FleetSpec::default(),
            households: HouseholdSpec::default(),
            market: MarketSource::default(),
            day_ahead: DayAheadSpec::default(),
            altering: AlteringSpec::default(),
            cap: CapSpec::default(),
            coordinator: CoordinatorConfig::default(),
            output_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub fleet: u64,
    pub households: u64,
    pub prices: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Seeds {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(k);
            rng.next_u64()
        };
        Seeds {
            master,
            fleet: stream(1),
            households: stream(2),
            prices: stream(3),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<document>".into());
            config_err(&field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serialises")
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.fleet_csv.as_mut() {
            resolve(p);
        }
        if let MarketSource::Files { dir } = &mut cfg.market {
            resolve(dir);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let field = |prefix: &str, e: FleetError| match e {
            FleetError::Config { field, reason } => config_err(&format!("{prefix}.{field}"), reason),
            e => config_err(prefix, e.to_string()),
        };
        if self.fleet_csv.is_none() {
            self.fleet.validate().map_err(|e| field("fleet", e))?;
        }
        self.households.validate().map_err(|e| field("households", e))?;
        if let Some(p) = &self.fleet_csv {
            if !p.is_file() {
                return Err(config_err("fleet_csv", format!("{} does not exist", p.display())));
            }
        }
        match &self.market {
            MarketSource::Synthetic { prices } => prices.validate().map_err(|e| match e {
                MarketError::Config { field, reason } => config_err(&format!("market.{field}"), reason),
                e => config_err("market", e.to_string()),
            })?,
            MarketSource::Files { dir } => {
                for name in [DA_PRICES_FILE, RT_PRICES_FILE] {
                    if !dir.join(name).is_file() {
                        return Err(config_err("market.dir", format!("{} is missing", dir.join(name).display())));
                    }
                }
            }
        }
        if let ClearingPolicy::Fraction { fraction } = self.day_ahead.clearing {
            if !(fraction.is_finite() && fraction >= 0.0) {
                return Err(config_err("day_ahead.clearing.fraction", "must be >= 0"));
            }
        }
        self.altering
            .validate()
            .map_err(|e| config_err("altering", e.to_string()))?;
        if let Some(k) = self.cap.kappa {
            if !(k.is_finite() && k > 1.0) {
                return Err(config_err("cap.kappa", "must be > 1"));
            }
        }
        self.coordinator
            .convergence
            .validate()
            .map_err(|e| config_err("coordinator.convergence", e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }
}

/// Everything a run needs, materialised from a config.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seeds: Seeds,
    pub fleet: Vec<PevProfile>,
    pub households: Vec<LoadProfile>,
    pub participants: Vec<Participant>,
    pub market: MarketDay,
    pub cap: Option<CapBound>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} users, seed {}, cap {}",
            self.fleet.len(),
            self.seeds.master,
            self.cap.map_or("off".to_string(), |c| format!("{:.1} kWh", c.level()))
        )
    }
}

impl Scenario {
    pub fn case_config(&self) -> CaseConfig {
        CaseConfig {
            coordinator: self.config.coordinator,
            altering: self.config.altering,
            cap: self.cap,
        }
    }

    /// Full DDR day: altering on, cap as configured.
    pub fn day_config(&self) -> DayConfig {
        DayConfig {
            coordinator: self.config.coordinator,
            altering: Some(self.config.altering),
            cap: self.cap,
        }
    }

    pub fn run_info(&self) -> RunInfo {
        RunInfo {
            config_hash: self.config.hash(),
            seeds: self.seeds,
            n_users: self.fleet.len(),
        }
    }
}

pub fn sample_scenario_fleet(config: &ScenarioConfig) -> Result<Vec<PevProfile>, ScenarioError> {
    let spec = FleetSpec {
        seed: config.seeds().fleet,
        horizon: config.horizon,
        ..config.fleet.clone()
    };
    Ok(sample_fleet(&spec)?)
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    config.validate()?;
    let seeds = config.seeds();
    let horizon = config.horizon;
    let fleet = match &config.fleet_csv {
        Some(path) => {
            let file = fs::File::open(path).map_err(|source| ScenarioError::Io {
                path: path.clone(),
                source,
            })?;
            read_fleet_csv(file)?
        }
        None => sample_scenario_fleet(config)?,
    };
    let households = baseline_household(&config.households, fleet.len(), horizon, seeds.households)?;
    let participants = participants(&fleet, &households, horizon)?;

    let (mut market, bundled_profile) = match &config.market {
        MarketSource::Synthetic { prices } => (synth_prices(seeds.prices, prices, horizon)?, None),
        MarketSource::Files { dir } => {
            let day = MarketDay {
                da_prices: load_prices(&dir.join(DA_PRICES_FILE), Market::DayAhead)?,
                rt_prices: load_prices(&dir.join(RT_PRICES_FILE), Market::RealTime)?,
                da_profile: LoadProfile::zeros(),
            };
            let profile_path = dir.join(DA_PROFILE_FILE);
            let profile = if profile_path.is_file() {
                Some(load_profile(&profile_path)?)
            } else {
                None
            };
            (day, profile)
        }
    };
    market.da_profile = match bundled_profile {
        Some(p) => p,
        None => {
            let forecast: LoadProfile = households.iter().sum();
            let mut target = forecast;
            for p in &fleet {
                target += match config.day_ahead.target {
                    DaTarget::CheapestHours => cheapest_slot_schedule(p, horizon, &market.da_prices.prices)?,
                    DaTarget::Uncoordinated => greedy_schedule(p, horizon)?,
                    DaTarget::Household => LoadProfile::zeros(),
                };
            }
            build_da_profile(&target, &config.day_ahead.clearing)
        }
    };

    let cap = config.cap.kappa.map(|k| {
        let level = demand_cap(&participants, k);
        match config.cap.form {
            CapForm::Ceiling => CapBound::Ceiling { level },
            CapForm::Exact => CapBound::Exact { level: level / k },
        }
    });
    Ok(Scenario {
        config: config.clone(),
        seeds,
        fleet,
        households,
        participants,
        market,
        cap,
    })
}
