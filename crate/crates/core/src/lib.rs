//! Coordinated day-ahead and real-time charging schedules for a fleet of
//! plug-in electric vehicles.

pub mod coordinator;
pub mod fleet;
mod flow;
pub mod lp;
pub mod market;
pub mod profile;
pub mod report;
pub mod scenario;
pub mod subproblem;

pub use fleet::{FleetError, FleetSpec, PevProfile, Window};
pub use market::{CostBreakdown, MarketDay, PriceSeries};
pub use profile::{profile_mse, Horizon, LoadProfile, SLOTS};
pub use subproblem::{PevSchedule, UserSubproblem};
