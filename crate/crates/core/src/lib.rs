//! Blockchain-coordinated V2G trading: a leader-follower pricing game
//! between an EV aggregator and plugged-in EVs, executed through a
//! simulated permissioned ledger of smart charging points.
//!
//! - [`market`]: the pure pricing game (follower best response, leader
//!   revenue, precision-limited price search).
//! - [`ledger`]: signed transactions, hash-linked blocks, majority
//!   voting, full-node and light-client verification.
//! - [`protocol`]: the per-slot trading cycle binding the two.
//! - [`fleet`]: driving-pattern data, tariff, and demand profiles.
//! - [`simulator`]: horizon runs, the plug-and-charge baseline, and
//!   report aggregation.

pub mod fleet;
pub mod ledger;
pub mod market;
pub mod protocol;
pub mod simulator;

pub use fleet::{EvRecord, PriceSchedule, Tier};
pub use market::{
    EvChargeState, FollowerDecision, FollowerMode, LeaderSolution, MarketParams, RevenueBreakdown,
};
pub use protocol::{SlotOutcome, World};
pub use simulator::{RunReport, ScenarioConfig};
