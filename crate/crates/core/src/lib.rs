//! Tatonnement for Fisher markets with chores.
//!
//! Agents must each earn a budget by doing divisible chores and dislike the
//! work according to a linear or CES disutility. The crate provides the
//! demand oracles, naive and relative tatonnement, the convex potential whose
//! subgradients are the relative excess demands, and tools to certify,
//! enumerate and classify competitive equilibria.

pub mod demand;
pub mod dynamics;
pub mod equilibrium;
pub mod market;
pub mod minnorm;
pub mod potential;
pub mod simplex;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use demand::{TieBreaking, TieRule};
pub use dynamics::{Mode, StepRule, StepSchedule, StopReason, StopRule, Trajectory};
pub use market::{Agent, DisutilitySpec, Market, MarketError, Moduli};
