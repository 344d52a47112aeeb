//! Demand adjustment from delivery lag.
//!
//! At each re-optimization boundary a contract's lag is measured in hours against its linear
//! goal. Lagging by more than `δ` hours multiplies the reported remaining demand by `β+`;
//! leading by more than `δ` divides it by `β−`. A boost stays on until the contract is back
//! within `release_within_cycles` cycles of the goal.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::Contract;

#[derive(Debug, thiserror::Error)]
#[error("invalid feedback configuration: {0}")]
pub struct FeedbackConfigError(String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    /// Allowed slack `δ` in hours.
    pub delta_hours: f64,
    /// `β+`, applied when behind; `None` disables boosting.
    #[serde(default)]
    pub boost_behind: Option<f64>,
    /// `β−`, applied when ahead; `None` disables damping.
    #[serde(default)]
    pub damp_ahead: Option<f64>,
    /// A boost is released once the lag is within this many cycle lengths.
    #[serde(default = "default_release")]
    pub release_within_cycles: f64,
}

fn default_release() -> f64 {
    2.0
}

impl Default for FeedbackConfig {
    /// Both directions enabled: `δ = 4h`, `β+ = 1.5`, `β− = 10`, release within two cycles.
    fn default() -> Self {
        Self {
            delta_hours: 4.0,
            boost_behind: Some(1.5),
            damp_ahead: Some(10.0),
            release_within_cycles: 2.0,
        }
    }
}

impl FeedbackConfig {
    /// Damping only, the configuration used against frontloading.
    pub fn damp_only() -> Self {
        Self {
            boost_behind: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackConfigError> {
        if !(self.delta_hours > 0.0) {
            return Err(FeedbackConfigError("delta_hours must be positive".into()));
        }
        if self.boost_behind.is_some_and(|b| !(b > 1.0)) {
            return Err(FeedbackConfigError("boost_behind must exceed 1".into()));
        }
        if self.damp_ahead.is_some_and(|b| !(b > 1.0)) {
            return Err(FeedbackConfigError("damp_ahead must exceed 1".into()));
        }
        if !(self.release_within_cycles >= 0.0) {
            return Err(FeedbackConfigError(
                "release_within_cycles must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Delivery bookkeeping for one contract between cycles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeliveryState {
    pub delivered: f64,
    pub boost_active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackAction {
    None,
    Boost,
    Damp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackOutcome {
    /// Remaining demand to report to the planner.
    pub adjusted_demand: f64,
    /// Positive when behind the linear goal.
    pub lag_hours: f64,
    pub action: FeedbackAction,
}

/// Smooth delivery target `y*_j(t)`, clamped to `[0, booked]` outside the flight.
pub fn linear_goal(contract: &Contract, t: DateTime<Utc>) -> f64 {
    let total = (contract.end - contract.start).num_milliseconds() as f64;
    let elapsed = (t - contract.start).num_milliseconds() as f64;
    contract.booked_demand * (elapsed / total).clamp(0.0, 1.0)
}

/// Hours `h` with `y_j(t) = y*_j(t − h)`, extrapolating the goal linearly.
pub fn lag_hours(contract: &Contract, delivered: f64, t: DateTime<Utc>) -> f64 {
    (linear_goal(contract, t) - delivered) * contract.flight_hours() / contract.booked_demand
}

/// Adjusts the remaining demand `booked − delivered` for the planner.
///
/// The result is always derived from the true remaining demand, so repeated application
/// within one cycle is a no-op. `cycle_hours` sizes the boost release window.
pub fn apply_feedback(
    state: &mut DeliveryState,
    contract: &Contract,
    t: DateTime<Utc>,
    cfg: &FeedbackConfig,
    cycle_hours: f64,
) -> FeedbackOutcome {
    let remaining = (contract.booked_demand - state.delivered).max(0.0);
    let lag = lag_hours(contract, state.delivered, t);
    let release_band = cfg.release_within_cycles * cycle_hours;
    let (adjusted, action) = match (cfg.boost_behind, cfg.damp_ahead) {
        (_, Some(damp)) if lag < -cfg.delta_hours => {
            state.boost_active = false;
            (remaining / damp, FeedbackAction::Damp)
        }
        (Some(boost), _) if lag > cfg.delta_hours || (state.boost_active && lag > release_band) => {
            state.boost_active = true;
            (remaining * boost, FeedbackAction::Boost)
        }
        _ => {
            state.boost_active = false;
            (remaining, FeedbackAction::None)
        }
    };
    FeedbackOutcome {
        adjusted_demand: adjusted,
        lag_hours: lag,
        action,
    }
}
