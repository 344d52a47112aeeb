//! End-to-end delivery simulation with periodic re-optimization.
//!
//! Time is cut into re-optimization cycles of `reopt_period_hours`. At every boundary the
//! remaining demand of each contract is restated from what was actually delivered, optionally
//! adjusted by feedback, and a new plan is built from a forecast of the remaining flight. The
//! forecast is the true remaining impression count per attribute class scaled by the
//! configured error multiplier. Between boundaries impressions are served statelessly from the
//! current plan; a contract that reaches its booked demand stops being eligible immediately.
//!
//! Serving comes in two modes. `Expected` adds the fractional expected delivery of every
//! impression and is fully deterministic. `Sampled` draws one contract per impression from a
//! random stream derived from the seed and the impression's position.

mod engine;
pub mod robustness;
pub mod scenario;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dual::{self, DualError};
use crate::feedback::{FeedbackConfig, FeedbackConfigError};
use crate::metrics;
use crate::model::{AllocationGraph, AttributeMap, ModelError};

pub use robustness::{error_rate, theorem1_bound, theorem1_exact};
pub use scenario::{generate_scenario, Contention, FlightMix, Scenario, ScenarioSpec};

/// One logged user visit, or `weight` identical visits at the same instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub id: String,
    pub ts: DateTime<Utc>,
    #[serde(default)]
    pub attributes: AttributeMap,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: u64,
}

fn one() -> u64 {
    1
}

fn is_one(w: &u64) -> bool {
    *w == 1
}

impl ImpressionEvent {
    pub fn new(id: impl Into<String>, ts: DateTime<Utc>, attributes: AttributeMap) -> Self {
        Self {
            id: id.into(),
            ts,
            attributes,
            weight: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Hwm,
    Dual,
    /// Reactive pacing without a forecast, used as a comparator.
    Base,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServingMode {
    #[default]
    Expected,
    Sampled,
}

/// Ratio of forecast to real supply, globally or per supply node id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForecastError {
    Global(f64),
    /// Nodes not listed are forecast exactly.
    PerNode(BTreeMap<String, f64>),
}

impl Default for ForecastError {
    fn default() -> Self {
        Self::Global(1.0)
    }
}

impl ForecastError {
    pub fn multiplier(&self, node_id: &str) -> f64 {
        match self {
            Self::Global(m) => *m,
            Self::PerNode(map) => map.get(node_id).copied().unwrap_or(1.0),
        }
    }

    fn check(&self) -> Result<(), SimError> {
        let bad = match self {
            Self::Global(m) => !(*m > 0.0 && m.is_finite()),
            Self::PerNode(map) => map.values().any(|m| !(*m > 0.0 && m.is_finite())),
        };
        if bad {
            return Err(SimError::Config("forecast error multipliers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub feedback: Option<FeedbackConfig>,
    pub reopt_period_hours: f64,
    #[serde(default)]
    pub forecast_error_multiplier: ForecastError,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ServingMode,
    /// Also run the reactive comparator and report the improvement over it.
    #[serde(default)]
    pub baseline_comparator: bool,
    /// Number of parallel serving shards within a cycle.
    #[serde(default = "one_shard")]
    pub shards: usize,
    /// Stop the simulation early; contracts still in flight are reported as unfinished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<DateTime<Utc>>,
    #[serde(default = "dual_tol")]
    pub dual_tol: f64,
    #[serde(default = "dual_sweeps")]
    pub dual_max_sweeps: usize,
}

fn one_shard() -> usize {
    1
}

fn dual_tol() -> f64 {
    dual::DEFAULT_TOL
}

fn dual_sweeps() -> usize {
    dual::DEFAULT_MAX_SWEEPS
}

impl SimulationConfig {
    pub fn new(algorithm: Algorithm, reopt_period_hours: f64) -> Self {
        Self {
            algorithm,
            feedback: None,
            reopt_period_hours,
            forecast_error_multiplier: ForecastError::default(),
            seed: 0,
            mode: ServingMode::Expected,
            baseline_comparator: false,
            shards: 1,
            until: None,
            dual_tol: dual::DEFAULT_TOL,
            dual_max_sweeps: dual::DEFAULT_MAX_SWEEPS,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.reopt_period_hours > 0.0 && self.reopt_period_hours.is_finite()) {
            return Err(SimError::Config("reopt_period_hours must be positive".into()));
        }
        if self.reopt_period_hours * 3.6e6 < 1.0 {
            return Err(SimError::Config("reopt_period_hours is below one millisecond".into()));
        }
        if self.shards == 0 {
            return Err(SimError::Config("shards must be at least 1".into()));
        }
        self.forecast_error_multiplier.check()?;
        if let Some(fb) = &self.feedback {
            fb.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feedback(#[from] FeedbackConfigError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("impression {id} (position {index}) is earlier than the one before it")]
    Unsorted { index: usize, id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryPoint {
    pub t: DateTime<Utc>,
    pub delivered: f64,
    pub linear_goal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub id: String,
    pub booked_demand: f64,
    pub delivered: f64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// The flight ended within the simulated horizon.
    pub finished: bool,
    /// Cumulative delivery at each cycle boundary within the flight, ending at the flight end.
    pub series: Vec<DeliveryPoint>,
}

/// Serving rates in force during one cycle (`α_j` for HWM and DUAL, the paced rate for Base).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub rates: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSummary {
    pub sigma75_finished: Option<f64>,
    pub sigma95_finished: Option<f64>,
    pub sigma75_unfinished: Option<f64>,
    pub sigma95_unfinished: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub algorithm: Algorithm,
    pub mode: ServingMode,
    pub contracts: Vec<ContractReport>,
    pub cycles: Vec<CycleRecord>,
    pub total_impressions: f64,
    pub unallocated: f64,
    /// `Σ (booked − delivered) / Σ booked`.
    pub underdelivery_fraction: f64,
    pub smoothness: SmoothnessSummary,
    /// Percent improvement in under-delivery over the reactive comparator, when requested.
    pub delivery_improvement: Option<f64>,
    pub diagnostics: Vec<String>,
}

impl SimulationReport {
    pub fn underdelivery(&self) -> f64 {
        self.underdelivery_fraction
    }

    pub fn contract(&self, id: &str) -> Option<&ContractReport> {
        self.contracts.iter().find(|c| c.id == id)
    }

    pub fn delivered_total(&self) -> f64 {
        self.contracts.iter().map(|c| c.delivered).sum()
    }

    /// Rows of the delivery time series CSV.
    pub fn timeseries(&self) -> Vec<metrics::TimeseriesRow> {
        self.contracts
            .iter()
            .flat_map(|c| {
                c.series.iter().map(move |p| metrics::TimeseriesRow {
                    cycle_end_ts: p.t,
                    contract_id: c.id.clone(),
                    delivered_cum: p.delivered,
                    linear_goal: p.linear_goal,
                    booked_demand: c.booked_demand,
                    flight_end: c.end,
                })
            })
            .collect()
    }

    fn summarize(&mut self) {
        self.underdelivery_fraction = metrics::underdelivery_fraction(
            self.contracts.iter().map(|c| (c.booked_demand, c.delivered)),
        );
        let series = metrics::SmoothnessSeries::from_report(self);
        let q = |f, pop| metrics::smoothness_quantile(&series, f, pop, false).ok();
        self.smoothness = SmoothnessSummary {
            sigma75_finished: q(75.0, metrics::Population::Finished),
            sigma95_finished: q(95.0, metrics::Population::Finished),
            sigma75_unfinished: q(75.0, metrics::Population::Unfinished),
            sigma95_unfinished: q(95.0, metrics::Population::Unfinished),
        };
    }
}

/// Replays `impressions` through the configured planner with periodic re-optimization.
///
/// The whole stream is held in memory because the forecast at each boundary is derived from
/// the impressions still to come.
pub fn run_simulation(
    graph: &AllocationGraph,
    impressions: &[ImpressionEvent],
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SimError> {
    let mut report = engine::run(graph, impressions, cfg, cfg.algorithm)?;
    if cfg.baseline_comparator && cfg.algorithm != Algorithm::Base {
        let base = engine::run(graph, impressions, cfg, Algorithm::Base)?;
        report.delivery_improvement = metrics::delivery_improvement(&report, &base).ok();
    }
    Ok(report)
}

/// The reactive comparator: paces each contract toward its linear goal without a forecast.
///
/// Each cycle a contract's rate is the delivery still needed to reach the goal at the end of
/// the cycle divided by the eligible traffic it saw in the previous cycle (rate one when no
/// traffic has been seen yet), clamped to `[0, 1]`. Delivery within a cycle is capped at the
/// goal. Impressions are served with the HWM truncation rule, contracts with less observed
/// traffic first.
pub fn baseline_pacing(
    graph: &AllocationGraph,
    impressions: &[ImpressionEvent],
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SimError> {
    engine::run(graph, impressions, cfg, Algorithm::Base)
}
