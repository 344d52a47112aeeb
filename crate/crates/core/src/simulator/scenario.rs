//! Synthetic forecast graphs and impression streams.
//!
//! Users are drawn from a categorical attribute universe (`a0 … a{n−1}`, each with values
//! `v0 … v{m−1}`); every combination is one supply node. Each node has a base hourly rate,
//! modulated by a day/night cycle and reduced on weekends, and impressions arrive as Poisson
//! counts per node and hour. Contracts mix one-day, multi-day and multi-week flights, and their
//! demand is a share of the in-flight traffic they compete for that grows with contention.

use std::f64::consts::PI;

use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc, Weekday};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::ImpressionEvent;
use crate::model::{AllocationGraph, AttributeMap, Contract, SupplyNode};
use crate::targeting::{self, TargetingExpr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contention {
    Low,
    Medium,
    High,
}

impl Contention {
    /// Range of the share of competed-for traffic booked by a contract.
    fn load(self) -> (f64, f64) {
        match self {
            Self::Low => (0.2, 0.5),
            Self::Medium => (0.5, 0.8),
            Self::High => (0.8, 1.0),
        }
    }

    /// Range of the number of attributes a targeting predicate constrains.
    fn predicates(self, num_attributes: usize) -> (usize, usize) {
        match self {
            Self::Low => (1.min(num_attributes), num_attributes.min(3)),
            Self::Medium => (0, num_attributes.min(2)),
            Self::High => (0, 1.min(num_attributes)),
        }
    }
}

/// Relative frequency of one-day, multi-day (2 to 6 days) and multi-week flights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightMix {
    pub day: f64,
    pub multi_day: f64,
    pub multi_week: f64,
}

impl Default for FlightMix {
    fn default() -> Self {
        Self {
            day: 1.0,
            multi_day: 2.0,
            multi_week: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub num_contracts: usize,
    pub num_attributes: usize,
    #[serde(default = "default_values")]
    pub values_per_attribute: usize,
    #[serde(default)]
    pub flight_mix: FlightMix,
    pub contention: Contention,
    pub rng_seed: u64,
    #[serde(default = "default_days")]
    pub horizon_days: u32,
    /// Expected weekday impressions per day over all nodes.
    #[serde(default = "default_daily")]
    pub daily_impressions: f64,
    /// Relative amplitude of the day/night swing, in `[0, 1)`.
    #[serde(default = "default_diurnal")]
    pub diurnal_amplitude: f64,
    /// Traffic multiplier on Saturdays and Sundays.
    #[serde(default = "default_weekend")]
    pub weekend_factor: f64,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
}

fn default_values() -> usize {
    3
}
fn default_days() -> u32 {
    14
}
fn default_daily() -> f64 {
    20_000.0
}
fn default_diurnal() -> f64 {
    0.5
}
fn default_weekend() -> f64 {
    0.8
}
fn default_start() -> DateTime<Utc> {
    // A Monday.
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

impl ScenarioSpec {
    pub fn new(num_contracts: usize, num_attributes: usize, contention: Contention, rng_seed: u64) -> Self {
        Self {
            num_contracts,
            num_attributes,
            values_per_attribute: default_values(),
            flight_mix: FlightMix::default(),
            contention,
            rng_seed,
            horizon_days: default_days(),
            daily_impressions: default_daily(),
            diurnal_amplitude: default_diurnal(),
            weekend_factor: default_weekend(),
            start: default_start(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_contracts == 0 || self.num_attributes == 0 || self.values_per_attribute == 0 {
            return Err("num_contracts, num_attributes and values_per_attribute must be positive".into());
        }
        let nodes = (self.values_per_attribute as f64).powi(self.num_attributes as i32);
        if nodes > 100_000.0 {
            return Err(format!("attribute universe too large ({nodes} nodes)"));
        }
        if self.horizon_days == 0 || !(self.daily_impressions > 0.0) {
            return Err("horizon_days and daily_impressions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.diurnal_amplitude) || !(self.weekend_factor > 0.0) {
            return Err("diurnal_amplitude must lie in [0, 1) and weekend_factor be positive".into());
        }
        let m = &self.flight_mix;
        if [m.day, m.multi_day, m.multi_week].iter().any(|w| !(*w >= 0.0))
            || m.day + m.multi_day + m.multi_week <= 0.0
        {
            return Err("flight_mix weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub graph: AllocationGraph,
    pub impressions: Vec<ImpressionEvent>,
}

/// Multiplicative traffic profile at the start of an hour.
fn traffic_shape(spec: &ScenarioSpec, t: DateTime<Utc>) -> f64 {
    let diurnal = 1.0 + spec.diurnal_amplitude * (2.0 * PI * (t.hour() as f64 - 9.0) / 24.0).sin();
    let weekend = matches!(t.weekday(), Weekday::Sat | Weekday::Sun);
    diurnal * if weekend { spec.weekend_factor } else { 1.0 }
}

/// Builds a deterministic scenario from `spec`; equal specs give identical output.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (na, nv) = (spec.num_attributes, spec.values_per_attribute);
    let num_nodes = nv.pow(na as u32);

    let attributes: Vec<AttributeMap> = (0..num_nodes)
        .map(|mut code| {
            (0..na)
                .map(|a| {
                    let v = code % nv;
                    code /= nv;
                    (format!("a{a}"), format!("v{v}"))
                })
                .collect()
        })
        .collect();
    let spread = LogNormal::new(0.0, 0.75).expect("valid lognormal");
    let raw: Vec<f64> = (0..num_nodes).map(|_| spread.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let hourly: Vec<f64> = raw.iter().map(|w| spec.daily_impressions / 24.0 * w / total).collect();

    let hours = spec.horizon_days as usize * 24;
    let mut per_hour = vec![vec![0u64; hours]; num_nodes];
    let mut impressions = Vec::new();
    for h in 0..hours {
        let hour_start = spec.start + Duration::hours(h as i64);
        let shape = traffic_shape(spec, hour_start);
        let mut batch = Vec::new();
        for (i, rate) in hourly.iter().enumerate() {
            let lambda = rate * shape;
            let n = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng) as u64
            } else {
                0
            };
            per_hour[i][h] = n;
            for _ in 0..n {
                let offset = rng.random_range(0..3_600_000i64);
                batch.push((offset, i));
            }
        }
        batch.sort_unstable();
        for (offset, i) in batch {
            impressions.push(ImpressionEvent::new(
                format!("imp{}", impressions.len()),
                hour_start + Duration::milliseconds(offset),
                attributes[i].clone(),
            ));
        }
    }

    let supply: Vec<SupplyNode> = (0..num_nodes)
        .map(|i| {
            SupplyNode::new(
                format!("n{i}"),
                attributes[i].clone(),
                per_hour[i].iter().sum::<u64>() as f64,
            )
        })
        .collect();

    let mix = &spec.flight_mix;
    let mix_total = mix.day + mix.multi_day + mix.multi_week;
    let (load_lo, load_hi) = spec.contention.load();
    let (pred_lo, pred_hi) = spec.contention.predicates(na);
    // (targeting, first hour, length in hours, load)
    let mut drafts = Vec::with_capacity(spec.num_contracts);
    for _ in 0..spec.num_contracts {
        let pick = rng.random::<f64>() * mix_total;
        let days = if pick < mix.day {
            1
        } else if pick < mix.day + mix.multi_day {
            rng.random_range(2..=6)
        } else {
            rng.random_range(7..=14)
        };
        let length = (days * 24).min(hours);
        let offset = rng.random_range(0..=hours - length);
        let targeting = random_targeting(&mut rng, na, nv, pred_lo, pred_hi);
        let load = rng.random_range(load_lo..=load_hi);
        drafts.push((targeting, offset, length, load));
    }
    if spec.contention == Contention::High && drafts.len() > 1 {
        share_supply(&mut drafts, &attributes);
    }

    // Demand is the load times the contract's traffic divided by how many contracts compete for
    // it on average, so the load is roughly what each node ends up carrying.
    let eligible: Vec<Vec<bool>> = drafts
        .iter()
        .map(|d| attributes.iter().map(|a| targeting::eligible(a, &d.0)).collect())
        .collect();
    let mut coverage = vec![vec![0u32; hours]; num_nodes];
    for (d, elig) in drafts.iter().zip(&eligible) {
        for i in (0..num_nodes).filter(|&i| elig[i]) {
            for c in &mut coverage[i][d.1..d.1 + d.2] {
                *c += 1;
            }
        }
    }
    let mut contracts = Vec::with_capacity(drafts.len());
    for (j, ((targeting, offset, length, load), elig)) in drafts.into_iter().zip(&eligible).enumerate() {
        let (mut reach, mut shared) = (0.0, 0.0);
        for i in (0..num_nodes).filter(|&i| elig[i]) {
            for h in offset..offset + length {
                reach += per_hour[i][h] as f64;
                shared += (per_hour[i][h] * coverage[i][h] as u64) as f64;
            }
        }
        let demand = if shared > 0.0 { load * reach * reach / shared } else { 0.0 };
        let start = spec.start + Duration::hours(offset as i64);
        let contract = Contract::new(
            format!("c{j}"),
            targeting,
            demand.round().max(1.0),
            start,
            start + Duration::hours(length as i64),
        )
        .map_err(|e| e.to_string())?;
        contracts.push(contract);
    }

    Ok(Scenario {
        graph: AllocationGraph::from_targeting(supply, contracts),
        impressions,
    })
}

fn random_targeting(rng: &mut ChaCha8Rng, na: usize, nv: usize, lo: usize, hi: usize) -> TargetingExpr {
    let k = rng.random_range(lo..=hi);
    let attrs: Vec<usize> = (0..na).collect();
    let mut chosen: Vec<usize> = attrs.choose_multiple(rng, k).copied().collect();
    chosen.sort_unstable();
    let mut terms: Vec<TargetingExpr> = chosen
        .into_iter()
        .map(|a| {
            let width = rng.random_range(1..=nv.max(2) - 1).min(nv);
            let mut values: Vec<usize> = (0..nv).collect::<Vec<_>>().choose_multiple(rng, width).copied().collect();
            values.sort_unstable();
            if values.len() == 1 {
                TargetingExpr::equals(format!("a{a}"), format!("v{}", values[0]))
            } else {
                TargetingExpr::is_in(format!("a{a}"), values.into_iter().map(|v| format!("v{v}")))
            }
        })
        .collect();
    match terms.len() {
        0 => TargetingExpr::True,
        1 => terms.remove(0),
        _ => TargetingExpr::And(terms),
    }
}

/// Broadens any draft that shares no supply node with another draft.
fn share_supply(drafts: &mut [(TargetingExpr, usize, usize, f64)], attributes: &[AttributeMap]) {
    let eligible = |t: &TargetingExpr| -> Vec<bool> {
        attributes.iter().map(|a| targeting::eligible(a, t)).collect()
    };
    for j in 0..drafts.len() {
        let mine = eligible(&drafts[j].0);
        let shared = drafts
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != j)
            .any(|(_, other)| eligible(&other.0).iter().zip(&mine).any(|(a, b)| *a && *b));
        if !shared {
            drafts[j].0 = TargetingExpr::True;
        }
    }
}
