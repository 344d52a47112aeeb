//! Delivery and smoothness metrics.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::simulator::SimulationReport;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("smoothness series is empty")]
    EmptySeries,
    #[error("percentile must lie in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error("baseline has no under-delivery; improvement is undefined")]
    UndefinedImprovement,
    #[error("reports cover different contracts")]
    ContractMismatch,
}

/// `σ_j(t) = 100 · (y_j(t) − y*_j(t)) / d_j` with `d_j` the booked demand.
pub fn sigma(delivered: f64, linear_goal: f64, booked: f64) -> f64 {
    100.0 * (delivered - linear_goal) / booked
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoint {
    pub t: DateTime<Utc>,
    pub contract_id: String,
    pub sigma: f64,
    pub finished: bool,
}

/// `σ_j(t)` samples for contracts within their flight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothnessSeries {
    pub points: Vec<SigmaPoint>,
}

/// One line of `delivery_timeseries.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub cycle_end_ts: DateTime<Utc>,
    pub contract_id: String,
    pub delivered_cum: f64,
    pub linear_goal: f64,
    pub booked_demand: f64,
    pub flight_end: DateTime<Utc>,
}

impl SmoothnessSeries {
    /// Contracts whose flight ends by the last sample time count as finished.
    pub fn from_rows(rows: &[TimeseriesRow]) -> Self {
        let Some(horizon) = rows.iter().map(|r| r.cycle_end_ts).max() else {
            return Self::default();
        };
        let points = rows
            .iter()
            .map(|r| SigmaPoint {
                t: r.cycle_end_ts,
                contract_id: r.contract_id.clone(),
                sigma: sigma(r.delivered_cum, r.linear_goal, r.booked_demand),
                finished: r.flight_end <= horizon,
            })
            .collect();
        Self { points }
    }

    pub fn from_report(report: &SimulationReport) -> Self {
        let points = report
            .contracts
            .iter()
            .flat_map(|c| {
                c.series.iter().map(move |p| SigmaPoint {
                    t: p.t,
                    contract_id: c.id.clone(),
                    sigma: sigma(p.delivered, p.linear_goal, c.booked_demand),
                    finished: c.finished,
                })
            })
            .collect();
        Self { points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Population {
    All,
    Finished,
    Unfinished,
}

impl Population {
    fn admits(self, finished: bool) -> bool {
        match self {
            Self::All => true,
            Self::Finished => finished,
            Self::Unfinished => !finished,
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], f: f64) -> f64 {
    let rank = ((f / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `σ^f = max_t` of the `f`-th percentile of `σ_j(t)` over contracts sampled at `t`.
///
/// With `positive_part` only over-delivery counts (`max{0, σ_j(t)}`).
pub fn smoothness_quantile(
    series: &SmoothnessSeries,
    f: f64,
    population: Population,
    positive_part: bool,
) -> Result<f64, MetricsError> {
    if !(f > 0.0 && f <= 100.0) {
        return Err(MetricsError::BadPercentile(f));
    }
    let mut by_time: BTreeMap<DateTime<Utc>, Vec<f64>> = BTreeMap::new();
    for p in series.points.iter().filter(|p| population.admits(p.finished)) {
        let v = if positive_part { p.sigma.max(0.0) } else { p.sigma };
        by_time.entry(p.t).or_default().push(v);
    }
    by_time
        .into_values()
        .map(|mut values| {
            values.sort_by(f64::total_cmp);
            nearest_rank(&values, f)
        })
        .reduce(f64::max)
        .ok_or(MetricsError::EmptySeries)
}

/// Total under-delivery `Σ (booked − delivered) / Σ booked`.
pub fn underdelivery_fraction<I>(contracts: I) -> f64
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let (short, booked) = contracts
        .into_iter()
        .fold((0.0, 0.0), |(s, b), (booked, delivered)| {
            (s + (booked - delivered).max(0.0), b + booked)
        });
    if booked > 0.0 {
        short / booked
    } else {
        0.0
    }
}

/// Percent reduction in under-delivery relative to a baseline.
pub fn improvement(baseline_underdelivery: f64, test_underdelivery: f64) -> Result<f64, MetricsError> {
    if baseline_underdelivery <= 0.0 {
        return Err(MetricsError::UndefinedImprovement);
    }
    Ok(100.0 * (baseline_underdelivery - test_underdelivery) / baseline_underdelivery)
}

pub fn delivery_improvement(
    test: &SimulationReport,
    baseline: &SimulationReport,
) -> Result<f64, MetricsError> {
    let ids = |r: &SimulationReport| r.contracts.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
    let (mut a, mut b) = (ids(test), ids(baseline));
    a.sort();
    b.sort();
    if a != b {
        return Err(MetricsError::ContractMismatch);
    }
    improvement(baseline.underdelivery(), test.underdelivery())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn t(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn series(rows: &[(i64, &str, f64, bool)]) -> SmoothnessSeries {
        SmoothnessSeries {
            points: rows
                .iter()
                .map(|&(h, id, sigma, finished)| SigmaPoint {
                    t: t(h),
                    contract_id: id.into(),
                    sigma,
                    finished,
                })
                .collect(),
        }
    }

    #[test]
    fn linear_delivery_is_perfectly_smooth() {
        let s = series(&[(1, "a", sigma(10.0, 10.0, 70.0), true), (2, "a", sigma(20.0, 20.0, 70.0), true)]);
        for f in [1.0, 50.0, 75.0, 95.0, 100.0] {
            assert_eq!(smoothness_quantile(&s, f, Population::All, false).unwrap(), 0.0);
        }
    }

    #[test]
    fn nearest_rank_over_three_contracts() {
        let s = series(&[(1, "a", -10.0, true), (1, "b", 0.0, true), (1, "c", 20.0, true)]);
        assert_eq!(smoothness_quantile(&s, 75.0, Population::All, false).unwrap(), 20.0);
        assert_eq!(smoothness_quantile(&s, 50.0, Population::All, false).unwrap(), 0.0);
        assert_eq!(smoothness_quantile(&s, 10.0, Population::All, false).unwrap(), -10.0);
    }

    #[test]
    fn maximum_is_over_time() {
        let s = series(&[(1, "a", 1.0, true), (2, "a", 4.5, true), (3, "a", -2.0, true)]);
        assert_eq!(smoothness_quantile(&s, 95.0, Population::All, false).unwrap(), 4.5);
    }

    #[test]
    fn populations_and_positive_part() {
        let s = series(&[(1, "a", -5.0, true), (1, "b", 7.0, false)]);
        assert_eq!(smoothness_quantile(&s, 95.0, Population::Finished, false).unwrap(), -5.0);
        assert_eq!(smoothness_quantile(&s, 95.0, Population::Finished, true).unwrap(), 0.0);
        assert_eq!(smoothness_quantile(&s, 95.0, Population::Unfinished, false).unwrap(), 7.0);
        let only_finished = series(&[(1, "a", 1.0, true)]);
        assert_eq!(
            smoothness_quantile(&only_finished, 75.0, Population::Unfinished, false),
            Err(MetricsError::EmptySeries)
        );
    }

    #[test]
    fn percentile_bounds() {
        let s = series(&[(1, "a", 1.0, true)]);
        assert!(smoothness_quantile(&s, 0.0, Population::All, false).is_err());
        assert!(smoothness_quantile(&s, 100.5, Population::All, false).is_err());
        assert!(smoothness_quantile(&SmoothnessSeries::default(), 50.0, Population::All, false).is_err());
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(0.10, 0.07).unwrap() - 30.0).abs() < 1e-12);
        assert_eq!(improvement(0.1, 0.1).unwrap(), 0.0);
        assert_eq!(improvement(0.1, 0.0).unwrap(), 100.0);
        assert_eq!(improvement(0.0, 0.0), Err(MetricsError::UndefinedImprovement));
    }

    #[test]
    fn underdelivery_ignores_overdelivery() {
        let u = underdelivery_fraction([(100.0, 90.0), (100.0, 100.0)]);
        assert!((u - 0.05).abs() < 1e-15);
        assert_eq!(underdelivery_fraction(Vec::<(f64, f64)>::new()), 0.0);
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_in_f(
            rows in proptest::collection::vec((0i64..5, 0usize..6, -100.0..100.0f64), 1..40),
            f1 in 1.0..=100.0f64,
            f2 in 1.0..=100.0f64,
        ) {
            let s = SmoothnessSeries {
                points: rows.iter().map(|&(h, c, v)| SigmaPoint {
                    t: t(h), contract_id: format!("c{c}"), sigma: v, finished: true,
                }).collect(),
            };
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = smoothness_quantile(&s, lo, Population::All, false).unwrap();
            let b = smoothness_quantile(&s, hi, Population::All, false).unwrap();
            prop_assert!(a <= b);
        }

        #[test]
        fn improvement_sign_flips_on_swap(u1 in 0.001..1.0f64, u2 in 0.001..1.0f64) {
            let forward = improvement(u1, u2).unwrap();
            let backward = improvement(u2, u1).unwrap();
            prop_assert_eq!(forward.signum() * backward.signum() <= 0.0, true);
        }
    }
}
