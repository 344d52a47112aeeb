//! Fixtures and independent reference computations shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;

use chrono::{DateTime, Duration, TimeZone, Utc};
use gdalloc::simulator::ImpressionEvent;
use gdalloc::{AllocationGraph, AttributeMap, Contract, SupplyNode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap()
}

pub fn attrs(pairs: &[(&str, &str)]) -> AttributeMap {
    pairs.iter().copied().collect()
}

pub fn contract(id: &str, targeting: &str, demand: f64, days: i64) -> Contract {
    Contract::new(
        id,
        targeting.parse().unwrap(),
        demand,
        t0(),
        t0() + Duration::days(days),
    )
    .unwrap()
}

/// The three-contract example: users by gender, state and age bucket.
pub fn figure3() -> AllocationGraph {
    let age = ("age_bucket", "5");
    let supply = vec![
        SupplyNode::new("n1", attrs(&[("gender", "male"), age]), 200_000.0),
        SupplyNode::new("n2", attrs(&[("state", "NV"), age]), 200_000.0),
        SupplyNode::new("n3", attrs(&[("gender", "male"), ("state", "CA"), age]), 100_000.0),
        SupplyNode::new("n4", attrs(&[("state", "CA"), age]), 100_000.0),
        SupplyNode::new("n5", attrs(&[("gender", "male"), ("state", "WA"), age]), 200_000.0),
        SupplyNode::new("n6", attrs(&[("state", "WA"), age]), 120_000.0),
    ];
    let contracts = vec![
        contract("male", "gender = male", 100_000.0, 1),
        contract("ca", "state = CA", 200_000.0, 1),
        contract("age5", "age_bucket = 5", 450_000.0, 1),
    ];
    AllocationGraph::from_targeting(supply, contracts)
}

/// One untargeted contract on one node with `per_cycle` real impressions in each of
/// `cycles` cycles of `cycle_hours`, split into `events` equal events per cycle.
pub fn single_contract(
    demand: f64,
    cycles: u32,
    cycle_hours: i64,
    per_cycle: f64,
    events: u32,
) -> (AllocationGraph, Vec<ImpressionEvent>) {
    let flight = Duration::hours(cycle_hours * cycles as i64);
    let c = Contract::new("c", gdalloc::TargetingExpr::True, demand, t0(), t0() + flight).unwrap();
    let node = SupplyNode::new("n", AttributeMap::new(), per_cycle * cycles as f64);
    let graph = AllocationGraph::from_targeting(vec![node], vec![c]);
    let step = Duration::hours(cycle_hours).num_milliseconds() / events as i64;
    let mut stream = Vec::new();
    for k in 0..cycles as i64 {
        for e in 0..events as i64 {
            stream.push(ImpressionEvent {
                id: format!("i{k}-{e}"),
                ts: t0() + Duration::hours(cycle_hours * k) + Duration::milliseconds(step * e),
                attributes: AttributeMap::new(),
                weight: (per_cycle / events as f64) as u64,
            });
        }
    }
    (graph, stream)
}

/// Random bipartite instance over attribute `n`: each contract targets a random node subset.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_contracts: usize) -> AllocationGraph {
    let nodes = rng.random_range(2..=max_nodes);
    let contracts = rng.random_range(1..=max_contracts);
    let supply: Vec<SupplyNode> = (0..nodes)
        .map(|i| {
            SupplyNode::new(
                format!("s{i:02}"),
                attrs(&[("n", &format!("v{i}"))]),
                rng.random_range(1..=100) as f64,
            )
        })
        .collect();
    let demand: Vec<Contract> = (0..contracts)
        .map(|j| {
            let mut members: Vec<String> = (0..nodes)
                .filter(|_| rng.random_bool(0.35))
                .map(|i| format!("v{i}"))
                .collect();
            if members.is_empty() {
                members.push(format!("v{}", rng.random_range(0..nodes)));
            }
            let targeting = format!("n IN {{{}}}", members.join(", "));
            let reach: f64 = supply
                .iter()
                .filter(|s| members.iter().any(|m| s.attributes.get("n") == Some(m.as_str())))
                .map(|s| s.supply)
                .sum();
            let d = (reach * rng.random_range(0.05..0.9)).round().max(1.0);
            contract(&format!("c{j:02}"), &targeting, d, 1)
        })
        .collect();
    AllocationGraph::from_targeting(supply, demand)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Greedy witness: contracts in ascending eligible supply (ties by id) each take what they need
/// from their nodes in id order. Returns whether every demand is covered.
pub fn greedy_witness(graph: &AllocationGraph) -> bool {
    let mut left: Vec<f64> = graph.supply().iter().map(|n| n.supply).collect();
    let mut order: Vec<usize> = (0..graph.contracts().len()).collect();
    let reach = |j: usize| -> f64 {
        graph.contract_neighbors(j).iter().map(|&i| graph.supply()[i].supply).sum()
    };
    order.sort_by(|&a, &b| {
        reach(a)
            .total_cmp(&reach(b))
            .then_with(|| graph.contracts()[a].id.cmp(&graph.contracts()[b].id))
    });
    for j in order {
        let mut need = graph.contracts()[j].demand;
        for &i in graph.contract_neighbors(j) {
            let take = need.min(left[i]);
            left[i] -= take;
            need -= take;
        }
        if need > 1e-9 {
            return false;
        }
    }
    true
}

/// One impression event per supply node carrying the node's whole supply, at flight start.
pub fn replay_stream(graph: &AllocationGraph) -> Vec<ImpressionEvent> {
    graph
        .supply()
        .iter()
        .map(|n| ImpressionEvent {
            id: n.id.clone(),
            ts: t0(),
            attributes: n.attributes.clone(),
            weight: n.supply as u64,
        })
        .collect()
}
