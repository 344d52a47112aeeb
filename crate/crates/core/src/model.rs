//! The bipartite supply/demand graph shared by every planner.
//!
//! Supply nodes carry a forecast impression count `s_i`, contracts carry a demand `d_j` and a
//! targeting predicate, and an edge `(i, j)` exists exactly when node `i` is eligible for
//! contract `j`. Counts are stored as `f64`: forecasts restated under an error multiplier and
//! partially delivered demand are not integral in general.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::targeting::{self, TargetingExpr};

/// Relative slack tolerated by [`FeasibilityReport::feasible`] on float round-off.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Default under-delivery penalty per impression.
pub const DEFAULT_PENALTY: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid graph: {}", join_violations(.0))]
    InvalidGraph(Vec<Violation>),
    #[error("allocation references edge ({node}, {contract}) which is not in the graph")]
    UnknownEdge { node: String, contract: String },
    #[error("invalid contract {id}: {reason}")]
    InvalidContract { id: String, reason: String },
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// A single broken graph invariant. Violations are reported as data, not errors.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("duplicate supply node id {0}")]
    DuplicateNode(String),
    #[error("duplicate contract id {0}")]
    DuplicateContract(String),
    #[error("supply node {0} has an empty attribute name")]
    EmptyAttributeName(String),
    #[error("supply node {node} has invalid supply {value}")]
    InvalidSupply { node: String, value: f64 },
    #[error("contract {contract} has invalid demand {value}")]
    InvalidDemand { contract: String, value: f64 },
    #[error("contract {0} has start >= end")]
    InvalidFlight(String),
    #[error("contract {0} has booked demand below its demand")]
    BookedBelowDemand(String),
    #[error("contract {0} has a non-positive penalty")]
    InvalidPenalty(String),
    #[error("edge ({node}, {contract}) references an unknown supply node")]
    UnknownNode { node: String, contract: String },
    #[error("edge ({node}, {contract}) references an unknown contract")]
    UnknownContract { node: String, contract: String },
    #[error("edge ({node}, {contract}) is listed more than once")]
    DuplicateEdge { node: String, contract: String },
    #[error("edge ({node}, {contract}) joins a node that fails the contract's targeting")]
    IneligibleEdge { node: String, contract: String },
    #[error("node {node} is eligible for contract {contract} but the edge is missing")]
    MissingEdge { node: String, contract: String },
}

/// User attributes. An absent attribute means "unknown".
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeMap(BTreeMap<String, String>);

impl AttributeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for AttributeMap {
    fn from_iter<T: IntoIterator<Item = (K, V)>>(iter: T) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl fmt::Display for AttributeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (n, (k, v)) in self.iter().enumerate() {
            if n > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v}")?;
        }
        f.write_str("}")
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn overlaps(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> bool {
        self.start < end && start < self.end
    }
}

/// A class of forecast impressions sharing one attribute combination.
///
/// A node without a `window` is time-agnostic; a windowed node is only eligible for contracts
/// whose flight overlaps the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplyNode {
    pub id: String,
    #[serde(default)]
    pub attributes: AttributeMap,
    #[serde(with = "crate::count")]
    pub supply: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<TimeWindow>,
}

impl SupplyNode {
    pub fn new(id: impl Into<String>, attributes: AttributeMap, supply: f64) -> Self {
        Self {
            id: id.into(),
            attributes,
            supply,
            window: None,
        }
    }

    pub fn with_window(mut self, window: TimeWindow) -> Self {
        self.window = Some(window);
        self
    }

    pub fn is_eligible_for(&self, contract: &Contract) -> bool {
        let in_flight = self
            .window
            .is_none_or(|w| w.overlaps(contract.start, contract.end));
        in_flight && targeting::eligible(&self.attributes, &contract.targeting)
    }
}

/// A guaranteed contract: targeting, demand and flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContractRecord", into = "ContractRecord")]
pub struct Contract {
    pub id: String,
    pub targeting: TargetingExpr,
    /// Demand the planners must satisfy (`d_j`); decreases as impressions deliver.
    pub demand: f64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Demand as originally booked, kept for metrics.
    pub booked_demand: f64,
    /// Under-delivery penalty per impression used by the dual planner.
    pub penalty: f64,
}

impl Contract {
    pub fn new(
        id: impl Into<String>,
        targeting: TargetingExpr,
        demand: f64,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        let contract = Self {
            id: id.into(),
            targeting,
            demand,
            start,
            end,
            booked_demand: demand,
            penalty: DEFAULT_PENALTY,
        };
        match contract.violations().into_iter().next() {
            Some(v) => Err(ModelError::InvalidContract {
                id: contract.id,
                reason: v.to_string(),
            }),
            None => Ok(contract),
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.penalty = penalty;
        self
    }

    /// Flight length in hours.
    pub fn flight_hours(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / 3_600_000.0
    }

    pub fn is_live_at(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(self.demand.is_finite() && self.demand > 0.0) {
            out.push(Violation::InvalidDemand {
                contract: self.id.clone(),
                value: self.demand,
            });
        }
        if self.start >= self.end {
            out.push(Violation::InvalidFlight(self.id.clone()));
        }
        if self.booked_demand < self.demand {
            out.push(Violation::BookedBelowDemand(self.id.clone()));
        }
        if !(self.penalty > 0.0) {
            out.push(Violation::InvalidPenalty(self.id.clone()));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ContractRecord {
    id: String,
    targeting: TargetingExpr,
    #[serde(with = "crate::count")]
    demand: f64,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    booked_demand: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    penalty: Option<f64>,
}

impl TryFrom<ContractRecord> for Contract {
    type Error = ModelError;

    fn try_from(r: ContractRecord) -> Result<Self, Self::Error> {
        let mut contract = Contract::new(r.id, r.targeting, r.demand, r.start, r.end)?;
        if let Some(booked) = r.booked_demand {
            contract.booked_demand = booked;
        }
        if let Some(penalty) = r.penalty {
            contract.penalty = penalty;
        }
        match contract.violations().into_iter().next() {
            Some(v) => Err(ModelError::InvalidContract {
                id: contract.id,
                reason: v.to_string(),
            }),
            None => Ok(contract),
        }
    }
}

impl From<Contract> for ContractRecord {
    fn from(c: Contract) -> Self {
        Self {
            booked_demand: (c.booked_demand != c.demand).then_some(c.booked_demand),
            penalty: (c.penalty != DEFAULT_PENALTY).then_some(c.penalty),
            id: c.id,
            targeting: c.targeting,
            demand: c.demand,
            start: c.start,
            end: c.end,
        }
    }
}

/// Bipartite graph `G = (I ∪ J, E)` with per-node adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationGraph {
    supply: Vec<SupplyNode>,
    contracts: Vec<Contract>,
    edges: Vec<(usize, usize)>,
    dangling: Vec<(String, String)>,
    duplicate_edges: Vec<(usize, usize)>,
    node_contracts: Vec<Vec<usize>>,
    contract_nodes: Vec<Vec<usize>>,
}

impl AllocationGraph {
    /// Builds the graph with edges derived from targeting (and node windows).
    pub fn from_targeting(supply: Vec<SupplyNode>, contracts: Vec<Contract>) -> Self {
        let edges = targeting::build_edges(&supply, &contracts);
        Self::from_index_edges(supply, contracts, edges)
    }

    /// Builds the graph from an explicit edge list of `(node id, contract id)` pairs.
    ///
    /// Edges naming unknown ids are kept aside and reported by [`validate`](Self::validate).
    pub fn with_edges<I, N, C>(supply: Vec<SupplyNode>, contracts: Vec<Contract>, edges: I) -> Self
    where
        I: IntoIterator<Item = (N, C)>,
        N: Into<String>,
        C: Into<String>,
    {
        let node_idx = first_index(supply.iter().map(|n| n.id.as_str()));
        let contract_idx = first_index(contracts.iter().map(|c| c.id.as_str()));
        let mut resolved = Vec::new();
        let mut dangling = Vec::new();
        for (n, c) in edges {
            let (n, c) = (n.into(), c.into());
            match (node_idx.get(n.as_str()), contract_idx.get(c.as_str())) {
                (Some(&i), Some(&j)) => resolved.push((i, j)),
                _ => dangling.push((n, c)),
            }
        }
        let mut graph = Self::from_index_edges(supply, contracts, Vec::new());
        let mut seen = HashSet::new();
        for (i, j) in resolved {
            if seen.insert((i, j)) {
                graph.edges.push((i, j));
            } else {
                graph.duplicate_edges.push((i, j));
            }
        }
        graph.dangling = dangling;
        graph.sort_and_index();
        graph
    }

    /// Builds the graph from index pairs the caller guarantees are in range and unique.
    pub(crate) fn from_index_edges(
        supply: Vec<SupplyNode>,
        contracts: Vec<Contract>,
        edges: Vec<(usize, usize)>,
    ) -> Self {
        let mut graph = Self {
            node_contracts: vec![Vec::new(); supply.len()],
            contract_nodes: vec![Vec::new(); contracts.len()],
            supply,
            contracts,
            edges,
            dangling: Vec::new(),
            duplicate_edges: Vec::new(),
        };
        graph.sort_and_index();
        graph
    }

    fn sort_and_index(&mut self) {
        let (supply, contracts) = (&self.supply, &self.contracts);
        self.edges.sort_by(|a, b| {
            (supply[a.0].id.as_str(), contracts[a.1].id.as_str())
                .cmp(&(supply[b.0].id.as_str(), contracts[b.1].id.as_str()))
                .then(a.cmp(b))
        });
        self.node_contracts = vec![Vec::new(); self.supply.len()];
        self.contract_nodes = vec![Vec::new(); self.contracts.len()];
        for &(i, j) in &self.edges {
            self.node_contracts[i].push(j);
            self.contract_nodes[j].push(i);
        }
    }

    pub fn supply(&self) -> &[SupplyNode] {
        &self.supply
    }

    pub fn contracts(&self) -> &[Contract] {
        &self.contracts
    }

    /// Resolved edges as `(node index, contract index)`, ordered by id pair.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `Γ(i)`: contracts node `i` is eligible for.
    pub fn node_neighbors(&self, node: usize) -> &[usize] {
        &self.node_contracts[node]
    }

    /// `Γ(j)`: supply nodes eligible for contract `j`.
    pub fn contract_neighbors(&self, contract: usize) -> &[usize] {
        &self.contract_nodes[contract]
    }

    /// `S_j = Σ_{i∈Γ(j)} s_i`.
    pub fn eligible_supply(&self, contract: usize) -> f64 {
        self.contract_nodes[contract]
            .iter()
            .map(|&i| self.supply[i].supply)
            .sum()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.supply.iter().position(|n| n.id == id)
    }

    pub fn contract_index(&self, id: &str) -> Option<usize> {
        self.contracts.iter().position(|c| c.id == id)
    }

    pub fn has_edge(&self, node: usize, contract: usize) -> bool {
        self.node_contracts
            .get(node)
            .is_some_and(|cs| cs.contains(&contract))
    }

    /// Lists every broken graph invariant; empty means the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut ids = HashSet::new();
        for node in &self.supply {
            if !ids.insert(node.id.as_str()) {
                out.push(Violation::DuplicateNode(node.id.clone()));
            }
            if node.attributes.iter().any(|(k, _)| k.is_empty()) {
                out.push(Violation::EmptyAttributeName(node.id.clone()));
            }
            if !(node.supply.is_finite() && node.supply >= 0.0) {
                out.push(Violation::InvalidSupply {
                    node: node.id.clone(),
                    value: node.supply,
                });
            }
        }
        let mut ids = HashSet::new();
        for contract in &self.contracts {
            if !ids.insert(contract.id.as_str()) {
                out.push(Violation::DuplicateContract(contract.id.clone()));
            }
            out.extend(contract.violations());
        }
        let node_ids: HashSet<&str> = self.supply.iter().map(|n| n.id.as_str()).collect();
        for (n, c) in &self.dangling {
            let (node, contract) = (n.clone(), c.clone());
            if node_ids.contains(n.as_str()) {
                out.push(Violation::UnknownContract { node, contract });
            } else {
                out.push(Violation::UnknownNode { node, contract });
            }
        }
        for &(i, j) in &self.duplicate_edges {
            out.push(Violation::DuplicateEdge {
                node: self.supply[i].id.clone(),
                contract: self.contracts[j].id.clone(),
            });
        }
        let present: HashSet<(usize, usize)> = self.edges.iter().copied().collect();
        for (i, node) in self.supply.iter().enumerate() {
            for (j, contract) in self.contracts.iter().enumerate() {
                let eligible = node.is_eligible_for(contract);
                let has = present.contains(&(i, j));
                if has && !eligible {
                    out.push(Violation::IneligibleEdge {
                        node: node.id.clone(),
                        contract: contract.id.clone(),
                    });
                } else if eligible && !has {
                    out.push(Violation::MissingEdge {
                        node: node.id.clone(),
                        contract: contract.id.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidGraph(violations))
        }
    }

    /// Evaluates the demand, supply and non-negativity constraints for `alloc`.
    pub fn check_feasibility(
        &self,
        alloc: &FractionalAllocation,
    ) -> Result<FeasibilityReport, ModelError> {
        for &(i, j) in alloc.values.keys() {
            if !self.has_edge(i, j) {
                return Err(ModelError::UnknownEdge {
                    node: self.supply.get(i).map_or_else(|| i.to_string(), |n| n.id.clone()),
                    contract: self
                        .contracts
                        .get(j)
                        .map_or_else(|| j.to_string(), |c| c.id.clone()),
                });
            }
        }
        let mut delivered = vec![0.0; self.contracts.len()];
        let mut used = vec![0.0; self.supply.len()];
        let mut negative_entries = Vec::new();
        for (&(i, j), &x) in &alloc.values {
            delivered[j] += x * self.supply[i].supply;
            used[i] += x;
            if x < 0.0 {
                negative_entries.push((self.supply[i].id.clone(), self.contracts[j].id.clone()));
            }
        }
        let demand_slack: Vec<f64> = delivered
            .iter()
            .zip(&self.contracts)
            .map(|(d, c)| d - c.demand)
            .collect();
        let supply_excess: Vec<f64> = used.iter().map(|u| u - 1.0).collect();
        let feasible = negative_entries.is_empty()
            && demand_slack
                .iter()
                .zip(&self.contracts)
                .all(|(slack, c)| *slack >= -FEASIBILITY_TOL * c.demand.max(1.0))
            && supply_excess.iter().all(|e| *e <= FEASIBILITY_TOL);
        Ok(FeasibilityReport {
            demand_slack,
            supply_excess,
            negative_entries,
            feasible,
        })
    }
}

fn first_index<'a>(ids: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut map = HashMap::new();
    for (n, id) in ids.enumerate() {
        map.entry(id).or_insert(n);
    }
    map
}

/// Sparse `x_ij` over the edge set; missing edges are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FractionalAllocation {
    values: BTreeMap<(usize, usize), f64>,
}

impl FractionalAllocation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `x_ij` for the edge `(node, contract)` given as graph indices.
    pub fn set(&mut self, node: usize, contract: usize, x: f64) {
        self.values.insert((node, contract), x);
    }

    pub fn get(&self, node: usize, contract: usize) -> f64 {
        self.values.get(&(node, contract)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Outcome of [`AllocationGraph::check_feasibility`], indexed like the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    /// `Σ_{i∈Γ(j)} x_ij s_i − d_j` per contract.
    pub demand_slack: Vec<f64>,
    /// `Σ_{j∈Γ(i)} x_ij − 1` per supply node.
    pub supply_excess: Vec<f64>,
    /// Edges carrying a negative allocation, as `(node id, contract id)`.
    pub negative_entries: Vec<(String, String)>,
    pub feasible: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn day(d: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, d, 0, 0, 0).unwrap()
    }

    fn contract(id: &str, expr: &str, demand: f64) -> Contract {
        Contract::new(id, expr.parse().unwrap(), demand, day(1), day(8)).unwrap()
    }

    fn node(id: &str, attrs: &[(&str, &str)], supply: f64) -> SupplyNode {
        SupplyNode::new(id, attrs.iter().copied().collect(), supply)
    }

    #[test]
    fn well_formed_graph_has_no_violations() {
        let graph = AllocationGraph::from_targeting(
            vec![
                node("a", &[("gender", "male")], 10.0),
                node("b", &[("state", "CA")], 5.0),
            ],
            vec![contract("c", "gender = male", 5.0)],
        );
        assert_eq!(graph.validate(), vec![]);
        assert_eq!(graph.edges(), &[(0, 0)]);
    }

    #[test]
    fn unknown_contract_edge_is_named() {
        let graph = AllocationGraph::with_edges(
            vec![node("a", &[("gender", "male")], 10.0)],
            vec![contract("c", "gender = male", 5.0)],
            [("a", "c"), ("a", "zzz")],
        );
        assert_eq!(
            graph.validate(),
            vec![Violation::UnknownContract {
                node: "a".into(),
                contract: "zzz".into()
            }]
        );
    }

    #[test]
    fn ineligible_edge_is_reported() {
        // {state: CA, age_bucket: 5} has no gender, so `gender = male` is false.
        let graph = AllocationGraph::with_edges(
            vec![node("n", &[("state", "CA"), ("age_bucket", "5")], 10.0)],
            vec![contract("m", "gender = male", 5.0)],
            [("n", "m")],
        );
        assert_eq!(
            graph.validate(),
            vec![Violation::IneligibleEdge {
                node: "n".into(),
                contract: "m".into()
            }]
        );
    }

    #[test]
    fn validation_is_idempotent() {
        let graph = AllocationGraph::with_edges(
            vec![node("a", &[("x", "1")], 1.0), node("a", &[], 1.0)],
            vec![contract("c", "x = 1", 1.0)],
            [("a", "c"), ("a", "c"), ("q", "c")],
        );
        let first = graph.validate();
        assert_eq!(first.len(), 3, "{first:?}");
        assert_eq!(graph.validate(), first);
    }

    #[test]
    fn feasibility_single_edge() {
        let graph = AllocationGraph::from_targeting(
            vec![node("a", &[], 100.0)],
            vec![contract("c", "TRUE", 50.0)],
        );
        let mut alloc = FractionalAllocation::new();
        alloc.set(0, 0, 0.5);
        let report = graph.check_feasibility(&alloc).unwrap();
        assert!(report.feasible);
        assert_eq!(report.demand_slack, vec![0.0]);
        assert_eq!(report.supply_excess, vec![-0.5]);
    }

    #[test]
    fn zero_allocation_is_infeasible() {
        let graph = AllocationGraph::from_targeting(
            vec![node("a", &[], 100.0)],
            vec![contract("c", "TRUE", 50.0)],
        );
        let report = graph.check_feasibility(&FractionalAllocation::new()).unwrap();
        assert!(!report.feasible);
        assert_eq!(report.demand_slack, vec![-50.0]);
    }

    #[test]
    fn negative_and_unknown_entries() {
        let graph = AllocationGraph::from_targeting(
            vec![node("a", &[], 100.0), node("b", &[("k", "v")], 1.0)],
            vec![contract("c", "k = v", 0.5)],
        );
        let mut alloc = FractionalAllocation::new();
        alloc.set(0, 0, 0.1);
        assert!(matches!(
            graph.check_feasibility(&alloc),
            Err(ModelError::UnknownEdge { .. })
        ));
        let mut alloc = FractionalAllocation::new();
        alloc.set(1, 0, -0.1);
        let report = graph.check_feasibility(&alloc).unwrap();
        assert_eq!(report.negative_entries, vec![("b".into(), "c".into())]);
        assert!(!report.feasible);
    }

    #[test]
    fn windowed_nodes_respect_flights() {
        let window = TimeWindow {
            start: day(10),
            end: day(11),
        };
        let graph = AllocationGraph::from_targeting(
            vec![node("late", &[], 10.0).with_window(window)],
            vec![contract("c", "TRUE", 1.0)],
        );
        assert!(graph.edges().is_empty());
        assert!(graph.validate().is_empty());
    }

    #[test]
    fn contract_rejects_bad_flight() {
        let err = Contract::new("c", TargetingExpr::True, 1.0, day(2), day(2)).unwrap_err();
        assert!(err.to_string().contains("start >= end"));
    }
}
