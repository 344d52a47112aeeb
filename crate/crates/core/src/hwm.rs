//! High Water Mark planning and stateless online evaluation.
//!
//! Offline, contracts are visited in allocation order (ascending eligible supply `S_j`, ties by
//! id). Each one receives the smallest serving rate `α_j` such that
//! `Σ_{i∈Γ(j)} min{r_i, s_i·α_j} = d_j` over the supply `r_i` still unclaimed by earlier
//! contracts, or `α_j = 1` when no rate reaches the demand.
//!
//! Online, an impression's eligible contracts are listed in allocation order and each receives
//! its `α_j` until the rates would exceed one; the first contract that does not fit gets the
//! leftover mass and the rest get nothing.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AllocationGraph, FractionalAllocation, ModelError};
use crate::serving::{self, ServeDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwmEntry {
    pub contract_id: String,
    #[serde(with = "crate::count")]
    pub eligible_supply: f64,
    pub alpha: f64,
}

/// Problems noticed while planning; the plan is still usable.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanDiagnostic {
    /// The contract has no eligible forecast supply and will never be served from it.
    NoEligibleSupply(String),
    /// The remaining eligible supply cannot cover the demand; `α_j` was set to one.
    Unsatisfiable { contract_id: String, shortfall: f64 },
}

impl std::fmt::Display for PlanDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NoEligibleSupply(id) => write!(f, "contract {id} has no eligible supply"),
            Self::Unsatisfiable {
                contract_id,
                shortfall,
            } => write!(
                f,
                "contract {contract_id} cannot be satisfied (short by {shortfall})"
            ),
        }
    }
}

/// Serving rates in allocation order: two numbers per contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HwmPlan {
    pub entries: Vec<HwmEntry>,
    pub diagnostics: Vec<PlanDiagnostic>,
}

impl HwmPlan {
    /// Maps contract id to `(allocation order position, α_j)`.
    pub fn index(&self) -> HashMap<&str, (usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(n, e)| (e.contract_id.as_str(), (n, e.alpha)))
            .collect()
    }

    pub fn alpha(&self, contract_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.contract_id == contract_id)
            .map(|e| e.alpha)
    }
}

/// Smallest `α ∈ [0, 1]` with `Σ min{r_i, s_i·α} = demand`, or one if the supply runs out.
///
/// `neighbors` holds `(r_i, s_i)` pairs with `0 ≤ r_i ≤ s_i`. The left-hand side is
/// piecewise linear with kinks at `r_i / s_i`, so the root is found exactly on the segment
/// containing it.
pub fn solve_alpha(neighbors: &[(f64, f64)], demand: f64) -> f64 {
    if demand <= 0.0 {
        return 0.0;
    }
    let mut kinks: Vec<(f64, f64, f64)> = neighbors
        .iter()
        .filter(|(_, s)| *s > 0.0)
        .map(|&(r, s)| (r / s, r, s))
        .collect();
    let total: f64 = kinks.iter().map(|k| k.1).sum();
    if total < demand {
        return 1.0;
    }
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Σ min{r_i, s_i α} = capped + α·slope on the current segment.
    let mut capped = 0.0;
    let mut slope: f64 = kinks.iter().map(|k| k.2).sum();
    for &(kink, r, s) in &kinks {
        if capped + slope * kink >= demand {
            return ((demand - capped) / slope).clamp(0.0, 1.0);
        }
        capped += r;
        slope -= s;
    }
    // Round-off left the demand a hair above the last kink.
    kinks.last().map_or(1.0, |k| k.0)
}

/// Runs the offline algorithm over a validated graph.
pub fn generate_hwm_plan(graph: &AllocationGraph) -> Result<HwmPlan, ModelError> {
    graph.ensure_valid()?;
    Ok(plan(graph))
}

/// Offline algorithm without graph validation; callers guarantee a well-formed graph.
pub(crate) fn plan(graph: &AllocationGraph) -> HwmPlan {
    let contracts = graph.contracts();
    let eligible: Vec<f64> = (0..contracts.len())
        .map(|j| graph.eligible_supply(j))
        .collect();
    let mut order: Vec<usize> = (0..contracts.len()).collect();
    order.sort_by(|&a, &b| {
        eligible[a]
            .total_cmp(&eligible[b])
            .then_with(|| contracts[a].id.cmp(&contracts[b].id))
    });

    let mut remaining: Vec<f64> = graph.supply().iter().map(|n| n.supply).collect();
    let mut plan = HwmPlan::default();
    for j in order {
        let contract = &contracts[j];
        let nodes = graph.contract_neighbors(j);
        let pairs: Vec<(f64, f64)> = nodes
            .iter()
            .map(|&i| (remaining[i], graph.supply()[i].supply))
            .collect();
        let available: f64 = pairs.iter().map(|p| p.0).sum();
        let alpha = solve_alpha(&pairs, contract.demand);
        if eligible[j] <= 0.0 {
            plan.diagnostics
                .push(PlanDiagnostic::NoEligibleSupply(contract.id.clone()));
        } else if available < contract.demand {
            plan.diagnostics.push(PlanDiagnostic::Unsatisfiable {
                contract_id: contract.id.clone(),
                shortfall: contract.demand - available,
            });
        }
        for &i in nodes {
            let s = graph.supply()[i].supply;
            remaining[i] -= remaining[i].min(s * alpha);
        }
        plan.entries.push(HwmEntry {
            contract_id: contract.id.clone(),
            eligible_supply: eligible[j],
            alpha,
        });
    }
    plan
}

/// Effective probabilities for rates already listed in allocation order.
///
/// Rates are granted in full while their running sum stays within one; the first rate that
/// does not fit receives `1 − Σ` and every later rate receives zero.
pub fn truncate_rates(alphas_in_order: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alphas_in_order.len());
    let mut cumulative = 0.0;
    let mut exhausted = false;
    for &alpha in alphas_in_order {
        if exhausted {
            out.push(0.0);
        } else if cumulative + alpha <= 1.0 {
            out.push(alpha);
            cumulative += alpha;
        } else {
            out.push((1.0 - cumulative).max(0.0));
            exhausted = true;
        }
    }
    out
}

/// A contract eligible for the impression at hand, with its plan data.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub contract_id: String,
    /// Position in the plan's allocation order.
    pub order: usize,
    pub alpha: f64,
}

/// Effective `(contract id, probability)` pairs for an impression's eligible contracts.
pub fn serving_probabilities(eligible: &[Candidate]) -> Vec<(String, f64)> {
    let mut sorted: Vec<&Candidate> = eligible.iter().collect();
    sorted.sort_by_key(|c| c.order);
    let alphas: Vec<f64> = sorted.iter().map(|c| c.alpha).collect();
    sorted
        .iter()
        .zip(truncate_rates(&alphas))
        .filter(|(_, p)| *p > 0.0)
        .map(|(c, p)| (c.contract_id.clone(), p))
        .collect()
}

/// Online evaluation: one uniform draw through the truncated rates.
pub fn serve_hwm<R: Rng + ?Sized>(
    impression_id: impl Into<String>,
    eligible: &[Candidate],
    rng: &mut R,
) -> ServeDecision {
    serving::decide(impression_id, serving_probabilities(eligible), rng)
}

/// Expected allocation `x_ij` obtained by applying the online rule to every forecast node.
pub fn expected_allocation(plan: &HwmPlan, graph: &AllocationGraph) -> FractionalAllocation {
    let index = plan.index();
    let mut alloc = FractionalAllocation::new();
    for i in 0..graph.supply().len() {
        let mut eligible: Vec<(usize, usize, f64)> = graph
            .node_neighbors(i)
            .iter()
            .filter_map(|&j| {
                index
                    .get(graph.contracts()[j].id.as_str())
                    .map(|&(order, alpha)| (order, j, alpha))
            })
            .collect();
        eligible.sort_by_key(|e| e.0);
        let alphas: Vec<f64> = eligible.iter().map(|e| e.2).collect();
        for (&(_, j, _), p) in eligible.iter().zip(truncate_rates(&alphas)) {
            alloc.set(i, j, p);
        }
    }
    alloc
}
