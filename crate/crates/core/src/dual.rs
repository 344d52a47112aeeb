//! Dual-based planning: one dual value per contract, primal reconstructed per impression.
//!
//! The offline problem is
//!
//! ```text
//! minimize   Σ_j Σ_{i∈Γ(j)} s_i (x_ij − θ_j)² / θ_j  +  Σ_j p_j u_j
//! subject to Σ_{i∈Γ(j)} s_i x_ij + u_j ≥ d_j,   Σ_{j∈Γ(i)} x_ij ≤ 1,   x, u ≥ 0
//! ```
//!
//! with `θ_j = d_j / S_j`. Its stationarity conditions give
//! `x_ij = max{0, θ_j (1 + (λ_j − μ_i) / 2)}` for demand multipliers `λ_j ∈ [0, p_j]` and
//! supply multipliers `μ_i ≥ 0`. Plans store the half-scaled multipliers `α_j = λ_j / 2`, so
//! that serving uses `g_j(z) = max{0, θ_j (1 + z)}` directly and `0 ≤ α_j ≤ p_j / 2`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AllocationGraph, FractionalAllocation, ModelError, FEASIBILITY_TOL};
use crate::serving::{self, ServeDecision};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DualError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Constraint(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(
        "dual solver did not converge after {sweeps} sweeps (worst violation {worst_violation:.3e} on {contract_id})"
    )]
    NotConverged {
        sweeps: usize,
        contract_id: String,
        worst_violation: f64,
        /// Last iterate, usable as an approximate plan.
        plan: Box<DualPlan>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEntry {
    pub contract_id: String,
    pub theta: f64,
    pub alpha: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualPlan {
    pub entries: Vec<DualEntry>,
    /// Contracts with no eligible forecast supply; `θ_j` is undefined for them.
    pub excluded: Vec<String>,
    /// Coordinate sweeps used by the solver.
    pub sweeps: usize,
}

impl DualPlan {
    pub fn index(&self) -> HashMap<&str, (f64, f64)> {
        self.entries
            .iter()
            .map(|e| (e.contract_id.as_str(), (e.theta, e.alpha)))
            .collect()
    }

    pub fn entry(&self, contract_id: &str) -> Option<&DualEntry> {
        self.entries.iter().find(|e| e.contract_id == contract_id)
    }
}

/// Per-contract penalties `p_j`, aligned with the graph's contract order.
#[derive(Clone, Debug, PartialEq)]
pub struct DualObjectiveSpec {
    pub penalties: Vec<f64>,
}

impl DualObjectiveSpec {
    pub fn from_graph(graph: &AllocationGraph) -> Self {
        Self {
            penalties: graph.contracts().iter().map(|c| c.penalty).collect(),
        }
    }

    pub fn uniform(graph: &AllocationGraph, penalty: f64) -> Self {
        Self {
            penalties: vec![penalty; graph.contracts().len()],
        }
    }
}

/// Upper bound of the stored dual `α_j` for penalty `p_j`.
pub fn alpha_cap(penalty: f64) -> f64 {
    penalty / 2.0
}

/// `θ_j = d_j / S_j`, `None` when the contract has no eligible supply.
pub fn target_fractions(graph: &AllocationGraph) -> Vec<Option<f64>> {
    graph
        .contracts()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let supply = graph.eligible_supply(j);
            (supply > 0.0).then(|| c.demand / supply)
        })
        .collect()
}

/// Evaluates the penalized objective for an allocation and per-contract under-delivery.
pub fn dual_objective(
    graph: &AllocationGraph,
    alloc: &FractionalAllocation,
    underdelivery: &[f64],
    spec: &DualObjectiveSpec,
) -> Result<f64, DualError> {
    let contracts = graph.contracts();
    if underdelivery.len() != contracts.len() || spec.penalties.len() != contracts.len() {
        return Err(DualError::Parameter(format!(
            "expected {} under-delivery values and penalties",
            contracts.len()
        )));
    }
    let report = graph.check_feasibility(alloc)?;
    if let Some((node, contract)) = report.negative_entries.first() {
        return Err(DualError::Constraint(format!(
            "negative allocation on edge ({node}, {contract})"
        )));
    }
    for (i, excess) in report.supply_excess.iter().enumerate() {
        if *excess > FEASIBILITY_TOL {
            return Err(DualError::Constraint(format!(
                "supply node {} is over-allocated by {excess}",
                graph.supply()[i].id
            )));
        }
    }
    for (j, c) in contracts.iter().enumerate() {
        let u = underdelivery[j];
        if u < 0.0 {
            return Err(DualError::Constraint(format!(
                "contract {} has negative under-delivery {u}",
                c.id
            )));
        }
        if report.demand_slack[j] + u < -FEASIBILITY_TOL * c.demand.max(1.0) {
            return Err(DualError::Constraint(format!(
                "contract {} violates its relaxed demand constraint",
                c.id
            )));
        }
    }
    let thetas = target_fractions(graph);
    let mut total = 0.0;
    for &(i, j) in graph.edges() {
        if let Some(theta) = thetas[j] {
            let x = alloc.get(i, j);
            total += graph.supply()[i].supply * (x - theta).powi(2) / theta;
        }
    }
    total += underdelivery
        .iter()
        .zip(&spec.penalties)
        .map(|(u, p)| u * p)
        .sum::<f64>();
    Ok(total)
}

/// Supply-constraint dual `β` for one impression given `(θ_j, α_j)` of its eligible contracts.
///
/// Solves `Σ_j max{0, θ_j (1 + α_j − X)} = 1` for `X` and returns `max{0, X}`.
pub fn supply_dual(eligible: &[(f64, f64)]) -> f64 {
    let at_zero: f64 = eligible.iter().map(|&(t, a)| g(t, a)).sum();
    if at_zero <= 1.0 {
        return 0.0;
    }
    let mut by_kink: Vec<(f64, f64)> = eligible.to_vec();
    by_kink.sort_by(|a, b| (1.0 + b.1).total_cmp(&(1.0 + a.1)));
    // On a segment the active terms sum to A − X·T.
    let (mut a_sum, mut t_sum) = (0.0, 0.0);
    for (m, &(theta, alpha)) in by_kink.iter().enumerate() {
        a_sum += theta * (1.0 + alpha);
        t_sum += theta;
        let x = (a_sum - 1.0) / t_sum;
        let next_kink = by_kink.get(m + 1).map_or(f64::NEG_INFINITY, |k| 1.0 + k.1);
        if x >= next_kink {
            return x.max(0.0);
        }
    }
    unreachable!("the equation always has a root when the sum at zero exceeds one")
}

fn g(theta: f64, z: f64) -> f64 {
    (theta * (1.0 + z)).max(0.0)
}

/// Reconstructs `x_ij` for one impression from its eligible contracts' `(θ_j, α_j)`.
pub fn reconstruct_primal(eligible: &[(f64, f64)]) -> Vec<f64> {
    let beta = supply_dual(eligible);
    eligible.iter().map(|&(t, a)| g(t, a - beta)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualCandidate {
    pub contract_id: String,
    pub theta: f64,
    pub alpha: f64,
}

pub fn serving_probabilities(eligible: &[DualCandidate]) -> Vec<(String, f64)> {
    let pairs: Vec<(f64, f64)> = eligible.iter().map(|c| (c.theta, c.alpha)).collect();
    eligible
        .iter()
        .zip(reconstruct_primal(&pairs))
        .filter(|(_, x)| *x > 0.0)
        .map(|(c, x)| (c.contract_id.clone(), x))
        .collect()
}

/// Serves contract `j` with probability `x_ij`; the remainder stays unallocated.
pub fn serve_dual<R: Rng + ?Sized>(
    impression_id: impl Into<String>,
    eligible: &[DualCandidate],
    rng: &mut R,
) -> ServeDecision {
    serving::decide(impression_id, serving_probabilities(eligible), rng)
}

/// Primal allocation reconstructed at every forecast node from a plan.
pub fn primal_allocation(plan: &DualPlan, graph: &AllocationGraph) -> FractionalAllocation {
    let index = plan.index();
    let mut alloc = FractionalAllocation::new();
    for i in 0..graph.supply().len() {
        let eligible: Vec<(usize, (f64, f64))> = graph
            .node_neighbors(i)
            .iter()
            .filter_map(|&j| index.get(graph.contracts()[j].id.as_str()).map(|&e| (j, e)))
            .collect();
        let pairs: Vec<(f64, f64)> = eligible.iter().map(|e| e.1).collect();
        for ((j, _), x) in eligible.iter().zip(reconstruct_primal(&pairs)) {
            alloc.set(i, *j, x);
        }
    }
    alloc
}

/// Under-delivery `max{0, d_j − Σ s_i x_ij}` implied by an allocation.
pub fn implied_underdelivery(graph: &AllocationGraph, alloc: &FractionalAllocation) -> Vec<f64> {
    let mut delivered = vec![0.0; graph.contracts().len()];
    for ((i, j), x) in alloc.iter() {
        delivered[j] += graph.supply()[i].supply * x;
    }
    graph
        .contracts()
        .iter()
        .zip(delivered)
        .map(|(c, d)| (c.demand - d).max(0.0))
        .collect()
}

/// Validates the graph and solves for one dual value per contract.
///
/// Gauss-Seidel coordinate ascent: each contract's `α_j` is set, with all others fixed, so that
/// its reconstructed forecast delivery meets `d_j`, clamped to `[0, p_j / 2]`. Sweeps repeat
/// until the largest relative change and the worst complementarity violation are below `tol`.
pub fn solve_dual_offline(
    graph: &AllocationGraph,
    spec: &DualObjectiveSpec,
    tol: f64,
    max_sweeps: usize,
) -> Result<DualPlan, DualError> {
    graph.ensure_valid()?;
    solve(graph, spec, tol, max_sweeps, &HashMap::new())
}

/// Solver entry point without validation; `warm` seeds `α_j` by contract id.
pub(crate) fn solve(
    graph: &AllocationGraph,
    spec: &DualObjectiveSpec,
    tol: f64,
    max_sweeps: usize,
    warm: &HashMap<String, f64>,
) -> Result<DualPlan, DualError> {
    if !(tol > 0.0) {
        return Err(DualError::Parameter(format!("tol must be positive, got {tol}")));
    }
    let contracts = graph.contracts();
    if spec.penalties.len() != contracts.len() {
        return Err(DualError::Parameter(format!(
            "expected {} penalties, got {}",
            contracts.len(),
            spec.penalties.len()
        )));
    }
    if let Some(p) = spec.penalties.iter().find(|p| !(**p > 0.0)) {
        return Err(DualError::Parameter(format!("penalty must be positive, got {p}")));
    }
    let thetas = target_fractions(graph);
    let mut solver = CoordinateAscent {
        graph,
        thetas: &thetas,
        caps: spec.penalties.iter().map(|&p| alpha_cap(p)).collect(),
        alphas: contracts
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let cap = alpha_cap(spec.penalties[j]);
                warm.get(&c.id).copied().unwrap_or(0.0).clamp(0.0, cap)
            })
            .collect(),
        buf: Vec::new(),
    };
    let active: Vec<usize> = (0..contracts.len()).filter(|&j| thetas[j].is_some()).collect();

    let mut sweeps = 0;
    let mut worst = (0.0, usize::MAX);
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for &j in &active {
            let old = solver.alphas[j];
            let new = solver.update(j);
            solver.alphas[j] = new;
            max_change = max_change.max((new - old).abs() / old.abs().max(1.0));
        }
        worst = solver.worst_violation(&active);
        if max_change < tol && worst.0 <= tol {
            break;
        }
    }
    let plan = DualPlan {
        entries: active
            .iter()
            .map(|&j| DualEntry {
                contract_id: contracts[j].id.clone(),
                theta: thetas[j].unwrap_or_default(),
                alpha: solver.alphas[j],
                penalty: spec.penalties[j],
            })
            .collect(),
        excluded: (0..contracts.len())
            .filter(|&j| thetas[j].is_none())
            .map(|j| contracts[j].id.clone())
            .collect(),
        sweeps,
    };
    if worst.0 > tol {
        return Err(DualError::NotConverged {
            sweeps,
            contract_id: contracts[worst.1].id.clone(),
            worst_violation: worst.0,
            plan: Box::new(plan),
        });
    }
    Ok(plan)
}

struct CoordinateAscent<'a> {
    graph: &'a AllocationGraph,
    thetas: &'a [Option<f64>],
    caps: Vec<f64>,
    alphas: Vec<f64>,
    buf: Vec<(f64, f64)>,
}

impl CoordinateAscent<'_> {
    /// Forecast delivery of contract `j` with its dual set to `alpha`, and its slope in `alpha`.
    fn delivery(&mut self, j: usize, alpha: f64) -> (f64, f64) {
        let theta_j = self.thetas[j].expect("active contract");
        let (mut total, mut slope) = (0.0, 0.0);
        for &i in self.graph.contract_neighbors(j) {
            self.buf.clear();
            self.buf.push((theta_j, alpha));
            for &k in self.graph.node_neighbors(i) {
                if k != j {
                    if let Some(t) = self.thetas[k] {
                        self.buf.push((t, self.alphas[k]));
                    }
                }
            }
            let beta = supply_dual(&self.buf);
            let x = g(theta_j, alpha - beta);
            let s = self.graph.supply()[i].supply;
            total += s * x;
            if x > 0.0 {
                let dx = if beta > 0.0 {
                    let t_active: f64 = self
                        .buf
                        .iter()
                        .filter(|&&(t, a)| t * (1.0 + a - beta) > 0.0)
                        .map(|p| p.0)
                        .sum();
                    theta_j * (1.0 - theta_j / t_active)
                } else {
                    theta_j
                };
                slope += s * dx;
            }
        }
        (total, slope)
    }

    fn update(&mut self, j: usize) -> f64 {
        let demand = self.graph.contracts()[j].demand;
        let cap = self.caps[j];
        if self.delivery(j, 0.0).0 >= demand {
            return 0.0;
        }
        if self.delivery(j, cap).0 <= demand {
            return cap;
        }
        // Safeguarded Newton on a monotone piecewise-linear function.
        let (mut lo, mut hi) = (0.0, cap);
        let mut a = self.alphas[j].clamp(lo, hi);
        for _ in 0..200 {
            let (d, slope) = self.delivery(j, a);
            if (d - demand).abs() <= 1e-14 * demand {
                return a;
            }
            if d < demand {
                lo = a;
            } else {
                hi = a;
            }
            if hi - lo <= 1e-15 * hi.max(1.0) {
                break;
            }
            let newton = if slope > 0.0 {
                a + (demand - d) / slope
            } else {
                f64::NAN
            };
            a = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        0.5 * (lo + hi)
    }

    /// Largest relative complementarity violation and the contract it occurs on.
    fn worst_violation(&mut self, active: &[usize]) -> (f64, usize) {
        let mut worst = (0.0, usize::MAX);
        for &j in active {
            let demand = self.graph.contracts()[j].demand;
            let alpha = self.alphas[j];
            let (d, _) = self.delivery(j, alpha);
            let short = if alpha >= self.caps[j] {
                0.0
            } else {
                (demand - d).max(0.0) / demand
            };
            let slack = if alpha > 0.0 {
                (d - demand).max(0.0) / demand
            } else {
                0.0
            };
            let v = short.max(slack);
            if v > worst.0 || worst.1 == usize::MAX {
                worst = (v, j);
            }
        }
        worst
    }
}
