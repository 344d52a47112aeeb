use std::collections::HashMap;
use std::ops::Range;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    Algorithm, ContractReport, CycleRecord, DeliveryPoint, ImpressionEvent, ServingMode,
    SimError, SimulationConfig, SimulationReport,
};
use crate::dual::{self, DualError, DualObjectiveSpec};
use crate::feedback::{self, DeliveryState};
use crate::hwm;
use crate::model::{AllocationGraph, AttributeMap, Contract, SupplyNode, TimeWindow};
use crate::targeting;

/// Relative remaining demand below which a contract counts as fulfilled.
const FILL_EPS: f64 = 1e-9;

enum Rule {
    /// Rates truncated in allocation order (HWM and the pacing comparator).
    Truncated {
        position: Vec<Option<usize>>,
        rate: Vec<f64>,
    },
    Dual {
        theta: Vec<Option<f64>>,
        alpha: Vec<f64>,
    },
}

impl Rule {
    fn probabilities(&self, candidates: &[usize], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match self {
            Self::Truncated { position, rate } => {
                let mut ordered: Vec<(usize, usize)> = candidates
                    .iter()
                    .filter_map(|&j| position[j].map(|p| (p, j)))
                    .collect();
                ordered.sort_unstable();
                let rates: Vec<f64> = ordered.iter().map(|&(_, j)| rate[j]).collect();
                for (&(_, j), p) in ordered.iter().zip(hwm::truncate_rates(&rates)) {
                    if p > 0.0 {
                        out.push((j, p));
                    }
                }
            }
            Self::Dual { theta, alpha } => {
                let present: Vec<(usize, f64)> = candidates
                    .iter()
                    .filter_map(|&j| theta[j].map(|t| (j, t)))
                    .collect();
                let pairs: Vec<(f64, f64)> = present.iter().map(|&(j, t)| (t, alpha[j])).collect();
                for (&(j, _), x) in present.iter().zip(dual::reconstruct_primal(&pairs)) {
                    if x > 0.0 {
                        out.push((j, x));
                    }
                }
            }
        }
    }
}

struct CyclePlan {
    rule: Rule,
    /// Delivery cap per contract for this cycle.
    limits: Vec<f64>,
    rates: Vec<(usize, f64)>,
}

/// Traffic seen by the pacing comparator.
struct Pacer {
    observed: Vec<f64>,
    previous: Vec<Option<(f64, f64)>>,
}

struct Sim<'a> {
    contracts: &'a [Contract],
    imps: &'a [ImpressionEvent],
    cfg: &'a SimulationConfig,
    classes: &'a [SupplyNode],
    class_contracts: Vec<&'a [usize]>,
    elig_lists: Vec<Vec<usize>>,
    imp_elig: Vec<usize>,
    cuts: Vec<DateTime<Utc>>,
    /// Actual impression weight per attribute class and time segment.
    counts: Vec<Vec<f64>>,
    states: Vec<DeliveryState>,
    series: Vec<Vec<DeliveryPoint>>,
    unallocated: f64,
}

fn hours(d: Duration) -> f64 {
    d.num_milliseconds() as f64 / 3.6e6
}

fn overlap_hours(c: &Contract, start: DateTime<Utc>, end: DateTime<Utc>) -> f64 {
    let (a, b) = (c.start.max(start), c.end.min(end));
    if b > a {
        hours(b - a)
    } else {
        0.0
    }
}

fn fill_eps(c: &Contract) -> f64 {
    FILL_EPS * c.booked_demand.max(1.0)
}

pub(super) fn run(
    graph: &AllocationGraph,
    impressions: &[ImpressionEvent],
    cfg: &SimulationConfig,
    algorithm: Algorithm,
) -> Result<SimulationReport, SimError> {
    cfg.validate()?;
    graph.ensure_valid()?;
    if let Some(n) = impressions.windows(2).position(|w| w[1].ts < w[0].ts) {
        return Err(SimError::Unsorted {
            index: n + 1,
            id: impressions[n + 1].id.clone(),
        });
    }
    let contracts = graph.contracts();
    let total: f64 = impressions.iter().map(|e| e.weight as f64).sum();
    let mut report = SimulationReport {
        algorithm,
        mode: cfg.mode,
        contracts: Vec::new(),
        cycles: Vec::new(),
        total_impressions: total,
        unallocated: total,
        underdelivery_fraction: 0.0,
        smoothness: Default::default(),
        delivery_improvement: None,
        diagnostics: Vec::new(),
    };
    let Some(t0) = contracts.iter().map(|c| c.start).min() else {
        return Ok(report);
    };
    // The forecast always covers every flight; `until` only stops the replay.
    let span = contracts.iter().map(|c| c.end).max().unwrap_or(t0);
    let horizon = cfg.until.map_or(span, |u| span.min(u));
    if horizon <= t0 {
        return Err(SimError::Config("`until` precedes the first flight".into()));
    }

    let period = Duration::milliseconds((cfg.reopt_period_hours * 3.6e6).round() as i64);
    let mut grid = vec![t0];
    loop {
        let next = grid[grid.len() - 1] + period;
        if next >= span {
            grid.push(span);
            break;
        }
        grid.push(next);
    }
    let mut boundaries: Vec<DateTime<Utc>> = grid.iter().copied().filter(|t| *t < horizon).collect();
    boundaries.push(horizon);
    let mut cuts = grid;
    cuts.push(horizon);
    cuts.extend(
        contracts
            .iter()
            .flat_map(|c| [c.start, c.end])
            .filter(|t| t0 < *t && *t < span),
    );
    cuts.sort_unstable();
    cuts.dedup();

    let classes = graph.supply();
    let mut class_of: HashMap<&AttributeMap, usize> = HashMap::new();
    for (i, node) in classes.iter().enumerate() {
        class_of.entry(&node.attributes).or_insert(i);
    }
    let mut elig_of: HashMap<&AttributeMap, usize> = HashMap::new();
    let mut elig_lists = Vec::new();
    let mut imp_elig = Vec::with_capacity(impressions.len());
    let mut counts = vec![vec![0.0; cuts.len() - 1]; classes.len()];
    for imp in impressions {
        let e = *elig_of.entry(&imp.attributes).or_insert_with(|| {
            elig_lists.push(
                (0..contracts.len())
                    .filter(|&j| targeting::eligible(&imp.attributes, &contracts[j].targeting))
                    .collect(),
            );
            elig_lists.len() - 1
        });
        imp_elig.push(e);
        if let Some(&c) = class_of.get(&imp.attributes) {
            if t0 <= imp.ts && imp.ts < span {
                let g = cuts.partition_point(|t| *t <= imp.ts) - 1;
                counts[c][g] += imp.weight as f64;
            }
        }
    }

    let mut sim = Sim {
        contracts,
        imps: impressions,
        cfg,
        classes,
        class_contracts: (0..classes.len()).map(|i| graph.node_neighbors(i)).collect(),
        elig_lists,
        imp_elig,
        cuts,
        counts,
        states: vec![DeliveryState::default(); contracts.len()],
        series: vec![Vec::new(); contracts.len()],
        unallocated: 0.0,
    };
    let mut pacer = Pacer {
        observed: vec![0.0; contracts.len()],
        previous: vec![None; contracts.len()],
    };
    let mut warm: HashMap<String, f64> = HashMap::new();

    let before = impressions.partition_point(|e| e.ts < t0);
    let after = impressions.partition_point(|e| e.ts < horizon);
    sim.unallocated += impressions[..before]
        .iter()
        .chain(&impressions[after..])
        .map(|e| e.weight as f64)
        .sum::<f64>();

    let mut cursor = before;
    for k in 0..boundaries.len() - 1 {
        let (b, e) = (boundaries[k], boundaries[k + 1]);
        if k > 0 {
            sim.record(b);
        }
        let planned: Vec<usize> = (0..contracts.len())
            .filter(|&j| contracts[j].end > b && !sim.fulfilled(j))
            .collect();
        let plan = match algorithm {
            Algorithm::Hwm => sim.plan_hwm(b, &planned),
            Algorithm::Dual => sim.plan_dual(b, &planned, &mut warm, &mut report.diagnostics)?,
            Algorithm::Base => sim.plan_base(b, e, &planned, &pacer),
        };
        let end = impressions.partition_point(|x| x.ts < e);
        let observe = (algorithm == Algorithm::Base).then_some(&mut pacer.observed);
        sim.serve(&plan, cursor..end, observe);
        cursor = end;
        if algorithm == Algorithm::Base {
            for j in 0..contracts.len() {
                let h = overlap_hours(&contracts[j], b, e);
                if h > 0.0 {
                    pacer.previous[j] = Some((pacer.observed[j], h));
                }
                pacer.observed[j] = 0.0;
            }
        }
        report.cycles.push(CycleRecord {
            start: b,
            end: e,
            rates: plan
                .rates
                .iter()
                .map(|&(j, r)| (contracts[j].id.clone(), r))
                .collect(),
        });
    }
    sim.record(horizon);

    report.unallocated = sim.unallocated;
    report.contracts = contracts
        .iter()
        .zip(sim.states)
        .zip(sim.series)
        .map(|((c, state), series)| ContractReport {
            id: c.id.clone(),
            booked_demand: c.booked_demand,
            delivered: state.delivered,
            start: c.start,
            end: c.end,
            finished: c.end <= horizon,
            series,
        })
        .collect();
    report.summarize();
    Ok(report)
}

impl<'a> Sim<'a> {
    fn fulfilled(&self, j: usize) -> bool {
        let c = &self.contracts[j];
        c.booked_demand - self.states[j].delivered <= fill_eps(c)
    }

    fn record(&mut self, t: DateTime<Utc>) {
        for (j, c) in self.contracts.iter().enumerate() {
            if c.start >= t {
                continue;
            }
            let at = t.min(c.end);
            if self.series[j].last().is_none_or(|p| p.t < at) {
                self.series[j].push(DeliveryPoint {
                    t: at,
                    delivered: self.states[j].delivered,
                    linear_goal: feedback::linear_goal(c, at),
                });
            }
        }
    }

    /// Remaining demand reported to the planner, after feedback when configured.
    fn demand(&mut self, j: usize, t: DateTime<Utc>) -> f64 {
        let c = &self.contracts[j];
        match &self.cfg.feedback {
            Some(fb) => {
                feedback::apply_feedback(&mut self.states[j], c, t, fb, self.cfg.reopt_period_hours)
                    .adjusted_demand
            }
            None => (c.booked_demand - self.states[j].delivered).max(0.0),
        }
    }

    /// Planning graph over the remaining flight: one node per attribute class and time segment.
    fn forecast_graph(&mut self, b: DateTime<Utc>, planned: &[usize]) -> AllocationGraph {
        let mut local = vec![usize::MAX; self.contracts.len()];
        let mut contracts = Vec::with_capacity(planned.len());
        for (l, &j) in planned.iter().enumerate() {
            local[j] = l;
            let mut c = self.contracts[j].clone();
            c.demand = self.demand(j, b);
            contracts.push(c);
        }
        let first = self.cuts.partition_point(|t| *t < b);
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            let multiplier = self.cfg.forecast_error_multiplier.multiplier(&class.id);
            for g in first..self.cuts.len() - 1 {
                let actual = self.counts[c][g];
                if actual <= 0.0 {
                    continue;
                }
                let (ws, we) = (self.cuts[g], self.cuts[g + 1]);
                let targets: Vec<usize> = self.class_contracts[c]
                    .iter()
                    .filter(|&&j| {
                        let con = &self.contracts[j];
                        local[j] != usize::MAX && con.start <= ws && we <= con.end
                    })
                    .map(|&j| local[j])
                    .collect();
                if targets.is_empty() {
                    continue;
                }
                let i = nodes.len();
                nodes.push(
                    SupplyNode::new(format!("{}@{g}", class.id), AttributeMap::new(), actual * multiplier)
                        .with_window(TimeWindow { start: ws, end: we }),
                );
                edges.extend(targets.into_iter().map(|l| (i, l)));
            }
        }
        AllocationGraph::from_index_edges(nodes, contracts, edges)
    }

    fn plan_hwm(&mut self, b: DateTime<Utc>, planned: &[usize]) -> CyclePlan {
        let fg = self.forecast_graph(b, planned);
        let plan = hwm::plan(&fg);
        let n = self.contracts.len();
        let (mut position, mut rate) = (vec![None; n], vec![0.0; n]);
        let mut rates = Vec::with_capacity(plan.entries.len());
        for (order, e) in plan.entries.iter().enumerate() {
            let j = planned[fg.contract_index(&e.contract_id).expect("planned contract")];
            position[j] = Some(order);
            rate[j] = e.alpha;
            rates.push((j, e.alpha));
        }
        CyclePlan {
            rule: Rule::Truncated { position, rate },
            limits: self.contracts.iter().map(|c| c.booked_demand).collect(),
            rates,
        }
    }

    fn plan_dual(
        &mut self,
        b: DateTime<Utc>,
        planned: &[usize],
        warm: &mut HashMap<String, f64>,
        diagnostics: &mut Vec<String>,
    ) -> Result<CyclePlan, SimError> {
        let fg = self.forecast_graph(b, planned);
        let spec = DualObjectiveSpec::from_graph(&fg);
        let plan = match dual::solve(&fg, &spec, self.cfg.dual_tol, self.cfg.dual_max_sweeps, warm) {
            Ok(p) => p,
            Err(DualError::NotConverged {
                sweeps,
                contract_id,
                worst_violation,
                plan,
            }) => {
                diagnostics.push(format!(
                    "{b}: dual solver stopped after {sweeps} sweeps (violation {worst_violation:.3e} on {contract_id})"
                ));
                *plan
            }
            Err(e) => return Err(e.into()),
        };
        let n = self.contracts.len();
        let (mut theta, mut alpha) = (vec![None; n], vec![0.0; n]);
        let mut rates = Vec::with_capacity(plan.entries.len());
        for e in &plan.entries {
            let j = planned[fg.contract_index(&e.contract_id).expect("planned contract")];
            theta[j] = Some(e.theta);
            alpha[j] = e.alpha;
            warm.insert(e.contract_id.clone(), e.alpha);
            rates.push((j, e.alpha));
        }
        Ok(CyclePlan {
            rule: Rule::Dual { theta, alpha },
            limits: self.contracts.iter().map(|c| c.booked_demand).collect(),
            rates,
        })
    }

    fn plan_base(
        &self,
        b: DateTime<Utc>,
        e: DateTime<Utc>,
        planned: &[usize],
        pacer: &Pacer,
    ) -> CyclePlan {
        let n = self.contracts.len();
        let mut rate = vec![0.0; n];
        let mut limits: Vec<f64> = self.contracts.iter().map(|c| c.booked_demand).collect();
        let mut keyed = Vec::with_capacity(planned.len());
        for &j in planned {
            let c = &self.contracts[j];
            let now = overlap_hours(c, b, e);
            let estimate = pacer.previous[j].map(|(w, h)| w * now / h);
            let goal = feedback::linear_goal(c, e.min(c.end));
            let need = goal - self.states[j].delivered;
            rate[j] = match estimate {
                _ if need <= 0.0 => 0.0,
                Some(x) if x > 0.0 => (need / x).min(1.0),
                _ => 1.0,
            };
            limits[j] = goal.min(c.booked_demand);
            keyed.push((estimate.unwrap_or(0.0), j));
        }
        keyed.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.contracts[a.1].id.cmp(&self.contracts[b.1].id))
        });
        let mut position = vec![None; n];
        for (order, &(_, j)) in keyed.iter().enumerate() {
            position[j] = Some(order);
        }
        CyclePlan {
            rates: planned.iter().map(|&j| (j, rate[j])).collect(),
            rule: Rule::Truncated { position, rate },
            limits,
        }
    }

    fn candidates(&self, imp: &ImpressionEvent, elig: usize, open: &[bool]) -> Vec<usize> {
        self.elig_lists[elig]
            .iter()
            .copied()
            .filter(|&j| open[j] && self.contracts[j].is_live_at(imp.ts))
            .collect()
    }

    /// Serves one cycle. Probabilities are computed in parallel against the contracts open at
    /// the start of the cycle, then applied in stream order; an impression whose eligible set
    /// lost a contract during the cycle is re-evaluated.
    fn serve(&mut self, plan: &CyclePlan, range: Range<usize>, mut observe: Option<&mut Vec<f64>>) {
        let mut open: Vec<bool> = (0..self.contracts.len())
            .map(|j| plan.limits[j] - self.states[j].delivered > fill_eps(&self.contracts[j]))
            .collect();
        let slice = &self.imps[range.clone()];
        let chunk = slice.len().div_ceil(self.cfg.shards).max(1);
        let this = &*self;
        let open_ref = &open;
        let precomputed: Vec<Vec<(usize, f64)>> = slice
            .par_chunks(chunk)
            .enumerate()
            .map(|(s, part)| {
                let mut out = Vec::with_capacity(part.len());
                for (n, imp) in part.iter().enumerate() {
                    let elig = this.imp_elig[range.start + s * chunk + n];
                    let mut probs = Vec::new();
                    plan.rule.probabilities(&this.candidates(imp, elig, open_ref), &mut probs);
                    out.push(probs);
                }
                out
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();

        let mut closed = vec![false; self.contracts.len()];
        let mut any_closed = false;
        for (n, (imp, mut probs)) in slice.iter().zip(precomputed).enumerate() {
            let index = range.start + n;
            let elig = self.imp_elig[index];
            if let Some(obs) = observe.as_deref_mut() {
                for &j in &self.elig_lists[elig] {
                    if self.contracts[j].is_live_at(imp.ts) {
                        obs[j] += imp.weight as f64;
                    }
                }
            }
            if any_closed && self.elig_lists[elig].iter().any(|&j| closed[j]) {
                plan.rule.probabilities(&self.candidates(imp, elig, &open), &mut probs);
            }
            let weight = imp.weight as f64;
            let mut served = 0.0;
            let mut close = |sim: &mut Self, j: usize, open: &mut Vec<bool>| {
                if plan.limits[j] - sim.states[j].delivered <= fill_eps(&sim.contracts[j]) {
                    open[j] = false;
                    closed[j] = true;
                    any_closed = true;
                    true
                } else {
                    false
                }
            };
            match self.cfg.mode {
                ServingMode::Expected => {
                    let mut left = weight;
                    while left > 0.0 && !probs.is_empty() {
                        // Largest share of the remaining weight no contract overflows on.
                        let mut share: f64 = 1.0;
                        for &(j, p) in &probs {
                            let room = plan.limits[j] - self.states[j].delivered;
                            if left * p > room {
                                share = share.min(room.max(0.0) / (left * p));
                            }
                        }
                        let mut any = false;
                        for &(j, p) in &probs {
                            let room = (plan.limits[j] - self.states[j].delivered).max(0.0);
                            let amount = (left * share * p).min(room);
                            self.states[j].delivered += amount;
                            served += amount;
                            any |= close(self, j, &mut open);
                        }
                        if !any {
                            break;
                        }
                        left *= 1.0 - share;
                        plan.rule.probabilities(&self.candidates(imp, elig, &open), &mut probs);
                    }
                }
                ServingMode::Sampled => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                    rng.set_stream(index as u64);
                    for _ in 0..imp.weight {
                        let u: f64 = rng.random();
                        let mut cumulative = 0.0;
                        let hit = probs.iter().find(|&&(_, p)| {
                            cumulative += p;
                            u < cumulative
                        });
                        if let Some(&(j, _)) = hit {
                            self.states[j].delivered += 1.0;
                            served += 1.0;
                            if close(self, j, &mut open) {
                                plan.rule.probabilities(&self.candidates(imp, elig, &open), &mut probs);
                            }
                        }
                    }
                }
            }
            self.unallocated += weight - served;
        }
    }
}
