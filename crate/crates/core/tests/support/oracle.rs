//! Brute-force solver for the penalized quadratic allocation program
//!
//! ```text
//! min  Σ_ij s_i (x_ij − θ_j)² / θ_j + Σ_j p_j u_j
//! s.t. Σ_i s_i x_ij + u_j ≥ d_j,   Σ_j x_ij ≤ 1,   x, u ≥ 0
//! ```
//!
//! worked directly on the primal: an augmented Lagrangian on the demand rows, each subproblem
//! solved by accelerated projected gradient over the per-node capped simplices and `u ≥ 0`.
//! It shares nothing with the library's coordinate-ascent dual solver.

use gdalloc::AllocationGraph;

pub struct QpSolution {
    /// `(node, contract, x_ij)` for every edge of a contract with eligible supply.
    pub x: Vec<(usize, usize, f64)>,
    pub u: Vec<f64>,
    /// Multipliers of the demand rows; the library's `α_j` is half of these.
    pub lambda: Vec<f64>,
    pub objective: f64,
    /// Largest gradient-mapping residual of the last inner solve.
    pub stationarity: f64,
    /// Largest demand-row violation (scaled units) at exit.
    pub violation: f64,
}

/// Euclidean projection onto `{v ≥ 0, Σ v ≤ 1}`.
pub fn project_capped_simplex(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    if v.iter().sum::<f64>() <= 1.0 {
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if x > candidate {
            tau = candidate;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
}

pub fn solve_qp(graph: &AllocationGraph, penalties: &[f64], tol: f64) -> QpSolution {
    let supply: Vec<f64> = graph.supply().iter().map(|n| n.supply).collect();
    let scale = supply.iter().cloned().fold(1.0, f64::max);
    let s: Vec<f64> = supply.iter().map(|v| v / scale).collect();
    let m = graph.contracts().len();
    let d: Vec<f64> = graph.contracts().iter().map(|c| c.demand / scale).collect();
    let reach: Vec<f64> = (0..m)
        .map(|j| graph.contract_neighbors(j).iter().map(|&i| s[i]).sum())
        .collect();
    let theta: Vec<Option<f64>> = (0..m).map(|j| (reach[j] > 0.0).then(|| d[j] / reach[j])).collect();

    // Variables grouped by node so each node's block projects onto its own capped simplex.
    let mut blocks: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..s.len() {
        let mut block = Vec::new();
        for &j in graph.node_neighbors(i) {
            if theta[j].is_some() {
                block.push((edges.len(), j));
                edges.push((i, j));
            }
        }
        blocks.push(block);
    }
    let mut by_contract: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (e, &(_, j)) in edges.iter().enumerate() {
        by_contract[j].push(e);
    }
    let n = edges.len();
    let active: Vec<usize> = (0..m).filter(|&j| theta[j].is_some()).collect();

    let theta_min = active.iter().filter_map(|&j| theta[j]).fold(f64::INFINITY, f64::min);
    let mut rho = 2.0 / (theta_min.min(1.0) * active.iter().map(|&j| reach[j] + 1.0).fold(1.0, f64::max));

    // Diagonal majorizer of the augmented Hessian: constant within a node block.
    let steps = |rho: f64| -> (Vec<f64>, Vec<f64>) {
        let x = blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let worst = block
                    .iter()
                    .map(|&(_, j)| s[i] * (2.0 / theta[j].unwrap() + rho * (reach[j] + 1.0)))
                    .fold(0.0, f64::max);
                if worst > 0.0 { 1.0 / worst } else { 0.0 }
            })
            .collect();
        let u = (0..m).map(|j| 1.0 / (rho * (reach[j] + 1.0))).collect();
        (x, u)
    };
    let (mut step_x, mut step_u) = steps(rho);

    let mut lambda = vec![0.0; m];
    let mut z: Vec<f64> = edges.iter().map(|&(_, j)| theta[j].unwrap()).collect();
    for block in &blocks {
        let mut v: Vec<f64> = block.iter().map(|&(e, _)| z[e]).collect();
        project_capped_simplex(&mut v);
        for (k, &(e, _)) in block.iter().enumerate() {
            z[e] = v[k];
        }
    }
    let mut u = vec![0.0; m];
    let mut stationarity = f64::INFINITY;
    let mut violation = f64::INFINITY;

    let shortfall = |x: &[f64], u: &[f64], j: usize| -> f64 {
        d[j] - by_contract[j].iter().map(|&e| s[edges[e].0] * x[e]).sum::<f64>() - u[j]
    };

    for _outer in 0..5_000 {
        // Inner: minimize the augmented Lagrangian for fixed λ.
        let (mut yx, mut yu) = (z.clone(), u.clone());
        let mut t = 1.0f64;
        let mut gx = vec![0.0; n];
        let mut gu = vec![0.0; m];
        for _inner in 0..200_000 {
            for &j in &active {
                let mult = (lambda[j] + rho * shortfall(&yx, &yu, j)).max(0.0);
                let th = theta[j].unwrap();
                for &e in &by_contract[j] {
                    let si = s[edges[e].0];
                    gx[e] = 2.0 * si * (yx[e] - th) / th - si * mult;
                }
                gu[j] = penalties[j] - mult;
            }
            let mut nx = yx.clone();
            for (i, block) in blocks.iter().enumerate() {
                if block.is_empty() {
                    continue;
                }
                let mut v: Vec<f64> = block.iter().map(|&(e, _)| yx[e] - step_x[i] * gx[e]).collect();
                project_capped_simplex(&mut v);
                for (k, &(e, _)) in block.iter().enumerate() {
                    nx[e] = v[k];
                }
            }
            let mut nu = yu.clone();
            for &j in &active {
                nu[j] = (yu[j] - step_u[j] * gu[j]).max(0.0);
            }
            let mut residual: f64 = 0.0;
            for (i, block) in blocks.iter().enumerate() {
                for &(e, _) in block {
                    residual = residual.max((yx[e] - nx[e]).abs() / step_x[i]);
                }
            }
            for &j in &active {
                residual = residual.max((yu[j] - nu[j]).abs() / step_u[j]);
            }
            // Restart momentum when it points uphill.
            let uphill: f64 = (0..n).map(|e| (yx[e] - nx[e]) * (nx[e] - z[e])).sum::<f64>()
                + active.iter().map(|&j| (yu[j] - nu[j]) * (nu[j] - u[j])).sum::<f64>();
            if uphill > 0.0 {
                t = 1.0;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            for e in 0..n {
                yx[e] = nx[e] + beta * (nx[e] - z[e]);
            }
            for &j in &active {
                yu[j] = nu[j] + beta * (nu[j] - u[j]);
            }
            z = nx;
            u = nu;
            t = t_next;
            stationarity = residual;
            if residual <= tol * 1e-2 {
                break;
            }
        }
        let previous = violation;
        violation = 0.0;
        for &j in &active {
            let c = shortfall(&z, &u, j);
            let updated = (lambda[j] + rho * c).max(0.0);
            violation = violation.max((updated - lambda[j]).abs() / rho);
            lambda[j] = updated;
        }
        if violation <= tol && stationarity <= tol {
            break;
        }
        // Slow progress on the demand rows: stiffen the penalty.
        if violation > 0.25 * previous && rho < 1e6 {
            rho *= 2.0;
            (step_x, step_u) = steps(rho);
        }
    }

    let mut objective = 0.0;
    for (e, &(i, j)) in edges.iter().enumerate() {
        let th = theta[j].unwrap();
        objective += supply[i] * (z[e] - th).powi(2) / th;
    }
    let mut u_out = vec![0.0; m];
    for j in 0..m {
        u_out[j] = match theta[j] {
            Some(_) => u[j] * scale,
            None => graph.contracts()[j].demand,
        };
        objective += penalties[j] * u_out[j];
        if theta[j].is_none() {
            lambda[j] = penalties[j];
        }
    }
    QpSolution {
        x: edges.iter().enumerate().map(|(e, &(i, j))| (i, j, z[e])).collect(),
        u: u_out,
        lambda,
        objective,
        stationarity,
        violation,
    }
}
