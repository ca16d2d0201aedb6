//! Exact discrete optimal transport solvers.
//!
//! Two routes: a dense Hungarian (shortest augmenting path) solver for the
//! equal-weight, equal-cardinality case, and a successive-shortest-path
//! min-cost flow for arbitrary marginals. Both take a row-major cost matrix
//! and break ties by lowest index, so results are reproducible.

/// One entry of a sparse coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub row: usize,
    pub col: usize,
    pub mass: f64,
}

/// Minimum-cost perfect matching on an `n x n` cost matrix.
///
/// Returns `assignment[row] = col` and the total cost.
pub fn assignment(costs: &[f64], n: usize) -> (Vec<usize>, f64) {
    debug_assert_eq!(costs.len(), n * n);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i * n + j])
        .sum();
    (assignment, total)
}

const MASS_EPS: f64 = 1e-15;

/// Min-cost transport between supplies `a` (rows) and demands `b` (cols).
///
/// Successive shortest paths with Johnson potentials on the dense residual
/// bipartite graph. Costs must be nonnegative. Each augmentation exhausts a
/// supply, a demand or a reverse arc, so the loop terminates after at most a
/// few multiples of `n + m` rounds for the problem sizes used here.
pub fn transport(costs: &[f64], a: &[f64], b: &[f64]) -> (Vec<Flow>, f64) {
    let n = a.len();
    let m = b.len();
    debug_assert_eq!(costs.len(), n * m);
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // potentials: rows 0..n, cols n..n+m
    let mut pot = vec![0.0; n + m];
    let total_nodes = n + m;
    let mut dist = vec![f64::INFINITY; total_nodes];
    let mut prev = vec![usize::MAX; total_nodes];
    let mut done = vec![false; total_nodes];

    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= 1e-14 || !supply.iter().any(|&s| s > MASS_EPS) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            // dense Dijkstra, lowest index on ties
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for v in 0..total_nodes {
                if !done[v] && dist[v] < best_d {
                    best_d = dist[v];
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let node = n + j;
                    if done[node] {
                        continue;
                    }
                    let rc = costs[i * m + j] + pot[i] - pot[node];
                    let nd = best_d + rc.max(0.0);
                    if nd < dist[node] {
                        dist[node] = nd;
                        prev[node] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= MASS_EPS {
                        continue;
                    }
                    let rc = -costs[i * m + j] + pot[best] - pot[i];
                    let nd = best_d + rc.max(0.0);
                    if nd < dist[i] {
                        dist[i] = nd;
                        prev[i] = best;
                    }
                }
            }
        }
        // closest column with unmet demand
        let mut sink = usize::MAX;
        let mut sink_d = f64::INFINITY;
        for j in 0..m {
            if demand[j] > MASS_EPS && dist[n + j] < sink_d {
                sink_d = dist[n + j];
                sink = n + j;
            }
        }
        if sink == usize::MAX {
            break;
        }
        let cap_d = sink_d;
        for v in 0..total_nodes {
            pot[v] += dist[v].min(cap_d);
        }
        // bottleneck along the path
        let mut push = demand[sink - n];
        let mut v = sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                // reverse arc col u -> row v
                push = push.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        push = push.min(supply[v]);
        if push <= MASS_EPS {
            // numerical dust; retire the smaller endpoint
            if supply[v] <= demand[sink - n] {
                supply[v] = 0.0;
            } else {
                demand[sink - n] = 0.0;
            }
            continue;
        }
        supply[v] -= push;
        demand[sink - n] -= push;
        let mut w = sink;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u < n {
                flow[u * m + (w - n)] += push;
            } else {
                flow[w * m + (u - n)] -= push;
            }
            w = u;
        }
    }

    let mut entries = Vec::new();
    let mut cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            let f = flow[i * m + j];
            if f > MASS_EPS {
                entries.push(Flow {
                    row: i,
                    col: j,
                    mass: f,
                });
                cost += f * costs[i * m + j];
            }
        }
    }
    (entries, cost)
}
