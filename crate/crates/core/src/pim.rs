//! Programmed iteration on a finite graph of reachable measures: the base
//! functions, the lower and upper operators, their monotone iteration, table
//! persistence and the stepwise memory strategies read off the witnesses.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::{ControlField, JointComponent, JointControlField, Player, RelaxedSchedule};
use crate::dynamics::{advance_pure, generate_flow, StepOptions};
use crate::engine::{MemoryStrategy, RunMeta, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{
    canonical_key, lattice_matching, snap, w2_squared, EmpiricalMeasure, MeasureKey,
};
use crate::scenario::Scenario;
use crate::shift::ValueFunction;

/// A measure node of the graph.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub layer: usize,
    pub key: MeasureKey,
    /// Snapped representative, particle order fixed at discovery.
    pub measure: EmpiricalMeasure,
    pub payoff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Edge {
    succ: u32,
    perm: u32,
}

/// Measures reachable from the root under pure per-particle cell assignments.
///
/// Edges of node `a` are indexed by `u_code * v_count + v_code`, the codes
/// being base-`|U|` and base-`|V|` numbers with particle 0 as leading digit.
/// Particle `i` of the computed successor is particle `perm[i]` of the
/// successor's representative.
#[derive(Debug, Clone)]
pub struct ReachableGraph {
    grid: TimeGrid,
    resolution: f64,
    step: StepOptions,
    n_particles: usize,
    n_u: usize,
    n_v: usize,
    nodes: Vec<GraphNode>,
    layers: Vec<Vec<usize>>,
    index: Vec<HashMap<MeasureKey, usize>>,
    edges: Vec<Vec<Edge>>,
    perms: Vec<Vec<usize>>,
    // code maps for each permutation
    u_maps: Vec<Vec<u32>>,
    v_maps: Vec<Vec<u32>>,
}

fn decode(code: usize, base: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    let mut c = code;
    for i in (0..n).rev() {
        out[i] = c % base;
        c /= base;
    }
    out
}

fn encode(atoms: &[usize], base: usize) -> usize {
    atoms.iter().fold(0, |acc, &a| acc * base + a)
}

/// Code of the assignment moved along `perm`: `out[perm[i]] = atoms[i]`.
fn transport_code(code: usize, base: usize, n: usize, perm: &[usize]) -> usize {
    let atoms = decode(code, base, n);
    let mut out = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = atoms[i];
    }
    encode(&out, base)
}

/// Forward breadth-first expansion from `m0` at the grid start. Nodes are
/// merged by canonical key at the given resolution; `cap` bounds the total
/// node count and the per-node branching.
pub fn build_graph(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    resolution: f64,
    step: StepOptions,
    cap: usize,
) -> Result<ReachableGraph> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Config(format!("invalid resolution {resolution}")));
    }
    if (grid.end() - sc.horizon).abs() > 1e-9 {
        return Err(Error::GridError(format!(
            "partition ends at {}, horizon is {}",
            grid.end(),
            sc.horizon
        )));
    }
    if m0.dim() != sc.dim {
        return Err(Error::DimError {
            expected: sc.dim,
            got: m0.dim(),
        });
    }
    let n = m0.len();
    let (n_u, n_v) = (sc.grid_u.len(), sc.grid_v.len());
    let branching = (n_u as f64).powi(n as i32) * (n_v as f64).powi(n as i32);
    if branching > cap as f64 || branching > u32::MAX as f64 {
        return Err(Error::GraphTooLarge {
            cap,
            layers: vec![1],
        });
    }
    let (u_count, v_count) = (n_u.pow(n as u32), n_v.pow(n as u32));
    let root = snap(m0, resolution);
    let mut g = ReachableGraph {
        grid: grid.clone(),
        resolution,
        step,
        n_particles: n,
        n_u,
        n_v,
        nodes: Vec::new(),
        layers: vec![Vec::new(); grid.nodes().len()],
        index: vec![HashMap::new(); grid.nodes().len()],
        edges: Vec::new(),
        perms: Vec::new(),
        u_maps: Vec::new(),
        v_maps: Vec::new(),
    };
    let mut perm_ids: HashMap<Vec<usize>, u32> = HashMap::new();
    g.add_node(0, root, sc);
    for c in 0..grid.cells() {
        let (t0, t1) = (grid.nodes()[c], grid.nodes()[c + 1]);
        let layer = g.layers[c].clone();
        let succs: Vec<Vec<EmpiricalMeasure>> = layer
            .par_iter()
            .map(|&a| {
                let m = &g.nodes[a].measure;
                (0..u_count * v_count)
                    .map(|code| {
                        let u = decode(code / v_count, n_u, n);
                        let v = decode(code % v_count, n_v, n);
                        advance_pure(sc, t0, t1 - t0, m, &u, &v, step).map(|x| snap(&x, resolution))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (&a, ms) in layer.iter().zip(succs) {
            let mut edges = Vec::with_capacity(ms.len());
            for m in ms {
                let key = canonical_key(&m, resolution);
                let id = match g.index[c + 1].get(&key) {
                    Some(&id) => id,
                    None => {
                        if g.nodes.len() >= cap {
                            let mut sizes: Vec<usize> = g.layers.iter().map(|l| l.len()).collect();
                            sizes.truncate(c + 2);
                            return Err(Error::GraphTooLarge { cap, layers: sizes });
                        }
                        g.add_node(c + 1, m.clone(), sc)
                    }
                };
                let perm =
                    lattice_matching(&m, &g.nodes[id].measure, resolution).ok_or_else(|| {
                        Error::InvalidMeasure(
                            "successor does not match its node representative".into(),
                        )
                    })?;
                let next = perm_ids.len() as u32;
                let pid = *perm_ids.entry(perm.clone()).or_insert_with(|| {
                    g.perms.push(perm);
                    next
                });
                edges.push(Edge {
                    succ: id as u32,
                    perm: pid,
                });
            }
            g.edges[a] = edges;
        }
    }
    g.u_maps = g
        .perms
        .iter()
        .map(|p| {
            (0..u_count)
                .map(|c| transport_code(c, n_u, n, p) as u32)
                .collect()
        })
        .collect();
    g.v_maps = g
        .perms
        .iter()
        .map(|p| {
            (0..v_count)
                .map(|c| transport_code(c, n_v, n, p) as u32)
                .collect()
        })
        .collect();
    Ok(g)
}

impl ReachableGraph {
    fn add_node(&mut self, layer: usize, measure: EmpiricalMeasure, sc: &Scenario) -> usize {
        let id = self.nodes.len();
        let key = canonical_key(&measure, self.resolution);
        self.index[layer].insert(key.clone(), id);
        self.layers[layer].push(id);
        self.nodes.push(GraphNode {
            layer,
            key,
            payoff: sc.payoff(&measure),
            measure,
        });
        self.edges.push(Vec::new());
        id
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn step(&self) -> StepOptions {
        self.step
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn terminal_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn u_count(&self) -> usize {
        self.n_u.pow(self.n_particles as u32)
    }

    pub fn v_count(&self) -> usize {
        self.n_v.pow(self.n_particles as u32)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }

    /// Per-particle atoms of an assignment code.
    pub fn decode_u(&self, code: usize) -> Vec<usize> {
        decode(code, self.n_u, self.n_particles)
    }

    pub fn decode_v(&self, code: usize) -> Vec<usize> {
        decode(code, self.n_v, self.n_particles)
    }

    pub fn encode_u(&self, atoms: &[usize]) -> usize {
        encode(atoms, self.n_u)
    }

    pub fn encode_v(&self, atoms: &[usize]) -> usize {
        encode(atoms, self.n_v)
    }

    /// Successor of `a` and the particle permutation onto its representative.
    pub fn successor(&self, a: usize, u_code: usize, v_code: usize) -> Option<(usize, &[usize])> {
        let e = self.edges[a].get(u_code * self.v_count() + v_code)?;
        Some((e.succ as usize, &self.perms[e.perm as usize]))
    }

    /// Node of `layer` with the canonical key of `m`.
    pub fn lookup(&self, layer: usize, m: &EmpiricalMeasure) -> Option<usize> {
        self.index
            .get(layer)?
            .get(&canonical_key(m, self.resolution))
            .copied()
    }

    /// Node of `layer` closest to `m` in `W2`, lowest id on ties.
    pub fn nearest(&self, layer: usize, m: &EmpiricalMeasure) -> Option<usize> {
        if let Some(id) = self.lookup(layer, m) {
            return Some(id);
        }
        let mut best: Option<(usize, f64)> = None;
        for &id in self.layers.get(layer)? {
            let d = w2_squared(m, &self.nodes[id].measure).ok()?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((id, d));
            }
        }
        best.map(|b| b.0)
    }

    /// `max g - min g` over the terminal layer.
    pub fn terminal_range(&self) -> f64 {
        let vals = self.layers[self.terminal_layer()]
            .iter()
            .map(|&i| self.nodes[i].payoff);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        hi - lo
    }

    fn own_count(&self, kind: TableKind) -> usize {
        match kind {
            TableKind::Lower => self.v_count(),
            TableKind::Upper => self.u_count(),
        }
    }

    fn other_count(&self, kind: TableKind) -> usize {
        match kind {
            TableKind::Lower => self.u_count(),
            TableKind::Upper => self.v_count(),
        }
    }

    /// Successor and transported commitment for the committing side of `kind`.
    fn step_commit(&self, kind: TableKind, a: usize, commit: usize, resp: usize) -> (usize, usize) {
        let v_count = self.v_count();
        let code = match kind {
            TableKind::Lower => resp * v_count + commit,
            TableKind::Upper => commit * v_count + resp,
        };
        let e = self.edges[a][code];
        let maps = match kind {
            TableKind::Lower => &self.v_maps,
            TableKind::Upper => &self.u_maps,
        };
        (e.succ as usize, maps[e.perm as usize][commit] as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TableKind {
    /// `omega_k`, the second player commits.
    Lower,
    /// `omega^k`, the first player commits.
    Upper,
}

impl TableKind {
    pub fn label(self) -> &'static str {
        match self {
            TableKind::Lower => "lower",
            TableKind::Upper => "upper",
        }
    }

    fn committer(self) -> Player {
        match self {
            TableKind::Lower => Player::Second,
            TableKind::Upper => Player::First,
        }
    }

    /// Whether `a` beats `b` for the committing player.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            TableKind::Lower => a > b,
            TableKind::Upper => a < b,
        }
    }
}

/// Argument of the outer optimum at a node: the layer `r` up to which the
/// commitment `commit` is held, and the opponent's first-cell reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Witness {
    pub r: usize,
    pub commit: usize,
    pub response: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub kind: TableKind,
    pub k: usize,
    pub values: Vec<f64>,
    pub witnesses: Vec<Option<Witness>>,
    pub converged: bool,
    /// Root gap `omega^k - omega_k` once both tables of index `k` exist.
    pub gap: f64,
}

impl ValueTable {
    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }
}

/// Commitment values `F[node][commit]` for target layer `r`: the optimum of
/// the responder over paths that hold `commit` until layer `r`, where `omega`
/// is read. Layers after `r` stay empty.
fn commit_values(g: &ReachableGraph, omega: &[f64], r: usize, kind: TableKind) -> Vec<Vec<f64>> {
    let own = g.own_count(kind);
    let other = g.other_count(kind);
    let mut f: Vec<Vec<f64>> = vec![Vec::new(); g.len()];
    for &a in &g.layers[r] {
        f[a] = vec![omega[a]; own];
    }
    for j in (0..r).rev() {
        let rows: Vec<Vec<f64>> = g.layers[j]
            .par_iter()
            .map(|&a| {
                (0..own)
                    .map(|c| {
                        let mut best = match kind {
                            TableKind::Lower => f64::INFINITY,
                            TableKind::Upper => f64::NEG_INFINITY,
                        };
                        for resp in 0..other {
                            let (b, c2) = g.step_commit(kind, a, c, resp);
                            let v = f[b][c2];
                            // responder moves against the committer
                            if kind.better(best, v) {
                                best = v;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect();
        for (&a, row) in g.layers[j].iter().zip(rows) {
            f[a] = row;
        }
    }
    f
}

fn first_response(
    g: &ReachableGraph,
    f: &[Vec<f64>],
    a: usize,
    commit: usize,
    kind: TableKind,
) -> usize {
    let mut best = (0, None::<f64>);
    for resp in 0..g.other_count(kind) {
        let (b, c2) = g.step_commit(kind, a, commit, resp);
        let v = f[b][c2];
        if best.1.is_none_or(|cur| kind.better(cur, v)) {
            best = (resp, Some(v));
        }
    }
    best.0
}

/// Outer optimum over target layers in `rs` (ascending) and commitments.
/// Ties keep the earliest layer, then the smallest commitment code.
fn operator(
    g: &ReachableGraph,
    omega: &[f64],
    kind: TableKind,
    only_terminal: bool,
) -> (Vec<f64>, Vec<Option<Witness>>) {
    let k_last = g.terminal_layer();
    let mut values = vec![0.0; g.len()];
    let mut wit: Vec<Option<Witness>> = vec![None; g.len()];
    if !only_terminal {
        for (a, node) in g.nodes.iter().enumerate() {
            values[a] = omega[a];
            wit[a] = Some(Witness {
                r: node.layer,
                commit: 0,
                response: None,
            });
        }
    }
    let first = if only_terminal { k_last } else { 1 };
    for r in first..=k_last {
        let f = commit_values(g, omega, r, kind);
        for (a, node) in g.nodes.iter().enumerate() {
            if node.layer > r || (node.layer == r && !only_terminal) {
                continue;
            }
            for (c, &v) in f[a].iter().enumerate() {
                if wit[a].is_none() || kind.better(v, values[a]) {
                    values[a] = v;
                    let response = (node.layer < r).then(|| first_response(g, &f, a, c, kind));
                    wit[a] = Some(Witness {
                        r,
                        commit: c,
                        response,
                    });
                }
            }
        }
    }
    (values, wit)
}

fn base_table(g: &ReachableGraph, kind: TableKind) -> ValueTable {
    let payoff: Vec<f64> = g.nodes.iter().map(|n| n.payoff).collect();
    let (values, witnesses) = operator(g, &payoff, kind, true);
    ValueTable {
        kind,
        k: 0,
        values,
        witnesses,
        converged: false,
        gap: f64::NAN,
    }
}

/// `omega_0`: best constant second-player assignment held to the horizon
/// against the best pure reply path of the first player.
pub fn omega_lower_0(g: &ReachableGraph) -> ValueTable {
    base_table(g, TableKind::Lower)
}

/// `omega^0`: mirror of [`omega_lower_0`] with the first player committing.
pub fn omega_upper_0(g: &ReachableGraph) -> ValueTable {
    base_table(g, TableKind::Upper)
}

fn apply(table: &ValueTable, g: &ReachableGraph, kind: TableKind) -> Result<ValueTable> {
    if table.kind != kind {
        return Err(Error::Config(format!("expected a {} table", kind.label())));
    }
    if table.values.len() != g.len() {
        return Err(Error::TableIncomplete(format!(
            "table has {} values, graph has {} nodes",
            table.values.len(),
            g.len()
        )));
    }
    let (values, witnesses) = operator(g, &table.values, kind, false);
    Ok(ValueTable {
        kind,
        k: table.k + 1,
        values,
        witnesses,
        converged: false,
        gap: f64::NAN,
    })
}

/// `Phi`: sup over later layers and constant second-player assignments of the
/// first player's best reply, reading the previous table at the reached node.
pub fn apply_phi(table: &ValueTable, g: &ReachableGraph) -> Result<ValueTable> {
    apply(table, g, TableKind::Lower)
}

/// `Psi`: inf over later layers and constant first-player assignments.
pub fn apply_psi(table: &ValueTable, g: &ReachableGraph) -> Result<ValueTable> {
    apply(table, g, TableKind::Upper)
}

/// Both sequences of tables and the convergence record.
#[derive(Debug, Clone)]
pub struct Iteration {
    pub lower: Vec<ValueTable>,
    pub upper: Vec<ValueTable>,
    /// Root gap for every computed `k`.
    pub gap_history: Vec<f64>,
    pub converged: bool,
    /// Operator sweeps performed by the last call.
    pub sweeps: usize,
    pub last_increment_lower: Vec<f64>,
    pub last_increment_upper: Vec<f64>,
}

impl Iteration {
    pub fn omega_star(&self) -> &ValueTable {
        self.lower.last().unwrap()
    }

    pub fn omega_upper_star(&self) -> &ValueTable {
        self.upper.last().unwrap()
    }

    pub fn root_gap(&self) -> f64 {
        *self.gap_history.last().unwrap()
    }
}

fn increments(a: &ValueTable, b: &ValueTable) -> Vec<f64> {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (y - x).abs())
        .collect()
}

/// Alternate `Phi` and `Psi` until both sequences change by at most `tol`
/// at every node, or `max_k` is reached.
pub fn iterate(g: &ReachableGraph, tol: f64, max_k: usize) -> Result<Iteration> {
    resume(
        g,
        vec![omega_lower_0(g)],
        vec![omega_upper_0(g)],
        tol,
        max_k,
    )
}

/// Continue an iteration from previously computed tables.
pub fn resume(
    g: &ReachableGraph,
    mut lower: Vec<ValueTable>,
    mut upper: Vec<ValueTable>,
    tol: f64,
    max_k: usize,
) -> Result<Iteration> {
    if !(tol >= 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be nonnegative, got {tol}"
        )));
    }
    if lower.is_empty() || lower.len() != upper.len() {
        return Err(Error::TableIncomplete(
            "lower and upper sequences differ in length".into(),
        ));
    }
    for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
        if l.k != k || u.k != k || l.values.len() != g.len() || u.values.len() != g.len() {
            return Err(Error::TableIncomplete(format!(
                "table {k} does not fit the graph"
            )));
        }
    }
    let root = g.root();
    let stalled = |lower: &[ValueTable], upper: &[ValueTable]| {
        let n = lower.len();
        n >= 2
            && increments(&lower[n - 2], &lower[n - 1])
                .iter()
                .all(|&d| d <= tol)
            && increments(&upper[n - 2], &upper[n - 1])
                .iter()
                .all(|&d| d <= tol)
    };
    let mut sweeps = 0;
    while !stalled(&lower, &upper) && lower.len() <= max_k {
        let l = apply_phi(lower.last().unwrap(), g)?;
        let u = apply_psi(upper.last().unwrap(), g)?;
        lower.push(l);
        upper.push(u);
        sweeps += 1;
    }
    let converged = stalled(&lower, &upper);
    let mut gap_history = Vec::with_capacity(lower.len());
    for (l, u) in lower.iter_mut().zip(upper.iter_mut()) {
        let gap = u.values[root] - l.values[root];
        l.gap = gap;
        u.gap = gap;
        gap_history.push(gap);
    }
    let n = lower.len();
    let (last_increment_lower, last_increment_upper) = if n >= 2 {
        (
            increments(&lower[n - 2], &lower[n - 1]),
            increments(&upper[n - 2], &upper[n - 1]),
        )
    } else {
        (vec![f64::NAN; g.len()], vec![f64::NAN; g.len()])
    };
    lower.last_mut().unwrap().converged = converged;
    upper.last_mut().unwrap().converged = converged;
    Ok(Iteration {
        lower,
        upper,
        gap_history,
        converged,
        sweeps,
        last_increment_lower,
        last_increment_upper,
    })
}

/// Cell-by-cell minimax with one side choosing its assignment first.
/// `Player::First` leading gives `min_u max_v`, `Player::Second` gives
/// `max_v min_u`.
pub fn stepwise_minimax(g: &ReachableGraph, leader: Player) -> Vec<f64> {
    let mut vals: Vec<f64> = g.nodes.iter().map(|n| n.payoff).collect();
    let (uc, vc) = (g.u_count(), g.v_count());
    for j in (0..g.terminal_layer()).rev() {
        let row: Vec<f64> = g.layers[j]
            .par_iter()
            .map(|&a| {
                let at = |u: usize, v: usize| vals[g.edges[a][u * vc + v].succ as usize];
                match leader {
                    Player::First => (0..uc)
                        .map(|u| (0..vc).map(|v| at(u, v)).fold(f64::NEG_INFINITY, f64::max))
                        .fold(f64::INFINITY, f64::min),
                    Player::Second => (0..vc)
                        .map(|v| (0..uc).map(|u| at(u, v)).fold(f64::INFINITY, f64::min))
                        .fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        for (&a, v) in g.layers[j].iter().zip(row) {
            vals[a] = v;
        }
    }
    vals
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest amount by which the inequality fails (negative when it holds).
    pub worst: f64,
}

fn stability(g: &ReachableGraph, psi: &[f64], kind: TableKind, tol: f64) -> StabilityReport {
    let mut rep = StabilityReport {
        checked: 0,
        violations: 0,
        worst: f64::NEG_INFINITY,
    };
    for (a, node) in g.nodes.iter().enumerate() {
        if node.layer == g.terminal_layer() {
            continue;
        }
        for c in 0..g.own_count(kind) {
            let mut best = match kind {
                TableKind::Lower => f64::INFINITY,
                TableKind::Upper => f64::NEG_INFINITY,
            };
            for resp in 0..g.other_count(kind) {
                let (b, _) = g.step_commit(kind, a, c, resp);
                if kind.better(best, psi[b]) {
                    best = psi[b];
                }
            }
            let excess = match kind {
                TableKind::Lower => best - psi[a],
                TableKind::Upper => psi[a] - best,
            };
            rep.checked += 1;
            rep.worst = rep.worst.max(excess);
            if excess > tol {
                rep.violations += 1;
            }
        }
    }
    rep
}

/// For every node and constant second-player assignment some first-player
/// reply does not raise `psi` over one cell.
pub fn check_u_stability(g: &ReachableGraph, psi: &ValueTable, tol: f64) -> StabilityReport {
    stability(g, &psi.values, TableKind::Lower, tol)
}

/// Mirror check: every first-player assignment admits a reply not lowering `psi`.
pub fn check_v_stability(g: &ReachableGraph, psi: &ValueTable, tol: f64) -> StabilityReport {
    stability(g, &psi.values, TableKind::Upper, tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    pub samples: usize,
    pub best: f64,
    /// `max(0, omega_0(root) - best)`.
    pub gap: f64,
}

/// Random relaxed first-player replies to the root witness of `omega_0`,
/// constant mixtures per cell and particle, snapped at every node.
pub fn mixture_gap(
    sc: &Scenario,
    g: &ReachableGraph,
    omega0: &ValueTable,
    samples: usize,
    seed: u64,
) -> Result<MixtureReport> {
    let root = g.root();
    let w = omega0.witnesses[root]
        .ok_or_else(|| Error::TableIncomplete("root witness missing".into()))?;
    let beta = g.decode_v(w.commit);
    let nu = sc.grid_u.len();
    let nv = sc.grid_v.len();
    let declared = ControlField::pure(Player::Second, nv, &beta)?;
    let mut best = f64::INFINITY;
    for s in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut m = g.nodes[root].measure.clone();
        for c in 0..g.grid.cells() {
            let (t0, t1) = (g.grid.nodes()[c], g.grid.nodes()[c + 1]);
            let mut entries = Vec::with_capacity(beta.len());
            for &b in &beta {
                let raw: Vec<f64> = (0..nu).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                entries.push(vec![JointComponent {
                    weight: 1.0,
                    u: RelaxedSchedule::constant(raw.iter().map(|x| x / total).collect())?,
                    v: RelaxedSchedule::point_mass(b, nv),
                }]);
            }
            let joint = JointControlField::new(entries, Some(declared.clone()))?;
            let flow = generate_flow(sc, t0, &m, &joint, t1, g.step)?;
            m = snap(flow.terminal(), g.resolution);
        }
        best = best.min(sc.payoff(&m));
    }
    let gap = if samples == 0 {
        0.0
    } else {
        (omega0.values[root] - best).max(0.0)
    };
    Ok(MixtureReport { samples, best, gap })
}

/// A value table read as a function of `(t, m)` on the graph nodes.
pub struct TableValue {
    graph: Arc<ReachableGraph>,
    values: Vec<f64>,
}

impl TableValue {
    pub fn new(graph: Arc<ReachableGraph>, table: &ValueTable) -> Result<Self> {
        if table.values.len() != graph.len() {
            return Err(Error::TableIncomplete(
                "table does not fit the graph".into(),
            ));
        }
        Ok(Self {
            graph,
            values: table.values.clone(),
        })
    }
}

impl ValueFunction for TableValue {
    fn value(&self, s: f64, m: &EmpiricalMeasure) -> Option<f64> {
        let layer = self.graph.grid.index_of(s)?;
        self.graph.lookup(layer, m).map(|id| self.values[id])
    }

    fn candidates(&self, s: f64) -> Vec<EmpiricalMeasure> {
        match self.graph.grid.index_of(s) {
            Some(layer) => self.graph.layers[layer]
                .iter()
                .map(|&id| self.graph.nodes[id].measure.clone())
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Second-player stepwise strategy with memory built from `omega_0..omega_k`:
/// hold the witness assignment of `omega_n` until its layer, then restart with
/// `omega_{n-1}` from the observed node.
pub struct QStrategy {
    graph: Arc<ReachableGraph>,
    tables: Vec<ValueTable>,
    pub epsilon: f64,
}

/// One phase of the replay: assignment in rollout particle order, held on
/// cells `[from, until)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QPhase {
    pub level: usize,
    pub from: usize,
    pub until: usize,
    pub node: usize,
    pub atoms: Vec<usize>,
}

pub fn build_q_strategy(
    graph: Arc<ReachableGraph>,
    tables: &[ValueTable],
    epsilon: f64,
) -> Result<QStrategy> {
    if tables.is_empty() {
        return Err(Error::TableIncomplete("no tables".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    for (k, t) in tables.iter().enumerate() {
        if t.kind != TableKind::Lower || t.k != k {
            return Err(Error::TableIncomplete(format!("expected lower table {k}")));
        }
        if t.values.len() != graph.len() || t.witnesses.len() != graph.len() {
            return Err(Error::TableIncomplete(format!(
                "table {k} does not fit the graph"
            )));
        }
    }
    Ok(QStrategy {
        graph,
        tables: tables.to_vec(),
        epsilon,
    })
}

impl QStrategy {
    pub fn level(&self) -> usize {
        self.tables.len() - 1
    }

    /// Value the strategy guarantees from the root.
    pub fn guarantee(&self) -> f64 {
        self.tables[self.level()].values[self.graph.root()]
    }

    fn locate(&self, layer: usize, m: &EmpiricalMeasure) -> Result<usize> {
        self.graph
            .nearest(layer, m)
            .ok_or_else(|| Error::TableIncomplete(format!("no node in layer {layer}")))
    }

    fn witness(&self, level: usize, node: usize) -> Result<Witness> {
        self.tables[level].witnesses[node].ok_or_else(|| {
            Error::TableIncomplete(format!("witness missing at node {node}, level {level}"))
        })
    }

    /// Phases covering cells `0..=cell` of the observed history.
    pub fn phases(&self, cell: usize, history: &[EmpiricalMeasure]) -> Result<Vec<QPhase>> {
        let g = &self.graph;
        let mut out: Vec<QPhase> = Vec::new();
        let mut level = self.level();
        let mut c = 0;
        while c <= cell {
            let node = self.locate(c, &history[c])?;
            let mut w = self.witness(level, node)?;
            while w.r == c && level > 0 {
                level -= 1;
                w = self.witness(level, node)?;
            }
            if w.r <= c {
                return Err(Error::TableIncomplete(format!(
                    "no move recorded at node {node}"
                )));
            }
            let rep = g.decode_v(w.commit);
            let sigma = lattice_matching(&history[c], &g.nodes[node].measure, g.resolution)
                .unwrap_or_else(|| (0..rep.len()).collect());
            let atoms: Vec<usize> = sigma.iter().map(|&s| rep[s]).collect();
            out.push(QPhase {
                level,
                from: c,
                until: w.r,
                node,
                atoms,
            });
            c = w.r;
            level = level.saturating_sub(1);
        }
        Ok(out)
    }
}

impl MemoryStrategy for QStrategy {
    fn player(&self) -> Player {
        Player::Second
    }

    fn field(
        &self,
        sc: &Scenario,
        grid: &TimeGrid,
        cell: usize,
        history: &[EmpiricalMeasure],
    ) -> Result<ControlField> {
        if grid.nodes().len() != self.graph.grid.nodes().len()
            || grid
                .nodes()
                .iter()
                .zip(self.graph.grid.nodes())
                .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::GridError(
                "partition differs from the graph's".into(),
            ));
        }
        let phases = self.phases(cell, history)?;
        let last = phases.last().unwrap();
        ControlField::pure(Player::Second, sc.grid_v.len(), &last.atoms)
    }
}

/// Write tables as CSV rows keyed by node.
pub fn write_tables<W: Write>(
    g: &ReachableGraph,
    tables: &[&ValueTable],
    mut out: W,
    meta: &RunMeta,
) -> Result<()> {
    meta.write(&mut out)?;
    writeln!(
        out,
        "node_key,time_index,kind,k,value,witness_beta,witness_response,witness_r"
    )?;
    for t in tables {
        for (id, node) in g.nodes.iter().enumerate() {
            let (beta, resp, r) = match t.witnesses[id] {
                Some(w) => (
                    w.commit.to_string(),
                    w.response.map_or(String::new(), |x| x.to_string()),
                    w.r.to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                node.key,
                node.layer,
                t.kind.label(),
                t.k,
                t.values[id],
                beta,
                resp,
                r
            )?;
        }
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad {what}: {s}")))
}

/// Read tables written by [`write_tables`], returning the lower and upper
/// sequences ordered by `k`. Every node must be present in every table.
pub fn read_tables<R: BufRead>(
    g: &ReachableGraph,
    input: R,
) -> Result<(Vec<ValueTable>, Vec<ValueTable>)> {
    let mut acc: HashMap<(TableKind, usize), ValueTable> = HashMap::new();
    let mut filled: HashMap<(TableKind, usize), usize> = HashMap::new();
    for line in input.lines() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("node_key") || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Parse(format!("expected 8 columns: {line}")));
        }
        let key = MeasureKey::parse(cols[0])?;
        let layer: usize = parse_field(cols[1], "time index")?;
        let kind = match cols[2] {
            "lower" => TableKind::Lower,
            "upper" => TableKind::Upper,
            other => return Err(Error::Parse(format!("bad table kind {other}"))),
        };
        let k: usize = parse_field(cols[3], "k")?;
        let value: f64 = parse_field(cols[4], "value")?;
        let witness = if cols[5].is_empty() {
            None
        } else {
            Some(Witness {
                commit: parse_field(cols[5], "witness")?,
                response: if cols[6].is_empty() {
                    None
                } else {
                    Some(parse_field(cols[6], "response")?)
                },
                r: parse_field(cols[7], "layer")?,
            })
        };
        let id = *g
            .index
            .get(layer)
            .and_then(|ix| ix.get(&key))
            .ok_or_else(|| {
                Error::TableIncomplete(format!("node {key} at layer {layer} not in graph"))
            })?;
        let t = acc.entry((kind, k)).or_insert_with(|| ValueTable {
            kind,
            k,
            values: vec![f64::NAN; g.len()],
            witnesses: vec![None; g.len()],
            converged: false,
            gap: f64::NAN,
        });
        if t.values[id].is_nan() {
            *filled.entry((kind, k)).or_insert(0) += 1;
        }
        t.values[id] = value;
        t.witnesses[id] = witness;
    }
    let mut take = |kind: TableKind| -> Result<Vec<ValueTable>> {
        let mut out = Vec::new();
        while let Some(t) = acc.remove(&(kind, out.len())) {
            if filled.get(&(kind, t.k)).copied().unwrap_or(0) != g.len() {
                return Err(Error::TableIncomplete(format!(
                    "{} table {} misses nodes",
                    kind.label(),
                    t.k
                )));
            }
            out.push(t);
        }
        Ok(out)
    };
    let lower = take(TableKind::Lower)?;
    let upper = take(TableKind::Upper)?;
    if !acc.is_empty() {
        return Err(Error::TableIncomplete(
            "tables are not numbered from 0".into(),
        ));
    }
    Ok((lower, upper))
}

/// Player committing in tables of `kind`.
pub fn committer(kind: TableKind) -> Player {
    kind.committer()
}
