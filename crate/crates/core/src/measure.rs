//! Empirical probability measures on the torus and on path space.
//!
//! An [`EmpiricalMeasure`] is a weighted particle cloud. Distances between
//! clouds are exact 2-Wasserstein distances computed with the solvers in
//! [`crate::ot`], using squared torus distance as ground cost.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::ot;
use crate::torus::{self, TorusPoint};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const MARGINAL_TOL: f64 = 1e-10;

/// Weighted particle cloud standing for a probability on T^d.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<TorusPoint>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<TorusPoint>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("no particles".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].dim();
        if let Some(p) = points.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimError {
                expected: dim,
                got: p.dim(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidMeasure(format!("non-positive weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(points: Vec<TorusPoint>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    /// Uniform measure from raw coordinate rows.
    pub fn from_coords(rows: &[Vec<f64>]) -> Result<Self> {
        let pts = rows
            .iter()
            .map(|r| TorusPoint::wrap(r))
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(pts)
    }

    pub fn dirac(point: TorusPoint) -> Self {
        Self {
            dim: point.dim(),
            points: vec![point],
            weights: vec![1.0],
        }
    }

    pub(crate) fn from_parts_unchecked(
        dim: usize,
        points: Vec<TorusPoint>,
        weights: Vec<f64>,
    ) -> Self {
        Self {
            dim,
            points,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[TorusPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() < 1e-14)
    }

    /// Same support, atoms in the given order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            dim: self.dim,
            points: order.iter().map(|&i| self.points[i].clone()).collect(),
            weights: order.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Merge atoms with identical coordinates, keeping first-occurrence order.
    pub fn merged(&self) -> Self {
        let mut points: Vec<TorusPoint> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (p, &w) in self.points.iter().zip(&self.weights) {
            if let Some(k) = points.iter().position(|q| q == p) {
                weights[k] += w;
            } else {
                points.push(p.clone());
                weights.push(w);
            }
        }
        Self {
            dim: self.dim,
            points,
            weights,
        }
    }
}

/// Sparse coupling between two empirical measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    entries: Vec<ot::Flow>,
    source_weights: Vec<f64>,
    target_weights: Vec<f64>,
}

/// Which marginal to condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl TransportPlan {
    /// Build a plan from explicit entries, checking marginals.
    pub fn new(
        entries: Vec<ot::Flow>,
        source: &EmpiricalMeasure,
        target: &EmpiricalMeasure,
    ) -> Result<Self> {
        let plan = Self {
            entries,
            source_weights: source.weights.clone(),
            target_weights: target.weights.clone(),
        };
        plan.check_marginals()?;
        Ok(plan)
    }

    /// Plan supported on the diagonal of a measure with itself.
    pub fn identity(m: &EmpiricalMeasure) -> Self {
        Self {
            entries: m
                .weights
                .iter()
                .enumerate()
                .map(|(i, &w)| ot::Flow {
                    row: i,
                    col: i,
                    mass: w,
                })
                .collect(),
            source_weights: m.weights.clone(),
            target_weights: m.weights.clone(),
        }
    }

    pub fn entries(&self) -> &[ot::Flow] {
        &self.entries
    }

    pub fn n_source(&self) -> usize {
        self.source_weights.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_weights.len()
    }

    pub fn mass(&self, row: usize, col: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.row == row && e.col == col)
            .map(|e| e.mass)
            .sum()
    }

    /// `Some(sigma)` with `sigma[row] = col` when every row sends all its mass to one column
    /// and the columns are distinct.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        if self.n_source() != self.n_target() || self.entries.len() != self.n_source() {
            return None;
        }
        let mut sigma = vec![usize::MAX; self.n_source()];
        let mut hit = vec![false; self.n_target()];
        for e in &self.entries {
            if sigma[e.row] != usize::MAX || hit[e.col] {
                return None;
            }
            sigma[e.row] = e.col;
            hit[e.col] = true;
        }
        Some(sigma)
    }

    pub fn check_marginals(&self) -> Result<()> {
        let mut rows = vec![0.0; self.n_source()];
        let mut cols = vec![0.0; self.n_target()];
        for e in &self.entries {
            if e.row >= rows.len() || e.col >= cols.len() {
                return Err(Error::PlanMismatch(format!(
                    "entry ({}, {}) out of range",
                    e.row, e.col
                )));
            }
            if !(e.mass > 0.0) {
                return Err(Error::PlanMismatch(format!("non-positive mass {}", e.mass)));
            }
            rows[e.row] += e.mass;
            cols[e.col] += e.mass;
        }
        for (i, (r, w)) in rows.iter().zip(&self.source_weights).enumerate() {
            if (r - w).abs() > MARGINAL_TOL {
                return Err(Error::PlanMismatch(format!(
                    "row {i} carries {r}, expected {w}"
                )));
            }
        }
        for (j, (c, w)) in cols.iter().zip(&self.target_weights).enumerate() {
            if (c - w).abs() > MARGINAL_TOL {
                return Err(Error::PlanMismatch(format!(
                    "column {j} carries {c}, expected {w}"
                )));
            }
        }
        Ok(())
    }

    /// Whether this plan's marginals are the weights of `source` and `target`.
    pub fn couples(&self, source: &EmpiricalMeasure, target: &EmpiricalMeasure) -> bool {
        self.source_weights.len() == source.len()
            && self.target_weights.len() == target.len()
            && self
                .source_weights
                .iter()
                .zip(&source.weights)
                .all(|(a, b)| (a - b).abs() <= MARGINAL_TOL)
            && self
                .target_weights
                .iter()
                .zip(&target.weights)
                .all(|(a, b)| (a - b).abs() <= MARGINAL_TOL)
    }
}

/// Per-particle conditional distributions: `cond[i]` lists `(other index, probability)`.
pub type Conditionals = Vec<Vec<(usize, f64)>>;

fn check_same_dim(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<()> {
    if m1.is_empty() || m2.is_empty() {
        return Err(Error::InvalidMeasure("empty measure".into()));
    }
    if m1.dim != m2.dim {
        return Err(Error::DimError {
            expected: m1.dim,
            got: m2.dim,
        });
    }
    Ok(())
}

fn cost_matrix(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Vec<f64> {
    let mut c = Vec::with_capacity(m1.len() * m2.len());
    for p in &m1.points {
        for q in &m2.points {
            c.push(torus::sq_dist(p.coords(), q.coords()));
        }
    }
    c
}

/// Exact W2 distance and an optimal plan.
///
/// Equal cardinality with uniform weights is solved as an assignment problem
/// (the plan is then a permutation); everything else goes through min-cost flow.
pub fn w2_exact(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<(f64, TransportPlan)> {
    check_same_dim(m1, m2)?;
    let costs = cost_matrix(m1, m2);
    let (entries, cost) = if m1.len() == m2.len() && m1.is_uniform() && m2.is_uniform() {
        let n = m1.len();
        let (asg, total) = ot::assignment(&costs, n);
        let w = 1.0 / n as f64;
        let entries = asg
            .iter()
            .enumerate()
            .map(|(i, &j)| ot::Flow {
                row: i,
                col: j,
                mass: w,
            })
            .collect();
        (entries, total * w)
    } else {
        ot::transport(&costs, &m1.weights, &m2.weights)
    };
    let plan = TransportPlan {
        entries,
        source_weights: m1.weights.clone(),
        target_weights: m2.weights.clone(),
    };
    Ok((cost.max(0.0).sqrt(), plan))
}

/// Squared W2 without materializing the plan.
pub fn w2_squared(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    check_same_dim(m1, m2)?;
    let costs = cost_matrix(m1, m2);
    let cost = if m1.len() == m2.len() && m1.is_uniform() && m2.is_uniform() {
        ot::assignment(&costs, m1.len()).1 / m1.len() as f64
    } else {
        ot::transport(&costs, &m1.weights, &m2.weights).1
    };
    Ok(cost.max(0.0))
}

pub const BRUTEFORCE_MAX: usize = 8;

/// Minimum over all permutations; test oracle for uniform equal-size measures.
pub fn w2_bruteforce(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    check_same_dim(m1, m2)?;
    let n = m1.len();
    if n > BRUTEFORCE_MAX {
        return Err(Error::OracleTooLarge {
            max: BRUTEFORCE_MAX,
            got: n,
        });
    }
    if m2.len() != n || !m1.is_uniform() || !m2.is_uniform() {
        return Err(Error::InvalidMeasure(
            "brute force needs uniform weights and equal cardinality".into(),
        ));
    }
    let costs = cost_matrix(m1, m2);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| costs[i * n + j])
            .sum::<f64>()
    };
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).sqrt())
}

/// Conditional distributions of a plan given one of its marginals.
pub fn disintegrate(plan: &TransportPlan, side: Side) -> Result<Conditionals> {
    let (n, marg) = match side {
        Side::Source => (plan.n_source(), &plan.source_weights),
        Side::Target => (plan.n_target(), &plan.target_weights),
    };
    let mut cond: Conditionals = vec![Vec::new(); n];
    for e in &plan.entries {
        let (me, other) = match side {
            Side::Source => (e.row, e.col),
            Side::Target => (e.col, e.row),
        };
        cond[me].push((other, e.mass));
    }
    for (i, row) in cond.iter_mut().enumerate() {
        let w = marg[i];
        if !(w > 0.0) || row.is_empty() {
            return Err(Error::DegenerateMarginal(i));
        }
        row.sort_by_key(|&(j, _)| j);
        for entry in row.iter_mut() {
            entry.1 /= w;
        }
    }
    Ok(cond)
}

/// Rebuild plan entries from conditionals and the conditioning marginal.
pub fn recompose(cond: &Conditionals, marginal: &[f64], side: Side) -> Vec<ot::Flow> {
    let mut out = Vec::new();
    for (i, row) in cond.iter().enumerate() {
        for &(j, p) in row {
            let (r, c) = match side {
                Side::Source => (i, j),
                Side::Target => (j, i),
            };
            out.push(ot::Flow {
                row: r,
                col: c,
                mass: marginal[i] * p,
            });
        }
    }
    out.sort_by_key(|a| (a.row, a.col));
    out
}

/// Image of `m` under `map`; weights preserved, coinciding images merged.
pub fn push_forward<F>(m: &EmpiricalMeasure, map: F) -> Result<EmpiricalMeasure>
where
    F: Fn(&TorusPoint) -> Vec<f64>,
{
    let mut pts = Vec::with_capacity(m.len());
    for p in &m.points {
        let img = map(p);
        if img.len() != m.dim {
            return Err(Error::DimError {
                expected: m.dim,
                got: img.len(),
            });
        }
        pts.push(TorusPoint::wrap(&img)?);
    }
    Ok(EmpiricalMeasure::from_parts_unchecked(m.dim, pts, m.weights.clone()).merged())
}

/// Joint measure `m * b` on T^d x labels: atom `(i, l)` with weight `w_i b_i(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMeasure {
    pub atoms: Vec<(usize, usize, f64)>,
    pub n_particles: usize,
    pub n_labels: usize,
}

impl JointMeasure {
    /// Marginal on the particle index.
    pub fn particle_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_particles];
        for &(i, _, w) in &self.atoms {
            out[i] += w;
        }
        out
    }

    pub fn label_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_labels];
        for &(_, l, w) in &self.atoms {
            out[l] += w;
        }
        out
    }
}

pub fn star_product(m: &EmpiricalMeasure, kernel: &[Vec<f64>]) -> Result<JointMeasure> {
    if kernel.len() != m.len() {
        return Err(Error::InvalidKernel(kernel.len().min(m.len())));
    }
    let n_labels = kernel.first().map_or(0, |k| k.len());
    let mut atoms = Vec::new();
    for (i, (row, &w)) in kernel.iter().zip(&m.weights).enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != n_labels
            || row.iter().any(|p| !(*p >= 0.0))
            || (s - 1.0).abs() > WEIGHT_SUM_TOL
        {
            return Err(Error::InvalidKernel(i));
        }
        for (l, &p) in row.iter().enumerate() {
            if p > 0.0 {
                atoms.push((i, l, w * p));
            }
        }
    }
    Ok(JointMeasure {
        atoms,
        n_particles: m.len(),
        n_labels,
    })
}

/// Hashable identity of a measure after rounding coordinates to a lattice.
///
/// The lattice spacing is `1/round(1/resolution)` so that it tiles the
/// circle. Atoms are rounded, sorted and merged; weights are stored in units
/// of `1e-12`. Equal keys imply the rounded measures coincide, hence
/// `W2 <= sqrt(d) * spacing / 2` between the originals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeasureKey(Vec<(Vec<i64>, i64)>);

const WEIGHT_QUANTUM: f64 = 1e-12;

pub fn lattice_cells(resolution: f64) -> i64 {
    (1.0 / resolution).round().max(1.0) as i64
}

fn lattice_index(c: f64, cells: i64) -> i64 {
    (c * cells as f64).round() as i64 % cells
}

pub fn canonical_key(m: &EmpiricalMeasure, resolution: f64) -> MeasureKey {
    let cells = lattice_cells(resolution);
    let mut atoms: Vec<(Vec<i64>, f64)> = m
        .points
        .iter()
        .zip(&m.weights)
        .map(|(p, &w)| {
            (
                p.coords()
                    .iter()
                    .map(|&c| lattice_index(c, cells))
                    .collect(),
                w,
            )
        })
        .collect();
    atoms.sort_by(|a, b| a.0.cmp(&b.0));
    let mut merged: Vec<(Vec<i64>, f64)> = Vec::with_capacity(atoms.len());
    for (k, w) in atoms {
        match merged.last_mut() {
            Some(last) if last.0 == k => last.1 += w,
            _ => merged.push((k, w)),
        }
    }
    MeasureKey(
        merged
            .into_iter()
            .map(|(k, w)| (k, (w / WEIGHT_QUANTUM).round() as i64))
            .collect(),
    )
}

impl MeasureKey {
    pub fn atoms(&self) -> &[(Vec<i64>, i64)] {
        &self.0
    }

    /// Rebuild a key from its textual form.
    pub fn parse(s: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            let (coords, w) = part
                .split_once('@')
                .ok_or_else(|| Error::Parse(format!("bad key atom {part}")))?;
            let coords = coords
                .split('.')
                .map(|c| c.parse::<i64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let w = w.parse::<i64>().map_err(|e| Error::Parse(e.to_string()))?;
            atoms.push((coords, w));
        }
        Ok(Self(atoms))
    }
}

impl fmt::Display for MeasureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (k, w)) in self.0.iter().enumerate() {
            if n > 0 {
                f.write_str("|")?;
            }
            let coords: Vec<String> = k.iter().map(|c| c.to_string()).collect();
            write!(f, "{}@{}", coords.join("."), w)?;
        }
        Ok(())
    }
}

/// Round every particle to the lattice used by [`canonical_key`]; particle
/// order and weights are kept.
pub fn snap(m: &EmpiricalMeasure, resolution: f64) -> EmpiricalMeasure {
    let cells = lattice_cells(resolution);
    let spacing = 1.0 / cells as f64;
    let points = m
        .points
        .iter()
        .map(|p| {
            let c: Vec<f64> = p
                .coords()
                .iter()
                .map(|&c| lattice_index(c, cells) as f64 * spacing)
                .collect();
            TorusPoint::from_raw_unchecked(&c)
        })
        .collect();
    EmpiricalMeasure::from_parts_unchecked(m.dim, points, m.weights.clone())
}

/// Permutation `sigma` with `b.atom(sigma[i])` matching `a.atom(i)` on the
/// lattice. Atoms are matched by rounded coordinates, ties by weight, then by
/// index. Returns `None` when the rounded supports differ.
pub fn lattice_matching(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    resolution: f64,
) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    let cells = lattice_cells(resolution);
    let keyed = |m: &EmpiricalMeasure| -> Vec<(Vec<i64>, i64, usize)> {
        let mut v: Vec<_> = m
            .points
            .iter()
            .zip(&m.weights)
            .enumerate()
            .map(|(i, (p, &w))| {
                (
                    p.coords()
                        .iter()
                        .map(|&c| lattice_index(c, cells))
                        .collect::<Vec<_>>(),
                    (w / WEIGHT_QUANTUM).round() as i64,
                    i,
                )
            })
            .collect();
        v.sort();
        v
    };
    let ka = keyed(a);
    let kb = keyed(b);
    let mut sigma = vec![0usize; a.len()];
    for (x, y) in ka.iter().zip(&kb) {
        if x.0 != y.0 {
            return None;
        }
        sigma[x.2] = y.2;
    }
    Some(sigma)
}

/// Trajectory of one particle sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<TorusPoint>,
}

impl ParticleTrajectory {
    pub fn state_at(&self, t: f64) -> Option<&TorusPoint> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() < 1e-12)
            .map(|i| &self.states[i])
    }

    /// Largest torus distance between consecutive states.
    pub fn max_step(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| torus::sq_dist(w[0].coords(), w[1].coords()).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Flow of measures with the underlying weighted trajectory ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    pub trajectories: Vec<ParticleTrajectory>,
    pub trajectory_weights: Vec<f64>,
    pub lipschitz_const: f64,
}

impl MeasureFlow {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn initial(&self) -> &EmpiricalMeasure {
        &self.measures[0]
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.measures.last().unwrap()
    }

    /// Index of the last node at or before `t`.
    pub fn node_at_or_before(&self, t: f64) -> usize {
        self.times
            .iter()
            .rposition(|&s| s <= t + 1e-12)
            .unwrap_or_default()
    }

    /// Measure at the last node not after `t` (piecewise-constant lookup).
    pub fn measure_at(&self, t: f64) -> &EmpiricalMeasure {
        &self.measures[self.node_at_or_before(t)]
    }

    pub fn covers(&self, from: f64, to: f64) -> bool {
        self.start() <= from + 1e-12 && self.end() >= to - 1e-12
    }

    /// Push-forward of the trajectory ensemble under evaluation at node `i`.
    pub fn evaluate(&self, i: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_parts_unchecked(
            self.measures[0].dim(),
            self.trajectories
                .iter()
                .map(|tr| tr.states[i].clone())
                .collect(),
            self.trajectory_weights.clone(),
        )
    }

    /// Largest `W2(m(t_i), m(t_j)) / |t_i - t_j|` over consecutive nodes.
    pub fn observed_lipschitz(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 1..self.times.len() {
            let dt = self.times[i] - self.times[i - 1];
            if dt <= 0.0 {
                continue;
            }
            // consecutive nodes share the trajectory coupling, which bounds W2 from above
            let d2: f64 = self
                .trajectories
                .iter()
                .zip(&self.trajectory_weights)
                .map(|(tr, &w)| {
                    w * torus::sq_dist(tr.states[i - 1].coords(), tr.states[i].coords())
                })
                .sum();
            best = best.max(d2.sqrt() / dt);
        }
        best
    }
}

/// W2 between two weighted trajectory ensembles for the sup-in-time ground
/// distance on path space. Trajectories must share a time grid.
pub fn path_w2(
    a: &[ParticleTrajectory],
    wa: &[f64],
    b: &[ParticleTrajectory],
    wb: &[f64],
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidMeasure("empty ensemble".into()));
    }
    let mut costs = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            if x.states.len() != y.states.len() {
                return Err(Error::InvalidMeasure(
                    "trajectories on different grids".into(),
                ));
            }
            let sup = x
                .states
                .iter()
                .zip(&y.states)
                .map(|(p, q)| torus::sq_dist(p.coords(), q.coords()))
                .fold(0.0, f64::max);
            costs.push(sup);
        }
    }
    let uniform = |w: &[f64]| w.iter().all(|x| (x - 1.0 / w.len() as f64).abs() < 1e-14);
    let cost = if a.len() == b.len() && uniform(wa) && uniform(wb) {
        ot::assignment(&costs, a.len()).1 / a.len() as f64
    } else {
        ot::transport(&costs, wa, wb).1
    };
    Ok(cost.max(0.0).sqrt())
}

/// Write a measure as `# dim=<d> n=<N>` followed by one row per particle.
pub fn write_measure<W: Write>(m: &EmpiricalMeasure, mut out: W) -> Result<()> {
    writeln!(out, "# dim={} n={}", m.dim, m.len())?;
    for (p, w) in m.points.iter().zip(&m.weights) {
        let mut cols: Vec<String> = p.coords().iter().map(|c| format!("{c:.17}")).collect();
        cols.push(format!("{w:.17}"));
        writeln!(out, "{}", cols.join(" "))?;
    }
    Ok(())
}

/// Parse the tabular measure format. Columns may be separated by whitespace or commas.
pub fn read_measure<R: BufRead>(input: R) -> Result<EmpiricalMeasure> {
    let mut header: Option<(usize, usize)> = None;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if header.is_none() {
                let fields: HashMap<&str, &str> = rest
                    .split_whitespace()
                    .filter_map(|kv| kv.split_once('='))
                    .collect();
                let get = |k: &str| -> Result<usize> {
                    fields
                        .get(k)
                        .ok_or_else(|| Error::Parse(format!("header missing {k}")))?
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("header {k}: {e}")))
                };
                header = Some((get("dim")?, get("n")?));
            }
            continue;
        }
        let (dim, _) =
            header.ok_or_else(|| Error::Parse("missing '# dim=<d> n=<N>' header".into()))?;
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "expected {} columns, found {}",
                dim + 1,
                vals.len()
            )));
        }
        points.push(TorusPoint::wrap(&vals[..dim])?);
        weights.push(vals[dim]);
    }
    let (_, n) = header.ok_or_else(|| Error::Parse("empty measure file".into()))?;
    if points.len() != n {
        return Err(Error::Parse(format!(
            "header says n={n}, found {} rows",
            points.len()
        )));
    }
    EmpiricalMeasure::new(points, weights)
}
