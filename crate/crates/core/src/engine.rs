//! Game rollouts on a time partition, outcome functionals and adversarial
//! search over piecewise-constant pure opponents.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{
    join_with_response, pure_field_count, pure_response, ControlField, JointControlField, Player,
};
use crate::dynamics::{advance_pure, generate_flow, StepOptions};
use crate::error::{Error, Result};
use crate::measure::{snap, EmpiricalMeasure, MeasureFlow};
use crate::scenario::Scenario;
use crate::shift::{ExtremalShiftStrategy, ShiftConstants, ValueFunction};

const TIME_TOL: f64 = 1e-9;

/// Partition `t_0 < t_1 < ... < t_K` of the game interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::GridError("empty partition".into()));
        }
        if nodes.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::GridError(
                "nodes must be finite and nonnegative".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::GridError("nodes must increase".into()));
        }
        Ok(Self { nodes })
    }

    pub fn uniform(t0: f64, t_end: f64, cells: usize) -> Result<Self> {
        if t_end < t0 {
            return Err(Error::GridError(format!("end {t_end} before start {t0}")));
        }
        if cells == 0 || t_end == t0 {
            return Self::new(vec![t0]);
        }
        let mut nodes: Vec<f64> = (0..cells)
            .map(|i| t0 + (t_end - t0) * i as f64 / cells as f64)
            .collect();
        nodes.push(t_end);
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Largest cell length `d(Δ)`.
    pub fn fineness(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.nodes.iter().position(|&s| (s - t).abs() < TIME_TOL)
    }

    fn check_horizon(&self, sc: &Scenario) -> Result<()> {
        if (self.end() - sc.horizon).abs() > TIME_TOL {
            return Err(Error::GridError(format!(
                "partition ends at {}, horizon is {}",
                self.end(),
                sc.horizon
            )));
        }
        Ok(())
    }
}

/// Map `(t, m)` to a constant control field of one player.
pub trait FeedbackStrategy: Send + Sync {
    fn player(&self) -> Player;
    fn field(&self, sc: &Scenario, t: f64, m: &EmpiricalMeasure) -> Result<ControlField>;
}

/// Stepwise strategy that sees the measures at all past partition nodes.
pub trait MemoryStrategy: Send + Sync {
    fn player(&self) -> Player;
    /// Field for cell `cell`; `history[i]` is the measure at node `i <= cell`.
    fn field(
        &self,
        sc: &Scenario,
        grid: &TimeGrid,
        cell: usize,
        history: &[EmpiricalMeasure],
    ) -> Result<ControlField>;
}

/// Every particle plays the same atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantStrategy {
    pub player: Player,
    pub atom: usize,
}

impl FeedbackStrategy for ConstantStrategy {
    fn player(&self) -> Player {
        self.player
    }

    fn field(&self, sc: &Scenario, _t: f64, m: &EmpiricalMeasure) -> Result<ControlField> {
        let n = match self.player {
            Player::First => sc.grid_u.len(),
            Player::Second => sc.grid_v.len(),
        };
        ControlField::pure(self.player, n, &vec![self.atom; m.len()])
    }
}

impl FeedbackStrategy for ExtremalShiftStrategy {
    fn player(&self) -> Player {
        self.player
    }

    fn field(&self, sc: &Scenario, t: f64, m: &EmpiricalMeasure) -> Result<ControlField> {
        Ok(self.decide(sc, t, m)?.field)
    }
}

/// A feedback strategy viewed as a memory strategy reading only the last node.
pub struct Memoryless<'a>(pub &'a dyn FeedbackStrategy);

impl MemoryStrategy for Memoryless<'_> {
    fn player(&self) -> Player {
        self.0.player()
    }

    fn field(
        &self,
        sc: &Scenario,
        grid: &TimeGrid,
        cell: usize,
        history: &[EmpiricalMeasure],
    ) -> Result<ControlField> {
        self.0.field(sc, grid.nodes()[cell], &history[cell])
    }
}

type MemoKey = (u64, Vec<u64>);

/// Memoizes a feedback strategy on exact `(t, m)`.
pub struct Cached<S> {
    inner: S,
    memo: Mutex<HashMap<MemoKey, ControlField>>,
}

impl<S: FeedbackStrategy> Cached<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

fn memo_key(t: f64, m: &EmpiricalMeasure) -> MemoKey {
    let mut bits: Vec<u64> = m
        .points()
        .iter()
        .flat_map(|p| p.coords().iter().map(|c| c.to_bits()))
        .collect();
    bits.extend(m.weights().iter().map(|w| w.to_bits()));
    (t.to_bits(), bits)
}

impl<S: FeedbackStrategy> FeedbackStrategy for Cached<S> {
    fn player(&self) -> Player {
        self.inner.player()
    }

    fn field(&self, sc: &Scenario, t: f64, m: &EmpiricalMeasure) -> Result<ControlField> {
        let key = memo_key(t, m);
        if let Some(f) = self.memo.lock().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let f = self.inner.field(sc, t, m)?;
        self.memo.lock().unwrap().insert(key, f.clone());
        Ok(f)
    }
}

/// Pure opponent atoms, `opponent[cell][particle]`. Missing particles play atom 0.
pub type Opponent = Vec<Vec<usize>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub step: StepOptions,
    /// Snap the measure to this lattice at every partition node.
    pub snap: Option<f64>,
}

impl RolloutOptions {
    pub fn new(h: f64) -> Self {
        Self {
            step: StepOptions::euler(h),
            snap: None,
        }
    }

    pub fn snapped(h: f64, resolution: f64) -> Self {
        Self {
            step: StepOptions::euler(h),
            snap: Some(resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub start: f64,
    pub end: f64,
    pub field: ControlField,
    pub joint: JointControlField,
    pub opponent: Vec<usize>,
    pub flow: MeasureFlow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub cells: Vec<CellRecord>,
    /// Measure at every partition node (after snapping when enabled).
    pub nodes: Vec<EmpiricalMeasure>,
    pub outcome: f64,
}

impl RolloutRecord {
    /// Every cell's joint field is consistent with the field the strategy issued.
    pub fn consistent(&self) -> bool {
        self.cells
            .iter()
            .all(|c| crate::control::validate_consistency(&c.joint))
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.nodes.last().unwrap()
    }

    /// Trace rows `t, particle, x_0..x_{d-1}, u_atom, v_atom, value` and a summary row.
    pub fn write_csv<W: Write>(&self, mut out: W, meta: &RunMeta) -> Result<()> {
        meta.write(&mut out)?;
        let dim = self.nodes[0].dim();
        let coord_cols: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
        writeln!(
            out,
            "t,particle,{},u_atom,v_atom,value",
            coord_cols.join(",")
        )?;
        let blank = vec![""; dim].join(",");
        let atom = |s: &crate::control::RelaxedSchedule, t: f64| match s.pure_atom_at(t) {
            Some(a) => a.to_string(),
            None => "mix".to_string(),
        };
        for c in &self.cells {
            let t = c.start;
            let mut sub = 0;
            for (i, comps) in c.joint.entries().iter().enumerate() {
                for comp in comps {
                    let p = &c.flow.trajectories[sub].states[0];
                    let coords: Vec<String> =
                        p.coords().iter().map(|x| format!("{x:.12}")).collect();
                    writeln!(
                        out,
                        "{t:.9},{i},{},{},{},",
                        coords.join(","),
                        atom(&comp.u, t),
                        atom(&comp.v, t)
                    )?;
                    sub += 1;
                }
            }
        }
        let last = self.terminal();
        let t_end = self.cells.last().map_or(0.0, |c| c.end);
        for (i, p) in last.points().iter().enumerate() {
            let coords: Vec<String> = p.coords().iter().map(|x| format!("{x:.12}")).collect();
            writeln!(out, "{t_end:.9},{i},{},,,", coords.join(","))?;
        }
        writeln!(out, "{t_end:.9},summary,{blank},,,{:.12}", self.outcome)?;
        Ok(())
    }
}

/// Reproducibility header written as `# key=value` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMeta {
    pub scenario_hash: String,
    pub seed: u64,
    pub params: Vec<(String, String)>,
}

impl RunMeta {
    pub fn new(scenario_hash: &str, seed: u64) -> Self {
        Self {
            scenario_hash: scenario_hash.to_string(),
            seed,
            params: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# scenario_hash={}", self.scenario_hash)?;
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# version={}", env!("CARGO_PKG_VERSION"))?;
        for (k, v) in &self.params {
            writeln!(out, "# {k}={v}")?;
        }
        Ok(())
    }
}

fn other_len(sc: &Scenario, player: Player) -> usize {
    match player {
        Player::First => sc.grid_v.len(),
        Player::Second => sc.grid_u.len(),
    }
}

fn padded(atoms: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|i| atoms.get(i).copied().unwrap_or(0)).collect()
}

fn build_joint(sc: &Scenario, field: &ControlField, atoms: &[usize]) -> Result<JointControlField> {
    let resp = pure_response(
        field,
        &padded(atoms, field.n_particles()),
        other_len(sc, field.player()),
    )?;
    join_with_response(field, &resp)
}

fn snap_opt(m: EmpiricalMeasure, opts: &RolloutOptions) -> EmpiricalMeasure {
    match opts.snap {
        Some(q) => snap(&m, q),
        None => m,
    }
}

/// Next node measure without storing the flow. Pure joint fields take the
/// fast path; mixtures go through particle splitting.
fn advance_cell(
    sc: &Scenario,
    t0: f64,
    t1: f64,
    m: &EmpiricalMeasure,
    field: &ControlField,
    atoms: &[usize],
    opts: &RolloutOptions,
) -> Result<EmpiricalMeasure> {
    if let Some(own) = field.pure_atoms() {
        let other = padded(atoms, own.len());
        let (u, v) = match field.player() {
            Player::First => (own, other),
            Player::Second => (other, own),
        };
        for (&a, &b) in u.iter().zip(&v) {
            if a >= sc.grid_u.len() {
                return Err(Error::UnknownAtom {
                    atom: a,
                    size: sc.grid_u.len(),
                });
            }
            if b >= sc.grid_v.len() {
                return Err(Error::UnknownAtom {
                    atom: b,
                    size: sc.grid_v.len(),
                });
            }
        }
        let next = advance_pure(sc, t0, t1 - t0, m, &u, &v, opts.step)?;
        return Ok(snap_opt(next, opts));
    }
    let joint = build_joint(sc, field, atoms)?;
    let flow = generate_flow(sc, t0, m, &joint, t1, opts.step)?;
    Ok(snap_opt(flow.terminal().clone(), opts))
}

fn check_player(strat: Player, want: Player) -> Result<()> {
    if strat != want {
        return Err(Error::Config(format!(
            "expected a {want:?}-player strategy, got {strat:?}"
        )));
    }
    Ok(())
}

/// Rollout of a memory strategy against a fixed pure opponent.
pub fn rollout_memory(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn MemoryStrategy,
    opponent: &Opponent,
    opts: RolloutOptions,
) -> Result<RolloutRecord> {
    grid.check_horizon(sc)?;
    let mut nodes = vec![snap_opt(m0.clone(), &opts)];
    let mut cells = Vec::with_capacity(grid.cells());
    for c in 0..grid.cells() {
        let (t0, t1) = (grid.nodes()[c], grid.nodes()[c + 1]);
        let field = strat.field(sc, grid, c, &nodes)?;
        if field.n_particles() != nodes[c].len() {
            return Err(Error::IncompleteResponse {
                particle: field.n_particles().min(nodes[c].len()),
                component: 0,
            });
        }
        let atoms = padded(
            opponent.get(c).map_or(&[][..], |v| v.as_slice()),
            field.n_particles(),
        );
        let joint = build_joint(sc, &field, &atoms)?;
        let flow = generate_flow(sc, t0, &nodes[c], &joint, t1, opts.step)?;
        nodes.push(snap_opt(flow.terminal().clone(), &opts));
        cells.push(CellRecord {
            start: t0,
            end: t1,
            field,
            joint,
            opponent: atoms,
            flow,
        });
    }
    let outcome = sc.payoff(nodes.last().unwrap());
    Ok(RolloutRecord {
        cells,
        nodes,
        outcome,
    })
}

/// Upper game: a first-player feedback strategy against pure V-assignments.
pub fn rollout_upper(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn FeedbackStrategy,
    opponent: &Opponent,
    opts: RolloutOptions,
) -> Result<RolloutRecord> {
    check_player(strat.player(), Player::First)?;
    rollout_memory(sc, grid, m0, &Memoryless(strat), opponent, opts)
}

/// Lower game: a second-player feedback strategy against pure U-assignments.
pub fn rollout_lower(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn FeedbackStrategy,
    opponent: &Opponent,
    opts: RolloutOptions,
) -> Result<RolloutRecord> {
    check_player(strat.player(), Player::Second)?;
    rollout_memory(sc, grid, m0, &Memoryless(strat), opponent, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchMode {
    Exhaustive { cap: u64 },
    Heuristic { restarts: usize, seed: u64 },
}

impl SearchMode {
    pub fn label(&self) -> &'static str {
        match self {
            SearchMode::Exhaustive { .. } => "exhaustive",
            SearchMode::Heuristic { .. } => "heuristic",
        }
    }
}

/// Best opponent found and its outcome. Heuristic results bound the true
/// optimum from the opponent's side only.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub value: f64,
    pub opponent: Opponent,
    pub mode: &'static str,
    pub evaluated: u64,
}

struct Searcher<'a> {
    sc: &'a Scenario,
    grid: &'a TimeGrid,
    strat: &'a dyn MemoryStrategy,
    opts: RolloutOptions,
    maximize: bool,
    n_other: usize,
    cap: u64,
    evaluated: u64,
}

impl Searcher<'_> {
    fn better(&self, a: f64, b: f64) -> bool {
        if self.maximize {
            a > b
        } else {
            a < b
        }
    }

    fn dfs(
        &mut self,
        history: &mut Vec<EmpiricalMeasure>,
        path: &mut Opponent,
    ) -> Result<(f64, Opponent)> {
        let c = history.len() - 1;
        if c == self.grid.cells() {
            self.evaluated += 1;
            if self.evaluated > self.cap {
                return Err(Error::SearchSpaceTooLarge {
                    size: self.evaluated as f64,
                    cap: self.cap,
                });
            }
            return Ok((self.sc.payoff(&history[c]), path.clone()));
        }
        let (t0, t1) = (self.grid.nodes()[c], self.grid.nodes()[c + 1]);
        let field = self.strat.field(self.sc, self.grid, c, history)?;
        let n = field.n_particles();
        let mut best: Option<(f64, Opponent)> = None;
        let mut atoms = vec![0usize; n];
        loop {
            let next = advance_cell(self.sc, t0, t1, &history[c], &field, &atoms, &self.opts)?;
            history.push(next);
            path.push(atoms.clone());
            let (v, p) = self.dfs(history, path)?;
            path.pop();
            history.pop();
            if best.as_ref().is_none_or(|b| self.better(v, b.0)) {
                best = Some((v, p));
            }
            // next assignment, last particle fastest
            let mut pos = n;
            loop {
                if pos == 0 {
                    return Ok(best.unwrap());
                }
                pos -= 1;
                atoms[pos] += 1;
                if atoms[pos] < self.n_other {
                    break;
                }
                atoms[pos] = 0;
            }
        }
    }

    fn evaluate(&mut self, m0: &EmpiricalMeasure, opp: &Opponent) -> Result<f64> {
        self.evaluated += 1;
        let mut history = vec![snap_opt(m0.clone(), &self.opts)];
        for c in 0..self.grid.cells() {
            let (t0, t1) = (self.grid.nodes()[c], self.grid.nodes()[c + 1]);
            let field = self.strat.field(self.sc, self.grid, c, &history)?;
            let next = advance_cell(self.sc, t0, t1, &history[c], &field, &opp[c], &self.opts)?;
            history.push(next);
        }
        Ok(self.sc.payoff(history.last().unwrap()))
    }
}

/// Optimal pure opponent response to a memory strategy: sup of the outcome
/// for a first-player strategy, inf for a second-player one.
pub fn search_opponent(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn MemoryStrategy,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<SearchResult> {
    grid.check_horizon(sc)?;
    let n_other = other_len(sc, strat.player());
    let mut s = Searcher {
        sc,
        grid,
        strat,
        opts,
        maximize: strat.player() == Player::First,
        n_other,
        cap: u64::MAX,
        evaluated: 0,
    };
    match mode {
        SearchMode::Exhaustive { cap } => {
            let size = pure_field_count(n_other, m0.len(), grid.cells());
            if size > cap as f64 {
                return Err(Error::SearchSpaceTooLarge { size, cap });
            }
            s.cap = cap;
            let mut history = vec![snap_opt(m0.clone(), &opts)];
            let (value, opponent) = s.dfs(&mut history, &mut Vec::new())?;
            Ok(SearchResult {
                value,
                opponent,
                mode: mode.label(),
                evaluated: s.evaluated,
            })
        }
        SearchMode::Heuristic { restarts, seed } => {
            let n = m0.len();
            let k = grid.cells();
            let mut best: Option<(f64, Opponent)> = None;
            for r in 0..restarts.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let mut opp: Opponent = (0..k)
                    .map(|_| (0..n).map(|_| rng.gen_range(0..n_other)).collect())
                    .collect();
                let mut cur = s.evaluate(m0, &opp)?;
                loop {
                    let mut improved = false;
                    for c in 0..k {
                        for i in 0..n {
                            let keep = opp[c][i];
                            for a in 0..n_other {
                                if a == keep {
                                    continue;
                                }
                                opp[c][i] = a;
                                let v = s.evaluate(m0, &opp)?;
                                if s.better(v, cur) {
                                    cur = v;
                                    improved = true;
                                } else {
                                    opp[c][i] = keep;
                                    continue;
                                }
                                break;
                            }
                        }
                    }
                    if !improved {
                        break;
                    }
                }
                if best.as_ref().is_none_or(|b| s.better(cur, b.0)) {
                    best = Some((cur, opp));
                }
            }
            let (value, opponent) = best.unwrap();
            Ok(SearchResult {
                value,
                opponent,
                mode: mode.label(),
                evaluated: s.evaluated,
            })
        }
    }
}

/// `J1 = sup` over opponents of `g(m(T))` for a first-player strategy.
pub fn estimate_j1(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn FeedbackStrategy,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<SearchResult> {
    check_player(strat.player(), Player::First)?;
    search_opponent(sc, grid, m0, &Memoryless(strat), mode, opts)
}

/// `J2 = inf` over opponents of `g(m(T))` for a second-player strategy.
pub fn estimate_j2(
    sc: &Scenario,
    grid: &TimeGrid,
    m0: &EmpiricalMeasure,
    strat: &dyn FeedbackStrategy,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<SearchResult> {
    check_player(strat.player(), Player::Second)?;
    search_opponent(sc, grid, m0, &Memoryless(strat), mode, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaRow {
    pub epsilon: f64,
    pub cells: usize,
    pub fineness: f64,
    pub value: f64,
    pub mode: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub player: Player,
    pub rows: Vec<GammaRow>,
    /// Running minimum (first player) or maximum (second player) over the rows.
    pub best: f64,
}

impl GammaEstimate {
    pub fn write_csv<W: Write>(&self, mut out: W, meta: &RunMeta) -> Result<()> {
        meta.write(&mut out)?;
        writeln!(out, "player,epsilon,cells,fineness,value,mode")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:?},{},{},{:.9},{:.12},{}",
                self.player, r.epsilon, r.cells, r.fineness, r.value, r.mode
            )?;
        }
        writeln!(out, "{:?},best,,,{:.12},", self.player, self.best)?;
        Ok(())
    }
}

/// Value provider for each partition used by the extremal strategies.
pub type ValueSource<'a> = dyn Fn(&TimeGrid) -> Result<Arc<dyn ValueFunction>> + 'a;

/// Outcomes of the extremal shift strategy over `(epsilon, partition)` pairs.
/// The best row estimates the upper (first player) or lower (second player) value.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gamma(
    sc: &Scenario,
    player: Player,
    m0: &EmpiricalMeasure,
    eps_list: &[f64],
    grids: &[TimeGrid],
    values: &ValueSource<'_>,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<GammaEstimate> {
    let base = sc.constants()?;
    let mut rows = Vec::new();
    for grid in grids {
        let value = values(grid)?;
        for &eps in eps_list {
            let strat = Cached::new(ExtremalShiftStrategy {
                player,
                constants: ShiftConstants::new(eps, base, sc.dim)?,
                value: value.clone(),
            });
            let res = search_opponent(sc, grid, m0, &Memoryless(&strat), mode, opts)?;
            rows.push(GammaRow {
                epsilon: eps,
                cells: grid.cells(),
                fineness: grid.fineness(),
                value: res.value,
                mode: res.mode,
            });
        }
    }
    let best = match player {
        Player::First => rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min),
        Player::Second => rows
            .iter()
            .map(|r| r.value)
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(GammaEstimate { player, rows, best })
}

pub fn estimate_gamma1(
    sc: &Scenario,
    m0: &EmpiricalMeasure,
    eps_list: &[f64],
    grids: &[TimeGrid],
    values: &ValueSource<'_>,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<GammaEstimate> {
    estimate_gamma(sc, Player::First, m0, eps_list, grids, values, mode, opts)
}

pub fn estimate_gamma2(
    sc: &Scenario,
    m0: &EmpiricalMeasure,
    eps_list: &[f64],
    grids: &[TimeGrid],
    values: &ValueSource<'_>,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<GammaEstimate> {
    estimate_gamma(sc, Player::Second, m0, eps_list, grids, values, mode, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlGrid;
    use crate::measure::w2_exact;
    use crate::scenario::{BarycenterAttraction, SplitLinear, W2ToTarget};
    use crate::torus::TorusPoint;

    fn split(horizon: f64) -> Scenario {
        let gu = ControlGrid::new(Player::First, vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-0.5], vec![0.0], vec![0.5]]).unwrap();
        Scenario::new(
            1,
            horizon,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(W2ToTarget {
                target: EmpiricalMeasure::from_coords(&[vec![0.5]]).unwrap(),
            }),
        )
        .unwrap()
    }

    fn m1(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_coords(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    struct Mirror;

    impl FeedbackStrategy for Mirror {
        fn player(&self) -> Player {
            Player::First
        }

        fn field(&self, _sc: &Scenario, _t: f64, m: &EmpiricalMeasure) -> Result<ControlField> {
            // u = -1 left of 1/2, +1 otherwise
            let atoms: Vec<usize> = m
                .points()
                .iter()
                .map(|p| if p.coords()[0] < 0.5 { 0 } else { 2 })
                .collect();
            ControlField::pure(Player::First, 3, &atoms)
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
        let g = TimeGrid::uniform(0.0, 0.3, 3).unwrap();
        assert_eq!(g.cells(), 3);
        assert!((g.fineness() - 0.1).abs() < 1e-15);
        assert_eq!(TimeGrid::uniform(0.2, 0.2, 4).unwrap().cells(), 0);
    }

    #[test]
    fn upper_translation() {
        let sc = split(0.4);
        let grid = TimeGrid::uniform(0.0, 0.4, 1).unwrap();
        let m0 = m1(&[0.0]);
        let strat = ConstantStrategy {
            player: Player::First,
            atom: 2,
        };
        let rec = rollout_upper(
            &sc,
            &grid,
            &m0,
            &strat,
            &vec![vec![2]],
            RolloutOptions::new(0.01),
        )
        .unwrap();
        assert!((rec.terminal().points()[0].coords()[0] - 0.6).abs() < 1e-12);
        assert!((rec.outcome - sc.payoff(&m1(&[0.6]))).abs() < 1e-12);
        assert!(rec.consistent());
        assert!(matches!(
            rollout_upper(
                &sc,
                &TimeGrid::uniform(0.0, 0.3, 1).unwrap(),
                &m0,
                &strat,
                &vec![],
                RolloutOptions::new(0.01)
            ),
            Err(Error::GridError(_))
        ));
    }

    #[test]
    fn cancellation_is_stationary() {
        let gu = ControlGrid::new(Player::First, vec![vec![-0.5], vec![0.5]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-0.5], vec![0.5]]).unwrap();
        let sc = Scenario::new(
            1,
            0.2,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(crate::scenario::Spread),
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let m0 = m1(&[0.1, 0.7]);
        let strat = ConstantStrategy {
            player: Player::First,
            atom: 1,
        };
        let rec = rollout_upper(
            &sc,
            &grid,
            &m0,
            &strat,
            &vec![vec![0, 0]; 2],
            RolloutOptions::new(0.01),
        )
        .unwrap();
        assert!(w2_exact(rec.terminal(), &m0).unwrap().0 < 1e-12);
        assert!((rec.outcome - sc.payoff(&m0)).abs() < 1e-12);

        let lower = ConstantStrategy {
            player: Player::Second,
            atom: 0,
        };
        let rec = rollout_lower(
            &sc,
            &grid,
            &m0,
            &lower,
            &vec![vec![1, 1]; 2],
            RolloutOptions::new(0.01),
        )
        .unwrap();
        assert!(w2_exact(rec.terminal(), &m0).unwrap().0 < 1e-12);
        assert!(rec.consistent());
    }

    #[test]
    fn two_cells_compose() {
        let gu = ControlGrid::new(Player::First, vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-0.5], vec![0.0], vec![0.5]]).unwrap();
        let sc = Scenario::new(
            1,
            0.2,
            gu,
            gv,
            Arc::new(BarycenterAttraction { kappa: 2.0 }),
            Arc::new(crate::scenario::Spread),
        )
        .unwrap();
        let m0 = m1(&[0.1, 0.3, 0.8]);
        let opp: Opponent = vec![vec![0, 2, 1], vec![2, 2, 0]];
        let whole = rollout_upper(
            &sc,
            &TimeGrid::uniform(0.0, 0.2, 2).unwrap(),
            &m0,
            &Mirror,
            &opp,
            RolloutOptions::new(0.01),
        )
        .unwrap();

        let mut first_sc = sc.clone();
        first_sc.horizon = 0.1;
        let a = rollout_upper(
            &first_sc,
            &TimeGrid::uniform(0.0, 0.1, 1).unwrap(),
            &m0,
            &Mirror,
            &vec![opp[0].clone()],
            RolloutOptions::new(0.01),
        )
        .unwrap();
        let b = rollout_upper(
            &sc,
            &TimeGrid::new(vec![0.1, 0.2]).unwrap(),
            a.terminal(),
            &Mirror,
            &vec![opp[1].clone()],
            RolloutOptions::new(0.01),
        )
        .unwrap();
        assert!(w2_exact(whole.terminal(), b.terminal()).unwrap().0 < 1e-12);
        assert_eq!(
            whole.cells[1].flow.measures.len(),
            b.cells[0].flow.measures.len()
        );
        for (x, y) in whole.cells[1]
            .flow
            .measures
            .iter()
            .zip(&b.cells[0].flow.measures)
        {
            assert!(w2_exact(x, y).unwrap().0 < 1e-12);
        }
    }

    #[test]
    fn exhaustive_search_examples() {
        let gu = ControlGrid::new(Player::First, vec![vec![0.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![0.5]]).unwrap();
        let sc = Scenario::new(
            1,
            0.1,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(W2ToTarget { target: m1(&[0.5]) }),
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 0.1, 1).unwrap();
        let m0 = m1(&[0.1, 0.2]);
        let strat = ConstantStrategy {
            player: Player::First,
            atom: 0,
        };
        let opts = RolloutOptions::new(0.01);
        let res = estimate_j1(
            &sc,
            &grid,
            &m0,
            &strat,
            SearchMode::Exhaustive { cap: 10 },
            opts,
        )
        .unwrap();
        let single = rollout_upper(&sc, &grid, &m0, &strat, &vec![vec![0, 0]], opts).unwrap();
        assert_eq!(res.value, single.outcome);
        assert_eq!(res.evaluated, 1);

        // g = W2^2 to a target on the far side: moving away is best for the maximizer
        let sc = split(0.1);
        let far = Scenario::new(
            1,
            0.1,
            sc.grid_u.clone(),
            sc.grid_v.clone(),
            sc.dynamics.clone(),
            Arc::new(W2ToTarget { target: m1(&[0.7]) }),
        )
        .unwrap();
        let m0 = m1(&[0.3, 0.35]);
        let still = ConstantStrategy {
            player: Player::First,
            atom: 1,
        };
        let res = estimate_j1(
            &far,
            &grid,
            &m0,
            &still,
            SearchMode::Exhaustive { cap: 100 },
            opts,
        )
        .unwrap();
        // full enumeration of the 9 assignments
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..3 {
            for b in 0..3 {
                let r = rollout_upper(&far, &grid, &m0, &still, &vec![vec![a, b]], opts).unwrap();
                if r.outcome > best.0 {
                    best = (r.outcome, vec![a, b]);
                }
            }
        }
        assert_eq!(res.value, best.0);
        assert_eq!(res.opponent, vec![best.1.clone()]);
        assert_eq!(
            best.1,
            vec![0, 0],
            "boundary atom v = -0.5 pushes away from 0.7"
        );
        assert_eq!(res.evaluated, 9);

        assert!(matches!(
            estimate_j1(
                &far,
                &grid,
                &m0,
                &still,
                SearchMode::Exhaustive { cap: 5 },
                opts
            ),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn heuristic_never_beats_exhaustive() {
        let sc = split(0.2);
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let opts = RolloutOptions::new(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let m0 = m1(&[rng.gen(), rng.gen()]);
            let ex = estimate_j1(
                &sc,
                &grid,
                &m0,
                &Mirror,
                SearchMode::Exhaustive { cap: 1000 },
                opts,
            )
            .unwrap();
            let he = estimate_j1(
                &sc,
                &grid,
                &m0,
                &Mirror,
                SearchMode::Heuristic {
                    restarts: 8,
                    seed: 3,
                },
                opts,
            )
            .unwrap();
            assert!(he.value <= ex.value + 1e-15);
            assert_eq!(he.mode, "heuristic");
        }
    }

    #[test]
    fn memoryless_equals_feedback() {
        let sc = split(0.2);
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let m0 = m1(&[0.2, 0.9]);
        let opp: Opponent = vec![vec![1, 2], vec![0, 0]];
        let opts = RolloutOptions::new(0.01);
        let a = rollout_upper(&sc, &grid, &m0, &Mirror, &opp, opts).unwrap();
        let b = rollout_memory(&sc, &grid, &m0, &Memoryless(&Mirror), &opp, opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_switch() {
        struct Switch;
        impl MemoryStrategy for Switch {
            fn player(&self) -> Player {
                Player::First
            }
            fn field(
                &self,
                _sc: &Scenario,
                _g: &TimeGrid,
                cell: usize,
                h: &[EmpiricalMeasure],
            ) -> Result<ControlField> {
                // after seeing m(t1) right of 0.3, switch every particle to u = -1
                let atom = if cell >= 1 && h[1].points()[0].coords()[0] > 0.3 {
                    0
                } else {
                    2
                };
                ControlField::pure(Player::First, 3, &vec![atom; h[cell].len()])
            }
        }
        let sc = split(0.2);
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let opts = RolloutOptions::new(0.01);
        let rec = rollout_memory(
            &sc,
            &grid,
            &m1(&[0.25]),
            &Switch,
            &vec![vec![1], vec![1]],
            opts,
        )
        .unwrap();
        assert_eq!(rec.cells[0].field.pure_atoms(), Some(vec![2]));
        assert_eq!(rec.cells[1].field.pure_atoms(), Some(vec![0]));
        assert!((rec.terminal().points()[0].coords()[0] - 0.25).abs() < 1e-12);
        let rec = rollout_memory(
            &sc,
            &grid,
            &m1(&[0.1]),
            &Switch,
            &vec![vec![1], vec![1]],
            opts,
        )
        .unwrap();
        assert_eq!(rec.cells[1].field.pure_atoms(), Some(vec![2]));
    }

    #[test]
    fn zero_horizon_game() {
        let sc = split(0.0);
        let grid = TimeGrid::uniform(0.0, 0.0, 1).unwrap();
        let m0 = m1(&[0.1, 0.4]);
        let strat = ConstantStrategy {
            player: Player::First,
            atom: 2,
        };
        let res = estimate_j1(
            &sc,
            &grid,
            &m0,
            &strat,
            SearchMode::Exhaustive { cap: 10 },
            RolloutOptions::new(0.01),
        )
        .unwrap();
        assert_eq!(res.value, sc.payoff(&m0));
    }

    #[test]
    fn csv_trace_is_deterministic() {
        let sc = split(0.2);
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let m0 = m1(&[0.2, 0.9]);
        let opp: Opponent = vec![vec![1, 2], vec![0, 0]];
        let rec = rollout_upper(&sc, &grid, &m0, &Mirror, &opp, RolloutOptions::new(0.01)).unwrap();
        let meta = RunMeta::new(sc.hash(), 7).param("cells", 2);
        let mut a = Vec::new();
        rec.write_csv(&mut a, &meta).unwrap();
        let mut b = Vec::new();
        rollout_upper(&sc, &grid, &m0, &Mirror, &opp, RolloutOptions::new(0.01))
            .unwrap()
            .write_csv(&mut b, &meta)
            .unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# scenario_hash="));
        assert!(text.contains("# seed=7"));
        assert!(text.lines().last().unwrap().contains("summary"));
    }

    #[test]
    fn snapping_keeps_lattice() {
        let sc = split(0.2);
        let grid = TimeGrid::uniform(0.0, 0.2, 2).unwrap();
        let m0 = m1(&[0.2, 0.9]);
        let rec = rollout_upper(
            &sc,
            &grid,
            &m0,
            &Mirror,
            &vec![vec![1, 2], vec![0, 1]],
            RolloutOptions::snapped(0.01, 0.025),
        )
        .unwrap();
        for n in &rec.nodes {
            for p in n.points() {
                let k = p.coords()[0] * 40.0;
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
        let _ = TorusPoint::wrap(&[0.0]);
    }
}
