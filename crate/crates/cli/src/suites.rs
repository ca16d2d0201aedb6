//! Property suites shared by `verify` and the test targets.

use std::sync::Arc;

use mfdg_core::control::{JointControlField, Player};
use mfdg_core::dynamics::{generate_flow, StepOptions};
use mfdg_core::engine::{
    search_opponent, Cached, Memoryless, RolloutOptions, SearchMode, TimeGrid,
};
use mfdg_core::measure::{path_w2, w2_bruteforce, w2_exact, EmpiricalMeasure};
use mfdg_core::pim::{
    build_q_strategy, check_u_stability, check_v_stability, Iteration, ReachableGraph, TableValue,
};
use mfdg_core::scenario::Scenario;
use mfdg_core::shift::{ExtremalShiftStrategy, ShiftConstants, ValueFunction};
use mfdg_core::torus::TorusPoint;
use mfdg_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one suite. `worst` is the largest excess over the checked
/// inequality (negative when every check holds with room).
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub checked: usize,
    pub violations: usize,
    pub worst: f64,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            violations: 0,
            worst: f64::NEG_INFINITY,
        }
    }

    /// Record `excess = lhs - rhs` of an inequality `lhs <= rhs + tol`.
    fn record(&mut self, excess: f64, tol: f64) {
        self.checked += 1;
        self.worst = self.worst.max(excess);
        if !(excess <= tol) {
            self.violations += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.checked > 0
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_uniform(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> EmpiricalMeasure {
    let pts = (0..n)
        .map(|_| {
            TorusPoint::wrap(&(0..dim).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())
                .expect("finite")
        })
        .collect();
    EmpiricalMeasure::uniform(pts).expect("nonempty")
}

fn random_weighted(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> EmpiricalMeasure {
    let pts = (0..n)
        .map(|_| {
            TorusPoint::wrap(&(0..dim).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())
                .expect("finite")
        })
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    EmpiricalMeasure::new(pts, raw.iter().map(|w| w / total).collect()).expect("valid weights")
}

/// Exact transport against permutation enumeration on uniform clouds.
pub fn ot_oracle(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("ot_oracle");
    for t in 0..trials {
        let mut rng = rng_for(seed, t as u64);
        let dim = rng.gen_range(1..=2);
        let n = rng.gen_range(1..=6);
        let a = random_uniform(&mut rng, dim, n);
        let b = random_uniform(&mut rng, dim, n);
        let (exact, _) = w2_exact(&a, &b)?;
        res.record((exact - w2_bruteforce(&a, &b)?).abs(), 1e-9);
    }
    Ok(res)
}

/// Triangle inequality on weighted clouds of different sizes.
pub fn triangle(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("triangle");
    for t in 0..trials {
        let mut rng = rng_for(seed, (1 << 40) + t as u64);
        let dim = rng.gen_range(1..=2);
        let ms: Vec<EmpiricalMeasure> = (0..3)
            .map(|_| {
                let n = rng.gen_range(1..=5);
                random_weighted(&mut rng, dim, n)
            })
            .collect();
        let ab = w2_exact(&ms[0], &ms[1])?.0;
        let bc = w2_exact(&ms[1], &ms[2])?.0;
        let ac = w2_exact(&ms[0], &ms[2])?.0;
        res.record(ac - ab - bc, 1e-9);
    }
    Ok(res)
}

/// Time marginals of two trajectory ensembles are no farther apart than the
/// ensembles themselves.
pub fn projection(sc: &Scenario, trials: usize, seed: u64, h: f64) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("projection");
    let (nu, nv) = (sc.grid_u.len(), sc.grid_v.len());
    let span = sc.horizon.clamp(0.05, 0.2);
    for t in 0..trials {
        let mut rng = rng_for(seed, (2 << 40) + t as u64);
        let n = rng.gen_range(1..=4);
        let flows = (0..2)
            .map(|_| {
                let m = random_uniform(&mut rng, sc.dim, n);
                let u: Vec<usize> = (0..n).map(|_| rng.gen_range(0..nu)).collect();
                let v: Vec<usize> = (0..n).map(|_| rng.gen_range(0..nv)).collect();
                let k = JointControlField::pure(&u, &v, nu, nv)?;
                generate_flow(sc, 0.0, &m, &k, span, StepOptions::euler(h))
            })
            .collect::<Result<Vec<_>>>()?;
        let (f, g) = (&flows[0], &flows[1]);
        let path = path_w2(
            &f.trajectories,
            &f.trajectory_weights,
            &g.trajectories,
            &g.trajectory_weights,
        )?;
        for i in 0..f.times.len() {
            let (d, _) = w2_exact(&f.evaluate(i), &g.evaluate(i))?;
            res.record(d - path, 1e-9);
        }
    }
    Ok(res)
}

/// Monotonicity, terminal values, bracketing and stability of an iteration.
pub fn structure(g: &ReachableGraph, it: &Iteration) -> Vec<SuiteResult> {
    let mut mono_lo = SuiteResult::new("monotone_lower");
    for w in it.lower.windows(2) {
        for (a, b) in w[0].values.iter().zip(&w[1].values) {
            mono_lo.record(a - b, 0.0);
        }
    }
    let mut mono_up = SuiteResult::new("monotone_upper");
    for w in it.upper.windows(2) {
        for (a, b) in w[0].values.iter().zip(&w[1].values) {
            mono_up.record(b - a, 0.0);
        }
    }
    let mut terminal = SuiteResult::new("terminal");
    for t in it.lower.iter().chain(&it.upper) {
        for &id in &g.layers()[g.terminal_layer()] {
            terminal.record((t.values[id] - g.node(id).payoff).abs(), 0.0);
        }
    }
    let mut bracket = SuiteResult::new("bracketing");
    for lo in &it.lower {
        for up in &it.upper {
            for (a, b) in lo.values.iter().zip(&up.values) {
                bracket.record(a - b, 1e-9);
            }
        }
    }
    let u = check_u_stability(g, it.omega_star(), 1e-9);
    let v = check_v_stability(g, it.omega_upper_star(), 1e-9);
    let stab = |name: &str, r: mfdg_core::pim::StabilityReport| SuiteResult {
        name: name.to_string(),
        checked: r.checked,
        violations: r.violations,
        worst: r.worst,
    };
    // a graph without cells has nothing to check
    let mut out = vec![mono_lo, mono_up, terminal, bracket];
    if g.terminal_layer() > 0 {
        out.push(stab("u_stability", u));
        out.push(stab("v_stability", v));
    }
    out
}

/// Worst-case outcome of the first player's extremal shift strategy with the
/// converged lower table as the stable function.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalRow {
    pub epsilon: f64,
    pub outcome: f64,
    pub psi_root: f64,
    /// `omega_g(rho(eps, T - t0)^(1/2))`.
    pub modulus_term: f64,
    /// `outcome - psi_root`.
    pub excess: f64,
    pub bound: f64,
    pub mode: &'static str,
}

#[allow(clippy::too_many_arguments)]
pub fn extremal(
    sc: &Scenario,
    graph: &Arc<ReachableGraph>,
    it: &Iteration,
    m0: &EmpiricalMeasure,
    eps_list: &[f64],
    slack: f64,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<Vec<ExtremalRow>> {
    let grid: &TimeGrid = graph.grid();
    let base = sc.constants()?;
    let value: Arc<dyn ValueFunction> = Arc::new(TableValue::new(graph.clone(), it.omega_star())?);
    let psi_root = it.omega_star().values[graph.root()];
    let mut rows = Vec::new();
    for &eps in eps_list {
        let constants = ShiftConstants::new(eps, base, sc.dim)?;
        let strat = Cached::new(ExtremalShiftStrategy {
            player: Player::First,
            constants,
            value: value.clone(),
        });
        let res = search_opponent(sc, grid, m0, &Memoryless(&strat), mode, opts)?;
        let modulus_term = base
            .omega_g
            .eval(constants.rho(eps, grid.end() - grid.start()).sqrt());
        rows.push(ExtremalRow {
            epsilon: eps,
            outcome: res.value,
            psi_root,
            modulus_term,
            excess: res.value - psi_root,
            bound: psi_root + modulus_term + slack,
            mode: res.mode,
        });
    }
    Ok(rows)
}

/// Worst-case outcome of the stepwise memory strategy of level `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QRow {
    pub k: usize,
    pub guarantee: f64,
    pub outcome: f64,
    pub mode: &'static str,
}

#[allow(clippy::too_many_arguments)]
pub fn q_guarantee(
    sc: &Scenario,
    graph: &Arc<ReachableGraph>,
    it: &Iteration,
    m0: &EmpiricalMeasure,
    k_max: usize,
    epsilon: f64,
    mode: SearchMode,
    opts: RolloutOptions,
) -> Result<Vec<QRow>> {
    let mut rows = Vec::new();
    for k in 0..=k_max.min(it.lower.len() - 1) {
        let q = build_q_strategy(graph.clone(), &it.lower[..=k], epsilon)?;
        let res = search_opponent(sc, graph.grid(), m0, &q, mode, opts)?;
        rows.push(QRow {
            k,
            guarantee: q.guarantee(),
            outcome: res.value,
            mode: res.mode,
        });
    }
    Ok(rows)
}
