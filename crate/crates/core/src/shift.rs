//! Extremal shift: selectors, target selection inside a Wasserstein ball,
//! the extremal control fields built along an optimal plan, and randomized
//! checks of the one-agent and flow distance estimates.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::{
    join_with_response, ControlField, JointControlField, Player, RelaxedSchedule, Response,
};
use crate::dynamics::{generate_flow, integrate_agent, StepOptions};
use crate::error::{Error, Result};
use crate::measure::{
    disintegrate, w2_exact, w2_squared, EmpiricalMeasure, MeasureFlow, Side, TransportPlan,
};
use crate::scenario::{flatten, MeasureView, Scenario, ScenarioConstants};
use crate::torus::{lifted_difference, sq_dist, TorusPoint};

/// Moduli derived from the scenario constants for a fixed `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConstants {
    pub epsilon: f64,
    pub base: ScenarioConstants,
    pub dim: usize,
}

impl ShiftConstants {
    pub fn new(epsilon: f64, base: ScenarioConstants, dim: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        base.validate()?;
        Ok(Self { epsilon, base, dim })
    }

    pub fn varpi1(&self, e: f64) -> f64 {
        let sd = (self.dim as f64).sqrt();
        2.0 * sd * self.base.omega_f.eval(e) + 4.0 * sd * self.base.lipschitz * self.base.c0 * e
    }

    pub fn varpi2(&self, e: f64) -> f64 {
        2.0 * self.varpi1(e) + 4.0 * self.base.c0 * self.base.c0 * e
    }

    pub fn rho(&self, e: f64, t: f64) -> f64 {
        (e + self.varpi2(e) * t) * (4.0 * self.base.lipschitz * t).exp()
    }

    /// Ball radius (squared) at time `t` for the configured epsilon.
    pub fn radius_sq(&self, t: f64) -> f64 {
        self.rho(self.epsilon, t)
    }
}

fn inner(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// Table `<w, f(s, x, m, u_a, v_b)>` over the grids.
fn payoff_table(sc: &Scenario, s: f64, x: &[f64], w: &[f64], m: &MeasureView<'_>) -> Vec<f64> {
    let nv = sc.grid_v.len();
    let mut out = vec![0.0; sc.dim];
    let mut tab = Vec::with_capacity(sc.grid_u.len() * nv);
    for u in sc.grid_u.atoms() {
        for v in sc.grid_v.atoms() {
            sc.velocity(s, x, m, u, v, &mut out);
            tab.push(inner(w, &out));
        }
    }
    tab
}

fn argmin_max(tab: &[f64], nu: usize, nv: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for a in 0..nu {
        let worst = tab[a * nv..(a + 1) * nv]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if worst < best.1 {
            best = (a, worst);
        }
    }
    best.0
}

fn argmax_min(tab: &[f64], nu: usize, nv: usize) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for b in 0..nv {
        let worst = (0..nu)
            .map(|a| tab[a * nv + b])
            .fold(f64::INFINITY, f64::min);
        if worst > best.1 {
            best = (b, worst);
        }
    }
    best.0
}

pub(crate) fn u_hat_raw(sc: &Scenario, s: f64, x: &[f64], y: &[f64], m: &MeasureView<'_>) -> usize {
    let mut w = vec![0.0; sc.dim];
    lifted_difference(x, y, &mut w);
    argmin_max(
        &payoff_table(sc, s, x, &w, m),
        sc.grid_u.len(),
        sc.grid_v.len(),
    )
}

pub(crate) fn v_hat_raw(sc: &Scenario, s: f64, x: &[f64], y: &[f64], m: &MeasureView<'_>) -> usize {
    let mut w = vec![0.0; sc.dim];
    lifted_difference(x, y, &mut w);
    argmax_min(
        &payoff_table(sc, s, x, &w, m),
        sc.grid_u.len(),
        sc.grid_v.len(),
    )
}

/// `argmin_u max_v <x' - y', f(s, x, m, u, v)>`, lowest index on ties.
pub fn u_hat(sc: &Scenario, s: f64, x: &TorusPoint, y: &TorusPoint, m: &EmpiricalMeasure) -> usize {
    let (c, w) = flatten(m);
    u_hat_raw(sc, s, x.coords(), y.coords(), &view(sc, &c, &w))
}

/// `argmax_v min_u <x' - y', f(s, x, m, u, v)>`, lowest index on ties.
pub fn v_hat(sc: &Scenario, s: f64, x: &TorusPoint, y: &TorusPoint, m: &EmpiricalMeasure) -> usize {
    let (c, w) = flatten(m);
    v_hat_raw(sc, s, x.coords(), y.coords(), &view(sc, &c, &w))
}

fn view<'a>(sc: &Scenario, c: &'a [f64], w: &'a [f64]) -> MeasureView<'a> {
    MeasureView {
        dim: sc.dim,
        coords: c,
        weights: w,
    }
}

/// Source of the stable function used by the strategies.
pub trait ValueFunction: Send + Sync {
    /// Value at `(s, m)`, `None` when unknown.
    fn value(&self, s: f64, m: &EmpiricalMeasure) -> Option<f64>;

    /// Measures with known value at time `s`, in a fixed order.
    fn candidates(&self, s: f64) -> Vec<EmpiricalMeasure>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub nu: EmpiricalMeasure,
    pub plan: TransportPlan,
    /// Value at the chosen measure, `None` on fallback to `m`.
    pub value: Option<f64>,
    /// Index in the candidate list, `None` when `m` itself was chosen.
    pub index: Option<usize>,
}

/// Best measure of `candidates ∪ {m}` inside the ball `W2^2(m, .) <= radius_sq`.
///
/// `minimize` selects argmin (first player) or argmax (second player).
/// Candidates of unknown value are skipped; ties keep the earliest candidate,
/// with `m` ranked last.
pub fn select_target(
    value_fn: &dyn Fn(&EmpiricalMeasure) -> Option<f64>,
    m: &EmpiricalMeasure,
    radius_sq: f64,
    candidates: &[EmpiricalMeasure],
    minimize: bool,
) -> Result<Target> {
    let mut best: Option<(usize, f64)> = None;
    let better = |v: f64, cur: f64| if minimize { v < cur } else { v > cur };
    for (i, c) in candidates.iter().enumerate() {
        if c.dim() != m.dim() {
            continue;
        }
        if w2_squared(m, c)? > radius_sq {
            continue;
        }
        if let Some(v) = value_fn(c) {
            if best.is_none_or(|(_, cur)| better(v, cur)) {
                best = Some((i, v));
            }
        }
    }
    if let Some(v) = value_fn(m) {
        if best.is_none_or(|(_, cur)| better(v, cur)) {
            return Ok(Target {
                nu: m.clone(),
                plan: TransportPlan::identity(m),
                value: Some(v),
                index: None,
            });
        }
    }
    match best {
        Some((i, v)) => {
            let nu = candidates[i].clone();
            let (_, plan) = w2_exact(m, &nu)?;
            Ok(Target {
                nu,
                plan,
                value: Some(v),
                index: Some(i),
            })
        }
        None => Ok(Target {
            nu: m.clone(),
            plan: TransportPlan::identity(m),
            value: None,
            index: None,
        }),
    }
}

fn check_plan(plan: &TransportPlan, m: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if !plan.couples(m, nu) {
        return Err(Error::PlanMismatch(format!(
            "plan is {}x{}, measures have {} and {} atoms",
            plan.n_source(),
            plan.n_target(),
            m.len(),
            nu.len()
        )));
    }
    Ok(())
}

fn field_from_choices(
    player: Player,
    n_atoms: usize,
    cond: &[Vec<(usize, f64)>],
    mut choose: impl FnMut(usize, usize) -> usize,
) -> Result<ControlField> {
    let dists: Vec<Vec<f64>> = cond
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut d = vec![0.0; n_atoms];
            for &(j, p) in row {
                d[choose(i, j)] += p;
            }
            d
        })
        .collect();
    ControlField::from_atom_distributions(player, n_atoms, &dists)
}

/// First-player field on `m`: particle `x_i` plays `û(s, x_i, ., m)` pushed
/// through the conditional `plan(. | x_i)`.
pub fn extremal_first_field(
    sc: &Scenario,
    s: f64,
    m: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    plan: &TransportPlan,
) -> Result<ControlField> {
    check_plan(plan, m, nu)?;
    let cond = disintegrate(plan, Side::Source)?;
    let (c, w) = flatten(m);
    let mv = view(sc, &c, &w);
    field_from_choices(Player::First, sc.grid_u.len(), &cond, |i, j| {
        u_hat_raw(sc, s, m.points()[i].coords(), nu.points()[j].coords(), &mv)
    })
}

/// Second-player field on `nu`: particle `y_j` plays `v̂(s, ., y_j, m)` pushed
/// through the conditional `plan(. | y_j)`.
pub fn extremal_second_field(
    sc: &Scenario,
    s: f64,
    m: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    plan: &TransportPlan,
) -> Result<ControlField> {
    check_plan(plan, m, nu)?;
    let cond = disintegrate(plan, Side::Target)?;
    let (c, w) = flatten(m);
    let mv = view(sc, &c, &w);
    field_from_choices(Player::Second, sc.grid_v.len(), &cond, |j, i| {
        v_hat_raw(sc, s, m.points()[i].coords(), nu.points()[j].coords(), &mv)
    })
}

/// Second-player field on the real measure `m` steering toward `nu`: the
/// players are interchanged, so particle `x_i` plays
/// `argmax_v min_u <y' - x', f(s, x_i, m, u, v)>` pushed through `plan(. | x_i)`.
pub fn extremal_second_feedback(
    sc: &Scenario,
    s: f64,
    m: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    plan: &TransportPlan,
) -> Result<ControlField> {
    check_plan(plan, m, nu)?;
    let cond = disintegrate(plan, Side::Source)?;
    let (c, w) = flatten(m);
    let mv = view(sc, &c, &w);
    let mut dir = vec![0.0; sc.dim];
    field_from_choices(Player::Second, sc.grid_v.len(), &cond, |i, j| {
        let x = m.points()[i].coords();
        lifted_difference(nu.points()[j].coords(), x, &mut dir);
        let tab = payoff_table(sc, s, x, &dir, &mv);
        argmax_min(&tab, sc.grid_u.len(), sc.grid_v.len())
    })
}

/// Feedback strategy realizing the extremal shift toward a value function.
#[derive(Clone)]
pub struct ExtremalShiftStrategy {
    pub player: Player,
    pub constants: ShiftConstants,
    pub value: Arc<dyn ValueFunction>,
}

impl fmt::Debug for ExtremalShiftStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtremalShiftStrategy")
            .field("player", &self.player)
            .field("constants", &self.constants)
            .finish()
    }
}

/// Result of one strategy query.
#[derive(Debug, Clone)]
pub struct ShiftDecision {
    pub field: ControlField,
    pub target: Target,
}

impl ExtremalShiftStrategy {
    pub fn decide(&self, sc: &Scenario, s: f64, m: &EmpiricalMeasure) -> Result<ShiftDecision> {
        let cands = self.value.candidates(s);
        let lookup = |c: &EmpiricalMeasure| self.value.value(s, c);
        let minimize = self.player == Player::First;
        let target = select_target(&lookup, m, self.constants.radius_sq(s), &cands, minimize)?;
        let field = match self.player {
            Player::First => extremal_first_field(sc, s, m, &target.nu, &target.plan)?,
            Player::Second => extremal_second_feedback(sc, s, m, &target.nu, &target.plan)?,
        };
        Ok(ShiftDecision { field, target })
    }
}

/// One randomized check of a distance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaTrial {
    pub id: usize,
    pub s: f64,
    pub r: f64,
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub trials: Vec<LemmaTrial>,
    pub violations: usize,
    pub max_slack: f64,
    pub min_slack: f64,
}

impl LemmaReport {
    fn from_trials(trials: Vec<LemmaTrial>) -> Self {
        let violations = trials.iter().filter(|t| t.slack < 0.0).count();
        let max_slack = trials
            .iter()
            .map(|t| t.slack)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_slack = trials.iter().map(|t| t.slack).fold(f64::INFINITY, f64::min);
        Self {
            trials,
            violations,
            max_slack,
            min_slack,
        }
    }

    /// Tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("trial\ts\tr\tn\tlhs\trhs\tslack\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                t.id, t.s, t.r, t.n, t.lhs, t.rhs, t.slack
            ));
        }
        out
    }
}

/// Options shared by the two verifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: StepOptions,
    pub max_particles: usize,
    /// Upper bound for `r - s`.
    pub max_interval: f64,
}

impl VerifyOptions {
    pub fn new(trials: usize, seed: u64, h: f64) -> Self {
        Self {
            trials,
            seed,
            step: StepOptions::euler(h),
            max_particles: 4,
            max_interval: 0.25,
        }
    }
}

fn trial_rng(seed: u64, stream: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(id as u64));
    rng
}

fn random_point(rng: &mut ChaCha8Rng, d: usize) -> TorusPoint {
    TorusPoint::from_raw_unchecked(&(0..d).map(|_| rng.gen()).collect::<Vec<_>>())
}

fn random_uniform_measure(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform((0..n).map(|_| random_point(rng, d)).collect()).expect("nonempty")
}

/// Random schedule over `[s, r]`: up to three cells, each pure or a random mixture.
fn random_schedule(rng: &mut ChaCha8Rng, n_atoms: usize, s: f64, r: f64) -> RelaxedSchedule {
    let cells = rng.gen_range(1..=3);
    let mut starts = vec![s];
    for c in 1..cells {
        starts.push(s + (r - s) * c as f64 / cells as f64);
    }
    starts.dedup_by(|a, b| *a <= *b);
    let mixtures = starts
        .iter()
        .map(|_| {
            if rng.gen_bool(0.7) {
                let mut m = vec![0.0; n_atoms];
                m[rng.gen_range(0..n_atoms)] = 1.0;
                m
            } else {
                let mut m: Vec<f64> = (0..n_atoms).map(|_| rng.gen::<f64>()).collect();
                let t: f64 = m.iter().sum();
                m.iter_mut().for_each(|p| *p /= t);
                let err = 1.0 - m.iter().sum::<f64>();
                m[0] += err;
                m
            }
        })
        .collect();
    RelaxedSchedule::piecewise(starts, mixtures).expect("valid random schedule")
}

fn random_pure_schedule(rng: &mut ChaCha8Rng, n_atoms: usize, s: f64, r: f64) -> RelaxedSchedule {
    let cells = rng.gen_range(1..=3);
    let mut starts = vec![s];
    for c in 1..cells {
        starts.push(s + (r - s) * c as f64 / cells as f64);
    }
    starts.dedup_by(|a, b| *a <= *b);
    let atoms: Vec<usize> = starts.iter().map(|_| rng.gen_range(0..n_atoms)).collect();
    RelaxedSchedule::pure_piecewise(starts, &atoms, n_atoms).expect("valid random schedule")
}

/// A flow of the scenario started from a random measure under random joint controls.
fn random_flow(
    sc: &Scenario,
    rng: &mut ChaCha8Rng,
    s: f64,
    r: f64,
    n: usize,
    step: StepOptions,
) -> Result<MeasureFlow> {
    let m = random_uniform_measure(rng, sc.dim, n);
    let (nu, nv) = (sc.grid_u.len(), sc.grid_v.len());
    let entries = (0..n)
        .map(|_| {
            vec![crate::control::JointComponent {
                weight: 1.0,
                u: random_schedule(rng, nu, s, r),
                v: random_schedule(rng, nv, s, r),
            }]
        })
        .collect();
    let k = JointControlField::new(entries, None)?;
    generate_flow(sc, s, &m, &k, r, step)
}

fn sample_interval(
    rng: &mut ChaCha8Rng,
    sc: &Scenario,
    max_interval: f64,
    id: usize,
) -> (f64, f64) {
    let span = sc.horizon.max(max_interval);
    let s = rng.gen_range(0.0..=span * 0.5);
    let len = if id.is_multiple_of(50) {
        0.0
    } else {
        rng.gen_range(0.0..=max_interval)
    };
    (s, s + len)
}

fn tolerance(c: &ScenarioConstants, step: StepOptions, len: f64) -> f64 {
    10.0 * c.c0 * step.h * len
}

/// Randomized check of the single-agent estimate
/// `|x(r)-y(r)|^2 <= |x*-y*|^2 (1 + 3L(r-s)) + L W2^2(m(s), nu(s)) (r-s) + varpi2(r-s)(r-s)`.
pub fn verify_lemma_agent(sc: &Scenario, opts: VerifyOptions) -> Result<LemmaReport> {
    let c = sc.constants()?;
    let k = ShiftConstants::new(1.0, c, sc.dim)?;
    let (nu, nv) = (sc.grid_u.len(), sc.grid_v.len());
    let trials: Result<Vec<LemmaTrial>> = (0..opts.trials)
        .into_par_iter()
        .map(|id| {
            let mut rng = trial_rng(opts.seed, 1, id);
            let (s, r) = sample_interval(&mut rng, sc, opts.max_interval, id);
            let n = rng.gen_range(1..=opts.max_particles);
            let mf = random_flow(sc, &mut rng, s, r, n, opts.step)?;
            let n2 = rng.gen_range(1..=opts.max_particles);
            let nf = random_flow(sc, &mut rng, s, r, n2, opts.step)?;
            let x0 = random_point(&mut rng, sc.dim);
            let y0 = if rng.gen_bool(0.3) {
                // nearby start, where the estimate is tight
                let off: Vec<f64> = (0..sc.dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
                x0.translate(&off)?
            } else {
                random_point(&mut rng, sc.dim)
            };
            let ms = mf.initial();
            let u_star = u_hat(sc, s, &x0, &y0, ms);
            let v_star = v_hat(sc, s, &x0, &y0, ms);
            let zeta = random_schedule(&mut rng, nv, s, r);
            let xi = random_schedule(&mut rng, nu, s, r);
            let xt = integrate_agent(
                sc,
                s,
                &x0,
                &mf,
                &RelaxedSchedule::point_mass(u_star, nu),
                &zeta,
                r,
                opts.step,
            )?;
            let yt = integrate_agent(
                sc,
                s,
                &y0,
                &nf,
                &xi,
                &RelaxedSchedule::point_mass(v_star, nv),
                r,
                opts.step,
            )?;
            let lhs = sq_dist(
                xt.states.last().unwrap().coords(),
                yt.states.last().unwrap().coords(),
            );
            let len = r - s;
            let d0 = sq_dist(x0.coords(), y0.coords());
            let w0 = w2_squared(ms, nf.initial())?;
            let rhs = d0 * (1.0 + 3.0 * c.lipschitz * len)
                + c.lipschitz * w0 * len
                + k.varpi2(len) * len
                + tolerance(&c, opts.step, len);
            Ok(LemmaTrial {
                id,
                s,
                r,
                n: n.max(n2),
                lhs,
                rhs,
                slack: rhs - lhs,
            })
        })
        .collect();
    Ok(LemmaReport::from_trials(trials?))
}

/// Pure per-particle, per-component response with random piecewise schedules.
fn random_response(
    rng: &mut ChaCha8Rng,
    base: &ControlField,
    n_other: usize,
    s: f64,
    r: f64,
) -> Response {
    base.entries()
        .iter()
        .map(|comps| {
            comps
                .iter()
                .map(|_| vec![(1.0, random_pure_schedule(rng, n_other, s, r))])
                .collect()
        })
        .collect()
}

/// Randomized check of the flow estimate
/// `W2^2(m(r), nu(r)) <= W2^2(m*, nu*) (1 + 4L(r-s)) + varpi2(r-s)(r-s)`,
/// with both flows driven by the extremal fields built on an optimal plan.
pub fn verify_lemma_flow(sc: &Scenario, opts: VerifyOptions) -> Result<LemmaReport> {
    let c = sc.constants()?;
    let k = ShiftConstants::new(1.0, c, sc.dim)?;
    let (nu_len, nv_len) = (sc.grid_u.len(), sc.grid_v.len());
    let trials: Result<Vec<LemmaTrial>> = (0..opts.trials)
        .into_par_iter()
        .map(|id| {
            let mut rng = trial_rng(opts.seed, 2, id);
            let (s, r) = sample_interval(&mut rng, sc, opts.max_interval, id);
            let n = rng.gen_range(1..=opts.max_particles);
            let m_star = random_uniform_measure(&mut rng, sc.dim, n);
            let n2 = if rng.gen_bool(0.7) {
                n
            } else {
                rng.gen_range(1..=opts.max_particles)
            };
            let nu_star = random_uniform_measure(&mut rng, sc.dim, n2);
            let (_, plan) = w2_exact(&m_star, &nu_star)?;
            let w0 = w2_squared(&m_star, &nu_star)?;
            let alpha = extremal_first_field(sc, s, &m_star, &nu_star, &plan)?;
            let beta = extremal_second_field(sc, s, &m_star, &nu_star, &plan)?;
            let kappa =
                join_with_response(&alpha, &random_response(&mut rng, &alpha, nv_len, s, r))?;
            let theta = join_with_response(&beta, &random_response(&mut rng, &beta, nu_len, s, r))?;
            let mf = generate_flow(sc, s, &m_star, &kappa, r, opts.step)?;
            let nf = generate_flow(sc, s, &nu_star, &theta, r, opts.step)?;
            let lhs = w2_squared(mf.terminal(), nf.terminal())?;
            let len = r - s;
            let rhs = w0 * (1.0 + 4.0 * c.lipschitz * len)
                + k.varpi2(len) * len
                + tolerance(&c, opts.step, len);
            Ok(LemmaTrial {
                id,
                s,
                r,
                n: n.max(n2),
                lhs,
                rhs,
                slack: rhs - lhs,
            })
        })
        .collect();
    Ok(LemmaReport::from_trials(trials?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlGrid;
    use crate::scenario::{Modulus, Provenance, PursuitCircle, SplitLinear, Spread};

    fn split() -> Scenario {
        let gu = ControlGrid::new(Player::First, vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-0.5], vec![0.0], vec![0.5]]).unwrap();
        Scenario::new(
            1,
            0.5,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(Spread),
        )
        .unwrap()
    }

    fn pursuit() -> Scenario {
        let gu = ControlGrid::new(
            Player::First,
            vec![
                vec![0.5, 0.0],
                vec![-0.5, 0.0],
                vec![0.0, 0.5],
                vec![0.0, -0.5],
            ],
        )
        .unwrap();
        let gv = ControlGrid::new(
            Player::Second,
            vec![vec![0.3, 0.0], vec![-0.3, 0.0], vec![0.0, 0.3]],
        )
        .unwrap();
        Scenario::new(
            2,
            0.5,
            gu,
            gv,
            Arc::new(PursuitCircle {
                kappa: 1.0,
                lambda: 0.2,
            }),
            Arc::new(Spread),
        )
        .unwrap()
    }

    fn p(x: f64) -> TorusPoint {
        TorusPoint::wrap(&[x]).unwrap()
    }

    fn m1(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_coords(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    /// Selector oracle by full grid enumeration of `w * (u + v)`.
    fn enum_selectors(w: f64) -> (usize, usize) {
        let us = [-1.0, 0.0, 1.0];
        let vs = [-0.5, 0.0, 0.5];
        let mut bu = (0, f64::INFINITY);
        for (a, u) in us.iter().enumerate() {
            let mx = vs
                .iter()
                .map(|v| w * (u + v))
                .fold(f64::NEG_INFINITY, f64::max);
            if mx < bu.1 {
                bu = (a, mx);
            }
        }
        let mut bv = (0, f64::NEG_INFINITY);
        for (b, v) in vs.iter().enumerate() {
            let mn = us.iter().map(|u| w * (u + v)).fold(f64::INFINITY, f64::min);
            if mn > bv.1 {
                bv = (b, mn);
            }
        }
        (bu.0, bv.0)
    }

    #[test]
    fn constants_formulas() {
        let base = ScenarioConstants {
            c0: 2.0,
            lipschitz: 0.5,
            omega_f: Modulus::Linear { slope: 3.0 },
            omega_g: Modulus::Zero,
            provenance: Provenance::Declared,
        };
        let k = ShiftConstants::new(0.1, base, 4).unwrap();
        let v1 = 2.0 * 2.0 * 0.3 + 4.0 * 2.0 * 0.5 * 2.0 * 0.1;
        assert!((k.varpi1(0.1) - v1).abs() < 1e-15);
        let v2 = 2.0 * v1 + 4.0 * 4.0 * 0.1;
        assert!((k.varpi2(0.1) - v2).abs() < 1e-15);
        assert!((k.rho(0.1, 0.7) - (0.1 + v2 * 0.7) * (4.0 * 0.5 * 0.7f64).exp()).abs() < 1e-12);
        assert_eq!(k.rho(0.1, 0.0), 0.1);
        assert!(k.varpi2(0.3) >= 2.0 * k.varpi1(0.3));
        assert!(k.rho(0.2, 0.5) >= k.rho(0.1, 0.5) && k.rho(0.1, 0.6) >= k.rho(0.1, 0.5));
        assert!(ShiftConstants::new(0.0, base, 1).is_err());
    }

    #[test]
    fn selector_examples() {
        let sc = split();
        let m = m1(&[0.0]);
        // x' - y' = 0.3
        let x = p(0.4);
        let y = p(0.1);
        assert_eq!(u_hat(&sc, 0.0, &x, &y, &m), 0);
        assert_eq!(v_hat(&sc, 0.0, &x, &y, &m), 2);
        assert_eq!((0, 2), enum_selectors(0.3));
        assert_eq!(u_hat(&sc, 0.0, &x, &x, &m), 0);
        assert_eq!(v_hat(&sc, 0.0, &x, &x, &m), 0);
        assert_eq!(u_hat(&sc, 0.0, &y, &x, &m), 2);
        assert_eq!(enum_selectors(-0.3).0, 2);
    }

    #[test]
    fn selectors_match_enumeration() {
        let sc = split();
        let m = m1(&[0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = p(rng.gen());
            let y = p(rng.gen());
            let w = -crate::torus::min_image(x.coords()[0], y.coords()[0]);
            let (eu, ev) = enum_selectors(w);
            assert_eq!(u_hat(&sc, 0.0, &x, &y, &m), eu);
            assert_eq!(v_hat(&sc, 0.0, &x, &y, &m), ev);
        }
    }

    #[test]
    fn selectors_close_isaacs_gap() {
        // separable dynamics: min-max at û equals max-min at v̂
        let sc = pursuit();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_uniform_measure(&mut rng, 2, 3);
        let (c, wts) = flatten(&m);
        let mv = view(&sc, &c, &wts);
        for _ in 0..100 {
            let x = random_point(&mut rng, 2);
            let y = random_point(&mut rng, 2);
            let mut w = vec![0.0; 2];
            lifted_difference(x.coords(), y.coords(), &mut w);
            let tab = payoff_table(&sc, 0.1, x.coords(), &w, &mv);
            let nv = sc.grid_v.len();
            let a = u_hat(&sc, 0.1, &x, &y, &m);
            let b = v_hat(&sc, 0.1, &x, &y, &m);
            let minmax = tab[a * nv..(a + 1) * nv]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let maxmin = (0..sc.grid_u.len())
                .map(|i| tab[i * nv + b])
                .fold(f64::INFINITY, f64::min);
            assert!((minmax - maxmin).abs() < 1e-12);
        }
    }

    #[test]
    fn select_target_examples() {
        let m = m1(&[0.1, 0.6]);
        let table = |c: &EmpiricalMeasure| Some(c.points()[0].coords()[0]);
        let t = select_target(&table, &m, 0.01, &[], true).unwrap();
        assert_eq!(t.nu, m);
        assert_eq!(t.plan, TransportPlan::identity(&m));

        let inside = m1(&[0.05, 0.6]);
        let t = select_target(&table, &m, 0.01, std::slice::from_ref(&inside), true).unwrap();
        assert_eq!(t.nu, inside);
        assert_eq!(t.index, Some(0));

        // a translate with W2^2 = 2 * radius is excluded despite a smaller value
        let radius: f64 = 0.01;
        let shift = (2.0 * radius).sqrt();
        let outside = m1(&[0.1 - shift, 0.6 - shift]);
        assert!((w2_squared(&m, &outside).unwrap() - 2.0 * radius).abs() < 1e-12);
        let t = select_target(&table, &m, radius, &[outside], true).unwrap();
        assert_eq!(t.nu, m);

        let unknown = |_: &EmpiricalMeasure| None;
        let t = select_target(&unknown, &m, radius, &[inside.clone()], true).unwrap();
        assert_eq!(t.nu, m);
        assert_eq!(t.value, None);

        // maximizing picks m itself (0.1 > 0.05)
        let t = select_target(&table, &m, radius, &[inside], false).unwrap();
        assert_eq!(t.nu, m);
    }

    #[test]
    fn extremal_field_examples() {
        let sc = split();
        let m = m1(&[0.1, 0.6]);
        let f = extremal_first_field(&sc, 0.0, &m, &m, &TransportPlan::identity(&m)).unwrap();
        assert_eq!(f.pure_atoms(), Some(vec![0, 0]));

        // permutation plan: x_0 -> y_1, x_1 -> y_0
        let nu = m1(&[0.65, 0.0]);
        let (_, plan) = w2_exact(&m, &nu).unwrap();
        assert_eq!(plan.as_permutation(), Some(vec![1, 0]));
        let f = extremal_first_field(&sc, 0.0, &m, &nu, &plan).unwrap();
        let expect: Vec<usize> = [(0.1, 0.0), (0.6, 0.65)]
            .iter()
            .map(|&(x, y)| enum_selectors(-crate::torus::min_image(x, y)).0)
            .collect();
        assert_eq!(f.pure_atoms(), Some(expect));
        let g = extremal_second_field(&sc, 0.0, &m, &nu, &plan).unwrap();
        let expect: Vec<usize> = [(0.6, 0.65), (0.1, 0.0)]
            .iter()
            .map(|&(x, y)| enum_selectors(-crate::torus::min_image(x, y)).1)
            .collect();
        assert_eq!(g.pure_atoms(), Some(expect));

        // splitting plan: one source atom, two targets
        let src = m1(&[0.5]);
        let tgt = m1(&[0.3, 0.7]);
        let (_, plan) = w2_exact(&src, &tgt).unwrap();
        let f = extremal_first_field(&sc, 0.0, &src, &tgt, &plan).unwrap();
        let mut want = vec![0.0; 3];
        want[enum_selectors(0.2).0] += 0.5;
        want[enum_selectors(-0.2).0] += 0.5;
        assert_eq!(f.atom_distribution(0), want);
        let g =
            extremal_second_field(&sc, 0.0, &tgt, &src, &w2_exact(&tgt, &src).unwrap().1).unwrap();
        let mut want = vec![0.0; 3];
        want[enum_selectors(-0.2).1] += 0.5;
        want[enum_selectors(0.2).1] += 0.5;
        assert_eq!(g.atom_distribution(0), want);

        assert!(matches!(
            extremal_first_field(&sc, 0.0, &src, &tgt, &TransportPlan::identity(&m)),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn degenerate_interval_is_tight() {
        let sc = split();
        let mut opts = VerifyOptions::new(1, 3, 1e-3);
        opts.max_interval = 0.0;
        let rep = verify_lemma_agent(&sc, opts).unwrap();
        assert_eq!(rep.trials[0].s, rep.trials[0].r);
        assert!(rep.trials[0].slack.abs() < 1e-15);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn coincident_agents_stay_together() {
        // L = 0, x* = y*, same flow: û at x = y is atom 0 and v̂ is atom 0, so the
        // extremal pair moves by u_0 + zeta and xi + v_0; with zeta = v_0 and xi = u_0
        // both agents follow the same path.
        let sc = split();
        let m = m1(&[0.3]);
        let k = JointControlField::pure(&[1], &[1], 3, 3).unwrap();
        let flow = generate_flow(&sc, 0.0, &m, &k, 0.3, StepOptions::euler(1e-3)).unwrap();
        let x = p(0.3);
        let u = u_hat(&sc, 0.0, &x, &x, &m);
        let v = v_hat(&sc, 0.0, &x, &x, &m);
        let a = integrate_agent(
            &sc,
            0.0,
            &x,
            &flow,
            &RelaxedSchedule::point_mass(u, 3),
            &RelaxedSchedule::point_mass(v, 3),
            0.3,
            StepOptions::euler(1e-3),
        )
        .unwrap();
        let b = a.clone();
        let lhs = sq_dist(
            a.states.last().unwrap().coords(),
            b.states.last().unwrap().coords(),
        );
        let c = sc.constants().unwrap();
        let k = ShiftConstants::new(1.0, c, 1).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(lhs <= k.varpi2(0.3) * 0.3);
    }

    #[test]
    fn lemma_suites_small() {
        for sc in [split(), pursuit()] {
            let rep = verify_lemma_agent(&sc, VerifyOptions::new(100, 11, 1e-3)).unwrap();
            assert_eq!(rep.violations, 0, "{}", rep.to_table());
            let rep = verify_lemma_flow(&sc, VerifyOptions::new(50, 12, 1e-3)).unwrap();
            assert_eq!(rep.violations, 0, "{}", rep.to_table());
        }
    }

    #[test]
    fn identical_flows_have_zero_lhs() {
        let sc = pursuit();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_uniform_measure(&mut rng, 2, 3);
        let k = JointControlField::pure(&[0, 1, 2], &[2, 1, 0], 4, 3).unwrap();
        let a = generate_flow(&sc, 0.0, &m, &k, 0.2, StepOptions::euler(1e-3)).unwrap();
        let b = generate_flow(&sc, 0.0, &m, &k, 0.2, StepOptions::euler(1e-3)).unwrap();
        assert_eq!(w2_squared(a.terminal(), b.terminal()).unwrap(), 0.0);
    }

    #[test]
    fn two_particle_split_flow_by_hand() {
        // f = u + v, N = 2: closed-form positions, W2 checked against brute force
        let sc = split();
        let ms = m1(&[0.1, 0.4]);
        let ns = m1(&[0.2, 0.45]);
        let (w, plan) = w2_exact(&ms, &ns).unwrap();
        let alpha = extremal_first_field(&sc, 0.0, &ms, &ns, &plan).unwrap();
        let beta = extremal_second_field(&sc, 0.0, &ms, &ns, &plan).unwrap();
        // identity coupling; x' - y' < 0 for both pairs, so û = +1 and v̂ = -0.5
        assert_eq!(alpha.pure_atoms(), Some(vec![2, 2]));
        assert_eq!(beta.pure_atoms(), Some(vec![0, 0]));
        let kappa = join_with_response(
            &alpha,
            &crate::control::pure_response(&alpha, &[0, 0], 3).unwrap(),
        )
        .unwrap();
        let theta = join_with_response(
            &beta,
            &crate::control::pure_response(&beta, &[1, 1], 3).unwrap(),
        )
        .unwrap();
        let r = 0.1;
        let mf = generate_flow(&sc, 0.0, &ms, &kappa, r, StepOptions::euler(1e-3)).unwrap();
        let nf = generate_flow(&sc, 0.0, &ns, &theta, r, StepOptions::euler(1e-3)).unwrap();
        // x moves at 1 - 0.5 = 0.5, y at 0 - 0.5 = -0.5
        let hand_m = m1(&[0.15, 0.45]);
        let hand_n = m1(&[0.15, 0.40]);
        let lhs = crate::measure::w2_bruteforce(&hand_m, &hand_n)
            .unwrap()
            .powi(2);
        assert!((w2_squared(mf.terminal(), nf.terminal()).unwrap() - lhs).abs() < 1e-12);
        let k = ShiftConstants::new(1.0, sc.constants().unwrap(), 1).unwrap();
        assert!(lhs <= w * w + k.varpi2(r) * r);
    }
}
