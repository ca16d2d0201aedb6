//! Particle integration of controlled flows, the Isaacs check and sampled
//! estimation of regularity constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{JointControlField, RelaxedSchedule};
use crate::error::{Error, Result};
use crate::measure::{w2_squared, EmpiricalMeasure, MeasureFlow, ParticleTrajectory};
use crate::scenario::{flatten, MeasureView, Modulus, Provenance, Scenario, ScenarioConstants};
use crate::torus::{wrap_scalar, TorusPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub h: f64,
    pub method: Method,
}

impl StepOptions {
    pub fn euler(h: f64) -> Self {
        Self {
            h,
            method: Method::Euler,
        }
    }
}

/// Node times from `s` to `until`: every breakpoint in between is a node and
/// each segment is cut into equal steps no longer than `h`.
pub fn step_times(s: f64, until: f64, breaks: &[f64], h: f64) -> Vec<f64> {
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&b| b > s + 1e-12 && b < until - 1e-12)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    cuts.push(until);
    let mut times = vec![s];
    let mut from = s;
    for c in cuts {
        let n = ((c - from) / h - 1e-9).ceil().max(1.0) as usize;
        for k in 1..n {
            times.push(from + (c - from) * k as f64 / n as f64);
        }
        times.push(c);
        from = c;
    }
    if until <= s {
        times.truncate(1);
    }
    times
}

fn check_step(sc: &Scenario, h: f64) -> Result<ScenarioConstants> {
    let c = sc.constants()?;
    if !(h > 0.0) || c.c0 * h > 0.5 {
        return Err(Error::StepTooLarge { h, speed: c.c0 });
    }
    Ok(c)
}

/// Mixture-averaged velocity `sum_a sum_b p_a q_b f(t, x, m, u_a, v_b)`.
fn relaxed_velocity(
    sc: &Scenario,
    t: f64,
    x: &[f64],
    m: &MeasureView<'_>,
    umix: &[f64],
    vmix: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (a, &p) in umix.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (b, &q) in vmix.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            sc.velocity(t, x, m, sc.grid_u.atom(a), sc.grid_v.atom(b), scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += p * q * s;
            }
        }
    }
}

/// A weighted sub-particle with its pair of schedules.
struct Sub<'a> {
    u: &'a RelaxedSchedule,
    v: &'a RelaxedSchedule,
}

/// Self-consistent ensemble stepping. Returns node times and the flat state at
/// every node (or only the last one when `record` is false).
fn run_ensemble(
    sc: &Scenario,
    times: &[f64],
    mut state: Vec<f64>,
    weights: &[f64],
    subs: &[Sub<'_>],
    method: Method,
    record: bool,
) -> Vec<Vec<f64>> {
    let d = sc.dim;
    let n = weights.len();
    let mut states = Vec::with_capacity(if record { times.len() } else { 1 });
    if record {
        states.push(state.clone());
    }
    let mut vel = vec![0.0; n * d];
    let mut scratch = vec![0.0; d];
    let mut eval = |t: f64, at: &[f64], mix_t: f64, out: &mut [f64]| {
        let m = MeasureView {
            dim: d,
            coords: at,
            weights,
        };
        for (i, sub) in subs.iter().enumerate() {
            relaxed_velocity(
                sc,
                t,
                &at[i * d..(i + 1) * d],
                &m,
                sub.u.mixture_at(mix_t),
                sub.v.mixture_at(mix_t),
                &mut out[i * d..(i + 1) * d],
                &mut scratch,
            );
        }
    };
    let (mut k2, mut k3, mut k4, mut tmp) = match method {
        Method::Euler => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
        Method::Rk4 => (
            vec![0.0; n * d],
            vec![0.0; n * d],
            vec![0.0; n * d],
            vec![0.0; n * d],
        ),
    };
    for w in times.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        match method {
            Method::Euler => {
                eval(t, &state, t, &mut vel);
                for (x, v) in state.iter_mut().zip(&vel) {
                    *x = wrap_scalar(*x + h * v);
                }
            }
            Method::Rk4 => {
                // controls stay at the values active on [t, t + h)
                eval(t, &state, t, &mut vel);
                for i in 0..tmp.len() {
                    tmp[i] = state[i] + 0.5 * h * vel[i];
                }
                eval(t + 0.5 * h, &tmp, t, &mut k2);
                for i in 0..tmp.len() {
                    tmp[i] = state[i] + 0.5 * h * k2[i];
                }
                eval(t + 0.5 * h, &tmp, t, &mut k3);
                for i in 0..tmp.len() {
                    tmp[i] = state[i] + h * k3[i];
                }
                eval(t + h, &tmp, t, &mut k4);
                for i in 0..state.len() {
                    let dx = h / 6.0 * (vel[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    state[i] = wrap_scalar(state[i] + dx);
                }
            }
        }
        if record {
            states.push(state.clone());
        }
    }
    if !record {
        states.push(state);
    }
    states
}

fn schedule_breaks<'a>(subs: impl Iterator<Item = &'a RelaxedSchedule>) -> Vec<f64> {
    subs.flat_map(|s| s.starts().iter().copied())
        .filter(|t| t.is_finite())
        .collect()
}

fn to_points(d: usize, flat: &[f64]) -> Vec<TorusPoint> {
    flat.chunks(d).map(TorusPoint::from_raw_unchecked).collect()
}

/// Flow generated from `m_star` at time `s` by the joint control field `k`,
/// integrated up to `until`.
///
/// Particle `i` is split into one sub-particle per component of `k`'s entry,
/// in component order; the flow's trajectories follow the sub-particles.
pub fn generate_flow(
    sc: &Scenario,
    s: f64,
    m_star: &EmpiricalMeasure,
    k: &JointControlField,
    until: f64,
    opts: StepOptions,
) -> Result<MeasureFlow> {
    let c = check_step(sc, opts.h)?;
    if k.n_particles() != m_star.len() {
        return Err(Error::IncompleteResponse {
            particle: k.n_particles().min(m_star.len()),
            component: 0,
        });
    }
    if m_star.dim() != sc.dim {
        return Err(Error::DimError {
            expected: sc.dim,
            got: m_star.dim(),
        });
    }
    let d = sc.dim;
    let mut state = Vec::new();
    let mut weights = Vec::new();
    let mut subs = Vec::new();
    for (i, comps) in k.entries().iter().enumerate() {
        for comp in comps {
            if comp.u.n_atoms() != sc.grid_u.len() || comp.v.n_atoms() != sc.grid_v.len() {
                return Err(Error::InvalidKernel(i));
            }
            state.extend_from_slice(m_star.points()[i].coords());
            weights.push(m_star.weights()[i] * comp.weight);
            subs.push(Sub {
                u: &comp.u,
                v: &comp.v,
            });
        }
    }
    let breaks = schedule_breaks(subs.iter().flat_map(|s| [s.u, s.v]));
    let times = step_times(s, until, &breaks, opts.h);
    let states = run_ensemble(sc, &times, state, &weights, &subs, opts.method, true);

    let measures: Vec<EmpiricalMeasure> = states
        .iter()
        .map(|st| EmpiricalMeasure::from_parts_unchecked(d, to_points(d, st), weights.clone()))
        .collect();
    let trajectories = (0..weights.len())
        .map(|j| ParticleTrajectory {
            times: times.clone(),
            states: states
                .iter()
                .map(|st| TorusPoint::from_raw_unchecked(&st[j * d..(j + 1) * d]))
                .collect(),
        })
        .collect();
    Ok(MeasureFlow {
        times,
        measures,
        trajectories,
        trajectory_weights: weights,
        lipschitz_const: c.c0,
    })
}

/// Terminal positions after `duration` under pure constant atoms, particle
/// order preserved. No trajectory is stored.
pub fn advance_pure(
    sc: &Scenario,
    s: f64,
    duration: f64,
    m: &EmpiricalMeasure,
    u_atoms: &[usize],
    v_atoms: &[usize],
    opts: StepOptions,
) -> Result<EmpiricalMeasure> {
    check_step(sc, opts.h)?;
    let nu = sc.grid_u.len();
    let nv = sc.grid_v.len();
    let us: Vec<RelaxedSchedule> = u_atoms
        .iter()
        .map(|&a| RelaxedSchedule::point_mass(a, nu))
        .collect();
    let vs: Vec<RelaxedSchedule> = v_atoms
        .iter()
        .map(|&b| RelaxedSchedule::point_mass(b, nv))
        .collect();
    let subs: Vec<Sub<'_>> = us.iter().zip(&vs).map(|(u, v)| Sub { u, v }).collect();
    let (state, weights) = flatten(m);
    let times = step_times(s, s + duration, &[], opts.h);
    let last = run_ensemble(sc, &times, state, &weights, &subs, opts.method, false)
        .pop()
        .expect("final state");
    Ok(EmpiricalMeasure::from_parts_unchecked(
        sc.dim,
        to_points(sc.dim, &last),
        weights,
    ))
}

/// Single agent from `y` at time `s` moving along the external flow under the
/// schedule pair `(u, v)`, up to `until`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_agent(
    sc: &Scenario,
    s: f64,
    y: &TorusPoint,
    flow: &MeasureFlow,
    u: &RelaxedSchedule,
    v: &RelaxedSchedule,
    until: f64,
    opts: StepOptions,
) -> Result<ParticleTrajectory> {
    check_step(sc, opts.h)?;
    if !flow.covers(s, until) {
        return Err(Error::FlowDomainError {
            start: flow.start(),
            end: flow.end(),
            from: s,
            to: until,
        });
    }
    let d = sc.dim;
    let flat: Vec<(Vec<f64>, Vec<f64>)> = flow.measures.iter().map(flatten).collect();
    let view = |t: f64| {
        let (c, w) = &flat[flow.node_at_or_before(t)];
        MeasureView {
            dim: d,
            coords: c,
            weights: w,
        }
    };
    let mut breaks = schedule_breaks([u, v].into_iter());
    breaks.extend(flow.times.iter().copied());
    let times = step_times(s, until, &breaks, opts.h);
    let mut x = y.coords().to_vec();
    let mut states = vec![y.clone()];
    let mut vel = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let (mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for w in times.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let (um, vm) = (u.mixture_at(t), v.mixture_at(t));
        let m = view(t);
        relaxed_velocity(sc, t, &x, &m, um, vm, &mut vel, &mut scratch);
        match opts.method {
            Method::Euler => {
                for (c, dv) in x.iter_mut().zip(&vel) {
                    *c = wrap_scalar(*c + h * dv);
                }
            }
            Method::Rk4 => {
                // the external flow is frozen on each step
                for i in 0..d {
                    tmp[i] = x[i] + 0.5 * h * vel[i];
                }
                relaxed_velocity(sc, t + 0.5 * h, &tmp, &m, um, vm, &mut k2, &mut scratch);
                for i in 0..d {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                relaxed_velocity(sc, t + 0.5 * h, &tmp, &m, um, vm, &mut k3, &mut scratch);
                for i in 0..d {
                    tmp[i] = x[i] + h * k3[i];
                }
                relaxed_velocity(sc, t + h, &tmp, &m, um, vm, &mut k4, &mut scratch);
                for i in 0..d {
                    x[i] =
                        wrap_scalar(x[i] + h / 6.0 * (vel[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
                }
            }
        }
        states.push(TorusPoint::from_raw_unchecked(&x));
    }
    Ok(ParticleTrajectory { times, states })
}

/// Evaluation point for the Isaacs check.
#[derive(Debug, Clone)]
pub struct IsaacsSample {
    pub t: f64,
    pub x: TorusPoint,
    pub m: EmpiricalMeasure,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsaacsReport {
    pub max_gap: f64,
    pub worst_case: usize,
}

fn inner_table(sc: &Scenario, smp: &IsaacsSample) -> Vec<Vec<f64>> {
    let (coords, weights) = flatten(&smp.m);
    let view = MeasureView {
        dim: sc.dim,
        coords: &coords,
        weights: &weights,
    };
    let mut out = vec![0.0; sc.dim];
    sc.grid_u
        .atoms()
        .iter()
        .map(|u| {
            sc.grid_v
                .atoms()
                .iter()
                .map(|v| {
                    sc.velocity(smp.t, smp.x.coords(), &view, u, v, &mut out);
                    out.iter().zip(&smp.w).map(|(a, b)| a * b).sum()
                })
                .collect()
        })
        .collect()
}

/// `min_u max_v <w, f> - max_v min_u <w, f>` at one sample.
pub fn isaacs_gap(sc: &Scenario, smp: &IsaacsSample) -> f64 {
    let tab = inner_table(sc, smp);
    let minmax = tab
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    let maxmin = (0..sc.grid_v.len())
        .map(|b| tab.iter().map(|row| row[b]).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    minmax - maxmin
}

pub fn isaacs_check(sc: &Scenario, samples: &[IsaacsSample]) -> IsaacsReport {
    let mut report = IsaacsReport {
        max_gap: f64::NEG_INFINITY,
        worst_case: 0,
    };
    for (i, smp) in samples.iter().enumerate() {
        let g = isaacs_gap(sc, smp);
        if g > report.max_gap {
            report = IsaacsReport {
                max_gap: g,
                worst_case: i,
            };
        }
    }
    report
}

fn random_measure(rng: &mut ChaCha8Rng, dim: usize, max_n: usize) -> EmpiricalMeasure {
    let n = rng.gen_range(1..=max_n);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen()).collect())
        .collect();
    EmpiricalMeasure::from_coords(&rows).expect("random rows are valid")
}

/// Random Isaacs samples over `[0, T] x T^d x P(T^d) x [-1, 1]^d`.
pub fn sample_isaacs(sc: &Scenario, n: usize, seed: u64) -> Vec<IsaacsSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| IsaacsSample {
            t: rng.gen_range(0.0..=sc.horizon),
            x: TorusPoint::from_raw_unchecked(&(0..sc.dim).map(|_| rng.gen()).collect::<Vec<_>>()),
            m: random_measure(&mut rng, sc.dim, 4),
            w: (0..sc.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

pub const SAFETY_FACTOR: f64 = 1.1;

/// Sampled constants with a 1.1 safety factor.
///
/// Each sample draws `t`, `x` and a random measure, then evaluates `f` on
/// every grid pair together with perturbations in `x`, `m` and `t`.
pub fn estimate_constants(
    sc: &Scenario,
    sample_budget: usize,
    seed: u64,
) -> Result<ScenarioConstants> {
    if sample_budget < 1000 {
        return Err(Error::Config(format!(
            "sample budget {sample_budget} below 1000"
        )));
    }
    let d = sc.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; d];
    let mut out2 = vec![0.0; d];
    let (mut c0, mut lip, mut slope_f, mut slope_g): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let norm = |a: &[f64]| a.iter().map(|c| c * c).sum::<f64>().sqrt();
    for _ in 0..sample_budget {
        let t = rng.gen_range(0.0..=sc.horizon.max(1e-9));
        let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
        let m = random_measure(&mut rng, d, 4);
        let (mc, mw) = flatten(&m);
        let view = MeasureView {
            dim: d,
            coords: &mc,
            weights: &mw,
        };
        let scale = 10f64.powf(rng.gen_range(-3.0..-1.0));
        let dx: Vec<f64> = (0..d).map(|_| rng.gen_range(-scale..scale)).collect();
        let x2: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let moved: Vec<Vec<f64>> = m
            .points()
            .iter()
            .map(|p| {
                p.coords()
                    .iter()
                    .map(|c| c + rng.gen_range(-scale..scale))
                    .collect()
            })
            .collect();
        let m2 = EmpiricalMeasure::new(
            moved
                .iter()
                .map(|r| TorusPoint::from_raw_unchecked(r))
                .collect(),
            m.weights().to_vec(),
        )?;
        let (mc2, mw2) = flatten(&m2);
        let view2 = MeasureView {
            dim: d,
            coords: &mc2,
            weights: &mw2,
        };
        let w2 = w2_squared(&m, &m2)?.sqrt();
        let dt = rng.gen_range(-scale..scale);
        for u in sc.grid_u.atoms() {
            for v in sc.grid_v.atoms() {
                sc.velocity(t, &x, &view, u, v, &mut out);
                if out.iter().any(|c| !c.is_finite()) {
                    return Err(Error::DynamicsError(format!(
                        "non-finite velocity at t={t}, x={x:?}"
                    )));
                }
                c0 = c0.max(norm(&out));
                sc.velocity(t, &x2, &view2, u, v, &mut out2);
                let diff: Vec<f64> = out.iter().zip(&out2).map(|(a, b)| a - b).collect();
                let denom = norm(&dx) + w2;
                if denom > 0.0 {
                    lip = lip.max(norm(&diff) / denom);
                }
                sc.velocity(t + dt, &x, &view, u, v, &mut out2);
                let diff: Vec<f64> = out.iter().zip(&out2).map(|(a, b)| a - b).collect();
                if dt != 0.0 {
                    slope_f = slope_f.max(norm(&diff) / dt.abs());
                }
            }
        }
        let g1 = sc.payoff(&m);
        let g2 = sc.payoff(&m2);
        if !g1.is_finite() || !g2.is_finite() {
            return Err(Error::DynamicsError("non-finite payoff".into()));
        }
        if w2 > 0.0 {
            slope_g = slope_g.max((g1 - g2).abs() / w2);
        }
    }
    let modulus = |s: f64| {
        if s < 1e-12 {
            Modulus::Zero
        } else {
            Modulus::Linear {
                slope: SAFETY_FACTOR * s,
            }
        }
    };
    Ok(ScenarioConstants {
        c0: SAFETY_FACTOR * c0,
        lipschitz: if lip < 1e-12 {
            0.0
        } else {
            SAFETY_FACTOR * lip
        },
        omega_f: modulus(slope_f),
        omega_g: modulus(slope_g),
        provenance: Provenance::Estimated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlGrid, JointComponent, Player};
    use crate::measure::w2_exact;
    use crate::scenario::{BarycenterAttraction, Dynamics, SplitLinear, Spread, W2ToTarget};
    use std::sync::Arc;

    fn grids() -> (ControlGrid, ControlGrid) {
        (
            ControlGrid::new(Player::First, vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap(),
            ControlGrid::new(Player::Second, vec![vec![-0.5], vec![0.0], vec![0.5]]).unwrap(),
        )
    }

    fn split() -> Scenario {
        let (gu, gv) = grids();
        Scenario::new(
            1,
            0.4,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(W2ToTarget {
                target: EmpiricalMeasure::from_coords(&[vec![0.0]]).unwrap(),
            }),
        )
        .unwrap()
    }

    fn attraction(kappa: f64) -> Scenario {
        let (gu, gv) = grids();
        Scenario::new(
            1,
            1.0,
            gu,
            gv,
            Arc::new(BarycenterAttraction { kappa }),
            Arc::new(Spread),
        )
        .unwrap()
    }

    fn pt(x: f64) -> TorusPoint {
        TorusPoint::wrap(&[x]).unwrap()
    }

    fn static_flow(sc: &Scenario, m: &EmpiricalMeasure, until: f64) -> MeasureFlow {
        let k = JointControlField::pure(&vec![1; m.len()], &vec![1; m.len()], 3, 3).unwrap();
        generate_flow(sc, 0.0, m, &k, until, StepOptions::euler(0.01)).unwrap()
    }

    #[test]
    fn step_grid_alignment() {
        let t = step_times(0.0, 1.0, &[0.25, 0.5, -1.0, 2.0], 0.1);
        assert!(t.iter().any(|&x| (x - 0.25).abs() < 1e-15));
        assert!(t.iter().any(|&x| (x - 0.5).abs() < 1e-15));
        assert_eq!(*t.last().unwrap(), 1.0);
        assert!(t
            .windows(2)
            .all(|w| w[1] - w[0] <= 0.1 + 1e-12 && w[1] > w[0]));
        assert_eq!(step_times(0.3, 0.3, &[], 0.1), vec![0.3]);
    }

    #[test]
    fn agent_linear_motion() {
        let sc = split();
        let m = EmpiricalMeasure::dirac(pt(0.0));
        let flow = static_flow(&sc, &m, 0.4);
        let tr = integrate_agent(
            &sc,
            0.0,
            &pt(0.0),
            &flow,
            &RelaxedSchedule::point_mass(2, 3),
            &RelaxedSchedule::point_mass(2, 3),
            0.4,
            StepOptions::euler(0.01),
        )
        .unwrap();
        let end = tr.states.last().unwrap().coords()[0];
        assert!((end - 0.6).abs() < 1e-12);
        assert!(tr.max_step() <= 1.5 * 0.01 + 1e-12);
    }

    #[test]
    fn agent_cancellation_and_relaxed_average() {
        let sc = split();
        let m = EmpiricalMeasure::dirac(pt(0.3));
        let flow = static_flow(&sc, &m, 0.4);
        let h = StepOptions::euler(0.01);
        let gu = ControlGrid::new(Player::First, vec![vec![1.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-1.0]]).unwrap();
        let sc2 = Scenario::new(
            1,
            0.4,
            gu,
            gv,
            Arc::new(SplitLinear { drift: vec![0.0] }),
            Arc::new(Spread),
        )
        .unwrap();
        let flow2 = {
            let k = JointControlField::pure(&[0], &[0], 1, 1).unwrap();
            generate_flow(&sc2, 0.0, &m, &k, 0.4, h).unwrap()
        };
        assert!(flow2.trajectories[0]
            .states
            .iter()
            .all(|p| (p.coords()[0] - 0.3).abs() < 1e-15));

        let half = RelaxedSchedule::constant(vec![0.5, 0.0, 0.5]).unwrap();
        let v0 = RelaxedSchedule::point_mass(1, 3);
        let tr = integrate_agent(&sc, 0.0, &pt(0.3), &flow, &half, &v0, 0.4, h).unwrap();
        assert!((tr.states.last().unwrap().coords()[0] - 0.3).abs() < 1e-12);

        // the split alternative: two half-weight sub-particles moving apart
        let k = JointControlField::new(
            vec![vec![
                JointComponent {
                    weight: 0.5,
                    u: RelaxedSchedule::point_mass(0, 3),
                    v: v0.clone(),
                },
                JointComponent {
                    weight: 0.5,
                    u: RelaxedSchedule::point_mass(2, 3),
                    v: v0.clone(),
                },
            ]],
            None,
        )
        .unwrap();
        let split_flow = generate_flow(&sc, 0.0, &m, &k, 0.4, h).unwrap();
        let term = split_flow.terminal();
        let mean_disp: f64 = term
            .points()
            .iter()
            .zip(term.weights())
            .map(|(p, w)| w * crate::torus::min_image(0.3, p.coords()[0]))
            .sum();
        assert!(mean_disp.abs() < 1e-12);
    }

    #[test]
    fn agent_rejects_short_flow() {
        let sc = split();
        let m = EmpiricalMeasure::dirac(pt(0.0));
        let flow = static_flow(&sc, &m, 0.2);
        let r = integrate_agent(
            &sc,
            0.0,
            &pt(0.0),
            &flow,
            &RelaxedSchedule::point_mass(0, 3),
            &RelaxedSchedule::point_mass(0, 3),
            0.4,
            StepOptions::euler(0.01),
        );
        assert!(matches!(r, Err(Error::FlowDomainError { .. })));
    }

    #[test]
    fn flow_is_rigid_translation() {
        let sc = split();
        let m = EmpiricalMeasure::from_coords(&[vec![0.1], vec![0.45], vec![0.8]]).unwrap();
        let k = JointControlField::pure(&[2, 2, 2], &[2, 2, 2], 3, 3).unwrap();
        let flow = generate_flow(&sc, 0.0, &m, &k, 0.4, StepOptions::euler(0.01)).unwrap();
        assert_eq!(flow.initial(), &m);
        for (t, mt) in flow.times.iter().zip(&flow.measures) {
            let shifted = EmpiricalMeasure::new(
                m.points()
                    .iter()
                    .map(|p| p.translate(&[1.5 * t]).unwrap())
                    .collect(),
                m.weights().to_vec(),
            )
            .unwrap();
            assert!(w2_exact(mt, &shifted).unwrap().0 < 1e-9);
        }
        assert!(flow.observed_lipschitz() <= 1.5 + 1e-9);
    }

    #[test]
    fn step_too_large() {
        let sc = split();
        let m = EmpiricalMeasure::dirac(pt(0.0));
        let k = JointControlField::pure(&[0], &[0], 3, 3).unwrap();
        assert!(matches!(
            generate_flow(&sc, 0.0, &m, &k, 0.4, StepOptions::euler(0.4)),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn symmetric_attraction_converges_symmetrically() {
        let sc = attraction(2.0);
        let m = EmpiricalMeasure::from_coords(&[vec![0.3], vec![0.7]]).unwrap();
        let k = JointControlField::pure(&[1, 1], &[1, 1], 3, 3).unwrap();
        let coarse = generate_flow(&sc, 0.0, &m, &k, 0.5, StepOptions::euler(0.01)).unwrap();
        let fine = generate_flow(&sc, 0.0, &m, &k, 0.5, StepOptions::euler(0.001)).unwrap();
        for mt in &coarse.measures {
            let a = mt.points()[0].coords()[0];
            let b = mt.points()[1].coords()[0];
            assert!((a - 0.5 + b - 0.5).abs() < 1e-12, "swap symmetry about 1/2");
        }
        let gap0 = crate::torus::min_image(0.3, 0.7).abs();
        let ends = |f: &MeasureFlow| {
            let t = f.terminal();
            crate::torus::min_image(t.points()[0].coords()[0], t.points()[1].coords()[0]).abs()
        };
        assert!(ends(&coarse) < gap0);
        assert!((ends(&coarse) - ends(&fine)).abs() < 1e-2);
        let rk = generate_flow(
            &sc,
            0.0,
            &m,
            &k,
            0.5,
            StepOptions {
                h: 0.01,
                method: Method::Rk4,
            },
        )
        .unwrap();
        assert!((ends(&rk) - ends(&fine)).abs() < (ends(&coarse) - ends(&fine)).abs());
    }

    #[test]
    fn euler_step_halving_converges() {
        let sc = attraction(3.0);
        let m = EmpiricalMeasure::from_coords(&[vec![0.1], vec![0.35], vec![0.6]]).unwrap();
        let k = JointControlField::pure(&[0, 1, 2], &[2, 1, 0], 3, 3).unwrap();
        let reference = generate_flow(&sc, 0.0, &m, &k, 0.5, StepOptions::euler(1e-4)).unwrap();
        let mut errs = Vec::new();
        for h in [0.02, 0.01, 0.005] {
            let f = generate_flow(&sc, 0.0, &m, &k, 0.5, StepOptions::euler(h)).unwrap();
            errs.push(w2_exact(f.terminal(), reference.terminal()).unwrap().0);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn advance_matches_generate() {
        let sc = attraction(1.5);
        let m = EmpiricalMeasure::from_coords(&[vec![0.1], vec![0.35]]).unwrap();
        let k = JointControlField::pure(&[0, 2], &[1, 0], 3, 3).unwrap();
        let f = generate_flow(&sc, 0.1, &m, &k, 0.15, StepOptions::euler(0.01)).unwrap();
        let a = advance_pure(
            &sc,
            0.1,
            0.05,
            &m,
            &[0, 2],
            &[1, 0],
            StepOptions::euler(0.01),
        )
        .unwrap();
        assert!(w2_exact(f.terminal(), &a).unwrap().0 < 1e-12);
    }

    #[test]
    fn flow_stays_in_lipschitz_class() {
        let sc = attraction(2.0);
        let c0 = sc.constants().unwrap().c0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = random_measure(&mut rng, 1, 4);
            let n = m.len();
            let ua: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let va: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let k = JointControlField::pure(&ua, &va, 3, 3).unwrap();
            let f = generate_flow(&sc, 0.0, &m, &k, 0.3, StepOptions::euler(0.01)).unwrap();
            assert!(f.observed_lipschitz() <= c0 + 1e-9);
            for tr in &f.trajectories {
                assert!(tr.max_step() <= c0 * 0.01 + 1e-12);
            }
        }
    }

    #[test]
    fn isaacs_examples() {
        let sc = attraction(1.0);
        let samples = sample_isaacs(&sc, 200, 9);
        let r = isaacs_check(&sc, &samples);
        assert!(r.max_gap.abs() < 1e-12);

        #[derive(Debug)]
        struct Product;
        impl Dynamics for Product {
            fn velocity(
                &self,
                _t: f64,
                _x: &[f64],
                _m: &MeasureView<'_>,
                u: &[f64],
                v: &[f64],
                out: &mut [f64],
            ) {
                out[0] = u[0] * v[0];
            }
        }
        let gu = ControlGrid::new(Player::First, vec![vec![-1.0], vec![1.0]]).unwrap();
        let gv = ControlGrid::new(Player::Second, vec![vec![-1.0], vec![1.0]]).unwrap();
        let sc = Scenario::new(1, 1.0, gu, gv, Arc::new(Product), Arc::new(Spread)).unwrap();
        let smp = IsaacsSample {
            t: 0.0,
            x: pt(0.2),
            m: EmpiricalMeasure::dirac(pt(0.2)),
            w: vec![1.0],
        };
        // enumerate the 4 pairs directly
        let vals = [[1.0f64, -1.0], [-1.0, 1.0]];
        let minmax = vals
            .iter()
            .map(|r| r[0].max(r[1]))
            .fold(f64::INFINITY, f64::min);
        let maxmin = (0..2)
            .map(|b| vals[0][b].min(vals[1][b]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(isaacs_gap(&sc, &smp), minmax - maxmin);
        assert_eq!(isaacs_gap(&sc, &smp), 2.0);
        for s in sample_isaacs(&sc, 100, 1) {
            assert!(isaacs_gap(&sc, &s) >= -1e-12);
        }
    }

    #[test]
    fn estimated_constants_sandwich() {
        let sc = split();
        let est = estimate_constants(&sc, 1000, 1).unwrap();
        let declared = sc.constants().unwrap();
        assert!(est.c0 >= declared.c0 / SAFETY_FACTOR);
        assert!((est.c0 - 1.65).abs() < 1e-12);
        assert_eq!(est.lipschitz, 0.0);
        assert_eq!(est.omega_f, Modulus::Zero);
        assert_eq!(est.provenance, Provenance::Estimated);
        assert!(estimate_constants(&sc, 10, 1).is_err());

        let sc = attraction(2.0);
        let est = estimate_constants(&sc, 1000, 2).unwrap();
        let an = sc.constants().unwrap();
        assert!(est.c0 >= an.c0 / SAFETY_FACTOR - 0.2);
        assert!(est.lipschitz <= SAFETY_FACTOR * an.lipschitz + 1e-9);
    }

    #[test]
    fn nan_dynamics_rejected() {
        #[derive(Debug)]
        struct Broken;
        impl Dynamics for Broken {
            fn velocity(
                &self,
                _t: f64,
                _x: &[f64],
                _m: &MeasureView<'_>,
                _u: &[f64],
                _v: &[f64],
                out: &mut [f64],
            ) {
                out[0] = f64::NAN;
            }
        }
        let (gu, gv) = grids();
        let sc = Scenario::new(1, 1.0, gu, gv, Arc::new(Broken), Arc::new(Spread)).unwrap();
        assert!(matches!(
            estimate_constants(&sc, 1000, 0),
            Err(Error::DynamicsError(_))
        ));
    }

    #[test]
    fn determinism() {
        let sc = attraction(2.0);
        let m = EmpiricalMeasure::from_coords(&[vec![0.1], vec![0.35], vec![0.9]]).unwrap();
        let k = JointControlField::pure(&[0, 1, 2], &[2, 1, 0], 3, 3).unwrap();
        let a = generate_flow(&sc, 0.0, &m, &k, 0.3, StepOptions::euler(0.01)).unwrap();
        let b = generate_flow(&sc, 0.0, &m, &k, 0.3, StepOptions::euler(0.01)).unwrap();
        assert_eq!(a, b);
    }
}
