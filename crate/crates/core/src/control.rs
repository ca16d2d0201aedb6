//! Finite control grids, relaxed schedules and per-particle control fields.
//!
//! A [`RelaxedSchedule`] is a piecewise-constant probability vector over the
//! atoms of a grid: the drift it produces is the mixture average. A
//! [`ControlField`] gives every particle a *distribution* over schedules;
//! those distributions are realized by splitting the particle. A
//! [`JointControlField`] pairs schedules of both players and may carry the
//! one-player field it was built against, so that consistency with that
//! field can be checked.

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    First,
    Second,
}

impl Player {
    pub fn other(self) -> Self {
        match self {
            Player::First => Player::Second,
            Player::Second => Player::First,
        }
    }
}

/// Finite control set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    player: Player,
    atoms: Vec<Vec<f64>>,
}

impl ControlGrid {
    pub fn new(player: Player, atoms: Vec<Vec<f64>>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Config("control grid is empty".into()));
        }
        let dim = atoms[0].len();
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::DimError {
                    expected: dim,
                    got: a.len(),
                });
            }
            if a.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("atom {i} is not finite")));
            }
            if atoms[..i].contains(a) {
                return Err(Error::Config(format!("duplicate atom {a:?}")));
            }
        }
        Ok(Self { player, atoms })
    }

    pub fn player(&self) -> Player {
        self.player
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i]
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }
}

/// Piecewise-constant mixture over grid atoms.
///
/// Cell `c` is active from `starts[c]` until the next start; times before the
/// first start use the first cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSchedule {
    starts: Vec<f64>,
    mixtures: Vec<Vec<f64>>,
}

const MIX_TOL: f64 = 1e-12;

fn check_mixture(m: &[f64]) -> Result<()> {
    let s: f64 = m.iter().sum();
    if m.is_empty() || m.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > MIX_TOL {
        return Err(Error::InvalidKernel(0));
    }
    Ok(())
}

impl RelaxedSchedule {
    /// Time-constant point mass on `atom`.
    pub fn point_mass(atom: usize, n_atoms: usize) -> Self {
        let mut m = vec![0.0; n_atoms];
        m[atom] = 1.0;
        Self {
            starts: vec![f64::NEG_INFINITY],
            mixtures: vec![m],
        }
    }

    pub fn constant(mixture: Vec<f64>) -> Result<Self> {
        check_mixture(&mixture)?;
        Ok(Self {
            starts: vec![f64::NEG_INFINITY],
            mixtures: vec![mixture],
        })
    }

    pub fn piecewise(starts: Vec<f64>, mixtures: Vec<Vec<f64>>) -> Result<Self> {
        if starts.is_empty() || starts.len() != mixtures.len() {
            return Err(Error::GridError(
                "schedule needs one mixture per cell".into(),
            ));
        }
        if starts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::GridError(
                "schedule cell starts must increase".into(),
            ));
        }
        let n = mixtures[0].len();
        for m in &mixtures {
            if m.len() != n {
                return Err(Error::GridError("mixtures over different grids".into()));
            }
            check_mixture(m)?;
        }
        Ok(Self { starts, mixtures })
    }

    /// Pure piecewise schedule: `atoms[c]` active from `starts[c]`.
    pub fn pure_piecewise(starts: Vec<f64>, atoms: &[usize], n_atoms: usize) -> Result<Self> {
        let mixtures = atoms
            .iter()
            .map(|&a| {
                if a >= n_atoms {
                    return Err(Error::UnknownAtom {
                        atom: a,
                        size: n_atoms,
                    });
                }
                let mut m = vec![0.0; n_atoms];
                m[a] = 1.0;
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::piecewise(starts, mixtures)
    }

    pub fn n_atoms(&self) -> usize {
        self.mixtures[0].len()
    }

    pub fn n_cells(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn mixtures(&self) -> &[Vec<f64>] {
        &self.mixtures
    }

    pub fn mixture_at(&self, t: f64) -> &[f64] {
        let c = self
            .starts
            .iter()
            .rposition(|&s| s <= t + 1e-12)
            .unwrap_or(0);
        &self.mixtures[c]
    }

    pub fn is_pure(&self) -> bool {
        self.mixtures
            .iter()
            .all(|m| m.iter().any(|&p| (p - 1.0).abs() < MIX_TOL))
    }

    pub fn is_time_constant(&self) -> bool {
        self.mixtures.windows(2).all(|w| w[0] == w[1])
    }

    /// Atom carrying all the mass at time `t`, if the schedule is pure there.
    pub fn pure_atom_at(&self, t: f64) -> Option<usize> {
        self.mixture_at(t)
            .iter()
            .position(|&p| (p - 1.0).abs() < MIX_TOL)
    }

    /// Schedule equality up to `tol` in every mixture entry. Cells are
    /// compared on the union of breakpoints.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if self.n_atoms() != other.n_atoms() {
            return false;
        }
        let mut times: Vec<f64> = self.starts.iter().chain(&other.starts).copied().collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.iter().all(|&t| {
            self.mixture_at(t)
                .iter()
                .zip(other.mixture_at(t))
                .all(|(a, b)| (a - b).abs() <= tol)
        })
    }
}

/// Per-particle distribution over schedules of one player.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    player: Player,
    n_atoms: usize,
    entries: Vec<Vec<(f64, RelaxedSchedule)>>,
}

impl ControlField {
    pub fn new(
        player: Player,
        n_atoms: usize,
        entries: Vec<Vec<(f64, RelaxedSchedule)>>,
    ) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            let s: f64 = e.iter().map(|c| c.0).sum();
            if e.is_empty() || e.iter().any(|c| !(c.0 > 0.0)) || (s - 1.0).abs() > MIX_TOL {
                return Err(Error::InvalidKernel(i));
            }
            if e.iter().any(|c| c.1.n_atoms() != n_atoms) {
                return Err(Error::InvalidKernel(i));
            }
        }
        Ok(Self {
            player,
            n_atoms,
            entries,
        })
    }

    /// One pure constant atom per particle.
    pub fn pure(player: Player, n_atoms: usize, atoms: &[usize]) -> Result<Self> {
        let entries = atoms
            .iter()
            .map(|&a| {
                if a >= n_atoms {
                    Err(Error::UnknownAtom {
                        atom: a,
                        size: n_atoms,
                    })
                } else {
                    Ok(vec![(1.0, RelaxedSchedule::point_mass(a, n_atoms))])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            player,
            n_atoms,
            entries,
        })
    }

    /// Constant field whose value at particle `i` is the atom distribution `dists[i]`.
    pub fn from_atom_distributions(
        player: Player,
        n_atoms: usize,
        dists: &[Vec<f64>],
    ) -> Result<Self> {
        let entries = dists
            .iter()
            .map(|d| {
                d.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(a, &p)| (p, RelaxedSchedule::point_mass(a, n_atoms)))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::new(player, n_atoms, entries)
    }

    pub fn player(&self) -> Player {
        self.player
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_particles(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<(f64, RelaxedSchedule)>] {
        &self.entries
    }

    /// Constant controls only (an element of the constant-control class).
    pub fn is_constant(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.iter().all(|(_, s)| s.is_pure() && s.is_time_constant()))
    }

    /// The atom of every particle when the field is pure and constant.
    pub fn pure_atoms(&self) -> Option<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| match e.as_slice() {
                [(_, s)] if s.is_time_constant() => s.pure_atom_at(0.0),
                _ => None,
            })
            .collect()
    }

    /// Distribution over atoms at particle `i` for a constant field.
    pub fn atom_distribution(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_atoms];
        for (w, s) in &self.entries[i] {
            for (o, p) in out.iter_mut().zip(s.mixture_at(0.0)) {
                *o += w * p;
            }
        }
        out
    }
}

/// Component of a joint distribution at one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct JointComponent {
    pub weight: f64,
    pub u: RelaxedSchedule,
    pub v: RelaxedSchedule,
}

/// Per-particle distribution over pairs of schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct JointControlField {
    entries: Vec<Vec<JointComponent>>,
    declared: Option<ControlField>,
}

impl JointControlField {
    pub fn new(entries: Vec<Vec<JointComponent>>, declared: Option<ControlField>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            let s: f64 = e.iter().map(|c| c.weight).sum();
            if e.is_empty() || e.iter().any(|c| !(c.weight > 0.0)) || (s - 1.0).abs() > MIX_TOL {
                return Err(Error::InvalidKernel(i));
            }
        }
        Ok(Self { entries, declared })
    }

    /// Pure constant joint field from per-particle atom indices.
    pub fn pure(u_atoms: &[usize], v_atoms: &[usize], n_u: usize, n_v: usize) -> Result<Self> {
        if u_atoms.len() != v_atoms.len() {
            return Err(Error::IncompleteResponse {
                particle: u_atoms.len().min(v_atoms.len()),
                component: 0,
            });
        }
        let mut entries = Vec::with_capacity(u_atoms.len());
        for (&a, &b) in u_atoms.iter().zip(v_atoms) {
            if a >= n_u {
                return Err(Error::UnknownAtom { atom: a, size: n_u });
            }
            if b >= n_v {
                return Err(Error::UnknownAtom { atom: b, size: n_v });
            }
            entries.push(vec![JointComponent {
                weight: 1.0,
                u: RelaxedSchedule::point_mass(a, n_u),
                v: RelaxedSchedule::point_mass(b, n_v),
            }]);
        }
        Ok(Self {
            entries,
            declared: None,
        })
    }

    pub fn entries(&self) -> &[Vec<JointComponent>] {
        &self.entries
    }

    pub fn n_particles(&self) -> usize {
        self.entries.len()
    }

    pub fn declared(&self) -> Option<&ControlField> {
        self.declared.as_ref()
    }

    /// Mutable access, mostly for corrupting fields in tests.
    pub fn entries_mut(&mut self) -> &mut Vec<Vec<JointComponent>> {
        &mut self.entries
    }

    /// Whether the schedules of `player` are all pure (usual, non-relaxed controls).
    pub fn is_pure_for(&self, player: Player) -> bool {
        self.entries.iter().all(|e| {
            e.iter().all(|c| match player {
                Player::First => c.u.is_pure(),
                Player::Second => c.v.is_pure(),
            })
        })
    }
}

/// Constant pure field from a total particle-to-atom assignment.
pub fn make_constant_field(
    measure: &EmpiricalMeasure,
    assignment: &[usize],
    grid: &ControlGrid,
) -> Result<ControlField> {
    if assignment.len() != measure.len() {
        return Err(Error::IncompleteResponse {
            particle: assignment.len().min(measure.len()),
            component: 0,
        });
    }
    ControlField::pure(grid.player(), grid.len(), assignment)
}

/// Mixture over schedules of the answering player, one per (particle, base component).
pub type Response = Vec<Vec<Vec<(f64, RelaxedSchedule)>>>;

/// Pair a committed field with the other player's response.
///
/// The result is consistent with `base` by construction: at every particle
/// the marginal on `base.player()` schedules equals the base distribution.
pub fn join_with_response(base: &ControlField, response: &Response) -> Result<JointControlField> {
    let mut entries = Vec::with_capacity(base.n_particles());
    for (i, comps) in base.entries().iter().enumerate() {
        let resp = response.get(i).ok_or(Error::IncompleteResponse {
            particle: i,
            component: 0,
        })?;
        let mut joint = Vec::new();
        for (a, (p, sched)) in comps.iter().enumerate() {
            let mix = resp
                .get(a)
                .filter(|m| !m.is_empty())
                .ok_or(Error::IncompleteResponse {
                    particle: i,
                    component: a,
                })?;
            let total: f64 = mix.iter().map(|m| m.0).sum();
            if (total - 1.0).abs() > MIX_TOL || mix.iter().any(|m| !(m.0 > 0.0)) {
                return Err(Error::InvalidKernel(i));
            }
            for (q, other) in mix {
                let (u, v) = match base.player() {
                    Player::First => (sched.clone(), other.clone()),
                    Player::Second => (other.clone(), sched.clone()),
                };
                joint.push(JointComponent {
                    weight: p * q,
                    u,
                    v,
                });
            }
        }
        entries.push(joint);
    }
    Ok(JointControlField {
        entries,
        declared: Some(base.clone()),
    })
}

/// Response in which particle `i` answers every base component with the pure constant atom `atoms[i]`.
pub fn pure_response(base: &ControlField, atoms: &[usize], n_other: usize) -> Result<Response> {
    if atoms.len() < base.n_particles() {
        return Err(Error::IncompleteResponse {
            particle: atoms.len(),
            component: 0,
        });
    }
    base.entries()
        .iter()
        .zip(atoms)
        .map(|(comps, &a)| {
            if a >= n_other {
                return Err(Error::UnknownAtom {
                    atom: a,
                    size: n_other,
                });
            }
            Ok(comps
                .iter()
                .map(|_| vec![(1.0, RelaxedSchedule::point_mass(a, n_other))])
                .collect())
        })
        .collect()
}

const CONSISTENCY_TOL: f64 = 1e-10;

fn group(items: impl Iterator<Item = (f64, RelaxedSchedule)>) -> Vec<(f64, RelaxedSchedule)> {
    let mut out: Vec<(f64, RelaxedSchedule)> = Vec::new();
    for (w, s) in items {
        if let Some(slot) = out.iter_mut().find(|(_, t)| t.approx_eq(&s, MIX_TOL)) {
            slot.0 += w;
        } else {
            out.push((w, s));
        }
    }
    out
}

/// Check that the declared player's marginal of `k` matches its declared field
/// at every particle. Returns false without a declared field.
pub fn validate_consistency(k: &JointControlField) -> bool {
    let Some(decl) = k.declared() else {
        return false;
    };
    if decl.n_particles() != k.n_particles() {
        return false;
    }
    k.entries().iter().zip(decl.entries()).all(|(joint, want)| {
        let got = group(joint.iter().map(|c| {
            let s = match decl.player() {
                Player::First => c.u.clone(),
                Player::Second => c.v.clone(),
            };
            (c.weight, s)
        }));
        let want = group(want.iter().cloned());
        let covered = |a: &[(f64, RelaxedSchedule)], b: &[(f64, RelaxedSchedule)]| {
            a.iter().all(|(w, s)| {
                let other: f64 = b
                    .iter()
                    .filter(|(_, t)| t.approx_eq(s, MIX_TOL))
                    .map(|(v, _)| v)
                    .sum();
                (w - other).abs() <= CONSISTENCY_TOL
            })
        };
        covered(&got, &want) && covered(&want, &got)
    })
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Exhaustive iterator over pure per-particle, per-cell atom assignments.
///
/// Items are `assignment[cell][particle]`, in lexicographic order of the
/// flattened (cell, particle) sequence.
#[derive(Debug, Clone)]
pub struct PureFieldIter {
    n_atoms: usize,
    n_particles: usize,
    digits: Vec<usize>,
    done: bool,
}

impl Iterator for PureFieldIter {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = if self.n_particles == 0 {
            Vec::new()
        } else {
            self.digits
                .chunks(self.n_particles)
                .map(|c| c.to_vec())
                .collect()
        };
        // increment, last digit fastest
        let mut pos = self.digits.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.digits[pos] += 1;
            if self.digits[pos] < self.n_atoms {
                break;
            }
            self.digits[pos] = 0;
        }
        Some(item)
    }
}

/// Size of the pure assignment space, `n_atoms^(n_particles * cells)`.
pub fn pure_field_count(n_atoms: usize, n_particles: usize, cells: usize) -> f64 {
    (n_atoms as f64).powi((n_particles * cells) as i32)
}

pub fn enumerate_pure_fields(
    grid: &ControlGrid,
    n_particles: usize,
    cells: usize,
    cap: u64,
) -> Result<PureFieldIter> {
    let size = pure_field_count(grid.len(), n_particles, cells);
    if size > cap as f64 {
        return Err(Error::SearchSpaceTooLarge { size, cap });
    }
    Ok(PureFieldIter {
        n_atoms: grid.len(),
        n_particles,
        digits: vec![0; n_particles * cells],
        done: false,
    })
}
