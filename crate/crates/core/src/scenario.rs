//! Game scenarios: dynamics `f`, terminal payoff `g`, control grids, horizon
//! and regularity constants, plus the TOML configuration format.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlGrid, Player};
use crate::error::{Error, Result};
use crate::measure::{w2_squared, EmpiricalMeasure};
use crate::torus::{min_image, TorusPoint};

/// Borrowed particle cloud in flat layout: particle `i` occupies
/// `coords[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, Copy)]
pub struct MeasureView<'a> {
    pub dim: usize,
    pub coords: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> MeasureView<'a> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_measure(&self) -> EmpiricalMeasure {
        let points = (0..self.len())
            .map(|i| TorusPoint::from_raw_unchecked(self.point(i)))
            .collect();
        EmpiricalMeasure::from_parts_unchecked(self.dim, points, self.weights.to_vec())
    }
}

/// Flat coordinates and weights of a measure.
pub fn flatten(m: &EmpiricalMeasure) -> (Vec<f64>, Vec<f64>) {
    let coords = m
        .points()
        .iter()
        .flat_map(|p| p.coords().iter().copied())
        .collect();
    (coords, m.weights().to_vec())
}

/// Nondecreasing modulus of continuity vanishing at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulus {
    Zero,
    Linear { slope: f64 },
    Holder { coef: f64, exponent: f64 },
}

impl Modulus {
    pub fn eval(&self, delta: f64) -> f64 {
        let d = delta.abs();
        match *self {
            Modulus::Zero => 0.0,
            Modulus::Linear { slope } => slope * d,
            Modulus::Holder { coef, exponent } => coef * d.powf(exponent),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Modulus::Zero => true,
            Modulus::Linear { slope } => slope >= 0.0 && slope.is_finite(),
            Modulus::Holder { coef, exponent } => coef >= 0.0 && coef.is_finite() && exponent > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid modulus {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Declared,
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConstants {
    pub c0: f64,
    pub lipschitz: f64,
    pub omega_f: Modulus,
    pub omega_g: Modulus,
    pub provenance: Provenance,
}

impl ScenarioConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 >= 0.0
            && self.c0.is_finite()
            && self.lipschitz >= 0.0
            && self.lipschitz.is_finite())
        {
            return Err(Error::Config(
                "constants must be finite and nonnegative".into(),
            ));
        }
        self.omega_f.validate()?;
        self.omega_g.validate()
    }
}

/// Velocity field `f(t, x, m, u, v)`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn velocity(
        &self,
        t: f64,
        x: &[f64],
        m: &MeasureView<'_>,
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    );

    /// Known `(C0, L, omega_f)` for the given grids.
    fn analytic_constants(
        &self,
        _dim: usize,
        _grid_u: &ControlGrid,
        _grid_v: &ControlGrid,
    ) -> Option<(f64, f64, Modulus)> {
        None
    }
}

/// Terminal payoff `g(m)`.
pub trait Payoff: Send + Sync + fmt::Debug {
    fn eval(&self, m: &EmpiricalMeasure) -> f64;

    fn modulus(&self, _dim: usize) -> Option<Modulus> {
        None
    }
}

fn max_pair_norm(grid_u: &ControlGrid, grid_v: &ControlGrid, base: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for u in grid_u.atoms() {
        for v in grid_v.atoms() {
            let n: f64 = base
                .iter()
                .zip(u)
                .zip(v)
                .map(|((b, a), c)| (b + a + c) * (b + a + c))
                .sum::<f64>()
                .sqrt();
            best = best.max(n);
        }
    }
    best
}

fn max_norm(grid: &ControlGrid) -> f64 {
    grid.atoms()
        .iter()
        .map(|a| a.iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `f = drift + u + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLinear {
    pub drift: Vec<f64>,
}

impl Dynamics for SplitLinear {
    fn velocity(
        &self,
        _t: f64,
        _x: &[f64],
        _m: &MeasureView<'_>,
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.drift[k] + u[k] + v[k];
        }
    }

    fn analytic_constants(
        &self,
        _dim: usize,
        gu: &ControlGrid,
        gv: &ControlGrid,
    ) -> Option<(f64, f64, Modulus)> {
        Some((max_pair_norm(gu, gv, &self.drift), 0.0, Modulus::Zero))
    }
}

/// `S(x, m)_k = sum_j w_j sin(2 pi (y_jk - x_k)) / (2 pi)`, a smooth periodic pull
/// toward the mass of `m`.
fn attraction(x: &[f64], m: &MeasureView<'_>, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..m.len() {
        let y = m.point(j);
        let w = m.weights[j];
        for k in 0..out.len() {
            out[k] += w * (2.0 * PI * (y[k] - x[k])).sin() / (2.0 * PI);
        }
    }
}

/// `f = kappa * S(x, m) + u + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterAttraction {
    pub kappa: f64,
}

impl Dynamics for BarycenterAttraction {
    fn velocity(
        &self,
        _t: f64,
        x: &[f64],
        m: &MeasureView<'_>,
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) {
        attraction(x, m, out);
        for k in 0..out.len() {
            out[k] = self.kappa * out[k] + u[k] + v[k];
        }
    }

    fn analytic_constants(
        &self,
        dim: usize,
        gu: &ControlGrid,
        gv: &ControlGrid,
    ) -> Option<(f64, f64, Modulus)> {
        let c0 = self.kappa.abs() * (dim as f64).sqrt() / (2.0 * PI)
            + max_pair_norm(gu, gv, &vec![0.0; dim]);
        Some((c0, self.kappa.abs(), Modulus::Zero))
    }
}

/// Planar pursuit on the 2-torus: attraction plus a rotating wind,
/// `f = kappa * S(x, m) + lambda * (cos 2 pi t, sin 2 pi t) + u + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PursuitCircle {
    pub kappa: f64,
    pub lambda: f64,
}

impl Dynamics for PursuitCircle {
    fn velocity(
        &self,
        t: f64,
        x: &[f64],
        m: &MeasureView<'_>,
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) {
        attraction(x, m, out);
        let wind = [(2.0 * PI * t).cos(), (2.0 * PI * t).sin()];
        for k in 0..out.len() {
            out[k] = self.kappa * out[k] + self.lambda * wind[k] + u[k] + v[k];
        }
    }

    fn analytic_constants(
        &self,
        dim: usize,
        gu: &ControlGrid,
        gv: &ControlGrid,
    ) -> Option<(f64, f64, Modulus)> {
        let c0 = self.kappa.abs() * (dim as f64).sqrt() / (2.0 * PI)
            + self.lambda.abs()
            + max_norm(gu)
            + max_norm(gv);
        Some((
            c0,
            self.kappa.abs(),
            Modulus::Linear {
                slope: 2.0 * PI * self.lambda.abs(),
            },
        ))
    }
}

/// `g(m) = W2^2(m, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct W2ToTarget {
    pub target: EmpiricalMeasure,
}

impl Payoff for W2ToTarget {
    fn eval(&self, m: &EmpiricalMeasure) -> f64 {
        w2_squared(m, &self.target).expect("payoff target has the scenario dimension")
    }

    fn modulus(&self, dim: usize) -> Option<Modulus> {
        Some(Modulus::Linear {
            slope: (dim as f64).sqrt(),
        })
    }
}

/// Frechet variance on the torus: `g(m) = min_c W2^2(m, delta_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spread;

/// Minimum over `c` of `sum_i w_i d(x_i, c)^2` on the circle.
fn circle_variance(xs: &mut [(f64, f64)]) -> f64 {
    xs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total_w: f64 = xs.iter().map(|p| p.1).sum();
    let base: f64 = xs.iter().map(|(x, w)| x * w).sum();
    let cost = |c: f64| -> f64 {
        xs.iter()
            .map(|&(x, w)| {
                let d = min_image(c, x);
                w * d * d
            })
            .sum()
    };
    let mut best = f64::INFINITY;
    let mut shifted = 0.0;
    // candidate j: the first j sorted points lifted by +1
    for j in 0..xs.len() {
        if j > 0 {
            shifted += xs[j - 1].1;
        }
        let mean = (base + shifted) / total_w;
        best = best.min(cost(mean - mean.floor()));
    }
    best
}

impl Payoff for Spread {
    fn eval(&self, m: &EmpiricalMeasure) -> f64 {
        let mut total = 0.0;
        let mut xs: Vec<(f64, f64)> = Vec::with_capacity(m.len());
        for k in 0..m.dim() {
            xs.clear();
            xs.extend(
                m.points()
                    .iter()
                    .zip(m.weights())
                    .map(|(p, &w)| (p.coords()[k], w)),
            );
            total += circle_variance(&mut xs);
        }
        total
    }

    fn modulus(&self, dim: usize) -> Option<Modulus> {
        Some(Modulus::Linear {
            slope: (dim as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsConfig {
    SplitLinear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Vec<f64>>,
    },
    BarycenterAttraction {
        kappa: f64,
    },
    PursuitCircle {
        kappa: f64,
        lambda: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    W2ToTarget { target: Vec<Vec<f64>> },
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    pub c0: f64,
    pub lipschitz: f64,
    pub omega_f: Modulus,
    pub omega_g: Modulus,
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub horizon: f64,
    pub grid_u: Vec<Vec<f64>>,
    pub grid_v: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
    pub dynamics: DynamicsConfig,
    pub payoff: PayoffConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsConfig>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Hex SHA-256 of the normalized TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A complete game description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dim: usize,
    pub horizon: f64,
    pub grid_u: ControlGrid,
    pub grid_v: ControlGrid,
    pub dynamics: Arc<dyn Dynamics>,
    pub payoff: Arc<dyn Payoff>,
    pub declared: Option<ScenarioConstants>,
    pub initial: Option<EmpiricalMeasure>,
    hash: String,
}

impl Scenario {
    pub fn new(
        dim: usize,
        horizon: f64,
        grid_u: ControlGrid,
        grid_v: ControlGrid,
        dynamics: Arc<dyn Dynamics>,
        payoff: Arc<dyn Payoff>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("invalid horizon {horizon}")));
        }
        for g in [&grid_u, &grid_v] {
            if g.atom(0).len() != dim {
                return Err(Error::DimError {
                    expected: dim,
                    got: g.atom(0).len(),
                });
            }
        }
        if grid_u.player() != Player::First || grid_v.player() != Player::Second {
            return Err(Error::Config("grid players swapped".into()));
        }
        let hash = format!(
            "{dim}|{horizon}|{:?}|{:?}|{dynamics:?}|{payoff:?}",
            grid_u.atoms(),
            grid_v.atoms()
        );
        let hash = Sha256::digest(hash.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Self {
            dim,
            horizon,
            grid_u,
            grid_v,
            dynamics,
            payoff,
            declared: None,
            initial: None,
            hash,
        })
    }

    pub fn with_constants(mut self, c: ScenarioConstants) -> Result<Self> {
        c.validate()?;
        self.declared = Some(c);
        Ok(self)
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        let d = cfg.dim;
        let grid_u = ControlGrid::new(Player::First, cfg.grid_u.clone())?;
        let grid_v = ControlGrid::new(Player::Second, cfg.grid_v.clone())?;
        let dynamics: Arc<dyn Dynamics> = match &cfg.dynamics {
            DynamicsConfig::SplitLinear { drift } => {
                let drift = drift.clone().unwrap_or_else(|| vec![0.0; d]);
                if drift.len() != d {
                    return Err(Error::DimError {
                        expected: d,
                        got: drift.len(),
                    });
                }
                Arc::new(SplitLinear { drift })
            }
            DynamicsConfig::BarycenterAttraction { kappa } => {
                Arc::new(BarycenterAttraction { kappa: *kappa })
            }
            DynamicsConfig::PursuitCircle { kappa, lambda } => {
                if d != 2 {
                    return Err(Error::Config("pursuit_circle needs dim = 2".into()));
                }
                Arc::new(PursuitCircle {
                    kappa: *kappa,
                    lambda: *lambda,
                })
            }
        };
        let payoff: Arc<dyn Payoff> = match &cfg.payoff {
            PayoffConfig::W2ToTarget { target } => {
                let target = EmpiricalMeasure::from_coords(target)?;
                if target.dim() != d {
                    return Err(Error::DimError {
                        expected: d,
                        got: target.dim(),
                    });
                }
                Arc::new(W2ToTarget { target })
            }
            PayoffConfig::Spread => Arc::new(Spread),
        };
        let mut sc = Scenario::new(d, cfg.horizon, grid_u, grid_v, dynamics, payoff)?;
        if let Some(c) = &cfg.constants {
            sc = sc.with_constants(ScenarioConstants {
                c0: c.c0,
                lipschitz: c.lipschitz,
                omega_f: c.omega_f,
                omega_g: c.omega_g,
                provenance: Provenance::Declared,
            })?;
        }
        if let Some(init) = &cfg.initial {
            let m = EmpiricalMeasure::from_coords(init)?;
            if m.dim() != d {
                return Err(Error::DimError {
                    expected: d,
                    got: m.dim(),
                });
            }
            sc.initial = Some(m);
        }
        sc.hash = cfg.hash();
        Ok(sc)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_config(&ScenarioConfig::from_toml(text)?)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Declared constants, else the analytic ones of the built-in dynamics and payoff.
    pub fn constants(&self) -> Result<ScenarioConstants> {
        if let Some(c) = self.declared {
            return Ok(c);
        }
        let (c0, lipschitz, omega_f) = self
            .dynamics
            .analytic_constants(self.dim, &self.grid_u, &self.grid_v)
            .ok_or_else(|| Error::Config("no constants declared for custom dynamics".into()))?;
        let omega_g = self
            .payoff
            .modulus(self.dim)
            .ok_or_else(|| Error::Config("no modulus declared for custom payoff".into()))?;
        Ok(ScenarioConstants {
            c0,
            lipschitz,
            omega_f,
            omega_g,
            provenance: Provenance::Analytic,
        })
    }

    pub fn payoff(&self, m: &EmpiricalMeasure) -> f64 {
        self.payoff.eval(m)
    }

    pub fn velocity(
        &self,
        t: f64,
        x: &[f64],
        m: &MeasureView<'_>,
        u: &[f64],
        v: &[f64],
        out: &mut [f64],
    ) {
        self.dynamics.velocity(t, x, m, u, v, out)
    }
}
