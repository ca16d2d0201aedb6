//! Geometry of the flat torus T^d = R^d / Z^d.
//!
//! Points are stored by their canonical representative in `[0,1)^d`. The
//! distance is the minimum-image Euclidean distance, and [`lift_pair`]
//! returns representatives in `R^d` that realize it. Ties at exactly half a
//! period are broken toward the smaller representative of the second point.

use crate::error::{Error, Result};

/// A point of the torus, canonical coordinates in `[0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

/// Representatives of two torus points that realize their torus distance.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPair {
    pub x_rep: Vec<f64>,
    pub y_rep: Vec<f64>,
    pub distance: f64,
}

#[inline]
pub(crate) fn wrap_scalar(c: f64) -> f64 {
    let w = c - c.floor();
    // c slightly below an integer can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Signed shortest displacement from `x` to `y` along one circle coordinate.
/// Result lies in `[-1/2, 1/2)`.
#[inline]
pub(crate) fn min_image(x: f64, y: f64) -> f64 {
    let diff = y - x;
    if diff >= 0.5 {
        diff - 1.0
    } else if diff < -0.5 {
        diff + 1.0
    } else {
        diff
    }
}

/// Squared torus distance between canonical coordinate slices.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = min_image(x, y);
            d * d
        })
        .sum()
}

impl TorusPoint {
    /// Reduce arbitrary real coordinates modulo 1.
    pub fn wrap(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidPoint("zero-dimensional point".into()));
        }
        if let Some(c) = raw.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidPoint(format!("non-finite coordinate {c}")));
        }
        Ok(Self {
            coords: raw.iter().map(|&c| wrap_scalar(c)).collect(),
        })
    }

    /// Build from coordinates already known to be finite; wraps anyway.
    pub(crate) fn from_raw_unchecked(raw: &[f64]) -> Self {
        Self {
            coords: raw.iter().map(|&c| wrap_scalar(c)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// The point moved by `delta` in the covering space, then wrapped.
    pub fn translate(&self, delta: &[f64]) -> Result<Self> {
        check_dims(self.dim(), delta.len())?;
        let moved: Vec<f64> = self.coords.iter().zip(delta).map(|(c, d)| c + d).collect();
        Self::wrap(&moved)
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimError { expected, got })
    } else {
        Ok(())
    }
}

pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(sq_dist(&x.coords, &y.coords).sqrt())
}

/// Representatives `x' = x` and `y'` nearest to it, so that `|x' - y'|`
/// equals the torus distance.
pub fn lift_pair(x: &TorusPoint, y: &TorusPoint) -> Result<LiftedPair> {
    check_dims(x.dim(), y.dim())?;
    let y_rep: Vec<f64> = x
        .coords
        .iter()
        .zip(&y.coords)
        .map(|(&a, &b)| a + min_image(a, b))
        .collect();
    let distance = x
        .coords
        .iter()
        .zip(&y_rep)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(LiftedPair {
        x_rep: x.coords.clone(),
        y_rep,
        distance,
    })
}

/// `x' - y'` for the lifted pair, computed without allocating the pair.
pub(crate) fn lifted_difference(x: &[f64], y: &[f64], out: &mut [f64]) {
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
        *o = -min_image(a, b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: &[f64]) -> TorusPoint {
        TorusPoint::wrap(c).unwrap()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(p(&[1.25]).coords(), &[0.25]);
        let q = p(&[-0.1, 2.0]);
        assert!((q.coords()[0] - 0.9).abs() < 1e-15);
        assert_eq!(q.coords()[1], 0.0);
        assert_eq!(p(&[0.5]).coords(), &[0.5]);
        assert_eq!(p(&[-1e-18]).coords(), &[0.0]);
    }

    #[test]
    fn wrap_rejects_nan() {
        assert!(matches!(
            TorusPoint::wrap(&[f64::NAN]),
            Err(Error::InvalidPoint(_))
        ));
        assert!(matches!(
            TorusPoint::wrap(&[0.1, f64::INFINITY]),
            Err(Error::InvalidPoint(_))
        ));
    }

    /// Brute-force minimum over integer shifts in {-1,0,1}^d.
    fn enum_dist(x: &[f64], y: &[f64]) -> f64 {
        let d = x.len();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(d as u32) {
            let mut c = code;
            let mut s = 0.0;
            for i in 0..d {
                let k = (c % 3) as f64 - 1.0;
                c /= 3;
                let diff = x[i] - (y[i] + k);
                s += diff * diff;
            }
            best = best.min(s.sqrt());
        }
        best
    }

    #[test]
    fn distance_examples() {
        assert!((torus_distance(&p(&[0.1]), &p(&[0.9])).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(
            torus_distance(&p(&[0.3, 0.4]), &p(&[0.3, 0.4])).unwrap(),
            0.0
        );
        let a = [0.1, 0.2];
        let b = [0.8, 0.9];
        let oracle = enum_dist(&a, &b);
        assert!((oracle - 0.424_264_068_7).abs() < 1e-9);
        assert!((torus_distance(&p(&a), &p(&b)).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch() {
        assert!(matches!(
            torus_distance(&p(&[0.1]), &p(&[0.1, 0.2])),
            Err(Error::DimError { .. })
        ));
        assert!(lift_pair(&p(&[0.1]), &p(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn lift_examples() {
        let l = lift_pair(&p(&[0.1]), &p(&[0.9])).unwrap();
        assert_eq!(l.x_rep, vec![0.1]);
        assert!((l.y_rep[0] + 0.1).abs() < 1e-12);
        assert!((l.distance - 0.2).abs() < 1e-12);

        let l = lift_pair(&p(&[0.4, 0.7]), &p(&[0.4, 0.7])).unwrap();
        assert_eq!(l.x_rep, l.y_rep);
        assert_eq!(l.distance, 0.0);

        // both shifts tie at 0.5; the smaller representative wins
        let tie_a = (0.25f64 - 0.75).abs();
        let tie_b = (0.25f64 - (-0.25)).abs();
        assert_eq!(tie_a, tie_b);
        let l = lift_pair(&p(&[0.25]), &p(&[0.75])).unwrap();
        assert_eq!(l.y_rep, vec![-0.25]);
        assert!((l.distance - 0.5).abs() < 1e-15);
        let l = lift_pair(&p(&[0.75]), &p(&[0.25])).unwrap();
        assert_eq!(l.y_rep, vec![0.25]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pt(d: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, d)
        }

        proptest! {
            #[test]
            fn metric_axioms(d in 1usize..4, seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut draw = || p(&(0..d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
                let (x, y, z) = (draw(), draw(), draw());
                let dxy = torus_distance(&x, &y).unwrap();
                let dyx = torus_distance(&y, &x).unwrap();
                let dxz = torus_distance(&x, &z).unwrap();
                let dzy = torus_distance(&z, &y).unwrap();
                prop_assert!(dxy >= 0.0);
                prop_assert!((dxy - dyx).abs() <= 1e-12);
                prop_assert!(dxy <= dxz + dzy + 1e-12);
                prop_assert!(dxy <= (d as f64).sqrt() / 2.0 + 1e-12);
                prop_assert!((dxy - enum_dist(x.coords(), y.coords())).abs() < 1e-12);
            }

            #[test]
            fn lift_differences_bounded(x in pt(3), y in pt(3)) {
                let l = lift_pair(&p(&x), &p(&y)).unwrap();
                for (a, b) in l.x_rep.iter().zip(&l.y_rep) {
                    prop_assert!((a - b).abs() <= 0.5);
                }
                let back = TorusPoint::wrap(&l.y_rep).unwrap();
                prop_assert!(torus_distance(&back, &p(&y)).unwrap() < 1e-12);
                prop_assert!((l.distance - torus_distance(&p(&x), &p(&y)).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn shift_invariance(x in pt(2), y in pt(2), c in proptest::collection::vec(-3.0f64..3.0, 2)) {
                let d0 = torus_distance(&p(&x), &p(&y)).unwrap();
                let d1 = torus_distance(&p(&x).translate(&c).unwrap(), &p(&y).translate(&c).unwrap()).unwrap();
                prop_assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }
}
