//! Poincaré-ball geometry.
//!
//! Everything here works on plain `f64` slices and owned points; the
//! differentiable counterparts used by the losses live in
//! [`crate::tensorgrad::hyperbolic`] and are built from tape primitives.
//!
//! The ball of curvature `-c` is `{ x : c‖x‖² < 1 }`. Points closer than
//! [`BALL_EPS`] to the boundary (in units of the ball radius `1/√c`) are
//! pulled back in by [`project_to_ball`].

use crate::error::{Error, Result};

/// Relative distance kept from the ball boundary.
pub const BALL_EPS: f64 = 1e-5;
/// Floor used for divisions by norms and similar denominators.
pub const DENOM_EPS: f64 = 1e-15;
/// Norm below which a point is treated as the origin (angles, apertures).
pub const NORM_EPS: f64 = 1e-5;

/// Curvature magnitude `c > 0`; the manifold has sectional curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::OutOfRange(format!("curvature must be finite and > 0, got {c}")));
        }
        Ok(Curvature(c))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest Euclidean norm a projected point may have.
    #[inline]
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

/// A point strictly inside the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
    c: Curvature,
}

/// A tangent vector attached to a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base: PoincarePoint,
}

impl PoincarePoint {
    /// Wraps `coords` after checking they are finite and strictly inside the ball.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        check_finite(&coords, "point")?;
        let sq = c.value() * norm_sq(&coords);
        if sq >= 1.0 {
            return Err(Error::OutOfRange(format!(
                "point lies outside the ball (c·‖x‖² = {sq})"
            )));
        }
        Ok(PoincarePoint { coords, c })
    }

    pub fn origin(dim: usize, c: Curvature) -> Self {
        PoincarePoint {
            coords: vec![0.0; dim],
            c,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, base: PoincarePoint) -> Result<Self> {
        check_finite(&coords, "tangent vector")?;
        if coords.len() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: coords.len(),
            });
        }
        Ok(TangentVector { coords, base })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base(&self) -> &PoincarePoint {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_pair(x: &PoincarePoint, y: &PoincarePoint) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    if x.c != y.c {
        return Err(Error::CurvatureMismatch(x.c.value(), y.c.value()));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Clamped inverse hyperbolic tangent; the argument never reaches 1.
#[inline]
pub(crate) fn artanh_clamped(u: f64) -> f64 {
    let u = u.clamp(-(1.0 - BALL_EPS), 1.0 - BALL_EPS);
    0.5 * ((1.0 + u) / (1.0 - u)).ln()
}

/// Möbius addition on raw coordinates, without projection.
pub(crate) fn mobius_add_raw(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = (1.0 + 2.0 * c * xy + c * c * x2 * y2).max(DENOM_EPS);
    x.iter()
        .zip(y)
        .map(|(xi, yi)| (a * xi + b * yi) / den)
        .collect()
}

/// Rescales `x` onto the ball of radius `(1-ε)/√c` if it lies outside it.
pub(crate) fn project_raw(x: &mut [f64], c: Curvature) {
    let max = c.max_norm();
    let n = norm_sq(x).sqrt();
    if n > max {
        let s = max / n;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// Projects an arbitrary finite vector into the open ball.
///
/// Vectors with `c‖x‖² < (1-ε)²` come back unchanged; anything further
/// out is rescaled to norm `(1-ε)/√c`.
pub fn project_to_ball(x: &[f64], c: Curvature) -> Result<PoincarePoint> {
    check_finite(x, "projection input")?;
    let mut coords = x.to_vec();
    project_raw(&mut coords, c);
    Ok(PoincarePoint { coords, c })
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &PoincarePoint, y: &PoincarePoint) -> Result<PoincarePoint> {
    check_pair(x, y)?;
    let mut out = mobius_add_raw(&x.coords, &y.coords, x.c.value());
    check_finite(&out, "mobius_add result")?;
    project_raw(&mut out, x.c);
    Ok(PoincarePoint { coords: out, c: x.c })
}

/// `λ_c(x) = 2 / (1 - c‖x‖²)`.
pub fn conformal_factor(x: &PoincarePoint) -> f64 {
    2.0 / (1.0 - x.c.value() * norm_sq(&x.coords)).max(DENOM_EPS)
}

/// Exponential map `exp_x(v) = x ⊕ tanh(√c λ_x ‖v‖ / 2) v / (√c ‖v‖)`.
pub fn exp_map(v: &TangentVector) -> Result<PoincarePoint> {
    let x = &v.base;
    let vn = v.norm();
    if vn == 0.0 {
        return Ok(x.clone());
    }
    let sc = x.c.sqrt();
    let lambda = conformal_factor(x);
    let s = (sc * lambda * vn / 2.0).tanh() / (sc * vn);
    let step: Vec<f64> = v.coords.iter().map(|vi| s * vi).collect();
    let mut out = mobius_add_raw(&x.coords, &step, x.c.value());
    check_finite(&out, "exp_map result")?;
    project_raw(&mut out, x.c);
    Ok(PoincarePoint { coords: out, c: x.c })
}

/// Exponential map at the origin applied to raw coordinates, then projected.
pub fn exp_map_origin(v: &[f64], c: Curvature) -> Result<PoincarePoint> {
    let base = PoincarePoint::origin(v.len(), c);
    exp_map(&TangentVector::new(v.to_vec(), base)?)
}

/// Logarithmic map, the inverse of [`exp_map`] at `x`.
pub fn log_map(x: &PoincarePoint, y: &PoincarePoint) -> Result<TangentVector> {
    check_pair(x, y)?;
    let c = x.c.value();
    let sc = x.c.sqrt();
    let neg_x: Vec<f64> = x.coords.iter().map(|v| -v).collect();
    let u = mobius_add_raw(&neg_x, &y.coords, c);
    let un = norm_sq(&u).sqrt();
    if un == 0.0 {
        return TangentVector::new(vec![0.0; x.dim()], x.clone());
    }
    let lambda = conformal_factor(x);
    let s = 2.0 / (sc * lambda) * artanh_clamped(sc * un) / un;
    TangentVector::new(u.iter().map(|ui| s * ui).collect(), x.clone())
}

/// Geodesic distance `d(x, y) = 2/√c · artanh(√c ‖-x ⊕ y‖)`.
pub fn poincare_distance(x: &PoincarePoint, y: &PoincarePoint) -> Result<f64> {
    check_pair(x, y)?;
    Ok(distance_raw(&x.coords, &y.coords, x.c))
}

pub(crate) fn distance_raw(x: &[f64], y: &[f64], c: Curvature) -> f64 {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let u = mobius_add_raw(&neg_x, y, c.value());
    2.0 / c.sqrt() * artanh_clamped(c.sqrt() * norm_sq(&u).sqrt())
}

/// Distance from the origin, `2/√c · artanh(√c ‖x‖)`.
pub fn distance_from_origin(x: &PoincarePoint) -> f64 {
    distance_from_origin_raw(&x.coords, x.c)
}

fn distance_from_origin_raw(x: &[f64], c: Curvature) -> f64 {
    2.0 / c.sqrt() * artanh_clamped(c.sqrt() * norm_sq(x).sqrt())
}

/// Exterior angle of the entailment cone at `x` toward `y`, in `[0, π]`.
///
/// Evaluated as `atan2(r·β·(1 - r²), N)` on `√c`-rescaled coordinates, where
/// `r = ‖x‖`, `β` is the length of the component of `y` orthogonal to `x`
/// and `N` is the usual cosine numerator. This equals the arccos form
/// exactly but stays accurate for nearly radial pairs, where arccos loses
/// half of its digits. Returns 0 when `‖x‖` or `‖x − y‖` is below [`NORM_EPS`].
pub fn exterior_angle(x: &PoincarePoint, y: &PoincarePoint) -> Result<f64> {
    check_pair(x, y)?;
    Ok(exterior_angle_raw(&x.coords, &y.coords, x.c))
}

pub(crate) fn exterior_angle_raw(x: &[f64], y: &[f64], c: Curvature) -> f64 {
    let sc = c.sqrt();
    let x2 = c.value() * norm_sq(x);
    let r = x2.sqrt();
    let diff_sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if r <= NORM_EPS || sc * diff_sq.sqrt() <= NORM_EPS {
        return 0.0;
    }
    let xy = c.value() * dot(x, y);
    let y2 = c.value() * norm_sq(y);
    let numer = xy * (1.0 + x2) - x2 * (1.0 + y2);
    // component of y orthogonal to x (in rescaled coordinates)
    let k = xy / x2;
    let perp_sq: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let p = sc * b - k * sc * a;
            p * p
        })
        .sum();
    let sin_part = r * perp_sq.sqrt() * (1.0 - x2);
    sin_part.atan2(numer)
}

/// Half-aperture `α(x) = arcsin(K(1 - c‖x‖²) / (√c‖x‖))`, clamped to `π/2`.
pub fn aperture(x: &PoincarePoint, k: f64) -> Result<f64> {
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::OutOfRange(format!("aperture constant must be > 0, got {k}")));
    }
    Ok(aperture_raw(&x.coords, k, x.c))
}

pub(crate) fn aperture_raw(x: &[f64], k: f64, c: Curvature) -> f64 {
    let r = c.sqrt() * norm_sq(x).sqrt();
    if r <= NORM_EPS {
        return std::f64::consts::FRAC_PI_2;
    }
    let arg = k * (1.0 - r * r) / r;
    arg.clamp(-1.0, 1.0).asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: &[f64]) -> PoincarePoint {
        PoincarePoint::new(v.to_vec(), Curvature::default()).unwrap()
    }

    fn pc(v: &[f64], c: f64) -> PoincarePoint {
        PoincarePoint::new(v.to_vec(), Curvature::new(c).unwrap()).unwrap()
    }

    #[test]
    fn mobius_identities() {
        let x = p(&[0.3, 0.0]);
        let o = p(&[0.0, 0.0]);
        assert_eq!(mobius_add(&x, &o).unwrap(), x);
        assert_eq!(mobius_add(&o, &p(&[0.4, 0.0])).unwrap(), p(&[0.4, 0.0]));
    }

    #[test]
    fn mobius_collinear_matches_tanh_addition() {
        let z = mobius_add(&p(&[0.3, 0.0]), &p(&[0.4, 0.0])).unwrap();
        let expected = (0.3f64.atanh() + 0.4f64.atanh()).tanh();
        assert!((z.coords()[0] - expected).abs() < 1e-15);
        assert!((z.coords()[0] - 0.625).abs() < 1e-12);
        assert_eq!(z.coords()[1], 0.0);
    }

    #[test]
    fn mobius_rejects_mismatches() {
        assert!(matches!(
            mobius_add(&p(&[0.1, 0.0]), &p(&[0.1])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            mobius_add(&p(&[0.1]), &pc(&[0.1], 2.0)),
            Err(Error::CurvatureMismatch(..))
        ));
        assert!(PoincarePoint::new(vec![f64::NAN], Curvature::default()).is_err());
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::INFINITY).is_err());
    }

    #[test]
    fn conformal_factor_values() {
        assert_eq!(conformal_factor(&p(&[0.0, 0.0])), 2.0);
        assert!((conformal_factor(&p(&[0.5, 0.0])) - 8.0 / 3.0).abs() < 1e-15);
        let edge = project_to_ball(&[5.0, 0.0], Curvature::default()).unwrap();
        let lam = conformal_factor(&edge);
        assert!(lam.is_finite() && lam > 1e4);
    }

    #[test]
    fn exp_and_log_at_origin() {
        let o = p(&[0.0, 0.0]);
        let zero = TangentVector::new(vec![0.0, 0.0], o.clone()).unwrap();
        assert_eq!(exp_map(&zero).unwrap(), o);
        let v = TangentVector::new(vec![1.0, 0.0], o.clone()).unwrap();
        let y = exp_map(&v).unwrap();
        assert!((y.coords()[0] - 1f64.tanh()).abs() < 1e-15);
        assert!((y.coords()[0] - 0.761594).abs() < 1e-6);
        let back = log_map(&o, &y).unwrap();
        assert!((back.coords()[0] - 1.0).abs() < 1e-12);
        assert_eq!(back.coords()[1], 0.0);
        let x = p(&[0.2, 0.0]);
        assert_eq!(log_map(&x, &x).unwrap().coords(), &[0.0, 0.0]);
    }

    #[test]
    fn exp_map_rejects_foreign_tangent() {
        let o = p(&[0.0, 0.0]);
        assert!(TangentVector::new(vec![1.0], o).is_err());
    }

    #[test]
    fn distance_examples() {
        let z = PoincarePoint::new(vec![0.4, 0.0], Curvature::default()).unwrap();
        assert!((distance_from_origin(&z) - 0.847298).abs() < 1e-6);

        let o = p(&[0.0, 0.0]);
        let d = poincare_distance(&o, &p(&[0.5, 0.0])).unwrap();
        assert!((d - 3f64.ln()).abs() < 1e-12);
        let x = p(&[0.3, 0.0]);
        assert_eq!(poincare_distance(&x, &x).unwrap(), 0.0);
        let d = poincare_distance(&x, &p(&[0.4, 0.0])).unwrap();
        let expected = 2.0 * 0.4f64.atanh() - 2.0 * 0.3f64.atanh();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 0.228259).abs() < 1e-6);
    }

    #[test]
    fn exterior_angle_examples() {
        assert!(exterior_angle(&p(&[0.2, 0.0]), &p(&[0.6, 0.0])).unwrap().abs() < 1e-15);
        let th = exterior_angle(&p(&[0.5, 0.0]), &p(&[0.0, 0.5])).unwrap();
        // arccos reference for a non-degenerate pair
        let reference = (-0.3125f64 / (0.5 * 0.5f64.sqrt() * 1.0625f64.sqrt())).acos();
        assert!((th - reference).abs() < 1e-12);
        assert!((th - 2.601173).abs() < 1e-6);
        let x = p(&[0.3, 0.1]);
        assert_eq!(exterior_angle(&x, &x).unwrap(), 0.0);
        assert_eq!(exterior_angle(&p(&[0.0, 0.0]), &x).unwrap(), 0.0);
    }

    #[test]
    fn aperture_examples() {
        let a = aperture(&p(&[0.5, 0.0]), 0.1).unwrap();
        assert!((a - 0.15f64.asin()).abs() < 1e-15);
        assert!((a - 0.150568).abs() < 1e-6);
        let a = aperture(&p(&[0.05, 0.0]), 0.1).unwrap();
        assert_eq!(a, std::f64::consts::FRAC_PI_2);
        assert_eq!(aperture(&p(&[0.0, 0.0]), 0.1).unwrap(), std::f64::consts::FRAC_PI_2);
        let edge = project_to_ball(&[1.0, 0.0], Curvature::default()).unwrap();
        let a = aperture(&edge, 0.1).unwrap();
        assert!(a > 0.0 && a < 1e-5);
        assert!(aperture(&edge, 0.0).is_err());
    }

    #[test]
    fn projection_examples() {
        let c = Curvature::default();
        assert_eq!(project_to_ball(&[0.3, 0.0], c).unwrap().coords(), &[0.3, 0.0]);
        let q = project_to_ball(&[2.0, 0.0], c).unwrap();
        assert!((q.coords()[0] - 0.99999).abs() < 1e-15);
        assert_eq!(project_to_ball(&[0.0, 0.0], c).unwrap().coords(), &[0.0, 0.0]);
        assert!(project_to_ball(&[f64::NAN], c).is_err());
    }

    fn ball_vec(dim: usize, c: f64) -> impl Strategy<Value = Vec<f64>> {
        let r = 0.9 / c.sqrt();
        prop::collection::vec(-1.0f64..1.0, dim).prop_map(move |v| {
            let n = norm_sq(&v).sqrt().max(1e-12);
            let scale = if n > 1.0 { r / n } else { r };
            v.iter().map(|x| x * scale).collect()
        })
    }

    proptest! {
        #[test]
        fn distance_grows_along_rays(v in ball_vec(3, 1.0), s in 0.05f64..0.95) {
            let c = Curvature::default();
            let o = PoincarePoint::origin(3, c);
            let outer = PoincarePoint::new(v.clone(), c).unwrap();
            let inner = PoincarePoint::new(v.iter().map(|x| x * s).collect(), c).unwrap();
            prop_assume!(outer.norm() > 1e-3);
            let d_in = poincare_distance(&o, &inner).unwrap();
            let d_out = poincare_distance(&o, &outer).unwrap();
            prop_assert!(d_in < d_out);
            // geodesics through the origin are straight lines
            let d_mid = poincare_distance(&inner, &outer).unwrap();
            prop_assert!((d_out - d_in - d_mid).abs() < 1e-9);
        }

        #[test]
        fn aperture_shrinks_toward_boundary(r1 in 0.06f64..0.98, r2 in 0.06f64..0.98) {
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assume!(hi - lo > 1e-6);
            let a_lo = aperture(&p(&[lo, 0.0]), 0.1).unwrap();
            let a_hi = aperture(&p(&[hi, 0.0]), 0.1).unwrap();
            prop_assert!(a_hi <= a_lo);
            prop_assert!(a_hi > 0.0 && a_lo <= std::f64::consts::FRAC_PI_2);
        }

        #[test]
        fn exp_log_roundtrip(x in ball_vec(4, 2.0), y in ball_vec(4, 2.0)) {
            let c = Curvature::new(2.0).unwrap();
            let x = PoincarePoint::new(x, c).unwrap();
            let y = PoincarePoint::new(y, c).unwrap();
            let back = exp_map(&log_map(&x, &y).unwrap()).unwrap();
            for (a, b) in back.coords().iter().zip(y.coords()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
