//! Row-wise Poincaré-ball operations recorded on a [`Tape`].
//!
//! Each function takes an L×d matrix of points (one per row) and returns
//! either another L×d matrix or an L×1 column. They are compositions of
//! tape primitives, so their gradients are exact by construction. The
//! values agree with [`crate::geometry`] to rounding.

use super::{Matrix, Tape, Var};
use crate::geometry::{Curvature, BALL_EPS, NORM_EPS};

const TINY_SQ: f64 = 1e-30;

/// Euclidean norm of each row, floored away from zero.
pub fn norm_rows(t: &mut Tape, x: Var) -> Var {
    let sq = t.row_sum_sq(x);
    let sq = t.clamp(sq, TINY_SQ, f64::INFINITY);
    t.sqrt(sq)
}

/// Rescales rows whose norm exceeds `(1-ε)/√c` back onto that radius.
pub fn project_rows(t: &mut Tape, x: Var, c: Curvature) -> Var {
    let n = norm_rows(t, x);
    let (rows, _) = t.shape(n);
    let max = t.constant(Matrix::filled(rows, 1, c.max_norm()));
    let ratio = t.div(max, n);
    let factor = t.clamp(ratio, f64::NEG_INFINITY, 1.0);
    t.scale_rows(x, factor)
}

/// Rescales rows whose Euclidean norm exceeds `r` down to norm `r`.
pub fn clip_rows(t: &mut Tape, x: Var, r: f64) -> Var {
    let n = norm_rows(t, x);
    let (rows, _) = t.shape(n);
    let n = t.clamp(n, r, f64::INFINITY);
    let max = t.constant(Matrix::filled(rows, 1, r));
    let factor = t.div(max, n);
    t.scale_rows(x, factor)
}

/// `exp_0(v) = tanh(√c‖v‖) v / (√c‖v‖)`, followed by projection.
pub fn exp_map0_rows(t: &mut Tape, v: Var, c: Curvature) -> Var {
    let n = norm_rows(t, v);
    let scn = t.scale(n, c.sqrt());
    let th = t.tanh(scn);
    let s = t.div(th, scn);
    let y = t.scale_rows(v, s);
    project_rows(t, y, c)
}

/// Row-wise Möbius addition `x ⊕_c y` (no projection).
pub fn mobius_add_rows(t: &mut Tape, x: Var, y: Var, c: Curvature) -> Var {
    let c = c.value();
    let xy = t.row_dot(x, y);
    let x2 = t.row_sum_sq(x);
    let y2 = t.row_sum_sq(y);
    // a = 1 + 2c⟨x,y⟩ + c‖y‖²
    let two_c_xy = t.scale(xy, 2.0 * c);
    let cy2 = t.scale(y2, c);
    let a = t.add(two_c_xy, cy2);
    let a = t.add_scalar(a, 1.0);
    // b = 1 - c‖x‖²
    let cx2 = t.scale(x2, c);
    let b = t.rsub_scalar(1.0, cx2);
    // den = 1 + 2c⟨x,y⟩ + c²‖x‖²‖y‖²
    let x2y2 = t.mul(x2, y2);
    let c2x2y2 = t.scale(x2y2, c * c);
    let den = t.add(two_c_xy, c2x2y2);
    let den = t.add_scalar(den, 1.0);
    let fa = t.div(a, den);
    let fb = t.div(b, den);
    let xa = t.scale_rows(x, fa);
    let yb = t.scale_rows(y, fb);
    t.add(xa, yb)
}

fn artanh_dist(t: &mut Tape, norm: Var, c: Curvature) -> Var {
    let u = t.scale(norm, c.sqrt());
    let u = t.clamp(u, 0.0, 1.0 - BALL_EPS);
    let at = t.artanh(u);
    t.scale(at, 2.0 / c.sqrt())
}

/// Row-wise geodesic distance `d(x_i, y_i)`, as an L×1 column.
pub fn distance_rows(t: &mut Tape, x: Var, y: Var, c: Curvature) -> Var {
    let nx = t.neg(x);
    let u = mobius_add_rows(t, nx, y, c);
    let n = norm_rows(t, u);
    artanh_dist(t, n, c)
}

/// Row-wise distance from the origin, as an L×1 column.
pub fn distance_from_origin_rows(t: &mut Tape, x: Var, c: Curvature) -> Var {
    let n = norm_rows(t, x);
    artanh_dist(t, n, c)
}

/// Row-wise exterior angle `θ(x_i, y_i)`, as an L×1 column.
///
/// Uses the same `atan2` evaluation as [`crate::geometry::exterior_angle`];
/// degenerate rows (`x ≈ 0` or `x ≈ y`) are masked to 0.
pub fn exterior_angle_rows(t: &mut Tape, x: Var, y: Var, c: Curvature) -> Var {
    let sc = c.sqrt();
    let xs = t.scale(x, sc);
    let ys = t.scale(y, sc);
    let (rows, _) = t.shape(x);

    let mask = {
        let xv = t.value(xs);
        let yv = t.value(ys);
        let data = xv
            .iter_rows()
            .zip(yv.iter_rows())
            .map(|(a, b)| {
                let r = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let d = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                if r <= NORM_EPS || d <= NORM_EPS {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        Matrix::from_vec(rows, 1, data).expect("mask shape")
    };

    let xy = t.row_dot(xs, ys);
    let x2 = t.row_sum_sq(xs);
    let x2 = t.clamp(x2, NORM_EPS * NORM_EPS, f64::INFINITY);
    let y2 = t.row_sum_sq(ys);
    // N = ⟨x,y⟩(1+‖x‖²) − ‖x‖²(1+‖y‖²)
    let one_x2 = t.add_scalar(x2, 1.0);
    let one_y2 = t.add_scalar(y2, 1.0);
    let n1 = t.mul(xy, one_x2);
    let n2 = t.mul(x2, one_y2);
    let numer = t.sub(n1, n2);
    // β = ‖y − (⟨x,y⟩/‖x‖²) x‖
    let k = t.div(xy, x2);
    let kx = t.scale_rows(xs, k);
    let perp = t.sub(ys, kx);
    let beta = norm_rows(t, perp);
    // r β (1 − r²)
    let r = t.sqrt(x2);
    let one_minus = t.rsub_scalar(1.0, x2);
    let rb = t.mul(r, beta);
    let sin_part = t.mul(rb, one_minus);
    let theta = t.atan2(sin_part, numer);
    let mask = t.constant(mask);
    t.mul(theta, mask)
}

/// Row-wise aperture `α(x_i)`, as an L×1 column.
pub fn aperture_rows(t: &mut Tape, x: Var, k: f64, c: Curvature) -> Var {
    let n = norm_rows(t, x);
    let r = t.scale(n, c.sqrt());
    let r = t.clamp(r, NORM_EPS, f64::INFINITY);
    let r2 = t.mul(r, r);
    let one_minus = t.rsub_scalar(1.0, r2);
    let q = t.div(one_minus, r);
    let arg = t.scale(q, k);
    let arg = t.clamp(arg, -1.0, 1.0);
    t.asin(arg)
}
