//! Training objectives.
//!
//! Every loss records itself on a [`Tape`] and returns a scalar [`Var`], so
//! gradients reach the decoder embeddings, the class probabilities and
//! (while they are trainable) the prototypes.
//!
//! | loss | acts on | phase |
//! |------|---------|-------|
//! | [`cross_entropy`] | probabilities | both |
//! | [`temporal_entailment`] | consecutive embeddings | both |
//! | [`prototype_margin`] | prototypes | stabilization |
//! | [`push_pull`] | embeddings + prototypes | stabilization |
//! | [`geodesic_guidance`] | embeddings, frozen prototypes | guidance |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Curvature, PoincarePoint};
use crate::tensorgrad::hyperbolic::{
    aperture_rows, clip_rows, distance_from_origin_rows, distance_rows, exp_map0_rows,
    exterior_angle_rows,
};
use crate::tensorgrad::{Matrix, Tape, Var};

/// Probability floor applied before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor on `d(O, x)` in the push-pull ratio.
pub const RADIUS_FLOOR: f64 = 1e-6;

/// Decay applied to the outward push as a function of `t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decay {
    /// `e^{-x}`
    #[default]
    Exp,
    /// `1 - x`
    Linear,
    /// `(1 + cos πx) / 2`
    Cosine,
}

impl Decay {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Decay::Exp => (-x).exp(),
            Decay::Linear => 1.0 - x,
            Decay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * x).cos()),
        }
    }
}

impl FromStr for Decay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Decay::Exp),
            "linear" => Ok(Decay::Linear),
            "cosine" => Ok(Decay::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown decay '{other}' (expected exp, linear or cosine)"
            ))),
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decay::Exp => "exp",
            Decay::Linear => "linear",
            Decay::Cosine => "cosine",
        })
    }
}

/// Loss weights and geometric constants. Defaults are the GTEA column of
/// the reference hyperparameter table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub entail: f64,
    pub margin: f64,
    pub pp: f64,
    pub gg: f64,
    /// Minimum pairwise prototype distance `m`.
    pub margin_m: f64,
    /// Aperture constant `K`.
    pub aperture_k: f64,
    pub decay: Decay,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 0.5,
            entail: 0.05,
            margin: 0.1,
            pp: 0.1,
            gg: 0.1,
            margin_m: 2.0,
            aperture_k: 0.1,
            decay: Decay::Exp,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            ("lambda_ce", self.ce),
            ("lambda_entail", self.entail),
            ("lambda_margin", self.margin),
            ("lambda_pp", self.pp),
            ("lambda_gg", self.gg),
        ];
        for (name, w) in ws {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::OutOfRange(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.margin_m > 0.0 && self.margin_m.is_finite()) {
            return Err(Error::OutOfRange(format!("margin must be > 0, got {}", self.margin_m)));
        }
        if !(self.aperture_k > 0.0 && self.aperture_k.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "aperture_k must be > 0, got {}",
                self.aperture_k
            )));
        }
        Ok(())
    }
}

/// One learnable ball point per action class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    points: Matrix,
    c: Curvature,
    frozen: bool,
}

impl Prototypes {
    /// Wraps a C×d coordinate matrix; every row must lie inside the ball.
    pub fn new(points: Matrix, c: Curvature) -> Result<Self> {
        if points.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 prototypes, got {}",
                points.rows()
            )));
        }
        for r in points.iter_rows() {
            PoincarePoint::new(r.to_vec(), c)?;
        }
        Ok(Prototypes {
            points,
            c,
            frozen: false,
        })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Replaces the coordinates. Fails on frozen prototypes.
    pub(crate) fn points_mut(&mut self) -> Result<&mut Matrix> {
        if self.frozen {
            return Err(Error::Contract("prototypes are frozen".into()));
        }
        Ok(&mut self.points)
    }

    /// Records the prototypes on `tape`; frozen ones as a constant, so no
    /// gradient reaches them.
    pub fn bind(&self, tape: &mut Tape) -> BoundPrototypes {
        let var = if self.frozen {
            tape.constant(self.points.clone())
        } else {
            tape.leaf(self.points.clone())
        };
        BoundPrototypes {
            var,
            frozen: self.frozen,
            c: self.c,
        }
    }

    /// Smallest pairwise hyperbolic distance.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = crate::geometry::distance_raw(self.points.row(i), self.points.row(j), self.c);
                best = best.min(d);
            }
        }
        best
    }
}

/// Prototypes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundPrototypes {
    pub var: Var,
    pub frozen: bool,
    pub c: Curvature,
}

/// Projects decoder embeddings into the ball: optional tangent-norm clip,
/// `exp_0`, then projection.
///
/// With a clip `r`, every point satisfies `d(O, x) ≤ 2r/√c`, which keeps
/// embeddings away from the boundary where `exp_0` saturates.
pub fn to_ball(tape: &mut Tape, embeddings: Var, c: Curvature, clip: Option<f64>) -> Var {
    let v = match clip {
        Some(r) => clip_rows(tape, embeddings, r),
        None => embeddings,
    };
    exp_map0_rows(tape, v, c)
}

/// `-(1/(LC)) Σ Y log max(P, 1e-12)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, target: &Matrix) -> Result<Var> {
    if tape.shape(probs) != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            left: tape.shape(probs),
            right: target.shape(),
        });
    }
    let (l, c) = target.shape();
    let p = tape.clamp(probs, PROB_FLOOR, f64::INFINITY);
    let logp = tape.ln(p);
    let y = tape.constant(target.clone());
    let prod = tape.mul(logp, y);
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / (l * c) as f64))
}

/// Mean hinge `max(0, θ(x_l, x_{l+1}) − α(x_l))` over consecutive frames.
pub fn temporal_entailment(tape: &mut Tape, x: Var, k: f64, c: Curvature) -> Var {
    let (l, _) = tape.shape(x);
    if l < 2 {
        log::debug!("temporal entailment skipped for a {l}-frame sequence");
        return tape.scalar(0.0);
    }
    let prev = tape.slice_rows(x, 0, l - 1);
    let next = tape.slice_rows(x, 1, l - 1);
    let theta = exterior_angle_rows(tape, prev, next, c);
    let alpha = aperture_rows(tape, prev, k, c);
    let gap = tape.sub(theta, alpha);
    let hinge = tape.relu(gap);
    tape.mean(hinge)
}

/// `(1/(C(C−1))) Σ_{i<j} max(0, m − d(z_i, z_j))`.
pub fn prototype_margin(tape: &mut Tape, z: &BoundPrototypes, m: f64) -> Result<Var> {
    let (n, _) = tape.shape(z.var);
    if n < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least 2 prototypes".into()));
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
        }
    }
    let zi = tape.gather_rows(z.var, &left);
    let zj = tape.gather_rows(z.var, &right);
    let d = distance_rows(tape, zi, zj, z.c);
    let gap = tape.rsub_scalar(m, d);
    let hinge = tape.relu(gap);
    let s = tape.sum(hinge);
    Ok(tape.scale(s, 1.0 / (n * (n - 1)) as f64))
}

fn assigned(tape: &mut Tape, x: Var, z: &BoundPrototypes, labels: &[usize]) -> Result<Var> {
    let (l, d) = tape.shape(x);
    let (n, dz) = tape.shape(z.var);
    if labels.len() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: labels.len(),
        });
    }
    if d != dz {
        return Err(Error::DimensionMismatch { expected: dz, got: d });
    }
    if let Some(&bad) = labels.iter().find(|&&v| v >= n) {
        return Err(Error::OutOfRange(format!("label {bad} has no prototype (C = {n})")));
    }
    Ok(tape.gather_rows(z.var, labels))
}

/// Mean of `d(x_i, z_i)/max(d(O, x_i), 1e-6) − d(O, x_i)·decay(t/T)`.
pub fn push_pull(
    tape: &mut Tape,
    x: Var,
    z: &BoundPrototypes,
    labels: &[usize],
    t_frac: f64,
    decay: Decay,
) -> Result<Var> {
    let zi = assigned(tape, x, z, labels)?;
    let d_xz = distance_rows(tape, x, zi, z.c);
    let d_ox = distance_from_origin_rows(tape, x, z.c);
    let floored = tape.clamp(d_ox, RADIUS_FLOOR, f64::INFINITY);
    let pull = tape.div(d_xz, floored);
    let push = tape.scale(d_ox, decay.apply(t_frac));
    let per_frame = tape.sub(pull, push);
    Ok(tape.mean(per_frame))
}

/// Mean of `[d(O, z_i) − (d(O, x_i) + d(x_i, z_i))]²`. Needs frozen prototypes.
pub fn geodesic_guidance(tape: &mut Tape, x: Var, z: &BoundPrototypes, labels: &[usize]) -> Result<Var> {
    if !z.frozen {
        return Err(Error::Contract("geodesic guidance requires frozen prototypes".into()));
    }
    let zi = assigned(tape, x, z, labels)?;
    let d_oz = distance_from_origin_rows(tape, zi, z.c);
    let d_ox = distance_from_origin_rows(tape, x, z.c);
    let d_xz = distance_rows(tape, x, zi, z.c);
    let path = tape.add(d_ox, d_xz);
    let gap = tape.sub(d_oz, path);
    let sq = tape.mul(gap, gap);
    Ok(tape.mean(sq))
}

/// Which composite objective applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Stabilization,
    Guidance,
    /// Single-stage ablation: every loss at once, prototypes always trainable.
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Stabilization => "stabilization",
            Phase::Guidance => "guidance",
            Phase::Joint => "joint",
        })
    }
}

/// Stabilization while `epoch < e1`, guidance from `e1` on.
pub fn total_for_epoch(epoch: usize, e1: usize) -> Phase {
    if epoch < e1 {
        Phase::Stabilization
    } else {
        Phase::Guidance
    }
}

/// Everything a composite loss needs for one video.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// L×C class probabilities.
    pub probs: Var,
    /// L×d embeddings already mapped into the ball.
    pub embeddings: Var,
    pub labels: &'a [usize],
    /// One-hot L×C targets.
    pub target: &'a Matrix,
    pub prototypes: &'a BoundPrototypes,
    /// Diffusion timestep divided by `T`.
    pub t_frac: f64,
}

/// Unweighted component values of the last composite evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub entail: Option<f64>,
    pub margin: Option<f64>,
    pub pp: Option<f64>,
    pub gg: Option<f64>,
    pub total: f64,
}

fn weighted(tape: &mut Tape, acc: Option<Var>, term: Var, w: f64) -> Var {
    let scaled = tape.scale(term, w);
    match acc {
        Some(a) => tape.add(a, scaled),
        None => scaled,
    }
}

/// Builds the composite for `phase`. Terms with zero weight are not evaluated.
pub fn composite(
    tape: &mut Tape,
    phase: Phase,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let c = inputs.prototypes.c;
    let mut out = LossBreakdown::default();

    let ce = cross_entropy(tape, inputs.probs, inputs.target)?;
    out.ce = tape.value(ce).item();
    let mut total = weighted(tape, None, ce, weights.ce);

    if weights.entail > 0.0 {
        let v = temporal_entailment(tape, inputs.embeddings, weights.aperture_k, c);
        out.entail = Some(tape.value(v).item());
        total = weighted(tape, Some(total), v, weights.entail);
    }
    let stabilizing = matches!(phase, Phase::Stabilization | Phase::Joint);
    let guiding = matches!(phase, Phase::Guidance | Phase::Joint);
    if stabilizing && weights.margin > 0.0 {
        let v = prototype_margin(tape, inputs.prototypes, weights.margin_m)?;
        out.margin = Some(tape.value(v).item());
        total = weighted(tape, Some(total), v, weights.margin);
    }
    if stabilizing && weights.pp > 0.0 {
        let v = push_pull(
            tape,
            inputs.embeddings,
            inputs.prototypes,
            inputs.labels,
            inputs.t_frac,
            weights.decay,
        )?;
        out.pp = Some(tape.value(v).item());
        total = weighted(tape, Some(total), v, weights.pp);
    }
    if guiding && weights.gg > 0.0 {
        let v = if phase == Phase::Joint {
            // the joint ablation deliberately lifts the frozen requirement
            let lifted = BoundPrototypes {
                frozen: true,
                ..*inputs.prototypes
            };
            geodesic_guidance(tape, inputs.embeddings, &lifted, inputs.labels)?
        } else {
            geodesic_guidance(tape, inputs.embeddings, inputs.prototypes, inputs.labels)?
        };
        out.gg = Some(tape.value(v).item());
        total = weighted(tape, Some(total), v, weights.gg);
    }
    out.total = tape.value(total).item();
    Ok((total, out))
}

/// `λ_ce L_ce + λ_entail L_entail + λ_margin L_margin + λ_pp L_pp`.
pub fn stabilization_total(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    composite(tape, Phase::Stabilization, inputs, weights)
}

/// `λ_ce L_ce + λ_entail L_entail + λ_gg L_gg`. Needs frozen prototypes.
pub fn guidance_total(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if !inputs.prototypes.frozen {
        return Err(Error::Contract("guidance phase requires frozen prototypes".into()));
    }
    composite(tape, Phase::Guidance, inputs, weights)
}

/// One-hot L×C matrix for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}
