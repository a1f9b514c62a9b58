//! Adam for network weights and a Riemannian variant for ball-valued prototypes.

use crate::error::{Error, Result};
use crate::geometry::{self, PoincarePoint, TangentVector};
use crate::losses::Prototypes;
use crate::tensorgrad::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::OutOfRange(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::OutOfRange(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment accumulators for a list of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn check(&self, params: &[Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    context: "adam parameter",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                let bad = g.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at flat index {bad} is {}",
                    g.data()[bad]
                )));
            }
        }
        Ok(())
    }
}

fn moment_update(cfg: &AdamConfig, step: u64, m: &mut [f64], v: &mut [f64], g: &[f64], mut apply: impl FnMut(usize, f64)) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for j in 0..g.len() {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        apply(j, -cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
    }
}

/// One bias-corrected Adam update, in place.
///
/// Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let cfg = state.config;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        moment_update(&cfg, state.step, m.data_mut(), v.data_mut(), g.data(), |j, delta| pd[j] += delta);
    }
    Ok(())
}

/// Adam moments for a C×d prototype matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannianAdamState {
    pub config: AdamConfig,
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl RiemannianAdamState {
    pub fn new(config: AdamConfig, prototypes: &Prototypes) -> Self {
        let (r, c) = prototypes.points().shape();
        RiemannianAdamState {
            config,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
        }
    }
}

/// Rescales a Euclidean gradient at `z` by the inverse metric `(1 − c‖z‖²)² / 4`.
pub fn riemannian_grad(z: &[f64], grad: &[f64], c: geometry::Curvature) -> Vec<f64> {
    let s = (1.0 - c.value() * geometry::norm_sq(z)).powi(2) / 4.0;
    grad.iter().map(|g| g * s).collect()
}

/// One Riemannian Adam update of every prototype.
///
/// Moments are kept per coordinate on the rescaled gradients and are not
/// transported between points. The step is applied through `exp_z`, then
/// the result is projected back into the ball.
pub fn riemannian_adam_step(
    prototypes: &mut Prototypes,
    grads: &Matrix,
    state: &mut RiemannianAdamState,
) -> Result<()> {
    if prototypes.is_frozen() {
        return Err(Error::Contract("cannot update frozen prototypes".into()));
    }
    if grads.shape() != prototypes.points().shape() || state.m.shape() != grads.shape() {
        return Err(Error::ShapeMismatch {
            context: "riemannian adam",
            left: prototypes.points().shape(),
            right: grads.shape(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("prototype gradient".into()));
    }
    let c = prototypes.curvature();
    state.step += 1;
    let cfg = state.config;
    let step = state.step;
    let points = prototypes.points_mut()?;
    let mut updated = points.clone();
    for i in 0..grads.rows() {
        let z = points.row(i).to_vec();
        let rg = riemannian_grad(&z, grads.row(i), c);
        let mut dir = vec![0.0; rg.len()];
        moment_update(&cfg, step, state.m.row_mut(i), state.v.row_mut(i), &rg, |j, delta| dir[j] = delta);
        let base = PoincarePoint::new(z, c)?;
        let next = geometry::exp_map(&TangentVector::new(dir, base)?)?;
        updated.row_mut(i).copy_from_slice(next.coords());
    }
    *points = updated;
    Ok(())
}
