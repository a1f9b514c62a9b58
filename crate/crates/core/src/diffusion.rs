//! Noise schedule, forward corruption and the deterministic skip-step sampler.
//!
//! Labels travel through diffusion as a signed signal: `+1` for the true
//! class and `-1` elsewhere. The sampler starts from standard normal noise
//! and, at each visited timestep, asks the denoiser for class
//! probabilities `P`, re-encodes them as `2P − 1` and takes one DDIM step
//! toward the next (smaller) timestep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensorgrad::Matrix;

/// Smallest retained-signal fraction for `t >= 1`.
pub const GAMMA_MIN: f64 = 1e-4;
/// Largest retained-signal fraction for `t >= 1`.
pub const GAMMA_MAX: f64 = 0.9999;

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Cumulative signal retention `γ(t)` for `t = 0..=T`.
///
/// `γ(0) = 1` (clean data). For `t >= 1` the cosine curve is mapped
/// affinely into `[GAMMA_MIN, GAMMA_MAX]`, which keeps it strictly
/// decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        make_schedule(steps, kind)
    }

    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.gamma.len() - 1
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.gamma
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let ScheduleKind::Cosine = kind;
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let mut gamma = Vec::with_capacity(steps + 1);
    gamma.push(1.0);
    for t in 1..=steps {
        let raw = (f(t) / f0).clamp(0.0, 1.0);
        gamma.push(GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * raw);
    }
    Ok(NoiseSchedule { gamma })
}

/// One-hot labels as a signed signal: `+scale` on the label, `-scale` elsewhere.
pub fn label_encode(labels: &[usize], classes: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("label scale must be > 0, got {scale}")));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::OutOfRange(format!(
            "label {l} at frame {i} is not below the class count {classes}"
        )));
    }
    Ok(Matrix::from_fn(labels.len(), classes, |i, c| {
        if labels[i] == c {
            scale
        } else {
            -scale
        }
    }))
}

/// Per-frame argmax of a label signal.
pub fn label_decode(signal: &Matrix) -> Vec<usize> {
    signal.argmax_rows()
}

/// `x_t = √γ(t) x_0 + √(1 − γ(t)) ε`.
pub fn forward_corrupt(x0: &Matrix, t: usize, schedule: &NoiseSchedule, noise: &Matrix) -> Result<Matrix> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::OutOfRange(format!(
            "timestep {t} outside 1..={}",
            schedule.steps()
        )));
    }
    Ok(corrupt_with_gamma(x0, schedule.gamma(t), noise)?)
}

pub(crate) fn corrupt_with_gamma(x0: &Matrix, gamma: f64, noise: &Matrix) -> Result<Matrix> {
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            context: "forward_corrupt",
            left: x0.shape(),
            right: noise.shape(),
        });
    }
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).max(0.0).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// One reverse update from `t` to `t_prev`:
///
/// `Ŷ_prev = √γ_prev P + √(1 − γ_prev − σ²)/√(1 − γ_t) · (Ŷ_t − √γ_t P) + σ ε`.
pub fn ddim_step(
    y_t: &Matrix,
    p_t: &Matrix,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    sigma: f64,
    noise: Option<&Matrix>,
) -> Result<Matrix> {
    if t_prev >= t || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "ddim step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}"
        )));
    }
    if y_t.shape() != p_t.shape() {
        return Err(Error::ShapeMismatch {
            context: "ddim_step",
            left: y_t.shape(),
            right: p_t.shape(),
        });
    }
    let g_t = schedule.gamma(t);
    let g_prev = schedule.gamma(t_prev);
    let residual = 1.0 - g_prev - sigma * sigma;
    if sigma < 0.0 || residual < -1e-15 {
        return Err(Error::OutOfRange(format!(
            "sigma {sigma} too large for γ(t_prev) = {g_prev}"
        )));
    }
    let coef = residual.max(0.0).sqrt() / (1.0 - g_t).sqrt();
    let (sg_prev, sg_t) = (g_prev.sqrt(), g_t.sqrt());
    let mut out = Matrix::from_fn(y_t.rows(), y_t.cols(), |i, j| {
        let p = p_t.get(i, j);
        sg_prev * p + coef * (y_t.get(i, j) - sg_t * p)
    });
    if sigma > 0.0 {
        let eps = noise.ok_or_else(|| Error::InvalidArgument("sigma > 0 needs a noise matrix".into()))?;
        if eps.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                context: "ddim_step noise",
                left: out.shape(),
                right: eps.shape(),
            });
        }
        out = out.zip_map(eps, |x, e| x + sigma * e);
    }
    Ok(out)
}

/// Evenly spaced descending timesteps `⌊T·i/steps⌋`, `i = steps..1`, deduplicated.
///
/// The implicit final target after the last entry is `t = 0`.
pub fn trajectory(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::OutOfRange(format!(
            "inference steps must be in 1..={total}, got {steps}"
        )));
    }
    let mut ts: Vec<usize> = (1..=steps).rev().map(|i| total * i / steps).collect();
    ts.dedup();
    ts.retain(|&t| t > 0);
    Ok(ts)
}

/// Standard normal matrix from a seeded ChaCha stream (row-major order).
pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Result of a reverse-diffusion run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Class probabilities from the last denoiser call.
    pub probs: Matrix,
    /// The signal after the final update to `t = 0`.
    pub signal: Matrix,
    /// Timesteps at which the denoiser was called.
    pub timesteps: Vec<usize>,
}

/// Deterministic skip-step sampling (σ = 0).
///
/// `denoiser(y_t, t)` must return L×C row-stochastic probabilities.
pub fn sample<F>(
    mut denoiser: F,
    len: usize,
    classes: usize,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput>
where
    F: FnMut(&Matrix, usize) -> Result<Matrix>,
{
    let timesteps = trajectory(schedule.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = gaussian(len, classes, &mut rng);
    let mut probs = None;
    for (k, &t) in timesteps.iter().enumerate() {
        let p = denoiser(&y, t)?;
        if p.shape() != (len, classes) {
            return Err(Error::ShapeMismatch {
                context: "denoiser output",
                left: (len, classes),
                right: p.shape(),
            });
        }
        let signal = p.map(|v| 2.0 * v - 1.0);
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        y = ddim_step(&y, &signal, t, t_prev, schedule, 0.0, None)?;
        probs = Some(p);
    }
    Ok(SampleOutput {
        probs: probs.expect("trajectory is never empty"),
        signal: y,
        timesteps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_schedule_shape() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.table().len(), 1001);
        assert_eq!(s.gamma(0), 1.0);
        assert!(s.gamma(1) >= 0.999 * GAMMA_MAX && s.gamma(1) <= GAMMA_MAX);
        assert!(s.gamma(1000) < 0.01);
        assert!((s.gamma(1000) - GAMMA_MIN).abs() < 1e-12);
        assert!(s.table().windows(2).all(|w| w[1] < w[0]));
        // independent evaluation of the cosine ᾱ at the midpoint
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mid = GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * f(500.0) / f(0.0);
        assert!((s.gamma(500) - mid).abs() < 1e-15);
    }

    #[test]
    fn one_step_schedule() {
        let s = make_schedule(1, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.table().len(), 2);
        assert_eq!(s.gamma(0), 1.0);
        assert!((s.gamma(1) - GAMMA_MIN).abs() < 1e-12);
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn encode_decode() {
        let m = label_encode(&[0], 2, 1.0).unwrap();
        assert_eq!(m.data(), &[1.0, -1.0]);
        assert!(label_encode(&[2], 2, 1.0).is_err());
        assert!(label_encode(&[0], 2, 0.0).is_err());
        let noisy = Matrix::from_rows(&[vec![0.1, 0.3, -0.2], vec![2.0, -1.0, 1.9]]).unwrap();
        assert_eq!(label_decode(&noisy), vec![1, 0]);
    }

    #[test]
    fn corruption_endpoints() {
        let x0 = Matrix::filled(1, 1, 2.0);
        let eps = Matrix::filled(1, 1, 1.0);
        assert_eq!(corrupt_with_gamma(&x0, 1.0, &eps).unwrap().item(), 2.0);
        assert_eq!(corrupt_with_gamma(&x0, 0.0, &eps).unwrap().item(), 1.0);
        let v = corrupt_with_gamma(&x0, 0.25, &eps).unwrap().item();
        assert!((v - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((v - 1.8660).abs() < 1e-4);
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        assert!(forward_corrupt(&x0, 0, &s, &eps).is_err());
        assert!(forward_corrupt(&x0, 11, &s, &eps).is_err());
        assert!(forward_corrupt(&x0, 10, &s, &eps).is_ok());
    }

    #[test]
    fn ddim_step_collapses_at_clean_target() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gaussian(4, 3, &mut rng);
        let p = gaussian(4, 3, &mut rng);
        let out = ddim_step(&y, &p, 37, 0, &s, 0.0, None).unwrap();
        assert_eq!(out, p);
        let again = ddim_step(&y, &p, 37, 12, &s, 0.0, None).unwrap();
        assert_eq!(again, ddim_step(&y, &p, 37, 12, &s, 0.0, None).unwrap());
        assert!(ddim_step(&y, &p, 12, 37, &s, 0.0, None).is_err());
        assert!(ddim_step(&y, &p, 37, 12, &s, 1.0, Some(&p)).is_err());
    }

    #[test]
    fn trajectories() {
        assert_eq!(trajectory(1000, 1).unwrap(), vec![1000]);
        let t = trajectory(1000, 25).unwrap();
        assert_eq!(t.len(), 25);
        assert_eq!(t[0], 1000);
        assert_eq!(*t.last().unwrap(), 40);
        assert_eq!(trajectory(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(trajectory(10, 0).is_err());
        assert!(trajectory(10, 11).is_err());
    }

    #[test]
    fn perfect_predictor_recovers_labels() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        let labels = vec![0, 0, 2, 2, 2, 1, 1, 0];
        let y0 = label_encode(&labels, 3, 1.0).unwrap();
        let onehot = y0.map(|v| (v + 1.0) / 2.0);
        for steps in [1, 8, 25] {
            let mut calls = 0;
            let out = sample(
                |_, _| {
                    calls += 1;
                    Ok(onehot.clone())
                },
                8,
                3,
                steps,
                &s,
                11,
            )
            .unwrap();
            assert_eq!(calls, steps);
            assert_eq!(label_decode(&out.probs), labels);
            assert!(out.signal.zip_map(&y0, |a, b| (a - b).abs()).max_abs() < 1e-6);
            for r in out.probs.iter_rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn trajectory_strictly_decreasing(total in 1usize..2000, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let ts = trajectory(total, steps).unwrap();
            prop_assert!(!ts.is_empty());
            prop_assert_eq!(ts[0], total);
            prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(*ts.last().unwrap() >= 1);
        }
    }
}
