//! Synthetic videos with a two-level action hierarchy.
//!
//! Every video belongs to one coarse task. A task owns a few private
//! actions and shares a common pool with the other tasks; the action
//! order inside a video follows the task's first-order transition table,
//! which starts at the task's first private action and never repeats an
//! action back to back. Frame features are a per-class mean vector plus
//! Gaussian noise, lightly smoothed in time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClassMap, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::tensorgrad::Matrix;

const SMOOTHING: [f64; 3] = [0.25, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub actions_per_task: usize,
    /// Actions available to every task.
    pub shared_actions: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames per segment.
    pub segment_frames: (usize, usize),
    /// Inclusive range of segments per video.
    pub segments_per_video: (usize, usize),
    /// Per-dimension standard deviation of the frame noise.
    pub noise: f64,
    pub videos: usize,
    /// Fraction of videos (rounded) assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tasks: 2,
            actions_per_task: 2,
            shared_actions: 2,
            feature_dim: 32,
            segment_frames: (15, 25),
            segments_per_video: (4, 6),
            noise: 2.0,
            videos: 50,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.shared_actions + self.num_tasks * self.actions_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_tasks == 0 || self.actions_per_task == 0 {
            return bad("need at least one task with one private action".into());
        }
        if self.actions_per_task + self.shared_actions < 2 {
            return bad("each task needs at least 2 actions to avoid self-transitions".into());
        }
        if self.num_classes() < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        let (a, b) = self.segment_frames;
        if a == 0 || a > b {
            return bad(format!("segment frame range {a}..={b} is empty"));
        }
        let (a, b) = self.segments_per_video;
        if a == 0 || a > b {
            return bad(format!("segments-per-video range {a}..={b} is empty"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.videos == 0 {
            return bad("need at least one video".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction must be in [0, 1], got {}", self.train_fraction));
        }
        Ok(())
    }

    /// Class names: shared actions first, then each task's private actions.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.shared_actions).map(|i| format!("shared_{i}")).collect();
        for t in 0..self.num_tasks {
            names.extend((0..self.actions_per_task).map(|a| format!("task{t}_action{a}")));
        }
        names
    }

    fn task_actions(&self, task: usize) -> Vec<usize> {
        let own = self.shared_actions + task * self.actions_per_task;
        // start action first
        let mut acts: Vec<usize> = (own..own + self.actions_per_task).collect();
        acts.extend(0..self.shared_actions);
        acts
    }
}

/// Per-class mean feature vectors, C×D, drawn from `N(0, 1)`.
///
/// These are the first draws of the generator's random stream, so they
/// are exactly the means used by [`generate_synthetic`].
pub fn class_means(spec: &SyntheticSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_means(spec, &mut rng))
}

fn draw_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(spec.num_classes(), spec.feature_dim, |_, _| StandardNormal.sample(&mut *rng))
}

/// Row-stochastic transition weights over a task's actions; zero diagonal.
fn draw_grammar(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|a| {
            let mut row: Vec<f64> = (0..n)
                .map(|b| if a == b { 0.0 } else { rng.random_range(0.2..1.0) })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
            row
        })
        .collect()
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last nonzero entry
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn smooth(raw: &Matrix) -> Matrix {
    let l = raw.rows();
    Matrix::from_fn(l, raw.cols(), |i, j| {
        let prev = raw.get(i.saturating_sub(1), j);
        let next = raw.get((i + 1).min(l - 1), j);
        SMOOTHING[0] * prev + SMOOTHING[1] * raw.get(i, j) + SMOOTHING[2] * next
    })
}

/// Generates the full dataset; a pure function of `spec`.
///
/// Features are rounded to `f32` precision so the in-memory dataset equals
/// what is read back from disk.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = draw_means(spec, &mut rng);
    let tasks: Vec<(Vec<usize>, Vec<Vec<f64>>)> = (0..spec.num_tasks)
        .map(|t| {
            let acts = spec.task_actions(t);
            let g = draw_grammar(acts.len(), &mut rng);
            (acts, g)
        })
        .collect();

    let n_train = ((spec.videos as f64) * spec.train_fraction).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for v in 0..spec.videos {
        let (acts, grammar) = &tasks[rng.random_range(0..spec.num_tasks)];
        let n_segs = rng.random_range(spec.segments_per_video.0..=spec.segments_per_video.1);
        let mut labels = Vec::new();
        let mut state = 0;
        for s in 0..n_segs {
            if s > 0 {
                state = pick(&grammar[state], &mut rng);
            }
            let len = rng.random_range(spec.segment_frames.0..=spec.segment_frames.1);
            labels.extend(std::iter::repeat(acts[state]).take(len));
        }
        let raw = Matrix::from_fn(labels.len(), spec.feature_dim, |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            means.get(labels[i], j) + spec.noise * z
        });
        let features = smooth(&raw).map(|x| x as f32 as f64);
        let rec = VideoRecord::new(format!("video_{v:03}"), features, labels)?;
        if v < n_train {
            train.push(rec);
        } else {
            test.push(rec);
        }
    }
    Ok(Dataset {
        classes: ClassMap::new(spec.class_names())?,
        train,
        test,
    })
}
