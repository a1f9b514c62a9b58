//! Self-checks behind the `check` command: geometry identities, gradient
//! agreement with finite differences, and oracle recovery of the sampler.
//!
//! Each suite is seeded and returns a [`SuiteReport`] listing every check
//! with its worst observed error and the tolerance it was held to.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{self, label_encode, make_schedule, ScheduleKind};
use crate::error::Result;
use crate::geometry::{
    self, aperture, distance_from_origin, exp_map, exterior_angle, log_map, mobius_add, poincare_distance,
    Curvature, PoincarePoint,
};
use crate::losses::{
    composite, cross_entropy, geodesic_guidance, one_hot, prototype_margin, push_pull, temporal_entailment,
    to_ball, BoundPrototypes, Decay, LossInputs, LossWeights, Phase,
};
use crate::tensorgrad::hyperbolic::exp_map0_rows;
use crate::tensorgrad::{finite_diff_check, Matrix, Tape, Var};

/// Random draws per geometry property and curvature.
pub const GEOMETRY_SAMPLES: usize = 1000;
/// Random configurations per loss in the gradient suite.
pub const GRADIENT_CONFIGS: usize = 50;
pub const CURVATURES: [f64; 3] = [0.5, 1.0, 2.0];
pub const SAMPLER_STEPS: [usize; 3] = [1, 8, 25];

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
/// Distance from any kink below which a gradient configuration is redrawn.
const KINK_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            worst,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub outcomes: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(
                f,
                "{} {}/{}: worst={:.3e} tol={:.0e}",
                if o.passed() { "PASS" } else { "FAIL" },
                self.suite,
                o.name,
                o.worst,
                o.tolerance
            )?;
        }
        write!(
            f,
            "{} {} ({:.2}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.elapsed.as_secs_f64()
        )
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Uniform point in the ball of Euclidean radius `r`.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, r: f64, c: Curvature) -> PoincarePoint {
    let g = diffusion::gaussian(1, dim, rng);
    let n = geometry::norm_sq(g.data()).sqrt().max(1e-300);
    let s = r * rng.random::<f64>().powf(1.0 / dim as f64) / n;
    PoincarePoint::new(g.data().iter().map(|v| v * s).collect(), c).expect("radius below the ball edge")
}

/// Metric axioms, exp/log inversion, radial additivity and radial entailment.
pub fn geometry_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for &cv in &CURVATURES {
        let c = Curvature::new(cv)?;
        let r = 0.9 / c.sqrt();
        let (mut inv, mut sym, mut tri, mut add, mut radial, mut ident) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..GEOMETRY_SAMPLES {
            let dim = rng.random_range(2..=5);
            let x = ball_point(&mut rng, dim, r, c);
            let y = ball_point(&mut rng, dim, r, c);
            let z = ball_point(&mut rng, dim, r, c);

            let back = exp_map(&log_map(&x, &y)?)?;
            inv = inv.max(max_abs_diff(back.coords(), y.coords()));

            let dxy = poincare_distance(&x, &y)?;
            sym = sym.max((dxy - poincare_distance(&y, &x)?).abs());
            let excess = dxy - poincare_distance(&x, &z)? - poincare_distance(&z, &y)?;
            tri = tri.max(excess);

            let o = PoincarePoint::origin(dim, c);
            let xo = mobius_add(&x, &o)?;
            let ox = mobius_add(&o, &x)?;
            ident = ident.max(max_abs_diff(xo.coords(), x.coords()).max(max_abs_diff(ox.coords(), x.coords())));

            // a point strictly between O and z on the same ray
            let s = rng.random_range(0.01..0.99);
            let inner = PoincarePoint::new(z.coords().iter().map(|v| s * v).collect(), c)?;
            let gap = distance_from_origin(&z) - distance_from_origin(&inner) - poincare_distance(&inner, &z)?;
            add = add.max(gap.abs());

            // outward along the ray of x, still inside the ball
            let limit = c.max_norm() / x.norm().max(1e-12);
            if limit > 1.0 + 1e-6 {
                let s = rng.random_range(1.0 + 1e-6..limit);
                let out = PoincarePoint::new(x.coords().iter().map(|v| s * v).collect(), c)?;
                radial = radial.max(exterior_angle(&x, &out)?);
            }
        }
        outcomes.push(CheckOutcome::new(format!("exp_log_inverse[c={cv}]"), inv, 1e-9));
        outcomes.push(CheckOutcome::new(format!("distance_symmetry[c={cv}]"), sym, 1e-12));
        outcomes.push(CheckOutcome::new(format!("triangle_inequality[c={cv}]"), tri.max(0.0), 1e-9));
        outcomes.push(CheckOutcome::new(format!("mobius_identity[c={cv}]"), ident, 1e-15));
        outcomes.push(CheckOutcome::new(format!("radial_additivity[c={cv}]"), add, 1e-9));
        outcomes.push(CheckOutcome::new(format!("radial_entailment[c={cv}]"), radial, 1e-9));
    }
    Ok(SuiteReport {
        suite: "geometry",
        outcomes,
        elapsed: start.elapsed(),
    })
}

/// One random loss configuration: raw decoder outputs, tangent prototypes
/// and labels. Everything that reaches the ball goes through `exp_0`.
struct GradCase {
    logits: Matrix,
    emb: Matrix,
    protos: Matrix,
    labels: Vec<usize>,
    t_frac: f64,
    weights: LossWeights,
    c: Curvature,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    diffusion::gaussian(rows, cols, rng).map(|v| scale * v)
}

fn ball_rows(m: &Matrix, c: Curvature) -> Vec<PoincarePoint> {
    let mut t = Tape::new();
    let v = t.constant(m.clone());
    let x = exp_map0_rows(&mut t, v, c);
    t.value(x)
        .iter_rows()
        .map(|r| PoincarePoint::new(r.to_vec(), c).expect("exp_0 lands inside the ball"))
        .collect()
}

impl GradCase {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let c = Curvature::new(CURVATURES[rng.random_range(0..CURVATURES.len())]).expect("positive");
        let l = rng.random_range(3..=7);
        let classes = rng.random_range(2..=4);
        let d = rng.random_range(2..=4);
        let weights = LossWeights {
            margin_m: rng.random_range(0.5..3.0),
            aperture_k: rng.random_range(0.05..0.3),
            decay: [Decay::Exp, Decay::Linear, Decay::Cosine][rng.random_range(0..3)],
            ..LossWeights::default()
        };
        GradCase {
            logits: normal(rng, l, classes, 1.0),
            emb: normal(rng, l, d, 0.5 / c.sqrt()),
            protos: normal(rng, classes, d, 0.4 / c.sqrt()),
            labels: (0..l).map(|_| rng.random_range(0..classes)).collect(),
            t_frac: rng.random_range(0.0..=1.0),
            weights,
            c,
        }
    }

    /// True when no clamp, floor or hinge is within [`KINK_GAP`] of switching.
    fn is_regular(&self) -> bool {
        let c = self.c;
        let x = ball_rows(&self.emb, c);
        let z = ball_rows(&self.protos, c);
        let near = |a: f64, b: f64| (a - b).abs() < KINK_GAP;
        let k = self.weights.aperture_k;
        for p in x.iter().chain(&z) {
            if p.norm() * c.sqrt() < 10.0 * KINK_GAP {
                return false;
            }
        }
        for w in x.windows(2) {
            let r = w[0].norm() * c.sqrt();
            let arg = k * (1.0 - r * r) / r;
            let (Ok(theta), Ok(alpha)) = (exterior_angle(&w[0], &w[1]), aperture(&w[0], k)) else {
                return false;
            };
            if near(arg, 1.0) || near(theta, alpha) || near(theta, 0.0) || near(theta, std::f64::consts::PI) {
                return false;
            }
        }
        for i in 0..z.len() {
            for j in i + 1..z.len() {
                match poincare_distance(&z[i], &z[j]) {
                    Ok(d) if !near(d, self.weights.margin_m) && d > KINK_GAP => {}
                    _ => return false,
                }
            }
        }
        true
    }

    fn inputs(&self) -> Vec<Matrix> {
        vec![self.logits.clone(), self.emb.clone(), self.protos.clone()]
    }
}

/// Which scalar the gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    CrossEntropy,
    Entailment,
    Margin,
    PushPull,
    Guidance,
    StabilizationTotal,
    GuidanceTotal,
}

impl GradTarget {
    pub const ALL: [GradTarget; 7] = [
        GradTarget::CrossEntropy,
        GradTarget::Entailment,
        GradTarget::Margin,
        GradTarget::PushPull,
        GradTarget::Guidance,
        GradTarget::StabilizationTotal,
        GradTarget::GuidanceTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::CrossEntropy => "cross_entropy",
            GradTarget::Entailment => "temporal_entailment",
            GradTarget::Margin => "prototype_margin",
            GradTarget::PushPull => "push_pull",
            GradTarget::Guidance => "geodesic_guidance",
            GradTarget::StabilizationTotal => "stabilization_total",
            GradTarget::GuidanceTotal => "guidance_total",
        }
    }

    fn record(self, case: &GradCase, t: &mut Tape, v: &[Var]) -> Var {
        let c = case.c;
        let probs = t.softmax_rows(v[0]);
        let x = to_ball(t, v[1], c, None);
        let z = exp_map0_rows(t, v[2], c);
        let frozen = matches!(self, GradTarget::Guidance | GradTarget::GuidanceTotal);
        let zb = BoundPrototypes { var: z, frozen, c };
        let classes = case.logits.cols();
        let target = one_hot(&case.labels, classes);
        let w = &case.weights;
        let inputs = LossInputs {
            probs,
            embeddings: x,
            labels: &case.labels,
            target: &target,
            prototypes: &zb,
            t_frac: case.t_frac,
        };
        let r = match self {
            GradTarget::CrossEntropy => cross_entropy(t, probs, &target),
            GradTarget::Entailment => Ok(temporal_entailment(t, x, w.aperture_k, c)),
            GradTarget::Margin => prototype_margin(t, &zb, w.margin_m),
            GradTarget::PushPull => push_pull(t, x, &zb, &case.labels, case.t_frac, w.decay),
            GradTarget::Guidance => geodesic_guidance(t, x, &zb, &case.labels),
            GradTarget::StabilizationTotal => composite(t, Phase::Stabilization, &inputs, w).map(|r| r.0),
            GradTarget::GuidanceTotal => composite(t, Phase::Guidance, &inputs, w).map(|r| r.0),
        };
        r.expect("shapes are consistent by construction")
    }
}

/// Worst finite-difference disagreement for `target` over `configs`
/// regular random configurations.
pub fn gradient_worst(target: GradTarget, configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (target as u64).wrapping_mul(0x9e37_79b9));
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < configs {
        let case = GradCase::draw(&mut rng);
        if !case.is_regular() {
            continue;
        }
        let err = finite_diff_check(|t, v| target.record(&case, t, v), &case.inputs(), FD_STEP)?;
        worst = worst.max(err);
        done += 1;
    }
    Ok(worst)
}

/// Tape gradients of every loss and both composites against central
/// differences, with respect to logits, pre-map embeddings and tangent
/// prototype coordinates.
pub fn gradient_suite(seed: u64, configs: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let outcomes = GradTarget::ALL
        .iter()
        .map(|&g| Ok(CheckOutcome::new(g.name(), gradient_worst(g, configs, seed)?, FD_TOL)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        suite: "gradient",
        outcomes,
        elapsed: start.elapsed(),
    })
}

/// Max-norm error of the sampler when the denoiser always returns the
/// clean labels.
pub fn oracle_reconstruction_error(labels: &[usize], classes: usize, steps: usize, total: usize, seed: u64) -> Result<f64> {
    let schedule = make_schedule(total, ScheduleKind::Cosine)?;
    let clean = label_encode(labels, classes, 1.0)?;
    let probs = one_hot(labels, classes);
    let out = diffusion::sample(|_, _| Ok(probs.clone()), labels.len(), classes, steps, &schedule, seed)?;
    Ok(max_abs_diff(out.signal.data(), clean.data()))
}

/// Oracle-predictor recovery for each step count in [`SAMPLER_STEPS`].
pub fn sampler_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    for &steps in &SAMPLER_STEPS {
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let classes = rng.random_range(2..=6);
            let len = rng.random_range(1..=60);
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
            let err = oracle_reconstruction_error(&labels, classes, steps, 1000, seed.wrapping_add(trial))?;
            worst = worst.max(err);
        }
        outcomes.push(CheckOutcome::new(format!("oracle_recovery[steps={steps}]"), worst, 1e-6));
    }
    Ok(SuiteReport {
        suite: "sampler",
        outcomes,
        elapsed: start.elapsed(),
    })
}

/// All three suites with their default sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        geometry_suite(seed)?,
        gradient_suite(seed, GRADIENT_CONFIGS)?,
        sampler_suite(seed)?,
    ])
}
