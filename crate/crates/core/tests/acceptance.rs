//! Acceptance suite.
//!
//! Runs as a plain binary (`harness = false`) so every criterion prints
//! exactly one `PASS` or `FAIL` line, with its measured numbers, whether or
//! not anything fails. The process exits non-zero if any criterion fails.
//!
//! Oracles here are written independently of the library code they check:
//! closed-form distances, a hand-rolled reverse-diffusion recurrence,
//! brute-force segment matching over frame sets, a memoised edit distance
//! and a local central-difference gradient checker.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybridtas::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use hybridtas::data::config::{config_text, parse_config};
use hybridtas::data::features::{decode_features, encode_features};
use hybridtas::data::labels::{parse_labels, parse_mapping};
use hybridtas::data::{
    generate_synthetic, load_checkpoint, save_checkpoint, write_labels, write_mapping, Dataset, SyntheticSpec,
};
use hybridtas::diffusion::{self, label_encode, make_schedule, ScheduleKind};
use hybridtas::geometry::{
    aperture, distance_from_origin, exp_map, exterior_angle, log_map, poincare_distance, Curvature, PoincarePoint,
};
use hybridtas::losses::{
    cross_entropy, geodesic_guidance, guidance_total, one_hot, prototype_margin, push_pull, stabilization_total,
    temporal_entailment, to_ball, BoundPrototypes, Decay, LossInputs, LossWeights, Phase,
};
use hybridtas::metrics::{edit_score, frame_accuracy, overlap_counts, segments_from_labels, MetricsReport, OVERLAPS};
use hybridtas::tensorgrad::hyperbolic::exp_map0_rows;
use hybridtas::tensorgrad::{Matrix, Tape, Var};
use hybridtas::trainer::{evaluate, infer_video, train, train_observed, Optimization, RunConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_EPOCHS: usize = 150;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) -> String {
    format!(
        "{} criterion {} {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail
    )
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- geometry

fn uniform_ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = r * rng.random::<f64>().powf(1.0 / dim as f64) / n;
    g.iter().map(|v| v * s).collect()
}

/// `(1/√c) acosh(1 + 2c‖x−y‖² / ((1−c‖x‖²)(1−c‖y‖²)))`.
fn acosh_distance(x: &[f64], y: &[f64], c: f64) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (1.0 + 2.0 * c * diff / ((1.0 - c * sq(x)) * (1.0 - c * sq(y)))).acosh() / c.sqrt()
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut inv, mut sym, mut tri, mut add, mut radial, mut closed) = (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for cv in [0.5, 1.0, 2.0] {
        let c = Curvature::new(cv).unwrap();
        // 90% of the ball radius at this curvature
        let r = 0.9 / cv.sqrt();
        let pt = |v: Vec<f64>| PoincarePoint::new(v, c).unwrap();
        for _ in 0..1000 {
            let dim = rng.random_range(2..=6);
            let x = pt(uniform_ball(&mut rng, dim, r));
            let y = pt(uniform_ball(&mut rng, dim, r));
            let z = pt(uniform_ball(&mut rng, dim, r));

            let back = exp_map(&log_map(&x, &y).unwrap()).unwrap();
            inv = inv.max(back.coords().iter().zip(y.coords()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

            let dxy = poincare_distance(&x, &y).unwrap();
            sym = sym.max((dxy - poincare_distance(&y, &x).unwrap()).abs());
            tri = tri.max(dxy - poincare_distance(&x, &z).unwrap() - poincare_distance(&z, &y).unwrap());
            if dxy > 0.1 {
                closed = closed.max((dxy - acosh_distance(x.coords(), y.coords(), cv)).abs() / dxy);
            }

            let s = rng.random_range(0.02..0.98);
            let inner = pt(z.coords().iter().map(|v| s * v).collect());
            let gap = distance_from_origin(&z) - distance_from_origin(&inner) - poincare_distance(&inner, &z).unwrap();
            add = add.max(gap.abs());

            let edge = (1.0 - 1e-5) / cv.sqrt();
            let xn = x.norm();
            if xn > 1e-3 && edge / xn > 1.0 + 1e-9 {
                let s = rng.random_range(1.0 + 1e-9..edge / xn);
                let out = pt(x.coords().iter().map(|v| s * v).collect());
                radial = radial.max(exterior_angle(&x, &out).unwrap());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = inv < 1e-9
        && sym < 1e-12
        && tri < 1e-9
        && add < 1e-9
        && radial < 1e-9
        && closed < 1e-9
        && elapsed < Duration::from_secs(5);
    Outcome {
        id: 1,
        name: "geometry",
        pass,
        detail: format!(
            "exp/log {inv:.1e} (<1e-9), symmetry {sym:.1e} (<1e-12), triangle excess {:.1e} (<1e-9), \
             radial additivity {add:.1e} (<1e-9), radial angle {radial:.1e} (<1e-9), \
             acosh form rel {closed:.1e} (<1e-9), {:.2}s (<5s)",
            tri.max(0.0),
            secs(elapsed)
        ),
    }
}

// ---------------------------------------------------------------- gradients

/// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)` over all inputs.
fn fd_worst(f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Matrix]) -> f64 {
    let value = |m: &[Matrix]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = m.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&mut t, &vs);
    let g = t.backward(out).unwrap();
    let h = 1e-6;
    let mut worst = 0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vs.iter().enumerate() {
        let a = g.wrt(*v);
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let up = value(&probe);
            probe[k].data_mut()[j] = x0 - h;
            let down = value(&probe);
            probe[k].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * h);
            let an = a.data()[j];
            worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-3));
        }
    }
    worst
}

struct GradConfig {
    c: Curvature,
    logits: Matrix,
    emb: Matrix,
    protos: Matrix,
    labels: Vec<usize>,
    t_frac: f64,
    w: LossWeights,
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn mapped(m: &Matrix, c: Curvature) -> Vec<PoincarePoint> {
    let mut t = Tape::new();
    let v = t.constant(m.clone());
    let x = exp_map0_rows(&mut t, v, c);
    t.value(x).iter_rows().map(|r| PoincarePoint::new(r.to_vec(), c).unwrap()).collect()
}

impl GradConfig {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let c = Curvature::new([0.5, 1.0, 2.0][rng.random_range(0..3)]).unwrap();
        let (l, k, d) = (rng.random_range(3..=8), rng.random_range(2..=5), rng.random_range(2..=5));
        let sc = 1.0 / c.sqrt();
        GradConfig {
            c,
            logits: normal_matrix(rng, l, k, 1.5),
            emb: normal_matrix(rng, l, d, 0.6 * sc),
            protos: normal_matrix(rng, k, d, 0.5 * sc),
            labels: (0..l).map(|_| rng.random_range(0..k)).collect(),
            t_frac: rng.random(),
            w: LossWeights {
                margin_m: rng.random_range(0.5..3.0),
                aperture_k: rng.random_range(0.05..0.3),
                decay: [Decay::Exp, Decay::Linear, Decay::Cosine][rng.random_range(0..3)],
                ..LossWeights::default()
            },
        }
    }

    /// Away from every hinge, clamp and floor by at least 1e-3.
    fn non_singular(&self) -> bool {
        let sc = self.c.sqrt();
        let x = mapped(&self.emb, self.c);
        let z = mapped(&self.protos, self.c);
        let gap = 1e-3;
        if x.iter().chain(&z).any(|p| p.norm() * sc < 1e-2) {
            return false;
        }
        for w in x.windows(2) {
            let r = w[0].norm() * sc;
            let arg = self.w.aperture_k * (1.0 - r * r) / r;
            let th = exterior_angle(&w[0], &w[1]).unwrap();
            let al = aperture(&w[0], self.w.aperture_k).unwrap();
            if (arg - 1.0).abs() < gap || (th - al).abs() < gap || th < gap || th > std::f64::consts::PI - gap {
                return false;
            }
        }
        for i in 0..z.len() {
            for j in i + 1..z.len() {
                let d = poincare_distance(&z[i], &z[j]).unwrap();
                if d < gap || (d - self.w.margin_m).abs() < gap {
                    return false;
                }
            }
        }
        true
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let names = [
        "cross_entropy",
        "entailment",
        "margin",
        "push_pull",
        "geodesic_guidance",
        "stabilization_total",
        "guidance_total",
    ];
    let mut worst = [0f64; 7];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for (li, w_out) in worst.iter_mut().enumerate() {
        let mut done = 0;
        while done < 50 {
            let cfg = GradConfig::draw(&mut rng);
            if !cfg.non_singular() {
                continue;
            }
            let target = one_hot(&cfg.labels, cfg.logits.cols());
            let f = |t: &mut Tape, v: &[Var]| -> Var {
                let probs = t.softmax_rows(v[0]);
                let x = to_ball(t, v[1], cfg.c, None);
                let z = exp_map0_rows(t, v[2], cfg.c);
                let frozen = matches!(li, 4 | 6);
                let zb = BoundPrototypes { var: z, frozen, c: cfg.c };
                let inputs = LossInputs {
                    probs,
                    embeddings: x,
                    labels: &cfg.labels,
                    target: &target,
                    prototypes: &zb,
                    t_frac: cfg.t_frac,
                };
                match li {
                    0 => cross_entropy(t, probs, &target).unwrap(),
                    1 => temporal_entailment(t, x, cfg.w.aperture_k, cfg.c),
                    2 => prototype_margin(t, &zb, cfg.w.margin_m).unwrap(),
                    3 => push_pull(t, x, &zb, &cfg.labels, cfg.t_frac, cfg.w.decay).unwrap(),
                    4 => geodesic_guidance(t, x, &zb, &cfg.labels).unwrap(),
                    5 => stabilization_total(t, &inputs, &cfg.w).unwrap().0,
                    _ => guidance_total(t, &inputs, &cfg.w).unwrap().0,
                }
            };
            *w_out = w_out.max(fd_worst(&f, &[cfg.logits.clone(), cfg.emb.clone(), cfg.protos.clone()]));
            done += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&w| w < 1e-4) && elapsed < Duration::from_secs(30);
    let parts: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Outcome {
        id: 2,
        name: "gradients",
        pass,
        detail: format!(
            "worst relative error over 50 configs each: {} (<1e-4), {:.2}s (<30s)",
            parts.join(", "),
            secs(elapsed)
        ),
    }
}

// ---------------------------------------------------------------- sampler

fn sampler() -> Outcome {
    let total = 1000;
    let schedule = make_schedule(total, ScheduleKind::Cosine).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0f64;
    let mut vs_recurrence = 0f64;
    for steps in [1usize, 8, 25] {
        for trial in 0..10 {
            let classes = rng.random_range(2..=6);
            let len = rng.random_range(1..=80);
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
            let clean = label_encode(&labels, classes, 1.0).unwrap();
            let probs = one_hot(&labels, classes);
            let out = diffusion::sample(|_, _| Ok(probs.clone()), len, classes, steps, &schedule, trial).unwrap();
            worst = worst.max(out.signal.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

            // hand recurrence from the same starting noise
            let mut start_rng = ChaCha8Rng::seed_from_u64(trial);
            let mut y: Vec<f64> =
                (0..len * classes).map(|_| start_rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let mut ts: Vec<usize> = (1..=steps).rev().map(|i| total * i / steps).collect();
            ts.push(0);
            for w in ts.windows(2) {
                let (g, gp) = (schedule.gamma(w[0]), schedule.gamma(w[1]));
                for (yi, x0) in y.iter_mut().zip(clean.data()) {
                    *yi = gp.sqrt() * x0 + ((1.0 - gp) / (1.0 - g)).sqrt() * (*yi - g.sqrt() * x0);
                }
            }
            vs_recurrence = vs_recurrence.max(y.iter().zip(out.signal.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Outcome {
        id: 3,
        name: "sampler_oracle",
        pass: worst < 1e-6 && vs_recurrence < 1e-12,
        detail: format!(
            "steps {{1, 8, 25}}: max |Ŷ0 − Y0| = {worst:.1e} (<1e-6); sampler vs hand recurrence {vs_recurrence:.1e}"
        ),
    }
}

// ---------------------------------------------------------------- metrics

fn runs(labels: &[usize]) -> Vec<(usize, BTreeSet<usize>)> {
    let mut out: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some((last, frames)) if *last == l => {
                frames.insert(i);
            }
            _ => out.push((l, BTreeSet::from([i]))),
        }
    }
    out
}

fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    inter as f64 / a.union(b).count() as f64
}

/// Prediction-order greedy matching on frame sets, strict `> tau`,
/// earliest ground-truth segment on IoU ties.
fn greedy_tp(pred: &[usize], gt: &[usize], tau: f64) -> usize {
    let (p, g) = (runs(pred), runs(gt));
    let mut taken = vec![false; g.len()];
    let mut tp = 0;
    for (pl, pf) in &p {
        let mut best: Option<(usize, f64)> = None;
        for (j, (gl, gf)) in g.iter().enumerate() {
            if taken[j] || gl != pl {
                continue;
            }
            let iou = set_iou(pf, gf);
            match best {
                Some((_, b)) if iou <= b => {}
                _ => best = Some((j, iou)),
            }
        }
        if let Some((j, iou)) = best {
            if iou > tau {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Largest one-to-one matching with IoU above `tau`, by exhaustive search.
fn max_matching_tp(pred: &[usize], gt: &[usize], tau: f64) -> usize {
    let (p, g) = (runs(pred), runs(gt));
    fn go(i: usize, p: &[(usize, BTreeSet<usize>)], g: &[(usize, BTreeSet<usize>)], used: &mut Vec<bool>, tau: f64) -> usize {
        if i == p.len() {
            return 0;
        }
        let mut best = go(i + 1, p, g, used, tau);
        for j in 0..g.len() {
            if !used[j] && g[j].0 == p[i].0 && set_iou(&p[i].1, &g[j].1) > tau {
                used[j] = true;
                best = best.max(1 + go(i + 1, p, g, used, tau));
                used[j] = false;
            }
        }
        best
    }
    go(0, &p, &g, &mut vec![false; g.len()], tau)
}

fn lev(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let sub = lev(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let v = sub.min(lev(&a[1..], b, memo) + 1).min(lev(a, &b[1..], memo) + 1);
    memo.insert((a.len(), b.len()), v);
    v
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, classes: usize) -> Vec<usize> {
    // run-structured sequences so segments are non-trivial
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let l = rng.random_range(0..classes);
        let n = rng.random_range(1..=6).min(len - out.len());
        out.extend(std::iter::repeat(l).take(n));
    }
    out
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0usize;
    let mut above_max = 0usize;
    let mut greedy_below_max = 0usize;
    for _ in 0..1000 {
        let len = rng.random_range(1..=30);
        let classes = rng.random_range(1..=5);
        let (pred, gt) = if rng.random_bool(0.5) {
            (random_labels(&mut rng, len, classes), random_labels(&mut rng, len, classes))
        } else {
            let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
            (p, random_labels(&mut rng, len, classes))
        };
        let correct = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        if frame_accuracy(&pred, &gt).unwrap() != 100.0 * correct as f64 / len as f64 {
            mismatches += 1;
        }
        let (ps, gs): (Vec<usize>, Vec<usize>) = (runs(&pred).iter().map(|r| r.0).collect(), runs(&gt).iter().map(|r| r.0).collect());
        let d = lev(&ps, &gs, &mut HashMap::new());
        if edit_score(&pred, &gt).unwrap() != 100.0 * (1.0 - d as f64 / ps.len().max(gs.len()) as f64) {
            mismatches += 1;
        }
        for tau in OVERLAPS {
            let c = overlap_counts(&pred, &gt, tau).unwrap();
            let tp = greedy_tp(&pred, &gt, tau);
            if (c.tp, c.fp, c.fn_) != (tp, ps.len() - tp, gs.len() - tp) {
                mismatches += 1;
            }
            let best = max_matching_tp(&pred, &gt, tau);
            if tp > best {
                above_max += 1;
            }
            if tp < best {
                greedy_below_max += 1;
            }
        }
    }
    // worked example: pred [A, B, B, B] vs gt [A, A, B, B]
    let example = hybridtas::metrics::f1_at_overlap(&[0, 1, 1, 1], &[0, 0, 1, 1], 0.5).unwrap();
    let segs_ok = segments_from_labels(&[0, 1, 1, 1]).unwrap().len() == 2;
    Outcome {
        id: 4,
        name: "metrics_oracle",
        pass: mismatches == 0 && above_max == 0 && (example - 50.0).abs() < 1e-12 && segs_ok,
        detail: format!(
            "1000 pairs: {mismatches} disagreements with brute force (accuracy, edit, F1 counts at 10/25/50); \
             greedy above max matching {above_max} times, below it {greedy_below_max} times; \
             worked example F1@50 = {example:.1} (want 50.0)"
        ),
    }
}

// ---------------------------------------------------------------- desk runs

struct DeskRun {
    seed: u64,
    report: MetricsReport,
    one_step_avg: f64,
}

fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        epochs: DESK_EPOCHS,
        seed,
        ..RunConfig::default()
    }
}

fn desk_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn desk_runs(tweak: impl Fn(&mut RunConfig)) -> (Vec<DeskRun>, Duration) {
    let start = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let ds = desk_data(seed);
            let mut cfg = desk_config(seed);
            tweak(&mut cfg);
            let (ck, _) = train(&ds, &cfg).unwrap();
            let report = evaluate(&ck, &ds.test, cfg.infer_steps, seed).unwrap();
            let one_step_avg = evaluate(&ck, &ds.test, 1, seed).unwrap().avg();
            DeskRun {
                seed,
                report,
                one_step_avg,
            }
        })
        .collect();
    (runs, start.elapsed())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_end_to_end(hybrid: &[DeskRun], elapsed: Duration) -> Outcome {
    let ds = desk_data(0);
    let cfg = desk_config(0);
    let params = hybridtas::model::Denoiser::new(cfg.model_config(ds.feature_dim(), ds.num_classes()), 0)
        .unwrap()
        .param_count();
    let mean_len = mean(ds.train.iter().chain(&ds.test).map(|v| v.len() as f64));
    let w = cfg.weights;
    let defaults = (w.ce, w.entail, w.margin, w.pp, w.gg) == (0.5, 0.05, 0.1, 0.1, 0.1);
    let acc = mean(hybrid.iter().map(|r| r.report.acc));
    let edit = mean(hybrid.iter().map(|r| r.report.edit));
    let per_seed: Vec<String> = hybrid
        .iter()
        .map(|r| format!("seed {} acc {:.2} edit {:.2}", r.seed, r.report.acc, r.report.edit))
        .collect();
    Outcome {
        id: 5,
        name: "desk_end_to_end",
        pass: acc >= 90.0
            && edit >= 80.0
            && elapsed < Duration::from_secs(15 * 60)
            && defaults
            && cfg.e1() * 5 == cfg.epochs * 2
            && ds.num_classes() == 6
            && (ds.train.len(), ds.test.len()) == (40, 10),
        detail: format!(
            "mean acc {acc:.2} (>=90), mean edit {edit:.2} (>=80) [{}]; C=6, 40/10 videos, mean L {mean_len:.1}, \
             {params} parameters, {DESK_EPOCHS} epochs, E1={}, default weights {defaults}; {:.0}s (<900s)",
            per_seed.join("; "),
            cfg.e1(),
            secs(elapsed)
        ),
    }
}

fn phase_discipline() -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec {
        videos: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = RunConfig {
        epochs: 8,
        e1: Some(3),
        diffusion_steps: 100,
        infer_steps: 5,
        ..RunConfig::default()
    };
    let mut violations = Vec::new();
    let mut phase1_proto_grads = 0;
    let (ck, log) = train_observed(&ds, &cfg, &mut |r| {
        let p1 = r.epoch < 3;
        let expected = if p1 { Phase::Stabilization } else { Phase::Guidance };
        if r.phase != expected {
            violations.push(format!("epoch {} ran {}", r.epoch, r.phase));
        }
        if p1 {
            if r.parts.gg.is_some() {
                violations.push(format!("geodesic guidance evaluated in epoch {}", r.epoch));
            }
            if r.proto_grad.is_some_and(|g| g.max_abs() > 0.0) {
                phase1_proto_grads += 1;
            }
        } else {
            if r.parts.margin.is_some() || r.parts.pp.is_some() {
                violations.push(format!("margin or push-pull evaluated in epoch {}", r.epoch));
            }
            if r.proto_grad.is_some() {
                violations.push(format!("prototype gradient in epoch {}", r.epoch));
            }
        }
    })
    .unwrap();
    let frozen_sums: BTreeSet<&str> = log.epochs[2..].iter().map(|e| e.proto_checksum.as_str()).collect();
    let final_sum = hybridtas::trainer::prototype_checksum(&ck.prototypes);
    let constant = frozen_sums.len() == 1 && frozen_sums.contains(final_sum.as_str());
    let flips = log.epochs.windows(2).filter(|w| w[0].phase != w[1].phase).count();
    Outcome {
        id: 6,
        name: "phase_discipline",
        pass: violations.is_empty() && constant && flips == 1 && phase1_proto_grads > 0 && ck.prototypes.is_frozen(),
        detail: format!(
            "{} violations{}; prototype checksum constant from the end of epoch E1-1 on: {constant}; \
             phase flips {flips}; steps with prototype gradient in phase 1: {phase1_proto_grads}",
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(" (first: {v})"))
        ),
    }
}

fn ablation(hybrid: &[DeskRun], ce_only: &[DeskRun], one_step: &[DeskRun]) -> Outcome {
    let avg = |r: &[DeskRun]| mean(r.iter().map(|x| x.report.avg()));
    let (h, c, o) = (avg(hybrid), avg(ce_only), avg(one_step));
    let seeds: Vec<String> = SEEDS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "seed {s}: {:.2}/{:.2}/{:.2}",
                hybrid[i].report.avg(),
                ce_only[i].report.avg(),
                one_step[i].report.avg()
            )
        })
        .collect();
    Outcome {
        id: 7,
        name: "directional_ablation",
        pass: h >= c && h >= o,
        detail: format!(
            "mean Avg hybrid two-step {h:.2} vs CE-only {c:.2} (margin {:+.2}) vs one-step {o:.2} (margin {:+.2}); \
             per seed hybrid/ce/one-step [{}]",
            h - c,
            h - o,
            seeds.join("; ")
        ),
    }
}

fn inference_steps(hybrid: &[DeskRun]) -> Outcome {
    let many = mean(hybrid.iter().map(|r| r.report.avg()));
    let one = mean(hybrid.iter().map(|r| r.one_step_avg));
    let seeds: Vec<String> = hybrid
        .iter()
        .map(|r| format!("seed {}: {:.2} vs {:.2}", r.seed, r.report.avg(), r.one_step_avg))
        .collect();
    Outcome {
        id: 8,
        name: "inference_steps",
        pass: many >= one,
        detail: format!("mean Avg 25 steps {many:.2} vs 1 step {one:.2} (margin {:+.2}) [{}]", many - one, seeds.join("; ")),
    }
}

fn determinism() -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec {
        videos: 8,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = RunConfig {
        epochs: 4,
        diffusion_steps: 100,
        infer_steps: 10,
        seed: 17,
        ..RunConfig::default()
    };
    let (a, _) = train(&ds, &cfg).unwrap();
    let (b, _) = train(&ds, &cfg).unwrap();
    let bytes_a = encode_checkpoint(&a);
    let same_ck = bytes_a == encode_checkpoint(&b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.htck");
    save_checkpoint(&path, &a).unwrap();
    let loaded = load_checkpoint(&path, None).unwrap();
    let same_pred = ds.test.iter().enumerate().all(|(i, v)| {
        let p = infer_video(&a, &v.features, 10, i as u64).unwrap();
        let q = infer_video(&loaded, &v.features, 10, i as u64).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        p.labels == q.labels && bits(&p.probs) == bits(&q.probs) && bits(&p.embeddings) == bits(&q.embeddings)
    });
    let ck_roundtrip = encode_checkpoint(&decode_checkpoint(&bytes_a, Path::new("mem")).unwrap()) == bytes_a;

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let feats = Matrix::from_fn(37, 11, |_, _| rng.random_range(-1e3f32..1e3) as f64);
    let fbytes = encode_features(&feats).unwrap();
    let back = decode_features(&fbytes, Path::new("mem")).unwrap();
    let features_ok = back.data().iter().zip(feats.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        && encode_features(&back).unwrap() == fbytes;

    write_mapping(&dir.path().join("mapping.txt"), &ds.classes).unwrap();
    let map_text = std::fs::read_to_string(dir.path().join("mapping.txt")).unwrap();
    let map = parse_mapping(&map_text, Path::new("mapping.txt")).unwrap();
    let labels = &ds.test[0].labels;
    write_labels(&dir.path().join("l.txt"), labels, &map).unwrap();
    let ltext = std::fs::read_to_string(dir.path().join("l.txt")).unwrap();
    let labels_ok = map == ds.classes && &parse_labels(&ltext, &map, Path::new("l.txt")).unwrap() == labels;

    let text = config_text(&cfg);
    let config_ok = config_text(&parse_config(&text, Path::new("c")).unwrap()) == text;

    ds.write_dir(&dir.path().join("ds")).unwrap();
    let dataset_ok = Dataset::read_dir(&dir.path().join("ds")).unwrap() == ds;

    let all = [same_ck, same_pred, ck_roundtrip, features_ok, labels_ok, config_ok, dataset_ok];
    Outcome {
        id: 9,
        name: "determinism_serialization",
        pass: all.iter().all(|&b| b),
        detail: format!(
            "identical checkpoints {same_ck}, save/load predictions {same_pred}, checkpoint bytes {ck_roundtrip}, \
             features {features_ok}, labels+mapping {labels_ok}, config {config_ok}, dataset dir {dataset_ok}"
        ),
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        println!("{}", line(&o));
        outcomes.push(o.pass);
    };
    emit(geometry());
    emit(gradients());
    emit(sampler());
    emit(metrics());

    let (hybrid, hybrid_time) = desk_runs(|_| {});
    emit(desk_end_to_end(&hybrid, hybrid_time));
    emit(phase_discipline());
    let (ce_only, _) = desk_runs(|c| {
        c.weights.entail = 0.0;
        c.weights.margin = 0.0;
        c.weights.pp = 0.0;
        c.weights.gg = 0.0;
    });
    let (one_step, _) = desk_runs(|c| c.optimization = Optimization::OneStep);
    emit(ablation(&hybrid, &ce_only, &one_step));
    emit(inference_steps(&hybrid));
    emit(determinism());

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
