//! Training loop, prototype lifecycle and single-video inference.
//!
//! Each epoch visits the training videos in a seeded random order, in
//! batches whose gradients are averaged before one optimizer step. Per
//! video, one diffusion step `t ∈ [1, T]` is drawn, the clean label signal
//! is corrupted to `t`, the condition is masked, and the phase objective is
//! assembled on a fresh tape. Prototypes follow their own Riemannian
//! optimizer during stabilization and are frozen for good at `E1`.

mod config;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{Optimization, RunConfig, DEFAULT_E1_RATIO, DEFAULT_EMBED_CLIP};

use crate::data::{config_hash, Checkpoint, Dataset, OptimizerState, VideoRecord};
use crate::diffusion::{self, label_encode, make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::geometry::{self, Curvature};
use crate::losses::{self, composite, cross_entropy, one_hot, total_for_epoch, LossInputs, Phase, Prototypes};
use crate::metrics::{segments_from_labels, DatasetMetrics, MetricsReport};
use crate::model::{mask_rows, Denoiser, MaskKind};
use crate::optim::{adam_step, riemannian_adam_step, AdamConfig, AdamState, RiemannianAdamState};
use crate::tensorgrad::{Matrix, Tape};

/// Prototypes start inside this radius (or `0.5/√c`, if smaller).
pub const PROTOTYPE_INIT_RADIUS: f64 = 0.1;

const PROTOTYPE_SEED_SALT: u64 = 0x5eed_0f_9e0;

/// `C` random points in a small ball around the origin, unfrozen.
pub fn init_prototypes(classes: usize, dim: usize, c: Curvature, seed: u64) -> Result<Prototypes> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 prototypes, got {classes}")));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("prototype dimension must be positive".into()));
    }
    let radius = PROTOTYPE_INIT_RADIUS.min(0.5 / c.sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROTOTYPE_SEED_SALT);
    loop {
        let dirs = diffusion::gaussian(classes, dim, &mut rng);
        let mut pts = Matrix::zeros(classes, dim);
        for i in 0..classes {
            let d = dirs.row(i);
            let n = geometry::norm_sq(d).sqrt().max(f64::MIN_POSITIVE);
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            for (p, v) in pts.row_mut(i).iter_mut().zip(d) {
                *p = r * v / n;
            }
        }
        let protos = Prototypes::new(pts, c)?;
        if protos.min_pairwise_distance() > 0.0 {
            return Ok(protos);
        }
    }
}

/// Hex SHA-256 of the prototype coordinates' bit patterns.
pub fn prototype_checksum(p: &Prototypes) -> String {
    let mut h = Sha256::new();
    for v in p.points().data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-epoch summary. Loss components are means over the epoch's videos;
/// a `None` component was not evaluated in this epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub ce: f64,
    pub aux_ce: Option<f64>,
    pub entail: Option<f64>,
    pub margin: Option<f64>,
    pub pp: Option<f64>,
    pub gg: Option<f64>,
    /// Smallest pairwise prototype distance after the epoch.
    pub proto_spread: f64,
    pub proto_checksum: String,
    pub frozen: bool,
    pub eval: Option<MetricsReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EpochLog {
    /// One `key=value` line in a fixed key order.
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} phase={} total={:.6} ce={:.6} aux_ce={} entail={} margin={} pp={} gg={} spread={:.6} frozen={} protos={}",
            self.epoch,
            self.phase,
            self.total,
            self.ce,
            opt(self.aux_ce),
            opt(self.entail),
            opt(self.margin),
            opt(self.pp),
            opt(self.gg),
            self.proto_spread,
            self.frozen,
            &self.proto_checksum[..16],
        );
        if let Some(r) = &self.eval {
            s.push(' ');
            s.push_str(&r.to_string());
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn lines(&self) -> String {
        self.epochs.iter().map(|e| e.line() + "\n").collect()
    }

    /// The last epoch that ran an evaluation.
    pub fn last_eval(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

/// What one training video contributed to an optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport<'a> {
    pub epoch: usize,
    pub phase: Phase,
    pub video: &'a str,
    pub t: usize,
    pub mask: MaskKind,
    pub parts: losses::LossBreakdown,
    pub aux_ce: Option<f64>,
    /// Gradient of this video's loss with respect to the prototypes, if any
    /// reached them.
    pub proto_grad: Option<&'a Matrix>,
}

#[derive(Default)]
struct Sums {
    n: usize,
    total: f64,
    ce: f64,
    aux: Option<f64>,
    entail: Option<f64>,
    margin: Option<f64>,
    pp: Option<f64>,
    gg: Option<f64>,
}

fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(x) = v {
        *acc = Some(acc.unwrap_or(0.0) + x);
    }
}

impl Sums {
    fn add(&mut self, p: &losses::LossBreakdown, aux: Option<f64>, total: f64) {
        self.n += 1;
        self.total += total;
        self.ce += p.ce;
        add_opt(&mut self.aux, aux);
        add_opt(&mut self.entail, p.entail);
        add_opt(&mut self.margin, p.margin);
        add_opt(&mut self.pp, p.pp);
        add_opt(&mut self.gg, p.gg);
    }

    fn mean(&self, v: Option<f64>) -> Option<f64> {
        v.map(|x| x / self.n as f64)
    }
}

fn non_finite_component(parts: &losses::LossBreakdown, aux: Option<f64>) -> Option<&'static str> {
    let checks = [
        ("cross_entropy", Some(parts.ce)),
        ("aux_cross_entropy", aux),
        ("temporal_entailment", parts.entail),
        ("prototype_margin", parts.margin),
        ("push_pull", parts.pp),
        ("geodesic_guidance", parts.gg),
    ];
    checks
        .into_iter()
        .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
        .map(|(n, _)| n)
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    schedule: NoiseSchedule,
    model: Denoiser,
    protos: Prototypes,
    adam: AdamState,
    proto_opt: RiemannianAdamState,
    classes: usize,
}

impl Trainer<'_> {
    /// Records one video's loss and returns its gradients.
    fn video_step(
        &self,
        video: &VideoRecord,
        phase: Phase,
        rng: &mut ChaCha8Rng,
        epoch: usize,
        observer: &mut dyn FnMut(&StepReport<'_>),
    ) -> Result<(Vec<Matrix>, Matrix, losses::LossBreakdown, Option<f64>, f64)> {
        let cfg = self.cfg;
        let l = video.len();
        let t = rng.random_range(1..=cfg.diffusion_steps);
        let noise = diffusion::gaussian(l, self.classes, rng);
        let mask = if cfg.masking {
            MaskKind::sample(rng)
        } else {
            MaskKind::None
        };
        let segments = segments_from_labels(&video.labels)?;
        let keep = mask_rows(l, mask, &segments, rng);

        let x0 = label_encode(&video.labels, self.classes, 1.0)?;
        let y_t = diffusion::forward_corrupt(&x0, t, &self.schedule, &noise)?;
        let target = one_hot(&video.labels, self.classes);

        let mut tape = Tape::new();
        let bp = self.model.bind(&mut tape);
        let enc = self.model.encode_on(&mut tape, &bp, &video.features)?;
        let dec = self.model.decode_on(&mut tape, &bp, &y_t, enc.cond, Some(&keep), t)?;
        let x = losses::to_ball(&mut tape, dec.emb, cfg.curvature, cfg.embed_clip);
        let zb = self.protos.bind(&mut tape);
        let inputs = LossInputs {
            probs: dec.probs,
            embeddings: x,
            labels: &video.labels,
            target: &target,
            prototypes: &zb,
            t_frac: t as f64 / cfg.diffusion_steps as f64,
        };
        let (mut total, parts) = match phase {
            Phase::Guidance => losses::guidance_total(&mut tape, &inputs, &cfg.weights)?,
            _ => composite(&mut tape, phase, &inputs, &cfg.weights)?,
        };
        let mut aux = None;
        if cfg.aux_head && cfg.weights.ce > 0.0 {
            let a = cross_entropy(&mut tape, enc.probs, &target)?;
            aux = Some(tape.value(a).item());
            let scaled = tape.scale(a, cfg.weights.ce);
            total = tape.add(total, scaled);
        }
        let total_value = tape.value(total).item();
        if let Some(name) = non_finite_component(&parts, aux) {
            return Err(Error::NonFinite(format!(
                "loss component {name} (epoch {epoch}, video {}, t={t})",
                video.id
            )));
        }
        let mut grads = tape.backward(total)?;
        let param_grads: Vec<Matrix> = bp.vars().iter().map(|&v| grads.wrt(v)).collect();
        let proto_grad = grads.take(zb.var);
        observer(&StepReport {
            epoch,
            phase,
            video: &video.id,
            t,
            mask,
            parts,
            aux_ce: aux,
            proto_grad: proto_grad.as_ref(),
        });
        let proto_grad = proto_grad.unwrap_or_else(|| Matrix::zeros(self.protos.len(), self.protos.dim()));
        Ok((param_grads, proto_grad, parts, aux, total_value))
    }
}

/// Trains on `dataset.train` and evaluates periodically on `dataset.test`.
pub fn train(dataset: &Dataset, cfg: &RunConfig) -> Result<(Checkpoint, TrainLog)> {
    train_observed(dataset, cfg, &mut |_| {})
}

/// [`train`] with a callback invoked after every video's backward pass.
pub fn train_observed(
    dataset: &Dataset,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&StepReport<'_>),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let classes = dataset.num_classes();
    let model = Denoiser::new(cfg.model_config(dataset.feature_dim(), classes), cfg.seed)?;
    let protos = init_prototypes(classes, cfg.embed_dim, cfg.curvature, cfg.seed)?;
    let adam = AdamState::new(cfg.adam, model.params());
    let proto_opt = RiemannianAdamState::new(
        AdamConfig {
            lr: cfg.proto_lr(),
            ..cfg.adam
        },
        &protos,
    );
    let mut tr = Trainer {
        cfg,
        schedule: make_schedule(cfg.diffusion_steps, ScheduleKind::Cosine)?,
        model,
        protos,
        adam,
        proto_opt,
        classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e1 = cfg.e1();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let phase = match cfg.optimization {
            Optimization::OneStep => Phase::Joint,
            Optimization::TwoStep => total_for_epoch(epoch, e1),
        };
        if phase == Phase::Guidance && !tr.protos.is_frozen() {
            tr.protos.freeze();
            log::info!("epoch={epoch} prototypes frozen spread={:.6}", tr.protos.min_pairwise_distance());
        }
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Matrix> = tr.model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            let mut proto_acc = Matrix::zeros(tr.protos.len(), tr.protos.dim());
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (g, pg, parts, aux, total) =
                    tr.video_step(&dataset.train[i], phase, &mut rng, epoch, observer)?;
                for (a, mut gi) in acc.iter_mut().zip(g) {
                    gi.scale_assign(inv);
                    a.add_assign(&gi);
                }
                let mut pg = pg;
                pg.scale_assign(inv);
                proto_acc.add_assign(&pg);
                sums.add(&parts, aux, total);
            }
            adam_step(tr.model.params_mut(), &acc, &mut tr.adam)?;
            if !tr.protos.is_frozen() {
                riemannian_adam_step(&mut tr.protos, &proto_acc, &mut tr.proto_opt)?;
            }
        }

        let last = epoch + 1 == cfg.epochs;
        let eval = if !dataset.test.is_empty() && ((epoch + 1) % cfg.eval_every() == 0 || last) {
            Some(evaluate_model(&tr.model, &tr.schedule, Ball { c: cfg.curvature, clip: cfg.embed_clip }, &dataset.test, cfg.infer_steps, cfg.seed)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            phase,
            total: sums.total / sums.n as f64,
            ce: sums.ce / sums.n as f64,
            aux_ce: sums.mean(sums.aux),
            entail: sums.mean(sums.entail),
            margin: sums.mean(sums.margin),
            pp: sums.mean(sums.pp),
            gg: sums.mean(sums.gg),
            proto_spread: tr.protos.min_pairwise_distance(),
            proto_checksum: prototype_checksum(&tr.protos),
            frozen: tr.protos.is_frozen(),
            eval,
        };
        log::info!("{}", entry.line());
        log.epochs.push(entry);
    }

    let checkpoint = Checkpoint {
        model: tr.model,
        prototypes: tr.protos,
        diffusion_steps: cfg.diffusion_steps,
        epoch: cfg.epochs,
        embed_clip: cfg.embed_clip,
        config_hash: config_hash(cfg),
        optimizer: Some(OptimizerState {
            adam: tr.adam,
            prototypes: tr.proto_opt,
        }),
    };
    Ok((checkpoint, log))
}

/// Prediction for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub labels: Vec<usize>,
    /// L×C probabilities from the final denoiser call.
    pub probs: Matrix,
    /// L×d points in the ball from the final denoiser call.
    pub embeddings: Matrix,
}

/// How decoder embeddings are mapped into the ball.
#[derive(Debug, Clone, Copy)]
struct Ball {
    c: Curvature,
    clip: Option<f64>,
}

impl Ball {
    fn of(ck: &Checkpoint) -> Self {
        Ball {
            c: ck.prototypes.curvature(),
            clip: ck.embed_clip,
        }
    }
}

fn infer_with(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    ball: Ball,
    features: &Matrix,
    steps: usize,
    seed: u64,
) -> Result<Inference> {
    let cfg = model.config();
    if features.cols() != cfg.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.feature_dim,
            got: features.cols(),
        });
    }
    let (cond, _) = model.encode(features)?;
    let mut last_emb = None;
    let out = diffusion::sample(
        |y, t| {
            let (emb, p) = model.decode(y, &cond, t)?;
            last_emb = Some(emb);
            Ok(p)
        },
        features.rows(),
        cfg.classes,
        steps,
        schedule,
        seed,
    )?;
    let emb = last_emb.expect("sampler calls the denoiser at least once");
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let x = losses::to_ball(&mut tape, e, ball.c, ball.clip);
    Ok(Inference {
        labels: out.probs.argmax_rows(),
        probs: out.probs,
        embeddings: tape.value(x).clone(),
    })
}

/// Runs the sampler with an unmasked condition and returns labels,
/// probabilities and ball embeddings.
pub fn infer_video(ck: &Checkpoint, features: &Matrix, steps: usize, seed: u64) -> Result<Inference> {
    let schedule = make_schedule(ck.diffusion_steps, ScheduleKind::Cosine)?;
    infer_with(&ck.model, &schedule, Ball::of(ck), features, steps, seed)
}

/// Per-video sampling seed used by [`evaluate`].
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn evaluate_model(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    ball: Ball,
    videos: &[VideoRecord],
    steps: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut m = DatasetMetrics::new();
    for (i, v) in videos.iter().enumerate() {
        let inf = infer_with(model, schedule, ball, &v.features, steps, video_seed(seed, i))?;
        m.add(&inf.labels, &v.labels)?;
    }
    m.report()
}

/// Dataset-level metrics of `ck` on `videos`.
pub fn evaluate(ck: &Checkpoint, videos: &[VideoRecord], steps: usize, seed: u64) -> Result<MetricsReport> {
    let schedule = make_schedule(ck.diffusion_steps, ScheduleKind::Cosine)?;
    evaluate_model(&ck.model, &schedule, Ball::of(ck), videos, steps, seed)
}
