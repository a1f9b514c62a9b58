//! The denoiser: a dilated temporal-convolution encoder for the video
//! features and a timestep-conditioned decoder for the noisy label signal.
//!
//! ```text
//! F (L×D) ──encoder──► E (L×Ce) ──mask──┐
//!                      └─► P_enc        ├──decoder(t)──► emb (L×d) ──head──► P (L×C)
//! Y_t (L×C) ────────────────────────────┘
//! ```
//!
//! Parameters live in a flat, named list ([`Denoiser::params`]) so that
//! optimizers and checkpoints can treat them uniformly. Each forward pass
//! binds them to a fresh [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::Segment;
use crate::tensorgrad::{Matrix, Tape, Var};

/// Frames zeroed on each side of a segment boundary by [`MaskKind::Boundary`].
pub const BOUNDARY_HALF_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub feature_dim: usize,
    pub classes: usize,
    /// Decoder width; also the dimension of the embeddings sent to the ball.
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub enc_channels: usize,
    pub dec_layers: usize,
    pub kernel: usize,
    pub step_dim: usize,
}

impl DenoiserConfig {
    /// Desk-scale defaults for the given feature and class counts.
    pub fn new(feature_dim: usize, classes: usize) -> Self {
        DenoiserConfig {
            feature_dim,
            classes,
            embed_dim: 16,
            enc_layers: 4,
            enc_channels: 48,
            dec_layers: 4,
            kernel: 3,
            step_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("feature_dim", self.feature_dim),
            ("classes", self.classes),
            ("embed_dim", self.embed_dim),
            ("enc_layers", self.enc_layers),
            ("enc_channels", self.enc_channels),
            ("dec_layers", self.dec_layers),
            ("kernel", self.kernel),
            ("step_dim", self.step_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::OutOfRange(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::OutOfRange("need at least 2 classes".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::OutOfRange(format!("kernel width must be odd, got {}", self.kernel)));
        }
        if self.step_dim % 2 == 1 {
            return Err(Error::OutOfRange(format!("step_dim must be even, got {}", self.step_dim)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (d, ce, cd, c, k, s) = (
            self.feature_dim,
            self.enc_channels,
            self.embed_dim,
            self.classes,
            self.kernel,
            self.step_dim,
        );
        let mut out = vec![("enc.in.w".to_string(), (d, ce)), ("enc.in.b".to_string(), (1, ce))];
        for i in 0..self.enc_layers {
            out.push((format!("enc.{i}.conv"), (k * ce, ce)));
            out.push((format!("enc.{i}.conv_b"), (1, ce)));
            out.push((format!("enc.{i}.w"), (ce, ce)));
            out.push((format!("enc.{i}.b"), (1, ce)));
        }
        out.push(("enc.head.w".into(), (ce, c)));
        out.push(("enc.head.b".into(), (1, c)));
        out.push(("step.w".into(), (s, s)));
        out.push(("step.b".into(), (1, s)));
        out.push(("dec.in.y".into(), (c, cd)));
        out.push(("dec.in.e".into(), (ce, cd)));
        out.push(("dec.in.b".into(), (1, cd)));
        for i in 0..self.dec_layers {
            out.push((format!("dec.{i}.conv"), (k * cd, cd)));
            out.push((format!("dec.{i}.conv_b"), (1, cd)));
            out.push((format!("dec.{i}.step"), (s, cd)));
            out.push((format!("dec.{i}.w"), (cd, cd)));
            out.push((format!("dec.{i}.b"), (1, cd)));
        }
        out.push(("dec.head.w".into(), (cd, c)));
        out.push(("dec.head.b".into(), (1, c)));
        out
    }
}

/// Which part of the condition is hidden from the decoder during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskKind {
    #[default]
    None,
    /// Hide everything.
    Position,
    /// Hide frames around every segment boundary.
    Boundary,
    /// Hide one whole segment.
    Relation,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::None, MaskKind::Position, MaskKind::Boundary, MaskKind::Relation];

    /// Uniform draw over the four kinds.
    pub fn sample(rng: &mut ChaCha8Rng) -> MaskKind {
        Self::ALL[rng.random_range(0..4)]
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::None => "none",
            MaskKind::Position => "position",
            MaskKind::Boundary => "boundary",
            MaskKind::Relation => "relation",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mask kind '{s}'")))
    }
}

/// L×1 keep-mask (1 = keep, 0 = hide) for `kind`.
///
/// Boundary masking hides frames `b−w ..= b+w−1` around the first frame `b`
/// of every segment after the first. Relation masking with no segments
/// falls back to keeping everything.
pub fn mask_rows(len: usize, kind: MaskKind, segments: &[Segment], rng: &mut ChaCha8Rng) -> Matrix {
    let mut keep = Matrix::filled(len, 1, 1.0);
    match kind {
        MaskKind::None => {}
        MaskKind::Position => keep = Matrix::zeros(len, 1),
        MaskKind::Boundary => {
            let w = BOUNDARY_HALF_WIDTH;
            for s in segments.iter().skip(1) {
                let lo = s.start.saturating_sub(w);
                let hi = (s.start + w).min(len);
                for f in lo..hi {
                    keep.set(f, 0, 0.0);
                }
            }
        }
        MaskKind::Relation => {
            if segments.is_empty() {
                log::debug!("relation mask requested without segments; condition left intact");
            } else {
                let s = segments[rng.random_range(0..segments.len())];
                for f in s.start..=s.end.min(len.saturating_sub(1)) {
                    keep.set(f, 0, 0.0);
                }
            }
        }
    }
    keep
}

/// Returns `cond` with the rows hidden by `kind` zeroed.
pub fn apply_masking(cond: &Matrix, kind: MaskKind, segments: &[Segment], rng: &mut ChaCha8Rng) -> Matrix {
    let keep = mask_rows(cond.rows(), kind, segments, rng);
    Matrix::from_fn(cond.rows(), cond.cols(), |i, j| cond.get(i, j) * keep.get(i, 0))
}

/// Sinusoidal embedding of a diffusion step, `1×dim`.
pub fn step_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out.set(0, i, a.sin());
        out.set(0, half + i, a.cos());
    }
    out
}

/// The network's parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOut {
    /// L×Ce condition features.
    pub cond: Var,
    /// L×C auxiliary class probabilities.
    pub probs: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOut {
    /// L×d final-layer features, before the classification head.
    pub emb: Var,
    /// L×C class probabilities.
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<Matrix>,
}

impl Denoiser {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with('b') && r == 1 {
                    Matrix::zeros(r, c)
                } else {
                    let std = (1.0 / r as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                }
            })
            .collect();
        Ok(Denoiser { config, params })
    }

    /// Rebuilds a network from stored parameters; shapes must match the layout.
    pub fn from_params(config: DenoiserConfig, params: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: params.len(),
            });
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != *shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    fn check_rows(&self, what: &'static str, m: &Matrix, cols: usize) -> Result<()> {
        if m.cols() != cols {
            return Err(Error::ShapeMismatch {
                context: what,
                left: m.shape(),
                right: (m.rows(), cols),
            });
        }
        if m.rows() == 0 {
            return Err(Error::InvalidArgument(format!("{what} has no frames")));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Records the encoder on `tape` for an L×D feature matrix.
    pub fn encode_on(&self, tape: &mut Tape, bp: &BoundParams, features: &Matrix) -> Result<EncoderOut> {
        self.check_rows("features", features, self.config.feature_dim)?;
        let cfg = &self.config;
        let mut it = bp.vars.iter().copied();
        let mut next = || it.next().expect("layout covers every parameter");
        let f = tape.constant(features.clone());
        let (w, b) = (next(), next());
        let x = tape.matmul(f, w);
        let mut h = tape.add_row_bias(x, b);
        for i in 0..cfg.enc_layers {
            let (conv, conv_b, w, b) = (next(), next(), next(), next());
            let c = tape.conv1d(h, conv, cfg.kernel, 1 << i);
            let c = tape.add_row_bias(c, conv_b);
            let a = tape.relu(c);
            let o = tape.matmul(a, w);
            let o = tape.add_row_bias(o, b);
            h = tape.add(h, o);
        }
        let (hw, hb) = (next(), next());
        let logits = tape.matmul(h, hw);
        let logits = tape.add_row_bias(logits, hb);
        let probs = tape.softmax_rows(logits);
        Ok(EncoderOut { cond: h, probs })
    }

    fn encoder_param_count(&self) -> usize {
        2 + 4 * self.config.enc_layers + 2
    }

    /// Records the decoder on `tape`.
    ///
    /// `keep` is an optional L×1 mask applied to the condition.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        y_t: &Matrix,
        cond: Var,
        keep: Option<&Matrix>,
        t: usize,
    ) -> Result<DecoderOut> {
        let cfg = &self.config;
        self.check_rows("noisy labels", y_t, cfg.classes)?;
        let (l, ce) = tape.shape(cond);
        if l != y_t.rows() || ce != cfg.enc_channels {
            return Err(Error::ShapeMismatch {
                context: "decoder condition",
                left: (l, ce),
                right: (y_t.rows(), cfg.enc_channels),
            });
        }
        let cond = match keep {
            Some(k) => {
                if k.shape() != (l, 1) {
                    return Err(Error::ShapeMismatch {
                        context: "condition mask",
                        left: k.shape(),
                        right: (l, 1),
                    });
                }
                let kv = tape.constant(k.clone());
                tape.scale_rows(cond, kv)
            }
            None => cond,
        };
        let mut it = bp.vars[self.encoder_param_count()..].iter().copied();
        let mut next = || it.next().expect("layout covers every parameter");

        let (sw, sb) = (next(), next());
        let temb = tape.constant(step_embedding(t, cfg.step_dim));
        let s = tape.matmul(temb, sw);
        let s = tape.add_row_bias(s, sb);
        let s = tape.relu(s);

        let (wy, we, b) = (next(), next(), next());
        let y = tape.constant(y_t.clone());
        let hy = tape.matmul(y, wy);
        let he = tape.matmul(cond, we);
        let h0 = tape.add(hy, he);
        let mut h = tape.add_row_bias(h0, b);
        for i in 0..cfg.dec_layers {
            let (conv, conv_b, step, w, b) = (next(), next(), next(), next(), next());
            let c = tape.conv1d(h, conv, cfg.kernel, 1 << i);
            let c = tape.add_row_bias(c, conv_b);
            let sp = tape.matmul(s, step);
            let c = tape.add_row_bias(c, sp);
            let a = tape.relu(c);
            let o = tape.matmul(a, w);
            let o = tape.add_row_bias(o, b);
            h = tape.add(h, o);
        }
        let (hw, hb) = (next(), next());
        let logits = tape.matmul(h, hw);
        let logits = tape.add_row_bias(logits, hb);
        let probs = tape.softmax_rows(logits);
        Ok(DecoderOut { emb: h, probs })
    }

    /// Encoder values only: `(E, P_enc)`.
    pub fn encode(&self, features: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let bp = self.bind(&mut tape);
        let out = self.encode_on(&mut tape, &bp, features)?;
        Ok((tape.value(out.cond).clone(), tape.value(out.probs).clone()))
    }

    /// Decoder values only: `(emb, P)` for an unmasked condition.
    pub fn decode(&self, y_t: &Matrix, cond: &Matrix, t: usize) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let bp = self.bind(&mut tape);
        let c = tape.constant(cond.clone());
        let out = self.decode_on(&mut tape, &bp, y_t, c, None, t)?;
        Ok((tape.value(out.emb).clone(), tape.value(out.probs).clone()))
    }
}
