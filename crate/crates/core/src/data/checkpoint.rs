//! `HTCK` checkpoints.
//!
//! ```text
//! "HTCK"  u16 version (1)
//! u32 meta length, meta bytes       UTF-8 "key=value" lines
//! u32 section count
//! per section:
//!   u16 name length, name bytes
//!   u32 rows, u32 cols
//!   rows·cols f64 LE, row-major
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All integers are little-endian. The whole file is parsed and verified
//! before anything is returned, so a damaged file never yields a partial
//! checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::losses::Prototypes;
use crate::model::{Denoiser, DenoiserConfig};
use crate::optim::{AdamConfig, AdamState, RiemannianAdamState};
use crate::tensorgrad::Matrix;

pub const MAGIC: &[u8; 4] = b"HTCK";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub adam: AdamState,
    pub prototypes: RiemannianAdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub prototypes: Prototypes,
    /// Length `T` of the noise schedule the model was trained with.
    pub diffusion_steps: usize,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Tangent-norm clip applied before mapping embeddings into the ball.
    pub embed_clip: Option<f64>,
    pub config_hash: String,
    pub optimizer: Option<OptimizerState>,
}

fn clip_text(clip: Option<f64>) -> String {
    clip.map_or_else(|| "off".to_string(), |r| r.to_string())
}

fn parse_clip(v: &str) -> Option<Option<f64>> {
    match v {
        "off" => Some(None),
        _ => v.parse::<f64>().ok().filter(|r| *r > 0.0 && r.is_finite()).map(Some),
    }
}

fn meta_text(ck: &Checkpoint) -> String {
    let m = ck.model.config();
    let mut lines = vec![
        format!("feature_dim={}", m.feature_dim),
        format!("classes={}", m.classes),
        format!("embed_dim={}", m.embed_dim),
        format!("enc_layers={}", m.enc_layers),
        format!("enc_channels={}", m.enc_channels),
        format!("dec_layers={}", m.dec_layers),
        format!("kernel={}", m.kernel),
        format!("step_dim={}", m.step_dim),
        format!("curvature={}", ck.prototypes.curvature().value()),
        format!("frozen={}", ck.prototypes.is_frozen()),
        format!("diffusion_steps={}", ck.diffusion_steps),
        format!("epoch={}", ck.epoch),
        format!("embed_clip={}", clip_text(ck.embed_clip)),
        format!("config_hash={}", ck.config_hash),
    ];
    if let Some(o) = &ck.optimizer {
        for (prefix, c) in [("adam", o.adam.config), ("proto", o.prototypes.config)] {
            lines.push(format!("{prefix}.lr={}", c.lr));
            lines.push(format!("{prefix}.beta1={}", c.beta1));
            lines.push(format!("{prefix}.beta2={}", c.beta2));
            lines.push(format!("{prefix}.eps={}", c.eps));
        }
    }
    lines.join("\n")
}

fn push_section(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn step_matrix(step: u64) -> Matrix {
    Matrix::scalar(step as f64)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let layout = ck.model.config().layout();
    let mut sections: Vec<(String, &Matrix)> = layout
        .iter()
        .map(|(n, _)| n.clone())
        .zip(ck.model.params())
        .collect();
    sections.push(("prototypes".into(), ck.prototypes.points()));
    let steps;
    if let Some(o) = &ck.optimizer {
        for (i, (n, _)) in layout.iter().enumerate() {
            sections.push((format!("adam.m.{n}"), &o.adam.m[i]));
            sections.push((format!("adam.v.{n}"), &o.adam.v[i]));
        }
        sections.push(("proto.m".into(), &o.prototypes.m));
        sections.push(("proto.v".into(), &o.prototypes.v));
        steps = [step_matrix(o.adam.step), step_matrix(o.prototypes.step)];
        sections.push(("adam.step".into(), &steps[0]));
        sections.push(("proto.step".into(), &steps[1]));
    }

    let meta = meta_text(ck);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, m) in &sections {
        push_section(&mut out, name, m);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

fn parse_meta(text: &str, path: &Path) -> Result<HashMap<String, String>> {
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(path, format!("bad metadata line '{l}'")))
        })
        .collect()
}

fn meta_get<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str, path: &Path) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::format(path, format!("metadata lacks '{key}'")))?;
    v.parse()
        .map_err(|_| Error::format(path, format!("metadata '{key}' has bad value '{v}'")))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 + 2 + DIGEST_LEN {
        return Err(Error::format(path, "file too short for a checkpoint"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected HTCK)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(path, "checksum mismatch (file is damaged or truncated)"));
    }
    let meta_len = r.u32("metadata length")?;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta_str =
        std::str::from_utf8(meta_bytes).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    let meta = parse_meta(meta_str, path)?;

    let n = r.u32("section count")?;
    let mut sections: HashMap<String, Matrix> = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16("section name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| Error::format(path, "section name is not UTF-8"))?
            .to_string();
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::format(path, format!("section {name}: shape overflows")))?;
        let data = r
            .take(count, &format!("section {name}"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sections.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after the last section"));
    }

    let config = DenoiserConfig {
        feature_dim: meta_get(&meta, "feature_dim", path)?,
        classes: meta_get(&meta, "classes", path)?,
        embed_dim: meta_get(&meta, "embed_dim", path)?,
        enc_layers: meta_get(&meta, "enc_layers", path)?,
        enc_channels: meta_get(&meta, "enc_channels", path)?,
        dec_layers: meta_get(&meta, "dec_layers", path)?,
        kernel: meta_get(&meta, "kernel", path)?,
        step_dim: meta_get(&meta, "step_dim", path)?,
    };
    config.validate()?;
    let mut take = |name: &str| {
        sections
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing section '{name}'")))
    };
    let layout = config.layout();
    let mut params = Vec::with_capacity(layout.len());
    for (name, _) in &layout {
        params.push(take(name)?);
    }
    let model = Denoiser::from_params(config, params).map_err(|e| Error::format(path, e.to_string()))?;

    let c = Curvature::new(meta_get(&meta, "curvature", path)?)?;
    let mut prototypes = Prototypes::new(take("prototypes")?, c).map_err(|e| Error::format(path, e.to_string()))?;
    if prototypes.dim() != config.embed_dim || prototypes.len() != config.classes {
        return Err(Error::format(
            path,
            format!(
                "prototypes are {}x{}, model expects {}x{}",
                prototypes.len(),
                prototypes.dim(),
                config.classes,
                config.embed_dim
            ),
        ));
    }
    prototypes.set_frozen(meta_get(&meta, "frozen", path)?);

    let optimizer = if meta.contains_key("adam.lr") {
        let cfg = |p: &str| -> Result<AdamConfig> {
            Ok(AdamConfig {
                lr: meta_get(&meta, &format!("{p}.lr"), path)?,
                beta1: meta_get(&meta, &format!("{p}.beta1"), path)?,
                beta2: meta_get(&meta, &format!("{p}.beta2"), path)?,
                eps: meta_get(&meta, &format!("{p}.eps"), path)?,
            })
        };
        let mut adam = AdamState::new(cfg("adam")?, model.params());
        for (i, (n, shape)) in layout.iter().enumerate() {
            let (m, v) = (take(&format!("adam.m.{n}"))?, take(&format!("adam.v.{n}"))?);
            if m.shape() != *shape || v.shape() != *shape {
                return Err(Error::format(path, format!("optimizer moments for {n} have the wrong shape")));
            }
            adam.m[i] = m;
            adam.v[i] = v;
        }
        adam.step = take("adam.step")?.item() as u64;
        let mut proto = RiemannianAdamState::new(cfg("proto")?, &prototypes);
        proto.m = take("proto.m")?;
        proto.v = take("proto.v")?;
        if proto.m.shape() != prototypes.points().shape() || proto.v.shape() != proto.m.shape() {
            return Err(Error::format(path, "prototype optimizer moments have the wrong shape"));
        }
        proto.step = take("proto.step")?.item() as u64;
        Some(OptimizerState { adam, prototypes: proto })
    } else {
        None
    };
    if let Some(extra) = sections.keys().next() {
        return Err(Error::format(path, format!("unexpected section '{extra}'")));
    }

    let clip_raw: String = meta_get(&meta, "embed_clip", path)?;
    let embed_clip = parse_clip(&clip_raw)
        .ok_or_else(|| Error::format(path, format!("metadata 'embed_clip' has bad value '{clip_raw}'")))?;

    Ok(Checkpoint {
        model,
        prototypes,
        diffusion_steps: meta_get(&meta, "diffusion_steps", path)?,
        epoch: meta_get(&meta, "epoch", path)?,
        embed_clip,
        config_hash: meta_get(&meta, "config_hash", path)?,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

/// Loads a checkpoint. A differing `expected_hash` only logs a warning.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes, path)?;
    if let Some(h) = expected_hash {
        if h != ck.config_hash {
            log::warn!(
                "{}: trained with config {}, current config is {}",
                path.display(),
                ck.config_hash,
                h
            );
        }
    }
    Ok(ck)
}
