//! `key = value` run configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys and repeated keys are errors. Missing keys keep their
//! defaults (see [`RunConfig::default`]).
//!
//! | key | default |
//! |-----|---------|
//! | `lambda_ce`, `lambda_entail`, `lambda_margin`, `lambda_pp`, `lambda_gg` | 0.5, 0.05, 0.1, 0.1, 0.1 |
//! | `margin`, `aperture_k`, `decay` | 2.0, 0.1, `exp` |
//! | `curvature` | 1.0 |
//! | `epochs`, `e1` | 60, round(0.4·epochs) |
//! | `batch_size`, `lr`, `proto_lr`, `beta1`, `beta2`, `adam_eps` | 4, 5e-4, = lr, 0.9, 0.999, 1e-8 |
//! | `diffusion_steps`, `infer_steps` | 1000, 25 |
//! | `seed` | 0 |
//! | `optimization` | `two_step` (or `one_step`) |
//! | `aux_head`, `masking` | true, true |
//! | `embed_dim`, `enc_channels`, `enc_layers`, `dec_layers`, `kernel`, `step_dim` | 16, 48, 4, 4, 3, 64 |
//! | `eval_every` | max(1, epochs/20) |
//! | `embed_clip` | 1.0 (a positive number, or `off`) |

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::trainer::RunConfig;

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

/// Sets one key. The error string is the message without location.
fn set_key(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let w = &mut cfg.weights;
    match key {
        "lambda_ce" => w.ce = num(key, v)?,
        "lambda_entail" => w.entail = num(key, v)?,
        "lambda_margin" => w.margin = num(key, v)?,
        "lambda_pp" => w.pp = num(key, v)?,
        "lambda_gg" => w.gg = num(key, v)?,
        "margin" => w.margin_m = num(key, v)?,
        "aperture_k" => w.aperture_k = num(key, v)?,
        "decay" => w.decay = v.parse().map_err(|e: Error| e.to_string())?,
        "curvature" => {
            cfg.curvature = Curvature::new(num(key, v)?).map_err(|e| format!("curvature: {e}"))?;
        }
        "epochs" => cfg.epochs = num(key, v)?,
        "e1" => cfg.e1 = Some(num(key, v)?),
        "batch_size" => cfg.batch_size = num(key, v)?,
        "lr" => cfg.adam.lr = num(key, v)?,
        "proto_lr" => cfg.proto_lr = Some(num(key, v)?),
        "beta1" => cfg.adam.beta1 = num(key, v)?,
        "beta2" => cfg.adam.beta2 = num(key, v)?,
        "adam_eps" => cfg.adam.eps = num(key, v)?,
        "diffusion_steps" => cfg.diffusion_steps = num(key, v)?,
        "infer_steps" => cfg.infer_steps = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "optimization" => cfg.optimization = v.parse().map_err(|e: Error| e.to_string())?,
        "aux_head" => cfg.aux_head = flag(key, v)?,
        "masking" => cfg.masking = flag(key, v)?,
        "embed_dim" => cfg.embed_dim = num(key, v)?,
        "enc_channels" => cfg.enc_channels = num(key, v)?,
        "enc_layers" => cfg.enc_layers = num(key, v)?,
        "dec_layers" => cfg.dec_layers = num(key, v)?,
        "kernel" => cfg.kernel = num(key, v)?,
        "step_dim" => cfg.step_dim = num(key, v)?,
        "eval_every" => cfg.eval_every = Some(num(key, v)?),
        "embed_clip" => cfg.embed_clip = if v == "off" { None } else { Some(num(key, v)?) },
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), String>> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return None;
    }
    Some(match body.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() && !v.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected 'key = value', got '{body}'")),
    })
}

/// Parses configuration text on top of the defaults.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let Some(kv) = split_line(line) else { continue };
        let (k, v) = kv.map_err(err)?;
        if !seen.insert(k.to_string()) {
            return Err(err(format!("key '{k}' given twice")));
        }
        set_key(&mut cfg, k, v).map_err(err)?;
    }
    cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Applies one `key=value` override and revalidates.
pub fn apply_override(cfg: &mut RunConfig, assignment: &str) -> Result<()> {
    let (k, v) = assignment
        .split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("override must be key=value, got '{assignment}'")))?;
    let mut next = cfg.clone();
    set_key(&mut next, k, v).map_err(Error::InvalidArgument)?;
    next.validate()?;
    *cfg = next;
    Ok(())
}

/// Canonical text with every key spelled out and derived values resolved.
pub fn config_text(cfg: &RunConfig) -> String {
    let w = &cfg.weights;
    let entries: Vec<(&str, String)> = vec![
        ("lambda_ce", w.ce.to_string()),
        ("lambda_entail", w.entail.to_string()),
        ("lambda_margin", w.margin.to_string()),
        ("lambda_pp", w.pp.to_string()),
        ("lambda_gg", w.gg.to_string()),
        ("margin", w.margin_m.to_string()),
        ("aperture_k", w.aperture_k.to_string()),
        ("decay", w.decay.to_string()),
        ("curvature", cfg.curvature.value().to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("e1", cfg.e1().to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr", cfg.adam.lr.to_string()),
        ("proto_lr", cfg.proto_lr().to_string()),
        ("beta1", cfg.adam.beta1.to_string()),
        ("beta2", cfg.adam.beta2.to_string()),
        ("adam_eps", cfg.adam.eps.to_string()),
        ("diffusion_steps", cfg.diffusion_steps.to_string()),
        ("infer_steps", cfg.infer_steps.to_string()),
        ("seed", cfg.seed.to_string()),
        ("optimization", cfg.optimization.to_string()),
        ("aux_head", cfg.aux_head.to_string()),
        ("masking", cfg.masking.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("enc_channels", cfg.enc_channels.to_string()),
        ("enc_layers", cfg.enc_layers.to_string()),
        ("dec_layers", cfg.dec_layers.to_string()),
        ("kernel", cfg.kernel.to_string()),
        ("step_dim", cfg.step_dim.to_string()),
        ("eval_every", cfg.eval_every().to_string()),
        ("embed_clip", cfg.embed_clip.map_or_else(|| "off".to_string(), |r| r.to_string())),
    ];
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(path, config_text(cfg).as_bytes())
}

/// SHA-256 of the canonical text, hex encoded.
pub fn config_hash(cfg: &RunConfig) -> String {
    Sha256::digest(config_text(cfg).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Decay;
    use crate::trainer::Optimization;

    fn p() -> &'static Path {
        Path::new("run.cfg")
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("", p()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let w = cfg.weights;
        assert_eq!((w.ce, w.entail, w.margin, w.pp, w.gg), (0.5, 0.05, 0.1, 0.1, 0.1));
        assert_eq!((w.margin_m, w.aperture_k, w.decay), (2.0, 0.1, Decay::Exp));
        assert_eq!(cfg.curvature.value(), 1.0);
        assert_eq!((cfg.diffusion_steps, cfg.infer_steps, cfg.batch_size), (1000, 25, 4));
        assert_eq!(cfg.adam.lr, 5e-4);
        assert_eq!(cfg.e1() as f64 / cfg.epochs as f64, 0.4);
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = parse_config(
            "# ablation\ndecay = cosine\nepochs = 10 # short\noptimization = one_step\naux_head = false\n",
            p(),
        )
        .unwrap();
        assert_eq!(cfg.weights.decay, Decay::Cosine);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.e1(), 4);
        assert_eq!(cfg.optimization, Optimization::OneStep);
        assert!(!cfg.aux_head);
    }

    #[test]
    fn embed_clip_accepts_off_and_positive_radii() {
        assert_eq!(parse_config("", p()).unwrap().embed_clip, Some(1.0));
        assert_eq!(parse_config("embed_clip = off\n", p()).unwrap().embed_clip, None);
        assert_eq!(parse_config("embed_clip = 0.25\n", p()).unwrap().embed_clip, Some(0.25));
        assert!(parse_config("embed_clip = 0\n", p()).is_err());
        assert!(parse_config("embed_clip = -1\n", p()).is_err());
        let mut cfg = RunConfig::default();
        apply_override(&mut cfg, "embed_clip=off").unwrap();
        assert!(config_text(&cfg).contains("embed_clip = off"));
        assert_eq!(parse_config(&config_text(&cfg), p()).unwrap().embed_clip, None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_config("epochs = 5\ncurvature = 0\n", p()).unwrap_err();
        assert!(err.to_string().starts_with("run.cfg:2:"), "{err}");
        let err = parse_config("\n\nfoo = 1\n", p()).unwrap_err();
        assert!(err.to_string().contains(":3:") && err.to_string().contains("unknown key"), "{err}");
        assert!(parse_config("epochs 5\n", p()).is_err());
        assert!(parse_config("epochs = 5\nepochs = 6\n", p()).is_err());
        assert!(parse_config("epochs = 5\ne1 = 6\n", p()).is_err());
        assert!(parse_config("infer_steps = 0\n", p()).is_err());
        assert!(parse_config("lambda_pp = -1\n", p()).is_err());
    }

    #[test]
    fn overrides_and_canonical_roundtrip() {
        let mut cfg = RunConfig::default();
        apply_override(&mut cfg, "lambda_gg=0").unwrap();
        apply_override(&mut cfg, "curvature = 2").unwrap();
        assert_eq!(cfg.weights.gg, 0.0);
        assert!(apply_override(&mut cfg, "curvature=-1").is_err());
        assert!(apply_override(&mut cfg, "nonsense").is_err());
        assert_eq!(cfg.curvature.value(), 2.0);

        let back = parse_config(&config_text(&cfg), p()).unwrap();
        assert_eq!(config_text(&back), config_text(&cfg));
        assert_eq!(config_hash(&back), config_hash(&cfg));
        assert_ne!(config_hash(&cfg), config_hash(&RunConfig::default()));
        assert_eq!(config_hash(&cfg).len(), 64);
    }
}
