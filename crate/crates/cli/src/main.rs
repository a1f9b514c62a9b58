//! `hybridtas` — generate data, train, infer, evaluate, self-check and
//! export embeddings.
//!
//! Exit status: 0 on success, 1 when the input or configuration is invalid
//! (including bad flags), 2 on internal failures such as a non-finite loss
//! or a failing self-check.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hybridtas::check;
use hybridtas::data::{
    apply_override, config_hash, generate_synthetic, load_checkpoint, read_config, read_labels, read_mapping,
    save_checkpoint, write_atomic, write_config, write_labels, Dataset, SyntheticSpec, VideoRecord,
};
use hybridtas::metrics::DatasetMetrics;
use hybridtas::trainer::{infer_video, train, video_seed, RunConfig};

#[derive(Parser)]
#[command(name = "hybridtas", version, about = "Hyperbolic-guided diffusion for temporal action segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        videos: usize,
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        /// Standard deviation of the per-frame feature noise.
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 2)]
        actions_per_task: usize,
        #[arg(long, default_value_t = 2)]
        shared_actions: usize,
    },
    /// Train on a dataset; writes model.htck, train.log and config.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` config override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict label files for every video in a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Compare prediction and ground-truth label directories.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class mapping; when given, unknown names are rejected.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Run the geometry, gradient and sampler self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per loss in the gradient suite.
        #[arg(long, default_value_t = check::GRADIENT_CONFIGS)]
        configs: usize,
    },
    /// Write per-frame ball coordinates and labels as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

/// Marks failures that are not the caller's fault.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Internal>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<hybridtas::Error>()) {
        Some(e) if !e.is_validation() => 2,
        _ => 1,
    }
}

fn videos(ds: &Dataset, split: Split) -> &[VideoRecord] {
    match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn gen_data(out: &Path, spec: &SyntheticSpec) -> Result<()> {
    let ds = generate_synthetic(spec)?;
    ds.write_dir(out)?;
    println!(
        "wrote {} train / {} test videos, {} classes, to {}",
        ds.train.len(),
        ds.test.len(),
        ds.num_classes(),
        out.display()
    );
    Ok(())
}

fn run_train(data: &Path, out: &Path, config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        apply_override(&mut cfg, o)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = Dataset::read_dir(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (ck, log) = train(&ds, &cfg)?;
    save_checkpoint(&out.join("model.htck"), &ck)?;
    write_atomic(&out.join("train.log"), log.lines().as_bytes())?;
    write_config(&out.join("config.txt"), &cfg)?;
    if let Some(r) = log.last_eval() {
        println!("{r}");
    }
    println!("config {} -> {}", &config_hash(&cfg)[..16], out.join("model.htck").display());
    Ok(())
}

fn run_infer(ck_path: &Path, data: &Path, out: &Path, steps: usize, seed: u64, split: Split) -> Result<()> {
    let ck = load_checkpoint(ck_path, None)?;
    let ds = Dataset::read_dir(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, v) in videos(&ds, split).iter().enumerate() {
        let inf = infer_video(&ck, &v.features, steps, video_seed(seed, i))?;
        write_labels(&out.join(format!("{}.txt", v.id)), &inf.labels, &ds.classes)?;
    }
    println!("wrote {} label files to {}", videos(&ds, split).len(), out.display());
    Ok(())
}

/// Label files in `dir`, by id, sorted.
fn label_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Label names as indices, interning names not seen before.
fn read_interned(path: &Path, table: &mut HashMap<String, usize>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|source| hybridtas::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let labels: Vec<usize> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| {
            let next = table.len();
            *table.entry(name.to_string()).or_insert(next)
        })
        .collect();
    if labels.is_empty() {
        return Err(hybridtas::Error::Format {
            path: path.to_path_buf(),
            msg: "label file is empty".into(),
        }
        .into());
    }
    Ok(labels)
}

fn run_eval(pred: &Path, gt: &Path, mapping: Option<&Path>) -> Result<()> {
    let map = mapping.map(read_mapping).transpose()?;
    let ids = label_ids(gt)?;
    if ids.is_empty() {
        bail!(hybridtas::Error::InvalidArgument(format!("no .txt label files in {}", gt.display())));
    }
    let mut table = HashMap::new();
    let mut m = DatasetMetrics::new();
    for id in &ids {
        let (pp, gp) = (pred.join(format!("{id}.txt")), gt.join(format!("{id}.txt")));
        let (p, g) = match &map {
            Some(map) => (read_labels(&pp, map)?, read_labels(&gp, map)?),
            None => (read_interned(&pp, &mut table)?, read_interned(&gp, &mut table)?),
        };
        m.add(&p, &g).with_context(|| format!("video {id}"))?;
    }
    let r = m.report()?;
    let mut s = String::new();
    for (k, v) in r.pairs() {
        let _ = writeln!(s, "{k:<6} {v:.2}");
    }
    print!("{s}");
    Ok(())
}

fn run_check(seed: u64, configs: usize) -> Result<()> {
    let suites = [
        check::geometry_suite(seed)?,
        check::gradient_suite(seed, configs)?,
        check::sampler_suite(seed)?,
    ];
    for s in &suites {
        println!("{s}");
    }
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.suite).collect();
    if !failed.is_empty() {
        return Err(Internal(format!("self-check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn run_export(ck_path: &Path, data: &Path, out: &Path, steps: usize, seed: u64, split: Split) -> Result<()> {
    let ck = load_checkpoint(ck_path, None)?;
    let ds = Dataset::read_dir(data)?;
    let dim = ck.model.config().embed_dim;
    let mut csv = String::from("video,frame,label,pred");
    for j in 0..dim {
        let _ = write!(csv, ",x{j}");
    }
    csv.push('\n');
    let name = |l: usize| ds.classes.name(l).unwrap_or("?");
    for (i, v) in videos(&ds, split).iter().enumerate() {
        let inf = infer_video(&ck, &v.features, steps, video_seed(seed, i))?;
        for (f, row) in inf.embeddings.iter_rows().enumerate() {
            let _ = write!(csv, "{},{f},{},{}", v.id, name(v.labels[f]), name(inf.labels[f]));
            for x in row {
                let _ = write!(csv, ",{x:e}");
            }
            csv.push('\n');
        }
    }
    write_atomic(out, csv.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            videos,
            feature_dim,
            noise,
            tasks,
            actions_per_task,
            shared_actions,
        } => gen_data(
            &out,
            &SyntheticSpec {
                num_tasks: tasks,
                actions_per_task,
                shared_actions,
                feature_dim,
                noise,
                videos,
                seed,
                ..SyntheticSpec::default()
            },
        ),
        Command::Train {
            data,
            out,
            config,
            overrides,
            seed,
        } => run_train(&data, &out, config.as_deref(), &overrides, seed),
        Command::Infer {
            checkpoint,
            data,
            out,
            steps,
            seed,
            split,
        } => run_infer(&checkpoint, &data, &out, steps, seed, split),
        Command::Eval { pred, gt, mapping } => run_eval(&pred, &gt, mapping.as_deref()),
        Command::Check { seed, configs } => run_check(seed, configs),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
            steps,
            seed,
            split,
        } => run_export(&checkpoint, &data, &out, steps, seed, split),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
