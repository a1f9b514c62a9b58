//! Datasets and file formats.
//!
//! A dataset directory looks like
//!
//! ```text
//! mapping.txt            "<index> <name>" per class
//! splits/train.txt       one video id per line
//! splits/test.txt
//! features/<id>.htfe     binary L×D features
//! groundTruth/<id>.txt   one class name per frame
//! ```

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod labels;
pub mod synthetic;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensorgrad::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use config::{apply_override, config_hash, config_text, parse_config, read_config, write_config};
pub use features::{read_features, write_features};
pub use labels::{read_labels, read_mapping, write_labels, write_mapping, ClassMap};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// One video: features and per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("video has no frames".into()));
        }
        Ok(VideoRecord {
            id: id.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassMap,
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .next()
            .map_or(0, |v| v.features.cols())
    }

    fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for v in self.train.iter().chain(&self.test) {
            if v.features.cols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.features.cols(),
                });
            }
            if let Some(&l) = v.labels.iter().find(|&&l| l >= self.classes.len()) {
                return Err(Error::OutOfRange(format!("video {}: label {l} has no class name", v.id)));
            }
        }
        Ok(())
    }

    /// Writes the directory layout described in the module docs.
    pub fn write_dir(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["features", "groundTruth", "splits"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_mapping(&root.join("mapping.txt"), &self.classes)?;
        for (name, videos) in [("train", &self.train), ("test", &self.test)] {
            let ids: String = videos.iter().map(|v| format!("{}\n", v.id)).collect();
            write_atomic(&root.join("splits").join(format!("{name}.txt")), ids.as_bytes())?;
            for v in videos {
                write_features(&features_path(root, &v.id), &v.features)?;
                write_labels(&labels_path(root, &v.id), &v.labels, &self.classes)?;
            }
        }
        Ok(())
    }

    pub fn read_dir(root: &Path) -> Result<Self> {
        let classes = read_mapping(&root.join("mapping.txt"))?;
        let split = |name: &str| -> Result<Vec<VideoRecord>> {
            read_split_ids(&root.join("splits").join(format!("{name}.txt")))?
                .into_iter()
                .map(|id| {
                    let f = read_features(&features_path(root, &id))?;
                    let l = read_labels(&labels_path(root, &id), &classes)?;
                    VideoRecord::new(id, f, l)
                })
                .collect()
        };
        let train = split("train")?;
        let test = split("test")?;
        let ds = Dataset { classes, train, test };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn features_path(root: &Path, id: &str) -> PathBuf {
    root.join("features").join(format!("{id}.htfe"))
}

pub fn labels_path(root: &Path, id: &str) -> PathBuf {
    root.join("groundTruth").join(format!("{id}.txt"))
}

/// Video ids listed one per line; blank lines are ignored.
pub fn read_split_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_dir_roundtrip() {
        let spec = SyntheticSpec {
            videos: 6,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        // generated features are already f32-representable
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = Dataset::read_dir(Path::new("/nonexistent/ds")).unwrap_err();
        assert!(err.to_string().contains("mapping.txt"));
    }
}
