//! Frame-per-line label files and the `index name` class mapping.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};

/// Bidirectional class index ↔ name table with contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("class name '{n}' is empty or has whitespace")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class name '{n}'")));
            }
        }
        Ok(ClassMap { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.names.get(i).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub fn parse_mapping(text: &str, path: &Path) -> Result<ClassMap> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        let (Some(idx), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected '<index> <name>', got '{line}'")));
        };
        let idx: usize = idx.parse().map_err(|_| err(format!("bad class index '{idx}'")))?;
        entries.push((idx, name.to_string(), n + 1));
    }
    if entries.is_empty() {
        return Err(Error::format(path, "mapping file is empty"));
    }
    entries.sort_by_key(|e| e.0);
    for (expected, (idx, _, line)) in entries.iter().enumerate() {
        if *idx != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("class indices must be contiguous from 0; expected {expected}, found {idx}"),
            });
        }
    }
    ClassMap::new(entries.into_iter().map(|e| e.1).collect()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_mapping(path: &Path) -> Result<ClassMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mapping(&text, path)
}

pub fn write_mapping(path: &Path, map: &ClassMap) -> Result<()> {
    let text: String = map.names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn parse_labels(text: &str, map: &ClassMap, path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let idx = map.index_of(name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("unknown class name '{name}'"),
        })?;
        out.push(idx);
    }
    if out.is_empty() {
        return Err(Error::format(path, "label file is empty"));
    }
    Ok(out)
}

pub fn read_labels(path: &Path, map: &ClassMap) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, map, path)
}

pub fn write_labels(path: &Path, labels: &[usize], map: &ClassMap) -> Result<()> {
    let mut text = String::new();
    for (i, &l) in labels.iter().enumerate() {
        let name = map
            .name(l)
            .ok_or_else(|| Error::OutOfRange(format!("label {l} at frame {i} has no class name")))?;
        text.push_str(name);
        text.push('\n');
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty label file".into()));
    }
    write_atomic(path, text.as_bytes())
}
