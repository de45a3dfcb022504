//! Named tensors stored as feature files next to a TOML index.
//!
//! `run.ckpt` lists every tensor with its shape and file name; each tensor
//! lives in `run.ckpt.<name>.aftf`. Values are narrowed to f32 on write.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{read_features, write_features};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Matrix>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path
            .file_name()
            .ok_or_else(|| Error::Usage(format!("bad checkpoint path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let mut written = vec![path.to_path_buf()];
        let mut entries = Vec::new();
        for (name, m) in &self.tensors {
            let file = format!("{stem}.{name}.aftf");
            let p = dir.join(&file);
            write_features(m, &p)?;
            written.push(p);
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                file,
            });
        }
        let index = Index {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&index).expect("index serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(written)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: Index = toml::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let mut ckpt = Checkpoint {
            meta: index.meta,
            ..Default::default()
        };
        for entry in index.tensors {
            let m = read_features(dir.join(&entry.file))?;
            if m.shape() != (entry.rows, entry.cols) {
                return Err(Error::dim("checkpoint tensor", (entry.rows, entry.cols), m.shape()));
            }
            ckpt.insert(entry.name, m);
        }
        Ok(ckpt)
    }
}
