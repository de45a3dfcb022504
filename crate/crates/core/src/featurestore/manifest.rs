use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_features, read_labels, write_features, write_labels, Labels};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{stream, Rng};

/// Rows of a split, either as an explicit list or a half-open range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexSpec {
    List(Vec<usize>),
    Range { start: usize, end: usize },
}

impl IndexSpec {
    pub fn indices(&self) -> Vec<usize> {
        match self {
            IndexSpec::List(v) => v.clone(),
            IndexSpec::Range { start, end } => (*start..*end).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: IndexSpec,
    #[serde(default = "empty_split")]
    pub holdout: IndexSpec,
    pub test: IndexSpec,
}

fn empty_split() -> IndexSpec {
    IndexSpec::List(Vec::new())
}

/// On-disk dataset description. Paths are relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub inputs: PathBuf,
    pub pretrained: Vec<PathBuf>,
    pub labels: PathBuf,
    pub splits: SplitSpec,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Holds out the last `test_fraction` of rows for test; of the remaining
    /// training rows, every 10th position of a seeded shuffle is held out
    /// for β selection.
    pub fn protocol(n: usize, test_fraction: f64, seed: u64) -> Self {
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let n_fit = n - n_test.min(n);
        let mut order: Vec<usize> = (0..n_fit).collect();
        Rng::derive(seed, stream::SPLITS).shuffle(&mut order);
        let mut train = Vec::with_capacity(n_fit);
        let mut holdout = Vec::with_capacity(n_fit / 10 + 1);
        for (pos, idx) in order.into_iter().enumerate() {
            if pos % 10 == 0 {
                holdout.push(idx);
            } else {
                train.push(idx);
            }
        }
        train.sort_unstable();
        holdout.sort_unstable();
        Self {
            train,
            holdout,
            test: (n_fit..n).collect(),
        }
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, idx) in [
            ("train", &self.train),
            ("holdout", &self.holdout),
            ("test", &self.test),
        ] {
            for &i in idx {
                if i >= n_rows {
                    return Err(Error::Manifest(format!(
                        "split {name} references row {i} but the dataset has {n_rows} rows"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Manifest(format!(
                        "row {i} appears in more than one split (or twice in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Training rows plus held-out rows, sorted.
    pub fn train_full(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.holdout).copied().collect();
        all.sort_unstable();
        all
    }

    fn to_spec(&self) -> SplitSpec {
        let as_spec = |v: &[usize]| match (v.first(), v.last()) {
            (Some(&a), Some(&b)) if b + 1 - a == v.len() && v.windows(2).all(|w| w[1] == w[0] + 1) => {
                IndexSpec::Range { start: a, end: b + 1 }
            }
            _ => IndexSpec::List(v.to_vec()),
        };
        SplitSpec {
            train: as_spec(&self.train),
            holdout: as_spec(&self.holdout),
            test: as_spec(&self.test),
        }
    }
}

/// Pre-trained features from one or more sources, concatenated column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatFeatures {
    pub matrix: Matrix,
    pub source_dims: Vec<usize>,
}

impl ConcatFeatures {
    pub fn d_psi(&self) -> usize {
        self.matrix.cols()
    }
}

/// Reads every source and concatenates their columns in the given order.
pub fn concat_sources<P: AsRef<Path>>(files: &[P]) -> Result<ConcatFeatures> {
    let mats = files
        .iter()
        .map(|p| read_features(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = files
        .iter()
        .map(|p| p.as_ref().display().to_string())
        .collect();
    concat_matrices(&mats, &names)
}

pub fn concat_matrices(mats: &[Matrix], names: &[String]) -> Result<ConcatFeatures> {
    let Some(first) = mats.first() else {
        return Err(Error::Manifest("no pre-trained feature sources".into()));
    };
    for (m, name) in mats.iter().zip(names).skip(1) {
        if m.rows() != first.rows() {
            return Err(Error::Manifest(format!(
                "row-count mismatch: {} has {} rows but {} has {}",
                names[0],
                first.rows(),
                name,
                m.rows()
            )));
        }
    }
    let refs: Vec<&Matrix> = mats.iter().collect();
    Ok(ConcatFeatures {
        matrix: Matrix::hconcat(&refs)?,
        source_dims: mats.iter().map(Matrix::cols).collect(),
    })
}

/// A fully loaded dataset: downstream inputs, concatenated pre-trained
/// features, labels and splits, all row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub psi: Matrix,
    pub source_dims: Vec<usize>,
    pub labels: Labels,
    pub splits: Splits,
}

/// Paths and SHA-256 checksums of the files a dataset was written to.
#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub manifest: PathBuf,
    pub files: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn new(inputs: Matrix, psi: Matrix, labels: Labels, splits: Splits) -> Result<Self> {
        let source_dims = vec![psi.cols()];
        let ds = Self {
            inputs,
            psi,
            source_dims,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_rows(&self) -> usize {
        self.inputs.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.n_classes
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.rows();
        if self.psi.rows() != n || self.labels.len() != n {
            return Err(Error::Manifest(format!(
                "row-count mismatch: inputs {n}, pre-trained {}, labels {}",
                self.psi.rows(),
                self.labels.len()
            )));
        }
        self.splits.validate(n)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let inputs_path = resolve(&manifest.inputs);
        let inputs = read_features(&inputs_path)?;
        let psi_paths: Vec<PathBuf> = manifest.pretrained.iter().map(|p| resolve(p)).collect();
        let labels_path = resolve(&manifest.labels);
        let labels = read_labels(&labels_path)?;

        let psi = concat_sources(&psi_paths)?;
        let n = inputs.rows();
        for (path, rows) in psi_paths
            .iter()
            .map(|p| (p, psi.matrix.rows()))
            .chain(std::iter::once((&labels_path, labels.len())))
        {
            if rows != n {
                return Err(Error::Manifest(format!(
                    "row-count mismatch: {} has {n} rows but {} has {rows}",
                    inputs_path.display(),
                    path.display()
                )));
            }
        }

        let splits = Splits {
            train: manifest.splits.train.indices(),
            holdout: manifest.splits.holdout.indices(),
            test: manifest.splits.test.indices(),
        };
        let ds = Self {
            inputs,
            psi: psi.matrix,
            source_dims: psi.source_dims,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes `inputs.aftf`, `pretrained.aftf`, `labels.aftl` and
    /// `manifest.toml` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<WrittenDataset> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let inputs = dir.join("inputs.aftf");
        let pretrained = dir.join("pretrained.aftf");
        let labels = dir.join("labels.aftl");
        write_features(&self.inputs, &inputs)?;
        write_features(&self.psi, &pretrained)?;
        write_labels(&self.labels, &labels)?;

        let manifest = DatasetManifest {
            inputs: "inputs.aftf".into(),
            pretrained: vec!["pretrained.aftf".into()],
            labels: "labels.aftl".into(),
            splits: self.splits.to_spec(),
        };
        let manifest_path = dir.join("manifest.toml");
        fs::write(&manifest_path, manifest.to_toml()).map_err(|e| Error::io(&manifest_path, e))?;

        let mut files = Vec::new();
        for p in [manifest_path.clone(), inputs, pretrained, labels] {
            let sum = super::format::file_checksum(&p)?;
            files.push((p, sum));
        }
        Ok(WrittenDataset {
            manifest: manifest_path,
            files,
        })
    }

    /// Same rows and splits with `psi` replaced.
    pub fn with_psi(&self, psi: Matrix, source_dims: Vec<usize>) -> Result<Self> {
        let ds = Self {
            psi,
            source_dims,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }
}
