//! Feature-vector datasets, seeded partitions and batch cycling.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Targets, TaskKind};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub targets: Targets,
    pub task: TaskKind,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, targets: Targets, task: TaskKind) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != targets.len() {
            return Err(Error::Input(format!("{n} feature rows but {} targets", targets.len())));
        }
        if !features.is_finite() {
            return Err(Error::Input("non-finite feature value".into()));
        }
        match (&targets, task) {
            (Targets::Classes(c), TaskKind::Classification { classes }) => {
                if let Some(bad) = c.iter().find(|&&l| l >= classes) {
                    return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
                }
            }
            (Targets::Reals(r), TaskKind::Regression) => {
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input("non-finite regression target".into()));
                }
            }
            _ => return Err(Error::Input("target type does not match task kind".into())),
        }
        Ok(Dataset {
            name: name.into(),
            features,
            targets,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Rows `indices` as a batch tensor and matching targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let d = self.dim();
        let mut feats = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("row {i} out of range for {} rows", self.len())));
            }
            feats.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Reals(r) => Targets::Reals(indices.iter().map(|&i| r[i]).collect()),
        };
        Ok((Tensor::new(&[indices.len(), d], feats)?, targets))
    }

    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let (features, targets) = self.batch(indices)?;
        Dataset::new(name, features, targets, self.task)
    }

    pub fn all(&self) -> Result<(Tensor, Targets)> {
        Ok((self.features.clone(), self.targets.clone()))
    }

    /// Reads a CSV with header `f0,…,f{D-1},label`.
    pub fn load_csv(path: impl AsRef<Path>, task: TaskKind) -> Result<Dataset> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        let cols = headers.len();
        if cols < 2 || &headers[cols - 1] != "label" {
            return Err(Error::Input(format!("{}: last column must be `label`", path.display())));
        }
        for (j, h) in headers.iter().take(cols - 1).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::Input(format!("{}: column {j} is `{h}`, expected `f{j}`", path.display())));
            }
        }
        let d = cols - 1;
        let mut feats = Vec::new();
        let mut classes = Vec::new();
        let mut reals = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let row = line + 2;
            for j in 0..d {
                let field = rec[j].trim();
                if field.is_empty() {
                    return Err(Error::Input(format!("{}:{row}: missing value in f{j}", path.display())));
                }
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Input(format!("{}:{row}: bad number `{field}`", path.display())))?;
                feats.push(v);
            }
            let label = rec[d].trim();
            if label.is_empty() {
                return Err(Error::Input(format!("{}:{row}: missing label", path.display())));
            }
            match task {
                TaskKind::Classification { .. } => classes.push(
                    label
                        .parse::<usize>()
                        .map_err(|_| Error::Input(format!("{}:{row}: bad class `{label}`", path.display())))?,
                ),
                TaskKind::Regression => reals.push(
                    label
                        .parse::<f64>()
                        .map_err(|_| Error::Input(format!("{}:{row}: bad target `{label}`", path.display())))?,
                ),
            }
        }
        let n = feats.len() / d;
        if n == 0 {
            return Err(Error::Input(format!("{}: no rows", path.display())));
        }
        let targets = match task {
            TaskKind::Classification { .. } => Targets::Classes(classes),
            TaskKind::Regression => Targets::Reals(reals),
        };
        let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
        Dataset::new(name, Tensor::new(&[n, d], feats)?, targets, task)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(match &self.targets {
                Targets::Classes(c) => c[i].to_string(),
                Targets::Reals(r) => format!("{:?}", r[i]),
            });
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

/// Index partition of one dataset into inner-train and inner-validation parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPair {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Seeded split with `max(1, round((1−ratio)·n))` validation rows.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<SplitPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} rows into two non-empty parts")));
    }
    // f64::round rounds half away from zero, i.e. half up for positive values.
    let val_n = (((1.0 - ratio) * n as f64).round() as usize).clamp(1, n - 1);
    let perm = permutation(n, seed);
    Ok(SplitPair {
        val: perm[..val_n].to_vec(),
        train: perm[val_n..].to_vec(),
    })
}

pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<SplitPair> {
    split_indices(ds.len(), ratio, seed)
}

/// First `n` rows of a seeded permutation.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::Input(format!("cannot subsample {n} rows from {}", ds.len())));
    }
    if n == 0 {
        return Err(Error::Input("subsample size must be positive".into()));
    }
    let perm = permutation(ds.len(), seed);
    ds.select(&perm[..n], format!("{}[{n}]", ds.name))
}

/// Endless stream of batches over a fixed index set, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    indices: Vec<usize>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl BatchCycler {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("cannot draw batches from an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut c = BatchCycler {
            order: Vec::new(),
            indices,
            batch_size,
            pos: 0,
            epoch: 0,
            seed,
        };
        c.reshuffle();
        Ok(c)
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        self.order.shuffle(&mut seed::rng(seed::derive(self.seed, "epoch", self.epoch)));
        self.pos = 0;
    }

    /// Batches per pass; the last batch of an epoch may be short.
    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}
