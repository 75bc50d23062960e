//! Datasets: synthetic Gaussian mixtures, CSV ingestion, disjoint splits and
//! feature standardization.
//!
//! A [`Dataset`] always keeps its instances sorted by ascending id; that order is
//! the canonical order every downstream component relies on.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    num_classes: usize,
}

impl Dataset {
    /// Validates ids, dimensions and labels, then sorts into canonical order.
    pub fn new(mut instances: Vec<Instance>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        instances.sort_by_key(|i| i.id);
        if let Some(w) = instances.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Instance {
                id: w[0].id,
                message: "duplicate id".into(),
            });
        }
        if let Some(first) = instances.first() {
            let dim = first.features.len();
            for inst in &instances {
                if inst.features.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: inst.features.len(),
                    });
                }
                if inst.label >= num_classes {
                    return Err(Error::Instance {
                        id: inst.id,
                        message: format!("label {} >= num_classes {}", inst.label, num_classes),
                    });
                }
            }
        }
        Ok(Dataset {
            instances,
            num_classes,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Feature dimension (0 for an empty dataset).
    pub fn dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.features.len())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.instances.iter().map(|i| i.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Instance> {
        self.position(id).map(|p| &self.instances[p])
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.instances.binary_search_by_key(&id, |i| i.id).ok()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.position(id).is_some()
    }

    /// Instances whose id is in `ids`; unknown ids are an error.
    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let inst = self.get(id).ok_or_else(|| Error::Instance {
                id,
                message: "not in dataset".into(),
            })?;
            out.push(inst.clone());
        }
        Dataset::new(out, self.num_classes)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    /// Minimum distance between any two class means.
    pub class_separation: f64,
    pub within_class_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.per_class_count == 0 {
            return Err(Error::config("synthetic counts must be positive"));
        }
        if !(self.within_class_sigma >= 0.0 && self.within_class_sigma.is_finite()) {
            return Err(Error::config("within_class_sigma must be finite and >= 0"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("class_separation must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Class means at pairwise distance >= `separation`.
///
/// With `m <= dim` the means sit on scaled coordinate axes (a regular simplex, every
/// pair exactly `separation` apart). Otherwise random Gaussian directions are drawn
/// and rescaled so the closest pair is exactly `separation` apart.
fn class_means(config: &SyntheticConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let m = config.num_classes;
    let d = config.dim;
    if m <= d {
        let scale = config.class_separation / std::f64::consts::SQRT_2;
        return (0..m)
            .map(|c| {
                let mut v = vec![0.0; d];
                v[c] = scale;
                v
            })
            .collect();
    }
    let mut means: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..m {
        for b in (a + 1)..m {
            min_dist = min_dist.min(euclidean(&means[a], &means[b]));
        }
    }
    if min_dist > 0.0 {
        let s = config.class_separation / min_dist;
        for mean in &mut means {
            mean.iter_mut().for_each(|v| *v *= s);
        }
    }
    means
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gaussian-mixture classification data. Ids run 0..n with classes interleaved.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive_tagged(config.seed, "synthetic", 0));
    let means = class_means(config, &mut rng);
    let mut instances = Vec::with_capacity(config.num_classes * config.per_class_count);
    let mut id = 0u64;
    for _ in 0..config.per_class_count {
        for (label, mean) in means.iter().enumerate() {
            let features = mean
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + config.within_class_sigma * z
                })
                .collect();
            instances.push(Instance {
                id,
                features,
                label,
            });
            id += 1;
        }
    }
    Dataset::new(instances, config.num_classes)
}

/// Reads a headed CSV. Labels are mapped to dense indices in order of first
/// appearance; ids follow row order starting at 0.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| csv_err(path, 0, "", e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(Error::Empty(format!("{}: no header", path.display())));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| csv_err(path, 0, label_column, "label column not found".into()))?;

    let mut label_map: HashMap<String, usize> = HashMap::new();
    let mut instances = Vec::new();
    for (row, record) in reader.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let record = record.map_err(|e| csv_err(path, line, "", e.to_string()))?;
        let mut features = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| {
                csv_err(
                    path,
                    line,
                    headers.get(col).unwrap_or("?"),
                    format!("non-numeric value {cell:?}"),
                )
            })?;
            features.push(value);
        }
        let raw_label = record.get(label_idx).unwrap_or("").trim().to_string();
        let next = label_map.len();
        let label = *label_map.entry(raw_label).or_insert(next);
        instances.push(Instance {
            id: row as u64,
            features,
            label,
        });
    }
    if instances.is_empty() {
        return Err(Error::Empty(format!("{}: no data rows", path.display())));
    }
    Dataset::new(instances, label_map.len())
}

fn csv_err(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}

/// Writes `id,f0..f{d-1},label`.
pub fn save_snapshot(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["id".to_string()];
    header.extend((0..dataset.dim()).map(|i| format!("f{i}")));
    header.push("label".into());
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for inst in dataset.instances() {
        let mut line = inst.id.to_string();
        for v in &inst.features {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push(',');
        line.push_str(&inst.label.to_string());
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`save_snapshot`], keeping the stored ids and label indices.
pub fn load_snapshot(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    lines
        .next()
        .ok_or_else(|| Error::Empty(path.display().to_string()))?
        .map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(csv_err(path, row + 2, "", "too few columns".into()));
        }
        let parse_err = |col: &str| csv_err(path, row + 2, col, "unparseable value".into());
        let id = cells[0].parse().map_err(|_| parse_err("id"))?;
        let label = cells[cells.len() - 1].parse().map_err(|_| parse_err("label"))?;
        let features = cells[1..cells.len() - 1]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        instances.push(Instance {
            id,
            features,
            label,
        });
    }
    Dataset::new(instances, num_classes)
}

/// Partitions a seeded shuffle of `dataset` into consecutive blocks.
///
/// Every block but the last gets `floor(f * n)` instances; the last gets
/// `round(f * n)` capped by what remains.
pub fn split_disjoint(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::config("no split fractions"));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::config("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::config(format!("split fractions sum to {total} > 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_tagged(seed, "split", 0)));

    let last = fractions.len() - 1;
    let mut start = 0usize;
    let mut out = Vec::with_capacity(fractions.len());
    for (k, &f) in fractions.iter().enumerate() {
        let want = if k == last {
            (f * n as f64).round() as usize
        } else {
            (f * n as f64).floor() as usize
        };
        let size = want.min(n - start);
        let block = order[start..start + size]
            .iter()
            .map(|&p| dataset.instances[p].clone())
            .collect();
        out.push(Dataset::new(block, dataset.num_classes)?);
        start += size;
    }
    Ok(out)
}

/// Per-feature affine transform fitted by [`standardize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 for constant columns.
    pub std: Vec<f64>,
}

impl ScalerParams {
    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| if s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.dim() != self.mean.len() && !dataset.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: dataset.dim(),
            });
        }
        let instances = dataset
            .instances()
            .iter()
            .map(|i| Instance {
                id: i.id,
                features: self.transform(&i.features),
                label: i.label,
            })
            .collect();
        Dataset::new(instances, dataset.num_classes)
    }
}

/// Zero-mean, unit-variance columns (population variance).
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, ScalerParams)> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot standardize an empty dataset".into()));
    }
    let d = dataset.dim();
    let n = dataset.len() as f64;
    let mut mean = vec![0.0; d];
    for inst in dataset.instances() {
        for (m, x) in mean.iter_mut().zip(&inst.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for inst in dataset.instances() {
        for ((v, x), m) in var.iter_mut().zip(&inst.features).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            // columns that are constant up to rounding
            if s > 1e-12 {
                s
            } else {
                0.0
            }
        })
        .collect();
    let params = ScalerParams { mean, std };
    Ok((params.apply(dataset)?, params))
}

/// Ids present in both datasets.
pub fn shared_ids(a: &Dataset, b: &Dataset) -> Vec<u64> {
    let set: HashSet<u64> = a.instances().iter().map(|i| i.id).collect();
    b.instances()
        .iter()
        .map(|i| i.id)
        .filter(|id| set.contains(id))
        .collect()
}
