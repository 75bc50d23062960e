//! Shadow-dataset plans, shadow ensembles and score matrices.
//!
//! A [`ShadowPlan`] is a bit matrix `[n_models x pool]`: bit `(j, i)` says pool
//! instance `i` is in shadow dataset `j`. A [`ScoreMatrix`] holds the scaled
//! confidences every shadow model assigns to every scored instance (and each of
//! its augmented views), plus the matching membership bits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{self, AugmentConfig, Classifier, TrainConfig};
use crate::seed;
use crate::{Error, Result};

/// Row-major bit matrix; each row is padded to a whole number of bytes and bit
/// `c` of a row lives in byte `c / 8` at position `c % 8` (LSB first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BitMatrix {
            rows,
            cols,
            bytes: vec![0; rows * cols.div_ceil(8)],
        }
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != rows * cols.div_ceil(8) {
            return Err(Error::Format("bitmap length mismatch".into()));
        }
        Ok(BitMatrix { rows, cols, bytes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn stride(&self) -> usize {
        self.cols.div_ceil(8)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.rows && col < self.cols);
        self.bytes[row * self.stride() + col / 8] >> (col % 8) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        debug_assert!(row < self.rows && col < self.cols);
        let idx = row * self.stride() + col / 8;
        if value {
            self.bytes[idx] |= 1 << (col % 8);
        } else {
            self.bytes[idx] &= !(1 << (col % 8));
        }
    }

    pub fn column_sum(&self, col: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, col)).count()
    }

    pub fn row_sum(&self, row: usize) -> usize {
        (0..self.cols).filter(|&c| self.get(row, c)).count()
    }

    /// Rows stacked on top of each other.
    pub fn vstack(parts: &[&BitMatrix]) -> Result<BitMatrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::config("cannot stack bit matrices of different widths"));
        }
        let mut bytes = Vec::new();
        for p in parts {
            bytes.extend_from_slice(&p.bytes);
        }
        Ok(BitMatrix {
            rows: parts.iter().map(|p| p.rows).sum(),
            cols,
            bytes,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSets {
    pub m_in: BTreeSet<u64>,
    pub m_out: BTreeSet<u64>,
}

impl AnchorSets {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.m_in.intersection(&self.m_out).next() {
            return Err(Error::Instance {
                id: *id,
                message: "anchor is in both M_in and M_out".into(),
            });
        }
        Ok(())
    }

    pub fn contains(&self, id: u64) -> bool {
        self.m_in.contains(&id) || self.m_out.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.m_in.len() + self.m_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_in.is_empty() && self.m_out.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShadowPlan {
    pool_ids: Vec<u64>,
    membership: BitMatrix,
}

impl ShadowPlan {
    pub fn new(pool_ids: Vec<u64>, membership: BitMatrix) -> Result<Self> {
        if membership.cols() != pool_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: pool_ids.len(),
                actual: membership.cols(),
            });
        }
        Ok(ShadowPlan {
            pool_ids,
            membership,
        })
    }

    pub fn pool_ids(&self) -> &[u64] {
        &self.pool_ids
    }

    pub fn membership(&self) -> &BitMatrix {
        &self.membership
    }

    pub fn n_models(&self) -> usize {
        self.membership.rows()
    }

    /// Ids selected for shadow dataset `row`, in pool order.
    pub fn row_ids(&self, row: usize) -> Vec<u64> {
        self.pool_ids
            .iter()
            .enumerate()
            .filter(|&(c, _)| self.membership.get(row, c))
            .map(|(_, &id)| id)
            .collect()
    }

    fn column_lookup(&self) -> HashMap<u64, usize> {
        self.pool_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect()
    }
}

fn check_pool(pool_ids: &[u64], n_models: usize) -> Result<()> {
    if n_models < 2 || !n_models.is_multiple_of(2) {
        return Err(Error::config(format!(
            "n_models must be even and >= 2, got {n_models}"
        )));
    }
    let unique: BTreeSet<u64> = pool_ids.iter().copied().collect();
    if unique.len() != pool_ids.len() {
        return Err(Error::config("pool ids must be unique"));
    }
    Ok(())
}

/// Places each column's `in_count` ones on a uniformly random subset of rows.
fn fill_balanced_column(bits: &mut BitMatrix, col: usize, in_count: usize, rng: &mut impl Rng) {
    let mut pattern: Vec<bool> = (0..bits.rows()).map(|r| r < in_count).collect();
    pattern.shuffle(rng);
    for (row, v) in pattern.into_iter().enumerate() {
        bits.set(row, col, v);
    }
}

/// Half-in/half-out plan: every pool instance is in exactly `n_models / 2` rows.
pub fn make_plan(pool_ids: &[u64], n_models: usize, seed: u64) -> Result<ShadowPlan> {
    make_conditional_plan(pool_ids, n_models, &AnchorSets::default(), seed)
}

/// Half-in/half-out on non-anchor columns; `m_in` columns all-ones, `m_out` all-zeros.
pub fn make_conditional_plan(
    pool_ids: &[u64],
    n_models: usize,
    anchors: &AnchorSets,
    seed: u64,
) -> Result<ShadowPlan> {
    make_conditional_plan_with_fraction(pool_ids, n_models, anchors, 0.5, seed)
}

/// As [`make_conditional_plan`] but each free column holds `round(fraction * n_models)` ones.
pub fn make_conditional_plan_with_fraction(
    pool_ids: &[u64],
    n_models: usize,
    anchors: &AnchorSets,
    fraction: f64,
    seed: u64,
) -> Result<ShadowPlan> {
    check_pool(pool_ids, n_models)?;
    anchors.validate()?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("sampling fraction must be in (0, 1)"));
    }
    let pool: BTreeSet<u64> = pool_ids.iter().copied().collect();
    if let Some(id) = anchors.m_in.iter().chain(&anchors.m_out).find(|id| !pool.contains(id)) {
        return Err(Error::Instance {
            id: *id,
            message: "anchor not in shadow pool".into(),
        });
    }
    let in_count = (fraction * n_models as f64).round() as usize;
    let mut rng = seed::rng(seed::derive_tagged(seed, "plan", 0));
    let mut bits = BitMatrix::zeros(n_models, pool_ids.len());
    for (col, id) in pool_ids.iter().enumerate() {
        if anchors.m_in.contains(id) {
            (0..n_models).for_each(|r| bits.set(r, col, true));
        } else if anchors.m_out.contains(id) {
            continue;
        } else {
            fill_balanced_column(&mut bits, col, in_count, &mut rng);
        }
    }
    ShadowPlan::new(pool_ids.to_vec(), bits)
}

/// Independent Bernoulli inclusion: bit `(j, i)` is set with probability `probs[i]`.
pub fn make_weighted_plan(
    pool_ids: &[u64],
    n_models: usize,
    inclusion_probs: &[f64],
    seed: u64,
) -> Result<ShadowPlan> {
    if n_models == 0 {
        return Err(Error::config("n_models must be positive"));
    }
    if inclusion_probs.len() != pool_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: pool_ids.len(),
            actual: inclusion_probs.len(),
        });
    }
    if let Some(p) = inclusion_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config(format!("inclusion probability {p} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed::derive_tagged(seed, "weighted-plan", 0));
    let mut bits = BitMatrix::zeros(n_models, pool_ids.len());
    for row in 0..n_models {
        for (col, &p) in inclusion_probs.iter().enumerate() {
            // random::<f64>() is in [0, 1): p = 1 always fires, p = 0 never does
            if rng.random::<f64>() < p {
                bits.set(row, col, true);
            }
        }
    }
    ShadowPlan::new(pool_ids.to_vec(), bits)
}

#[derive(Clone, Debug)]
pub struct ShadowEnsemble {
    pub plan: ShadowPlan,
    pub models: Vec<Classifier>,
}

/// Seed for shadow model `row` given the base training seed.
pub fn shadow_seed(base: u64, row: usize) -> u64 {
    seed::derive(base, row as u64)
}

/// Trains one classifier per plan row; rows are trained in parallel and
/// assembled in plan order.
pub fn train_shadows(pool: &Dataset, plan: &ShadowPlan, config: &TrainConfig) -> Result<ShadowEnsemble> {
    config.validate()?;
    if let Some(id) = plan.pool_ids().iter().find(|&&id| !pool.contains(id)) {
        return Err(Error::Instance {
            id: *id,
            message: "plan id missing from pool".into(),
        });
    }
    let models = (0..plan.n_models())
        .into_par_iter()
        .map(|row| {
            let wrap = |e| Error::ShadowTraining {
                row,
                source: Box::new(e),
            };
            let subset = pool.subset(&plan.row_ids(row)).map_err(wrap)?;
            model::train(&subset, &config.with_seed(shadow_seed(config.seed, row))).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShadowEnsemble {
        plan: plan.clone(),
        models,
    })
}

/// Where a score-matrix row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowOrigin {
    pub iteration: u32,
    pub model: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    instance_ids: Vec<u64>,
    n_models: usize,
    n_aug: usize,
    aug_seed: u64,
    values: Vec<f64>,
    membership: BitMatrix,
    origins: Vec<RowOrigin>,
    column: HashMap<u64, usize>,
}

impl ScoreMatrix {
    pub fn new(
        instance_ids: Vec<u64>,
        n_models: usize,
        n_aug: usize,
        aug_seed: u64,
        values: Vec<f64>,
        membership: BitMatrix,
    ) -> Result<Self> {
        let n = instance_ids.len();
        if values.len() != n_models * n * n_aug {
            return Err(Error::Format(format!(
                "expected {} values, got {}",
                n_models * n * n_aug,
                values.len()
            )));
        }
        if membership.rows() != n_models || membership.cols() != n {
            return Err(Error::Format("membership bitmap shape mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite score".into()));
        }
        let column: HashMap<u64, usize> = instance_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        if column.len() != n {
            return Err(Error::Format("duplicate instance id".into()));
        }
        let origins = (0..n_models)
            .map(|j| RowOrigin {
                iteration: 0,
                model: j as u32,
            })
            .collect();
        Ok(ScoreMatrix {
            instance_ids,
            n_models,
            n_aug,
            aug_seed,
            values,
            membership,
            origins,
            column,
        })
    }

    pub fn instance_ids(&self) -> &[u64] {
        &self.instance_ids
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_aug(&self) -> usize {
        self.n_aug
    }

    pub fn aug_seed(&self) -> u64 {
        self.aug_seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn membership(&self) -> &BitMatrix {
        &self.membership
    }

    pub fn origins(&self) -> &[RowOrigin] {
        &self.origins
    }

    pub fn column_of(&self, id: u64) -> Option<usize> {
        self.column.get(&id).copied()
    }

    pub fn is_member(&self, row: usize, col: usize) -> bool {
        self.membership.get(row, col)
    }

    /// The `n_aug` scaled confidences of model `row` on instance `col`.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.n_instances() + col) * self.n_aug;
        &self.values[start..start + self.n_aug]
    }

    pub fn in_rows(&self, col: usize) -> Vec<usize> {
        (0..self.n_models).filter(|&r| self.membership.get(r, col)).collect()
    }

    pub fn out_rows(&self, col: usize) -> Vec<usize> {
        (0..self.n_models).filter(|&r| !self.membership.get(r, col)).collect()
    }

    /// Tags every row with `iteration`.
    pub fn with_iteration(mut self, iteration: u32) -> Self {
        self.origins.iter_mut().for_each(|o| o.iteration = iteration);
        self
    }

    pub fn with_origins(mut self, origins: Vec<RowOrigin>) -> Result<Self> {
        if origins.len() != self.n_models {
            return Err(Error::Format("origin count mismatch".into()));
        }
        self.origins = origins;
        Ok(self)
    }

    /// Rows of every part stacked in order; instance ids, augmentation count and
    /// augmentation seed must agree.
    pub fn concat(parts: &[&ScoreMatrix]) -> Result<ScoreMatrix> {
        let first = parts.first().ok_or_else(|| Error::Empty("no matrices to concatenate".into()))?;
        for p in parts {
            if p.instance_ids != first.instance_ids || p.n_aug != first.n_aug || p.aug_seed != first.aug_seed {
                return Err(Error::config("score matrices cover different instances or views"));
            }
        }
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        let mut origins = Vec::new();
        for p in parts {
            values.extend_from_slice(&p.values);
            origins.extend_from_slice(&p.origins);
        }
        let bitmaps: Vec<&BitMatrix> = parts.iter().map(|p| &p.membership).collect();
        let membership = BitMatrix::vstack(&bitmaps)?;
        let n_models = parts.iter().map(|p| p.n_models).sum();
        ScoreMatrix::new(
            first.instance_ids.clone(),
            n_models,
            first.n_aug,
            first.aug_seed,
            values,
            membership,
        )?
        .with_origins(origins)
    }

    /// Columns of `left` followed by those of `right`; both must come from the
    /// same models and views.
    pub fn concat_columns(left: &ScoreMatrix, right: &ScoreMatrix) -> Result<ScoreMatrix> {
        if left.n_models != right.n_models || left.n_aug != right.n_aug || left.aug_seed != right.aug_seed || left.origins != right.origins {
            return Err(Error::config("score matrices come from different models or views"));
        }
        let (nl, nr, k) = (left.n_instances(), right.n_instances(), left.n_aug);
        let mut ids = left.instance_ids.clone();
        ids.extend_from_slice(&right.instance_ids);
        let mut values = Vec::with_capacity(left.values.len() + right.values.len());
        let mut bits = BitMatrix::zeros(left.n_models, nl + nr);
        for r in 0..left.n_models {
            values.extend_from_slice(&left.values[r * nl * k..(r + 1) * nl * k]);
            values.extend_from_slice(&right.values[r * nr * k..(r + 1) * nr * k]);
            for c in 0..nl {
                bits.set(r, c, left.membership.get(r, c));
            }
            for c in 0..nr {
                bits.set(r, nl + c, right.membership.get(r, c));
            }
        }
        ScoreMatrix::new(ids, left.n_models, k, left.aug_seed, values, bits)?.with_origins(left.origins.clone())
    }

    /// Rows restricted to `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<ScoreMatrix> {
        let n = self.n_instances();
        let mut values = Vec::with_capacity(rows.len() * n * self.n_aug);
        let mut bits = BitMatrix::zeros(rows.len(), n);
        for (k, &r) in rows.iter().enumerate() {
            let start = r * n * self.n_aug;
            values.extend_from_slice(&self.values[start..start + n * self.n_aug]);
            for c in 0..n {
                bits.set(k, c, self.membership.get(r, c));
            }
        }
        let origins = rows.iter().map(|&r| self.origins[r]).collect();
        ScoreMatrix::new(self.instance_ids.clone(), rows.len(), self.n_aug, self.aug_seed, values, bits)?
            .with_origins(origins)
    }

    /// Serialized size in bytes for the given shape.
    pub fn encoded_len(n_models: usize, n_instances: usize, n_aug: usize) -> usize {
        HEADER_LEN + 8 * n_instances + n_instances.div_ceil(8) * n_models + 8 * n_models * n_instances * n_aug
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.n_models, self.n_instances(), self.n_aug));
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_models as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_instances() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_aug as u32).to_le_bytes());
        out.extend_from_slice(&self.aug_seed.to_le_bytes());
        for id in &self.instance_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(self.membership.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ScoreMatrix> {
        let mut r = model::ByteReader::new(bytes);
        if r.take(4)? != MATRIX_MAGIC {
            return Err(Error::Format("score matrix magic mismatch".into()));
        }
        let version = r.u16()?;
        if version != MATRIX_VERSION {
            return Err(Error::Format(format!("unsupported score matrix version {version}")));
        }
        let n_models = r.u32()? as usize;
        let n = r.u32()? as usize;
        let n_aug = r.u32()? as usize;
        let aug_seed = r.u64()?;
        let expected = Self::encoded_len(n_models, n, n_aug);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "score matrix is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let bitmap = r.take(n.div_ceil(8) * n_models)?.to_vec();
        let membership = BitMatrix::from_bytes(n_models, n, bitmap)?;
        let values = (0..n_models * n * n_aug).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        ScoreMatrix::new(ids, n_models, n_aug, aug_seed, values, membership)
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"MIA1";
const MATRIX_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 8;

/// Provenance written next to a persisted matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub config_hash: String,
    pub iteration: Option<u32>,
    pub rows: Vec<RowOrigin>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_matrix(matrix: &ScoreMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the binary matrix and a `<path>.json` provenance sidecar.
pub fn save_matrix_with_sidecar(
    matrix: &ScoreMatrix,
    path: impl AsRef<Path>,
    config_hash: &str,
    iteration: Option<u32>,
) -> Result<()> {
    let path = path.as_ref();
    save_matrix(matrix, path)?;
    let sidecar = MatrixSidecar {
        config_hash: config_hash.to_string(),
        iteration,
        rows: matrix.origins.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(side, e))
}

/// Reads a matrix; row provenance is restored from the sidecar when one exists.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let path = path.as_ref();
    let matrix = ScoreMatrix::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
    let side = sidecar_path(path);
    match fs::read(&side) {
        Ok(bytes) => {
            let sidecar: MatrixSidecar = serde_json::from_slice(&bytes)?;
            matrix.with_origins(sidecar.rows)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(matrix),
        Err(e) => Err(Error::io(side, e)),
    }
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Option<MatrixSidecar>> {
    let side = sidecar_path(path.as_ref());
    match fs::read(&side) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(side, e)),
    }
}

/// `values[j, i, a] = phi(model_j(view_a(x_i))_{y_i})`; membership copied from the
/// plan, 0 for instances outside the shadow pool.
pub fn score_matrix(
    ensemble: &ShadowEnsemble,
    instances: &Dataset,
    aug: &AugmentConfig,
    aug_seed: u64,
) -> Result<ScoreMatrix> {
    aug.validate()?;
    let n_aug = aug.n_queries;
    let n = instances.len();
    let views = model::augmented_matrix(instances.instances(), aug, aug_seed);
    let labels = instances.labels();
    let rows: Vec<Vec<f64>> = ensemble
        .models
        .par_iter()
        .map(|m| {
            let logits = m.logits_batch(views.view())?;
            let mut out = Vec::with_capacity(n * n_aug);
            for (r, row) in logits.rows().into_iter().enumerate() {
                out.push(model::scaled_from_logits(row, labels[r / n_aug]));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let lookup = ensemble.plan.column_lookup();
    let mut membership = BitMatrix::zeros(ensemble.models.len(), n);
    for (c, inst) in instances.instances().iter().enumerate() {
        if let Some(&pc) = lookup.get(&inst.id) {
            for j in 0..ensemble.models.len() {
                membership.set(j, c, ensemble.plan.membership().get(j, pc));
            }
        }
    }
    ScoreMatrix::new(
        instances.ids(),
        ensemble.models.len(),
        n_aug,
        aug_seed,
        rows.concat(),
        membership,
    )
}
