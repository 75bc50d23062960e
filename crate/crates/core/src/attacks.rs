//! Baseline membership scores. Every attack maps a target observation (and, for
//! shadow-based attacks, a [`ScoreMatrix`]) to one score per query instance;
//! larger means "more likely a member".

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{self, AugmentConfig, Classifier};
use crate::shadow::ScoreMatrix;
use crate::{Error, Result};

/// Lower bound on every fitted variance.
pub const VAR_FLOOR: f64 = 1e-6;

/// Per-instance softmax vectors and labels on the unaugmented inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxTable {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

/// What the adversary sees when querying a (target or stand-in) model.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetObservation {
    ids: Vec<u64>,
    n_aug: usize,
    scaled: Vec<f64>,
    losses: Vec<f64>,
    softmax: Option<SoftmaxTable>,
}

impl TargetObservation {
    /// `scaled` is instance-major `[n x n_aug]`; losses are recovered from view 0.
    pub fn new(ids: Vec<u64>, n_aug: usize, scaled: Vec<f64>, softmax: Option<SoftmaxTable>) -> Result<Self> {
        if n_aug == 0 || scaled.len() != ids.len() * n_aug {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * n_aug.max(1),
                actual: scaled.len(),
            });
        }
        if let Some(t) = &softmax {
            if t.labels.len() != ids.len() || t.probs.len() != ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: ids.len(),
                    actual: t.probs.len(),
                });
            }
        }
        let losses = scaled.chunks(n_aug).map(|c| model::loss_from_scaled(c[0])).collect();
        Ok(TargetObservation {
            ids,
            n_aug,
            scaled,
            losses,
            softmax,
        })
    }

    /// Queries `model` on every instance of `query` and its augmented views.
    pub fn from_classifier(
        model: &Classifier,
        query: &Dataset,
        aug: &AugmentConfig,
        aug_seed: u64,
    ) -> Result<Self> {
        aug.validate()?;
        let views = model::augmented_matrix(query.instances(), aug, aug_seed);
        let logits = model.logits_batch(views.view())?;
        let labels = query.labels();
        let scaled = logits
            .rows()
            .into_iter()
            .enumerate()
            .map(|(r, row)| model::scaled_from_logits(row, labels[r / aug.n_queries]))
            .collect();
        let probs = logits
            .rows()
            .into_iter()
            .step_by(aug.n_queries)
            .map(model::softmax)
            .collect();
        TargetObservation::new(
            query.ids(),
            aug.n_queries,
            scaled,
            Some(SoftmaxTable { labels, probs }),
        )
    }

    /// Treats shadow model `row` of `matrix` as the target (no softmax available).
    pub fn from_matrix_row(matrix: &ScoreMatrix, row: usize) -> Result<Self> {
        if row >= matrix.n_models() {
            return Err(Error::config(format!("row {row} out of range")));
        }
        let n = matrix.n_instances();
        let k = matrix.n_aug();
        let scaled = matrix.values()[row * n * k..(row + 1) * n * k].to_vec();
        TargetObservation::new(matrix.instance_ids().to_vec(), k, scaled, None)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_aug(&self) -> usize {
        self.n_aug
    }

    pub fn scaled(&self, i: usize) -> &[f64] {
        &self.scaled[i * self.n_aug..(i + 1) * self.n_aug]
    }

    pub fn loss(&self, i: usize) -> f64 {
        self.losses[i]
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn softmax(&self) -> Option<&SoftmaxTable> {
        self.softmax.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub attack_name: String,
    pub instance_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub ground_truth: Option<Vec<bool>>,
    pub config_hash: Option<String>,
}

impl AttackResult {
    pub fn new(attack_name: impl Into<String>, instance_ids: Vec<u64>, scores: Vec<f64>) -> Result<Self> {
        if instance_ids.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: instance_ids.len(),
                actual: scores.len(),
            });
        }
        Ok(AttackResult {
            attack_name: attack_name.into(),
            instance_ids,
            scores,
            ground_truth: None,
            config_hash: None,
        })
    }

    /// Marks instances contained in `members` as ground-truth members.
    pub fn with_members(mut self, members: &BTreeSet<u64>) -> Self {
        self.ground_truth = Some(self.instance_ids.iter().map(|id| members.contains(id)).collect());
        self
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn labels(&self) -> Result<&[bool]> {
        self.ground_truth
            .as_deref()
            .ok_or_else(|| Error::Empty(format!("ground truth for {}", self.attack_name)))
    }

    /// Writes `instance_id,score,ground_truth,attack_name`; unknown ground truth is blank.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: String::new(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["instance_id", "score", "ground_truth", "attack_name"])
            .map_err(csv_err)?;
        for (i, (id, score)) in self.instance_ids.iter().zip(&self.scores).enumerate() {
            let truth = match &self.ground_truth {
                Some(g) => if g[i] { "1" } else { "0" },
                None => "",
            };
            w.write_record([id.to_string(), score.to_string(), truth.to_string(), self.attack_name.clone()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<AttackResult> {
        let path = path.as_ref();
        let err = |row: usize, column: &str, message: String| Error::Csv {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(0, "", e.to_string()))?;
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        let mut truth: Vec<Option<bool>> = Vec::new();
        let mut name = None;
        for (k, rec) in r.records().enumerate() {
            let row = k + 2;
            let rec = rec.map_err(|e| err(row, "", e.to_string()))?;
            let field = |i: usize, col: &str| rec.get(i).ok_or_else(|| err(row, col, "missing field".into()));
            let id = field(0, "instance_id")?;
            ids.push(id.parse::<u64>().map_err(|e| err(row, "instance_id", e.to_string()))?);
            let s = field(1, "score")?;
            scores.push(s.parse::<f64>().map_err(|e| err(row, "score", e.to_string()))?);
            truth.push(match field(2, "ground_truth")? {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(err(row, "ground_truth", format!("expected 0, 1 or blank, got {other:?}"))),
            });
            let n = field(3, "attack_name")?;
            match &name {
                None => name = Some(n.to_string()),
                Some(prev) if prev != n => return Err(err(row, "attack_name", "mixed attack names".into())),
                _ => {}
            }
        }
        let name = name.ok_or_else(|| Error::Empty(format!("{}", path.display())))?;
        let ground_truth = if truth.iter().all(Option::is_some) {
            Some(truth.into_iter().map(Option::unwrap).collect())
        } else if truth.iter().all(Option::is_none) {
            None
        } else {
            return Err(err(0, "ground_truth", "ground truth partially blank".into()));
        };
        let mut res = AttackResult::new(name, ids, scores)?;
        res.ground_truth = ground_truth;
        Ok(res)
    }
}

/// Spherical Gaussian over the augmentation dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalFit {
    pub mu: Vec<f64>,
    pub var: f64,
    pub count: usize,
}

impl SphericalFit {
    /// Per-dimension means and one variance pooled over all dimensions, using the
    /// population (divide-by-count) convention and floored at [`VAR_FLOOR`].
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>, n_aug: usize) -> Option<SphericalFit> {
        let samples: Vec<&[f64]> = samples.into_iter().collect();
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mut mu = vec![0.0; n_aug];
        for s in &samples {
            for (m, x) in mu.iter_mut().zip(*s) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let ss: f64 = samples
            .iter()
            .map(|s| s.iter().zip(&mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum();
        let var = (ss / (n * n_aug as f64)).max(VAR_FLOOR);
        Some(SphericalFit {
            mu,
            var,
            count: samples.len(),
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(&self.mu).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * sq / self.var - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * self.var).ln()
    }

    /// Mean over dimensions of `Phi((x_d - mu_d) / sigma)`.
    pub fn mean_cdf(&self, x: &[f64]) -> f64 {
        let sd = self.var.sqrt();
        x.iter().zip(&self.mu).map(|(a, m)| normal_cdf((a - m) / sd)).sum::<f64>() / x.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussPair {
    pub mu_in: Vec<f64>,
    pub var_in: f64,
    pub mu_out: Vec<f64>,
    pub var_out: f64,
}

impl GaussPair {
    pub fn from_fits(fit_in: &SphericalFit, fit_out: &SphericalFit) -> GaussPair {
        GaussPair {
            mu_in: fit_in.mu.clone(),
            var_in: fit_in.var,
            mu_out: fit_out.mu.clone(),
            var_out: fit_out.var,
        }
    }

    pub fn log_ratio(&self, obs: &[f64]) -> f64 {
        log_ratio(
            &SphericalFit { mu: self.mu_in.clone(), var: self.var_in, count: 0 },
            &SphericalFit { mu: self.mu_out.clone(), var: self.var_out, count: 0 },
            obs,
        )
    }
}

/// `log p(obs | IN) - log p(obs | OUT)`.
pub fn log_ratio(fit_in: &SphericalFit, fit_out: &SphericalFit, obs: &[f64]) -> f64 {
    fit_in.log_density(obs) - fit_out.log_density(obs)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub(crate) fn fit_rows(matrix: &ScoreMatrix, col: usize, rows: &[usize]) -> Option<SphericalFit> {
    SphericalFit::fit(rows.iter().map(|&r| matrix.cell(r, col)), matrix.n_aug())
}

/// IN and OUT fits for one instance; `None` on a side with no rows.
pub fn fit_sides(matrix: &ScoreMatrix, col: usize) -> (Option<SphericalFit>, Option<SphericalFit>) {
    (
        fit_rows(matrix, col, &matrix.in_rows(col)),
        fit_rows(matrix, col, &matrix.out_rows(col)),
    )
}

/// Both Gaussians for `instance_id`; each side needs at least two rows.
pub fn fit_gauss(matrix: &ScoreMatrix, instance_id: u64) -> Result<GaussPair> {
    let col = column(matrix, instance_id)?;
    match fit_sides(matrix, col) {
        (Some(i), Some(o)) if i.count >= 2 && o.count >= 2 => Ok(GaussPair::from_fits(&i, &o)),
        (i, o) => Err(Error::Instance {
            id: instance_id,
            message: format!(
                "need >= 2 IN and >= 2 OUT rows, have {} and {}",
                i.map_or(0, |f| f.count),
                o.map_or(0, |f| f.count)
            ),
        }),
    }
}

fn column(matrix: &ScoreMatrix, id: u64) -> Result<usize> {
    matrix.column_of(id).ok_or_else(|| Error::Instance {
        id,
        message: "not a column of the score matrix".into(),
    })
}

/// Shadow losses recovered from view-0 scaled confidences.
fn shadow_losses(matrix: &ScoreMatrix, col: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| model::loss_from_scaled(matrix.cell(r, col)[0])).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Loss,
    Entropy,
    Calibration,
    AttackR,
    LiraAdaptive,
    LiraNonadaptive,
    Rmia,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Loss,
        AttackKind::Entropy,
        AttackKind::Calibration,
        AttackKind::AttackR,
        AttackKind::LiraAdaptive,
        AttackKind::LiraNonadaptive,
        AttackKind::Rmia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Loss => "loss",
            AttackKind::Entropy => "entropy",
            AttackKind::Calibration => "calibration",
            AttackKind::AttackR => "attack_r",
            AttackKind::LiraAdaptive => "lira_adaptive",
            AttackKind::LiraNonadaptive => "lira_nonadaptive",
            AttackKind::Rmia => "rmia",
        }
    }

    pub fn uses_shadows(self) -> bool {
        !matches!(self, AttackKind::Loss | AttackKind::Entropy)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack {s:?}")))
    }
}

/// Attacks that can drive the cascade: scored per instance from a target
/// observation and a shadow matrix alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowAttack {
    LiraAdaptive,
    LiraNonadaptive,
    Calibration,
    AttackR,
}

impl ShadowAttack {
    pub fn kind(self) -> AttackKind {
        match self {
            ShadowAttack::LiraAdaptive => AttackKind::LiraAdaptive,
            ShadowAttack::LiraNonadaptive => AttackKind::LiraNonadaptive,
            ShadowAttack::Calibration => AttackKind::Calibration,
            ShadowAttack::AttackR => AttackKind::AttackR,
        }
    }

    /// Score for observation index `i` against matrix column `col`; `None` when
    /// the column lacks the IN/OUT rows this attack needs.
    pub fn score_one(self, obs: &TargetObservation, i: usize, matrix: &ScoreMatrix, col: usize) -> Option<f64> {
        match self {
            ShadowAttack::LiraAdaptive => {
                let (fin, fout) = fit_sides(matrix, col);
                let (fin, fout) = (fin?, fout?);
                if fin.count < 2 || fout.count < 2 {
                    return None;
                }
                Some(log_ratio(&fin, &fout, obs.scaled(i)))
            }
            ShadowAttack::LiraNonadaptive => {
                let fout = fit_rows(matrix, col, &matrix.out_rows(col)).filter(|f| f.count >= 2)?;
                Some(fout.mean_cdf(obs.scaled(i)))
            }
            ShadowAttack::Calibration => {
                let losses = shadow_losses(matrix, col, &matrix.out_rows(col));
                if losses.is_empty() {
                    return None;
                }
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                Some(-(obs.loss(i) - mean))
            }
            ShadowAttack::AttackR => {
                let losses = shadow_losses(matrix, col, &matrix.out_rows(col));
                if losses.is_empty() {
                    return None;
                }
                let below = losses.iter().filter(|&&l| obs.loss(i) < l).count();
                Some(below as f64 / losses.len() as f64)
            }
        }
    }

    /// Scores every observed instance; `None` where the matrix cannot support it.
    pub fn score_all(self, obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<Vec<Option<f64>>> {
        check_views(obs, matrix)?;
        obs.ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| Ok(self.score_one(obs, i, matrix, column(matrix, id)?)))
            .collect()
    }

    pub fn attack(self, obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<AttackResult> {
        let scores = self
            .score_all(obs, matrix)?
            .into_iter()
            .zip(obs.ids())
            .map(|(s, &id)| {
                s.ok_or_else(|| Error::Instance {
                    id,
                    message: match self {
                        ShadowAttack::LiraAdaptive => {
                            "fewer than 2 IN or OUT shadow rows; use lira_nonadaptive".into()
                        }
                        _ => "too few OUT shadow rows".into(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AttackResult::new(self.kind().name(), obs.ids().to_vec(), scores)
    }
}

fn check_views(obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<()> {
    if obs.n_aug() != matrix.n_aug() {
        return Err(Error::DimensionMismatch {
            expected: matrix.n_aug(),
            actual: obs.n_aug(),
        });
    }
    Ok(())
}

pub fn attack_loss(obs: &TargetObservation) -> Result<AttackResult> {
    AttackResult::new("loss", obs.ids().to_vec(), obs.losses().iter().map(|l| -l).collect())
}

/// Modified prediction entropy of one softmax vector.
pub fn modified_entropy(probs: &[f64], label: usize) -> f64 {
    let py = model::clamp_prob(probs[label]);
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &p)| p * (1.0 - model::clamp_prob(p)).ln())
        .sum();
    -(1.0 - py) * py.ln() - rest
}

pub fn attack_entropy(obs: &TargetObservation) -> Result<AttackResult> {
    let table = obs
        .softmax()
        .ok_or_else(|| Error::Unsupported("entropy attack needs full softmax vectors".into()))?;
    let scores = table
        .probs
        .iter()
        .zip(&table.labels)
        .map(|(p, &y)| -modified_entropy(p, y))
        .collect();
    AttackResult::new("entropy", obs.ids().to_vec(), scores)
}

pub fn attack_calibration(obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<AttackResult> {
    ShadowAttack::Calibration.attack(obs, matrix)
}

pub fn attack_ratio(obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<AttackResult> {
    ShadowAttack::AttackR.attack(obs, matrix)
}

pub fn lira_adaptive(obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<AttackResult> {
    ShadowAttack::LiraAdaptive.attack(obs, matrix)
}

pub fn lira_nonadaptive(obs: &TargetObservation, matrix: &ScoreMatrix) -> Result<AttackResult> {
    ShadowAttack::LiraNonadaptive.attack(obs, matrix)
}

/// `p_target(x) / mean over OUT rows of p_shadow(x)` on view 0.
fn rmia_ratio(obs: &TargetObservation, i: usize, matrix: &ScoreMatrix, col: usize) -> Result<f64> {
    let out = matrix.out_rows(col);
    if out.is_empty() {
        return Err(Error::Instance {
            id: obs.ids()[i],
            message: "no OUT shadow rows".into(),
        });
    }
    let mean = out
        .iter()
        .map(|&r| model::prob_from_scaled(matrix.cell(r, col)[0]))
        .sum::<f64>()
        / out.len() as f64;
    Ok(model::prob_from_scaled(obs.scaled(i)[0]) / mean)
}

/// Fraction of population points `z != x` with `ratio_x / ratio_z > gamma`.
pub fn rmia(
    obs: &TargetObservation,
    population: &TargetObservation,
    matrix: &ScoreMatrix,
    gamma: f64,
) -> Result<AttackResult> {
    if population.is_empty() {
        return Err(Error::Empty("RMIA population".into()));
    }
    let pop: Vec<(u64, f64)> = population
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| Ok((id, rmia_ratio(population, i, matrix, column(matrix, id)?)?)))
        .collect::<Result<_>>()?;
    let scores = obs
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let rx = rmia_ratio(obs, i, matrix, column(matrix, id)?)?;
            let others = pop.iter().filter(|(z, _)| *z != id);
            let total = others.clone().count();
            if total == 0 {
                return Err(Error::Empty("RMIA population after excluding the query".into()));
            }
            let wins = others.filter(|(_, rz)| rx / rz > gamma).count();
            Ok(wins as f64 / total as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    AttackResult::new("rmia", obs.ids().to_vec(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shadow::BitMatrix;

    /// One instance (id 0), `values[j]` per row with the given membership bits.
    fn column_matrix(values: &[f64], members: &[bool]) -> ScoreMatrix {
        let mut bits = BitMatrix::zeros(values.len(), 1);
        for (j, &m) in members.iter().enumerate() {
            bits.set(j, 0, m);
        }
        ScoreMatrix::new(vec![0], values.len(), 1, 0, values.to_vec(), bits).unwrap()
    }

    fn obs(phis: &[f64]) -> TargetObservation {
        TargetObservation::new((0..phis.len() as u64).collect(), 1, phis.to_vec(), None).unwrap()
    }

    /// Scaled confidence whose recovered loss is `loss`.
    fn phi_for_loss(loss: f64) -> f64 {
        let p = (-loss).exp();
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn loss_scores_are_negated() {
        let o = obs(&[phi_for_loss(0.1), phi_for_loss(2.3)]);
        let r = attack_loss(&o).unwrap();
        assert!((r.scores[0] + 0.1).abs() < 1e-12);
        assert!((r.scores[1] + 2.3).abs() < 1e-12);
        let zero = obs(&[model::scaled_bound()]);
        assert!(attack_loss(&zero).unwrap().scores[0].abs() < 1e-11);
    }

    #[test]
    fn memorized_member_ranks_first() {
        let member = model::logit_scale(1.0 - 1e-12);
        let wrong = model::logit_scale(0.01);
        let r = attack_loss(&obs(&[wrong, member])).unwrap();
        assert!(r.scores[1] > r.scores[0]);
    }

    #[test]
    fn entropy_cases() {
        assert!(modified_entropy(&[1.0, 0.0], 0).abs() < 1e-10);
        assert!((modified_entropy(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in (1..100).rev() {
            let py = k as f64 / 100.0;
            let rest = (1.0 - py) / 4.0;
            let s = -modified_entropy(&[py, rest, rest, rest, rest], 0);
            assert!(s < prev, "p_y {py}");
            prev = s;
        }
    }

    #[test]
    fn entropy_needs_softmax() {
        assert!(matches!(attack_entropy(&obs(&[0.0])), Err(Error::Unsupported(_))));
    }

    #[test]
    fn calibration_arithmetic() {
        let m = column_matrix(&[phi_for_loss(2.0), phi_for_loss(2.0), 5.0], &[false, false, true]);
        let r = attack_calibration(&obs(&[phi_for_loss(0.1)]), &m).unwrap();
        assert!((r.scores[0] - 1.9).abs() < 1e-9);
        let r = attack_calibration(&obs(&[phi_for_loss(2.0)]), &m).unwrap();
        assert!(r.scores[0].abs() < 1e-9);
    }

    #[test]
    fn calibration_fixes_loss_misranking() {
        // instance 0: easy non-member, low loss everywhere;
        // instance 1: hard member, high loss but far below its OUT reference
        let values = vec![phi_for_loss(0.2), phi_for_loss(3.0), phi_for_loss(0.2), phi_for_loss(3.0)];
        let m = ScoreMatrix::new(vec![0, 1], 2, 1, 0, values, BitMatrix::zeros(2, 2)).unwrap();
        let o = obs(&[phi_for_loss(0.2), phi_for_loss(1.0)]);
        let raw = attack_loss(&o).unwrap();
        assert!(raw.scores[0] > raw.scores[1]);
        let cal = attack_calibration(&o, &m).unwrap();
        assert!(cal.scores[1] > cal.scores[0]);
    }

    #[test]
    fn ratio_extremes_and_median() {
        let shadow: Vec<f64> = (1..=64).map(|k| phi_for_loss(k as f64 / 10.0)).collect();
        let m = column_matrix(&shadow, &[false; 64]);
        assert_eq!(attack_ratio(&obs(&[phi_for_loss(0.01)]), &m).unwrap().scores[0], 1.0);
        assert_eq!(attack_ratio(&obs(&[phi_for_loss(9.0)]), &m).unwrap().scores[0], 0.0);
        let median = attack_ratio(&obs(&[phi_for_loss(3.25)]), &m).unwrap().scores[0];
        assert!((median - 0.5).abs() <= 1.0 / 64.0);
        let none = column_matrix(&[1.0], &[true]);
        assert!(attack_ratio(&obs(&[0.0]), &none).is_err());
    }

    #[test]
    fn gauss_fit_cases() {
        let m = column_matrix(&[1.0, 3.0, 0.0, 0.0], &[true, true, false, false]);
        let g = fit_gauss(&m, 0).unwrap();
        assert_eq!(g.mu_in, vec![2.0]);
        assert_eq!(g.var_in, 1.0);
        assert_eq!(g.var_out, VAR_FLOOR);
        let one_in = column_matrix(&[1.0, 0.0, 0.0], &[true, false, false]);
        assert!(fit_gauss(&one_in, 0).is_err());
        assert!(fit_gauss(&m, 99).is_err());
    }

    #[test]
    fn gauss_fit_nine_views() {
        let values: Vec<f64> = (0..4 * 9).map(|k| (k % 7) as f64).collect();
        let bits = {
            let mut b = BitMatrix::zeros(4, 1);
            b.set(0, 0, true);
            b.set(1, 0, true);
            b
        };
        let m = ScoreMatrix::new(vec![5], 4, 9, 0, values, bits).unwrap();
        let g = fit_gauss(&m, 5).unwrap();
        assert_eq!(g.mu_in.len(), 9);
        assert_eq!(g.mu_out.len(), 9);
    }

    #[test]
    fn lira_adaptive_cases() {
        let m = column_matrix(&[1.0, 3.0, -1.0, 1.0], &[true, true, false, false]);
        assert!(lira_adaptive(&obs(&[1.0]), &m).unwrap().scores[0].abs() < 1e-12);
        let r = lira_adaptive(&obs(&[2.0]), &m).unwrap();
        assert!((r.scores[0] - 2.0).abs() < 1e-12);
        let same = column_matrix(&[1.0, 3.0, 1.0, 3.0], &[true, true, false, false]);
        for x in [-4.0, 0.3, 7.0] {
            assert_eq!(lira_adaptive(&obs(&[x]), &same).unwrap().scores[0], 0.0);
        }
        let no_in = column_matrix(&[1.0, 3.0], &[false, false]);
        let err = lira_adaptive(&obs(&[0.0]), &no_in).unwrap_err().to_string();
        assert!(err.contains("lira_nonadaptive"), "{err}");
    }

    #[test]
    fn lira_nonadaptive_cases() {
        let m = column_matrix(&[-1.0, 1.0], &[false, false]);
        assert!((lira_nonadaptive(&obs(&[0.0]), &m).unwrap().scores[0] - 0.5).abs() < 1e-15);
        let r = lira_nonadaptive(&obs(&[3.0]), &m).unwrap().scores[0];
        assert!((r - 0.998_650_101_968_369_9).abs() < 1e-12);
        let mut prev = -1.0;
        for k in -20..20 {
            let s = lira_nonadaptive(&obs(&[k as f64 * 0.3]), &m).unwrap().scores[0];
            assert!(s >= prev);
            prev = s;
        }
    }

    fn rmia_setup(target: &[f64], shadow_p: f64) -> (TargetObservation, ScoreMatrix) {
        let n = target.len();
        let phi = model::logit_scale(shadow_p);
        let m = ScoreMatrix::new((0..n as u64).collect(), 2, 1, 0, vec![phi; 2 * n], BitMatrix::zeros(2, n)).unwrap();
        let o = obs(&target.iter().map(|&p| model::logit_scale(p)).collect::<Vec<_>>());
        (o, m)
    }

    #[test]
    fn rmia_cases() {
        let (o, m) = rmia_setup(&[0.5; 6], 0.5);
        assert!(rmia(&o, &o, &m, 1.0).unwrap().scores.iter().all(|&s| s == 0.0));

        let (o, m) = rmia_setup(&[0.99, 0.5, 0.5, 0.5, 0.5, 0.5], 0.5);
        let r = rmia(&o, &o, &m, 1.0).unwrap();
        assert_eq!(r.scores[0], 1.0);
        assert!(rmia(&o, &o, &m, 1e300).unwrap().scores.iter().all(|&s| s == 0.0));

        let empty = TargetObservation::new(vec![], 1, vec![], None).unwrap();
        assert!(rmia(&o, &empty, &m, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let r = AttackResult::new("lira_adaptive", vec![4, 9, 2], vec![0.125, -3.5e-7, 1e300])
            .unwrap()
            .with_members(&[9].into());
        r.write_csv(&path).unwrap();
        let back = AttackResult::read_csv(&path).unwrap();
        assert_eq!(back, r);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("instance_id,score,ground_truth,attack_name\n"));

        let blank = AttackResult::new("loss", vec![1], vec![0.5]).unwrap();
        blank.write_csv(&path).unwrap();
        assert_eq!(AttackResult::read_csv(&path).unwrap().ground_truth, None);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "instance_id,score,ground_truth,attack_name\n1,0.5,1,x\n2,abc,0,x\n").unwrap();
        match AttackResult::read_csv(&path) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "score");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn attack_names_parse() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!("lira".parse::<AttackKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lira_increasing_in_obs(a in -10.0f64..10.0, b in -10.0f64..10.0, spread in 0.1f64..3.0) {
                let m = column_matrix(&[2.0 - spread, 2.0 + spread, -spread, spread], &[true, true, false, false]);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assume!(hi - lo > 1e-9);
                let s_lo = lira_adaptive(&obs(&[lo]), &m).unwrap().scores[0];
                let s_hi = lira_adaptive(&obs(&[hi]), &m).unwrap().scores[0];
                prop_assert!(s_hi > s_lo);
            }

            #[test]
            fn ratio_invariant_under_monotone_map(
                target in 0.01f64..5.0,
                shadows in proptest::collection::vec(0.01f64..5.0, 2..20),
            ) {
                let phis: Vec<f64> = shadows.iter().map(|&l| phi_for_loss(l)).collect();
                let m = column_matrix(&phis, &vec![false; phis.len()]);
                let base = attack_ratio(&obs(&[phi_for_loss(target)]), &m).unwrap().scores[0];
                prop_assert!((0.0..=1.0).contains(&base));
                // losses scaled by 0.5 stay ordered the same way
                let phis2: Vec<f64> = shadows.iter().map(|&l| phi_for_loss(0.5 * l)).collect();
                let m2 = column_matrix(&phis2, &vec![false; phis2.len()]);
                let moved = attack_ratio(&obs(&[phi_for_loss(0.5 * target)]), &m2).unwrap().scores[0];
                prop_assert_eq!(base, moved);
            }

            #[test]
            fn identical_sides_give_small_scores(seed in any::<u64>(), rows in 20usize..200) {
                use rand_distr::{Distribution, Normal};
                let mut rng = crate::seed::rng(seed);
                let normal = Normal::new(0.5, 1.0).unwrap();
                let vals: Vec<f64> = (0..2 * rows).map(|_| normal.sample(&mut rng)).collect();
                let members: Vec<bool> = (0..2 * rows).map(|j| j < rows).collect();
                let m = column_matrix(&vals, &members);
                let s = lira_adaptive(&obs(&[0.5]), &m).unwrap().scores[0];
                // parameter estimates err by O(1/sqrt(rows)); the log-ratio at the mean follows
                prop_assert!(s.abs() < 12.0 / (rows as f64).sqrt(), "{}", s);
            }
        }
    }
}
