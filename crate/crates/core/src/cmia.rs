//! Cascading membership inference: identify confident anchors, retrain shadows
//! conditioned on them, repeat, then attack with the union of every ensemble.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackResult, ShadowAttack, TargetObservation};
use crate::data::Dataset;
use crate::model::{self, AugmentConfig, Classifier, TrainConfig};
use crate::seed;
use crate::shadow::{self, AnchorSets, RowOrigin, ScoreMatrix, ShadowPlan};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAttack {
    /// Anchors from the base attack itself.
    Base,
    /// Anchors from the target's loss alone.
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Conditional,
    GibbsWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub max_iterations: usize,
    /// Minimum growth of either anchor set to keep iterating; scaled to the
    /// query size when absent.
    pub delta: Option<usize>,
    pub r: usize,
    pub n_models_per_iter: usize,
    pub anchor_attack: AnchorAttack,
    pub sampling_mode: SamplingMode,
    /// Share of free pool instances placed in each conditional shadow set.
    pub sample_fraction: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            max_iterations: 10,
            delta: None,
            r: 10,
            n_models_per_iter: 64,
            anchor_attack: AnchorAttack::Base,
            sampling_mode: SamplingMode::Conditional,
            sample_fraction: 0.5,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("cascade.max_iterations must be >= 1"));
        }
        if self.r == 0 {
            return Err(Error::config("cascade.r must be >= 1"));
        }
        if self.n_models_per_iter < 2 || !self.n_models_per_iter.is_multiple_of(2) {
            return Err(Error::config("cascade.n_models_per_iter must be even and >= 2"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return Err(Error::config("cascade.sample_fraction must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn effective_delta(&self, query_size: usize) -> usize {
        self.delta.unwrap_or_else(|| default_delta(query_size))
    }
}

/// `max(5, round(30 * n / 50000))`.
pub fn default_delta(query_size: usize) -> usize {
    ((30.0 * query_size as f64 / 50_000.0).round() as usize).max(5)
}

/// Everything about shadow training that stays fixed across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSetup {
    pub train: TrainConfig,
    pub aug: AugmentConfig,
    pub aug_seed: u64,
    pub seed: u64,
}

impl ShadowSetup {
    /// `(plan seed, training seed)` of iteration `k` (1-based).
    pub fn iteration_seeds(&self, k: usize) -> (u64, u64) {
        (
            seed::derive_tagged(self.seed, "cascade-plan", k as u64),
            seed::derive_tagged(self.seed, "cascade-train", k as u64),
        )
    }

    /// The unconditioned first-iteration ensemble scored on `query`; a plain
    /// shadow attack run from this matrix is the cascade's `K = 1` baseline.
    pub fn first_matrix(&self, pool: &Dataset, query: &Dataset, n_models: usize, fraction: f64) -> Result<ScoreMatrix> {
        let (plan_seed, train_seed) = self.iteration_seeds(1);
        let plan = shadow::make_conditional_plan_with_fraction(
            &pool.ids(),
            n_models,
            &AnchorSets::default(),
            fraction,
            plan_seed,
        )?;
        self.train_and_score(pool, query, &plan, train_seed, 1)
    }

    fn train_and_score(&self, pool: &Dataset, query: &Dataset, plan: &ShadowPlan, train_seed: u64, k: usize) -> Result<ScoreMatrix> {
        let ensemble = shadow::train_shadows(pool, plan, &self.train.with_seed(train_seed))?;
        Ok(shadow::score_matrix(&ensemble, query, &self.aug, self.aug_seed)?.with_iteration(k as u32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_in: f64,
    pub tau_out: f64,
    /// `tau_out` before the ordering guard.
    pub raw_tau_out: f64,
    pub guard_fired: bool,
}

impl Thresholds {
    /// Admits no anchors; used when the ground-truthed model yields no scores on
    /// one side.
    pub fn closed() -> Thresholds {
        Thresholds {
            tau_in: f64::MAX,
            tau_out: f64::MIN,
            raw_tau_out: f64::MIN,
            guard_fired: false,
        }
    }
}

/// `tau_in` = largest non-member score; `tau_out` = r-th smallest member score
/// (the smallest when there are fewer than `r`), lowered to `tau_in` if it
/// exceeds it.
pub fn thresholds_from_scores(members: &[f64], non_members: &[f64], r: usize) -> Result<Thresholds> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::Empty("threshold selection needs scored members and non-members".into()));
    }
    let tau_in = non_members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    let raw = if sorted.len() < r { sorted[0] } else { sorted[r - 1] };
    let guard = tau_in < raw;
    Ok(Thresholds {
        tau_in,
        tau_out: if guard { tau_in } else { raw },
        raw_tau_out: raw,
        guard_fired: guard,
    })
}

/// Scores of row 0 (the ground-truthed model) split by its membership.
fn split_by_row0(matrix: &ScoreMatrix, scores: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    let (mut members, mut non) = (Vec::new(), Vec::new());
    for (c, s) in scores.iter().enumerate() {
        if let Some(s) = s {
            if matrix.is_member(0, c) {
                members.push(*s);
            } else {
                non.push(*s);
            }
        }
    }
    (members, non)
}

/// Treats model 0 as a target with known membership and the remaining rows as its
/// shadows; thresholds come from the base attack's scores on it.
pub fn select_thresholds(base: ShadowAttack, matrix: &ScoreMatrix, r: usize) -> Result<Thresholds> {
    if matrix.n_models() < 2 {
        return Err(Error::config("threshold selection needs at least two shadow models"));
    }
    let target = TargetObservation::from_matrix_row(matrix, 0)?;
    let shadows = matrix.select_rows(&(1..matrix.n_models()).collect::<Vec<_>>())?;
    let scores = base.score_all(&target, &shadows)?;
    let (m, n) = split_by_row0(matrix, &scores);
    thresholds_from_scores(&m, &n, r)
}

/// Thresholds for loss-based anchoring, from model 0's own losses.
pub fn select_loss_thresholds(matrix: &ScoreMatrix, r: usize) -> Result<Thresholds> {
    let scores: Vec<Option<f64>> = (0..matrix.n_instances())
        .map(|c| Some(-model::loss_from_scaled(matrix.cell(0, c)[0])))
        .collect();
    let (m, n) = split_by_row0(matrix, &scores);
    thresholds_from_scores(&m, &n, r)
}

/// Adds `s > tau_in` to `m_in` and `s < tau_out` to `m_out`; existing anchors keep
/// their side.
pub fn identify_anchors(ids: &[u64], scores: &[Option<f64>], t: &Thresholds, prev: &AnchorSets) -> AnchorSets {
    let mut next = prev.clone();
    for (&id, s) in ids.iter().zip(scores) {
        let Some(s) = *s else { continue };
        if prev.contains(id) {
            continue;
        }
        if s > t.tau_in {
            next.m_in.insert(id);
        } else if s < t.tau_out {
            next.m_out.insert(id);
        }
    }
    next
}

/// Bernoulli inclusion probabilities: scores min-max scaled to [0.05, 0.95],
/// anchors pinned to 1 / 0, unscored instances at 0.5.
pub fn weighted_inclusion(pool_ids: &[u64], query_ids: &[u64], scores: &[Option<f64>], anchors: &AnchorSets) -> Vec<f64> {
    let lookup: std::collections::HashMap<u64, f64> = query_ids
        .iter()
        .zip(scores)
        .filter_map(|(&id, s)| s.map(|s| (id, s)))
        .collect();
    let free = lookup.iter().filter(|(id, _)| !anchors.contains(**id)).map(|(_, s)| *s);
    let lo = free.clone().fold(f64::INFINITY, f64::min);
    let hi = free.fold(f64::NEG_INFINITY, f64::max);
    pool_ids
        .iter()
        .map(|id| {
            if anchors.m_in.contains(id) {
                1.0
            } else if anchors.m_out.contains(id) {
                0.0
            } else {
                match lookup.get(id) {
                    Some(&s) if hi > lo => 0.05 + 0.9 * (s - lo) / (hi - lo),
                    _ => 0.5,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub thresholds: Thresholds,
    /// Anchor scores of the query instances; `None` where the matrix cannot score it.
    pub scores: Vec<Option<f64>>,
    pub anchors: AnchorSets,
    pub new_in: usize,
    pub new_out: usize,
    pub models_trained: usize,
    pub rows: Vec<RowOrigin>,
}

#[derive(Clone, Debug)]
pub struct CascadeTranscript {
    pub query_ids: Vec<u64>,
    pub iterations: Vec<IterationRecord>,
    pub matrices: Vec<ScoreMatrix>,
    pub final_result: AttackResult,
    pub stopped_early: bool,
}

impl CascadeTranscript {
    pub fn total_models(&self) -> usize {
        self.iterations.iter().map(|r| r.models_trained).sum()
    }

    /// Per-iteration matrices, anchors and thresholds plus the final scores.
    pub fn save(&self, dir: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (rec, m) in self.iterations.iter().zip(&self.matrices) {
            let k = rec.iteration;
            shadow::save_matrix_with_sidecar(m, dir.join(format!("iter_{k:02}.mia")), config_hash, Some(k as u32))?;
            let path = dir.join(format!("iter_{k:02}.json"));
            fs::write(&path, serde_json::to_vec_pretty(rec)?).map_err(|e| Error::io(&path, e))?;
        }
        self.final_result.write_csv(dir.join("final.csv"))
    }
}

/// Runs the cascade. `first`, when given, must be the matrix
/// [`ShadowSetup::first_matrix`] would produce; it is reused instead of retrained.
pub fn cascade(
    base: ShadowAttack,
    target: &Classifier,
    pool: &Dataset,
    query: &Dataset,
    config: &CascadeConfig,
    setup: &ShadowSetup,
    first: Option<ScoreMatrix>,
) -> Result<CascadeTranscript> {
    config.validate()?;
    if let Some(id) = query.ids().into_iter().find(|&id| !pool.contains(id)) {
        return Err(Error::Instance {
            id,
            message: "cascade query instance outside the adversary pool".into(),
        });
    }
    let obs = TargetObservation::from_classifier(target, query, &setup.aug, setup.aug_seed)?;
    let pool_ids = pool.ids();
    let query_ids = query.ids();
    let delta = config.effective_delta(query.len());
    let n = config.n_models_per_iter;

    let mut anchors = AnchorSets::default();
    let mut prev_scores: Vec<Option<f64>> = vec![None; query.len()];
    let mut iterations = Vec::new();
    let mut matrices = Vec::new();
    let mut stopped_early = false;
    let mut first = first;

    for k in 1..=config.max_iterations {
        let matrix = match (k, first.take()) {
            (1, Some(m)) => {
                if m.n_models() != n || m.instance_ids() != query_ids.as_slice() {
                    return Err(Error::config("supplied first-iteration matrix does not match the cascade"));
                }
                m.with_iteration(1)
            }
            _ => {
                let (plan_seed, train_seed) = setup.iteration_seeds(k);
                let plan = match (config.sampling_mode, k) {
                    (SamplingMode::GibbsWeighted, k) if k > 1 => {
                        let probs = weighted_inclusion(&pool_ids, &query_ids, &prev_scores, &anchors);
                        shadow::make_weighted_plan(&pool_ids, n, &probs, plan_seed)?
                    }
                    _ => shadow::make_conditional_plan_with_fraction(&pool_ids, n, &anchors, config.sample_fraction, plan_seed)?,
                };
                setup.train_and_score(pool, query, &plan, train_seed, k)?
            }
        };

        let (thresholds, scores) = match config.anchor_attack {
            AnchorAttack::Base => (select_thresholds(base, &matrix, config.r), base.score_all(&obs, &matrix)?),
            AnchorAttack::Loss => (
                select_loss_thresholds(&matrix, config.r),
                obs.losses().iter().map(|l| Some(-l)).collect(),
            ),
        };
        let thresholds = match thresholds {
            Err(Error::Empty(_)) => Thresholds::closed(),
            other => other?,
        };
        let next = identify_anchors(&query_ids, &scores, &thresholds, &anchors);
        let new_in = next.m_in.len() - anchors.m_in.len();
        let new_out = next.m_out.len() - anchors.m_out.len();
        iterations.push(IterationRecord {
            iteration: k,
            thresholds,
            scores: scores.clone(),
            anchors: next.clone(),
            new_in,
            new_out,
            models_trained: matrix.n_models(),
            rows: matrix.origins().to_vec(),
        });
        matrices.push(matrix);
        anchors = next;
        prev_scores = scores;
        if k < config.max_iterations && new_in < delta && new_out < delta {
            stopped_early = true;
            break;
        }
    }

    let refs: Vec<&ScoreMatrix> = matrices.iter().collect();
    let union = ScoreMatrix::concat(&refs)?;
    let final_result = base.attack(&obs, &union)?;
    let final_result = AttackResult {
        attack_name: format!("cmia_{}", final_result.attack_name),
        ..final_result
    };
    Ok(CascadeTranscript {
        query_ids,
        iterations,
        matrices,
        final_result,
        stopped_early,
    })
}

/// The cascade with anchors chosen from the target's loss.
pub fn cascade_loss_anchors(
    base: ShadowAttack,
    target: &Classifier,
    pool: &Dataset,
    query: &Dataset,
    config: &CascadeConfig,
    setup: &ShadowSetup,
    first: Option<ScoreMatrix>,
) -> Result<CascadeTranscript> {
    let config = CascadeConfig {
        anchor_attack: AnchorAttack::Loss,
        ..config.clone()
    };
    let mut t = cascade(base, target, pool, query, &config, setup, first)?;
    t.final_result.attack_name = t.final_result.attack_name.replacen("cmia_", "cmia_loss_", 1);
    Ok(t)
}

/// Rows in every stored plan contain all earlier `m_in` and no earlier `m_out`.
pub fn check_conditioning(transcript: &CascadeTranscript) -> Result<()> {
    for w in 1..transcript.iterations.len() {
        let before = &transcript.iterations[w - 1].anchors;
        let m = &transcript.matrices[w];
        for id in before.m_in.iter().chain(&before.m_out) {
            let Some(c) = m.column_of(*id) else { continue };
            let want = before.m_in.contains(id);
            if (0..m.n_models()).any(|r| m.is_member(r, c) != want) {
                return Err(Error::Instance {
                    id: *id,
                    message: format!("iteration {} ignores an anchor", w + 1),
                });
            }
        }
    }
    Ok(())
}

/// Ids of anchors that ended up on the wrong side of `members`.
pub fn anchor_errors(anchors: &AnchorSets, members: &BTreeSet<u64>) -> (usize, usize) {
    (
        anchors.m_in.iter().filter(|id| !members.contains(id)).count(),
        anchors.m_out.iter().filter(|id| members.contains(id)).count(),
    )
}
