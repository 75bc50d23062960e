//! The membership game (challenger plus adaptive / non-adaptive adversary
//! data boundaries) and the evaluation metrics: ROC, TPR at fixed FPR and
//! balanced accuracy.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_disjoint, Dataset};
use crate::model::{self, Classifier, TrainConfig};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Adaptive,
    NonAdaptive,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Adaptive => "adaptive",
            Setting::NonAdaptive => "non_adaptive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    /// Share of the query set the target is trained on.
    pub member_fraction: f64,
    /// Non-adaptive only: share of the pool set aside as the query side.
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            member_fraction: 0.5,
            query_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("member_fraction", self.member_fraction), ("query_fraction", self.query_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("game.{name} must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Who holds what after the challenger's move.
#[derive(Clone, Debug)]
pub struct GameTranscript {
    pub setting: Setting,
    pub target: Classifier,
    pub members: BTreeSet<u64>,
    pub query_ids: Vec<u64>,
    pub ground_truth: Vec<bool>,
    pub adversary_ids: Vec<u64>,
    pub seed: u64,
}

impl GameTranscript {
    pub fn check(&self) -> Result<()> {
        let adversary: BTreeSet<u64> = self.adversary_ids.iter().copied().collect();
        match self.setting {
            Setting::Adaptive => {
                if let Some(id) = self.query_ids.iter().find(|id| !adversary.contains(id)) {
                    return Err(Error::Instance {
                        id: *id,
                        message: "adaptive query instance missing from the adversary pool".into(),
                    });
                }
            }
            Setting::NonAdaptive => {
                if let Some(id) = self.query_ids.iter().find(|id| adversary.contains(id)) {
                    return Err(Error::Instance {
                        id: *id,
                        message: "non-adaptive query instance found in the adversary pool".into(),
                    });
                }
            }
        }
        let truth: Vec<bool> = self.query_ids.iter().map(|id| self.members.contains(id)).collect();
        if truth != self.ground_truth {
            return Err(Error::config("ground truth disagrees with the member set"));
        }
        Ok(())
    }
}

/// Target training seed for a game seed.
pub fn target_seed(game_seed: u64) -> u64 {
    seed::derive_tagged(game_seed, "target", 0)
}

fn sample_members(ids: &[u64], fraction: f64, seed: u64) -> Result<BTreeSet<u64>> {
    let k = (fraction * ids.len() as f64).round() as usize;
    if k == 0 || k == ids.len() {
        return Err(Error::config(format!(
            "query set of {} cannot hold both members and non-members",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seed::rng(seed::derive_tagged(seed, "members", 0)));
    Ok(shuffled.into_iter().take(k).collect())
}

/// Plays the challenger. Adaptive: the target trains on a random part of the pool,
/// and the pool is both the query set and the adversary's data. Non-adaptive: the
/// pool is split into a query side (target trains on part of it) and a disjoint
/// adversary side.
pub fn play_game(pool: &Dataset, setting: Setting, config: &GameConfig, train: &TrainConfig) -> Result<GameTranscript> {
    config.validate()?;
    let (query, adversary_ids) = match setting {
        Setting::Adaptive => {
            if pool.len() < 2 {
                return Err(Error::config(format!("pool of {} is too small for the game", pool.len())));
            }
            (pool.clone(), pool.ids())
        }
        Setting::NonAdaptive => {
            if pool.len() < 4 {
                return Err(Error::config(format!("pool of {} is too small for the game", pool.len())));
            }
            let parts = split_disjoint(pool, &[config.query_fraction, 1.0 - config.query_fraction], config.seed)?;
            (parts[0].clone(), parts[1].ids())
        }
    };
    let query_ids = query.ids();
    let members = sample_members(&query_ids, config.member_fraction, config.seed)?;
    let train_set = query.subset(&members.iter().copied().collect::<Vec<_>>())?;
    let target = model::train(&train_set, &train.with_seed(target_seed(config.seed)))?;
    let ground_truth = query_ids.iter().map(|id| members.contains(id)).collect();
    let transcript = GameTranscript {
        setting,
        target,
        members,
        query_ids,
        ground_truth,
        adversary_ids,
        seed: config.seed,
    };
    transcript.check()?;
    Ok(transcript)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Predict "member" iff `score >= threshold`; points run from threshold `+inf`
/// at (0, 0) down to the smallest score at (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::config("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::config("ROC needs both members and non-members"));
    }
    Ok((pos, neg))
}

/// Descending threshold sweep; tied scores flip together.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        points,
        positives: pos,
        negatives: neg,
    })
}

impl RocCurve {
    /// Trapezoidal area; tied groups contribute their diagonal segment.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// TPR at the largest achieved FPR not exceeding `target`.
    pub fn tpr_at_fpr(&self, target: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= target)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    /// Best `(TPR + TNR) / 2` over thresholds.
    pub fn balanced_accuracy(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p.tpr + 1.0 - p.fpr) / 2.0)
            .fold(0.5, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::config(format!("FPR target {fpr_target} outside [0, 1]")));
    }
    Ok(curve.tpr_at_fpr(fpr_target))
}

pub fn balanced_accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(roc(scores, labels)?.balanced_accuracy())
}

/// Per-attack summary written next to every attack result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    #[serde(rename = "tpr@1e-5")]
    pub tpr_at_1e5: f64,
    #[serde(rename = "tpr@1e-3")]
    pub tpr_at_1e3: f64,
    pub balanced_accuracy: f64,
}

impl Metrics {
    pub fn from_curve(curve: &RocCurve) -> Metrics {
        Metrics {
            auc: curve.auc(),
            tpr_at_1e5: curve.tpr_at_fpr(1e-5),
            tpr_at_1e3: curve.tpr_at_fpr(1e-3),
            balanced_accuracy: curve.balanced_accuracy(),
        }
    }

    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
        Ok(Metrics::from_curve(&roc(scores, labels)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};
    use proptest::prelude::*;
    use rand::Rng;

    /// O(n^2) oracle: every candidate threshold evaluated from scratch.
    fn brute(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::INFINITY);
        ts.iter()
            .map(|&t| {
                let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
                let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
                (fp / neg, tp / pos)
            })
            .collect()
    }

    fn brute_tpr(scores: &[f64], labels: &[bool], target: f64) -> f64 {
        brute(scores, labels)
            .into_iter()
            .filter(|(f, _)| *f <= target)
            .map(|(_, t)| t)
            .fold(0.0, f64::max)
    }

    fn brute_bacc(scores: &[f64], labels: &[bool]) -> f64 {
        brute(scores, labels)
            .into_iter()
            .map(|(f, t)| (t + 1.0 - f) / 2.0)
            .fold(0.5, f64::max)
    }

    #[test]
    fn separated_scores() {
        let c = roc(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false]).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(c.auc(), 1.0);
        assert_eq!(c.balanced_accuracy(), 1.0);
        assert_eq!(c.points.first().unwrap().threshold, f64::INFINITY);
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn ties_flip_together() {
        let c = roc(&[1.0, 1.0, 1.0, 1.0], &[true, false, true, false]).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.auc(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(balanced_accuracy(&[1.0], &[false]).is_err());
        assert!(roc(&[f64::NAN, 1.0], &[true, false]).is_err());
    }

    #[test]
    fn random_labels_give_half_auc() {
        let mut rng = seed::rng(3);
        let n = 20000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let auc = roc(&scores, &labels).unwrap().auc();
        // sd of AUC under the null is about sqrt((n+1)/(12 n+ n-)) ~ 0.004
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
        assert!(balanced_accuracy(&scores, &labels).unwrap() >= 0.5);
    }

    #[test]
    fn tpr_below_first_false_positive() {
        // the top score is a non-member
        let c = roc(&[5.0, 4.0, 3.0, 1.0], &[false, true, true, false]).unwrap();
        assert_eq!(tpr_at_fpr(&c, 0.1).unwrap(), 0.0);
        assert_eq!(tpr_at_fpr(&c, 1.0).unwrap(), 1.0);
        assert!(tpr_at_fpr(&c, 1.5).is_err());
    }

    #[test]
    fn thousand_negatives_one_false_positive() {
        let mut rng = seed::rng(11);
        let mut scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        scores.extend((0..500).map(|_| rng.random::<f64>() + 0.3));
        let labels: Vec<bool> = (0..1500).map(|i| i >= 1000).collect();
        let c = roc(&scores, &labels).unwrap();
        let got = c.tpr_at_fpr(0.001);
        assert_eq!(got, brute_tpr(&scores, &labels, 0.001));
        let neg_max = scores[..1000].iter().cloned().fold(f64::MIN, f64::max);
        let second = scores[..1000].iter().cloned().filter(|&s| s < neg_max).fold(f64::MIN, f64::max);
        // exactly one false positive admitted: everything above the second-highest negative
        let expect = scores[1000..].iter().filter(|&&s| s > second).count() as f64 / 500.0;
        assert_eq!(got, expect);
    }

    #[test]
    fn known_auc_of_two_normals() {
        use rand_distr::{Distribution, Normal};
        let mut rng = seed::rng(5);
        let pos = Normal::new(2.0, 1.0).unwrap();
        let neg = Normal::new(0.0, 1.0).unwrap();
        let n = 100_000;
        let scores: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { pos.sample(&mut rng) } else { neg.sample(&mut rng) })
            .collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let auc = roc(&scores, &labels).unwrap().auc();
        let expect = 0.5 * libm::erfc(-1.0);
        assert!((auc - expect).abs() < 0.01, "{auc} vs {expect}");
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics::compute(&[1.0, 0.0], &[true, false]).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        for key in ["auc", "tpr@1e-5", "tpr@1e-3", "balanced_accuracy"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn pool(n_per_class: usize) -> Dataset {
        gen_synthetic(&SyntheticConfig {
            num_classes: 2,
            dim: 3,
            per_class_count: n_per_class,
            class_separation: 3.0,
            within_class_sigma: 1.0,
            seed: 2,
        })
        .unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            hidden_sizes: vec![],
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adaptive_game_halves_the_pool() {
        let g = play_game(&pool(500), Setting::Adaptive, &GameConfig::default(), &tiny_train()).unwrap();
        assert_eq!(g.members.len(), 500);
        assert_eq!(g.query_ids.len(), 1000);
        assert_eq!(g.ground_truth.iter().filter(|&&m| m).count(), 500);
        assert_eq!(g.adversary_ids, g.query_ids);
    }

    #[test]
    fn non_adaptive_sides_are_disjoint() {
        let g = play_game(&pool(100), Setting::NonAdaptive, &GameConfig::default(), &tiny_train()).unwrap();
        let adv: BTreeSet<u64> = g.adversary_ids.iter().copied().collect();
        assert!(g.query_ids.iter().all(|id| !adv.contains(id)));
        assert_eq!(g.query_ids.len() + g.adversary_ids.len(), 200);
        assert_eq!(g.members.len(), g.query_ids.len() / 2);
    }

    #[test]
    fn reduced_scale_block_layout() {
        let ds = pool(1167);
        let parts = split_disjoint(&ds, &[0.2, 0.2, 0.2, 0.4], 3).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert!(sizes.iter().sum::<usize>() <= 2334);
        let unit = sizes[0] as f64;
        for (s, r) in sizes.iter().zip([1.0, 1.0, 1.0, 2.0]) {
            assert!((*s as f64 / unit - r).abs() < 0.01, "{sizes:?}");
        }
    }

    #[test]
    fn tampered_transcript_fails_check() {
        let mut g = play_game(&pool(20), Setting::Adaptive, &GameConfig::default(), &tiny_train()).unwrap();
        g.ground_truth[0] = !g.ground_truth[0];
        assert!(g.check().is_err());
        assert!(play_game(&pool(1), Setting::NonAdaptive, &GameConfig::default(), &tiny_train()).is_err());
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0i32..30).prop_map(|k| k as f64 / 3.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force((scores, labels) in scored_labels(), target in 0.0f64..=1.0) {
            let c = roc(&scores, &labels).unwrap();
            let mut b = brute(&scores, &labels);
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.dedup();
            let mut pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
            pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(pts, b);
            prop_assert_eq!(c.tpr_at_fpr(target), brute_tpr(&scores, &labels, target));
            prop_assert_eq!(c.balanced_accuracy(), brute_bacc(&scores, &labels));
        }

        #[test]
        fn curve_is_monotone_and_auc_invariant((scores, labels) in scored_labels()) {
            let c = roc(&scores, &labels).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let auc = c.auc();
            prop_assert!((0.0..=1.0).contains(&auc));
            let moved: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp()).collect();
            prop_assert_eq!(roc(&moved, &labels).unwrap().auc(), auc);
            prop_assert!(c.balanced_accuracy() >= 0.5);
        }

        #[test]
        fn tpr_non_decreasing_in_target((scores, labels) in scored_labels(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let c = roc(&scores, &labels).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(c.tpr_at_fpr(lo) <= c.tpr_at_fpr(hi));
        }
    }
}
