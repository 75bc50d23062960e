//! Proxy membership inference for the non-adaptive setting: shadows are trained
//! before the queries are known, so a query's IN distribution is borrowed from
//! pool instances (proxies) that resemble it, while its OUT distribution comes
//! from the frozen shadows scored on the query itself.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{log_ratio, AttackResult, SphericalFit, TargetObservation};
use crate::data::{standardize, Dataset, Instance, ScalerParams};
use crate::model::{AugmentConfig, Classifier, TrainConfig};
use crate::shadow::{self, ScoreMatrix, ShadowEnsemble};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Global,
    Class,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
    /// 1-D Wasserstein distance between the two feature-value distributions.
    Wasserstein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyStrategy {
    pub kind: ProxyKind,
    pub k: usize,
    pub metric: Metric,
    /// Instance strategy only: search among same-label pool points.
    pub same_class: bool,
}

impl Default for ProxyStrategy {
    fn default() -> Self {
        ProxyStrategy {
            kind: ProxyKind::Class,
            k: 10,
            metric: Metric::Euclidean,
            same_class: true,
        }
    }
}

impl ProxyStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ProxyKind::Instance && self.k == 0 {
            return Err(Error::config("proxy.k must be >= 1 for the instance strategy"));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self.kind {
            ProxyKind::Global => "pmia_global".into(),
            ProxyKind::Class => "pmia_class".into(),
            ProxyKind::Instance => format!("pmia_instance_k{}", self.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxySet {
    pub query_id: u64,
    pub proxy_ids: Vec<u64>,
    /// Instance strategy only.
    pub distances: Option<Vec<f64>>,
    /// The class restriction found no same-label pool point and was dropped.
    pub fell_back: bool,
}

pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return if na == nb { 0.0 } else { 1.0 };
            }
            1.0 - dot / (na * nb)
        }
        Metric::Wasserstein => {
            let mut sa = a.to_vec();
            let mut sb = b.to_vec();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
        }
    }
}

/// Pool features standardized with pool statistics, grouped by label.
#[derive(Clone, Debug)]
pub struct ProxyIndex {
    pool: Dataset,
    scaler: ScalerParams,
    scaled: Dataset,
    by_label: HashMap<usize, Vec<usize>>,
}

impl ProxyIndex {
    pub fn new(pool: &Dataset) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("proxy pool".into()));
        }
        let (scaled, scaler) = standardize(pool)?;
        let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
        for (pos, inst) in pool.instances().iter().enumerate() {
            by_label.entry(inst.label).or_default().push(pos);
        }
        Ok(ProxyIndex {
            pool: pool.clone(),
            scaler,
            scaled,
            by_label,
        })
    }

    pub fn pool(&self) -> &Dataset {
        &self.pool
    }

    pub fn find(&self, query: &Instance, strategy: &ProxyStrategy) -> Result<ProxySet> {
        strategy.validate()?;
        if query.features.len() != self.pool.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.pool.dim(),
                actual: query.features.len(),
            });
        }
        let all: Vec<usize> = (0..self.pool.len()).collect();
        let same = self.by_label.get(&query.label);
        let restrict = match strategy.kind {
            ProxyKind::Global => false,
            ProxyKind::Class => true,
            ProxyKind::Instance => strategy.same_class,
        };
        let (candidates, fell_back) = match (restrict, same) {
            (false, _) => (&all, false),
            (true, Some(v)) => (v, false),
            (true, None) => (&all, true),
        };
        let ids = |positions: &mut dyn Iterator<Item = usize>| -> Vec<u64> {
            positions.map(|p| self.pool.instances()[p].id).filter(|&id| id != query.id).collect()
        };
        if strategy.kind != ProxyKind::Instance {
            let proxy_ids = ids(&mut candidates.iter().copied());
            if proxy_ids.is_empty() {
                return Err(Error::Instance {
                    id: query.id,
                    message: "no proxy candidates besides the query itself".into(),
                });
            }
            return Ok(ProxySet {
                query_id: query.id,
                proxy_ids,
                distances: None,
                fell_back,
            });
        }
        let q = self.scaler.transform(&query.features);
        let mut scored: Vec<(f64, u64)> = candidates
            .iter()
            .map(|&p| &self.scaled.instances()[p])
            .filter(|inst| inst.id != query.id)
            .map(|inst| (distance(strategy.metric, &q, &inst.features), inst.id))
            .collect();
        if scored.is_empty() {
            return Err(Error::Instance {
                id: query.id,
                message: "no proxy candidates besides the query itself".into(),
            });
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(strategy.k);
        Ok(ProxySet {
            query_id: query.id,
            proxy_ids: scored.iter().map(|s| s.1).collect(),
            distances: Some(scored.iter().map(|s| s.0).collect()),
            fell_back,
        })
    }
}

pub fn find_proxy(pool: &Dataset, query: &Instance, strategy: &ProxyStrategy) -> Result<ProxySet> {
    ProxyIndex::new(pool)?.find(query, strategy)
}

/// IN fit pooled over the member rows of every proxy column, concatenated in
/// proxy order.
pub fn proxy_in_fit(pool_matrix: &ScoreMatrix, proxy_cols: &[usize]) -> Option<SphericalFit> {
    let cells = proxy_cols
        .iter()
        .flat_map(|&c| pool_matrix.in_rows(c).into_iter().map(move |r| pool_matrix.cell(r, c)));
    SphericalFit::fit(cells, pool_matrix.n_aug())
}

/// OUT fit from the query's own non-member rows.
pub fn query_out_fit(query_matrix: &ScoreMatrix, query_col: usize) -> Option<SphericalFit> {
    let rows = query_matrix.out_rows(query_col);
    SphericalFit::fit(rows.iter().map(|&r| query_matrix.cell(r, query_col)), query_matrix.n_aug())
}

/// `log p(obs | proxied IN) - log p(obs | OUT)` for one query.
pub fn pmia_score(
    obs: &[f64],
    query_matrix: &ScoreMatrix,
    query_col: usize,
    pool_matrix: &ScoreMatrix,
    proxy_cols: &[usize],
) -> Result<f64> {
    let fit_in = proxy_in_fit(pool_matrix, proxy_cols);
    score_with(obs, query_matrix, query_col, fit_in.as_ref())
}

fn score_with(obs: &[f64], query_matrix: &ScoreMatrix, query_col: usize, fit_in: Option<&SphericalFit>) -> Result<f64> {
    let id = query_matrix.instance_ids()[query_col];
    let fit_in = fit_in.ok_or_else(|| Error::Instance {
        id,
        message: "proxies have no IN shadow rows".into(),
    })?;
    let fit_out = query_out_fit(query_matrix, query_col).ok_or_else(|| Error::Instance {
        id,
        message: "query has no OUT shadow rows".into(),
    })?;
    Ok(log_ratio(fit_in, &fit_out, obs))
}

/// Shadow ensemble and its scores on the adversary pool, built before any query
/// is seen.
#[derive(Clone, Debug)]
pub struct PreparedShadows {
    pub pool: Dataset,
    pub ensemble: ShadowEnsemble,
    pub pool_matrix: ScoreMatrix,
    pub aug: AugmentConfig,
    pub aug_seed: u64,
}

impl PreparedShadows {
    /// Half-in/half-out ensemble over `pool`; nothing here sees query data.
    pub fn prepare(
        pool: &Dataset,
        n_models: usize,
        train: &TrainConfig,
        aug: &AugmentConfig,
        plan_seed: u64,
        aug_seed: u64,
    ) -> Result<Self> {
        let plan = shadow::make_plan(&pool.ids(), n_models, plan_seed)?;
        let ensemble = shadow::train_shadows(pool, &plan, train)?;
        let pool_matrix = shadow::score_matrix(&ensemble, pool, aug, aug_seed)?;
        Ok(PreparedShadows {
            pool: pool.clone(),
            ensemble,
            pool_matrix,
            aug: aug.clone(),
            aug_seed,
        })
    }

    /// Rejects query sets that overlap the shadow pool.
    pub fn check_disjoint(&self, query: &Dataset) -> Result<()> {
        if let Some(id) = query.ids().into_iter().find(|&id| self.pool.contains(id)) {
            return Err(Error::Instance {
                id,
                message: "non-adaptive query instance is part of the shadow pool".into(),
            });
        }
        Ok(())
    }

    /// Frozen shadows queried on `query` (membership all zero by disjointness).
    pub fn score_queries(&self, query: &Dataset) -> Result<ScoreMatrix> {
        self.check_disjoint(query)?;
        shadow::score_matrix(&self.ensemble, query, &self.aug, self.aug_seed)
    }
}

#[derive(Clone, Debug)]
pub struct PmiaOutput {
    pub result: AttackResult,
    pub proxies: Vec<ProxySet>,
}

/// Scores every query: target observation, OUT side from the frozen shadows on
/// the query, IN side from its proxies.
pub fn pmia_attack(
    target: &Classifier,
    prepared: &PreparedShadows,
    query: &Dataset,
    strategy: &ProxyStrategy,
) -> Result<PmiaOutput> {
    let query_matrix = prepared.score_queries(query)?;
    let obs = TargetObservation::from_classifier(target, query, &prepared.aug, prepared.aug_seed)?;
    pmia_with(&obs, &query_matrix, prepared, query, strategy)
}

/// As [`pmia_attack`] with the observation and query matrix supplied.
pub fn pmia_with(
    obs: &TargetObservation,
    query_matrix: &ScoreMatrix,
    prepared: &PreparedShadows,
    query: &Dataset,
    strategy: &ProxyStrategy,
) -> Result<PmiaOutput> {
    let index = ProxyIndex::new(&prepared.pool)?;
    let pool_matrix = &prepared.pool_matrix;
    let cols = |set: &ProxySet| -> Result<Vec<usize>> {
        set.proxy_ids
            .iter()
            .map(|&id| {
                pool_matrix.column_of(id).ok_or_else(|| Error::Instance {
                    id,
                    message: "proxy missing from the pool matrix".into(),
                })
            })
            .collect()
    };

    let proxies: Vec<ProxySet> = query
        .instances()
        .par_iter()
        .map(|inst| index.find(inst, strategy))
        .collect::<Result<_>>()?;

    // global and class IN distributions are shared across queries
    let mut cache: HashMap<Vec<u64>, Option<SphericalFit>> = HashMap::new();
    if strategy.kind != ProxyKind::Instance {
        let distinct: BTreeSet<&Vec<u64>> = proxies.iter().map(|p| &p.proxy_ids).collect();
        for ids in distinct {
            let set = ProxySet {
                query_id: 0,
                proxy_ids: ids.clone(),
                distances: None,
                fell_back: false,
            };
            cache.insert(ids.clone(), proxy_in_fit(pool_matrix, &cols(&set)?));
        }
    }

    let obs_pos: HashMap<u64, usize> = obs.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let scores = query
        .instances()
        .par_iter()
        .zip(&proxies)
        .map(|(inst, set)| {
            let qcol = query_matrix.column_of(inst.id).ok_or_else(|| Error::Instance {
                id: inst.id,
                message: "query missing from its score matrix".into(),
            })?;
            let oi = *obs_pos.get(&inst.id).ok_or_else(|| Error::Instance {
                id: inst.id,
                message: "query missing from the target observation".into(),
            })?;
            let fit_in = match cache.get(&set.proxy_ids) {
                Some(f) => f.clone(),
                None => proxy_in_fit(pool_matrix, &cols(set)?),
            };
            score_with(obs.scaled(oi), query_matrix, qcol, fit_in.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PmiaOutput {
        result: AttackResult::new(strategy.name(), query.ids(), scores)?,
        proxies,
    })
}

/// `query_id,proxy_id,distance` rows; distance blank outside the instance strategy.
pub fn write_proxies_csv(proxies: &[ProxySet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("query_id,proxy_id,distance\n");
    for set in proxies {
        for (k, id) in set.proxy_ids.iter().enumerate() {
            let d = set.distances.as_ref().map(|d| d[k].to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", set.query_id, id, d));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
