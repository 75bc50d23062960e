//! Config-driven pipelines: experiments over several seeds and the theory oracles.
//!
//! Experiments write `out/<config-hash>/<seed>/{matrices/, attacks/, metrics.json}`
//! plus `out/<config-hash>/{config.json, summary.json}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackKind, AttackResult, ShadowAttack, TargetObservation};
use crate::cmia::{self, CascadeConfig, ShadowSetup};
use crate::data::{self, Dataset, SyntheticConfig};
use crate::eval::{self, GameConfig, GameTranscript, Metrics, Setting};
use crate::model::{AugmentConfig, TrainConfig};
use crate::pmia::{self, PreparedShadows, ProxyStrategy};
use crate::seed;
use crate::shadow::{self, ScoreMatrix};
use crate::theory::{self, DiscreteOddsUniverse, GibbsConfig, JointUniverse, OddsWeighting, Scan};
use crate::{Error, Result};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "MIA_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`]; a no-op when unset.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(Error::config(format!("{THREADS_ENV} must be positive")));
    }
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        standardize: bool,
    },
}

impl DataSource {
    /// Relative CSV paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(c) => data::gen_synthetic(c),
            DataSource::Csv { path, label_column, standardize } => {
                let ds = data::load_csv(base.join(path), label_column)?;
                if *standardize {
                    Ok(data::standardize(&ds)?.0)
                } else {
                    Ok(ds)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameSection {
    pub member_fraction: f64,
    pub query_fraction: f64,
}

impl Default for GameSection {
    fn default() -> Self {
        let g = GameConfig::default();
        GameSection {
            member_fraction: g.member_fraction,
            query_fraction: g.query_fraction,
        }
    }
}

/// An entry of the attack list: a bare name or a table with parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackSpec {
    Name(String),
    Detailed {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<ShadowAttack>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        proxy: Option<ProxyStrategy>,
    },
}

/// A validated attack entry.
#[derive(Clone, Debug, PartialEq)]
pub enum PlannedAttack {
    Baseline { kind: AttackKind, gamma: f64 },
    Cascade { base: ShadowAttack, loss_anchors: bool },
    Proxy(ProxyStrategy),
}

impl PlannedAttack {
    pub fn output_name(&self) -> String {
        match self {
            PlannedAttack::Baseline { kind, .. } => kind.name().to_string(),
            PlannedAttack::Cascade { base, loss_anchors } => {
                let prefix = if *loss_anchors { "cmia_loss" } else { "cmia" };
                format!("{prefix}_{}", base.kind().name())
            }
            PlannedAttack::Proxy(s) => s.name(),
        }
    }

    fn needs_shadows(&self) -> bool {
        match self {
            PlannedAttack::Baseline { kind, .. } => kind.uses_shadows(),
            _ => true,
        }
    }
}

const DEFAULT_GAMMA: f64 = 2.0;

impl AttackSpec {
    pub fn plan(&self, default_proxy: &ProxyStrategy) -> Result<PlannedAttack> {
        let (name, gamma, base, proxy) = match self {
            AttackSpec::Name(n) => (n.as_str(), None, None, None),
            AttackSpec::Detailed { name, gamma, base, proxy } => (name.as_str(), *gamma, *base, proxy.clone()),
        };
        let field = |what: &str| Error::config(format!("attacks.{name}: `{what}` does not apply to this attack"));
        let planned = match name {
            "cmia" | "cmia_loss" => {
                if gamma.is_some() {
                    return Err(field("gamma"));
                }
                if proxy.is_some() {
                    return Err(field("proxy"));
                }
                PlannedAttack::Cascade {
                    base: base.unwrap_or(ShadowAttack::LiraAdaptive),
                    loss_anchors: name == "cmia_loss",
                }
            }
            "pmia" => {
                if gamma.is_some() {
                    return Err(field("gamma"));
                }
                if base.is_some() {
                    return Err(field("base"));
                }
                let s = proxy.unwrap_or_else(|| default_proxy.clone());
                s.validate()?;
                PlannedAttack::Proxy(s)
            }
            other => {
                let kind: AttackKind = other.parse().map_err(|_| Error::config(format!("attacks: unknown attack {other:?}")))?;
                if base.is_some() {
                    return Err(field("base"));
                }
                if proxy.is_some() {
                    return Err(field("proxy"));
                }
                if gamma.is_some() && kind != AttackKind::Rmia {
                    return Err(field("gamma"));
                }
                let gamma = gamma.unwrap_or(DEFAULT_GAMMA);
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::config(format!("attacks.{name}.gamma must be positive")));
                }
                PlannedAttack::Baseline { kind, gamma }
            }
        };
        Ok(planned)
    }
}

fn default_shadows() -> usize {
    64
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataSource,
    pub setting: Setting,
    #[serde(default)]
    pub game: GameSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Shadow models for the plain shadow attacks and PMIA.
    #[serde(default = "default_shadows")]
    pub n_shadows: usize,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub proxy: ProxyStrategy,
    #[serde(default)]
    pub aug: AugmentConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub parallel_seeds: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn planned_attacks(&self) -> Result<Vec<PlannedAttack>> {
        let planned = self
            .attacks
            .iter()
            .map(|a| a.plan(&self.proxy))
            .collect::<Result<Vec<_>>>()?;
        let mut names = std::collections::BTreeSet::new();
        for p in &planned {
            if !names.insert(p.output_name()) {
                return Err(Error::config(format!("attacks: {} listed twice", p.output_name())));
            }
        }
        Ok(planned)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.attacks.is_empty() {
            return Err(Error::config("attacks must not be empty"));
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !base.join(path).is_file() {
                return Err(Error::config(format!("data.path: {} does not exist", base.join(path).display())));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::config(format!("data: {e}")))?;
        }
        self.train.validate().map_err(|e| Error::config(format!("train: {e}")))?;
        self.aug.validate().map_err(|e| Error::config(format!("aug: {e}")))?;
        GameConfig {
            member_fraction: self.game.member_fraction,
            query_fraction: self.game.query_fraction,
            seed: 0,
        }
        .validate()?;
        if self.n_shadows < 2 || !self.n_shadows.is_multiple_of(2) {
            return Err(Error::config("n_shadows must be even and >= 2"));
        }
        let planned = self.planned_attacks()?;
        if planned.iter().any(|p| matches!(p, PlannedAttack::Cascade { .. })) {
            self.cascade.validate().map_err(|e| Error::config(format!("cascade: {e}")))?;
        }
        for p in &planned {
            let ok = match (p, self.setting) {
                (PlannedAttack::Cascade { .. }, s) => s == Setting::Adaptive,
                (PlannedAttack::Baseline { kind: AttackKind::LiraAdaptive, .. }, s) => s == Setting::Adaptive,
                (PlannedAttack::Proxy(_), s) => s == Setting::NonAdaptive,
                _ => true,
            };
            if !ok {
                return Err(Error::config(format!(
                    "attacks.{}: not available in the {} setting",
                    p.output_name(),
                    self.setting
                )));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form, ignoring
    /// fields that cannot change results.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out_dir: PathBuf::new(),
            parallel_seeds: false,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub m_in: usize,
    pub m_out: usize,
    pub wrong_in: usize,
    pub wrong_out: usize,
    pub tau_in: f64,
    pub tau_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, Metrics>,
    pub cascades: BTreeMap<String, Vec<IterationSummary>>,
    pub models_trained: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// attack -> metric -> mean and std over seeds
    pub aggregate: BTreeMap<String, BTreeMap<String, MeanStd>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub dir: PathBuf,
    pub seeds: Vec<SeedReport>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn matrix_files(&self) -> Result<Vec<PathBuf>> {
        let mut found = Vec::new();
        collect_files(&self.dir, "mia", &mut found)?;
        found.sort();
        Ok(found)
    }
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, ext, out)?;
        } else if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run_experiment(config_path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let (config, base) = ExperimentConfig::load(config_path)?;
    run_experiment_with(&config, &base)
}

/// Runs every seed, failing fast; artifacts of completed work stay on disk.
pub fn run_experiment_with(config: &ExperimentConfig, base: &Path) -> Result<ExperimentReport> {
    config.validate(base)?;
    let hash = config.hash();
    let dir = base.join(&config.out_dir).join(&hash);
    create_dir(&dir)?;
    let config_file = dir.join("config.json");
    let body = serde_json::to_vec_pretty(config)?;
    if config_file.exists() {
        let prev: ExperimentConfig = serde_json::from_slice(&fs::read(&config_file).map_err(|e| Error::io(&config_file, e))?)?;
        if prev.hash() != hash {
            return Err(Error::config(format!("{} holds artifacts of another config", dir.display())));
        }
    }
    fs::write(&config_file, body).map_err(|e| Error::io(&config_file, e))?;

    let pool = config.data.load(base)?;
    let planned = config.planned_attacks()?;
    let run = |s: &u64| run_seed(config, &planned, &pool, &dir, &hash, *s);
    let seeds: Vec<SeedReport> = if config.parallel_seeds {
        config.seeds.par_iter().map(run).collect::<Result<_>>()?
    } else {
        config.seeds.iter().map(run).collect::<Result<_>>()?
    };

    let mut aggregate: BTreeMap<String, BTreeMap<String, MeanStd>> = BTreeMap::new();
    for p in &planned {
        let name = p.output_name();
        let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&seeds.iter().map(|r| f(&r.metrics[&name])).collect::<Vec<_>>());
        let mut m = BTreeMap::new();
        m.insert("auc".into(), pick(|m| m.auc));
        m.insert("tpr@1e-5".into(), pick(|m| m.tpr_at_1e5));
        m.insert("tpr@1e-3".into(), pick(|m| m.tpr_at_1e3));
        m.insert("balanced_accuracy".into(), pick(|m| m.balanced_accuracy));
        aggregate.insert(name, m);
    }
    let summary = Summary {
        config_hash: hash.clone(),
        seeds: config.seeds.clone(),
        aggregate,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ExperimentReport {
        config_hash: hash,
        dir,
        seeds,
        summary,
    })
}

struct SeedDirs {
    matrices: PathBuf,
    attacks: PathBuf,
}

struct Emitter<'a> {
    dirs: &'a SeedDirs,
    hash: &'a str,
    game: &'a GameTranscript,
    metrics: BTreeMap<String, Metrics>,
}

impl Emitter<'_> {
    fn emit(&mut self, name: &str, result: AttackResult) -> Result<()> {
        let result = AttackResult {
            attack_name: name.to_string(),
            ..result
        }
        .with_members(&self.game.members)
        .with_config_hash(self.hash);
        result.write_csv(self.dirs.attacks.join(format!("{name}.csv")))?;
        let curve = eval::roc(&result.scores, result.labels()?)?;
        curve.write_csv(self.dirs.attacks.join(format!("{name}_roc.csv")))?;
        self.metrics.insert(name.to_string(), Metrics::from_curve(&curve));
        Ok(())
    }

    fn save_matrix(&self, matrix: &ScoreMatrix, file: &str) -> Result<()> {
        shadow::save_matrix_with_sidecar(matrix, self.dirs.matrices.join(file), self.hash, None)
    }
}

fn baseline(kind: AttackKind, gamma: f64, obs: &TargetObservation, population: &TargetObservation, matrix: Option<&ScoreMatrix>) -> Result<AttackResult> {
    let need = || matrix.ok_or_else(|| Error::config(format!("{kind} needs shadow models")));
    match kind {
        AttackKind::Loss => attacks::attack_loss(obs),
        AttackKind::Entropy => attacks::attack_entropy(obs),
        AttackKind::Calibration => attacks::attack_calibration(obs, need()?),
        AttackKind::AttackR => attacks::attack_ratio(obs, need()?),
        AttackKind::LiraAdaptive => attacks::lira_adaptive(obs, need()?),
        AttackKind::LiraNonadaptive => attacks::lira_nonadaptive(obs, need()?),
        AttackKind::Rmia => attacks::rmia(obs, population, need()?, gamma),
    }
}

fn run_seed(config: &ExperimentConfig, planned: &[PlannedAttack], pool: &Dataset, root: &Path, hash: &str, run_seed: u64) -> Result<SeedReport> {
    let started = Instant::now();
    let seed_dir = root.join(run_seed.to_string());
    let dirs = SeedDirs {
        matrices: seed_dir.join("matrices"),
        attacks: seed_dir.join("attacks"),
    };
    create_dir(&dirs.matrices)?;
    create_dir(&dirs.attacks)?;

    let game_cfg = GameConfig {
        member_fraction: config.game.member_fraction,
        query_fraction: config.game.query_fraction,
        seed: run_seed,
    };
    let game = eval::play_game(pool, config.setting, &game_cfg, &config.train)?;
    let query = pool.subset(&game.query_ids)?;
    let aug_seed = seed::derive_tagged(run_seed, "aug", 0);
    let obs = TargetObservation::from_classifier(&game.target, &query, &config.aug, aug_seed)?;
    let mut em = Emitter {
        dirs: &dirs,
        hash,
        game: &game,
        metrics: BTreeMap::new(),
    };
    let mut cascades = BTreeMap::new();
    let mut models_trained = 0;
    let needs_shadows = planned.iter().any(PlannedAttack::needs_shadows);

    match config.setting {
        Setting::Adaptive => {
            let setup = ShadowSetup {
                train: config.train.clone(),
                aug: config.aug.clone(),
                aug_seed,
                seed: seed::derive_tagged(run_seed, "shadows", 0),
            };
            let needs_plain = planned.iter().any(|p| matches!(p, PlannedAttack::Baseline { kind, .. } if kind.uses_shadows()));
            let matrix = if needs_plain {
                let m = setup.first_matrix(&query, &query, config.n_shadows, config.cascade.sample_fraction)?;
                models_trained += m.n_models();
                em.save_matrix(&m, "shadows.mia")?;
                Some(m)
            } else {
                None
            };
            for p in planned {
                match p {
                    PlannedAttack::Baseline { kind, gamma } => {
                        let r = baseline(*kind, *gamma, &obs, &obs, matrix.as_ref())?;
                        em.emit(&p.output_name(), r)?;
                    }
                    PlannedAttack::Cascade { base, loss_anchors } => {
                        let first = matrix
                            .as_ref()
                            .filter(|m| m.n_models() == config.cascade.n_models_per_iter)
                            .cloned();
                        let reused = first.as_ref().map_or(0, ScoreMatrix::n_models);
                        let run = if *loss_anchors { cmia::cascade_loss_anchors } else { cmia::cascade };
                        let t = run(*base, &game.target, &query, &query, &config.cascade, &setup, first)?;
                        models_trained += t.total_models() - reused;
                        let name = p.output_name();
                        t.save(dirs.matrices.join(&name), hash)?;
                        let summary = t
                            .iterations
                            .iter()
                            .map(|rec| {
                                let (wrong_in, wrong_out) = cmia::anchor_errors(&rec.anchors, &game.members);
                                IterationSummary {
                                    iteration: rec.iteration,
                                    m_in: rec.anchors.m_in.len(),
                                    m_out: rec.anchors.m_out.len(),
                                    wrong_in,
                                    wrong_out,
                                    tau_in: rec.thresholds.tau_in,
                                    tau_out: rec.thresholds.tau_out,
                                }
                            })
                            .collect();
                        cascades.insert(name.clone(), summary);
                        em.emit(&name, t.final_result)?;
                    }
                    PlannedAttack::Proxy(_) => unreachable!("rejected by validation"),
                }
            }
        }
        Setting::NonAdaptive => {
            let adversary = pool.subset(&game.adversary_ids)?;
            let prepared = if needs_shadows {
                let train = config.train.clone();
                let p = PreparedShadows::prepare(
                    &adversary,
                    config.n_shadows,
                    &train,
                    &config.aug,
                    seed::derive_tagged(run_seed, "shadows", 0),
                    aug_seed,
                )?;
                models_trained += p.ensemble.models.len();
                em.save_matrix(&p.pool_matrix, "pool.mia")?;
                Some(p)
            } else {
                None
            };
            let query_matrix = match &prepared {
                Some(p) => {
                    let m = p.score_queries(&query)?;
                    em.save_matrix(&m, "query.mia")?;
                    Some(m)
                }
                None => None,
            };
            for p in planned {
                match p {
                    PlannedAttack::Baseline { kind: AttackKind::Rmia, gamma } => {
                        let prep = prepared.as_ref().expect("shadows prepared");
                        let population = TargetObservation::from_classifier(&game.target, &prep.pool, &config.aug, aug_seed)?;
                        let both = ScoreMatrix::concat_columns(query_matrix.as_ref().expect("query matrix"), &prep.pool_matrix)?;
                        let r = attacks::rmia(&obs, &population, &both, *gamma)?;
                        em.emit(&p.output_name(), r)?;
                    }
                    PlannedAttack::Baseline { kind, gamma } => {
                        let r = baseline(*kind, *gamma, &obs, &obs, query_matrix.as_ref())?;
                        em.emit(&p.output_name(), r)?;
                    }
                    PlannedAttack::Proxy(strategy) => {
                        let prep = prepared.as_ref().expect("shadows prepared");
                        let out = pmia::pmia_with(&obs, query_matrix.as_ref().expect("query matrix"), prep, &query, strategy)?;
                        let name = p.output_name();
                        pmia::write_proxies_csv(&out.proxies, dirs.attacks.join(format!("{name}_proxies.csv")))?;
                        em.emit(&name, out.result)?;
                    }
                    PlannedAttack::Cascade { .. } => unreachable!("rejected by validation"),
                }
            }
        }
    }

    let report = SeedReport {
        config_hash: hash.to_string(),
        seed: run_seed,
        metrics: em.metrics,
        cascades,
        models_trained,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&seed_dir.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsOracleConfig {
    pub universes: usize,
    pub n: usize,
    pub loglik_scale: f64,
    pub sweeps: u64,
    pub burn_in: u64,
    pub scan: Scan,
    pub seed: u64,
    pub tv_tolerance: f64,
    pub balance_tolerance: f64,
}

impl Default for GibbsOracleConfig {
    fn default() -> Self {
        GibbsOracleConfig {
            universes: 5,
            n: 8,
            loglik_scale: 1.0,
            sweeps: 1_000_000,
            burn_in: 10_000,
            scan: Scan::Systematic,
            seed: 0,
            tv_tolerance: 0.02,
            balance_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OddsOracleConfig {
    pub universes: usize,
    pub max_datasets: usize,
    pub max_alphabet: usize,
    pub n_ids: u64,
    pub seed: u64,
    pub rel_tolerance: f64,
}

impl Default for OddsOracleConfig {
    fn default() -> Self {
        OddsOracleConfig {
            universes: 50,
            max_datasets: 64,
            max_alphabet: 16,
            n_ids: 6,
            seed: 0,
            rel_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub gibbs: GibbsOracleConfig,
    pub odds: OddsOracleConfig,
    /// Swaps the Gibbs conditional so the detailed-balance check must fail.
    pub negative_control: bool,
}

impl OracleConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("oracle config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gibbs;
        if g.n == 0 || g.n > theory::MAX_ENUM {
            return Err(Error::config(format!("gibbs.n must be in 1..={}", theory::MAX_ENUM)));
        }
        if g.burn_in >= g.sweeps {
            return Err(Error::config("gibbs.burn_in must be smaller than gibbs.sweeps"));
        }
        let o = &self.odds;
        if o.max_datasets < 2 || o.max_alphabet < 1 || o.n_ids == 0 {
            return Err(Error::config("odds: need max_datasets >= 2, max_alphabet >= 1, n_ids >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsCase {
    pub seed: u64,
    pub n: usize,
    pub total_variation: f64,
    pub detailed_balance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddsCase {
    pub seed: u64,
    pub n_datasets: usize,
    pub alphabet: usize,
    pub checks: usize,
    pub decision_mismatches: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub gibbs: Vec<GibbsCase>,
    pub odds: Vec<OddsCase>,
    pub negative_control: bool,
    pub seconds: f64,
    pub pass: bool,
}

/// Gibbs convergence and detailed balance on one random joint universe.
pub fn gibbs_case(c: &GibbsOracleConfig, index: usize, negative_control: bool) -> Result<GibbsCase> {
    let useed = seed::derive_tagged(c.seed, "oracle-joint", index as u64);
    let u = JointUniverse::random(c.n, c.loglik_scale, useed)?;
    let post = theory::enum_posterior(&u)?;
    let run = theory::gibbs_sample(
        &u,
        &GibbsConfig {
            scan: c.scan,
            sweeps: c.sweeps,
            burn_in: c.burn_in,
            seed: seed::derive_tagged(c.seed, "oracle-chain", index as u64),
        },
    )?;
    let tv = theory::total_variation(&run.empirical(), &post.probs);
    let balance = if negative_control {
        theory::detailed_balance_with(&u, theory::swapped_kernel)?
    } else {
        theory::detailed_balance_check(&u)?
    };
    Ok(GibbsCase {
        seed: useed,
        n: c.n,
        total_variation: tv,
        detailed_balance: balance,
        pass: tv < c.tv_tolerance && balance < c.balance_tolerance,
    })
}

/// The odds test against brute-force posteriors, for every id and letter.
pub fn odds_case(c: &OddsOracleConfig, index: usize) -> Result<OddsCase> {
    use rand::Rng;
    let useed = seed::derive_tagged(c.seed, "oracle-odds", index as u64);
    let mut rng = seed::rng(useed);
    let n_datasets = rng.random_range(2..=c.max_datasets);
    let alphabet = rng.random_range(1..=c.max_alphabet);
    let u = DiscreteOddsUniverse::random(n_datasets, alphabet, c.n_ids, useed)?;
    let (mut checks, mut mismatches, mut worst) = (0, 0, 0.0f64);
    for query in 0..c.n_ids {
        let prior = theory::prior_odds(&u, query);
        if !(prior > 0.0 && prior.is_finite()) {
            continue;
        }
        for e in 0..alphabet {
            let Ok(out) = theory::odds_test(&u, query, e, OddsWeighting::Prior) else { continue };
            checks += 1;
            if out.decision != (out.direct_posterior_ratio > 1.0) {
                mismatches += 1;
            }
            let lifted = out.lhs_ratio * prior;
            worst = worst.max((lifted / out.direct_posterior_ratio - 1.0).abs());
        }
    }
    Ok(OddsCase {
        seed: useed,
        n_datasets,
        alphabet,
        checks,
        decision_mismatches: mismatches,
        max_rel_error: worst,
        pass: checks > 0 && mismatches == 0 && worst < c.rel_tolerance,
    })
}

pub fn run_oracles_with(config: &OracleConfig) -> Result<OracleReport> {
    config.validate()?;
    let started = Instant::now();
    let gibbs = (0..config.gibbs.universes)
        .into_par_iter()
        .map(|i| gibbs_case(&config.gibbs, i, config.negative_control))
        .collect::<Result<Vec<_>>>()?;
    let odds = (0..config.odds.universes)
        .map(|i| odds_case(&config.odds, i))
        .collect::<Result<Vec<_>>>()?;
    let pass = gibbs.iter().all(|c| c.pass) && odds.iter().all(|c| c.pass);
    Ok(OracleReport {
        gibbs,
        odds,
        negative_control: config.negative_control,
        seconds: started.elapsed().as_secs_f64(),
        pass,
    })
}

pub fn run_oracles(config_path: impl AsRef<Path>) -> Result<OracleReport> {
    run_oracles_with(&OracleConfig::load(config_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
setting = "adaptive"
attacks = ["loss"]
seeds = [1]

[data]
kind = "synthetic"
num_classes = 3
dim = 4
per_class_count = 20
class_separation = 2.0
within_class_sigma = 1.0
seed = 5

[train]
hidden_sizes = [8]
epochs = 5
"#;

    #[test]
    fn minimal_config_emits_one_result() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        config.out_dir = PathBuf::from("out");
        let report = run_experiment_with(&config, dir.path()).unwrap();
        let seed_dir = report.dir.join("1");
        let csvs: Vec<_> = fs::read_dir(seed_dir.join("attacks"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv") && !n.ends_with("_roc.csv"))
            .collect();
        assert_eq!(csvs, vec!["loss.csv".to_string()]);
        assert!(seed_dir.join("metrics.json").is_file());
        assert!(report.dir.join("summary.json").is_file());
        assert_eq!(report.seeds[0].models_trained, 0);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig {
            out_dir: "elsewhere".into(),
            parallel_seeds: true,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = ExperimentConfig { seeds: vec![2], ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation_names_fields() {
        let base = Path::new(".");
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.seeds.clear();
        assert!(c.validate(base).unwrap_err().to_string().contains("seeds"));
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.attacks = vec![AttackSpec::Name("nope".into())];
        assert!(c.validate(base).unwrap_err().to_string().contains("nope"));
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.attacks = vec![AttackSpec::Name("pmia".into())];
        assert!(c.validate(base).unwrap_err().to_string().contains("adaptive"));
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.train.epochs = 0;
        assert!(c.validate(base).unwrap_err().to_string().contains("train"));
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.attacks = vec![AttackSpec::Name("loss".into()), AttackSpec::Name("loss".into())];
        assert!(c.validate(base).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn attack_table_entries() {
        let text = MINIMAL.replace(
            r#"attacks = ["loss"]"#,
            r#"attacks = ["loss", { name = "rmia", gamma = 1.5 }, { name = "cmia", base = "attack_r" }]"#,
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let planned = c.planned_attacks().unwrap();
        assert_eq!(planned[1], PlannedAttack::Baseline { kind: AttackKind::Rmia, gamma: 1.5 });
        assert_eq!(planned[2].output_name(), "cmia_attack_r");
        let bad = MINIMAL.replace(r#"attacks = ["loss"]"#, r#"attacks = [{ name = "loss", gamma = 1.0 }]"#);
        assert!(ExperimentConfig::from_toml(&bad).unwrap().planned_attacks().is_err());
    }

    #[test]
    fn non_adaptive_pipeline_keeps_sides_apart() {
        let text = MINIMAL
            .replace(r#"setting = "adaptive""#, r#"setting = "non_adaptive""#)
            .replace(
                r#"attacks = ["loss"]"#,
                r#"attacks = ["lira_nonadaptive", "pmia", "rmia", { name = "pmia", proxy = { kind = "global" } }]"#,
            )
            .replace("per_class_count = 20", "per_class_count = 40");
        let mut c = ExperimentConfig::from_toml(&text).unwrap();
        c.n_shadows = 4;
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment_with(&c, dir.path()).unwrap();
        let m = &report.seeds[0].metrics;
        assert!(m.contains_key("pmia_class") && m.contains_key("pmia_global") && m.contains_key("rmia"));
        let pool = shadow::load_matrix(report.dir.join("1/matrices/pool.mia")).unwrap();
        let query = shadow::load_matrix(report.dir.join("1/matrices/query.mia")).unwrap();
        assert!(query.instance_ids().iter().all(|id| pool.column_of(*id).is_none()));
        assert_eq!(shadow::load_sidecar(report.dir.join("1/matrices/query.mia")).unwrap().unwrap().config_hash, report.config_hash);
    }

    #[test]
    fn adaptive_cascade_pipeline() {
        let text = MINIMAL.replace(r#"attacks = ["loss"]"#, r#"attacks = ["lira_adaptive", "cmia", "cmia_loss"]"#);
        let mut c = ExperimentConfig::from_toml(&text).unwrap();
        c.n_shadows = 4;
        c.cascade = CascadeConfig {
            max_iterations: 2,
            delta: Some(0),
            n_models_per_iter: 4,
            r: 2,
            ..CascadeConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment_with(&c, dir.path()).unwrap();
        let s = &report.seeds[0];
        assert_eq!(s.cascades["cmia_lira_adaptive"].len(), 2);
        // both cascades reuse the plain ensemble and train one more each
        assert_eq!(s.models_trained, 12);
        assert!(report.dir.join("1/matrices/cmia_lira_adaptive/iter_02.mia").is_file());
        assert!(report.summary.aggregate.contains_key("cmia_loss_lira_adaptive"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let text = MINIMAL.replace(r#"attacks = ["loss"]"#, r#"attacks = ["lira_adaptive"]"#);
        let mut c = ExperimentConfig::from_toml(&text).unwrap();
        c.n_shadows = 4;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment_with(&c, a.path()).unwrap();
        let rb = run_experiment_with(&c, b.path()).unwrap();
        let fa = ra.matrix_files().unwrap();
        assert!(!fa.is_empty());
        for (x, y) in fa.iter().zip(rb.matrix_files().unwrap()) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    fn quick_oracles(negative: bool) -> OracleConfig {
        OracleConfig {
            gibbs: GibbsOracleConfig {
                universes: 2,
                n: 4,
                sweeps: 40_000,
                burn_in: 1_000,
                ..GibbsOracleConfig::default()
            },
            odds: OddsOracleConfig {
                universes: 10,
                ..OddsOracleConfig::default()
            },
            negative_control: negative,
        }
    }

    #[test]
    fn oracles_pass_and_negative_control_fails() {
        let ok = run_oracles_with(&quick_oracles(false)).unwrap();
        assert!(ok.pass, "{ok:?}");
        let bad = run_oracles_with(&quick_oracles(true)).unwrap();
        assert!(!bad.pass);
        assert!(bad.gibbs.iter().all(|c| c.detailed_balance > 1e-3));
    }

    #[test]
    fn oracle_config_parses_partial_toml() {
        let c: OracleConfig = toml::from_str("negative_control = true\n[gibbs]\nn = 6\n").unwrap();
        assert_eq!(c.gibbs.n, 6);
        assert_eq!(c.gibbs.sweeps, 1_000_000);
        assert!(c.negative_control);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
