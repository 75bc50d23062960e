//! Brute-force oracles for the two theorems behind the attacks: Gibbs sampling
//! over joint membership vectors converges to the exact posterior, and the
//! posterior-odds test is the Bayes-optimal marginal decision.
//!
//! A membership vector over `n` instances is a `u32` whose bit `i` is `M_i`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

/// Largest `n` whose `2^n` states are enumerated.
pub const MAX_ENUM: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointUniverse {
    pub prior_in: Vec<f64>,
    /// `log Pr(o | M)` for every membership vector `M` (index = bit pattern).
    pub loglik: Vec<f64>,
}

impl JointUniverse {
    pub fn new(prior_in: Vec<f64>, loglik: Vec<f64>) -> Result<Self> {
        let u = JointUniverse { prior_in, loglik };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || n > MAX_ENUM {
            return Err(Error::config(format!("universe size {n} outside 1..={MAX_ENUM}")));
        }
        if self.loglik.len() != 1 << n {
            return Err(Error::DimensionMismatch {
                expected: 1 << n,
                actual: self.loglik.len(),
            });
        }
        if let Some(p) = self.prior_in.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::config(format!("prior {p} outside (0, 1)")));
        }
        if self.loglik.iter().any(|l| !l.is_finite()) {
            return Err(Error::config("non-finite log-likelihood"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.prior_in.len()
    }

    pub fn n_states(&self) -> usize {
        1 << self.n()
    }

    /// Priors uniform in [0.1, 0.9], log-likelihoods i.i.d. `N(0, scale^2)`.
    pub fn random(n: usize, loglik_scale: f64, seed: u64) -> Result<Self> {
        if n == 0 || n > MAX_ENUM {
            return Err(Error::config(format!("universe size {n} outside 1..={MAX_ENUM}")));
        }
        let mut rng = seed::rng(seed::derive_tagged(seed, "joint-universe", n as u64));
        let prior_in = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let normal = Normal::new(0.0, loglik_scale).map_err(|e| Error::config(e.to_string()))?;
        let loglik = (0..1usize << n).map(|_| normal.sample(&mut rng)).collect();
        JointUniverse::new(prior_in, loglik)
    }

    /// Unnormalized log posterior of state `m`.
    pub fn log_weight(&self, m: u32) -> f64 {
        self.loglik[m as usize]
            + self
                .prior_in
                .iter()
                .enumerate()
                .map(|(i, p)| if m >> i & 1 == 1 { p.ln() } else { (-p).ln_1p() })
                .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    pub marginals: Vec<f64>,
    /// Pairwise mutual information `I(M_i; M_j)` under the posterior (nats).
    pub mutual_info: Vec<Vec<f64>>,
}

impl Posterior {
    /// `Pr(M_i = 1 | M_j = 1, o)`.
    pub fn conditional_in(&self, i: usize, j: usize) -> f64 {
        let both: f64 = self.mass_where(|m| m >> i & 1 == 1 && m >> j & 1 == 1);
        both / self.marginals[j]
    }

    fn mass_where(&self, pred: impl Fn(u32) -> bool) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(m, _)| pred(m as u32))
            .map(|(_, p)| p)
            .sum()
    }

    /// Expectation of a bounded statistic of the membership vector.
    pub fn expect(&self, f: impl Fn(u32) -> f64) -> f64 {
        self.probs.iter().enumerate().map(|(m, p)| p * f(m as u32)).sum()
    }
}

/// Exact posterior `Pr(M | o)` by enumerating all `2^n` membership vectors.
pub fn enum_posterior(u: &JointUniverse) -> Result<Posterior> {
    u.validate()?;
    let n = u.n();
    let logw: Vec<f64> = (0..u.n_states() as u32).map(|m| u.log_weight(m)).collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();

    let mut marginals = vec![0.0; n];
    let mut both = vec![vec![0.0; n]; n];
    for (m, &p) in probs.iter().enumerate() {
        let bits: Vec<usize> = (0..n).filter(|i| m >> i & 1 == 1).collect();
        for &i in &bits {
            marginals[i] += p;
            for &j in &bits {
                both[i][j] += p;
            }
        }
    }
    let mut mutual_info = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p11 = both[i][j];
            let cells = [
                (p11, marginals[i], marginals[j]),
                (marginals[i] - p11, marginals[i], 1.0 - marginals[j]),
                (marginals[j] - p11, 1.0 - marginals[i], marginals[j]),
                (1.0 - marginals[i] - marginals[j] + p11, 1.0 - marginals[i], 1.0 - marginals[j]),
            ];
            mutual_info[i][j] = cells
                .iter()
                .filter(|(pab, _, _)| *pab > 0.0)
                .map(|(pab, pa, pb)| pab * (pab / (pa * pb)).ln())
                .sum::<f64>()
                .max(0.0);
        }
    }
    Ok(Posterior {
        probs,
        marginals,
        mutual_info,
    })
}

/// `Pr(M_i = 1 | M_{-i}, o)` from the two single-bit states around `m`.
pub fn gibbs_conditional(u: &JointUniverse, m: u32, i: usize) -> f64 {
    let one = (m | 1 << i) as usize;
    let zero = (m & !(1 << i)) as usize;
    let prior = u.prior_in[i];
    if u.loglik[one] == u.loglik[zero] {
        return prior;
    }
    let a = u.loglik[one] + prior.ln();
    let b = u.loglik[zero] + (-prior).ln_1p();
    let hi = a.max(b);
    let lse = hi + ((a - hi).exp() + (b - hi).exp()).ln();
    (a - lse).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scan {
    /// Coordinates updated in order `0..n` every sweep.
    Systematic,
    /// A fresh random permutation of the coordinates every sweep.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub scan: Scan,
    /// Total sweeps, burn-in included.
    pub sweeps: u64,
    pub burn_in: u64,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.sweeps {
            return Err(Error::config("burn_in must be smaller than sweeps"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsRun {
    /// Visit counts per state over the kept sweeps.
    pub counts: Vec<u64>,
    /// State after every kept sweep.
    pub trace: Vec<u32>,
}

impl GibbsRun {
    pub fn empirical(&self) -> Vec<f64> {
        let total = self.trace.len() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Time average of `f` over the first `len` kept sweeps.
    pub fn time_average(&self, len: usize, f: impl Fn(u32) -> f64) -> f64 {
        let len = len.min(self.trace.len());
        self.trace[..len].iter().map(|&m| f(m)).sum::<f64>() / len as f64
    }
}

/// Single-site Gibbs sampler; one sweep updates every coordinate once.
pub fn gibbs_sample(u: &JointUniverse, config: &GibbsConfig) -> Result<GibbsRun> {
    u.validate()?;
    config.validate()?;
    let n = u.n();
    let mut rng = seed::rng(seed::derive_tagged(config.seed, "gibbs", 0));
    let mut state: u32 = 0;
    for i in 0..n {
        if rng.random::<f64>() < u.prior_in[i] {
            state |= 1 << i;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let kept = (config.sweeps - config.burn_in) as usize;
    let mut trace = Vec::with_capacity(kept);
    let mut counts = vec![0u64; u.n_states()];
    for sweep in 0..config.sweeps {
        if config.scan == Scan::Random {
            order.shuffle(&mut rng);
        }
        for &i in &order {
            let p = gibbs_conditional(u, state, i);
            if rng.random::<f64>() < p {
                state |= 1 << i;
            } else {
                state &= !(1 << i);
            }
        }
        if sweep >= config.burn_in {
            trace.push(state);
            counts[state as usize] += 1;
        }
    }
    Ok(GibbsRun { counts, trace })
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest `|pi(M) K_i(M -> M') - pi(M') K_i(M' -> M)|` over all single-bit
/// flips, where `kernel(u, m, i)` is the probability of setting bit `i` to 1.
pub fn detailed_balance_with(u: &JointUniverse, kernel: impl Fn(&JointUniverse, u32, usize) -> f64) -> Result<f64> {
    let post = enum_posterior(u)?;
    let step = |m: u32, i: usize, to: u32| {
        let p1 = kernel(u, m, i);
        if to >> i & 1 == 1 {
            p1
        } else {
            1.0 - p1
        }
    };
    let mut worst: f64 = 0.0;
    for m in 0..u.n_states() as u32 {
        for i in 0..u.n() {
            let f = m ^ (1 << i);
            let lhs = post.probs[m as usize] * step(m, i, f);
            let rhs = post.probs[f as usize] * step(f, i, m);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

pub fn detailed_balance_check(u: &JointUniverse) -> Result<f64> {
    detailed_balance_with(u, gibbs_conditional)
}

/// Negative control: the conditional with its two outcomes swapped.
pub fn swapped_kernel(u: &JointUniverse, m: u32, i: usize) -> f64 {
    1.0 - gibbs_conditional(u, m, i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteOddsUniverse {
    pub datasets: Vec<BTreeSet<u64>>,
    pub prior: Vec<f64>,
    /// `channel[s][e] = Pr(observation e | D = datasets[s])`.
    pub channel: Vec<Vec<f64>>,
}

const SUM_TOL: f64 = 1e-12;

impl DiscreteOddsUniverse {
    pub fn new(datasets: Vec<BTreeSet<u64>>, prior: Vec<f64>, channel: Vec<Vec<f64>>) -> Result<Self> {
        let u = DiscreteOddsUniverse {
            datasets,
            prior,
            channel,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.datasets.len();
        if s == 0 || self.prior.len() != s || self.channel.len() != s {
            return Err(Error::config("datasets, prior and channel must have equal nonzero length"));
        }
        let alphabet = self.alphabet();
        if alphabet == 0 || self.channel.iter().any(|row| row.len() != alphabet) {
            return Err(Error::config("channel rows must share one nonempty alphabet"));
        }
        let check = |v: &[f64], what: &str| -> Result<()> {
            if v.iter().any(|p| !(*p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
                return Err(Error::config(format!("{what} is not a probability vector")));
            }
            Ok(())
        };
        check(&self.prior, "dataset prior")?;
        for row in &self.channel {
            check(row, "channel row")?;
        }
        Ok(())
    }

    pub fn alphabet(&self) -> usize {
        self.channel.first().map_or(0, Vec::len)
    }

    /// Random family over ids `0..n_ids`; id 0 is placed in some but not all datasets.
    pub fn random(n_datasets: usize, alphabet: usize, n_ids: u64, seed: u64) -> Result<Self> {
        if n_datasets < 2 || alphabet == 0 || n_ids == 0 {
            return Err(Error::config("random odds universe needs >= 2 datasets, a letter and an id"));
        }
        let mut rng = seed::rng(seed::derive_tagged(seed, "odds-universe", 0));
        let mut datasets: Vec<BTreeSet<u64>> = (0..n_datasets)
            .map(|_| (0..n_ids).filter(|_| rng.random::<bool>()).collect())
            .collect();
        datasets[0].insert(0);
        datasets[1].remove(&0);
        let prior = normalized((0..n_datasets).map(|_| rng.random_range(0.05..1.0)).collect());
        let channel = (0..n_datasets)
            .map(|_| normalized((0..alphabet).map(|_| rng.random_range(0.05..1.0)).collect()))
            .collect();
        DiscreteOddsUniverse::new(datasets, prior, channel)
    }
}

/// Divides by the sum, then folds the rounding residue into the largest entry
/// so the vector sums to 1 as closely as floating point allows.
fn normalized(v: Vec<f64>) -> Vec<f64> {
    let z: f64 = v.iter().sum();
    let mut out: Vec<f64> = v.iter().map(|x| x / z).collect();
    let resid = 1.0 - out.iter().sum::<f64>();
    let big = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap_or(0);
    out[big] += resid;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OddsWeighting {
    /// Expectations under the prior conditioned on each family.
    Prior,
    /// Plain averages over each family.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddsOutcome {
    pub decision: bool,
    pub lhs_ratio: f64,
    pub rhs_threshold: f64,
    pub direct_posterior_ratio: f64,
}

/// Posterior-odds membership test for `query` given observation letter `e`.
pub fn odds_test(u: &DiscreteOddsUniverse, query: u64, e: usize, weighting: OddsWeighting) -> Result<OddsOutcome> {
    u.validate()?;
    if e >= u.alphabet() {
        return Err(Error::config(format!("observation {e} outside alphabet of {}", u.alphabet())));
    }
    let evidence: f64 = u.prior.iter().zip(&u.channel).map(|(p, row)| p * row[e]).sum();
    if evidence <= 0.0 {
        return Err(Error::config(format!("observation {e} has zero probability")));
    }
    let family = |member: bool| -> (f64, f64, usize) {
        let mut mass = 0.0;
        let mut weighted = 0.0;
        let mut plain = 0.0;
        let mut count = 0;
        for ((d, p), row) in u.datasets.iter().zip(&u.prior).zip(&u.channel) {
            if d.contains(&query) == member && *p > 0.0 {
                mass += p;
                weighted += p * row[e];
                plain += row[e];
                count += 1;
            }
        }
        let expect = match weighting {
            OddsWeighting::Prior => weighted / mass,
            OddsWeighting::Uniform => plain / count as f64,
        };
        (mass, expect, count)
    };
    let (p_in, l_in, n_in) = family(true);
    let (p_out, l_out, n_out) = family(false);
    let direct = direct_posterior_ratio(u, query, e);
    if n_in == 0 {
        return Ok(OddsOutcome {
            decision: false,
            lhs_ratio: 0.0,
            rhs_threshold: f64::INFINITY,
            direct_posterior_ratio: direct,
        });
    }
    if n_out == 0 {
        return Ok(OddsOutcome {
            decision: true,
            lhs_ratio: f64::INFINITY,
            rhs_threshold: 0.0,
            direct_posterior_ratio: direct,
        });
    }
    let lhs = l_in / l_out;
    let rhs = p_out / p_in;
    Ok(OddsOutcome {
        decision: lhs > rhs,
        lhs_ratio: lhs,
        rhs_threshold: rhs,
        direct_posterior_ratio: direct,
    })
}

/// `Pr(M = 1 | e) / Pr(M = 0 | e)` by summing the joint over every dataset.
pub fn direct_posterior_ratio(u: &DiscreteOddsUniverse, query: u64, e: usize) -> f64 {
    let (mut inside, mut outside) = (0.0, 0.0);
    for ((d, p), row) in u.datasets.iter().zip(&u.prior).zip(&u.channel) {
        if d.contains(&query) {
            inside += p * row[e];
        } else {
            outside += p * row[e];
        }
    }
    inside / outside
}

/// Prior odds `Pr(M = 1) / Pr(M = 0)` for `query`.
pub fn prior_odds(u: &DiscreteOddsUniverse, query: u64) -> f64 {
    let (mut inside, mut outside) = (0.0, 0.0);
    for (d, p) in u.datasets.iter().zip(&u.prior) {
        if d.contains(&query) {
            inside += p;
        } else {
            outside += p;
        }
    }
    inside / outside
}

/// Universes as written in JSON oracle inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UniverseSpec {
    Joint {
        prior_in: Vec<f64>,
        loglik: Vec<f64>,
    },
    RandomJoint {
        n: usize,
        #[serde(default = "default_loglik_scale")]
        loglik_scale: f64,
        seed: u64,
    },
    Odds {
        datasets: Vec<BTreeSet<u64>>,
        prior: Vec<f64>,
        channel: Vec<Vec<f64>>,
    },
    RandomOdds {
        n_datasets: usize,
        alphabet: usize,
        n_ids: u64,
        seed: u64,
    },
}

fn default_loglik_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq)]
pub enum Universe {
    Joint(JointUniverse),
    Odds(DiscreteOddsUniverse),
}

impl UniverseSpec {
    pub fn build(&self) -> Result<Universe> {
        Ok(match self {
            UniverseSpec::Joint { prior_in, loglik } => Universe::Joint(JointUniverse::new(prior_in.clone(), loglik.clone())?),
            UniverseSpec::RandomJoint { n, loglik_scale, seed } => {
                Universe::Joint(JointUniverse::random(*n, *loglik_scale, *seed)?)
            }
            UniverseSpec::Odds {
                datasets,
                prior,
                channel,
            } => Universe::Odds(DiscreteOddsUniverse::new(datasets.clone(), prior.clone(), channel.clone())?),
            UniverseSpec::RandomOdds {
                n_datasets,
                alphabet,
                n_ids,
                seed,
            } => Universe::Odds(DiscreteOddsUniverse::random(*n_datasets, *alphabet, *n_ids, *seed)?),
        })
    }
}

pub fn load_universe(path: impl AsRef<Path>) -> Result<Universe> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: UniverseSpec = serde_json::from_str(&text)?;
    spec.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loglik_gives_product_of_priors() {
        let u = JointUniverse::new(vec![0.2, 0.7, 0.4], vec![-1.5; 8]).unwrap();
        let post = enum_posterior(&u).unwrap();
        let mut worst: f64 = 0.0;
        for m in 0..8u32 {
            let prod: f64 = (0..3)
                .map(|i| if m >> i & 1 == 1 { u.prior_in[i] } else { 1.0 - u.prior_in[i] })
                .product();
            worst = worst.max((post.probs[m as usize] - prod).abs());
        }
        assert!(worst < 1e-12);
        for i in 0..3 {
            assert!((post.marginals[i] - u.prior_in[i]).abs() < 1e-12);
        }
        assert!(post.mutual_info.iter().flatten().all(|&v| v < 1e-12));
    }

    #[test]
    fn exactly_one_member_collider() {
        let big = -1e6;
        // index bits: (M1, M2) = (bit0, bit1)
        let u = JointUniverse::new(vec![0.5, 0.5], vec![big, 0.0, 0.0, big]).unwrap();
        let post = enum_posterior(&u).unwrap();
        assert!((post.probs[1] - 0.5).abs() < 1e-12);
        assert!((post.probs[2] - 0.5).abs() < 1e-12);
        assert!(post.conditional_in(0, 1) < 1e-12);
        assert!((post.marginals[0] - 0.5).abs() < 1e-12);
        assert!(post.mutual_info[0][1] > 0.69);
    }

    #[test]
    fn posterior_sums_to_one() {
        for seed in 0..20 {
            let u = JointUniverse::random(1 + (seed as usize % 10), 2.0, seed).unwrap();
            let s: f64 = enum_posterior(&u).unwrap().probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_universe_rejected() {
        assert!(JointUniverse::random(21, 1.0, 0).is_err());
        assert!(JointUniverse::new(vec![0.5], vec![0.0; 3]).is_err());
        assert!(JointUniverse::new(vec![1.0], vec![0.0; 2]).is_err());
    }

    #[test]
    fn equal_loglik_returns_prior_exactly() {
        let u = JointUniverse::new(vec![0.3], vec![0.25, 0.25]).unwrap();
        assert_eq!(gibbs_conditional(&u, 0, 0), 0.3);
    }

    #[test]
    fn single_site_gibbs_matches_posterior() {
        let u = JointUniverse::new(vec![0.3], vec![0.0, 0.8]).unwrap();
        let exact = enum_posterior(&u).unwrap().marginals[0];
        let run = gibbs_sample(
            &u,
            &GibbsConfig {
                scan: Scan::Systematic,
                sweeps: 100_000,
                burn_in: 10,
                seed: 1,
            },
        )
        .unwrap();
        let est = run.empirical()[1];
        let se = (exact * (1.0 - exact) / run.trace.len() as f64).sqrt();
        assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact}");
    }

    #[test]
    fn gibbs_tv_small_for_both_scans() {
        let u = JointUniverse::random(6, 1.0, 9).unwrap();
        let exact = enum_posterior(&u).unwrap();
        for scan in [Scan::Systematic, Scan::Random] {
            let run = gibbs_sample(&u, &GibbsConfig { scan, sweeps: 200_000, burn_in: 1000, seed: 4 }).unwrap();
            let tv = total_variation(&run.empirical(), &exact.probs);
            assert!(tv < 0.02, "{scan:?}: {tv}");
        }
    }

    #[test]
    fn ergodic_average_converges() {
        let u = JointUniverse::random(5, 1.0, 3).unwrap();
        let exact = enum_posterior(&u).unwrap();
        let stat = |m: u32| (m.count_ones() as f64) / 5.0;
        let truth = exact.expect(stat);
        let run = gibbs_sample(&u, &GibbsConfig { scan: Scan::Systematic, sweeps: 200_000, burn_in: 100, seed: 8 }).unwrap();
        let est = run.time_average(run.trace.len(), stat);
        // the chain is correlated, so allow a generous multiple of the i.i.d. error
        let var = exact.expect(|m| (stat(m) - truth).powi(2));
        let se = (var / run.trace.len() as f64).sqrt();
        assert!((est - truth).abs() < 10.0 * se, "{est} vs {truth}");
    }

    #[test]
    fn detailed_balance_and_negative_control() {
        let u = JointUniverse::random(3, 1.5, 12).unwrap();
        assert!(detailed_balance_check(&u).unwrap() < 1e-12);
        assert!(detailed_balance_with(&u, swapped_kernel).unwrap() > 1e-6);
    }

    #[test]
    fn symmetric_odds_boundary_is_non_member() {
        let u = DiscreteOddsUniverse::new(
            vec![[1].into(), BTreeSet::new()],
            vec![0.5, 0.5],
            vec![vec![0.3, 0.7], vec![0.3, 0.7]],
        )
        .unwrap();
        let out = odds_test(&u, 1, 0, OddsWeighting::Prior).unwrap();
        assert_eq!(out.lhs_ratio, 1.0);
        assert_eq!(out.rhs_threshold, 1.0);
        assert!(!out.decision);
    }

    #[test]
    fn never_member_forces_zero() {
        let u = DiscreteOddsUniverse::new(vec![[2].into(), [3].into()], vec![0.4, 0.6], vec![vec![1.0], vec![1.0]]).unwrap();
        let out = odds_test(&u, 1, 0, OddsWeighting::Prior).unwrap();
        assert!(!out.decision);
        assert_eq!(out.rhs_threshold, f64::INFINITY);
    }

    #[test]
    fn odds_decision_is_bayes_optimal() {
        for seed in 0..20 {
            let u = DiscreteOddsUniverse::random(8, 6, 5, seed).unwrap();
            for e in 0..6 {
                let out = odds_test(&u, 0, e, OddsWeighting::Prior).unwrap();
                assert_eq!(out.decision, out.direct_posterior_ratio > 1.0);
                let lifted = out.lhs_ratio * prior_odds(&u, 0);
                assert!((lifted / out.direct_posterior_ratio - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rational_universe_identity_is_exact() {
        // dyadic probabilities keep every sum and product exact
        let u = DiscreteOddsUniverse::new(
            vec![[0].into(), [0, 1].into(), [1].into(), BTreeSet::new()],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![vec![0.5, 0.5], vec![0.75, 0.25], vec![0.25, 0.75], vec![0.5, 0.5]],
        )
        .unwrap();
        for e in 0..2 {
            let out = odds_test(&u, 0, e, OddsWeighting::Prior).unwrap();
            assert_eq!(out.lhs_ratio * prior_odds(&u, 0), out.direct_posterior_ratio);
        }
    }

    #[test]
    fn uniform_weighting_differs_under_skewed_prior() {
        let u = DiscreteOddsUniverse::new(
            vec![[0].into(), [0].into(), BTreeSet::new()],
            vec![0.7, 0.1, 0.2],
            vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.5, 0.5]],
        )
        .unwrap();
        let p = odds_test(&u, 0, 0, OddsWeighting::Prior).unwrap();
        let q = odds_test(&u, 0, 0, OddsWeighting::Uniform).unwrap();
        assert!((p.lhs_ratio - q.lhs_ratio).abs() > 0.1);
    }

    #[test]
    fn invalid_odds_universes() {
        assert!(DiscreteOddsUniverse::new(vec![BTreeSet::new()], vec![0.9], vec![vec![1.0]]).is_err());
        assert!(DiscreteOddsUniverse::new(vec![BTreeSet::new()], vec![1.0], vec![vec![0.5, 0.4]]).is_err());
    }

    #[test]
    fn universes_load_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.json");
        std::fs::write(&path, r#"{"kind": "joint", "prior_in": [0.5], "loglik": [0.0, 1.0]}"#).unwrap();
        assert!(matches!(load_universe(&path).unwrap(), Universe::Joint(_)));
        std::fs::write(&path, r#"{"kind": "random_odds", "n_datasets": 4, "alphabet": 3, "n_ids": 5, "seed": 1}"#).unwrap();
        assert!(matches!(load_universe(&path).unwrap(), Universe::Odds(_)));
        std::fs::write(&path, r#"{"kind": "random_joint", "n": 4, "seed": 1}"#).unwrap();
        assert!(matches!(load_universe(&path).unwrap(), Universe::Joint(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn detailed_balance_holds(n in 1usize..7, seed in any::<u64>()) {
                let u = JointUniverse::random(n, 2.0, seed).unwrap();
                prop_assert!(detailed_balance_check(&u).unwrap() < 1e-12);
            }

            #[test]
            fn odds_identity(seed in any::<u64>(), s in 2usize..64, a in 1usize..16) {
                let u = DiscreteOddsUniverse::random(s, a, 6, seed).unwrap();
                for e in 0..a {
                    let out = odds_test(&u, 0, e, OddsWeighting::Prior).unwrap();
                    let lifted = out.lhs_ratio * prior_odds(&u, 0);
                    prop_assert!((lifted / out.direct_posterior_ratio - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
