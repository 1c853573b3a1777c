//! EM training of the beacon-conditioned cluster model.
//!
//! E-step: `p(c|u) = Σ_b p(c) p(b|c) / p̂(b) · p(b|u)`, with `p̂(b)` the
//! empirical beacon marginal of the corpus. Hard mode keeps only the argmax.
//!
//! M-step: `p(c) = Σ_u p(u) p(c|u)` and
//! `p(b|c) = Σ_u p(b|u) p(c|u) p(u) / p(c)`.
//!
//! The E-step is data-parallel over contiguous user shards. The M-step is
//! reduced one beacon column at a time in ascending user order, so results
//! do not depend on the shard count or the number of threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::model::ClusterModel;
use crate::trace::Trace;
use crate::util::{argmax, shard_range};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Hard,
    Soft,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Mode::Hard),
            "soft" => Ok(Mode::Soft),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}, expected hard or soft"
            ))),
        }
    }
}

/// What to do with a cluster that ends an E-step with no users.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyClusterPolicy {
    /// Leave it empty: uniform `p(b|c)` row, zero prior, reported as flagged.
    Flag,
    /// Hard mode only: bisect the heaviest cluster and move one half into the
    /// empty slot. Falls back to `Flag` once the repair budget is spent.
    Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub mode: Mode,
    pub max_iters: usize,
    /// Stop once no `p(c)` or `p(b|c)` entry moves by this much or more.
    pub tol: f64,
    pub seed: u64,
    pub shards: usize,
    /// Additive smoothing on `p(b|c)` rows; 0 disables it.
    pub smoothing: f64,
    pub empty_clusters: EmptyClusterPolicy,
    /// Total number of split repairs allowed; `None` means `4 · k`.
    pub max_repairs: Option<usize>,
}

pub const DEFAULT_SHARDS: usize = 64;

impl TrainConfig {
    pub fn new(k: usize, mode: Mode, seed: u64) -> Self {
        TrainConfig {
            k,
            mode,
            max_iters: 100,
            tol: 1e-6,
            seed,
            shards: DEFAULT_SHARDS,
            smoothing: 0.0,
            empty_clusters: EmptyClusterPolicy::Split,
            max_repairs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if self.shards < 1 {
            return Err(Error::Config("shards must be at least 1".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config(
                "smoothing must be a non-negative number".into(),
            ));
        }
        Ok(())
    }

    fn repair_budget(&self) -> usize {
        self.max_repairs.unwrap_or(4 * self.k)
    }
}

/// `p(c | u)` for every training user.
#[derive(Clone, Debug, PartialEq)]
pub enum Responsibilities {
    /// One-hot rows stored as the chosen cluster.
    Hard { k: usize, clusters: Vec<usize> },
    /// Dense row-major `n_users × k`.
    Soft { k: usize, values: Vec<f64> },
}

impl Responsibilities {
    pub fn k(&self) -> usize {
        match self {
            Responsibilities::Hard { k, .. } | Responsibilities::Soft { k, .. } => *k,
        }
    }

    pub fn n_users(&self) -> usize {
        match self {
            Responsibilities::Hard { clusters, .. } => clusters.len(),
            Responsibilities::Soft { k, values } => values.len() / k,
        }
    }

    /// Dense row for user `j`.
    pub fn row(&self, j: usize) -> Vec<f64> {
        match self {
            Responsibilities::Hard { k, clusters } => {
                let mut r = vec![0.0; *k];
                r[clusters[j]] = 1.0;
                r
            }
            Responsibilities::Soft { k, values } => values[j * k..(j + 1) * k].to_vec(),
        }
    }

    /// Most likely cluster of every user.
    pub fn labels(&self) -> Vec<usize> {
        match self {
            Responsibilities::Hard { clusters, .. } => clusters.clone(),
            Responsibilities::Soft { k, values } => values.chunks(*k).map(argmax).collect(),
        }
    }
}

/// Cluster priors and per-cluster beacon distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub priors: Vec<f64>,
    /// `k` rows over the corpus vocabulary.
    pub beacon_given_cluster: Vec<Vec<f64>>,
    /// Clusters that received no mass and were given a uniform row.
    pub empty: Vec<usize>,
}

impl Parameters {
    /// Largest absolute change over every prior and every `p(b|c)` entry.
    pub fn max_abs_change(&self, other: &Parameters) -> f64 {
        let priors = self
            .priors
            .iter()
            .zip(&other.priors)
            .map(|(a, b)| (a - b).abs());
        let rows = self
            .beacon_given_cluster
            .iter()
            .zip(&other.beacon_given_cluster)
            .flat_map(|(r, s)| r.iter().zip(s).map(|(a, b)| (a - b).abs()));
        priors.chain(rows).fold(0.0, f64::max)
    }

    fn all_finite(&self) -> bool {
        self.priors.iter().all(|p| p.is_finite())
            && self
                .beacon_given_cluster
                .iter()
                .all(|r| r.iter().all(|p| p.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Parameters,
    pub responsibilities: Responsibilities,
    pub iteration: usize,
    pub trace: Trace,
}

/// Output of one E-step.
#[derive(Clone, Debug)]
pub struct Expectation {
    pub responsibilities: Responsibilities,
    /// `Σ_u Σ_{c: q(c|u) > 0} ln q(c|u)` over the normalised posteriors `q`
    /// before any hardening.
    pub log_objective: f64,
}

/// Random hard assignment followed by one M-step.
///
/// Each user draws a cluster uniformly. Clusters left empty are then filled,
/// in ascending order, by moving a uniformly drawn user out of a cluster that
/// still has at least two members.
pub fn init_random(corpus: &Corpus, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let n = corpus.n_users();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if config.k > n {
        return Err(Error::InitInfeasible {
            k: config.k,
            users: n,
        });
    }
    let clusters = random_assignment(n, config.k, config.seed);
    let responsibilities = Responsibilities::Hard {
        k: config.k,
        clusters,
    };
    let index = BeaconIndex::new(corpus);
    let params = maximize(&responsibilities, corpus, &index, config.smoothing);
    Ok(TrainState {
        params,
        responsibilities,
        iteration: 0,
        trace: Trace::new("log_objective"),
    })
}

pub(crate) fn random_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut sizes = vec![0usize; k];
    for &c in &clusters {
        sizes[c] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        loop {
            let j = rng.random_range(0..n);
            if sizes[clusters[j]] >= 2 {
                sizes[clusters[j]] -= 1;
                clusters[j] = c;
                sizes[c] = 1;
                break;
            }
        }
    }
    clusters
}

/// E-step under the given parameters.
pub fn expectation_step(
    params: &Parameters,
    corpus: &Corpus,
    mode: Mode,
    shards: usize,
) -> Result<Expectation> {
    let k = params.priors.len();
    let v = corpus.n_beacons();
    let p_hat = corpus.beacon_marginals();
    // weights[b * k + i] = p(c_i) p(b | c_i) / p̂(b)
    let mut weights = vec![0.0; v * k];
    for b in 0..v {
        if p_hat[b] > 0.0 {
            for i in 0..k {
                weights[b * k + i] =
                    params.priors[i] * params.beacon_given_cluster[i][b] / p_hat[b];
            }
        }
    }

    let n = corpus.n_users();
    let shards = shards.min(n.max(1));
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let range = shard_range(n, shards, s);
            let mut posts = Vec::with_capacity(range.len() * k);
            let mut objectives = Vec::with_capacity(range.len());
            for j in range {
                let mut scores = vec![0.0; k];
                for (b, p_b_u) in corpus.beacon_given_user(j) {
                    if p_hat[b] <= 0.0 {
                        return Err(Error::Invariant(format!(
                            "beacon {} has zero empirical marginal",
                            corpus.vocabulary()[b]
                        )));
                    }
                    let w = &weights[b * k..(b + 1) * k];
                    for (s, &wi) in scores.iter_mut().zip(w) {
                        *s += wi * p_b_u;
                    }
                }
                let mass: f64 = scores.iter().sum();
                if !(mass.is_finite() && mass > 0.0) {
                    return Err(Error::NumericalFailure {
                        iteration: 0,
                        what: format!("posterior mass {mass} for user {}", corpus.users()[j]),
                    });
                }
                let mut obj = 0.0;
                for s in &mut scores {
                    *s /= mass;
                    if *s > 0.0 {
                        obj += s.ln();
                    }
                }
                objectives.push(obj);
                posts.extend_from_slice(&scores);
            }
            Ok((posts, objectives))
        })
        .collect();

    let mut values = Vec::with_capacity(n * k);
    let mut objectives = Vec::with_capacity(n);
    for part in parts {
        let (p, o) = part?;
        values.extend(p);
        objectives.extend(o);
    }
    let log_objective = objectives.iter().sum();
    let responsibilities = match mode {
        Mode::Soft => Responsibilities::Soft { k, values },
        Mode::Hard => Responsibilities::Hard {
            k,
            clusters: values.chunks(k).map(argmax).collect(),
        },
    };
    Ok(Expectation {
        responsibilities,
        log_objective,
    })
}

/// M-step: new `p(c)` and `p(b|c)` from the responsibilities.
///
/// Clusters with zero prior get a uniform `p(b|c)` row and are listed in
/// [`Parameters::empty`].
pub fn maximization_step(
    responsibilities: &Responsibilities,
    corpus: &Corpus,
    smoothing: f64,
) -> Parameters {
    maximize(
        responsibilities,
        corpus,
        &BeaconIndex::new(corpus),
        smoothing,
    )
}

/// Beacon-major view of the corpus: for every beacon, the users that fired it
/// in ascending order with `p(b|u) · p(u)`.
struct BeaconIndex {
    columns: Vec<Vec<(usize, f64)>>,
}

impl BeaconIndex {
    fn new(corpus: &Corpus) -> Self {
        let mut columns = vec![Vec::new(); corpus.n_beacons()];
        let p_u = corpus.user_marginals();
        for (j, &p) in p_u.iter().enumerate() {
            for (b, p_b_u) in corpus.beacon_given_user(j) {
                columns[b].push((j, p_b_u * p));
            }
        }
        BeaconIndex { columns }
    }
}

fn maximize(
    responsibilities: &Responsibilities,
    corpus: &Corpus,
    index: &BeaconIndex,
    smoothing: f64,
) -> Parameters {
    let k = responsibilities.k();
    let v = corpus.n_beacons();
    let p_u = corpus.user_marginals();

    let mut priors = vec![0.0; k];
    match responsibilities {
        Responsibilities::Hard { clusters, .. } => {
            for (j, &c) in clusters.iter().enumerate() {
                priors[c] += p_u[j];
            }
        }
        Responsibilities::Soft { values, .. } => {
            for (j, row) in values.chunks(k).enumerate() {
                for (p, &r) in priors.iter_mut().zip(row) {
                    *p += p_u[j] * r;
                }
            }
        }
    }

    // numerators[b][i] = Σ_u p(b|u) p(c_i|u) p(u), users in ascending order
    let numerators: Vec<Vec<f64>> = index
        .columns
        .par_iter()
        .map(|col| {
            let mut acc = vec![0.0; k];
            match responsibilities {
                Responsibilities::Hard { clusters, .. } => {
                    for &(j, w) in col {
                        acc[clusters[j]] += w;
                    }
                }
                Responsibilities::Soft { values, .. } => {
                    for &(j, w) in col {
                        let row = &values[j * k..(j + 1) * k];
                        for (a, &r) in acc.iter_mut().zip(row) {
                            *a += r * w;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut empty = Vec::new();
    let beacon_given_cluster = (0..k)
        .map(|i| {
            if priors[i] <= 0.0 {
                empty.push(i);
                return vec![1.0 / v as f64; v];
            }
            let mut row: Vec<f64> = (0..v).map(|b| numerators[b][i] / priors[i]).collect();
            if smoothing > 0.0 {
                let denom = 1.0 + v as f64 * smoothing;
                for p in &mut row {
                    *p = (*p + smoothing) / denom;
                }
            }
            row
        })
        .collect();
    Parameters {
        priors,
        beacon_given_cluster,
        empty,
    }
}

/// Final training result.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: ClusterModel,
    pub trace: Trace,
    pub responsibilities: Responsibilities,
    /// Clusters with zero prior in the final model.
    pub flagged: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub repairs: usize,
}

/// Alternates E- and M-steps until every parameter moves by less than
/// `config.tol` or `config.max_iters` iterations have run.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutput> {
    let TrainState {
        mut params,
        mut responsibilities,
        mut trace,
        ..
    } = init_random(corpus, config)?;
    let index = BeaconIndex::new(corpus);
    let mut converged = false;
    let mut iterations = 0;
    let mut repairs = 0;
    let budget = config.repair_budget();

    for iteration in 1..=config.max_iters {
        iterations = iteration;
        let mut e = expectation_step(&params, corpus, config.mode, config.shards).map_err(
            |err| match err {
                Error::NumericalFailure { what, .. } => Error::NumericalFailure { iteration, what },
                other => other,
            },
        )?;
        if config.mode == Mode::Hard && config.empty_clusters == EmptyClusterPolicy::Split {
            if let Responsibilities::Hard { clusters, .. } = &mut e.responsibilities {
                repairs +=
                    repair_empty_clusters(clusters, config.k, corpus, config, budget - repairs);
            }
        }
        let next = maximize(&e.responsibilities, corpus, &index, config.smoothing);
        if !next.all_finite() {
            return Err(Error::NumericalFailure {
                iteration,
                what: "non-finite parameter after M-step".into(),
            });
        }
        let delta = next.max_abs_change(&params);
        if !e.log_objective.is_finite() {
            return Err(Error::NumericalFailure {
                iteration,
                what: format!("log objective {}", e.log_objective),
            });
        }
        trace.push(iteration, e.log_objective, delta);
        params = next;
        responsibilities = e.responsibilities;
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    let model = ClusterModel::from_parameters(
        corpus.vocabulary().to_vec(),
        params.priors,
        params.beacon_given_cluster,
    )?;
    Ok(TrainOutput {
        model,
        trace,
        responsibilities,
        flagged: params.empty,
        iterations,
        converged,
        repairs,
    })
}

/// Fills empty clusters by bisecting the heaviest cluster. Returns the number
/// of repair attempts made, at most `budget`.
fn repair_empty_clusters(
    clusters: &mut [usize],
    k: usize,
    corpus: &Corpus,
    config: &TrainConfig,
    budget: usize,
) -> usize {
    let p_u = corpus.user_marginals();
    let mut attempts = 0;
    let mut sizes = vec![0usize; k];
    for &c in clusters.iter() {
        sizes[c] += 1;
    }
    for target in 0..k {
        if sizes[target] > 0 {
            continue;
        }
        if attempts == budget {
            break;
        }
        let mut mass = vec![0.0; k];
        for (j, &c) in clusters.iter().enumerate() {
            mass[c] += p_u[j];
        }
        let Some(donor) = (0..k)
            .filter(|&c| sizes[c] >= 2)
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if mass[b] >= mass[c] => Some(b),
                _ => Some(c),
            })
        else {
            break;
        };
        attempts += 1;
        let members: Vec<usize> = (0..clusters.len())
            .filter(|&j| clusters[j] == donor)
            .collect();
        let Some(side) = bisect(corpus, &members, config) else {
            // the heaviest cluster cannot be split; neither can anything else this round
            break;
        };
        for (&j, &moved) in members.iter().zip(&side) {
            if moved {
                clusters[j] = target;
                sizes[donor] -= 1;
                sizes[target] += 1;
            }
        }
    }
    attempts
}

/// Two-way split of a group of users with the same E/M updates, seeded by the
/// least typical member and the member most unlike it. Returns `None` when
/// the group does not separate.
fn bisect(corpus: &Corpus, members: &[usize], config: &TrainConfig) -> Option<Vec<bool>> {
    let v = corpus.n_beacons();
    let dense = |j: usize| {
        let mut x = vec![0.0; v];
        for (b, p) in corpus.beacon_given_user(j) {
            x[b] = p;
        }
        x
    };
    let dot = |j: usize, other: &[f64]| -> f64 {
        corpus.beacon_given_user(j).map(|(b, p)| p * other[b]).sum()
    };
    let mut centroid = vec![0.0; v];
    for &j in members {
        for (b, p) in corpus.beacon_given_user(j) {
            centroid[b] += p;
        }
    }
    let argmin = |f: &dyn Fn(usize) -> f64| {
        members
            .iter()
            .copied()
            .map(|j| (j, f(j)))
            .fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                Some((_, bs)) if bs <= s => best,
                _ => Some((j, s)),
            })
            .map(|(j, _)| j)
            .expect("members is non-empty")
    };
    let seed_a = argmin(&|j| dot(j, &centroid));
    let a = dense(seed_a);
    let seed_b = argmin(&|j| dot(j, &a));
    if seed_a == seed_b {
        return None;
    }
    let b = dense(seed_b);
    let mut labels: Vec<usize> = members
        .iter()
        .map(|&j| usize::from(dot(j, &b) > dot(j, &a)))
        .collect();

    let sub = corpus.subset(members);
    let index = BeaconIndex::new(&sub);
    for _ in 0..20 {
        if !labels.contains(&0) || !labels.contains(&1) {
            return None;
        }
        let resp = Responsibilities::Hard {
            k: 2,
            clusters: labels.clone(),
        };
        let params = maximize(&resp, &sub, &index, config.smoothing);
        let next = match expectation_step(&params, &sub, Mode::Hard, config.shards).ok()? {
            Expectation {
                responsibilities: Responsibilities::Hard { clusters, .. },
                ..
            } => clusters,
            _ => unreachable!("hard mode"),
        };
        if next == labels {
            break;
        }
        labels = next;
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return None;
    }
    Some(labels.into_iter().map(|l| l == 1).collect())
}
