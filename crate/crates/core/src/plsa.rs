//! Classic pLSA with users as documents and beacons as words, kept as a
//! comparison clusterer.
//!
//! Unlike [`ClusterModel`](crate::model::ClusterModel), the fitted model holds
//! `p(c | d)` for every training user and has no way to place a user it was
//! not trained on.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::model::{check_distribution, BeaconId, UserHistory};
use crate::trace::Trace;
use crate::util::{argmax, shard_range};

#[derive(Clone, Debug, PartialEq)]
pub struct PlsaModel {
    users: Vec<String>,
    vocabulary: Vec<BeaconId>,
    /// `k` rows of `p(w | c)` over the vocabulary.
    pub word_given_cluster: Vec<Vec<f64>>,
    /// One `p(c | d)` row per training user.
    pub cluster_given_doc: Vec<Vec<f64>>,
}

impl PlsaModel {
    /// `users` must be sorted, as they are in a [`Corpus`].
    pub fn new(
        users: Vec<String>,
        vocabulary: Vec<BeaconId>,
        word_given_cluster: Vec<Vec<f64>>,
        cluster_given_doc: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !users.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invariant("users must be sorted and unique".into()));
        }
        let model = PlsaModel {
            users,
            vocabulary,
            word_given_cluster,
            cluster_given_doc,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.word_given_cluster.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn vocabulary(&self) -> &[BeaconId] {
        &self.vocabulary
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_given_doc.len() != self.users.len() {
            return Err(Error::Invariant("one p(c|d) row per user required".into()));
        }
        for (i, row) in self.word_given_cluster.iter().enumerate() {
            if row.len() != self.vocabulary.len() {
                return Err(Error::Invariant(format!("p(w|c) row {i} has wrong length")));
            }
            check_distribution(row, &format!("p(w|c) row {i}"))?;
        }
        for (u, row) in self.users.iter().zip(&self.cluster_given_doc) {
            if row.len() != self.k() {
                return Err(Error::Invariant(format!(
                    "p(c|d) row for {u} has wrong length"
                )));
            }
            check_distribution(row, &format!("p(c|d) row for {u}"))?;
        }
        Ok(())
    }

    /// Stored `p(c | d)` of a training user. Any other user is refused: the
    /// model would have to be refitted to place them.
    pub fn score_user(&self, history: &UserHistory) -> Result<&[f64]> {
        self.users
            .binary_search_by(|u| u.as_str().cmp(history.user()))
            .map(|j| self.cluster_given_doc[j].as_slice())
            .map_err(|_| Error::UnseenUser(history.user().to_string()))
    }

    /// Most likely cluster of a training user.
    pub fn assign(&self, history: &UserHistory) -> Result<usize> {
        self.score_user(history).map(argmax)
    }

    /// Most likely cluster of every training user.
    pub fn labels(&self) -> Vec<usize> {
        self.cluster_given_doc.iter().map(|r| argmax(r)).collect()
    }

    pub fn to_json(&self) -> String {
        let file = PlsaFile {
            format: PLSA_FORMAT.into(),
            k: self.k(),
            vocabulary: self.vocabulary.iter().map(|b| b.to_string()).collect(),
            word_given_cluster: self
                .word_given_cluster
                .iter()
                .map(|row| {
                    self.vocabulary
                        .iter()
                        .zip(row)
                        .filter(|(_, &p)| p != 0.0)
                        .map(|(b, &p)| (b.to_string(), p))
                        .collect()
                })
                .collect(),
            cluster_given_doc: self
                .users
                .iter()
                .cloned()
                .zip(self.cluster_given_doc.iter().cloned())
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serialises");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PlsaFile =
            serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        if file.format != PLSA_FORMAT || file.k != file.word_given_cluster.len() {
            return Err(Error::MalformedModel("not a pLSA model file".into()));
        }
        let vocabulary = file
            .vocabulary
            .into_iter()
            .map(BeaconId::new)
            .collect::<Result<Vec<_>>>()?;
        let index: HashMap<&str, usize> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, b)| (b.as_str(), i))
            .collect();
        let mut word_given_cluster = vec![vec![0.0; vocabulary.len()]; file.k];
        for (row, entries) in word_given_cluster.iter_mut().zip(&file.word_given_cluster) {
            for (b, &p) in entries {
                let i = *index.get(b.as_str()).ok_or_else(|| {
                    Error::MalformedModel(format!("beacon {b:?} not in vocabulary"))
                })?;
                row[i] = p;
            }
        }
        let (users, cluster_given_doc) = file.cluster_given_doc.into_iter().unzip();
        let model = PlsaModel {
            users,
            vocabulary,
            word_given_cluster,
            cluster_given_doc,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const PLSA_FORMAT: &str = "beaconclust-plsa/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlsaFile {
    format: String,
    k: usize,
    vocabulary: Vec<String>,
    word_given_cluster: Vec<BTreeMap<String, f64>>,
    cluster_given_doc: BTreeMap<String, Vec<f64>>,
}

/// `p(c | d, w)` for every observed `(d, w)` pair, laid out in corpus row
/// order with `k` values per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPosteriors {
    pub k: usize,
    offsets: Vec<usize>,
    pub values: Vec<f64>,
}

impl PairPosteriors {
    /// Posterior of the `e`-th observed beacon of user `j`.
    pub fn get(&self, j: usize, e: usize) -> &[f64] {
        let at = (self.offsets[j] + e) * self.k;
        &self.values[at..at + self.k]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlsaConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub shards: usize,
}

impl PlsaConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        PlsaConfig {
            k,
            max_iters: 100,
            tol: 1e-6,
            seed,
            shards: crate::train::DEFAULT_SHARDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1
            || self.max_iters < 1
            || self.shards < 1
            || !(self.tol.is_finite() && self.tol > 0.0)
        {
            return Err(Error::Config(
                "k, max_iters and shards must be at least 1 and tol positive".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded random positive tables, each row normalised.
pub fn plsa_init(corpus: &Corpus, k: usize, seed: u64) -> PlsaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |len: usize| {
        let mut r: Vec<f64> = (0..len).map(|_| 0.5 + rng.random::<f64>()).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|p| *p /= s);
        r
    };
    let word_given_cluster = (0..k).map(|_| row(corpus.n_beacons())).collect();
    let cluster_given_doc = (0..corpus.n_users()).map(|_| row(k)).collect();
    PlsaModel {
        users: corpus.users().to_vec(),
        vocabulary: corpus.vocabulary().to_vec(),
        word_given_cluster,
        cluster_given_doc,
    }
}

/// `p(c|d,w) = p(w|c) p(c|d) / Σ_m p(w|c_m) p(c_m|d)`.
pub fn plsa_e_step(model: &PlsaModel, corpus: &Corpus, shards: usize) -> Result<PairPosteriors> {
    let k = model.k();
    let n = corpus.n_users();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for j in 0..n {
        offsets.push(offsets[j] + corpus.row(j).len());
    }
    let shards = shards.clamp(1, n.max(1));
    let parts: Vec<Result<Vec<f64>>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let range = shard_range(n, shards, s);
            let mut out = Vec::with_capacity((offsets[range.end] - offsets[range.start]) * k);
            for j in range {
                let theta = &model.cluster_given_doc[j];
                for &(w, _) in corpus.row(j) {
                    let start = out.len();
                    let mut denom = 0.0;
                    for (row, &t) in model.word_given_cluster.iter().zip(theta) {
                        let q = row[w] * t;
                        denom += q;
                        out.push(q);
                    }
                    if !(denom > 0.0 && denom.is_finite()) {
                        return Err(Error::NumericalFailure {
                            iteration: 0,
                            what: format!(
                                "zero pLSA posterior mass for ({}, {})",
                                corpus.users()[j],
                                corpus.vocabulary()[w]
                            ),
                        });
                    }
                    out[start..].iter_mut().for_each(|q| *q /= denom);
                }
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(offsets[n] * k);
    for p in parts {
        values.extend(p?);
    }
    Ok(PairPosteriors { k, offsets, values })
}

/// `p(w|c) ∝ Σ_d n(d,w) p(c|d,w)` and `p(c|d) = Σ_w n(d,w) p(c|d,w) / n(d)`.
pub fn plsa_m_step(posteriors: &PairPosteriors, corpus: &Corpus) -> PlsaModel {
    let k = posteriors.k;
    let n = corpus.n_users();
    let v = corpus.n_beacons();

    let cluster_given_doc: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut row = vec![0.0; k];
            for (e, &(_, count)) in corpus.row(j).iter().enumerate() {
                for (r, &q) in row.iter_mut().zip(posteriors.get(j, e)) {
                    *r += count as f64 * q;
                }
            }
            let total = corpus.total(j) as f64;
            row.iter_mut().for_each(|r| *r /= total);
            row
        })
        .collect();

    // (user, entry position) per beacon, ascending user
    let mut columns: Vec<Vec<(usize, usize, u64)>> = vec![Vec::new(); v];
    for j in 0..n {
        for (e, &(w, count)) in corpus.row(j).iter().enumerate() {
            columns[w].push((j, e, count));
        }
    }
    let sums: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|col| {
            let mut acc = vec![0.0; k];
            for &(j, e, count) in col {
                for (a, &q) in acc.iter_mut().zip(posteriors.get(j, e)) {
                    *a += count as f64 * q;
                }
            }
            acc
        })
        .collect();
    let word_given_cluster = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..v).map(|w| sums[w][i]).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row.iter_mut().for_each(|p| *p = 1.0 / v as f64);
            }
            row
        })
        .collect();

    PlsaModel {
        users: corpus.users().to_vec(),
        vocabulary: corpus.vocabulary().to_vec(),
        word_given_cluster,
        cluster_given_doc,
    }
}

/// `Σ_{d,w} n(d,w) ln Σ_c p(w|c) p(c|d)`.
pub fn log_likelihood(model: &PlsaModel, corpus: &Corpus) -> f64 {
    let per_user: Vec<f64> = (0..corpus.n_users())
        .into_par_iter()
        .map(|j| {
            let theta = &model.cluster_given_doc[j];
            corpus
                .row(j)
                .iter()
                .map(|&(w, count)| {
                    let p: f64 = (0..model.k())
                        .map(|i| model.word_given_cluster[i][w] * theta[i])
                        .sum();
                    count as f64 * p.ln()
                })
                .sum()
        })
        .collect();
    per_user.iter().sum()
}

fn max_abs_change(a: &PlsaModel, b: &PlsaModel) -> f64 {
    a.word_given_cluster
        .iter()
        .chain(&a.cluster_given_doc)
        .zip(b.word_given_cluster.iter().chain(&b.cluster_given_doc))
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// EM from a seeded random start. The trace holds the log-likelihood of the
/// parameters produced by each iteration.
pub fn plsa_train(corpus: &Corpus, config: &PlsaConfig) -> Result<(PlsaModel, Trace)> {
    config.validate()?;
    if corpus.n_users() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut model = plsa_init(corpus, config.k, config.seed);
    let mut trace = Trace::new("log_likelihood");
    for iteration in 1..=config.max_iters {
        let post = plsa_e_step(&model, corpus, config.shards).map_err(|e| match e {
            Error::NumericalFailure { what, .. } => Error::NumericalFailure { iteration, what },
            other => other,
        })?;
        let next = plsa_m_step(&post, corpus);
        let ll = log_likelihood(&next, corpus);
        if !ll.is_finite() {
            return Err(Error::NumericalFailure {
                iteration,
                what: format!("log-likelihood {ll}"),
            });
        }
        let delta = max_abs_change(&next, &model);
        trace.push(iteration, ll, delta);
        model = next;
        if delta < config.tol {
            break;
        }
    }
    Ok((model, trace))
}
