//! Probability tables of a trained clustering and run-time user assignment.
//!
//! A user is scored from its beacon history alone:
//! `p(c | u) = Σ_b p(c | b) · p(b | u)`, so the only table needed at serving
//! time is the beacon → cluster mapping. Nothing is stored per user.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{argmax, sum};

/// Tolerance used for every row-stochastic check.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Opaque event identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BeaconId(String);

impl BeaconId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        validate_token(&id)?;
        Ok(BeaconId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for BeaconId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        BeaconId::new(value)
    }
}

impl From<BeaconId> for String {
    fn from(id: BeaconId) -> String {
        id.0
    }
}

impl fmt::Display for BeaconId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

// Ids appear inside `beacon:count,...` lists and TSV columns.
pub(crate) fn validate_token(id: &str) -> Result<()> {
    if id.is_empty()
        || id
            .chars()
            .any(|c| c.is_whitespace() || c == ',' || c == ':')
    {
        return Err(Error::InvalidId(id.to_string()));
    }
    Ok(())
}

/// Beacon counts of one user inside the lookback window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    user: String,
    counts: BTreeMap<BeaconId, u64>,
    total: u64,
}

impl UserHistory {
    pub fn new(user: impl Into<String>, counts: BTreeMap<BeaconId, u64>) -> Result<Self> {
        let user = user.into();
        validate_token(&user)?;
        if counts.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if let Some((b, _)) = counts.iter().find(|(_, &n)| n == 0) {
            return Err(Error::Invariant(format!(
                "user {user:?} has a zero count for beacon {b}"
            )));
        }
        let total = counts.values().sum();
        Ok(UserHistory {
            user,
            counts,
            total,
        })
    }

    /// Builds a history from `(beacon, count)` pairs, summing repeated beacons.
    pub fn from_pairs<I, S>(user: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        for (b, n) in pairs {
            *counts.entry(BeaconId::new(b)?).or_insert(0) += n;
        }
        Self::new(user, counts)
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn counts(&self) -> &BTreeMap<BeaconId, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// `p(b | u) = n(u, b) / n(u)` for every beacon the user fired.
    pub fn beacon_distribution(&self) -> impl Iterator<Item = (&BeaconId, f64)> + '_ {
        let total = self.total as f64;
        self.counts.iter().map(move |(b, &n)| (b, n as f64 / total))
    }
}

/// Result of scoring one user.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub user: String,
    pub cluster: usize,
    pub posterior: Option<Vec<f64>>,
}

/// Trained cluster parameters plus the derived beacon → cluster table.
///
/// Immutable once built, so a shared reference can be scored from many threads.
#[derive(Clone, Debug)]
pub struct ClusterModel {
    vocabulary: Vec<BeaconId>,
    index: HashMap<BeaconId, usize>,
    priors: Vec<f64>,
    // k rows of length |vocabulary|
    beacon_given_cluster: Vec<Vec<f64>>,
    // |vocabulary| rows of length k; an all-zero row means the beacon is not in the table
    cluster_given_beacon: Vec<Vec<f64>>,
}

impl PartialEq for ClusterModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocabulary == other.vocabulary
            && self.priors == other.priors
            && self.beacon_given_cluster == other.beacon_given_cluster
            && self.cluster_given_beacon == other.cluster_given_beacon
    }
}

impl ClusterModel {
    /// Builds a model from `p(c)` and `p(b|c)`, deriving
    /// `p(c|b) = p(c) p(b|c) / Σ_m p(c_m) p(b|c_m)`.
    pub fn from_parameters(
        vocabulary: Vec<BeaconId>,
        priors: Vec<f64>,
        beacon_given_cluster: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let cluster_given_beacon = bayes_cluster_given_beacon(&priors, &beacon_given_cluster);
        Self::from_tables(
            vocabulary,
            priors,
            beacon_given_cluster,
            cluster_given_beacon,
        )
    }

    /// Builds a model from all three tables as given, after validating them.
    pub fn from_tables(
        vocabulary: Vec<BeaconId>,
        priors: Vec<f64>,
        beacon_given_cluster: Vec<Vec<f64>>,
        cluster_given_beacon: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let index = vocabulary
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), i))
            .collect::<HashMap<_, _>>();
        let model = ClusterModel {
            vocabulary,
            index,
            priors,
            beacon_given_cluster,
            cluster_given_beacon,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.priors.len()
    }

    pub fn vocabulary(&self) -> &[BeaconId] {
        &self.vocabulary
    }

    pub fn beacon_index(&self, beacon: &BeaconId) -> Option<usize> {
        self.index.get(beacon).copied()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn beacon_given_cluster(&self, cluster: usize) -> &[f64] {
        &self.beacon_given_cluster[cluster]
    }

    /// `p(c | b)` for a beacon, or `None` if the beacon is unknown or has no
    /// mass in any cluster.
    pub fn cluster_given_beacon(&self, beacon: &BeaconId) -> Option<&[f64]> {
        let row = &self.cluster_given_beacon[self.beacon_index(beacon)?];
        row.iter().any(|&p| p > 0.0).then_some(row.as_slice())
    }

    /// Checks shapes, non-negativity and every row-stochastic constraint.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let v = self.vocabulary.len();
        if k == 0 {
            return Err(Error::Invariant("model has no clusters".into()));
        }
        if v == 0 {
            return Err(Error::Invariant("model has an empty vocabulary".into()));
        }
        if self.index.len() != v {
            return Err(Error::Invariant("vocabulary contains duplicates".into()));
        }
        check_distribution(&self.priors, "cluster priors")?;
        if self.beacon_given_cluster.len() != k {
            return Err(Error::Invariant(format!(
                "expected {k} p(b|c) rows, found {}",
                self.beacon_given_cluster.len()
            )));
        }
        for (i, row) in self.beacon_given_cluster.iter().enumerate() {
            if row.len() != v {
                return Err(Error::Invariant(format!("p(b|c) row {i} has wrong length")));
            }
            check_distribution(row, &format!("p(b|c) row for cluster {i}"))?;
        }
        if self.cluster_given_beacon.len() != v {
            return Err(Error::Invariant("p(c|b) table has wrong length".into()));
        }
        for (b, row) in self.vocabulary.iter().zip(&self.cluster_given_beacon) {
            if row.len() != k {
                return Err(Error::Invariant(format!(
                    "p(c|b) row for {b} has wrong length"
                )));
            }
            if row.iter().all(|&p| p == 0.0) {
                continue;
            }
            check_distribution(row, &format!("p(c|b) row for beacon {b}"))?;
        }
        Ok(())
    }

    /// Posterior over clusters, `Σ_b p(c|b) p(b|u)` renormalised to sum to one.
    ///
    /// Beacons outside the table contribute nothing.
    pub fn score(&self, history: &UserHistory) -> Result<Vec<f64>> {
        if history.counts().is_empty() {
            return Err(Error::EmptyHistory);
        }
        let mut scores = vec![0.0; self.k()];
        let mut known = false;
        for (beacon, p_b_u) in history.beacon_distribution() {
            let Some(row) = self.cluster_given_beacon(beacon) else {
                continue;
            };
            known = true;
            for (s, &p_c_b) in scores.iter_mut().zip(row) {
                *s += p_c_b * p_b_u;
            }
        }
        let mass = sum(&scores);
        if !known || mass <= 0.0 {
            return Err(Error::NoKnownBeacons);
        }
        for s in &mut scores {
            *s /= mass;
        }
        Ok(scores)
    }

    /// Most likely cluster for the user, lowest index on ties.
    pub fn assign(&self, history: &UserHistory) -> Result<Assignment> {
        let posterior = self.score(history)?;
        Ok(Assignment {
            user: history.user().to_string(),
            cluster: argmax(&posterior),
            posterior: Some(posterior),
        })
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            k: self.k(),
            vocabulary: self
                .vocabulary
                .iter()
                .map(|b| b.as_str().to_string())
                .collect(),
            priors: self.priors.clone(),
            beacon_given_cluster: self
                .beacon_given_cluster
                .iter()
                .map(|row| {
                    self.vocabulary
                        .iter()
                        .zip(row)
                        .filter(|(_, &p)| p != 0.0)
                        .map(|(b, &p)| (b.as_str().to_string(), p))
                        .collect()
                })
                .collect(),
            cluster_given_beacon: self
                .vocabulary
                .iter()
                .zip(&self.cluster_given_beacon)
                .filter(|(_, row)| row.iter().any(|&p| p != 0.0))
                .map(|(b, row)| (b.as_str().to_string(), row.clone()))
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serialises");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::MalformedModel(format!(
                "unexpected format tag {:?}",
                file.format
            )));
        }
        if file.k != file.priors.len() || file.k != file.beacon_given_cluster.len() {
            return Err(Error::MalformedModel(format!(
                "k = {} disagrees with table sizes",
                file.k
            )));
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
        let lookup = |b: &str| {
            index
                .get(b)
                .copied()
                .ok_or_else(|| Error::MalformedModel(format!("beacon {b:?} not in vocabulary")))
        };
        let mut beacon_given_cluster = vec![vec![0.0; vocabulary.len()]; file.k];
        for (row, entries) in beacon_given_cluster
            .iter_mut()
            .zip(&file.beacon_given_cluster)
        {
            for (b, &p) in entries {
                row[lookup(b)?] = p;
            }
        }
        let mut cluster_given_beacon = vec![vec![0.0; file.k]; vocabulary.len()];
        for (b, row) in file.cluster_given_beacon {
            if row.len() != file.k {
                return Err(Error::MalformedModel(format!(
                    "p(c|b) row for {b:?} has {} entries, expected {}",
                    row.len(),
                    file.k
                )));
            }
            cluster_given_beacon[lookup(&b)?] = row;
        }
        Self::from_tables(
            vocabulary,
            file.priors,
            beacon_given_cluster,
            cluster_given_beacon,
        )
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

const MODEL_FORMAT: &str = "beaconclust-model/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    k: usize,
    vocabulary: Vec<String>,
    priors: Vec<f64>,
    beacon_given_cluster: Vec<BTreeMap<String, f64>>,
    cluster_given_beacon: BTreeMap<String, Vec<f64>>,
}

/// Bayes-rule inversion of `p(b|c)`; beacons with no mass anywhere get a zero row.
pub(crate) fn bayes_cluster_given_beacon(
    priors: &[f64],
    beacon_given_cluster: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let v = beacon_given_cluster.first().map_or(0, Vec::len);
    (0..v)
        .map(|b| {
            let mut row: Vec<f64> = priors
                .iter()
                .zip(beacon_given_cluster)
                .map(|(&p_c, row)| p_c * row[b])
                .collect();
            let mass = sum(&row);
            if mass > 0.0 {
                for p in &mut row {
                    *p /= mass;
                }
            } else {
                row.iter_mut().for_each(|p| *p = 0.0);
            }
            row
        })
        .collect()
}

pub(crate) fn check_distribution(values: &[f64], what: &str) -> Result<()> {
    if let Some(p) = values.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Invariant(format!(
            "{what} contains invalid entry {p}"
        )));
    }
    let total = sum(values);
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Invariant(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}
