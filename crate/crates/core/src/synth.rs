//! Synthetic event logs drawn from a planted cluster model.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::error::{Error, Result};
use crate::ingest::{EventRecord, SECONDS_PER_DAY};
use crate::model::BeaconId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Overlap {
    /// Each cluster owns a contiguous block of the vocabulary, uniform within it.
    Disjoint,
    /// Each cluster's beacon distribution is drawn from a symmetric Dirichlet.
    Dirichlet(f64),
}

impl std::str::FromStr for Overlap {
    type Err = Error;

    /// `disjoint` or `dirichlet:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "disjoint" {
            return Ok(Overlap::Disjoint);
        }
        if let Some(a) = s.strip_prefix("dirichlet:") {
            if let Ok(alpha) = a.parse::<f64>() {
                return Ok(Overlap::Dirichlet(alpha));
            }
        }
        Err(Error::Config(format!(
            "unknown overlap {s:?}, expected disjoint or dirichlet:<alpha>"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub k: usize,
    pub n_users: usize,
    pub n_beacons: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub overlap: Overlap,
    pub seed: u64,
    /// End of the generated window; timestamps fall in `[now - window_days, now]`.
    pub now: u64,
    pub window_days: u64,
}

pub const DEFAULT_NOW: u64 = 1_700_000_000;

impl SynthConfig {
    pub fn new(k: usize, n_users: usize, n_beacons: usize, overlap: Overlap, seed: u64) -> Self {
        SynthConfig {
            k,
            n_users,
            n_beacons,
            min_events: 20,
            max_events: 60,
            overlap,
            seed,
            now: DEFAULT_NOW,
            window_days: 60,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 1 || self.n_users < 1 {
            return bad("k and n_users must be at least 1");
        }
        if self.n_beacons < self.k {
            return bad("n_beacons must be at least k");
        }
        if self.min_events < 1 || self.min_events > self.max_events {
            return bad("events per user must be a non-empty positive range");
        }
        if let Overlap::Dirichlet(a) = self.overlap {
            if !(a > 0.0 && a.is_finite()) {
                return bad("dirichlet concentration must be positive");
            }
        }
        if self.window_days < 1 || self.now < self.window_days * SECONDS_PER_DAY {
            return bad("window must be at least one day and start at or after time 0");
        }
        Ok(())
    }
}

/// Ground truth behind a generated log.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTruth {
    pub priors: Vec<f64>,
    /// `k` rows over [`PlantedTruth::vocabulary`].
    pub beacon_given_cluster: Vec<Vec<f64>>,
    pub vocabulary: Vec<BeaconId>,
    /// `(user, planted cluster)` in generation order.
    pub user_labels: Vec<(String, usize)>,
}

impl PlantedTruth {
    /// `user<TAB>true_cluster` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (u, c) in &self.user_labels {
            writeln!(out, "{u}\t{c}").unwrap();
        }
        out
    }
}

pub fn beacon_name(i: usize, n_beacons: usize) -> String {
    format!("b{:0width$}", i, width = digits(n_beacons))
}

pub fn user_name(i: usize, n_users: usize) -> String {
    format!("u{:0width$}", i, width = digits(n_users))
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Draws the planted model, then every user's cluster, event count, beacons
/// and timestamps from one seeded stream.
pub fn generate(config: &SynthConfig) -> Result<(Vec<EventRecord>, PlantedTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (k, v) = (config.k, config.n_beacons);
    let vocabulary: Vec<BeaconId> = (0..v)
        .map(|i| BeaconId::new(beacon_name(i, v)))
        .collect::<Result<_>>()?;
    let priors = vec![1.0 / k as f64; k];

    let beacon_given_cluster: Vec<Vec<f64>> = match config.overlap {
        Overlap::Disjoint => (0..k)
            .map(|c| {
                let (lo, hi) = (c * v / k, (c + 1) * v / k);
                let p = 1.0 / (hi - lo) as f64;
                (0..v)
                    .map(|b| if (lo..hi).contains(&b) { p } else { 0.0 })
                    .collect()
            })
            .collect(),
        Overlap::Dirichlet(alpha) => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
            (0..k)
                .map(|_| loop {
                    let draw: Vec<f64> = (0..v).map(|_| gamma.sample(&mut rng)).collect();
                    let s: f64 = draw.iter().sum();
                    if s > 0.0 && s.is_finite() {
                        break draw.into_iter().map(|x| x / s).collect();
                    }
                })
                .collect()
        }
    };

    let cluster_dist = WeightedIndex::new(&priors).map_err(|e| Error::Config(e.to_string()))?;
    let beacon_dists: Vec<WeightedIndex<f64>> = beacon_given_cluster
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let start = config.now - config.window_days * SECONDS_PER_DAY;

    let mut events = Vec::new();
    let mut user_labels = Vec::with_capacity(config.n_users);
    for j in 0..config.n_users {
        let user = user_name(j, config.n_users);
        let c = cluster_dist.sample(&mut rng);
        let n_events = rng.random_range(config.min_events..=config.max_events);
        for _ in 0..n_events {
            let b = beacon_dists[c].sample(&mut rng);
            let timestamp = rng.random_range(start..=config.now);
            events.push(EventRecord {
                timestamp,
                user: user.clone(),
                beacon: vocabulary[b].clone(),
            });
        }
        user_labels.push((user, c));
    }
    let truth = PlantedTruth {
        priors,
        beacon_given_cluster,
        vocabulary,
        user_labels,
    };
    Ok((events, truth))
}
