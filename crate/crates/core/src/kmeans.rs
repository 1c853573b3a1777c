//! Weighted-cosine k-means over binary beacon vectors, with a centroid
//! merging stage after every round.
//!
//! Beacon `b` carries weight `α · |users that fired b|`; dot products and
//! norms are taken under those weights. The run starts with one centroid per
//! beacon and shrinks through merges and the removal of empty centroids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Corpus;

/// Sparse vector as `(beacon index, value)` pairs in ascending index order.
pub type SparseVector = Vec<(usize, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct BeaconWeights(Vec<f64>);

impl BeaconWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("beacon weights must be positive".into()));
        }
        Ok(BeaconWeights(weights))
    }

    /// `w_b = α · |u(b)|`.
    pub fn from_corpus(corpus: &Corpus, alpha: f64) -> Result<Self> {
        Self::new(
            corpus
                .document_frequencies()
                .into_iter()
                .map(|df| alpha * df as f64)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `Σ w a b / (‖a‖_w ‖b‖_w)`, clamped to `[0, 1]`.
pub fn weighted_cosine(
    a: &[(usize, f64)],
    b: &[(usize, f64)],
    weights: &BeaconWeights,
) -> Result<f64> {
    let w = weights.as_slice();
    let norm2 = |x: &[(usize, f64)]| x.iter().map(|&(i, v)| w[i] * v * v).sum::<f64>();
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += w[a[i].0] * a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroid {
    pub vector: SparseVector,
    pub member_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    /// Centroid pairs at least this similar are merged.
    pub merge_threshold: f64,
    pub max_rounds: usize,
    /// Scale of the beacon weights; cancels out of every similarity.
    pub alpha: f64,
    /// Keep merging the closest pair, regardless of threshold, until at most
    /// this many centroids remain.
    pub target_k: Option<usize>,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            merge_threshold: 0.9,
            max_rounds: 50,
            alpha: 1.0,
            target_k: None,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_threshold > 0.0 && self.merge_threshold < 1.0) {
            return Err(Error::Config("merge_threshold must be in (0, 1)".into()));
        }
        if self.max_rounds < 1 || self.target_k == Some(0) {
            return Err(Error::Config(
                "max_rounds and target_k must be at least 1".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Vec<Centroid>,
    /// Centroid index of every corpus user.
    pub assignments: Vec<usize>,
    pub rounds: usize,
    pub converged: bool,
}

// Dense centroid with its squared weighted norm cached.
#[derive(Clone)]
struct Dense {
    values: Vec<f64>,
    norm2: f64,
    members: usize,
}

impl Dense {
    fn new(values: Vec<f64>, members: usize, w: &[f64]) -> Self {
        let norm2 = values.iter().zip(w).map(|(v, w)| w * v * v).sum::<f64>();
        Dense {
            values,
            norm2,
            members,
        }
    }

    fn cosine(&self, other: &Dense, w: &[f64]) -> f64 {
        if self.norm2 == 0.0 || other.norm2 == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .zip(w)
            .map(|((a, b), w)| w * a * b)
            .sum();
        (dot / (self.norm2 * other.norm2).sqrt()).clamp(0.0, 1.0)
    }
}

pub fn kmeans_cluster(corpus: &Corpus, config: &KMeansConfig) -> Result<KMeansResult> {
    if corpus.n_users() == 0 {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let weights = BeaconWeights::from_corpus(corpus, config.alpha)?;
    let w = weights.as_slice();
    let v = corpus.n_beacons();
    let n = corpus.n_users();
    // squared weighted norms of the binary user vectors
    let user_norms: Vec<f64> = (0..n)
        .map(|j| corpus.row(j).iter().map(|&(b, _)| w[b]).sum::<f64>())
        .collect();

    let mut centroids: Vec<Dense> = (0..v)
        .map(|m| {
            let mut values = vec![0.0; v];
            values[m] = 1.0;
            Dense::new(values, 0, w)
        })
        .collect();
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut rounds = 0;
    let mut converged = false;

    while rounds < config.max_rounds {
        rounds += 1;
        let next: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|j| {
                let row = corpus.row(j);
                let mut best = (0, f64::NEG_INFINITY);
                for (c, cen) in centroids.iter().enumerate() {
                    let sim = if cen.norm2 == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = row.iter().map(|&(b, _)| w[b] * cen.values[b]).sum();
                        dot / (cen.norm2 * user_norms[j]).sqrt()
                    };
                    if sim > best.1 {
                        best = (c, sim);
                    }
                }
                best.0
            })
            .collect();
        let stable = next == assignments;
        assignments = next;

        // recompute centroids as member means and drop empty ones
        let mut sums = vec![vec![0.0; v]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (j, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for &(b, _) in corpus.row(j) {
                sums[c][b] += 1.0;
            }
        }
        let mut remap = vec![usize::MAX; centroids.len()];
        let mut updated = Vec::new();
        for (c, (mut sum, count)) in sums.into_iter().zip(counts).enumerate() {
            if count == 0 {
                continue;
            }
            sum.iter_mut().for_each(|x| *x /= count as f64);
            remap[c] = updated.len();
            updated.push(Dense::new(sum, count, w));
        }
        let removed = updated.len() != centroids.len();
        centroids = updated;
        for a in &mut assignments {
            *a = remap[*a];
        }

        let merged = merge_stage(&mut centroids, &mut assignments, w, config);
        if stable && !merged && !removed {
            converged = true;
            break;
        }
    }

    let centroids = centroids
        .into_iter()
        .map(|d| Centroid {
            vector: d
                .values
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > 0.0)
                .map(|(b, &x)| (b, x))
                .collect(),
            member_count: d.members,
        })
        .collect();
    Ok(KMeansResult {
        centroids,
        assignments,
        rounds,
        converged,
    })
}

/// Greedy merging, most similar pair first. Returns whether anything merged.
fn merge_stage(
    centroids: &mut Vec<Dense>,
    assignments: &mut [usize],
    w: &[f64],
    config: &KMeansConfig,
) -> bool {
    let mut any = false;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..centroids.len() {
            for b in a + 1..centroids.len() {
                let s = centroids[a].cosine(&centroids[b], w);
                if best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        let Some((a, b, sim)) = best else {
            return any;
        };
        let over_cap = config.target_k.is_some_and(|k| centroids.len() > k);
        if sim < config.merge_threshold && !over_cap {
            return any;
        }
        let (ca, cb) = (&centroids[a], &centroids[b]);
        let total = ca.members + cb.members;
        let values = if total == 0 {
            ca.values
                .iter()
                .zip(&cb.values)
                .map(|(x, y)| (x + y) / 2.0)
                .collect()
        } else {
            ca.values
                .iter()
                .zip(&cb.values)
                .map(|(x, y)| (x * ca.members as f64 + y * cb.members as f64) / total as f64)
                .collect()
        };
        centroids[a] = Dense::new(values, total, w);
        centroids.remove(b);
        for c in assignments.iter_mut() {
            if *c == b {
                *c = a;
            } else if *c > b {
                *c -= 1;
            }
        }
        any = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UserHistory;
    use approx::assert_abs_diff_eq;

    fn weights(w: &[f64]) -> BeaconWeights {
        BeaconWeights::new(w.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let w = weights(&[4.0, 1.0, 2.0]);
        let a = vec![(0, 1.0)];
        let b = vec![(0, 1.0), (1, 1.0)];
        assert_abs_diff_eq!(
            weighted_cosine(&a, &b, &w).unwrap(),
            4.0 / (2.0 * 5f64.sqrt()),
            epsilon = 1e-12
        );
        assert_eq!(weighted_cosine(&b, &b, &w).unwrap(), 1.0);
        assert_eq!(weighted_cosine(&a, &[(2, 1.0)], &w).unwrap(), 0.0);
        assert!(matches!(
            weighted_cosine(&a, &[], &w),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn non_positive_weights_rejected() {
        assert!(BeaconWeights::new(vec![1.0, 0.0]).is_err());
    }

    fn corpus(rows: &[(&str, &[(&str, u64)])]) -> Corpus {
        Corpus::from_histories(
            rows.iter()
                .map(|(u, pairs)| UserHistory::from_pairs(*u, pairs.iter().copied()).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn separable_groups() {
        let c = corpus(&[
            ("u1", &[("a1", 1), ("a2", 4)]),
            ("u2", &[("a1", 2), ("a2", 1)]),
            ("u3", &[("a1", 5), ("a2", 5)]),
            ("u4", &[("b1", 1), ("b2", 1), ("b3", 2)]),
            ("u5", &[("b1", 3), ("b2", 1), ("b3", 1)]),
        ]);
        let r = kmeans_cluster(&c, &KMeansConfig::default()).unwrap();
        assert_eq!(r.centroids.len(), 2);
        assert!(r.converged);
        let a = &r.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        assert_eq!(a[3], a[4]);
        assert_ne!(a[0], a[3]);
        assert_eq!(r.centroids[a[0]].member_count, 3);
    }

    #[test]
    fn identical_users_collapse() {
        let rows: Vec<(String, Vec<(&str, u64)>)> = (0..6)
            .map(|u| (format!("u{u}"), vec![("x", 1), ("y", 2), ("z", 1)]))
            .collect();
        let c = Corpus::from_histories(
            rows.iter()
                .map(|(u, p)| UserHistory::from_pairs(u.clone(), p.clone()).unwrap()),
        )
        .unwrap();
        let r = kmeans_cluster(&c, &KMeansConfig::default()).unwrap();
        assert_eq!(r.centroids.len(), 1);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn target_k_forces_merges() {
        let c = corpus(&[
            ("u1", &[("a", 1)]),
            ("u2", &[("b", 1)]),
            ("u3", &[("c", 1)]),
        ]);
        let r = kmeans_cluster(
            &c,
            &KMeansConfig {
                target_k: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.centroids.len() <= 2);
    }

    #[test]
    fn bad_config() {
        let c = corpus(&[("u1", &[("a", 1)])]);
        for t in [0.0, 1.0] {
            let cfg = KMeansConfig {
                merge_threshold: t,
                ..Default::default()
            };
            assert!(kmeans_cluster(&c, &cfg).is_err());
        }
    }
}
