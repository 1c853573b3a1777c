//! Direct-summation oracles for every probability update, on tiny random
//! instances. The oracles work on a dense count matrix and share no code
//! with the library's sparse, sharded paths. Each check panics on the
//! first mismatch.

#![allow(clippy::needless_range_loop)]

use beaconclust::plsa::{plsa_e_step, plsa_m_step, PlsaModel};
use beaconclust::train::{expectation_step, maximization_step, Mode, Parameters, Responsibilities};
use beaconclust::{BeaconId, ClusterModel, Corpus, UserHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

struct Instance {
    counts: Vec<Vec<u64>>, // users × beacons
    corpus: Corpus,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_users = rng.random_range(1..=4);
    let n_beacons = rng.random_range(1..=5);
    loop {
        let counts: Vec<Vec<u64>> = (0..n_users)
            .map(|_| {
                let mut row: Vec<u64> = (0..n_beacons)
                    .map(|_| {
                        if rng.random_bool(0.6) {
                            rng.random_range(1..6)
                        } else {
                            0
                        }
                    })
                    .collect();
                if row.iter().all(|&c| c == 0) {
                    let b = rng.random_range(0..n_beacons);
                    row[b] = 1;
                }
                row
            })
            .collect();
        // every beacon column must be observed so the corpus vocabulary is the full range
        if (0..n_beacons).any(|b| counts.iter().all(|r| r[b] == 0)) {
            continue;
        }
        let histories = counts.iter().enumerate().map(|(j, row)| {
            UserHistory::from_pairs(
                format!("u{j}"),
                row.iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(b, &c)| (format!("b{b}"), c)),
            )
            .unwrap()
        });
        let corpus = Corpus::from_histories(histories).unwrap();
        return Instance { counts, corpus };
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn assert_close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs {b}");
}

pub fn modified_e_step_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let k = rng.random_range(1..=3);
        let (n, v) = (inst.counts.len(), inst.counts[0].len());
        let priors = random_simplex(&mut rng, k);
        let bgc: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, v)).collect();
        let params = Parameters {
            priors: priors.clone(),
            beacon_given_cluster: bgc.clone(),
            empty: vec![],
        };
        let grand: u64 = inst.counts.iter().flatten().sum();
        let soft = expectation_step(&params, &inst.corpus, Mode::Soft, 3).unwrap();
        let hard = expectation_step(&params, &inst.corpus, Mode::Hard, 1).unwrap();
        for j in 0..n {
            let n_u: u64 = inst.counts[j].iter().sum();
            let mut raw = vec![0.0; k];
            for (i, r) in raw.iter_mut().enumerate() {
                for b in 0..v {
                    let n_b: u64 = inst.counts.iter().map(|row| row[b]).sum();
                    let p_hat = n_b as f64 / grand as f64;
                    let p_b_u = inst.counts[j][b] as f64 / n_u as f64;
                    *r += priors[i] * bgc[i][b] / p_hat * p_b_u;
                }
            }
            let mass: f64 = raw.iter().sum();
            let got = soft.responsibilities.row(j);
            for i in 0..k {
                assert_close(got[i], raw[i] / mass, "soft responsibility");
            }
            let mut best = 0;
            for i in 1..k {
                if raw[i] > raw[best] {
                    best = i;
                }
            }
            // hard mode must agree with the oracle argmax unless the top two are a near-tie
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if k == 1 || sorted[0] - sorted[1] > 1e-12 {
                assert_eq!(hard.responsibilities.labels()[j], best);
            }
        }
    }
}

pub fn modified_m_step_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let k = rng.random_range(1..=3);
        let (n, v) = (inst.counts.len(), inst.counts[0].len());
        let resp: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let r = Responsibilities::Soft {
            k,
            values: resp.iter().flatten().copied().collect(),
        };
        let got = maximization_step(&r, &inst.corpus, 0.0);
        let grand: u64 = inst.counts.iter().flatten().sum();
        for i in 0..k {
            let mut p_c = 0.0;
            for j in 0..n {
                let n_u: u64 = inst.counts[j].iter().sum();
                p_c += n_u as f64 / grand as f64 * resp[j][i];
            }
            assert_close(got.priors[i], p_c, "p(c)");
            for b in 0..v {
                let mut num = 0.0;
                for j in 0..n {
                    let n_u: u64 = inst.counts[j].iter().sum();
                    let p_u = n_u as f64 / grand as f64;
                    num += inst.counts[j][b] as f64 / n_u as f64 * resp[j][i] * p_u;
                }
                assert_close(got.beacon_given_cluster[i][b], num / p_c, "p(b|c)");
            }
        }
    }
}

pub fn plsa_steps_match_enumerated_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let k = rng.random_range(1..=3);
        let (n, v) = (inst.counts.len(), inst.counts[0].len());
        let wgc: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, v)).collect();
        let cgd: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let model = PlsaModel::new(
            inst.corpus.users().to_vec(),
            inst.corpus.vocabulary().to_vec(),
            wgc.clone(),
            cgd.clone(),
        )
        .unwrap();
        let post = plsa_e_step(&model, &inst.corpus, 2).unwrap();

        // joint p(c, d, w) = p(d) p(c|d) p(w|c), conditioned on (d, w)
        let grand: u64 = inst.counts.iter().flatten().sum();
        let mut oracle_post = vec![vec![vec![0.0; k]; v]; n];
        for j in 0..n {
            let p_d = inst.counts[j].iter().sum::<u64>() as f64 / grand as f64;
            for w in 0..v {
                let joint: Vec<f64> = (0..k).map(|i| p_d * cgd[j][i] * wgc[i][w]).collect();
                let z: f64 = joint.iter().sum();
                for i in 0..k {
                    oracle_post[j][w][i] = joint[i] / z;
                }
            }
        }
        for j in 0..n {
            let observed: Vec<usize> = (0..v).filter(|&w| inst.counts[j][w] > 0).collect();
            for (e, &w) in observed.iter().enumerate() {
                for i in 0..k {
                    assert_close(post.get(j, e)[i], oracle_post[j][w][i], "p(c|d,w)");
                }
            }
        }

        let m = plsa_m_step(&post, &inst.corpus);
        for i in 0..k {
            let num: Vec<f64> = (0..v)
                .map(|w| {
                    (0..n)
                        .map(|j| inst.counts[j][w] as f64 * oracle_post[j][w][i])
                        .sum()
                })
                .collect();
            let z: f64 = num.iter().sum();
            for w in 0..v {
                assert_close(m.word_given_cluster[i][w], num[w] / z, "p(w|c)");
            }
        }
        for j in 0..n {
            let n_d: u64 = inst.counts[j].iter().sum();
            for i in 0..k {
                let s: f64 = (0..v)
                    .map(|w| inst.counts[j][w] as f64 * oracle_post[j][w][i])
                    .sum();
                assert_close(m.cluster_given_doc[j][i], s / n_d as f64, "p(c|d)");
            }
        }
    }
}

pub fn score_user_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for _ in 0..200 {
        let k = rng.random_range(1..=3);
        let v = rng.random_range(1..=5);
        let priors = random_simplex(&mut rng, k);
        let bgc: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, v)).collect();
        let vocab: Vec<BeaconId> = (0..v)
            .map(|b| BeaconId::new(format!("b{b}")).unwrap())
            .collect();
        let model = ClusterModel::from_parameters(vocab, priors.clone(), bgc.clone()).unwrap();

        let counts: Vec<u64> = (0..v).map(|_| rng.random_range(0..4)).collect();
        let extra_unknown = rng.random_range(0..3);
        let mut pairs: Vec<(String, u64)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(b, &c)| (format!("b{b}"), c))
            .collect();
        if extra_unknown > 0 {
            pairs.push(("zz".into(), extra_unknown));
        }
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let history = UserHistory::from_pairs("u", pairs).unwrap();
        let total = counts.iter().sum::<u64>() + extra_unknown;

        let mut raw = vec![0.0; k];
        for b in 0..v {
            let z: f64 = (0..k).map(|m| priors[m] * bgc[m][b]).sum();
            for i in 0..k {
                raw[i] += priors[i] * bgc[i][b] / z * counts[b] as f64 / total as f64;
            }
        }
        let mass: f64 = raw.iter().sum();
        let got = model.score(&history).unwrap();
        for i in 0..k {
            assert_close(got[i], raw[i] / mass, "p(c|u)");
        }
    }
}

/// Reference trace of the seeded initial assignment: uniform draws, then
/// each empty cluster in ascending order takes a uniformly drawn user from
/// a cluster that still has two or more members.
fn reference_init(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(rng.random_range(0..k));
    }
    for c in 0..k {
        if labels.contains(&c) {
            continue;
        }
        loop {
            let j = rng.random_range(0..n);
            let from = labels[j];
            if labels.iter().filter(|&&l| l == from).count() >= 2 {
                labels[j] = c;
                break;
            }
        }
    }
    labels
}

pub fn initial_assignment_matches_reference_rng_trace() {
    let histories = (0..100).map(|j| {
        UserHistory::from_pairs(
            format!("u{j:03}"),
            [(format!("b{}", j % 7), 1 + j as u64 % 3)],
        )
        .unwrap()
    });
    let corpus = Corpus::from_histories(histories).unwrap();
    for seed in [0, 7, 12345] {
        let cfg = beaconclust::TrainConfig::new(5, Mode::Hard, seed);
        let state = beaconclust::train::init_random(&corpus, &cfg).unwrap();
        let expected = reference_init(100, 5, seed);
        assert_eq!(state.responsibilities.labels(), expected);
        let mut sizes = [0; 5];
        for l in expected {
            sizes[l] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 100);
    }
    // a case where a cluster starts empty: 6 users, 6 clusters
    let small = Corpus::from_histories(
        (0..6).map(|j| UserHistory::from_pairs(format!("u{j}"), [("b", 1)]).unwrap()),
    )
    .unwrap();
    for seed in 0..20 {
        let cfg = beaconclust::TrainConfig::new(6, Mode::Hard, seed);
        let state = beaconclust::train::init_random(&small, &cfg).unwrap();
        assert_eq!(state.responsibilities.labels(), reference_init(6, 6, seed));
    }
}

#[test]
fn e_step() {
    modified_e_step_matches_direct_sum();
}

#[test]
fn m_step() {
    modified_m_step_matches_direct_sum();
}

#[test]
fn plsa_steps() {
    plsa_steps_match_enumerated_joint();
}

#[test]
fn score() {
    score_user_matches_direct_sum();
}

#[test]
fn init_trace() {
    initial_assignment_matches_reference_rng_trace();
}
