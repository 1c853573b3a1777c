//! Event logs to training corpus.
//!
//! Events are `timestamp<TAB>user<TAB>beacon` lines. They are windowed,
//! aggregated into per-user sparse counts, and carry the user marginal
//! `p(u) = n(u) / N` and the empirical beacon marginal `p̂(b) = n(b) / N`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{validate_token, BeaconId, UserHistory};

pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub timestamp: u64,
    pub user: String,
    pub beacon: BeaconId,
}

impl EventRecord {
    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let mut fields = line.split('\t');
        let (Some(ts), Some(user), Some(beacon), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::parse(line_no, "expected 3 tab-separated fields"));
        };
        let timestamp = ts
            .parse::<u64>()
            .map_err(|_| Error::parse(line_no, format!("bad timestamp {ts:?}")))?;
        validate_token(user).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let beacon = BeaconId::new(beacon).map_err(|e| Error::parse(line_no, e.to_string()))?;
        Ok(EventRecord {
            timestamp,
            user: user.to_string(),
            beacon,
        })
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.timestamp, self.user, self.beacon)
    }
}

/// Reads an event log. With `strict` the first malformed line is fatal;
/// otherwise malformed lines are skipped and returned alongside the events.
pub fn read_events<R: BufRead>(reader: R, strict: bool) -> Result<(Vec<EventRecord>, Vec<Error>)> {
    let mut events = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        match EventRecord::parse(&line, line_no) {
            Ok(ev) => events.push(ev),
            Err(e) if !strict => skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((events, skipped))
}

/// Preprocessed training set.
///
/// Users are ordered by id and the vocabulary is sorted, so a corpus does not
/// depend on the order its events arrived in.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    vocabulary: Vec<BeaconId>,
    users: Vec<String>,
    // (beacon index, count), ascending beacon index
    rows: Vec<Vec<(usize, u64)>>,
    totals: Vec<u64>,
    grand_total: u64,
    user_marginals: Vec<f64>,
    beacon_marginals: Vec<f64>,
}

impl Corpus {
    pub fn from_histories(histories: impl IntoIterator<Item = UserHistory>) -> Result<Self> {
        let mut by_user = BTreeMap::new();
        for h in histories {
            let user = h.user().to_string();
            if by_user.insert(user.clone(), h).is_some() {
                return Err(Error::Invariant(format!("duplicate user {user:?}")));
            }
        }
        if by_user.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocabulary: Vec<BeaconId> = by_user
            .values()
            .flat_map(|h| h.counts().keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&BeaconId, usize> =
            vocabulary.iter().enumerate().map(|(i, b)| (b, i)).collect();
        let mut users = Vec::with_capacity(by_user.len());
        let mut rows = Vec::with_capacity(by_user.len());
        for (user, h) in &by_user {
            users.push(user.clone());
            rows.push(h.counts().iter().map(|(b, &n)| (index[b], n)).collect());
        }
        Ok(Self::from_rows(vocabulary.clone(), users, rows))
    }

    // Rows must be non-empty with ascending indices into `vocabulary`.
    fn from_rows(
        vocabulary: Vec<BeaconId>,
        users: Vec<String>,
        rows: Vec<Vec<(usize, u64)>>,
    ) -> Self {
        let totals: Vec<u64> = rows
            .iter()
            .map(|r: &Vec<(usize, u64)>| r.iter().map(|&(_, n)| n).sum())
            .collect();
        let grand_total: u64 = totals.iter().sum();
        let n = grand_total as f64;
        let user_marginals = totals.iter().map(|&t| t as f64 / n).collect();
        let mut beacon_counts = vec![0u64; vocabulary.len()];
        for row in &rows {
            for &(b, c) in row {
                beacon_counts[b] += c;
            }
        }
        let beacon_marginals = beacon_counts.iter().map(|&c| c as f64 / n).collect();
        Corpus {
            vocabulary,
            users,
            rows,
            totals,
            grand_total,
            user_marginals,
            beacon_marginals,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_beacons(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn vocabulary(&self) -> &[BeaconId] {
        &self.vocabulary
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    /// Sparse `(beacon index, n(u, b))` entries of user `j`.
    pub fn row(&self, j: usize) -> &[(usize, u64)] {
        &self.rows[j]
    }

    pub fn total(&self, j: usize) -> u64 {
        self.totals[j]
    }

    pub fn grand_total(&self) -> u64 {
        self.grand_total
    }

    pub fn user_marginals(&self) -> &[f64] {
        &self.user_marginals
    }

    pub fn beacon_marginals(&self) -> &[f64] {
        &self.beacon_marginals
    }

    /// `(beacon index, p(b | u_j))` for every beacon user `j` fired.
    pub fn beacon_given_user(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let total = self.totals[j] as f64;
        self.rows[j]
            .iter()
            .map(move |&(b, n)| (b, n as f64 / total))
    }

    pub fn history(&self, j: usize) -> UserHistory {
        let counts = self.rows[j]
            .iter()
            .map(|&(b, n)| (self.vocabulary[b].clone(), n))
            .collect();
        UserHistory::new(self.users[j].clone(), counts).expect("corpus rows are valid histories")
    }

    pub fn histories(&self) -> impl Iterator<Item = UserHistory> + '_ {
        (0..self.n_users()).map(|j| self.history(j))
    }

    /// Users at the given positions, keeping the full vocabulary. Marginals
    /// are recomputed over the subset, so beacons nobody in it fired get
    /// `p̂(b) = 0`.
    pub fn subset(&self, users: &[usize]) -> Corpus {
        Self::from_rows(
            self.vocabulary.clone(),
            users.iter().map(|&j| self.users[j].clone()).collect(),
            users.iter().map(|&j| self.rows[j].clone()).collect(),
        )
    }

    /// Number of distinct users that fired each beacon.
    pub fn document_frequencies(&self) -> Vec<usize> {
        let mut df = vec![0; self.n_beacons()];
        for row in &self.rows {
            for &(b, _) in row {
                df[b] += 1;
            }
        }
        df
    }

    /// Keeps only the beacons for which `keep` is true, dropping users left empty.
    fn project(&self, keep: &[bool]) -> Result<Corpus> {
        let mut remap = vec![usize::MAX; self.n_beacons()];
        let mut vocabulary = Vec::new();
        for (b, id) in self.vocabulary.iter().enumerate() {
            if keep[b] {
                remap[b] = vocabulary.len();
                vocabulary.push(id.clone());
            }
        }
        if vocabulary.is_empty() {
            return Err(Error::FilterTooAggressive("beacon"));
        }
        let mut users = Vec::new();
        let mut rows = Vec::new();
        for (user, row) in self.users.iter().zip(&self.rows) {
            let row: Vec<(usize, u64)> = row
                .iter()
                .filter(|&&(b, _)| keep[b])
                .map(|&(b, n)| (remap[b], n))
                .collect();
            if !row.is_empty() {
                users.push(user.clone());
                rows.push(row);
            }
        }
        if users.is_empty() {
            return Err(Error::FilterTooAggressive("user"));
        }
        Ok(Self::from_rows(vocabulary, users, rows))
    }

    /// Writes `user<TAB>total<TAB>beacon:count,...` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.n_users() {
            write!(out, "{}\t{}\t", self.users[j], self.totals[j]).unwrap();
            for (i, &(b, n)) in self.rows[j].iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{}:{}", self.vocabulary[b], n).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Corpus> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_histories(parse_histories(&text)?)
    }
}

/// Parses corpus rows. Lines starting with `#` and blank lines are ignored.
pub fn parse_histories(text: &str) -> Result<Vec<UserHistory>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [user, total, entries] = fields[..] else {
            return Err(Error::parse(
                line_no,
                "expected user, total and beacon:count list",
            ));
        };
        let total: u64 = total
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad total {total:?}")))?;
        let mut pairs = Vec::new();
        for entry in entries.split(',') {
            let (b, n) = entry
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(line_no, format!("bad entry {entry:?}")))?;
            let n: u64 = n
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad count in {entry:?}")))?;
            pairs.push((b.to_string(), n));
        }
        let h = UserHistory::from_pairs(user, pairs)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        if h.total() != total {
            return Err(Error::parse(
                line_no,
                format!(
                    "total {total} does not match counts summing to {}",
                    h.total()
                ),
            ));
        }
        out.push(h);
    }
    Ok(out)
}

/// Aggregates events with `now - window_days·86400 <= timestamp <= now`.
pub fn build_corpus<I>(events: I, window_days: u64, now: u64) -> Result<Corpus>
where
    I: IntoIterator<Item = EventRecord>,
{
    if window_days == 0 {
        return Err(Error::Config("window_days must be at least 1".into()));
    }
    let start = now.saturating_sub(window_days.saturating_mul(SECONDS_PER_DAY));
    let mut counts: BTreeMap<String, BTreeMap<BeaconId, u64>> = BTreeMap::new();
    for ev in events {
        if ev.timestamp < start || ev.timestamp > now {
            continue;
        }
        *counts
            .entry(ev.user)
            .or_default()
            .entry(ev.beacon)
            .or_insert(0) += 1;
    }
    let histories = counts
        .into_iter()
        .map(|(user, c)| UserHistory::new(user, c))
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_histories(histories)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    /// Beacons fired by fewer distinct users are dropped.
    pub min_users: usize,
    /// Beacons fired by more than this fraction of users are dropped.
    pub max_user_fraction: f64,
    /// Uniformly sample this many of the surviving beacons.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_users: 3,
            max_user_fraction: 0.2,
            sample_size: None,
            seed: 0,
        }
    }
}

/// Drops the head and tail of the beacon frequency distribution, optionally
/// samples the rest, and reprojects every history.
pub fn filter_beacons(corpus: &Corpus, config: &FilterConfig) -> Result<Corpus> {
    if config.min_users < 1 {
        return Err(Error::Config("min_users must be at least 1".into()));
    }
    if !(config.max_user_fraction > 0.0 && config.max_user_fraction <= 1.0) {
        return Err(Error::Config("max_user_fraction must be in (0, 1]".into()));
    }
    let n_users = corpus.n_users() as f64;
    let mut keep: Vec<bool> = corpus
        .document_frequencies()
        .into_iter()
        .map(|df| df >= config.min_users && df as f64 <= config.max_user_fraction * n_users)
        .collect();
    if let Some(size) = config.sample_size {
        let survivors: Vec<usize> = (0..keep.len()).filter(|&b| keep[b]).collect();
        if size < survivors.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            keep.iter_mut().for_each(|k| *k = false);
            for i in index::sample(&mut rng, survivors.len(), size) {
                keep[survivors[i]] = true;
            }
        }
    }
    corpus.project(&keep)
}
