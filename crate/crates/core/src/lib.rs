//! Behavioral user clustering from beacon (event) histories.
//!
//! The cluster model assumes the cluster is independent of the user given a
//! beacon, so any user, including one never seen in training, is placed by
//! `p(c | u) = Σ_b p(c | b) p(b | u)` using only the beacon → cluster table.
//!
//! Modules:
//! - [`model`]: probability tables, model file, run-time assignment
//! - [`ingest`]: event logs to a windowed, filtered [`Corpus`]
//! - [`train`](mod@train): hard/soft EM with a thread-count independent reduction
//! - [`plsa`]: classic pLSA for comparison
//! - [`kmeans`]: weighted-cosine k-means baseline with centroid merging
//! - [`synth`]: planted-cluster event generator
//! - [`eval`]: ARI / purity / NMI, eCPA / eCPC, trace reports

pub mod assignments;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod kmeans;
pub mod model;
pub mod plsa;
pub mod synth;
pub mod trace;
pub mod train;
mod util;

pub use error::{Error, Result};
pub use ingest::{build_corpus, filter_beacons, Corpus, EventRecord, FilterConfig};
pub use kmeans::{kmeans_cluster, KMeansConfig, KMeansResult};
pub use model::{Assignment, BeaconId, ClusterModel, UserHistory};
pub use plsa::{plsa_train, PlsaConfig, PlsaModel};
pub use synth::{generate, Overlap, PlantedTruth, SynthConfig};
pub use trace::Trace;
pub use train::{train, EmptyClusterPolicy, Mode, TrainConfig, TrainOutput};
