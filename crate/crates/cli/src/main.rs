use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use beaconclust::eval::{ecpa, ecpc, objective_report, recovery_metrics};
use beaconclust::ingest::{parse_histories, read_events, SECONDS_PER_DAY};
use beaconclust::synth::DEFAULT_NOW;
use beaconclust::{
    assignments, build_corpus, filter_beacons, generate, kmeans_cluster, plsa_train, train,
    ClusterModel, Corpus, EmptyClusterPolicy, FilterConfig, KMeansConfig, Mode, Overlap,
    PlsaConfig, PlsaModel, SynthConfig, Trace, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cluster users by their beacon histories.
#[derive(Parser)]
#[command(name = "beaconclust", version)]
struct Cli {
    /// Worker threads. Changes speed only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log with planted clusters.
    Gen(GenArgs),
    /// Build a filtered corpus from an event log.
    Ingest(IngestArgs),
    /// Train the beacon-to-cluster model with EM.
    Train(TrainArgs),
    /// Train classic pLSA for comparison.
    PlsaTrain(PlsaArgs),
    /// Cluster users with weighted-cosine k-means.
    Kmeans(KmeansArgs),
    /// Assign users in a history file to clusters of a trained model.
    Assign(AssignArgs),
    /// Score predicted assignments against the truth, and compute eCPA/eCPC.
    Eval(EvalArgs),
    /// Merge objective traces into one CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of clusters.
    #[arg(long, default_value_t = 600)]
    k: usize,
    /// Number of users to generate.
    #[arg(long)]
    users: usize,
    /// Vocabulary size.
    #[arg(long)]
    beacons: usize,
    /// `disjoint` or `dirichlet:<alpha>`.
    #[arg(long, default_value = "disjoint")]
    overlap: Overlap,
    /// Fewest events per user.
    #[arg(long, default_value_t = 20)]
    min_events: usize,
    /// Most events per user.
    #[arg(long, default_value_t = 60)]
    max_events: usize,
    /// Timestamp of the last possible event.
    #[arg(long, default_value_t = DEFAULT_NOW)]
    now: u64,
    /// Days of history kept before the end of the window.
    #[arg(long, default_value_t = 60)]
    window_days: u64,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Event log (`timestamp<TAB>user<TAB>beacon`).
    #[arg(long, default_value = "events.tsv")]
    out: PathBuf,
    /// Planted labels (`user<TAB>true_cluster`).
    #[arg(long, default_value = "truth.tsv")]
    truth: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Event log (`timestamp<TAB>user<TAB>beacon`).
    #[arg(long)]
    input: PathBuf,
    /// Corpus file.
    #[arg(long, default_value = "corpus.tsv")]
    out: PathBuf,
    /// Days of history kept before the end of the window.
    #[arg(long, default_value_t = 60)]
    window_days: u64,
    /// End of the window. Defaults to the latest timestamp in the log.
    #[arg(long)]
    now: Option<u64>,
    /// Drop beacons seen by fewer distinct users.
    #[arg(long, default_value_t = 3)]
    min_users: usize,
    /// Drop beacons seen by more than this fraction of users.
    #[arg(long, default_value_t = 0.2)]
    max_user_fraction: f64,
    /// Keep a uniform sample of this many beacons after filtering.
    #[arg(long, requires = "seed")]
    sample: Option<usize>,
    /// Seed for --sample.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip beacon filtering entirely.
    #[arg(long, conflicts_with_all = ["sample", "min_users", "max_user_fraction"])]
    no_filter: bool,
    /// Fail on the first malformed line instead of skipping it.
    #[arg(long)]
    strict: bool,
}

/// Training input: a corpus file, or an event log used without filtering.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Input {
    /// Corpus (`user<TAB>total<TAB>beacon:count,...`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Event log, windowed but not filtered.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct Window {
    /// Days of history kept before the end of the window.
    #[arg(long, default_value_t = 60)]
    window_days: u64,
    /// End of the window for `--events`. Defaults to the latest timestamp.
    #[arg(long)]
    now: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Split,
    Flag,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    window: Window,
    /// Number of clusters.
    #[arg(long, default_value_t = 600)]
    k: usize,
    /// `hard` or `soft`.
    #[arg(long, default_value = "hard")]
    mode: Mode,
    /// Stop once no parameter moves by more than this.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// User shards per E-step. Fixed, so results never depend on --threads.
    #[arg(long, default_value_t = 64)]
    shards: usize,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Additive smoothing of p(b|c).
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    /// How hard-mode training handles clusters that lose all users.
    #[arg(long, value_enum, default_value_t = Policy::Split)]
    empty_clusters: Policy,
    /// Model file.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Objective trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Training assignments TSV.
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Flagged-clusters report.
    #[arg(long)]
    flagged: Option<PathBuf>,
}

#[derive(Args)]
struct PlsaArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    window: Window,
    /// Number of clusters.
    #[arg(long, default_value_t = 600)]
    k: usize,
    /// Stop once no parameter moves by more than this.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// User shards per E-step. Fixed, so results never depend on --threads.
    #[arg(long, default_value_t = 64)]
    shards: usize,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Model file.
    #[arg(long, default_value = "plsa.json")]
    out: PathBuf,
    /// Log-likelihood trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Training assignments TSV.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Args)]
struct KmeansArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    window: Window,
    /// Centroids at least this similar are merged.
    #[arg(long, default_value_t = 0.9)]
    merge_threshold: f64,
    /// Keep merging the closest centroids until at most this many remain.
    #[arg(long)]
    target_k: Option<usize>,
    /// Beacon weight is alpha times the number of users who fired it.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Round cap.
    #[arg(long, default_value_t = 50)]
    max_rounds: usize,
    /// Assignments TSV.
    #[arg(long, default_value = "kmeans.tsv")]
    out: PathBuf,
}

#[derive(Args)]
struct AssignArgs {
    /// Model from `train` or `plsa-train`.
    #[arg(long)]
    model: PathBuf,
    /// Histories in corpus format.
    #[arg(long)]
    input: PathBuf,
    /// Assignments TSV. Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted assignments TSV.
    #[arg(long, requires = "truth")]
    predicted: Option<PathBuf>,
    /// Truth assignments TSV.
    #[arg(long, requires = "predicted")]
    truth: Option<PathBuf>,
    /// Advertising cost for eCPA/eCPC.
    #[arg(long)]
    cost: Option<f64>,
    /// Number of actions, for eCPA.
    #[arg(long, requires = "cost")]
    actions: Option<u64>,
    /// Number of clicks, for eCPC.
    #[arg(long, requires = "cost")]
    clicks: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace CSVs, labelled by file stem.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Output CSV. Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start thread pool")?;
    }
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::PlsaTrain(a) => plsa_cmd(a),
        Command::Kmeans(a) => kmeans_cmd(a),
        Command::Assign(a) => assign_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let config = SynthConfig {
        min_events: a.min_events,
        max_events: a.max_events,
        now: a.now,
        window_days: a.window_days,
        ..SynthConfig::new(a.k, a.users, a.beacons, a.overlap, a.seed)
    };
    let (events, truth) = generate(&config)?;
    let file = File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    for e in &events {
        writeln!(w, "{}", e.to_line())?;
    }
    w.flush()?;
    write_text(&a.truth, &truth.to_tsv())?;
    eprintln!("{} events for {} users", events.len(), a.users);
    Ok(())
}

fn load_events(path: &Path, strict: bool, window_days: u64, now: Option<u64>) -> Result<Corpus> {
    if window_days < 1 {
        bail!("--window-days must be at least 1");
    }
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let (events, skipped) = read_events(BufReader::new(file), strict)
        .with_context(|| format!("in {}", path.display()))?;
    if let Some(first) = skipped.first() {
        eprintln!("skipped {} malformed lines (first: {first})", skipped.len());
    }
    let now = match now {
        Some(t) => t,
        None => events
            .iter()
            .map(|e| e.timestamp)
            .max()
            .with_context(|| format!("{} has no events", path.display()))?,
    };
    let corpus = build_corpus(events, window_days, now)?;
    let start = now.saturating_sub(window_days * SECONDS_PER_DAY);
    eprintln!(
        "window [{start}, {now}]: {} users, {} beacons",
        corpus.n_users(),
        corpus.n_beacons()
    );
    Ok(corpus)
}

fn load_input(input: &Input, window: &Window) -> Result<Corpus> {
    match (&input.input, &input.events) {
        (Some(path), _) => Corpus::read(path).with_context(|| format!("in {}", path.display())),
        (None, Some(path)) => load_events(path, false, window.window_days, window.now),
        (None, None) => bail!("one of --input or --events is required"),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut corpus = load_events(&a.input, a.strict, a.window_days, a.now)?;
    if !a.no_filter {
        let config = FilterConfig {
            min_users: a.min_users,
            max_user_fraction: a.max_user_fraction,
            sample_size: a.sample,
            seed: a.seed.unwrap_or(0),
        };
        corpus = filter_beacons(&corpus, &config)?;
        eprintln!(
            "after filtering: {} users, {} beacons",
            corpus.n_users(),
            corpus.n_beacons()
        );
    }
    corpus.write(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        tol: a.tol,
        max_iters: a.max_iters,
        shards: a.shards,
        smoothing: a.smoothing,
        empty_clusters: match a.empty_clusters {
            Policy::Split => EmptyClusterPolicy::Split,
            Policy::Flag => EmptyClusterPolicy::Flag,
        },
        ..TrainConfig::new(a.k, a.mode, a.seed)
    };
    config.validate()?;
    let corpus = load_input(&a.input, &a.window)?;
    let out = train(&corpus, &config)?;
    out.model.write(&a.out)?;
    if let Some(path) = &a.trace {
        out.trace.write(path)?;
    }
    if let Some(path) = &a.assignments {
        let rows: Vec<(String, usize)> = corpus
            .users()
            .iter()
            .cloned()
            .zip(out.responsibilities.labels())
            .collect();
        assignments::write(path, &rows)?;
    }
    let mut report = String::new();
    for c in &out.flagged {
        report.push_str(&format!("{c}\tempty\n"));
    }
    if let Some(path) = &a.flagged {
        write_text(path, &report)?;
    }
    eprintln!(
        "{} after {} iterations, {} empty-cluster repairs, {} flagged clusters",
        if out.converged {
            "converged"
        } else {
            "stopped"
        },
        out.iterations,
        out.repairs,
        out.flagged.len()
    );
    Ok(())
}

fn plsa_cmd(a: PlsaArgs) -> Result<()> {
    let config = PlsaConfig {
        tol: a.tol,
        max_iters: a.max_iters,
        shards: a.shards,
        ..PlsaConfig::new(a.k, a.seed)
    };
    config.validate()?;
    let corpus = load_input(&a.input, &a.window)?;
    let (model, trace) = plsa_train(&corpus, &config)?;
    model.write(&a.out)?;
    if let Some(path) = &a.trace {
        trace.write(path)?;
    }
    if let Some(path) = &a.assignments {
        let rows: Vec<(String, usize)> =
            model.users().iter().cloned().zip(model.labels()).collect();
        assignments::write(path, &rows)?;
    }
    eprintln!("{} iterations", trace.rows.len());
    Ok(())
}

fn kmeans_cmd(a: KmeansArgs) -> Result<()> {
    let config = KMeansConfig {
        merge_threshold: a.merge_threshold,
        max_rounds: a.max_rounds,
        alpha: a.alpha,
        target_k: a.target_k,
    };
    config.validate()?;
    let corpus = load_input(&a.input, &a.window)?;
    let result = kmeans_cluster(&corpus, &config)?;
    let rows: Vec<(String, usize)> = corpus
        .users()
        .iter()
        .cloned()
        .zip(result.assignments.iter().copied())
        .collect();
    assignments::write(&a.out, &rows)?;
    eprintln!(
        "{} centroids after {} rounds",
        result.centroids.len(),
        result.rounds
    );
    Ok(())
}

fn assign_cmd(a: AssignArgs) -> Result<()> {
    let text = fs::read_to_string(&a.model)
        .with_context(|| format!("cannot read {}", a.model.display()))?;
    let histories = {
        let input = fs::read_to_string(&a.input)
            .with_context(|| format!("cannot read {}", a.input.display()))?;
        parse_histories(&input).with_context(|| format!("in {}", a.input.display()))?
    };
    let mut rows: Vec<(String, String)> = Vec::with_capacity(histories.len());
    match ClusterModel::from_json(&text) {
        Ok(model) => {
            let mut unassigned = 0;
            for h in &histories {
                let label = match model.assign(h) {
                    Ok(a) => a.cluster.to_string(),
                    Err(beaconclust::Error::NoKnownBeacons) => {
                        unassigned += 1;
                        assignments::UNASSIGNED.to_string()
                    }
                    Err(e) => return Err(e.into()),
                };
                rows.push((h.user().to_string(), label));
            }
            if unassigned > 0 {
                eprintln!(
                    "{unassigned} of {} users have no beacon known to the model",
                    histories.len()
                );
            }
        }
        Err(model_err) => {
            let Ok(plsa) = PlsaModel::from_json(&text) else {
                return Err(model_err).with_context(|| format!("in {}", a.model.display()));
            };
            for h in &histories {
                let cluster = plsa.assign(h).context(
                    "classic pLSA only stores p(c|d) for training users; use a model from `train`",
                )?;
                rows.push((h.user().to_string(), cluster.to_string()));
            }
        }
    }
    let tsv = assignments::to_tsv(&rows);
    match &a.out {
        Some(path) => write_text(path, &tsv)?,
        None => io::stdout().lock().write_all(tsv.as_bytes())?,
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if a.predicted.is_none() && a.cost.is_none() {
        bail!("nothing to evaluate: pass --predicted/--truth, or --cost with --actions/--clicks");
    }
    let mut out = String::from("metric,value\n");
    if let (Some(p), Some(t)) = (&a.predicted, &a.truth) {
        let predicted = assignments::read(p).with_context(|| format!("in {}", p.display()))?;
        let truth = assignments::read(t).with_context(|| format!("in {}", t.display()))?;
        let m = recovery_metrics(&predicted, &truth)?;
        out.push_str(&format!(
            "ari,{}\npurity,{}\nnmi,{}\n",
            m.ari, m.purity, m.nmi
        ));
    }
    if let Some(cost) = a.cost {
        if cost.is_nan() || cost < 0.0 {
            bail!("--cost must be non-negative");
        }
        if a.actions.is_none() && a.clicks.is_none() {
            bail!("--cost needs --actions or --clicks");
        }
        let show = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        if let Some(n) = a.actions {
            out.push_str(&format!("ecpa,{}\n", show(ecpa(cost, n))));
        }
        if let Some(n) = a.clicks {
            out.push_str(&format!("ecpc,{}\n", show(ecpc(cost, n))));
        }
    }
    print!("{out}");
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut traces = Vec::with_capacity(a.traces.len());
    for path in &a.traces {
        let trace = Trace::read(path).with_context(|| format!("in {}", path.display()))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        traces.push((label, trace));
    }
    let csv = objective_report(&traces);
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => {
            io::stdout().lock().write_all(csv.as_bytes())?;
            Ok(())
        }
    }
}
