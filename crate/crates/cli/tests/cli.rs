use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_beaconclust");

fn run(dir: &Path, args: &str) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args.split_whitespace())
        .output()
        .expect("run beaconclust")
}

fn ok(dir: &Path, args: &str) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "`{args}` failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &str) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "`{args}` unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn gen_train_eval_pipeline_recovers_planted_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, "gen --k 5 --users 10000 --beacons 200 --seed 7");
    ok(
        d,
        "train --events events.tsv --k 5 --mode hard --seed 7 --assignments assignments.tsv --trace trace.csv --flagged flagged.txt",
    );
    let metrics = ok(d, "eval --predicted assignments.tsv --truth truth.tsv");
    let ari: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("ari,"))
        .expect("ari row")
        .parse()
        .unwrap();
    assert_eq!(ari, 1.0);
    assert!(fs::read_to_string(d.join("trace.csv"))
        .unwrap()
        .starts_with("iter,log_objective,max_param_delta\n"));
    assert_eq!(fs::read_to_string(d.join("flagged.txt")).unwrap(), "");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        "gen --k 3 --users 300 --beacons 30 --overlap dirichlet:0.5 --seed 1",
    );
    ok(
        d,
        "ingest --input events.tsv --min-users 2 --max-user-fraction 0.9",
    );
    for out in ["a.json", "b.json"] {
        ok(
            d,
            &format!("train --input corpus.tsv --k 3 --mode soft --seed 2 --out {out}"),
        );
    }
    assert_eq!(
        fs::read(d.join("a.json")).unwrap(),
        fs::read(d.join("b.json")).unwrap()
    );
}

#[test]
fn invalid_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.tsv"), "u1\t1\tb:1\n").unwrap();
    let err = fails(d, "train --input c.tsv --k 0 --seed 1");
    assert!(err.contains("error:"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    // stochastic subcommands need a seed
    fails(d, "train --input c.tsv --k 1");
    fails(d, "gen --users 10 --beacons 5");
    fails(d, "plsa-train --input c.tsv --k 1");
    fails(d, "ingest --input c.tsv --sample 3");
    fails(d, "train --input c.tsv --k 1 --seed 1 --bogus");
    let missing = fails(d, "train --input nope.tsv --k 1 --seed 1");
    assert!(missing.contains("nope.tsv"), "{missing}");
}

#[test]
fn assign_keeps_one_row_per_input_user() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("train.tsv"),
        "a1\t3\tx:2,y:1\na2\t2\tx:2\nb1\t3\tz:3\nb2\t2\tz:1,w:1\n",
    )
    .unwrap();
    ok(d, "train --input train.tsv --k 2 --seed 0 --out m.json");
    fs::write(
        d.join("new.tsv"),
        "# new users\nn1\t1\tx:1\nn2\t4\tz:2,w:2\nn3\t2\tunknown:2\n",
    )
    .unwrap();
    let out = ok(d, "assign --model m.json --input new.tsv");
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "n1");
    assert_ne!(rows[0][1], rows[1][1]);
    assert_eq!(rows[2], ["n3", "-"]);
}

#[test]
fn plsa_model_refuses_unseen_users() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("train.tsv"), "a\t2\tx:2\nb\t2\ty:2\n").unwrap();
    fs::write(d.join("new.tsv"), "c\t1\tx:1\n").unwrap();
    ok(
        d,
        "plsa-train --input train.tsv --k 2 --seed 3 --trace plsa.csv --assignments plsa.tsv",
    );
    assert_eq!(
        ok(d, "assign --model plsa.json --input train.tsv")
            .lines()
            .count(),
        2
    );
    let err = fails(d, "assign --model plsa.json --input new.tsv");
    assert!(err.contains("\"c\""), "{err}");
}

#[test]
fn kmeans_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, "gen --k 4 --users 400 --beacons 40 --seed 5");
    ok(d, "kmeans --events events.tsv --target-k 4");
    let metrics = ok(d, "eval --predicted kmeans.tsv --truth truth.tsv");
    assert!(metrics.contains("purity,"), "{metrics}");

    ok(d, "train --events events.tsv --k 4 --seed 1 --trace em.csv");
    ok(
        d,
        "plsa-train --events events.tsv --k 4 --seed 1 --trace plsa.csv",
    );
    let report = ok(d, "report em.csv plsa.csv");
    let header = report.lines().next().unwrap();
    assert!(header.contains("em:log_objective") && header.contains("plsa:log_likelihood"));
    assert!(header.contains("plsa:non_decreasing"));
    let plsa_flags: Vec<&str> = {
        let col = header
            .split(',')
            .position(|h| h == "plsa:non_decreasing")
            .unwrap();
        report
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(col))
            .filter(|s| !s.is_empty())
            .collect()
    };
    assert!(!plsa_flags.is_empty() && plsa_flags.iter().all(|&f| f == "true"));
}

#[test]
fn eval_reports_user_set_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("p.tsv"), "a\t0\nb\t1\n").unwrap();
    fs::write(d.join("t.tsv"), "a\t0\nc\t1\n").unwrap();
    let err = fails(d, "eval --predicted p.tsv --truth t.tsv");
    assert!(err.contains("user sets differ"), "{err}");
}
