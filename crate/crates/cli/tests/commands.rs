use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_contbal"));
    c.env_remove("CONTBAL_LOG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// Temp dir holding `m.csv`: 4 groups x `per_group` identities, 1-4 images.
fn workspace(per_group: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--seed",
            "3",
            "--identities-per-group",
            &per_group.to_string(),
            "--concentration",
            "2,8,8,8",
            "--images-per-identity",
            "1-4",
            "--out",
            "m.csv",
        ],
    );
    dir
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn target_size_equals_remove() {
    let w = workspace(60);
    let d = w.path();
    for p in ["A", "B", "C", "random"] {
        ok(d, &["sample", "m.csv", "-p", p, "--seed", "1", "--target-size", "200", "--out", "t.csv", "--log", "t.log"]);
        ok(d, &["sample", "m.csv", "-p", p, "--seed", "1", "--remove", "40", "--out", "r.csv", "--log", "r.log"]);
        assert_eq!(read(d, "t.csv"), read(d, "r.csv"), "{p}");
        assert_eq!(read(d, "t.log"), read(d, "r.log"), "{p}");
    }
}

#[test]
fn naive_and_incremental_write_identical_files() {
    let w = workspace(300);
    let d = w.path();
    for p in ["A", "B", "C"] {
        ok(d, &["sample", "m.csv", "-p", p, "--remove", "350", "--out", "fast.csv", "--log", "fast.log"]);
        ok(d, &["sample", "m.csv", "-p", p, "--remove", "350", "--naive", "--out", "slow.csv", "--log", "slow.log"]);
        assert_eq!(read(d, "fast.csv"), read(d, "slow.csv"), "{p}");
        assert_eq!(read(d, "fast.log"), read(d, "slow.log"), "{p}");
    }
}

#[test]
fn relabel_first_composes() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    ok(d, &["synth", "--seed", "5", "--identities-per-group", "40", "--label-noise", "0.2", "--out", "m.csv"]);
    ok(d, &["relabel", "m.csv", "--out", "rel.csv", "--changes", "changes.csv"]);
    let changes = String::from_utf8(read(d, "changes.csv")).unwrap();
    assert!(changes.starts_with("identity_id,from,to\n"));
    assert!(changes.lines().count() > 1);
    for p in ["A", "B", "C"] {
        ok(d, &["sample", "m.csv", "-p", p, "--relabel-first", "--remove", "20", "--out", "one.csv"]);
        ok(d, &["sample", "rel.csv", "-p", p, "--remove", "20", "--out", "two.csv"]);
        assert_eq!(read(d, "one.csv"), read(d, "two.csv"), "{p}");
    }
}

#[test]
fn seeded_commands_are_byte_identical() {
    let w = workspace(30);
    let d = w.path();
    let synth = ["synth", "--seed", "7", "--images-per-identity", "1-3", "--label-noise", "0.1"];
    assert_eq!(ok(d, &synth), ok(d, &synth));
    for (out, log) in [("a.csv", "a.log"), ("b.csv", "b.log")] {
        ok(d, &["sample", "m.csv", "-p", "random", "--seed", "7", "--remove", "18", "--out", out, "--log", log]);
    }
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));
    assert_eq!(read(d, "a.log"), read(d, "b.log"));
    for out in ["s1.csv", "s2.csv"] {
        ok(d, &["single", "m.csv", "--group", "Asian", "--strategy", "rand", "--keep-fraction", "0.3", "--seed", "7", "--out", out]);
    }
    assert_eq!(read(d, "s1.csv"), read(d, "s2.csv"));
}

#[test]
fn metrics_from_accuracies() {
    let w = tempfile::tempdir().unwrap();
    let v = json(&ok(w.path(), &["metrics", "--accuracies", "96.67,94.88,94.22,93.38"]));
    assert!((v["std"].as_f64().unwrap() - 1.39).abs() < 0.01);
    assert!((v["ser"].as_f64().unwrap() - 1.99).abs() < 0.01);
    assert!((v["average"].as_f64().unwrap() - 94.79).abs() < 0.005);
    assert_eq!(v["per_group"]["African"], 96.67);
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["per_group", "average", "std", "ser", "flags"]);

    let perfect = json(&ok(w.path(), &["metrics", "--accuracies", "1.0,0.95", "--groups", "a,b"]));
    assert!(perfect["ser"].is_null());
    assert_eq!(perfect["flags"][0], "ser_infinite");
}

#[test]
fn metrics_from_pairs() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::write(d.join("o.csv"), "group,correct\nx,1\nx,1\nx,0\nx,1\ny,1\ny,0\n").unwrap();
    let v = json(&ok(d, &["metrics", "--pairs", "o.csv", "--mode", "outcomes", "--groups", "x,y"]));
    assert_eq!(v["per_group"]["x"], 75.0);
    assert_eq!(v["per_group"]["y"], 50.0);
    std::fs::write(
        d.join("s.csv"),
        "group,similarity,is_genuine\nx,0.9,1\nx,0.8,1\nx,0.2,0\nx,0.3,0\ny,0.5,1\ny,0.4,0\n",
    )
    .unwrap();
    let v = json(&ok(d, &["metrics", "--pairs", "s.csv", "--mode", "similarity", "--groups", "x,y"]));
    assert_eq!(v["per_group"]["x"], 100.0);
    assert_eq!(v["thresholds"]["y"], 0.45);
    std::fs::write(d.join("bad.csv"), "group,similarity,is_genuine\nx,0.9,1\ny,0.5,1\ny,0.4,0\n").unwrap();
    assert_eq!(code(d, &["metrics", "--pairs", "bad.csv", "--mode", "similarity", "--groups", "x,y"]), 1);
}

#[test]
fn pareto_marks_frontier() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::write(
        d.join("runs.csv"),
        "run_id,strategy,size,acc_a,acc_b\nr1,A,10,96,95\nr2,B,10,95,95\nr3,R,10,90,80\nr4,X,10,100,90\n",
    )
    .unwrap();
    let out = ok(d, &["pareto", "--runs", "runs.csv", "--bias", "std"]);
    let flags: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags, ["true", "true", "false", "false"]);
    ok(d, &["pareto", "--runs", "runs.csv", "--bias", "ser", "--out", "f.csv"]);
    let f = String::from_utf8(read(d, "f.csv")).unwrap();
    assert!(f.starts_with("run_id,strategy,size,acc_a,acc_b,on_frontier\n"));
    // r4 has a perfect group: infinite SER, never on the frontier.
    assert!(f.contains("r4,X,10,100,90,false"));
}

#[test]
fn score_exports() {
    let w = workspace(10);
    let d = w.path();
    let ids = ok(d, &["ids", "m.csv", "-p", "B"]);
    assert!(ids.starts_with("identity_id,group,ids_African,ids_Asian,ids_Caucasian,ids_Indian\n"));
    assert_eq!(ids.lines().count(), 41);
    let es = ok(d, &["es", "m.csv", "-p", "A", "--format", "csv"]);
    assert!(es.starts_with("group,African,Asian,Caucasian,Indian\n"));
    assert_eq!(es.lines().count(), 5);
    let es = json(&ok(d, &["es", "m.csv", "-p", "C"]));
    assert!(es.is_object());
    let s = json(&ok(d, &["summarize", "m.csv"]));
    assert_eq!(s["per_group"]["Indian"]["identities"], 10);
    let v = json(&ok(d, &["validate", "m.csv"]));
    assert_eq!(v["identities"], 40);
}

#[test]
fn scatter_writes_rows_and_correlations() {
    let w = workspace(10);
    let d = w.path();
    let manifest = String::from_utf8(read(d, "m.csv")).unwrap();
    let mut ext = String::from("image_id,score\n");
    for (i, line) in manifest.lines().skip(1).enumerate() {
        if i % 2 == 0 {
            let id = line.split(',').next().unwrap();
            ext.push_str(&format!("{id},{}\n", (i * 37 % 11) as f64 / 10.0));
        }
    }
    std::fs::write(d.join("q.csv"), ext).unwrap();
    let v = json(&ok(d, &["scatter", "m.csv", "--external", "q.csv", "--out", "sc.csv"]));
    assert!(v["skipped"].as_u64().unwrap() > 0);
    assert!(v["per_group"]["African"]["n"].as_u64().unwrap() > 0);
    let sc = String::from_utf8(read(d, "sc.csv")).unwrap();
    assert!(sc.starts_with("image_id,group,own_group_score,external_score\n"));
}

#[test]
fn equilibrium_reads_log_and_evolution() {
    let w = workspace(50);
    let d = w.path();
    // The run may stop early when a group would empty; the partial trace is
    // still written.
    let _ = run(d, &["sample", "m.csv", "-p", "A", "--remove", "120", "--log", "l.csv", "--evolution", "e.csv", "--out", "o.csv"]);
    let a = json(&ok(d, &["equilibrium", "--trace", "l.csv", "--epsilon", "0.05"]));
    let b = json(&ok(d, &["equilibrium", "--trace", "e.csv", "--epsilon", "0.05"]));
    assert_eq!(a["equilibrium_step"], b["equilibrium_step"]);
    assert!(a["equilibrium_step"].is_u64());
    assert_eq!(code(d, &["equilibrium", "--trace", "e.csv", "--epsilon", "0"]), 1);
}

#[test]
fn single_group_strategies() {
    let w = workspace(10);
    let d = w.path();
    let v = json(&ok(d, &["single", "m.csv", "--group", "Asian", "--strategy", "max", "--keep-fraction", "0.5", "--out", "o.csv"]));
    assert_eq!(v["identities_per_group"], serde_json::json!([10, 5, 10, 10]));
    assert_eq!(code(d, &["single", "m.csv", "--group", "Asian", "--strategy", "rand", "--keep-fraction", "0.5", "--out", "o.csv"]), 2);
    assert_eq!(code(d, &["single", "m.csv", "--group", "Asian", "--strategy", "max", "--keep-fraction", "1.5", "--out", "o.csv"]), 1);
    assert_eq!(code(d, &["single", "m.csv", "--group", "Asian", "--strategy", "median", "--keep-fraction", "0.5", "--out", "o.csv"]), 2);
}

#[test]
fn synth_config_file() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"seed": 7, "groups": ["a", "b", "c"], "identities_per_group": [5, 6, 7],
            "images_per_identity": [1, 3], "concentration": [1.0, 5.0, 9.0], "label_noise": 0.1}"#,
    )
    .unwrap();
    ok(d, &["synth", "--config", "cfg.json", "--out", "x.csv"]);
    let v = json(&ok(d, &["validate", "x.csv"]));
    assert_eq!(v["identities_per_group"], serde_json::json!({"a": 5, "b": 6, "c": 7}));
    assert_eq!(code(d, &["synth", "--config", "cfg.json", "--seed", "3"]), 2);
    assert_eq!(code(d, &["synth"]), 2);
    assert_eq!(code(d, &["synth", "--seed", "1", "--concentration", "1,2"]), 2);
}

#[test]
fn exit_codes() {
    let w = workspace(5);
    let d = w.path();
    assert_eq!(code(d, &[]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(code(d, &["sample", "m.csv", "-p", "A", "--remove", "1", "--out", "o.csv", "--bogus"]), 2);
    assert_eq!(code(d, &["sample", "m.csv", "-p", "Z", "--remove", "1", "--out", "o.csv"]), 2);
    assert_eq!(code(d, &["sample", "m.csv", "-p", "random", "--remove", "1", "--out", "o.csv"]), 2);
    assert_eq!(code(d, &["sample", "m.csv", "-p", "A", "--remove", "1", "--target-size", "3", "--out", "o.csv"]), 2);
    assert_eq!(code(d, &["sample", "missing.csv", "-p", "A", "--remove", "1", "--out", "o.csv"]), 1);
    assert_eq!(code(d, &["sample", "m.csv", "-p", "C", "--remove", "20", "--out", "o.csv"]), 1);
    assert_eq!(code(d, &["metrics", "--accuracies", "0.9"]), 2);
    assert_eq!(code(d, &["metrics"]), 2);

    std::fs::write(d.join("bad.csv"), "image_id,identity_id,group,score_a,score_b\ni1,x,a,0.5,0.4\n").unwrap();
    let out = run(d, &["validate", "bad.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(code(d, &["validate", "bad.csv", "--permissive"]), 1, "no rows left: empty manifest");
    std::fs::write(
        d.join("mixed.csv"),
        "image_id,identity_id,group,score_a,score_b\ni1,x,a,0.6,0.4\ni2,x,b,0.5,0.5\n",
    )
    .unwrap();
    assert_eq!(code(d, &["validate", "mixed.csv", "--permissive"]), 1);
}

#[test]
fn help_and_version_everywhere() {
    let d = PathBuf::from(".");
    let subcommands = [
        "validate", "summarize", "ids", "es", "relabel", "sample", "single", "metrics", "pareto",
        "scatter", "synth", "equilibrium",
    ];
    for s in subcommands {
        let help = run(&d, &[s, "--help"]);
        assert_eq!(help.status.code(), Some(0), "{s} --help");
        assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
        let version = run(&d, &[s, "--version"]);
        assert_eq!(version.status.code(), Some(0), "{s} --version");
        assert!(String::from_utf8_lossy(&version.stdout).contains(env!("CARGO_PKG_VERSION")));
    }
    assert_eq!(code(&d, &["--version"]), 0);
}

#[test]
fn failed_run_keeps_previous_output() {
    let w = workspace(5);
    let d = w.path();
    std::fs::write(d.join("o.csv"), "keep me").unwrap();
    assert_eq!(code(d, &["sample", "m.csv", "-p", "A", "--remove", "19", "--out", "o.csv"]), 1);
    assert_eq!(read(d, "o.csv"), b"keep me");
}
