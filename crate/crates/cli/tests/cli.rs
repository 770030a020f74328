//! Exit codes, error messages and output files of the `stp` binary.

use std::path::Path;
use std::process::{Command, Output};

fn stp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn trained(dir: &Path) {
    assert_eq!(
        code(&stp(
            dir,
            &[
                "synth",
                "--entries",
                "200",
                "--seed",
                "1",
                "--out",
                "data.csv"
            ]
        )),
        0
    );
    let out = stp(
        dir,
        &[
            "train",
            "--data",
            "data.csv",
            "--m",
            "4",
            "--epochs",
            "3",
            "--batch",
            "50",
            "--out",
            "model.bin",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stp(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&stp(dir.path(), &["train"])), 1);
    std::fs::write(dir.path().join("d.csv"), "0,0,1.0\n1,1,2.0\n").unwrap();
    let out = stp(
        dir.path(),
        &["train", "--data", "d.csv", "--r1", "0", "--out", "m.bin"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("invalid configuration"));
    assert!(!dir.path().join("m.bin").exists());
}

#[test]
fn malformed_data_exits_with_two_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "0,1,0.5\n1,x,0.2\n").unwrap();
    let out = stp(
        dir.path(),
        &["train", "--data", "bad.csv", "--out", "m.bin"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.csv:2"), "{}", stderr(&out));

    let out = stp(
        dir.path(),
        &[
            "predict",
            "--model",
            "missing.bin",
            "--indices",
            "bad.csv",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.bin"));

    std::fs::write(dir.path().join("junk.bin"), b"not a model").unwrap();
    let out = stp(
        dir.path(),
        &[
            "eval", "--model", "junk.bin", "--test", "bad.csv", "--out", "e.csv",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_exits_with_three_and_keeps_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&stp(
            dir.path(),
            &["synth", "--entries", "100", "--out", "data.csv"]
        )),
        0
    );
    let out = stp(
        dir.path(),
        &[
            "train", "--data", "data.csv", "--m", "3", "--epochs", "3", "--lr", "1e300", "--out",
            "m.bin",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(dir.path().join("m.bin.snapshot.bin").exists());
    assert!(!dir.path().join("m.bin").exists());
}

#[test]
fn query_commands_write_one_row_per_index() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    std::fs::write(dir.path().join("q.csv"), "0,0\n1,2\n99999,0\n").unwrap();
    assert_eq!(
        code(&stp(
            dir.path(),
            &[
                "predict",
                "--model",
                "model.bin",
                "--indices",
                "q.csv",
                "--out",
                "p.csv"
            ]
        )),
        0
    );
    let pred = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let rows: Vec<&str> = pred.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].ends_with("mean,variance,unseen"));
    assert!(rows[3].ends_with(",1"));

    assert_eq!(
        code(&stp(
            dir.path(),
            &[
                "score-links",
                "--model",
                "model.bin",
                "--indices",
                "q.csv",
                "--out",
                "s.csv"
            ]
        )),
        0
    );
    assert_eq!(
        std::fs::read_to_string(dir.path().join("s.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    assert_eq!(
        code(&stp(
            dir.path(),
            &[
                "export-factors",
                "--model",
                "model.bin",
                "--out-dir",
                "f",
                "--pca"
            ]
        )),
        0
    );
    let header = std::fs::read_to_string(dir.path().join("f/mode0.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("pc1,pc2"));
}

#[test]
fn every_run_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let text = std::fs::read_to_string(dir.path().join("model.bin.manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["flags"]["epochs"], 3);
    assert!(dir.path().join("model.bin.log.csv").exists());
}
