//! Exercises the CLI surface end to end: fixture, partition, train (both
//! transports), eval, bound, count-comm, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn glasu(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glasu"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_cli_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = glasu(
        &[
            "fixture", "--blocks", "2", "--nodes-per-block", "12", "--p-in", "0.5", "--p-out",
            "0.08", "--dim", "4", "--seed", "7", "--out", "data",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    assert!(dir.join("data/edges.txt").exists());

    let out = glasu(
        &["partition", "--dataset", "data", "-m", "2", "--edge-keep-prob", "0.8", "--seed", "3", "--out", "shards"],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    assert!(dir.join("shards/client_0/features.csv").exists());
    assert!(dir.join("shards/client_1/edges.txt").exists());

    let out = glasu(
        &[
            "train", "--dataset", "data", "-m", "2", "-l", "2", "-k", "1", "--hidden-dim", "8",
            "-s", "6", "--fanout", "2", "-t", "10", "-q", "2", "--eta", "0.2", "--seed", "5",
            "--out-dir", "run", "--save-models", "models",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("final test accuracy"), "{text}");
    assert!(dir.join("run/loss_history.csv").exists());
    assert!(dir.join("run/report.json").exists());
    assert!(dir.join("models/client_0.bin").exists());

    // TCP transport produces the same CSV bytes for the same seed.
    let out = glasu(
        &[
            "train", "--dataset", "data", "-m", "2", "-l", "2", "-k", "1", "--hidden-dim", "8",
            "-s", "6", "--fanout", "2", "-t", "10", "-q", "2", "--eta", "0.2", "--seed", "5",
            "--transport", "tcp", "--port", "0", "--out-dir", "run_tcp",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    let a = std::fs::read(dir.join("run/loss_history.csv")).unwrap();
    let b = std::fs::read(dir.join("run_tcp/loss_history.csv")).unwrap();
    assert_eq!(a, b, "transports disagree through the CLI");

    let out = glasu(
        &[
            "eval", "--dataset", "data", "-m", "2", "-l", "2", "-k", "1", "--hidden-dim", "8",
            "-s", "6", "--fanout", "2", "--seed", "5", "--models", "models",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("test accuracy"));

    let out = glasu(
        &[
            "bound", "--g-ell", "2", "--l-ell", "2", "--g-f", "1", "--l-f", "1", "-m", "2",
            "-q", "1", "-t", "1000", "-s", "16", "-d", "32", "--delta-l", "1.5",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("c0: 4"), "{text}");
    assert!(text.contains("max_step_size"), "{text}");

    let out = glasu(
        &["count-comm", "-l", "4", "-k", "2", "-m", "3", "-t", "2", "-q", "4"],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("repr_upload: 12"), "{text}");
    assert!(text.contains("repr_broadcast: 4"), "{text}");

    // Exit codes: missing seed and bad dataset path.
    let out = glasu(&["train", "--dataset", "data", "-m", "2"], dir);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let out = glasu(
        &["train", "--dataset", "missing_dir", "-m", "2", "--seed", "1"],
        dir,
    );
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}

#[test]
fn preset_flags_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = glasu(
        &[
            "fixture", "--blocks", "2", "--nodes-per-block", "10", "--p-in", "0.5", "--p-out",
            "0.1", "--dim", "4", "--seed", "1", "--out", "data",
        ],
        dir,
    );
    assert!(out.status.success());
    let out = glasu(
        &[
            "train", "--dataset", "data", "-m", "2", "-l", "2", "--hidden-dim", "6", "-s", "5",
            "--fanout", "2", "-t", "4", "--eta", "0.2", "--seed", "2", "--preset", "standalone",
            "--out-dir", "run",
        ],
        dir,
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("client 0 test accuracy"), "{text}");
    assert!(text.contains("messages: 0"), "{text}");
}
