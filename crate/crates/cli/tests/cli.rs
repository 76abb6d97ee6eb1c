use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "hidden = 8\ntime_dim = 8\nframe_dim = 4\nattn_dim = 4\ndiffusion_steps = 10\nsteps = 6\n\
val_every = 3\ntrain_records = 6\nval_records = 3\ntest_records = 2\nsamples = 2\nbeta_increasing = true\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equiada"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(dir, &["simulate", "--config", "tiny.cfg", "--out", "data"]);
    assert!(ok(
        dir,
        &[
            "pretrain",
            "--config",
            "tiny.cfg",
            "--data",
            "data",
            "--out",
            "base.ckpt"
        ]
    )
    .starts_with("best_val_loss\t"));
    ok(
        dir,
        &[
            "finetune",
            "--base",
            "base.ckpt",
            "--config",
            "tiny.cfg",
            "--data",
            "data",
            "--out",
            "ad.ckpt",
        ],
    );

    ok(
        dir,
        &[
            "sample",
            "--ckpt",
            "base.ckpt",
            "--adapter",
            "ad.ckpt",
            "--data",
            "data",
            "--index",
            "1",
            "--seed",
            "4",
            "--out",
            "a.tsv",
        ],
    );
    ok(
        dir,
        &[
            "sample",
            "--ckpt",
            "base.ckpt",
            "--adapter",
            "ad.ckpt",
            "--data",
            "data",
            "--index",
            "1",
            "--seed",
            "4",
            "--out",
            "b.tsv",
        ],
    );
    let a = std::fs::read_to_string(dir.join("a.tsv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.join("b.tsv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 5 * 8);
    assert_eq!(a.lines().next(), Some("node\tframe\tx\ty\tz"));

    let report = ok(
        dir,
        &[
            "eval",
            "--base",
            "base.ckpt",
            "--adapter",
            "ad.ckpt",
            "--data",
            "data",
            "--report",
            "r.tsv",
        ],
    );
    assert_eq!(report, std::fs::read_to_string(dir.join("r.tsv")).unwrap());
    let keys: Vec<&str> = report.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        keys,
        [
            "base.pretrain.marginal",
            "base.finetune.ade",
            "base.finetune.fde",
            "fused.finetune.ade",
            "fused.finetune.fde",
            "detached.pretrain.marginal"
        ]
    );
    let value = |k: &str| {
        report
            .lines()
            .find(|l| l.starts_with(k))
            .unwrap()
            .split('\t')
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert_eq!(value("base.pretrain.marginal"), value("detached.pretrain.marginal"));

    let audit = ok(
        dir,
        &["audit", "--ckpt", "base.ckpt", "--adapter", "ad.ckpt", "--trials", "3"],
    );
    let names: Vec<&str> = audit.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["base", "coupled.frame", "fused"]);
    assert!(audit.lines().all(|l| l.split('\t').nth(1) == Some("PASS")));
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(
        dir,
        &["pretrain", "--config", "missing.cfg", "--data", "d", "--out", "x"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));

    std::fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = run(dir, &["audit", "--ckpt", "bad.ckpt"]);
    assert!(!out.status.success());
    assert!(!run(dir, &["frobnicate"]).status.success());
}
