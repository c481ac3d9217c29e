//! End-to-end CLI tests: subcommand wiring, file outputs, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn mixnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixnorm"))
        .args(args)
        .output()
        .expect("spawn mixnorm")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        "mixnorm-config v1\nn_per_class 6\nval_per_class 2\nepochs 3\nbatch_size 16\n",
    )
    .unwrap();
    let model = dir.path().join("model.txt");

    let out = mixnorm(&[
        "train",
        "--config",
        path_str(&config),
        "--seed",
        "11",
        "--out",
        path_str(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.exists());

    // training is deterministic per seed
    let model2 = dir.path().join("model2.txt");
    let out = mixnorm(&[
        "train",
        "--config",
        path_str(&config),
        "--seed",
        "11",
        "--out",
        path_str(&model2),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&model).unwrap(),
        std::fs::read_to_string(&model2).unwrap()
    );

    let csv = dir.path().join("adapt.csv");
    let out = mixnorm(&[
        "adapt",
        "--model",
        path_str(&model),
        "--method",
        "mixnorm_fixed_affine",
        "--stream",
        "single:contrast:2",
        "--batch-size",
        "4",
        "--seed",
        "3",
        "--out",
        path_str(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,stream,batch_size,seed,n_samples,error_rate,contrast\n"));
    assert_eq!(text.lines().count(), 2);

    let sweep_dir = dir.path().join("sweep");
    let sweep_args = [
        "sweep",
        "--model",
        path_str(&model),
        "--methods",
        "source_only,online_bn",
        "--batch-sizes",
        "1,8",
        "--streams",
        "single:blur:1",
        "--seeds",
        "5",
        "--out-dir",
        path_str(&sweep_dir),
    ];
    let out = mixnorm(&sweep_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = sweep_dir.join("results.csv");
    let first = std::fs::read_to_string(&results).unwrap();
    assert_eq!(first.lines().count(), 1 + 2 * 2);

    // sweeps replay byte-identically
    let out = mixnorm(&sweep_args);
    assert!(out.status.success());
    assert_eq!(first, std::fs::read_to_string(&results).unwrap());

    for (fmt, probe) in [("csv", "method,stream"), ("table", "source_only"), ("svg", "<svg")] {
        let rendered = dir.path().join(format!("report.{fmt}"));
        let out = mixnorm(&[
            "report",
            "--in",
            path_str(&sweep_dir),
            "--format",
            fmt,
            "--out",
            path_str(&rendered),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(std::fs::read_to_string(&rendered).unwrap().contains(probe));
    }

    let tuned = dir.path().join("tune.txt");
    let out = mixnorm(&[
        "tune",
        "--model",
        path_str(&model),
        "--method",
        "mixnorm_fixed_affine",
        "--out",
        path_str(&tuned),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tune_text = std::fs::read_to_string(&tuned).unwrap();
    assert!(tune_text.contains("split single:gaussian_noise:5"));
    assert!(tune_text.contains("best m="));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("missing.txt");
    // unknown method
    let out = mixnorm(&[
        "adapt",
        "--model",
        path_str(&model),
        "--method",
        "nope",
        "--stream",
        "mixed:1",
        "--batch-size",
        "1",
        "--seed",
        "0",
        "--out",
        path_str(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // missing required flag (clap)
    let out = mixnorm(&["train", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    // malformed config file
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "mixnorm-config v1\nwat 1\n").unwrap();
    let out = mixnorm(&[
        "train",
        "--config",
        path_str(&cfg),
        "--seed",
        "1",
        "--out",
        path_str(&dir.path().join("m.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // report over an empty directory
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = mixnorm(&[
        "report",
        "--in",
        path_str(&empty),
        "--format",
        "csv",
        "--out",
        path_str(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
