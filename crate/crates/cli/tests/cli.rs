use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deepbroadcast"));
    c.env_remove("DEEPBROADCAST_DATA");
    c
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A two-user case 2 shrunk to train in about a second.
fn tiny_sets(out: &Path) -> Vec<String> {
    [
        "model.c1=4",
        "model.fusion_hidden=16",
        "model.decoder_hidden=16",
        "model.executor_hidden=8",
        "model.query_hidden=4",
        "trainer.epochs=1",
        "trainer.batch_size=16",
        "eval.grid=[0.0, 10.0]",
        "eval.repeats=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir=\"{}\"", out.display())])
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

fn run_dirs(parent: &Path) -> Vec<PathBuf> {
    fs::read_dir(parent).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect()
}

#[test]
fn unknown_set_key_exits_2_and_names_the_key() {
    let o = bin()
        .args(["train", "--preset", "case3", "--set", "trainer.sed=7", "--synthetic", "8:8"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("trainer.sed"), "{}", stderr(&o));
}

#[test]
fn invalid_values_and_presets_exit_2() {
    for args in [
        vec!["train", "--preset", "case9"],
        vec!["train", "--preset", "case3", "--set", "trainer.batch_size=0"],
        vec!["train", "--preset", "case3", "--set", "users.2.channel.rician_a=-1"],
        vec!["train"],
        vec!["sweep", "--ckpt", "nowhere", "--grid", "5:-5:2"],
    ] {
        let o = bin().args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("error"), "{args:?}: {}", stderr(&o));
    }
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["train", "--preset", "case2"])
        .args(tiny_sets(dir.path()))
        .env("DEEPBROADCAST_DATA", dir.path().join("absent"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent") && stderr(&o).contains("fetch-data"), "{}", stderr(&o));
}

#[test]
fn train_sweep_compare_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let o = bin()
        .args(["train", "--preset", "case2", "--synthetic", "64:32", "--set", "trainer.seed=7"])
        .args(tiny_sets(&out))
        .args(["--variant", "deepbroadcast", "--variant", "mtoc"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("experiment.toml")).unwrap();
    assert!(resolved.contains("seed = 7"), "{resolved}");

    let mut csvs = Vec::new();
    for variant in ["deepbroadcast", "mtoc"] {
        let runs = run_dirs(&out.join(variant));
        assert_eq!(runs.len(), 1);
        let run = &runs[0];
        for f in ["latest.ckpt", "metrics.jsonl", "train_config.json", "experiment.toml"] {
            assert!(run.join(f).is_file(), "{variant}: {f}");
        }
        let o = bin()
            .args(["sweep", "--ckpt"])
            .arg(run)
            .args(["--grid", "-5:19:2", "--repeats", "1", "--synthetic", "64:32"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let sweep = run.join("sweep");
        let csv = sweep.join("sweep.csv");
        let text = fs::read_to_string(&csv).unwrap();
        // 13 grid points for each of the two users
        assert_eq!(text.lines().count(), 1 + 2 * 13, "{text}");
        assert!(sweep.join("eval_config.toml").is_file());
        assert!(fs::read_dir(&sweep).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
        csvs.push(csv);
    }

    let o = bin().arg("compare").args(&csvs).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("DeepBroadcast") && stdout(&o).contains("MTOC"), "{}", stdout(&o));
    assert!(dir.path().join("comparison.md").is_file());

    let plots = dir.path().join("plots");
    let o = bin().arg("plot").args(&csvs).arg("--out").arg(&plots).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(plots.join("user0_task1_accuracy.svg").is_file());
}

#[test]
fn eval_prints_requested_snrs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let o = bin()
        .args(["train", "--preset", "case2", "--synthetic", "32:16", "--variant", "mtoc"])
        .args(tiny_sets(&out))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let run = &run_dirs(&out.join("mtoc"))[0];
    let o = bin()
        .args(["eval", "--ckpt"])
        .arg(run.join("latest.ckpt"))
        .args(["--snr", "-3", "--snr", "inf", "--repeats", "1", "--synthetic", "32:16"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 2 * 2, "{text}");
    assert!(text.contains("\t-3\t") && text.contains("\tinf\t"), "{text}");
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let o = bin()
        .args(["train", "--preset", "case2", "--synthetic", "32:0", "--variant", "mtoc"])
        .args(tiny_sets(&out))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let run = &run_dirs(&out.join("mtoc"))[0];
    let o = bin()
        .args(["train", "--synthetic", "32:0", "--set", "trainer.epochs=2", "--resume"])
        .arg(run)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch 2"), "{}", stdout(&o));
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // anything beyond the epoch budget is refused
    let o = bin()
        .args(["train", "--synthetic", "32:0", "--set", "trainer.seed=99", "--resume"])
        .arg(run)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let o = bin()
        .args(["selftest", "--symbols", "200000", "--kl-samples", "200000"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 4, "{}", stdout(&o));
}
