use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "corpus.signs=40",
    "--set",
    "corpus.instances_per_sign=2",
    "--set",
    "corpus.splits=[0.6,0.2,0.2]",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.dead_code_interval=4",
    "--set",
    "probe.epochs=2",
];

fn vq_sign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vq-sign"))
        .args(SMALL)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vq-sign")
}

fn ok(args: &[&str]) -> Output {
    let out = vq_sign(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn corpus(dir: &Path) -> PathBuf {
    ok(&["gen", "--out", s(dir)]);
    dir.join("corpus.slds")
}

fn log_steps(path: &Path) -> Vec<u64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect()
}

#[test]
fn gen_is_deterministic_and_records_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = corpus(&dir.path().join("a"));
    let b = corpus(&dir.path().join("b"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let cfg = std::fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(cfg.contains("signs = 40"), "{cfg}");
    assert!(dir.path().join("a/version.txt").exists());

    ok(&["gen", "--out", s(&dir.path().join("c")), "--seed", "9"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(dir.path().join("c/corpus.slds")).unwrap());
}

#[test]
fn bad_arguments_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = vq_sign(&["gen", "--out", s(dir.path()), "--splits", "0.5,0.4,0.4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("splits"));
    assert_eq!(vq_sign(&["--set", "train.stepz=3", "gen"]).status.code(), Some(2));
    assert_eq!(vq_sign(&["--preset", "huge", "gen"]).status.code(), Some(2));
    assert_eq!(vq_sign(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_and_version_succeed() {
    let out = ok(&["--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ablation"));
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_or_corrupt_files_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.slds");
    let out = vq_sign(&["train", "--dataset", s(&missing), "--out", s(dir.path()), "--steps", "4"]);
    assert_eq!(out.status.code(), Some(3));

    let junk = dir.path().join("junk.slds");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let out = vq_sign(&["train", "--dataset", s(&junk), "--out", s(dir.path()), "--steps", "4"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_resume_eval_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"));
    let run = dir.path().join("run");
    let common = ["--dataset", s(&data), "--out", s(&run), "--variant", "pss", "--seed", "2"];

    ok(&[&["train"][..], &common, &["--steps", "8"]].concat());
    assert_eq!(log_steps(&run.join("train_log.jsonl")), (0..8).collect::<Vec<_>>());
    ok(&[&["train"][..], &common, &["--steps", "12", "--resume"]].concat());
    assert_eq!(log_steps(&run.join("train_log.jsonl")), (0..12).collect::<Vec<_>>());

    let ckpt = std::fs::read(run.join("checkpoint.json")).unwrap();
    let eval = ["eval", "--dataset", s(&data), "--out", s(&run), "--variant", "pss", "--set", "train.seed=2"];
    ok(&eval);
    ok(&eval);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("variant,seed,mse_train,mse_test"));
    assert_eq!(lines[1], lines[2]);
    assert!(lines[1].starts_with("pss,2,"));
    assert!(run.join("report.json").exists());

    ok(&["probe", "--dataset", s(&data), "--out", s(&run), "--variant", "pss"]);
    let probe: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["variant"], "pss");
    assert_eq!(std::fs::read(run.join("checkpoint.json")).unwrap(), ckpt);

    let wrong = vq_sign(&["eval", "--dataset", s(&data), "--out", s(&run), "--variant", "full"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn parallel_ablation_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"));
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--set",
            "train.steps=6",
            "--set",
            "ablation.variants=[\"baseline\",\"full\"]",
            "ablation",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--seeds",
            "0,1",
            "--jobs",
            jobs,
        ]);
        out
    };
    let seq = run("seq", "1");
    let par = run("par", "2");
    let a = std::fs::read_to_string(seq.join("ablation.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(par.join("ablation.csv")).unwrap());
    assert_eq!(a.lines().count(), 5);
    for member in ["baseline-seed0", "baseline-seed1", "full-seed0", "full-seed1"] {
        let ck = |root: &Path| std::fs::read(root.join(member).join("checkpoint.json")).unwrap();
        assert_eq!(ck(&seq), ck(&par), "{member}");
    }
    assert!(std::fs::read_to_string(seq.join("table.txt")).unwrap().contains("full"));
}
