use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tars-lab"));
    c.env_remove("TARS_LAB_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(
        String::from_utf8(out.stdout.clone())
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .trim(),
    )
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["ablate", "--axis", "gamma"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(
        run(&["train", "--data", missing.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["gen-data", "--rho", "2.0", "--out", out])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[world]\nrho = 0.6\nn_objects = 9\n\n[data]\nn_train = 20\n",
    )
    .unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--rho",
        "0.4",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    let dir = run_dir(&out);
    let m = manifest(&dir);
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["config"]["world"]["rho"], 0.4);
    assert_eq!(m["config"]["world"]["n_objects"], 9);
    assert_eq!(m["config"]["world"]["n_bias_pairs"], 2);
    assert_eq!(m["config"]["data"]["n_train"], 20);
    let lines = std::fs::read_to_string(dir.join("dataset.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, 20);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[wrld]\nrho = 0.6\n").unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_deterministic_and_honours_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = || {
        let out = bin()
            .args(["gen-data", "--n-train", "25", "--seed", "3"])
            .env("TARS_LAB_OUT", tmp.path())
            .output()
            .unwrap();
        run_dir(&out)
    };
    let a = gen();
    let b = gen();
    assert_ne!(a, b);
    assert!(a.starts_with(tmp.path()) && b.starts_with(tmp.path()));
    for f in ["world.json", "dataset.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn train_then_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let data = run_dir(&run(&[
        "gen-data",
        "--n-train",
        "30",
        "--seed",
        "1",
        "--out",
        root,
    ]));
    let train = run_dir(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "2",
        "--d-model",
        "8",
        "--d-hidden",
        "8",
        "--out",
        root,
    ]));
    assert_eq!(manifest(&train)["config"]["train"]["epochs"], 2);
    let log = std::fs::read_to_string(train.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 61);
    let ck = train.join("checkpoint-epoch2.bin");
    assert!(train.join("checkpoint-epoch1.bin").exists() && ck.exists());
    assert!(train.join("checkpoints.json").exists());

    let out = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--n-eval",
        "12",
        "--out",
        root,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let metrics: Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(metrics["n_eval"], 12);
    let eval_dir = PathBuf::from(stdout.lines().last().unwrap());
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(saved, metrics);
    for k in [
        "chair",
        "cover",
        "hal_rate",
        "spurious_rate",
        "pope_acc",
        "pope_prec",
    ] {
        let v = metrics[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
}

#[test]
fn perturb_preview_writes_one_line_per_example() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "perturb-preview",
        "--n",
        "7",
        "--mode",
        "replace",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    let dir = run_dir(&out);
    let text = std::fs::read_to_string(dir.join("preview.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 7);
    for line in text.lines() {
        let _: Value = serde_json::from_str(line).unwrap();
    }
}

#[test]
fn gradcheck_succeeds() {
    let out = run(&["gradcheck", "--models", "5"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn shipped_presets_load() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = run(&[
            "gen-data",
            "--config",
            path.to_str().unwrap(),
            "--n-train",
            "3",
            "--out",
            tmp.path().to_str().unwrap(),
        ]);
        run_dir(&out);
        seen += 1;
    }
    assert!(seen >= 3);
}
