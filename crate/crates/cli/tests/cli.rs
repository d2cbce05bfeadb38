use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn deepcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepcl"))
        .current_dir(dir)
        .env_remove("DEEPCL_DATA_DIR")
        .env_remove("DEEPCL_MNIST_MIRROR")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn train_fixture(dir: &Path, extra: &[&str]) -> Output {
    let data = fixtures();
    let mut args = vec!["train", "--data-dir", data.to_str().unwrap()];
    args.extend_from_slice(extra);
    deepcl(dir, &args)
}

fn log_events(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepcl(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    for sub in ["fetch-data", "train", "eval", "sweep", "export-sensing", "gradcheck"] {
        assert!(stdout(&out).contains(sub), "{sub}");
    }
    let train = stdout(&deepcl(dir.path(), &["train", "--help"]));
    for flag in ["--rate", "--epochs", "--batch", "--lr", "--seed", "--threads", "--config", "[default: 0.0025]", "[default: 64]"] {
        assert!(train.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_fixture(dir.path(), &["--rate", "1.5"])), 1);
    assert_eq!(code(&train_fixture(dir.path(), &["--rate", "0"])), 1);
    assert_eq!(code(&train_fixture(dir.path(), &[])), 1);
    assert_eq!(code(&deepcl(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&deepcl(dir.path(), &["--threads", "0", "gradcheck"])), 1);
    assert!(!dir.path().join("model.bin").exists());
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepcl(dir.path(), &["train", "--rate", "0.25", "--data-dir", "nowhere"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fetch-data"));
}

#[test]
fn train_smoke_writes_model_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_fixture(dir.path(), &["--rate", "0.25", "--epochs", "3", "--batch", "16", "--seed", "7", "--out", "m.bin"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("m.bin").is_file());
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("epoch ").count(), 3);

    let events = log_events(&dir.path().join("m.log.jsonl"));
    assert_eq!(events[0]["event"], "config");
    assert_eq!(events[0]["train"]["epochs"], 3);
    assert_eq!(events[0]["sensing"]["m"], 196);
    let losses: Vec<f64> =
        events.iter().filter(|e| e["event"] == "epoch").map(|e| e["report"]["mean_loss"].as_f64().unwrap()).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert_eq!(events.last().unwrap()["event"], "done");
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_fixture(dir.path(), &["--rate", "0.25", "--epochs", "50", "--batch", "16", "--seed", "7", "--lr", "1e8"]);
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("model.bin").exists());
    assert_eq!(log_events(&dir.path().join("model.log.jsonl")).last().unwrap()["event"], "aborted");
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "rate = 0.05\nepochs = 2\nbatch_size = 32\nseed = 4\n").unwrap();
    let out = train_fixture(dir.path(), &["--config", "run.toml", "--epochs", "1", "--out", "m.bin"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = &log_events(&dir.path().join("m.log.jsonl"))[0];
    assert_eq!(config["sensing"]["m"], 39);
    assert_eq!(config["train"]["epochs"], 1);
    assert_eq!(config["train"]["batch_size"], 32);
    assert_eq!(config["train"]["seed"], 4);
    assert_eq!(config["train"]["learning_rate"], 0.0025);

    std::fs::write(dir.path().join("bad.toml"), "learning_rte = 1\n").unwrap();
    assert_eq!(code(&train_fixture(dir.path(), &["--config", "bad.toml", "--rate", "0.1"])), 1);
}

#[test]
fn checkpoint_and_resume_match_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--rate", "0.1", "--batch", "16", "--seed", "3"];
    let straight = train_fixture(dir.path(), &[&common[..], &["--epochs", "3", "--out", "a.bin"]].concat());
    assert_eq!(code(&straight), 0);
    let first = train_fixture(dir.path(), &[&common[..], &["--epochs", "1", "--out", "tmp.bin", "--checkpoint", "run.ckpt"]].concat());
    assert_eq!(code(&first), 0);
    let resumed = train_fixture(dir.path(), &["--resume", "run.ckpt", "--epochs", "3", "--out", "b.bin"]);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(std::fs::read(dir.path().join("a.bin")).unwrap(), std::fs::read(dir.path().join("b.bin")).unwrap());
}

#[test]
fn export_sensing_and_reattach() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures();
    let data = data.to_str().unwrap();
    assert_eq!(code(&train_fixture(dir.path(), &["--rate", "0.01", "--epochs", "1", "--out", "p.bin"])), 0);

    let out = deepcl(dir.path(), &["export-sensing", "--model", "p.bin", "--csv", "s.csv", "--out", "s.bin", "--inference", "inf.bin"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("8 x 784"));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().all(|l| l.split(',').count() == 785));

    let whole = deepcl(dir.path(), &["eval", "--data-dir", data, "--model", "p.bin", "--json"]);
    let split = deepcl(dir.path(), &["eval", "--data-dir", data, "--model", "inf.bin", "--sensing", "s.bin", "--json"]);
    let parse = |o: &Output| serde_json::from_str::<serde_json::Value>(stdout(o).trim()).unwrap();
    assert_eq!(parse(&whole)["wrong"], parse(&split)["wrong"]);
    assert_eq!(code(&deepcl(dir.path(), &["eval", "--data-dir", data, "--model", "inf.bin"])), 1);
}

#[test]
fn export_sensing_rejects_baseline() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_fixture(dir.path(), &["--rate", "0.25", "--epochs", "1", "--kind", "baseline", "--out", "b.bin"])), 0);
    let out = deepcl(dir.path(), &["export-sensing", "--model", "b.bin", "--csv", "s.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported operation"));
    assert!(!dir.path().join("s.csv").exists());
}

#[test]
fn sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures();
    let run = |tag: &str| {
        let (csv, json) = (format!("{tag}.csv"), format!("{tag}.json"));
        let args = [
            "sweep", "--data-dir", data.to_str().unwrap(), "--rates", "0.25,0.1,0.05,0.01", "--kinds", "proposed,baseline",
            "--epochs", "1", "--csv", &csv, "--json", &json,
        ];
        assert_eq!(code(&deepcl(dir.path(), &args)), 0);
        (std::fs::read(dir.path().join(csv)).unwrap(), std::fs::read_to_string(dir.path().join(json)).unwrap())
    };
    let (a, json) = run("a");
    let (b, _) = run("b");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 9);
    let meta: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(meta["metadata"]["reference"].as_array().unwrap().len(), 4);
    assert_eq!(meta["metadata"]["train_config"]["epochs"], 1);
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let dir = tempfile::tempdir().unwrap();
    let ok = deepcl(dir.path(), &["gradcheck", "--samples", "24"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("conv2d"));
    let bad = deepcl(dir.path(), &["gradcheck", "--samples", "24", "--inject-fault"]);
    assert_ne!(code(&bad), 0);
    assert!(stdout(&bad).contains("FAIL"));
}
