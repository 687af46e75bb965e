use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rationale-forge"));
    c.env_remove("RATIONALE_FORGE_SEED");
    c
}

const SMALL: [&str; 10] = [
    "--train-size",
    "64",
    "--dev-size",
    "16",
    "--test-size",
    "8",
    "--annotated-size",
    "16",
    "--epochs",
    "2",
];

#[test]
fn gen_data_train_eval_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = bin()
        .arg("gen-data")
        .args(SMALL)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "train.jsonl",
        "dev.jsonl",
        "test.jsonl",
        "annotated.jsonl",
        "manifest.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let out = bin()
        .args(["train", "--epochs", "2", "--corpus-dir"])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let eval = || {
        bin()
            .args(["eval", "--config"])
            .arg(run.join("config.json"))
            .arg("--checkpoint")
            .arg(run.join("checkpoint_best.json"))
            .output()
            .unwrap()
    };
    let (a, b) = (eval(), eval());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("split=annotated"));

    let out = bin()
        .args([
            "diagnose",
            "--realized",
            "1.0",
            "--value",
            "10000.0",
            "--q-value",
            "9999.4",
        ])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("epsilon=-9999"), "{text}");
}

#[test]
fn env_seed_is_a_fallback_only() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed_env: &str, flag: Option<&str>, name: &str| {
        let mut c = bin();
        c.env("RATIONALE_FORGE_SEED", seed_env)
            .arg("train")
            .args(SMALL)
            .arg("--out")
            .arg(dir.path().join(name));
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert!(c.status().unwrap().success());
        let cfg: serde_json::Value = serde_json::from_slice(
            &std::fs::read(dir.path().join(name).join("config.json")).unwrap(),
        )
        .unwrap();
        cfg["seed"].as_u64().unwrap()
    };
    assert_eq!(run("17", None, "env"), 17);
    assert_eq!(run("17", Some("3"), "flag"), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["train", "--preset", "no-such-preset"]), Some(2));
    assert_eq!(code(&["train", "--sparsity", "1.5"]), Some(2));
    let missing = dir.path().join("nope").join("config.json");
    assert_eq!(
        code(&["train", "--config", missing.to_str().unwrap()]),
        Some(4)
    );
    let out = dir.path().join("nan");
    assert_eq!(
        code(&[
            "train",
            "--epochs",
            "1",
            "--temperature",
            "1e-308",
            "--out",
            out.to_str().unwrap()
        ]),
        Some(3)
    );
}

#[test]
fn sweep_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "sweep", "--preset", "interval", "--jobs", "2", "--seeds", "0",
        ])
        .args(SMALL)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let grid = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2 + 3);
    assert!(dir.path().join("table.txt").exists());
}
