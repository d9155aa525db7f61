use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 8
[data]
n_samples = 80
[vae_train]
epochs = 2
[ar_train]
steps = 8
batch_size = 8
[eval]
holdout = 16
projections = 32
conditions = 8
diversity_samples = 3
[ablate]
seeds = [5]
"#;

fn iqvae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqvae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("error JSON on stderr")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn gen_data_writes_iqds() {
    let dir = setup();
    let out = iqvae(
        &["gen-data", "--n", "10", "--seed", "3", "--mode", "segmentation", "--out", "d"],
        dir.path(),
    );
    let summary = ok(&out);
    assert_eq!(summary["samples"], 10);
    assert_eq!(summary["data"]["mode"], "segmentation");
    let bytes = std::fs::read(dir.path().join("d/data.iqds")).unwrap();
    assert_eq!(&bytes[..4], b"IQDS");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);

    ok(&iqvae(&["gen-data", "--n", "10", "--seed", "3", "--mode", "segmentation", "--out", "x.iqds"], dir.path()));
    assert_eq!(std::fs::read(dir.path().join("x.iqds")).unwrap(), bytes);
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = setup();
    let p = dir.path();
    ok(&iqvae(&["gen-data", "--n", "80", "--seed", "2", "--out", "data.iqds"], p));
    ok(&iqvae(&["train-iqvae", "--config", "small.toml", "--data", "data.iqds", "--out", "vae"], p));
    ok(&iqvae(&["train-ar", "--run", "vae", "--data", "data.iqds", "--out", "ar"], p));

    let a = ok(&iqvae(&["sample", "--run", "ar", "--data", "data.iqds", "--k", "1", "--count", "2", "--out", "s1"], p));
    let b = ok(&iqvae(&["sample", "--run", "ar", "--data", "data.iqds", "--k", "1", "--count", "2", "--out", "s2"], p));
    assert_eq!(a["samples"], b["samples"]);
    assert_eq!(
        std::fs::read(p.join("s1/sample_01.f32")).unwrap(),
        std::fs::read(p.join("s2/sample_01.f32")).unwrap()
    );

    let eval = ok(&iqvae(&["eval", "--run", "ar", "--data", "data.iqds", "--out", "ev"], p));
    for key in ["teacher_forced_nll", "free_running_nll", "recon_mse", "sliced_wasserstein", "diversity"] {
        assert!(eval[key].is_f64(), "{key}");
    }
    assert!(p.join("ev/eval.json").is_file());

    let ot = ok(&iqvae(
        &["ot", "--data", "data.iqds", "--a", "0..5", "--b", "5..10:condition", "--metric", "gw-bruteforce"],
        p,
    ));
    assert!(ot["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn saved_config_reproduces_metrics_single_threaded() {
    let dir = setup();
    let p = dir.path();
    ok(&iqvae(&["train-iqvae", "--config", "small.toml", "--seed", "77", "--sequential", "--out", "a"], p));
    ok(&iqvae(&["train-iqvae", "--config", "a/config.toml", "--sequential", "--out", "b"], p));
    let metrics = |d: &str| std::fs::read(p.join(d).join("metrics.jsonl")).unwrap();
    assert_eq!(metrics("a"), metrics("b"));
    assert!(std::fs::read_to_string(p.join("a/config.toml")).unwrap().contains("seed = 77"));
}

#[test]
fn failures_exit_nonzero_with_json() {
    let dir = setup();
    let p = dir.path();
    let e = err(&iqvae(&["train-ar", "--run", "nothing", "--out", "x"], p));
    assert_eq!(e["kind"], "missing_stage");
    assert!(e["message"].as_str().unwrap().contains("train-iqvae"));

    std::fs::write(p.join("bad.toml"), "[vae_train.optim]\nlr = \"fast\"\n").unwrap();
    let e = err(&iqvae(&["train-iqvae", "--config", "bad.toml", "--out", "x"], p));
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("vae_train.optim.lr"));

    let e = err(&iqvae(&["fly"], p));
    assert_eq!(e["kind"], "usage");
    let e = err(&iqvae(&["ot", "--a", "0..2", "--b", "nope"], p));
    assert_eq!(e["kind"], "usage");
}

#[test]
fn ablate_outputs_four_rows() {
    let dir = setup();
    let report = ok(&iqvae(&["ablate", "--config", "small.toml", "--out", "abl"], dir.path()));
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["comparisons"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("abl/ablation.json").is_file());
}
