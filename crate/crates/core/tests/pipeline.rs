use std::path::Path;

use iqvae::config::RunConfig;
use iqvae::data::PairedSample;
use iqvae::ot::{gw_bruteforce, Domain, PointSet};
use iqvae::pipeline::{self, OtMetric, Selection};
use iqvae::Error;

const SMALL: &str = r#"
seed = 4
[data]
n_samples = 96
[vae_train]
epochs = 2
batch_size = 16
[ar_train]
steps = 12
batch_size = 8
[eval]
holdout = 16
projections = 32
conditions = 8
diversity_samples = 3
[sample]
count = 3
[ablate]
seeds = [0, 1]
"#;

fn small() -> (RunConfig, Vec<PairedSample>) {
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let data = pipeline::load_or_generate(&cfg, None).unwrap();
    (cfg, data)
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_directories_hold_config_metrics_and_checkpoints() {
    let (cfg, data) = small();
    let dir = tempfile::tempdir().unwrap();
    let (vae_dir, ar_dir) = (dir.path().join("vae"), dir.path().join("ar"));
    let vae = pipeline::run_train_iqvae(&cfg, &data, &vae_dir).unwrap();
    pipeline::run_train_ar(&cfg, &vae, &data, &ar_dir).unwrap();

    assert_eq!(RunConfig::load(&vae_dir.join(pipeline::CONFIG_FILE)).unwrap(), cfg);
    let epochs = json_lines(&vae_dir.join(pipeline::METRICS_FILE));
    assert_eq!(epochs.len(), 2);
    let mut keys: Vec<&str> = epochs[0].as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["codebook_usage", "epoch", "l_quan", "l_recon", "l_reg", "l_total"]);

    let steps = json_lines(&ar_dir.join(pipeline::METRICS_FILE));
    assert_eq!(steps.len(), 12);
    for (i, s) in steps.iter().enumerate() {
        assert!(s["gumbel_active_positions"].is_u64());
        // reliability is measured on two-pass steps only
        assert_eq!(s["mean_reliability"].is_f64(), i % 4 == 0, "step {i}");
    }
    for f in [pipeline::AR_CKPT, pipeline::IQVAE_CKPT, pipeline::CONFIG_FILE] {
        assert!(ar_dir.join(f).is_file(), "{f}");
    }

    let (_, vae2, ar2) = pipeline::load_ar(&ar_dir).unwrap();
    assert_eq!(vae2.to_records(), vae.to_records());
    let (_, held) = pipeline::split(&cfg, &data).unwrap();
    let report = pipeline::evaluate(&cfg, &vae2, &ar2, held).unwrap();
    assert_eq!(report.heldout, 16);
    for v in [
        report.teacher_forced_nll,
        report.free_running_nll,
        report.recon_mse,
        report.latent_sgw,
        report.sliced_wasserstein,
        report.diversity,
    ] {
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn missing_artifacts_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    match pipeline::load_iqvae(dir.path()) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "train-iqvae"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    let (cfg, data) = small();
    pipeline::run_train_iqvae(&cfg, &data, dir.path()).unwrap();
    match pipeline::load_ar(dir.path()) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "train-ar"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn stage_two_rejects_a_different_vae_section() {
    let (cfg, data) = small();
    let dir = tempfile::tempdir().unwrap();
    let vae = pipeline::run_train_iqvae(&cfg, &data, &dir.path().join("vae")).unwrap();
    let mut other = cfg.clone();
    other.vae.codebook_size = 16;
    match pipeline::run_train_ar(&other, &vae, &data, &dir.path().join("ar")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "vae"),
        r => panic!("{:?}", r.map(|_| ())),
    }
}

#[test]
fn greedy_sampling_is_repeatable_and_dumps_images() {
    let (mut cfg, data) = small();
    let dir = tempfile::tempdir().unwrap();
    let vae = pipeline::run_train_iqvae(&cfg, &data, &dir.path().join("vae")).unwrap();
    let ar = pipeline::run_train_ar(&cfg, &vae, &data, &dir.path().join("ar")).unwrap();
    cfg.sample.k = 1;
    let a = pipeline::run_sample(&cfg, &vae, &ar, &data, 2, &dir.path().join("s1")).unwrap();
    let b = pipeline::run_sample(&cfg, &vae, &ar, &data, 2, &dir.path().join("s2")).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        let raw = std::fs::read(dir.path().join("s1").join(&x.raw)).unwrap();
        assert_eq!(raw, std::fs::read(dir.path().join("s2").join(&y.raw)).unwrap());
        assert_eq!(raw.len(), 256 * 4);
        let pgm = std::fs::read(dir.path().join("s1").join(&x.pgm)).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), 13 + 256);
    }
    assert!(pipeline::run_sample(&cfg, &vae, &ar, &data, 10_000, &dir.path().join("s3")).is_err());
}

#[test]
fn ablation_emits_four_rows() {
    let (cfg, data) = small();
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline::run_ablation(&cfg, &data, dir.path()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["baseline", "gumbel_only", "regularizer", "regularizer_gumbel"]);
    assert!(report.rows.iter().all(|r| r.per_seed.len() == 2));
    assert_eq!(report.comparisons.len(), 4);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    assert!(json["rows"][0]["mean"]["free_running_nll"].is_f64());
    // the two Gumbel arms of one seed share their IQ-VAE
    let r = &report.rows;
    assert_eq!(r[0].per_seed[0].1.recon_mse, r[1].per_seed[0].1.recon_mse);
    assert_eq!(r[2].per_seed[1].1.latent_sgw, r[3].per_seed[1].1.latent_sgw);
}

#[test]
fn ot_selection_and_metrics() {
    let (_, data) = small();
    let sel: Selection = "2..6:condition".parse().unwrap();
    assert_eq!((sel.start, sel.end, sel.domain), (2, 6, Domain::Condition));
    assert_eq!("0..3".parse::<Selection>().unwrap().domain, Domain::Image);
    for bad in ["3..3", "a..4", "0..4:pixels", "5"] {
        assert!(bad.parse::<Selection>().is_err(), "{bad}");
    }
    assert!("gw-exact".parse::<OtMetric>().is_err());

    let a: Selection = "0..4".parse().unwrap();
    let b: Selection = "4..8:condition".parse().unwrap();
    let r = pipeline::run_ot(&data, &a, &b, OtMetric::GwBruteforce, 0, 0).unwrap();
    let flat = |s: &[PairedSample], cond: bool| -> PointSet {
        let rows: Vec<Vec<f64>> = s
            .iter()
            .map(|p| {
                let v = if cond { p.condition_unit() } else { p.image.clone() };
                v.into_iter().map(f64::from).collect()
            })
            .collect();
        PointSet::from_rows(&rows, Domain::Other).unwrap()
    };
    let (direct, _) = gw_bruteforce(&flat(&data[0..4], false), &flat(&data[4..8], true)).unwrap();
    assert!((r.value - direct).abs() < 1e-12);
    assert_eq!(r.permutation.unwrap().len(), 4);

    let same = pipeline::run_ot(&data, &a, &a, OtMetric::SlicedW, 16, 1).unwrap();
    assert_eq!(same.value, 0.0);
    let too_big: Selection = "0..200".parse().unwrap();
    assert!(pipeline::run_ot(&data, &too_big, &too_big, OtMetric::SlicedGw, 16, 1).is_err());
}

#[test]
fn holdout_must_leave_training_data() {
    let (mut cfg, data) = small();
    cfg.eval.holdout = data.len();
    assert!(matches!(pipeline::split(&cfg, &data), Err(Error::Config { .. })));
}
