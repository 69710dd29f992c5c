mod common;

use std::path::Path;
use std::process::Command;

use common::tiny_run_config;
use latent_restore::cli::{self, Options};
use latent_restore::codec::Codec;
use latent_restore::config::RunConfig;
use latent_restore::data::{Manifest, Split, MANIFEST_FILE};
use latent_restore::error::Error;
use latent_restore::eval::{Report, ScoreReport, BASELINE, METHOD};
use latent_restore::train::checkpoint::{self, file_hash};
use latent_restore::train::{self, Stage, StageContext};

fn quiet() -> Options {
    Options::default()
}

fn ctx(dir: &Path, resume: bool) -> StageContext<'_> {
    StageContext {
        out_dir: Some(dir),
        seed: 4,
        config_hash: "h".into(),
        resume,
        verbose: false,
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

#[test]
fn default_corpus_manifest_is_stable() {
    let cfg = RunConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cli::cmd_generate(&cfg, a.path()).unwrap();
    let mb = cli::cmd_generate(&cfg, b.path()).unwrap();
    assert_eq!(ma.volume_count(Split::Train), 64);
    assert_eq!(ma.volume_count(Split::Val), 8);
    assert_eq!(ma.hash(), mb.hash());
    let loaded = Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, ma);
    let val = ma.load_split(a.path(), Split::Val).unwrap();
    assert_eq!(val.len(), 8 * cfg.data.slices);
    assert!(val.iter().any(|s| s.is_anomalous()));
}

#[test]
fn indivisible_side_is_rejected_with_advice() {
    let mut cfg = RunConfig::default();
    cfg.data.side = 30;
    cfg.codec.image_side = 30;
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("28") && msg.contains("32"), "{msg}");
}

#[test]
fn prior_needs_a_trained_codec() {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli::cmd_generate(&cfg, &data).unwrap();
    let err = cli::cmd_train(&cfg, Stage::Prior, &data, &dir.path().join("models"), &quiet()).unwrap_err();
    assert!(matches!(err, Error::MissingDependency(_)), "{err}");
}

#[test]
fn binary_reports_structured_errors() {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    let bin = env!("CARGO_BIN_EXE_lsr");
    let ok = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "generate",
            "--out",
            data.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let out = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "--quiet",
            "train",
            "--stage",
            "prior",
        ])
        .args([
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "MissingDependency");

    std::fs::write(dir.path().join("bad.json"), br#"{"data": {"side": 30}}"#).unwrap();
    let out = Command::new(bin)
        .args([
            "--config",
            dir.path().join("bad.json").to_str().unwrap(),
            "generate",
            "--out",
            "x",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "InvalidConfig");
}

#[test]
fn repeated_training_is_bitwise_identical_and_stages_are_isolated() {
    let cfg = tiny_run_config();
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    cli::cmd_generate(&cfg, &data).unwrap();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let models = root.path().join(run);
        cli::cmd_train(&cfg, Stage::Vqvae, &data, &models, &quiet()).unwrap();
        let codec_before = file_hash(&Stage::Vqvae.checkpoint_path(&models)).unwrap();
        cli::cmd_train(&cfg, Stage::Prior, &data, &models, &quiet()).unwrap();
        cli::cmd_train(&cfg, Stage::Vae, &data, &models, &quiet()).unwrap();
        // later stages never touch the frozen codec
        assert_eq!(file_hash(&Stage::Vqvae.checkpoint_path(&models)).unwrap(), codec_before);
        let h: Vec<String> = [Stage::Vqvae, Stage::Prior, Stage::Vae]
            .iter()
            .map(|s| file_hash(&s.checkpoint_path(&models)).unwrap())
            .collect();
        hashes.push(h);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = tiny_run_config();
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let manifest = cli::cmd_generate(&cfg, &data).unwrap();
    let images: Vec<_> = manifest
        .load_split(&data, Split::Train)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let full_cfg = cfg.train.vqvae.clone();
    let short_cfg = latent_restore::train::TrainConfig {
        max_steps: 5,
        ..full_cfg.clone()
    };
    let whole = root.path().join("whole");
    let mut c: Codec<f32> = Codec::new(cfg.codec.clone(), 1).unwrap();
    train::train_vqvae(&mut c, &images, &full_cfg, &cfg.data.augment, &ctx(&whole, false)).unwrap();

    let parts = root.path().join("parts");
    let mut c: Codec<f32> = Codec::new(cfg.codec.clone(), 1).unwrap();
    train::train_vqvae(&mut c, &images, &short_cfg, &cfg.data.augment, &ctx(&parts, false)).unwrap();
    assert_eq!(
        checkpoint::load_checkpoint(&parts, Stage::Vqvae).unwrap().sidecar.step,
        5
    );
    // fresh, differently initialised model: everything must come from the checkpoint
    let mut c: Codec<f32> = Codec::new(cfg.codec.clone(), 77).unwrap();
    train::train_vqvae(&mut c, &images, &full_cfg, &cfg.data.augment, &ctx(&parts, true)).unwrap();

    let a = checkpoint::load_checkpoint(&whole, Stage::Vqvae).unwrap();
    let b = checkpoint::load_checkpoint(&parts, Stage::Vqvae).unwrap();
    assert_eq!(a.sidecar.step, full_cfg.max_steps);
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_eq!(a.adam, b.adam);
    assert_eq!(
        file_hash(&Stage::Vqvae.checkpoint_path(&whole)).unwrap(),
        file_hash(&Stage::Vqvae.checkpoint_path(&parts)).unwrap()
    );
}

#[test]
fn pipeline_outputs_are_versioned_and_guarded() {
    let cfg = tiny_run_config();
    let root = tempfile::tempdir().unwrap();
    let report = cli::cmd_pipeline(&cfg, root.path(), &quiet()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    let on_disk: Report = serde_json::from_slice(&std::fs::read(root.path().join(cli::REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk.hash().unwrap(), report.hash().unwrap());
    assert!(report.contrast_probe.is_some());

    let scores = root.path().join("scores");
    for method in [METHOD, BASELINE] {
        let r = ScoreReport::load(&ScoreReport::path(&scores, method, Split::Val)).unwrap();
        assert_eq!(r.config_hash, cfg.hash());
        assert_eq!(r.entries.len(), cfg.data.val_volumes * cfg.data.slices);
    }
    let t: cli::Thresholds =
        serde_json::from_slice(&std::fs::read(root.path().join("models").join(cli::THRESHOLDS_FILE)).unwrap()).unwrap();
    assert_eq!(t.source, "validation");
    assert!(t.lambda_s >= t.lambda_p);

    // a different config must not silently evaluate these artifacts
    let mut other = cfg.clone();
    other.seed += 1;
    let err = cli::cmd_evaluate(&other, &scores, &root.path().join("data"), &root.path().join("r2.json"));
    assert!(err.is_err());
    let err = cli::cmd_score(
        &other,
        &root.path().join("data"),
        &root.path().join("models"),
        &scores,
        &quiet(),
    );
    assert!(err.is_err());
}

#[test]
fn calibration_without_data_uses_defaults() {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let t = cli::cmd_calibrate(&cfg, None, dir.path()).unwrap();
    assert_eq!((t.lambda_s, t.lambda_p), (7.0, 5.0));
    assert_eq!(t.source, "defaults");
}

#[test]
fn percentile_of_uniform_population() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    let p90 = cli::percentile(&v, 90.0).unwrap();
    assert!((p90 - 90.0).abs() <= 1.0, "{p90}");
}
