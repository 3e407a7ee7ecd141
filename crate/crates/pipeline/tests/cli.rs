use std::path::Path;
use std::process::Command;

use cephalo::config::RunConfig;
use cephalo_core::augment::AugmentationConfig;
use cephalo_core::region::RegionPolicy;
use cephalo_net::{ModelSpec, Variant};

fn cephalo(config: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cephalo"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn config_toml_round_trips() {
    let cfg = RunConfig {
        max_epochs: 9,
        ..Default::default()
    };
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    assert!(RunConfig::from_toml("no_such_key = 1").is_err());
    assert!(RunConfig::from_toml("top_k = 0").is_err());
}

#[test]
fn synth_train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let cfg = RunConfig {
        model: ModelSpec::deterministic(Variant::Nano),
        augmentation: AugmentationConfig::disabled(),
        region: RegionPolicy {
            target_height: 64,
            ..Default::default()
        },
        max_epochs: 1,
        n_folds: 2,
        ..Default::default()
    };
    let cfg_path = tmp.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let d = data.to_str().unwrap();
    let o = out.to_str().unwrap();

    let r = cephalo(
        &cfg_path,
        &[
            "synth", "--out", d, "--n", "4", "--height", "120", "--width", "100",
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(data.join("annotations.csv").exists());

    let r = cephalo(
        &cfg_path,
        &[
            "--data-root",
            d,
            "--out-dir",
            o,
            "train-landmarks",
            "--fold",
            "0",
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = out.join("fold_0/model.safetensors");
    assert!(
        ckpt.exists() && out.join("folds.json").exists() && out.join("run_config.toml").exists()
    );

    let r = cephalo(
        &cfg_path,
        &[
            "--data-root",
            d,
            "--out-dir",
            o,
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let preds = out.join("predictions.json");
    assert!(out.join("submission.csv").exists());

    let r = cephalo(
        &cfg_path,
        &[
            "--data-root",
            d,
            "--out-dir",
            o,
            "evaluate",
            "--predictions",
            preds.to_str().unwrap(),
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("MRE"));
    assert!(out.join("eval_summary.csv").exists());

    // an unreadable image is skipped with exit code 2
    std::fs::write(data.join("broken.png"), b"not a png").unwrap();
    let r = cephalo(
        &cfg_path,
        &[
            "--data-root",
            d,
            "--out-dir",
            o,
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert_eq!(r.status.code(), Some(2));
}
