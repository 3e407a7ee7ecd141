//! Overfits four synthetic images and prints the training-set MRE.
//! `cargo run --release -p cephalo --example overfit -- [lr] [sigma] [epochs] [crop height] [weight decay]`

use std::time::Instant;

use cephalo::config::RunConfig;
use cephalo::samples::{crop_records, CropMode};
use cephalo::synth::{synth_records, SynthOptions};
use cephalo::trainer::{fit, FitOptions};
use cephalo_core::augment::AugmentationConfig;
use cephalo_core::region::RegionPolicy;
use cephalo_core::schedule::AccumulationSchedule;
use cephalo_net::{ModelSpec, Variant};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let th = arg(4, 256.0) as usize;
    let cfg = RunConfig {
        model: ModelSpec::deterministic(Variant::Nano),
        augmentation: AugmentationConfig::disabled(),
        region: RegionPolicy {
            target_height: th,
            ..Default::default()
        },
        accumulation_schedule: AccumulationSchedule::constant(1),
        lr_decay: cephalo::config::LrDecay {
            factor: 1.0,
            epochs: vec![],
        },
        max_epochs: arg(3, 200.0) as usize,
        early_stop_patience: 1000,
        validate_every: 5,
        target_sigma: arg(2, 3.0),
        optimizer: cephalo::config::OptimizerConfig {
            lr: arg(1, 3e-3),
            weight_decay: arg(5, 0.0),
            ..Default::default()
        },
        ..Default::default()
    };
    let recs = synth_records(&SynthOptions {
        n_images: 4,
        spacing: 1.0,
        height: th * 5 / 4,
        width: th * 9 / 8,
        ..Default::default()
    })?;
    let refs: Vec<_> = recs.iter().collect();
    let crops = crop_records(
        &refs,
        CropMode::GroundTruth { pad: cfg.rcnn_pad },
        &cfg.region,
    )?;
    println!("crop {:?}", crops[0].pixels.dim());
    let t0 = Instant::now();
    let out = fit(
        &cfg,
        &crops,
        &crops,
        &FitOptions {
            stop_below_mm: Some(2.0),
            ..Default::default()
        },
    )?;
    let last = out.history.epochs.iter().rev().find_map(|e| e.val_mre_mm);
    println!(
        "stop {:?} after epoch {} val {:?} in {:?}",
        out.history.stop_reason,
        out.history.state.epoch,
        last,
        t0.elapsed()
    );
    Ok(())
}
