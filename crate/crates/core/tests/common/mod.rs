//! Shared integration-test helpers: the cached toy training run and finite-difference checks.
//!
//! The run is cached under the cargo target directory, keyed by the
//! configuration fingerprint, so it happens once per configuration.

#![allow(dead_code)]

pub mod fd;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fxsr::data::{prepare_subimages, DegradationSpec, PairedPatch, Provenance};
use fxsr::inference::SrModel;
use fxsr::resample::downsample;
use fxsr::schedules::ScheduleVariant;
use fxsr::synth::synth_image;
use fxsr::trainer::{train, TrainConfig, TrainState, LATEST};

pub const SCALE: usize = 4;
pub const TRAIN_IMAGES: usize = 8;
pub const TRAIN_SIDE: usize = 480;
pub const HELD_OUT: usize = 4;
pub const HELD_OUT_SIDE: usize = 128;

pub fn toy_config() -> TrainConfig {
    TrainConfig::toy(ScheduleVariant::Pd, SCALE)
}

fn target_dir() -> PathBuf {
    match std::env::var_os("CARGO_TARGET_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"),
    }
}

pub fn training_pairs() -> Vec<PairedPatch> {
    let spec = DegradationSpec::bicubic(SCALE);
    (0..TRAIN_IMAGES as u64)
        .flat_map(|i| {
            let hr = synth_image(1000 + i, TRAIN_SIDE, TRAIN_SIDE);
            prepare_subimages(&hr, &format!("train{i}"), &spec).unwrap()
        })
        .collect()
}

/// Crops of images never seen in training.
pub fn held_out() -> Vec<PairedPatch> {
    (0..HELD_OUT as u64)
        .map(|i| {
            let hr = synth_image(5000 + i, HELD_OUT_SIDE, HELD_OUT_SIDE);
            let lr = downsample(&hr, SCALE).unwrap();
            let prov = Provenance {
                source: format!("held{i}"),
                top: 0,
                left: 0,
            };
            PairedPatch::new(hr, lr, prov).unwrap()
        })
        .collect()
}

/// Path of the trained toy checkpoint, training it first when absent.
pub fn toy_checkpoint() -> PathBuf {
    let cfg = toy_config();
    let key = format!(
        "{:016x}-{TRAIN_IMAGES}x{TRAIN_SIDE}",
        cfg.fingerprint().unwrap()
    );
    let dir = target_dir().join("fxsr-toy").join(key);
    let ckpt = dir.join(LATEST);
    std::fs::create_dir_all(&dir).unwrap();
    // Serialize concurrent test binaries on an exclusive lock file.
    let lock = File::create(dir.join(".lock")).unwrap();
    lock.lock().unwrap();
    if let Ok(model) = SrModel::load(&ckpt) {
        if model.manifest().iteration == cfg.total_iters {
            return ckpt;
        }
    }
    eprintln!(
        "training toy {} model for {} iterations into {}",
        cfg.variant.as_str(),
        cfg.total_iters,
        dir.display()
    );
    let start = Instant::now();
    let state = match fxsr::checkpoint::Checkpoint::load(&ckpt) {
        Ok(ck) if ck.manifest.train.as_ref() == Some(&cfg) => TrainState::from_checkpoint(&ck).unwrap(),
        _ => TrainState::new(cfg).unwrap(),
    };
    let pairs = training_pairs();
    train(state, &pairs, &dir, |b| {
        if b.iteration % 100 == 0 {
            eprintln!(
                "iter {} t={:.2} rec={:.4} total={:.4} ({:.0?})",
                b.iteration,
                b.t,
                b.l_rec,
                b.total,
                start.elapsed()
            );
        }
    })
    .unwrap();
    eprintln!("toy training finished in {:.0?}", start.elapsed());
    ckpt
}
