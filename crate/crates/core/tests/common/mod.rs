#![allow(dead_code)]

use std::path::Path;

use grlb_core::scenegen::{gen_dataset, GenConfig, Manifest};
use grlb_core::train::{ArchConfig, TrainConfig};

pub fn small_gen(count: usize) -> GenConfig {
    GenConfig {
        count,
        height: 16,
        width: 16,
        radius: [3.0, 4.0],
        mirror_rows: [2, 4],
        val_percent: 25,
        ..GenConfig::default()
    }
}

pub fn dataset(dir: &Path, count: usize, seed: u64) -> Manifest {
    gen_dataset(&small_gen(count), seed, dir).unwrap()
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_width: 8,
        multipliers: vec![1, 2],
        groups: 4,
        time_features: 8,
        time_dim: 16,
    }
}

pub fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        checkpoint_every: 5,
        log_every: 3,
        architecture: tiny_arch(),
        ..TrainConfig::default()
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
