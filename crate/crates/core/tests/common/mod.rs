#![allow(dead_code)]

pub mod gradcheck;

use std::path::{Path, PathBuf};

use dualharmony::data::{build_manifest, synth, BuildOptions, Dataset, Manifest};
use dualharmony::trainer::{Preset, TrainConfig};

/// Writes `count` synthetic photos and paintings of side `size` and builds a
/// manifest over them; returns the manifest path.
pub fn corpus(dir: &Path, count: usize, size: usize, seed: u64) -> PathBuf {
    let layout = synth::write_corpus(dir, count, count, size, seed).unwrap();
    let opts = BuildOptions {
        seed: seed + 1,
        test_fraction: 0.0,
        write_previews: false,
    };
    let summary = build_manifest(&layout.photos, &layout.paintings, dir, &opts).unwrap();
    assert!(summary.accepted > 0, "synthetic corpus produced no composites");
    summary.manifest_path
}

pub fn dataset(manifest: &Path, size: usize) -> Dataset {
    Dataset::new(Manifest::load(manifest).unwrap(), size).unwrap()
}

/// Small but complete training setup: 128×128 inputs, a 2×2 patch grid,
/// width 1/8.
pub fn small_config(preset: Preset, output: &Path) -> TrainConfig {
    TrainConfig {
        image_size: 128,
        n: 2,
        width: 0.125,
        batch_size: 2,
        iterations: 3,
        seed: 11,
        output_dir: output.to_path_buf(),
        ..TrainConfig::default()
    }
    .with_preset(preset)
}
