#![allow(dead_code)]

use std::path::Path;

use gcsa::config::{ModelSection, RunConfig};
use gcsa_core::synth::WorldConfig;

/// A world and model small enough for a few seconds of training.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig {
        world: WorldConfig {
            cells_per_axis: 6,
            images_per_cell: 3,
            session_length: 12,
            query_fraction: 0.3,
            val_fraction: 0.4,
            ..WorldConfig::default()
        },
        model: ModelSection {
            d0: 16,
            d_bar: 16,
            heads: 2,
            k: 20,
            l: 5,
            ..ModelSection::default()
        },
        seed: 5,
        ..RunConfig::default()
    };
    c.stage1.epochs = 2;
    c.stage1.max_examples = Some(64);
    c.stage2.epochs = 2;
    c.stage2.max_examples = Some(64);
    c
}

pub fn write_config(path: &Path, cfg: &RunConfig) {
    std::fs::write(path, cfg.to_json_pretty()).unwrap();
}

pub fn run(args: &[&str]) -> gcsa::Result<()> {
    gcsa::cli::run(std::iter::once("gcsa").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
