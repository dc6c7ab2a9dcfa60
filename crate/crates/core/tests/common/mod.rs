#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drrff::cli_io::ExperimentConfig;
use drrff::models::{ExtractorConfig, UnetConfig};
use drrff::training::ModelConfig;

/// A configuration small enough for end-to-end runs in a few seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.known_devices = 3;
    c.dataset.unknown_devices = 2;
    for s in &mut c.dataset.splits {
        s.num_devices = if s.name == "test_unknown_multipath" { 2 } else { 3 };
        s.per_device = 6;
    }
    c.model = ModelConfig {
        extractor: ExtractorConfig {
            layers: 6,
            embed_dim: 8,
            base_width: 2,
            max_width: 4,
            ..ExtractorConfig::default()
        },
        unet: UnetConfig {
            widths: [2, 4, 4, 4, 4],
            ..UnetConfig::default()
        },
    };
    c.train.epochs = 2;
    c.train.batch_size = 6;
    c
}

pub fn write_config(dir: &Path, c: &ExperimentConfig) -> PathBuf {
    let p = dir.join("experiment.json");
    std::fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

pub fn drrff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drrff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
