#![allow(dead_code)]

use ctrscan::config::RunConfig;
use ctrscan::dataio::{KeyValues, SpotDataset};
use ctrscan::synthgen::{generate_cohort, SynthConfig};

/// Network widths and schedule scaled for a 5 x 400-spot synthetic cohort.
pub const FIXTURE_RUN: [(&str, &str); 12] = [
    ("align_hidden1", "128"),
    ("align_hidden2", "64"),
    ("proj_dim", "64"),
    ("enc_hidden1", "64"),
    ("enc_hidden2", "32"),
    ("latent_dim", "16"),
    ("cls_hidden", "32"),
    ("lr", "1e-3"),
    ("n_hvg", "64"),
    ("epochs_align", "30"),
    ("epochs_fuse", "20"),
    ("epochs_cls", "20"),
];

pub fn overrides(pairs: &[(&str, &str)]) -> KeyValues {
    let mut kv = KeyValues::new();
    for (k, v) in pairs {
        kv.set(k, v);
    }
    kv
}

pub fn fixture_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply(&overrides(&FIXTURE_RUN)).unwrap();
    cfg.seed = seed;
    cfg.deterministic = true;
    cfg
}

/// Default cohort; the last dataset is the held-out target.
pub fn fixture_cohort(seed: u64) -> Vec<SpotDataset> {
    generate_cohort(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Small cohort and config for plumbing tests.
pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_datasets: 3,
        spots_per_dataset: 100,
        grid_side: 10,
        d_img: 12,
        n_genes: 24,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply(&overrides(&[
        ("align_hidden1", "32"),
        ("align_hidden2", "16"),
        ("proj_dim", "16"),
        ("heads", "4"),
        ("enc_hidden1", "16"),
        ("enc_hidden2", "8"),
        ("latent_dim", "4"),
        ("cls_hidden", "8"),
        ("lr", "1e-3"),
        ("n_hvg", "24"),
        ("batch_size", "50"),
        ("epochs_align", "8"),
        ("epochs_fuse", "8"),
        ("epochs_cls", "8"),
    ]))
    .unwrap();
    cfg.seed = seed;
    cfg.deterministic = true;
    cfg
}
