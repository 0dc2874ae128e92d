#![allow(dead_code)]

use std::path::Path;

use eegrag::corpus::{generate_synthetic, save_corpus, SyntheticConfig};
use eegrag::encoder::{EncoderConfig, TrainConfig};
use eegrag::pipeline::ExperimentConfig;

pub const CHANNELS: usize = 8;
pub const SAMPLES: usize = 64;

/// Writes `subjects` synthetic corpora sharing one sentence set under `root`.
pub fn write_subjects(root: &Path, subjects: usize, n_sentences: usize, snr: f64, seed: u64) {
    for s in 0..subjects {
        let id = format!("S{s:02}");
        let cfg = SyntheticConfig::new(n_sentences, CHANNELS, SAMPLES, snr, seed).with_subject(id.clone());
        save_corpus(&generate_synthetic(&cfg).unwrap(), &root.join(id)).unwrap();
    }
}

/// Small encoder and schedule that train in about a second per subject.
pub fn small_config(corpus: &Path, out: &Path, test_count: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(corpus, out);
    c.test_count = test_count;
    c.encoder = EncoderConfig { hidden_width: 32, dropout_rate: 0.1, ..EncoderConfig::default() };
    c.train = TrainConfig { epochs: 30, batch_size: 8, learning_rate: 1.0, ..TrainConfig::default() };
    c
}
