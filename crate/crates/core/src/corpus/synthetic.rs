//! Synthetic sentence-aligned corpora for desk-scale verification.
//!
//! Sentences are drawn from a topic-structured pseudo-word vocabulary. Each
//! content word and each topic owns a spatiotemporal pattern (per-channel
//! sinusoids). A sentence template sums its words' patterns and the pattern of
//! every topic it touches, so sentences that share topics or words share EEG
//! structure as well as tokens. A trial is `snr * template + noise`
//! with the template scaled to unit RMS and unit-variance white noise.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, EegTrial, SentenceRecord, SubjectCorpus};
use crate::seed;

const FUNCTION_WORDS: &[&str] = &["the", "a", "of", "and", "in", "with", "to"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const WORDS_PER_TOPIC: usize = 12;
const WORD_SPECIFIC_WEIGHT: f64 = 1.0;
const TOPIC_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sentences: usize,
    pub channels: usize,
    pub samples: usize,
    pub snr: f64,
    /// Drives sentences and patterns; noise additionally depends on the subject.
    pub seed: u64,
    #[serde(default = "default_subject")]
    pub subject_id: String,
    /// Defaults to `clamp(n_sentences / 15, 2, 12)`.
    #[serde(default)]
    pub n_topics: Option<usize>,
    /// Trials are shortened by up to this fraction of `samples`.
    #[serde(default = "default_jitter")]
    pub length_jitter: f64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
}

fn default_subject() -> String {
    "SYN".into()
}
fn default_jitter() -> f64 {
    0.25
}
fn default_rate() -> f64 {
    500.0
}

impl SyntheticConfig {
    pub fn new(n_sentences: usize, channels: usize, samples: usize, snr: f64, seed: u64) -> Self {
        Self {
            n_sentences,
            channels,
            samples,
            snr,
            seed,
            subject_id: default_subject(),
            n_topics: None,
            length_jitter: default_jitter(),
            sample_rate_hz: default_rate(),
        }
    }

    pub fn with_subject(mut self, subject_id: impl Into<String>) -> Self {
        self.subject_id = subject_id.into();
        self
    }

    fn topics(&self) -> usize {
        self.n_topics.unwrap_or((self.n_sentences / 15).clamp(2, 12))
    }

    fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Synthetic(m.into()));
        if self.n_sentences < 2 {
            return bad("n_sentences must be at least 2");
        }
        if self.channels == 0 || self.samples == 0 {
            return bad("channels and samples must be positive");
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return bad("snr must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return bad("length_jitter must lie in [0, 1)");
        }
        if self.topics() == 0 {
            return bad("n_topics must be positive");
        }
        Ok(())
    }
}

struct Vocabulary {
    topics: Vec<Vec<String>>,
    topic_of: BTreeMap<String, usize>,
}

fn pseudo_word(rng: &mut seed::Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    w
}

fn vocabulary(cfg: &SyntheticConfig) -> Vocabulary {
    let mut rng = seed::named_rng(cfg.seed, "synthetic.vocabulary");
    let mut used: BTreeSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let mut topics = Vec::new();
    let mut topic_of = BTreeMap::new();
    for t in 0..cfg.topics() {
        let mut words = Vec::with_capacity(WORDS_PER_TOPIC);
        while words.len() < WORDS_PER_TOPIC {
            let w = pseudo_word(&mut rng);
            if used.insert(w.clone()) {
                topic_of.insert(w.clone(), t);
                words.push(w);
            }
        }
        topics.push(words);
    }
    Vocabulary { topics, topic_of }
}

struct Pattern {
    spatial: Vec<f64>,
    phase: Vec<f64>,
    freq: f64,
}

impl Pattern {
    fn new(cfg: &SyntheticConfig, name: &str) -> Self {
        let mut rng = seed::named_rng(cfg.seed, &format!("synthetic.pattern.{name}"));
        let spatial = (0..cfg.channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        let phase = (0..cfg.channels).map(|_| rng.random_range(0.0..TAU)).collect();
        let freq = rng.random_range(0.02..0.3);
        Self { spatial, phase, freq }
    }

    fn add_to(&self, out: &mut [f64], samples: usize, weight: f64) {
        for (c, row) in out.chunks_exact_mut(samples).enumerate() {
            let a = weight * self.spatial[c];
            for (t, v) in row.iter_mut().enumerate() {
                *v += a * (TAU * self.freq * t as f64 + self.phase[c]).sin();
            }
        }
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}

fn template_with(cfg: &SyntheticConfig, vocab: &Vocabulary, text: &str, samples: usize) -> Vec<f64> {
    let mut out = vec![0.0; cfg.channels * samples];
    let mut topics = BTreeSet::new();
    for word in tokens(text) {
        let Some(&topic) = vocab.topic_of.get(&word) else {
            continue;
        };
        topics.insert(topic);
        Pattern::new(cfg, &format!("word.{word}")).add_to(&mut out, samples, WORD_SPECIFIC_WEIGHT);
    }
    for topic in topics {
        Pattern::new(cfg, &format!("topic{topic}")).add_to(&mut out, samples, TOPIC_WEIGHT);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Noise-free, unit-RMS template of `text` over `samples` time points, row-major
/// channel-by-time. Unknown words contribute nothing.
pub fn synthetic_template(cfg: &SyntheticConfig, text: &str, samples: usize) -> Vec<f64> {
    template_with(cfg, &vocabulary(cfg), text, samples)
}

fn sentences(cfg: &SyntheticConfig, vocab: &Vocabulary) -> Vec<SentenceRecord> {
    let mut rng = seed::named_rng(cfg.seed, "synthetic.sentences");
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.n_sentences);
    let mut i = 0;
    while out.len() < cfg.n_sentences {
        let topic = &vocab.topics[i % vocab.topics.len()];
        let n_content = rng.random_range(5..=8);
        let mut words: Vec<&str> = topic.choose_multiple(&mut rng, n_content).map(String::as_str).collect();
        for _ in 0..rng.random_range(1..=2) {
            let at = rng.random_range(0..=words.len());
            words.insert(at, FUNCTION_WORDS.choose(&mut rng).unwrap());
        }
        let mut text = words.join(" ");
        text[..1].make_ascii_uppercase();
        text.push('.');
        if seen.insert(text.clone()) {
            out.push(SentenceRecord { sentence_id: format!("sent{:04}", out.len()), text });
            i += 1;
        }
    }
    out
}

/// Generates one subject's corpus. Same configuration, same corpus, bit for bit.
/// `snr = 0` yields pure noise. Trials are unpadded (lengths vary).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SubjectCorpus, CorpusError> {
    cfg.check()?;
    let vocab = vocabulary(cfg);
    let sentences = sentences(cfg, &vocab);
    let mut rng = seed::named_rng(cfg.seed, &format!("synthetic.noise.{}", cfg.subject_id));
    let max_cut = (cfg.samples as f64 * cfg.length_jitter).floor() as usize;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut rng);

    let mut trials = Vec::with_capacity(sentences.len());
    for &i in &order {
        let s = &sentences[i];
        let len = (cfg.samples - rng.random_range(0..=max_cut)).max(1);
        let template = if cfg.snr > 0.0 {
            template_with(cfg, &vocab, &s.text, len)
        } else {
            vec![0.0; cfg.channels * len]
        };
        let data = template
            .iter()
            .map(|v| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (cfg.snr * v + noise) as f32
            })
            .collect();
        trials.push(EegTrial::new(
            cfg.subject_id.clone(),
            s.sentence_id.clone(),
            cfg.sample_rate_hz,
            cfg.channels,
            len,
            data,
        )?);
    }
    SubjectCorpus::new(cfg.subject_id.clone(), cfg.sample_rate_hz, trials, sentences)
}
