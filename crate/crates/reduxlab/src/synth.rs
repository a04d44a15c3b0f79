//! Seeded generator for a small synthetic classification task, used by the
//! test suites and for demo runs of the pipeline.
//!
//! Each example holds a few class keywords (perfect predictors drawn from a
//! per-class keyword pool) padded with shared filler tokens, so a small
//! classifier overfits to high confidence quickly. Token surfaces are plain
//! alphanumeric strings, which the tokenizer passes through unchanged.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    encode_dataset, CorpusError, Dataset, LabelManifest, RawDataset, RawExample, Split,
    Vocabulary,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Keyword pool size per class.
    pub keywords_per_class: usize,
    /// Shared filler vocabulary size.
    pub filler_vocab: usize,
    /// Keywords planted per example (inclusive range).
    pub keywords_per_example: (usize, usize),
    /// Total reducible length per example (inclusive range).
    pub length_range: (usize, usize),
    /// When set, each example also carries a short frozen filler segment.
    pub with_frozen: bool,
    /// Probability that an example additionally carries one keyword of
    /// another class. Labels stay clean (the majority class always wins),
    /// but single keywords become ambiguous evidence, which keeps a trained
    /// classifier overconfident rather than fully saturated.
    pub cross_keyword_prob: f64,
    /// Fraction of examples whose label is flipped to another class after
    /// token generation.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            train_size: 2000,
            val_size: 400,
            keywords_per_class: 20,
            filler_vocab: 300,
            keywords_per_example: (2, 3),
            length_range: (5, 12),
            with_frozen: false,
            cross_keyword_prob: 0.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

const LABELS: [&str; 4] = ["pos", "neg", "neu", "mix"];

impl SynthConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        assert!(
            (2..=LABELS.len()).contains(&self.num_classes),
            "num_classes must be in 2..=4"
        );
        assert!(self.keywords_per_example.0 >= 1);
        assert!(self.keywords_per_example.1 + 1 <= self.length_range.0);
        assert!(self.length_range.0 <= self.length_range.1);
        assert!((0.0..1.0).contains(&self.label_noise));
        assert!((0.0..1.0).contains(&self.cross_keyword_prob));
        Ok(())
    }
}

fn keyword(class: usize, i: usize) -> String {
    format!("{}kw{i:02}", LABELS[class])
}

fn filler(i: usize) -> String {
    format!("filler{i:03}")
}

fn generate_split(config: &SynthConfig, size: usize, rng: &mut ChaCha8Rng) -> RawDataset {
    let kw_count = Uniform::new_inclusive(
        config.keywords_per_example.0,
        config.keywords_per_example.1,
    );
    let length = Uniform::new_inclusive(config.length_range.0, config.length_range.1);
    let class_dist = Uniform::new(0, config.num_classes);
    let kw_dist = Uniform::new(0, config.keywords_per_class);
    let filler_dist = Uniform::new(0, config.filler_vocab);
    let mut examples = Vec::with_capacity(size);
    let mut labels = LabelManifest::default();
    for _ in 0..size {
        let class = class_dist.sample(rng);
        let len = length.sample(rng);
        let kws = kw_count.sample(rng).min(len - 1);
        let mut tokens: Vec<String> = (0..kws)
            .map(|_| keyword(class, kw_dist.sample(rng)))
            .collect();
        if config.cross_keyword_prob > 0.0 && rng.gen::<f64>() < config.cross_keyword_prob {
            let offset = Uniform::new(1, config.num_classes).sample(rng);
            let other = (class + offset) % config.num_classes;
            tokens.push(keyword(other, kw_dist.sample(rng)));
        }
        tokens.extend((tokens.len()..len).map(|_| filler(filler_dist.sample(rng))));
        tokens.shuffle(rng);
        let frozen = if config.with_frozen {
            (0..3)
                .map(|_| filler(filler_dist.sample(rng)))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            String::new()
        };
        let label_class = if config.label_noise > 0.0
            && rng.gen::<f64>() < config.label_noise
        {
            let offset = Uniform::new(1, config.num_classes).sample(rng);
            (class + offset) % config.num_classes
        } else {
            class
        };
        labels.intern(LABELS[label_class]);
        examples.push(RawExample {
            frozen,
            reducible: tokens.join(" "),
            label: LABELS[label_class].to_string(),
        });
    }
    RawDataset { examples, labels }
}

/// Generates raw train and validation splits from one seeded stream.
pub fn generate(config: &SynthConfig) -> Result<(RawDataset, RawDataset), CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = generate_split(config, config.train_size, &mut rng);
    let validation = generate_split(config, config.val_size, &mut rng);
    Ok((train, validation))
}

/// Generates, builds the vocabulary over the training split, and encodes
/// both splits.
pub fn generate_encoded(
    config: &SynthConfig,
) -> Result<(Dataset, Dataset, Vocabulary, LabelManifest), CorpusError> {
    let (raw_train, raw_val) = generate(config)?;
    let vocab = Vocabulary::build(raw_train.texts(), 1)?;
    let labels = raw_train.labels.clone();
    let train = encode_dataset(&raw_train, &vocab, &labels, Split::Train)?;
    let validation = encode_dataset(&raw_val, &vocab, &labels, Split::Validation)?;
    Ok((train, validation, vocab, labels))
}

/// Writes both splits as JSONL files, one record per line.
pub fn write_jsonl(raw: &RawDataset, path: &std::path::Path) -> Result<(), CorpusError> {
    let mut body = String::new();
    for example in &raw.examples {
        let line = if example.frozen.is_empty() {
            serde_json::json!({"text": example.reducible, "label": example.label})
        } else {
            serde_json::json!({
                "frozen": example.frozen,
                "reducible": example.reducible,
                "label": example.label,
            })
        };
        body.push_str(&serde_json::to_string(&line).expect("record serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_separable() {
        let config = SynthConfig {
            train_size: 50,
            val_size: 10,
            seed: 3,
            ..SynthConfig::default()
        };
        let (a_train, a_val) = generate(&config).unwrap();
        let (b_train, b_val) = generate(&config).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        // every example carries at least one keyword of its own class
        for e in &a_train.examples {
            assert!(
                e.reducible.split(' ').any(|t| t.starts_with(&e.label)),
                "example `{}` lacks a {} keyword",
                e.reducible,
                e.label
            );
        }
    }

    #[test]
    fn encoded_splits_share_vocabulary_and_manifest() {
        let config = SynthConfig {
            train_size: 40,
            val_size: 20,
            with_frozen: true,
            seed: 8,
            ..SynthConfig::default()
        };
        let (train, val, vocab, labels) = generate_encoded(&config).unwrap();
        assert_eq!(train.num_classes, labels.len() as u32);
        assert_eq!(val.num_classes, labels.len() as u32);
        assert!(!train.examples.iter().any(|e| e.frozen.is_empty()));
        for e in train.examples.iter().chain(&val.examples) {
            for &id in e.reducible.iter().chain(&e.frozen) {
                assert!((id as usize) < vocab.len());
            }
        }
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let config = SynthConfig {
            train_size: 2000,
            val_size: 0,
            label_noise: 0.1,
            seed: 2,
            ..SynthConfig::default()
        };
        let (raw, _) = generate(&config).unwrap();
        let flipped = raw
            .examples
            .iter()
            .filter(|e| !e.reducible.split(' ').any(|t| t.starts_with(&e.label)))
            .count();
        let rate = flipped as f64 / raw.examples.len() as f64;
        assert!((rate - 0.1).abs() < 0.03, "flip rate {rate}");
    }

    #[test]
    fn jsonl_round_trip_matches_generated_records() {
        let config = SynthConfig {
            train_size: 12,
            val_size: 4,
            seed: 1,
            ..SynthConfig::default()
        };
        let (raw, _) = generate(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&raw, &path).unwrap();
        let loaded = crate::corpus::load_jsonl(&path).unwrap();
        assert_eq!(loaded.examples, raw.examples);
        assert_eq!(loaded.labels, raw.labels);
    }
}
