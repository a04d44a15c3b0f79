//! Dataset ingestion, tokenization, vocabulary construction, and segment
//! bookkeeping.
//!
//! Examples carry two segments: a *reducible* one (the part token deletion
//! operates on) and an optional *frozen* one that is never touched, so both
//! single-input and paired-input tasks run through one code path.
//!
//! File formats:
//! - dataset: UTF-8 JSONL, each line either `{"text","label"}` or
//!   `{"frozen","reducible","label"}`
//! - label manifest: JSON array of label strings, index = class id
//! - vocabulary: JSON object `{"tokens":[...], "min_count":n}`, index = id,
//!   specials first

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: not a JSON object: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: field `{field}` must be a JSON string")]
    BadFieldType { line: usize, field: String },
    #[error("example {index}: reducible segment is empty after tokenization")]
    EmptyReducible { index: usize },
    #[error("empty corpus: no tokens to build a vocabulary from")]
    EmptyCorpus,
    #[error("min_count must be >= 1, got {0}")]
    BadMinCount(u32),
    #[error("invalid vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("invalid label manifest: {0}")]
    BadLabelFile(String),
    #[error("dataset has no examples")]
    EmptyDataset,
    #[error("example {index}: label `{label}` is not in the manifest")]
    UnknownLabel { index: usize, label: String },
    #[error("token id {0} is out of range for this vocabulary")]
    InvalidTokenId(u32),
}

/// Lowercase, detach punctuation into standalone tokens, split on whitespace.
///
/// Every non-alphanumeric, non-whitespace character becomes its own token, so
/// `"What did Tesla spend?"` tokenizes to `["what","did","tesla","spend","?"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token alphabet with two reserved specials: PAD (id 0, never appears in
/// examples) and UNK (id 1, target of out-of-vocabulary tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    min_count: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_count: u32,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;

    /// Builds the vocabulary over all text seen in `texts`. Ids are assigned
    /// in descending frequency with lexicographic tie-break; tokens rarer
    /// than `min_count` are dropped (they will encode to UNK).
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: u32,
    ) -> Result<Self, CorpusError> {
        if min_count < 1 {
            return Err(CorpusError::BadMinCount(min_count));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut items: Vec<(String, u64)> = counts.into_iter().collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(
            items
                .into_iter()
                .filter(|(_, c)| *c >= u64::from(min_count))
                .map(|(t, _)| t),
        );
        Self::from_tokens(id_to_token, min_count)
    }

    fn from_tokens(id_to_token: Vec<String>, min_count: u32) -> Result<Self, CorpusError> {
        if id_to_token.len() < 2
            || id_to_token[0] != PAD_TOKEN
            || id_to_token[1] != UNK_TOKEN
        {
            return Err(CorpusError::BadVocabFile(
                "specials must come first: [\"<pad>\", \"<unk>\", ...]".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), id as u32).is_some() {
                return Err(CorpusError::BadVocabFile(format!(
                    "duplicate token `{token}`"
                )));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the two specials
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    /// Maps a surface token to its id; out-of-vocabulary tokens map to UNK.
    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id
            .get(token)
            .copied()
            .unwrap_or(Self::UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, CorpusError> {
        ids.iter()
            .map(|&id| {
                self.token_of(id)
                    .map(str::to_string)
                    .ok_or(CorpusError::InvalidTokenId(id))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = VocabFile {
            tokens: self.id_to_token.clone(),
            min_count: self.min_count,
        };
        let body = serde_json::to_string_pretty(&file).expect("vocab serializes");
        fs::write(path, body).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let body = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: VocabFile = serde_json::from_str(&body)
            .map_err(|e| CorpusError::BadVocabFile(e.to_string()))?;
        Self::from_tokens(file.tokens, file.min_count)
    }
}

/// Dense class-id assignment in first-seen order over the training file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelManifest {
    labels: Vec<String>,
}

impl LabelManifest {
    pub fn from_labels(labels: Vec<String>) -> Self {
        LabelManifest { labels }
    }

    pub fn id_of(&self, label: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == label).map(|i| i as u32)
    }

    pub fn label_of(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn intern(&mut self, label: &str) -> u32 {
        match self.id_of(label) {
            Some(id) => id,
            None => {
                self.labels.push(label.to_string());
                (self.labels.len() - 1) as u32
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body = serde_json::to_string_pretty(&self.labels).expect("labels serialize");
        fs::write(path, body).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let body = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let labels: Vec<String> = serde_json::from_str(&body)
            .map_err(|e| CorpusError::BadLabelFile(e.to_string()))?;
        Ok(LabelManifest { labels })
    }
}

/// One dataset record as read from disk, before vocabulary encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub frozen: String,
    pub reducible: String,
    pub label: String,
}

/// All records of one JSONL file plus the label manifest induced by it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub examples: Vec<RawExample>,
    pub labels: LabelManifest,
}

impl RawDataset {
    /// Iterates over every text field, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples
            .iter()
            .flat_map(|e| [e.frozen.as_str(), e.reducible.as_str()])
    }
}

/// Parses a JSONL dataset file. Single-field records (`{"text","label"}`)
/// put all tokens into the reducible segment; paired records keep the frozen
/// segment untouched. Labels are interned in first-seen order.
pub fn load_jsonl(path: &Path) -> Result<RawDataset, CorpusError> {
    let body = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut examples = Vec::new();
    let mut labels = LabelManifest::default();
    for (i, line) in body.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                line: lineno,
                msg: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::MalformedLine {
            line: lineno,
            msg: "expected a JSON object".into(),
        })?;
        let get_str = |field: &str| -> Result<String, CorpusError> {
            match obj.get(field) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(CorpusError::BadFieldType {
                    line: lineno,
                    field: field.into(),
                }),
                None => Err(CorpusError::MissingField {
                    line: lineno,
                    field: field.into(),
                }),
            }
        };
        let (frozen, reducible) = if obj.contains_key("text") {
            for key in obj.keys() {
                if key != "text" && key != "label" {
                    return Err(CorpusError::UnknownField {
                        line: lineno,
                        field: key.clone(),
                    });
                }
            }
            (String::new(), get_str("text")?)
        } else {
            for key in obj.keys() {
                if key != "frozen" && key != "reducible" && key != "label" {
                    return Err(CorpusError::UnknownField {
                        line: lineno,
                        field: key.clone(),
                    });
                }
            }
            (get_str("frozen")?, get_str("reducible")?)
        };
        let label = get_str("label")?;
        labels.intern(&label);
        examples.push(RawExample {
            frozen,
            reducible,
            label,
        });
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    Ok(RawDataset { examples, labels })
}

/// Tokenized input with a reducible segment, a frozen segment, and a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedExample {
    pub id: u32,
    pub reducible: Vec<u32>,
    pub frozen: Vec<u32>,
    pub label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<SegmentedExample>,
    pub num_classes: u32,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Encodes raw records into id space against a fixed vocabulary and label
/// manifest (use the training manifest for validation data).
pub fn encode_dataset(
    raw: &RawDataset,
    vocab: &Vocabulary,
    labels: &LabelManifest,
    split: Split,
) -> Result<Dataset, CorpusError> {
    if raw.examples.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let mut examples = Vec::with_capacity(raw.examples.len());
    for (index, e) in raw.examples.iter().enumerate() {
        let reducible = vocab.encode(&tokenize(&e.reducible));
        if reducible.is_empty() {
            return Err(CorpusError::EmptyReducible { index });
        }
        let frozen = vocab.encode(&tokenize(&e.frozen));
        let label = labels
            .id_of(&e.label)
            .ok_or_else(|| CorpusError::UnknownLabel {
                index,
                label: e.label.clone(),
            })?;
        examples.push(SegmentedExample {
            id: index as u32,
            reducible,
            frozen,
            label,
        });
    }
    Ok(Dataset {
        examples,
        num_classes: labels.len() as u32,
        split,
    })
}
