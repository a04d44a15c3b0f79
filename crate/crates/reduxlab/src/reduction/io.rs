//! JSONL serialization of reduction outcomes.
//!
//! The first line of an outcomes file is a header record embedding the
//! provenance stamp; every following line is one outcome: original tokens
//! and ids, the prediction, all minimal reductions as position arrays with
//! per-step removals and confidences, the method tag, and the deterministic
//! model-call count.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MethodTag, MinimalReduction, ReductionOutcome, ReductionStep};
use crate::corpus::{CorpusError, SegmentedExample, Vocabulary};
use crate::importance::ImportanceMethod;
use crate::model::Prediction;
use crate::ArtifactMeta;

pub const OUTCOME_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OutcomeIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("schema version mismatch: file has {found}, this build reads {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFileHeader {
    pub file: String,
    pub schema_version: u32,
    pub meta: ArtifactMeta,
    pub method: String,
    pub importance: ImportanceMethod,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub removed: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalRecord {
    pub positions: Vec<u32>,
    pub confidence: f64,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub example_id: u32,
    pub gold_label: u32,
    pub predicted_label: u32,
    pub original_confidence: f64,
    pub original_probs: Vec<f64>,
    pub reducible_tokens: Vec<String>,
    pub reducible_ids: Vec<u32>,
    pub frozen_tokens: Vec<String>,
    pub frozen_ids: Vec<u32>,
    pub method: String,
    pub minimal: Vec<MinimalRecord>,
    pub model_calls: u64,
}

impl OutcomeRecord {
    pub fn from_outcome<F: crate::model::Scalar>(
        outcome: &ReductionOutcome<F>,
        vocab: &Vocabulary,
    ) -> Result<Self, CorpusError> {
        Ok(OutcomeRecord {
            example_id: outcome.original.id,
            gold_label: outcome.original.label,
            predicted_label: outcome.original_prediction.label,
            original_confidence: outcome.original_prediction.confidence.as_f64(),
            original_probs: outcome
                .original_prediction
                .probs
                .iter()
                .map(|p| p.as_f64())
                .collect(),
            reducible_tokens: vocab.decode(&outcome.original.reducible)?,
            reducible_ids: outcome.original.reducible.clone(),
            frozen_tokens: vocab.decode(&outcome.original.frozen)?,
            frozen_ids: outcome.original.frozen.clone(),
            method: outcome.method.to_string(),
            minimal: outcome
                .minimal
                .iter()
                .map(|m| MinimalRecord {
                    positions: m.positions.clone(),
                    confidence: m.confidence.as_f64(),
                    steps: m
                        .path
                        .iter()
                        .map(|s| StepRecord {
                            removed: s.removed,
                            confidence: s.confidence.as_f64(),
                        })
                        .collect(),
                })
                .collect(),
            model_calls: outcome.model_calls,
        })
    }

    /// Rebuilds the in-memory outcome. Surviving position sets are
    /// reconstructed from the removal sequences; the per-step importance
    /// vectors are not stored on disk and come back as `None`.
    pub fn into_outcome(self) -> Result<ReductionOutcome<f64>, String> {
        let n = self.reducible_ids.len();
        let method: MethodTag = self.method.parse()?;
        let minimal = self
            .minimal
            .into_iter()
            .map(|m| {
                let mut surviving: Vec<u32> = (0..n as u32).collect();
                let mut path = Vec::with_capacity(m.steps.len());
                for step in m.steps {
                    let at = surviving
                        .iter()
                        .position(|&p| p == step.removed)
                        .ok_or_else(|| {
                            format!("step removes position {} twice", step.removed)
                        })?;
                    surviving.remove(at);
                    path.push(ReductionStep {
                        surviving: surviving.clone(),
                        removed: step.removed,
                        confidence: step.confidence,
                        importance: None,
                    });
                }
                if surviving != m.positions {
                    return Err(format!(
                        "steps end at {surviving:?} but minimal set is {:?}",
                        m.positions
                    ));
                }
                Ok(MinimalReduction {
                    positions: m.positions,
                    confidence: m.confidence,
                    path,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let probs = Array1::from_vec(self.original_probs);
        Ok(ReductionOutcome {
            original: SegmentedExample {
                id: self.example_id,
                reducible: self.reducible_ids,
                frozen: self.frozen_ids,
                label: self.gold_label,
            },
            original_prediction: Prediction {
                probs,
                label: self.predicted_label,
                confidence: self.original_confidence,
            },
            minimal,
            method,
            importance_method: ImportanceMethod::InputGradient,
            model_calls: self.model_calls,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> OutcomeIoError {
    OutcomeIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_outcomes<F: crate::model::Scalar>(
    path: &Path,
    outcomes: &[ReductionOutcome<F>],
    vocab: &Vocabulary,
    meta: &ArtifactMeta,
    method: MethodTag,
    importance: ImportanceMethod,
    provenance: Option<&str>,
) -> Result<(), OutcomeIoError> {
    let header = OutcomeFileHeader {
        file: "reduction-outcomes".into(),
        schema_version: OUTCOME_SCHEMA_VERSION,
        meta: meta.clone(),
        method: method.to_string(),
        importance,
        count: outcomes.len(),
        provenance: provenance.map(str::to_string),
    };
    let mut body = serde_json::to_string(&header).expect("header serializes");
    body.push('\n');
    for outcome in outcomes {
        let record = OutcomeRecord::from_outcome(outcome, vocab)?;
        body.push_str(&serde_json::to_string(&record).expect("record serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn read_outcomes(
    path: &Path,
) -> Result<(OutcomeFileHeader, Vec<OutcomeRecord>), OutcomeIoError> {
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = body.lines().enumerate();
    let (_, first) = lines.next().ok_or(OutcomeIoError::MissingHeader)?;
    let header: OutcomeFileHeader =
        serde_json::from_str(first).map_err(|e| OutcomeIoError::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.schema_version != OUTCOME_SCHEMA_VERSION {
        return Err(OutcomeIoError::SchemaVersion {
            found: header.schema_version,
            expected: OUTCOME_SCHEMA_VERSION,
        });
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: OutcomeRecord =
            serde_json::from_str(line).map_err(|e| OutcomeIoError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        records.push(record);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, Split};
    use crate::model::{init_params, ModelDims};
    use crate::reduction::{reduce_dataset, ReduceOptions};

    #[test]
    fn outcomes_round_trip_through_jsonl() {
        let vocab = Vocabulary::build(["alpha beta gamma delta epsilon zeta"], 1).unwrap();
        let params = init_params(
            ModelDims {
                vocab_size: vocab.len(),
                embed_dim: 3,
                hidden_dims: vec![4],
                num_classes: 2,
            },
            13,
        )
        .unwrap()
        .cast::<f64>();
        let ds = Dataset {
            examples: vec![
                SegmentedExample {
                    id: 0,
                    reducible: vec![2, 3, 4, 5],
                    frozen: vec![6],
                    label: 0,
                },
                SegmentedExample {
                    id: 1,
                    reducible: vec![4, 5, 6, 2, 3],
                    frozen: vec![],
                    label: 1,
                },
            ],
            num_classes: 2,
            split: Split::Validation,
        };
        let result = reduce_dataset(&params, &ds, &ReduceOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outcomes.jsonl");
        let meta = ArtifactMeta::new("deadbeef", 13);
        write_outcomes(
            &path,
            &result.outcomes,
            &vocab,
            &meta,
            MethodTag::Beam(5),
            ImportanceMethod::InputGradient,
            None,
        )
        .unwrap();
        let (header, records) = read_outcomes(&path).unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(header.count, 2);
        assert_eq!(records.len(), 2);
        for (record, outcome) in records.into_iter().zip(&result.outcomes) {
            let rebuilt = record.into_outcome().unwrap();
            assert_eq!(rebuilt.original, outcome.original);
            assert_eq!(
                rebuilt.original_prediction.label,
                outcome.original_prediction.label
            );
            assert_eq!(rebuilt.minimal.len(), outcome.minimal.len());
            for (a, b) in rebuilt.minimal.iter().zip(&outcome.minimal) {
                assert_eq!(a.positions, b.positions);
                // surviving sets reconstructed from removal sequences
                for (sa, sb) in a.path.iter().zip(&b.path) {
                    assert_eq!(sa.surviving, sb.surviving);
                    assert_eq!(sa.removed, sb.removed);
                }
            }
        }
    }

    #[test]
    fn schema_version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outcomes.jsonl");
        let header = OutcomeFileHeader {
            file: "reduction-outcomes".into(),
            schema_version: 999,
            meta: ArtifactMeta::new("x", 0),
            method: "greedy".into(),
            importance: ImportanceMethod::InputGradient,
            count: 0,
            provenance: None,
        };
        fs::write(&path, serde_json::to_string(&header).unwrap() + "\n").unwrap();
        assert!(matches!(
            read_outcomes(&path),
            Err(OutcomeIoError::SchemaVersion { found: 999, .. })
        ));
    }
}
