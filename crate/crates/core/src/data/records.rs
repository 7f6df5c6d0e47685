use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use super::DataError;
use crate::rewards::TokenRewardVector;

/// One preference record as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
    /// Byte range `[start, end)` of a planted error inside `rejected`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_span: Option<[usize; 2]>,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: &str| DataError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.instruction.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(invalid("instruction, chosen and rejected must be non-empty"));
        }
        if self.chosen == self.rejected {
            return Err(invalid("chosen and rejected are identical"));
        }
        if let Some([start, end]) = self.planted_span {
            if start >= end || end > self.rejected.len() {
                return Err(invalid("planted span lies outside the rejected text"));
            }
        }
        Ok(())
    }

    pub fn planted_range(&self) -> Option<Range<usize>> {
        self.planted_span.map(|[s, e]| s..e)
    }
}

const REQUIRED_FIELDS: [&str; 4] = ["id", "instruction", "chosen", "rejected"];

/// Parses one line-delimited record file, validating every record.
///
/// Blank lines are skipped. Record order is preserved.
pub fn parse_records(text: &str) -> Result<Vec<PreferenceRecord>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DataError::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        for field in REQUIRED_FIELDS {
            match obj.get(field) {
                Some(serde_json::Value::String(_)) => {}
                Some(_) => {
                    return Err(DataError::Parse {
                        line: line_no,
                        message: format!("field `{field}` must be a string"),
                    })
                }
                None => {
                    return Err(DataError::MissingField {
                        line: line_no,
                        field,
                    })
                }
            }
        }
        let record: PreferenceRecord = serde_json::from_value(value).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId {
                id: record.id,
                line: line_no,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_records(&text)
}

pub fn write_records(path: impl AsRef<Path>, records: &[PreferenceRecord]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialise");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Token-level realisation of a [`PreferenceRecord`].
///
/// Both sides share `prompt`; a full sequence is `prompt ++ response`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    /// Token indices of the planted span within the rejected response.
    pub planted_span: Option<Range<usize>>,
    rewards: Option<(TokenRewardVector, TokenRewardVector)>,
}

impl PreferencePair {
    pub fn new(id: impl Into<String>, prompt: Vec<u32>, chosen: Vec<u32>, rejected: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            prompt,
            chosen,
            rejected,
            planted_span: None,
            rewards: None,
        }
    }

    pub fn from_record(record: &PreferenceRecord, tok: &Tokenizer, context_len: usize) -> Result<Self, DataError> {
        record.validate()?;
        let prompt = tok.encode_prompt(&record.instruction);
        let chosen = tok.encode_response(&record.chosen);
        let rejected_enc = tok.encode_with_offsets(&record.rejected);
        let planted_span = record.planted_range().map(|span| {
            let idx: Vec<usize> = rejected_enc
                .iter()
                .enumerate()
                .filter(|(_, (_, r))| r.start < span.end && span.start < r.end)
                .map(|(i, _)| i)
                .collect();
            idx[0]..idx[idx.len() - 1] + 1
        });
        let mut rejected: Vec<u32> = rejected_enc.into_iter().map(|(t, _)| t).collect();
        rejected.push(super::tokenizer::EOS);
        let longest = prompt.len() + chosen.len().max(rejected.len());
        if longest > context_len {
            return Err(DataError::TooLong {
                id: record.id.clone(),
                len: longest,
                context_len,
            });
        }
        Ok(Self {
            id: record.id.clone(),
            prompt,
            chosen,
            rejected,
            planted_span,
            rewards: None,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn chosen_sequence(&self) -> Vec<u32> {
        [self.prompt.as_slice(), self.chosen.as_slice()].concat()
    }

    pub fn rejected_sequence(&self) -> Vec<u32> {
        [self.prompt.as_slice(), self.rejected.as_slice()].concat()
    }

    /// Attaches token rewards for (chosen, rejected); lengths must match.
    pub fn attach_rewards(&mut self, chosen: TokenRewardVector, rejected: TokenRewardVector) -> Result<(), DataError> {
        if chosen.len() != self.chosen.len() || rejected.len() != self.rejected.len() {
            return Err(DataError::Invalid {
                id: self.id.clone(),
                reason: format!(
                    "reward lengths ({}, {}) do not match responses ({}, {})",
                    chosen.len(),
                    rejected.len(),
                    self.chosen.len(),
                    self.rejected.len()
                ),
            });
        }
        self.rewards = Some((chosen, rejected));
        Ok(())
    }

    pub fn rewards(&self) -> Option<(&TokenRewardVector, &TokenRewardVector)> {
        self.rewards.as_ref().map(|(c, r)| (c, r))
    }

    pub fn clear_rewards(&mut self) {
        self.rewards = None;
    }
}

pub fn tokenize_records(
    records: &[PreferenceRecord],
    tok: &Tokenizer,
    context_len: usize,
) -> Result<Vec<PreferencePair>, DataError> {
    records
        .iter()
        .map(|r| PreferencePair::from_record(r, tok, context_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> PreferenceRecord {
        PreferenceRecord {
            id: id.into(),
            instruction: "Say hi".into(),
            chosen: "Hi!".into(),
            rejected: "Go away.".into(),
            planted_span: None,
        }
    }

    #[test]
    fn empty_file_gives_no_records() {
        assert!(parse_records("").unwrap().is_empty());
        assert!(parse_records("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_records(r#"{"id":"a","instruction":"x","chosen":"y"}"#).unwrap_err();
        assert!(matches!(err, DataError::MissingField { line: 1, field: "rejected" }));
        assert!(err.to_string().contains("rejected"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&rec("a")).unwrap();
        let err = parse_records(&format!("{good}\n{{not json\n")).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let good = serde_json::to_string(&rec("a")).unwrap();
        let err = parse_records(&format!("{good}\n{good}\n")).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let mut r = rec("a");
        r.rejected = r.chosen.clone();
        assert!(r.validate().is_err());
        let mut r = rec("b");
        r.planted_span = Some([3, 40]);
        assert!(r.validate().is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mut b = rec("b");
        b.instruction = "Unicode ✓ \"quotes\"\n\ttabs".into();
        b.planted_span = Some([0, 2]);
        let records = vec![rec("a"), b];
        write_records(&path, &records).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
    }

    #[test]
    fn planted_span_projects_to_tokens() {
        let mut r = rec("a");
        r.rejected = "abcdef".into();
        r.planted_span = Some([2, 4]);
        let pair = PreferencePair::from_record(&r, &Tokenizer::new(), 64).unwrap();
        assert_eq!(pair.planted_span, Some(2..4));
        assert_eq!(pair.rejected.len(), 7);
    }

    #[test]
    fn over_long_pairs_are_an_error() {
        let err = PreferencePair::from_record(&rec("a"), &Tokenizer::new(), 8).unwrap_err();
        assert!(matches!(err, DataError::TooLong { .. }));
    }
}
