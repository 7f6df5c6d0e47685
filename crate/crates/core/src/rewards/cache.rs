//! On-disk cache of contrastive token rewards.
//!
//! The evaluator is frozen, so rewards are computed once per record and
//! reused by every training step. One JSON object per line:
//! `{"id", "side", "source", "evaluator", "values"}`, keyed by
//! (evaluator fingerprint, record id, side).

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{record_contrastive_rewards, RewardError, RewardSource, TokenRewardVector};
use crate::data::{PreferenceRecord, Tokenizer};
use crate::model::PolicyState;

pub const CACHE_DIR_ENV: &str = "TREG_CACHE_DIR";

/// `$TREG_CACHE_DIR`, or `.treg-cache` in the working directory.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".treg-cache"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Chosen,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub side: Side,
    pub source: RewardSource,
    pub evaluator: String,
    pub values: Vec<f64>,
}

type Key = (String, String, Side);

#[derive(Debug)]
pub struct RewardCache {
    path: PathBuf,
    entries: HashMap<Key, CacheEntry>,
}

impl RewardCache {
    /// Opens (or starts) the cache file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RewardError> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| cache_err(&path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(line)
                    .map_err(|e| cache_err(&path, format!("line {}: {e}", i + 1)))?;
                entries.insert((e.evaluator.clone(), e.id.clone(), e.side), e);
            }
        }
        Ok(Self { path, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, evaluator: &str, id: &str, side: Side) -> Option<TokenRewardVector> {
        self.entries
            .get(&(evaluator.to_string(), id.to_string(), side))
            .map(|e| TokenRewardVector {
                values: e.values.clone(),
                source: e.source,
            })
    }

    /// Both sides of a record, if cached.
    pub fn pair(&self, evaluator: &str, id: &str) -> Option<(TokenRewardVector, TokenRewardVector)> {
        Some((self.get(evaluator, id, Side::Chosen)?, self.get(evaluator, id, Side::Rejected)?))
    }

    /// Appends entries to the file and the in-memory index.
    pub fn extend(&mut self, new: Vec<CacheEntry>) -> Result<(), RewardError> {
        if new.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| cache_err(&self.path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| cache_err(&self.path, e))?;
        let mut w = BufWriter::new(file);
        for e in new {
            let line = serde_json::to_string(&e).expect("entries serialise");
            writeln!(w, "{line}").map_err(|e| cache_err(&self.path, e))?;
            self.entries.insert((e.evaluator.clone(), e.id.clone(), e.side), e);
        }
        w.flush().map_err(|e| cache_err(&self.path, e))
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> RewardError {
    RewardError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AnnotateSummary {
    /// Reward vectors newly written (two per annotated record).
    pub written: usize,
    /// Reward vectors already present for this evaluator.
    pub reused: usize,
    /// Records that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Computes and caches contrastive rewards for every record not yet cached
/// under this evaluator. Records that overflow the context are skipped.
pub fn annotate(
    evaluator: &PolicyState,
    tok: &Tokenizer,
    records: &[PreferenceRecord],
    cache: &mut RewardCache,
) -> Result<AnnotateSummary, RewardError> {
    let hash = evaluator.fingerprint();
    let mut summary = AnnotateSummary::default();
    let mut fresh = Vec::new();
    for r in records {
        if cache.pair(&hash, &r.id).is_some() {
            summary.reused += 2;
            continue;
        }
        match record_contrastive_rewards(evaluator, tok, r) {
            Ok((c, j)) => {
                for (side, v) in [(Side::Chosen, c), (Side::Rejected, j)] {
                    fresh.push(CacheEntry {
                        id: r.id.clone(),
                        side,
                        source: v.source,
                        evaluator: hash.clone(),
                        values: v.values,
                    });
                }
                summary.written += 2;
            }
            Err(e @ RewardError::TooLong { .. }) => summary.skipped.push((r.id.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    cache.extend(fresh)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_planted_task;
    use crate::model::{ModelConfig, Role};

    fn evaluator() -> PolicyState {
        PolicyState::init(ModelConfig {
            context_len: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        })
        .unwrap()
        .freeze_copy(Role::Evaluator)
    }

    #[test]
    fn annotate_is_idempotent_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c/rewards.jsonl");
        let eval = evaluator();
        let tok = Tokenizer::new();
        let mut records = make_synthetic_planted_task(4, 0);
        records[2].chosen = "x".repeat(80);
        let mut cache = RewardCache::open(&path).unwrap();
        let s = annotate(&eval, &tok, &records, &mut cache).unwrap();
        assert_eq!(s.written, 2 * records.len() - 2 * s.skipped.len());
        assert_eq!(s.skipped.len(), 1);
        let bytes = fs::read(&path).unwrap();

        let mut reopened = RewardCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 6);
        let again = annotate(&eval, &tok, &records, &mut reopened).unwrap();
        assert_eq!(again.written, 0);
        assert_eq!(again.reused, 6);
        assert_eq!(fs::read(&path).unwrap(), bytes);

        let hash = eval.fingerprint();
        let (c, j) = reopened.pair(&hash, &records[0].id).unwrap();
        let (c2, j2) = record_contrastive_rewards(&eval, &tok, &records[0]).unwrap();
        assert_eq!((c, j), (c2, j2));
        assert!(reopened.pair("other", &records[0].id).is_none());
    }

    #[test]
    fn malformed_cache_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{not json}\n").unwrap();
        let e = RewardCache::open(&path).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }
}
