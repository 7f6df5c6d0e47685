//! Planted-task experiments end to end: synthesize data, warm up the
//! starting model, annotate token rewards and train.

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_planted_task, planted_sft_corpus, PreferencePair, PreferenceRecord, Tokenizer};
use crate::model::{ModelConfig, PolicyState, Role};
use crate::rewards::record_contrastive_rewards;
use crate::trainer::{train_sft, SftConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub model: ModelConfig,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub data_seed: u64,
    pub sft: SftConfig,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train_pairs: 2000,
            eval_pairs: 200,
            data_seed: 0,
            sft: SftConfig::default(),
        }
    }
}

/// Training and held-out records. Held-out words come from a different
/// seed stream.
pub fn planted_records(cfg: &PlantedConfig) -> (Vec<PreferenceRecord>, Vec<PreferenceRecord>) {
    let train = make_synthetic_planted_task(cfg.train_pairs, cfg.data_seed);
    let eval = make_synthetic_planted_task(cfg.eval_pairs, cfg.data_seed.wrapping_add(0x9e37_79b9));
    (train, eval)
}

/// Fresh model after supervised warm-up on the training records, plus the
/// per-step warm-up losses.
pub fn warm_start(cfg: &PlantedConfig, records: &[PreferenceRecord]) -> Result<(PolicyState, Vec<f64>), TrainError> {
    let tok = Tokenizer::new();
    let corpus = planted_sft_corpus(records, &tok, cfg.data_seed);
    let mut model = PolicyState::init(cfg.model.clone())?;
    let losses = train_sft(&mut model, &corpus, &cfg.sft)?;
    Ok((model, losses))
}

/// Tokenizes `records` and, when `evaluator` is given, attaches its
/// contrastive token rewards.
pub fn annotated_pairs(
    records: &[PreferenceRecord],
    evaluator: Option<&PolicyState>,
    context_len: usize,
) -> Result<Vec<PreferencePair>, TrainError> {
    let tok = Tokenizer::new();
    records
        .iter()
        .map(|r| {
            let mut p = PreferencePair::from_record(r, &tok, context_len)?;
            if let Some(e) = evaluator {
                let (c, j) = record_contrastive_rewards(e, &tok, r)?;
                p.attach_rewards(c, j)?;
            }
            Ok(p)
        })
        .collect()
}

/// Everything a planted-task training run starts from.
pub struct PlantedSetup {
    /// Warm-started weights; the policy's initial state.
    pub init: PolicyState,
    pub reference: PolicyState,
    pub evaluator: PolicyState,
    pub train: Vec<PreferencePair>,
    pub eval: Vec<PreferencePair>,
    pub sft_losses: Vec<f64>,
}

pub fn prepare_planted(cfg: &PlantedConfig) -> Result<PlantedSetup, TrainError> {
    let (train_records, eval_records) = planted_records(cfg);
    let (init, sft_losses) = warm_start(cfg, &train_records)?;
    let evaluator = init.freeze_copy(Role::Evaluator);
    let ctx = cfg.model.context_len;
    Ok(PlantedSetup {
        reference: init.freeze_copy(Role::Reference),
        train: annotated_pairs(&train_records, Some(&evaluator), ctx)?,
        eval: annotated_pairs(&eval_records, None, ctx)?,
        evaluator,
        init,
        sft_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PlantedConfig {
        PlantedConfig {
            model: ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ..ModelConfig::default()
            },
            train_pairs: 6,
            eval_pairs: 3,
            data_seed: 4,
            sft: SftConfig {
                steps: 3,
                batch_size: 4,
                warmup_steps: 1,
                ..SftConfig::default()
            },
        }
    }

    #[test]
    fn held_out_records_come_from_another_stream() {
        let (train, eval) = planted_records(&tiny());
        assert_eq!((train.len(), eval.len()), (6, 3));
        assert!(eval.iter().all(|e| train.iter().all(|t| t.instruction != e.instruction)));
    }

    #[test]
    fn setup_roles_and_rewards() {
        let s = prepare_planted(&tiny()).unwrap();
        assert_eq!(s.sft_losses.len(), 3);
        assert!(!s.init.is_frozen());
        assert_eq!(s.reference.role(), Role::Reference);
        assert_eq!(s.evaluator.role(), Role::Evaluator);
        for (a, b) in s.reference.params().iter().zip(s.init.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(s.train.iter().all(|p| p.rewards().is_some() && p.planted_span.is_some()));
        assert!(s.eval.iter().all(|p| p.rewards().is_none()));
    }
}
