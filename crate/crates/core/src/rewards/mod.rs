//! Token-level rewards.
//!
//! Two sources are supported:
//!
//! * **contrastive**: a frozen evaluator scores the answer twice, once after
//!   a prompt asking for a *better* rewrite and once after a prompt asking
//!   for a *worse* one. Each token's reward is `σ(lp_better − lp_worse) − ½`.
//! * **dpo_implicit**: `β · (log π_θ − log π_ref)` per token.

mod cache;
pub mod template;

pub use cache::{annotate, default_cache_dir, AnnotateSummary, CacheEntry, RewardCache, Side, CACHE_DIR_ENV};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tokenizer, DataError, PreferencePair, PreferenceRecord, Tokenizer};
use crate::model::{ModelError, PolicyState};
use crate::numerics::centered_sigmoid;
use template::Direction;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{what} must be non-empty")]
    Empty { what: &'static str },
    #[error("contrastive prompt plus answer is {len} tokens, context length is {context_len}")]
    TooLong { len: usize, context_len: usize },
    #[error("the evaluator must be a frozen model")]
    NotFrozen,
    #[error("non-finite log-probability at answer token {position}")]
    NonFinite { position: usize },
    #[error("contrastive reward {value} at token {position} is outside [-0.5, 0.5]")]
    OutOfBounds { position: usize, value: f64 },
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("reward cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    Contrastive,
    DpoImplicit,
}

impl std::fmt::Display for RewardSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardSource::Contrastive => "contrastive",
            RewardSource::DpoImplicit => "dpo_implicit",
        })
    }
}

/// Per-token rewards for one response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRewardVector {
    pub values: Vec<f64>,
    pub source: RewardSource,
}

impl TokenRewardVector {
    /// Checks finiteness and, for contrastive rewards, the `[-0.5, 0.5]` bound.
    pub fn new(values: Vec<f64>, source: RewardSource) -> Result<Self, RewardError> {
        for (position, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(RewardError::NonFinite { position });
            }
            if source == RewardSource::Contrastive && !(-0.5..=0.5).contains(&value) {
                return Err(RewardError::OutOfBounds { position, value });
            }
        }
        Ok(Self { values, source })
    }

    pub fn zeros(len: usize, source: RewardSource) -> Self {
        Self {
            values: vec![0.0; len],
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `[BOS]` followed by the revision prompt for `answer_slot`, ending right
/// where the rewritten answer begins.
pub fn contrastive_prefix(tok: &Tokenizer, instruction: &str, answer_slot: &str, direction: Direction) -> Vec<u32> {
    let text = template::render(instruction, answer_slot, direction);
    let mut out = Vec::with_capacity(text.len() / 4 + 1);
    out.push(tokenizer::BOS);
    out.extend(tok.encode(&text));
    out
}

/// The two revision prompts for one answer.
///
/// Each prompt ends exactly where the scored answer begins, so the offsets
/// equal the prompt lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePromptPair {
    pub x_better: Vec<u32>,
    pub x_worse: Vec<u32>,
    pub response_offset_better: usize,
    pub response_offset_worse: usize,
}

impl ContrastivePromptPair {
    pub fn from_prompts(x_better: Vec<u32>, x_worse: Vec<u32>) -> Self {
        Self {
            response_offset_better: x_better.len(),
            response_offset_worse: x_worse.len(),
            x_better,
            x_worse,
        }
    }

    /// Exchanges the two prompts.
    pub fn swapped(&self) -> Self {
        Self::from_prompts(self.x_worse.clone(), self.x_better.clone())
    }

    fn longest(&self) -> usize {
        self.response_offset_better.max(self.response_offset_worse)
    }
}

/// Renders both prompts for `answer`, checking that the scored sequence of
/// `answer_len` tokens still fits `context_len`.
pub fn render_contrastive_prompts(
    tok: &Tokenizer,
    instruction: &str,
    answer: &str,
    answer_len: usize,
    context_len: usize,
) -> Result<ContrastivePromptPair, RewardError> {
    if instruction.is_empty() {
        return Err(RewardError::Empty { what: "instruction" });
    }
    if answer.is_empty() {
        return Err(RewardError::Empty { what: "answer" });
    }
    let pair = ContrastivePromptPair::from_prompts(
        contrastive_prefix(tok, instruction, answer, Direction::Better),
        contrastive_prefix(tok, instruction, answer, Direction::Worse),
    );
    let len = pair.longest() + answer_len;
    if len > context_len {
        return Err(RewardError::TooLong { len, context_len });
    }
    Ok(pair)
}

/// Elementwise `σ(better − worse) − ½`.
pub fn contrastive_from_logprobs(better: &[f64], worse: &[f64]) -> Result<TokenRewardVector, RewardError> {
    if better.len() != worse.len() {
        return Err(RewardError::Mismatch(format!(
            "{} and {} scored tokens",
            better.len(),
            worse.len()
        )));
    }
    let mut values = Vec::with_capacity(better.len());
    for (position, (b, w)) in better.iter().zip(worse).enumerate() {
        if !b.is_finite() || !w.is_finite() {
            return Err(RewardError::NonFinite { position });
        }
        values.push(centered_sigmoid(b - w));
    }
    TokenRewardVector::new(values, RewardSource::Contrastive)
}

/// Contrastive token rewards from exactly two evaluator forward passes.
pub fn contrastive_token_rewards(
    evaluator: &PolicyState,
    prompts: &ContrastivePromptPair,
    answer_tokens: &[u32],
) -> Result<TokenRewardVector, RewardError> {
    if !evaluator.is_frozen() {
        return Err(RewardError::NotFrozen);
    }
    if answer_tokens.is_empty() {
        return Err(RewardError::Empty { what: "answer tokens" });
    }
    let context_len = evaluator.config().context_len;
    let len = prompts.longest() + answer_tokens.len();
    if len > context_len {
        return Err(RewardError::TooLong { len, context_len });
    }
    let score = |prefix: &[u32]| {
        let seq = [prefix, answer_tokens].concat();
        evaluator.forward_logprobs(&seq, prefix.len())
    };
    let better = score(&prompts.x_better)?;
    let worse = score(&prompts.x_worse)?;
    contrastive_from_logprobs(&better, &worse)
}

/// Contrastive rewards for both responses of a record.
///
/// Each answer is embedded in its own pair of revision prompts and scored
/// as `answer [EOS]`, aligned with the tokenized preference pair.
pub fn record_contrastive_rewards(
    evaluator: &PolicyState,
    tok: &Tokenizer,
    record: &PreferenceRecord,
) -> Result<(TokenRewardVector, TokenRewardVector), RewardError> {
    let context_len = evaluator.config().context_len;
    let score = |answer: &str| {
        let tokens = tok.encode_response(answer);
        let prompts = render_contrastive_prompts(tok, &record.instruction, answer, tokens.len(), context_len)?;
        contrastive_token_rewards(evaluator, &prompts, &tokens)
    };
    Ok((score(&record.chosen)?, score(&record.rejected)?))
}

/// Same as [`record_contrastive_rewards`], starting from a tokenized pair.
///
/// Instruction and answers are recovered by decoding; the tokenizer is
/// lossless, so the result equals the record-level computation.
pub fn pair_contrastive_rewards(
    evaluator: &PolicyState,
    tok: &Tokenizer,
    pair: &PreferencePair,
) -> Result<(TokenRewardVector, TokenRewardVector), RewardError> {
    let strip = |tokens: &[u32], first: Option<u32>, last: u32| -> Result<String, RewardError> {
        let mut t = tokens;
        if let Some(f) = first {
            t = t.strip_prefix(&[f]).unwrap_or(t);
        }
        t = t.strip_suffix(&[last]).unwrap_or(t);
        Ok(tok.decode(t)?)
    };
    let record = PreferenceRecord {
        id: pair.id.clone(),
        instruction: strip(&pair.prompt, Some(tokenizer::BOS), tokenizer::SEP)?,
        chosen: strip(&pair.chosen, None, tokenizer::EOS)?,
        rejected: strip(&pair.rejected, None, tokenizer::EOS)?,
        planted_span: None,
    };
    record_contrastive_rewards(evaluator, tok, &record)
}

fn check_pair(policy: &PolicyState, reference: &PolicyState, beta: f64) -> Result<(), RewardError> {
    if !(beta > 0.0) {
        return Err(RewardError::Beta(beta));
    }
    let (a, b) = (policy.config(), reference.config());
    if a.vocab_size != b.vocab_size || a.context_len != b.context_len {
        return Err(RewardError::Mismatch(format!(
            "policy (vocab {}, context {}) vs reference (vocab {}, context {})",
            a.vocab_size, a.context_len, b.vocab_size, b.context_len
        )));
    }
    Ok(())
}

/// `β · (log π_θ(y_t|·) − log π_ref(y_t|·))` per response token.
pub fn dpo_implicit_token_rewards(
    policy: &PolicyState,
    reference: &PolicyState,
    tokens: &[u32],
    prompt_len: usize,
    beta: f64,
) -> Result<TokenRewardVector, RewardError> {
    check_pair(policy, reference, beta)?;
    let lp = policy.forward_logprobs(tokens, prompt_len)?;
    let lr = reference.forward_logprobs(tokens, prompt_len)?;
    TokenRewardVector::new(
        lp.iter().zip(&lr).map(|(a, b)| beta * (a - b)).collect(),
        RewardSource::DpoImplicit,
    )
}

/// Sequence-level DPO reward: the sum of the implicit token rewards.
pub fn dpo_sequence_reward(
    policy: &PolicyState,
    reference: &PolicyState,
    tokens: &[u32],
    prompt_len: usize,
    beta: f64,
) -> Result<f64, RewardError> {
    Ok(dpo_implicit_token_rewards(policy, reference, tokens, prompt_len, beta)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Role};
    use proptest::prelude::*;

    fn evaluator(seed: u64) -> PolicyState {
        PolicyState::init(ModelConfig {
            context_len: 128,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
        .freeze_copy(Role::Evaluator)
    }

    /// Scores answer token `i` with its own forward pass over the prefix.
    fn per_position(eval: &PolicyState, prefix: &[u32], answer: &[u32]) -> Vec<f64> {
        (0..answer.len())
            .map(|i| {
                let mut seq = prefix.to_vec();
                seq.extend(&answer[..i]);
                let dist = eval.next_token_logprobs(&seq).unwrap().pop().unwrap();
                dist[answer[i] as usize]
            })
            .collect()
    }

    #[test]
    fn offsets_equal_preamble_length() {
        let tok = Tokenizer::new();
        let p = render_contrastive_prompts(&tok, "Say hi", "Hi!", 4, 256).unwrap();
        assert_eq!(p.response_offset_better, p.x_better.len());
        assert_eq!(p.response_offset_worse, p.x_worse.len());
        let text = template::render("Say hi", "Hi!", Direction::Better);
        assert_eq!(p.response_offset_better, 1 + tok.encode(&text).len());
        assert_eq!(tok.decode(&p.x_better).unwrap(), text);
    }

    #[test]
    fn empty_inputs_and_overflow_are_errors() {
        let tok = Tokenizer::new();
        assert!(matches!(render_contrastive_prompts(&tok, "", "a", 1, 256), Err(RewardError::Empty { .. })));
        assert!(matches!(render_contrastive_prompts(&tok, "a", "", 1, 256), Err(RewardError::Empty { .. })));
        assert!(matches!(
            render_contrastive_prompts(&tok, "Say hi", "Hi!", 4, 10),
            Err(RewardError::TooLong { .. })
        ));
    }

    #[test]
    fn identical_logprobs_give_zero_and_limits_saturate() {
        let r = contrastive_from_logprobs(&[-1.0, -3.5], &[-1.0, -3.5]).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0]);
        let r = contrastive_from_logprobs(&[0.0, -800.0], &[-800.0, 0.0]).unwrap();
        assert_eq!(r.values, vec![0.5, -0.5]);
        assert!(contrastive_from_logprobs(&[f64::NEG_INFINITY], &[0.0]).is_err());
    }

    #[test]
    fn batched_equals_per_position_and_swap_negates() {
        let tok = Tokenizer::new();
        let eval = evaluator(4);
        let answer = tok.encode_response("Hello there");
        let prompts = render_contrastive_prompts(&tok, "Greet me", "Hello there", answer.len(), 128).unwrap();
        let r = contrastive_token_rewards(&eval, &prompts, &answer).unwrap();
        let b = per_position(&eval, &prompts.x_better, &answer);
        let w = per_position(&eval, &prompts.x_worse, &answer);
        for (i, v) in r.values.iter().enumerate() {
            let oracle = 1.0 / (1.0 + (-(b[i] - w[i])).exp()) - 0.5;
            assert!((v - oracle).abs() < 1e-10, "token {i}: {v} vs {oracle}");
        }
        let s = contrastive_token_rewards(&eval, &prompts.swapped(), &answer).unwrap();
        for (a, b) in r.values.iter().zip(&s.values) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn evaluator_must_be_frozen() {
        let tok = Tokenizer::new();
        let policy = evaluator(0).to_policy();
        let p = render_contrastive_prompts(&tok, "a", "b", 2, 128).unwrap();
        assert!(matches!(
            contrastive_token_rewards(&policy, &p, &tok.encode_response("b")),
            Err(RewardError::NotFrozen)
        ));
    }

    #[test]
    fn dpo_implicit_rewards_at_identity_and_linearity() {
        let reference = evaluator(1).freeze_copy(Role::Reference);
        let mut policy = reference.to_policy();
        let toks = [tokenizer::BOS, 104, 105, tokenizer::SEP, 120, 121, tokenizer::EOS];
        let r = dpo_implicit_token_rewards(&policy, &reference, &toks, 4, 0.1).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        assert_eq!(dpo_sequence_reward(&policy, &reference, &toks, 4, 0.1).unwrap(), 0.0);

        policy.param_mut("head.bias").unwrap().data_mut()[120] += 0.3;
        let a = dpo_implicit_token_rewards(&policy, &reference, &toks, 4, 0.1).unwrap();
        let b = dpo_implicit_token_rewards(&policy, &reference, &toks, 4, 0.2).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        let s = dpo_sequence_reward(&policy, &reference, &toks, 4, 0.1).unwrap();
        assert!((s - a.sum()).abs() < 1e-12);
        assert!(dpo_implicit_token_rewards(&policy, &reference, &toks, 4, 0.0).is_err());
    }

    #[test]
    fn sequence_rewards_match_logprob_margin() {
        let reference = evaluator(2).freeze_copy(Role::Reference);
        let mut policy = reference.to_policy();
        policy.param_mut("head.bias").unwrap().data_mut()[99] -= 0.7;
        let w = [tokenizer::BOS, 97, tokenizer::SEP, 98, 99, tokenizer::EOS];
        let l = [tokenizer::BOS, 97, tokenizer::SEP, 99, 99, 100, tokenizer::EOS];
        let beta = 0.1;
        let rw = dpo_sequence_reward(&policy, &reference, &w, 3, beta).unwrap();
        let rl = dpo_sequence_reward(&policy, &reference, &l, 3, beta).unwrap();
        let direct = beta
            * ((policy.sequence_logprob(&w, 3).unwrap() - reference.sequence_logprob(&w, 3).unwrap())
                - (policy.sequence_logprob(&l, 3).unwrap() - reference.sequence_logprob(&l, 3).unwrap()));
        assert!(((rw - rl) - direct).abs() < 1e-12);
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let a = evaluator(0);
        let b = PolicyState::init(ModelConfig {
            vocab_size: 300,
            context_len: 128,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            seed: 0,
        })
        .unwrap();
        assert!(matches!(
            dpo_implicit_token_rewards(&b, &a, &[1, 2, 3], 1, 0.1),
            Err(RewardError::Mismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn contrastive_rewards_bounded_and_antisymmetric(
            pairs in proptest::collection::vec((-1e4f64..0.0, -1e4f64..0.0), 1..40)
        ) {
            let (b, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = contrastive_from_logprobs(&b, &w).unwrap();
            let s = contrastive_from_logprobs(&w, &b).unwrap();
            for (x, y) in r.values.iter().zip(&s.values) {
                prop_assert!((-0.5..=0.5).contains(x));
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
