//! Held-out evaluation.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{PairBatch, PreferencePair};
use crate::diagnostics::{score_credit, CreditMetrics};
use crate::losses::{reference_logprobs, BaseObjective, LossConfig, ReferenceLogprobs};
use crate::model::PolicyState;
use crate::numerics::log_sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pairs: usize,
    /// Mean base-objective loss (no regularizer, no SFT term).
    pub loss: f64,
    /// Fraction of pairs with a positive DPO reward margin.
    pub accuracy: f64,
    pub mean_margin: f64,
    /// Present when every pair carries a planted span.
    pub credit: Option<CreditMetrics>,
}

/// Evaluates `policy` against a frozen `reference` on `pairs`.
pub fn evaluate(
    policy: &PolicyState,
    reference: &PolicyState,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
    chunk: usize,
) -> Result<EvalMetrics, TrainError> {
    let lp = reference_logprobs(reference, pairs, chunk)?;
    evaluate_with_reference(policy, pairs, &lp, cfg, chunk)
}

/// As [`evaluate`], with reference log-probs already computed.
pub fn evaluate_with_reference(
    policy: &PolicyState,
    pairs: &[PreferencePair],
    reference: &[ReferenceLogprobs],
    cfg: &LossConfig,
    chunk: usize,
) -> Result<EvalMetrics, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    if reference.len() != pairs.len() {
        return Err(TrainError::Config("reference log-probs do not match the evaluation set".into()));
    }
    let beta = cfg.beta;
    let (mut loss, mut margin_sum, mut correct) = (0.0, 0.0, 0usize);
    let mut rejected_ratio: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let batch = PairBatch::new(pairs, c.to_vec(), 0)?;
        let rows = policy.batch_logprobs(&batch.sequences)?;
        let n = c.len();
        for (k, &i) in c.iter().enumerate() {
            let (w, l, r) = (&rows[k], &rows[n + k], &reference[i]);
            let (sw, sl): (f64, f64) = (w.iter().sum(), l.iter().sum());
            let margin = beta * ((sw - sl) - (r.chosen_sum() - r.rejected_sum()));
            let m = match cfg.base {
                BaseObjective::Dpo => margin,
                BaseObjective::Simpo => {
                    beta * (sw / w.len() as f64 - sl / l.len() as f64) - cfg.simpo_gamma
                }
            };
            loss -= log_sigmoid(m);
            margin_sum += margin;
            correct += usize::from(margin > 0.0);
            rejected_ratio.push(l.iter().zip(&r.rejected).map(|(a, b)| a - b).collect());
        }
    }
    let n = pairs.len() as f64;
    let credit = if pairs.iter().all(|p| p.planted_span.is_some()) {
        score_credit(
            rejected_ratio
                .iter()
                .zip(pairs)
                .map(|(v, p)| (v.as_slice(), p.planted_span.clone().expect("checked"))),
        )
    } else {
        None
    };
    Ok(EvalMetrics {
        pairs: pairs.len(),
        loss: loss / n,
        accuracy: correct as f64 / n,
        mean_margin: margin_sum / n,
        credit,
    })
}
