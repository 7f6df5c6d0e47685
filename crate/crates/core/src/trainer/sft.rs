//! Supervised warm-up: token-mean negative log-likelihood over responses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, learning_rate, AdamW, AdamWConfig, LrSchedule};
use super::TrainError;
use crate::data::{SequenceBatch, SftExample};
use crate::model::{transformer, Bound, PolicyState};
use crate::numerics::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 75,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Trains `model` in place; returns the loss of every step.
///
/// Examples are visited in reshuffled passes, `batch_size` at a time.
pub fn train_sft(model: &mut PolicyState, examples: &[SftExample], cfg: &SftConfig) -> Result<Vec<f64>, TrainError> {
    if examples.is_empty() && cfg.steps > 0 {
        return Err(TrainError::Config("supervised corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TrainError::Config("sft needs batch_size >= 1 and a positive learning rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(examples.len()) {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let seqs: Vec<(&[u32], usize)> = idx
            .iter()
            .map(|&i| (examples[i].tokens.as_slice(), examples[i].prompt_len))
            .collect();
        let batch = SequenceBatch::from_sequences(&seqs)?;
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = model.bind(&mut g);
            let bound = Bound::new(model.config(), &ids)?;
            let lp = transformer::response_logprobs(model.config(), &mut g, &bound, &batch)?;
            let mean = g.mean(lp.node);
            let nll = g.neg(mean);
            let loss = g.scalar(nll);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: step as u64,
                    what: "sft loss".into(),
                    last_good: None,
                });
            }
            let mut gr = g.backward(nll).map_err(crate::model::ModelError::from)?;
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .zip(model.params())
                .map(|(id, p)| gr.take(*id).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            (loss, grads)
        };
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = learning_rate(
            LrSchedule::CosineWithWarmup,
            cfg.learning_rate,
            step,
            cfg.steps,
            cfg.warmup_steps.min(cfg.steps.saturating_sub(1)),
        );
        opt.step(model.params_mut()?, &grads, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}
