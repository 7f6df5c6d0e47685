//! Preference-optimization training loop.
//!
//! Each step draws a mini-batch, looks up (or, in strict mode, recomputes)
//! the contrastive token rewards, records the configured loss on a fresh
//! tape, backpropagates, clips the global gradient norm and applies AdamW.
//! Batch order, learning rate and optimizer state are pure functions of the
//! configuration and the step counter, so a checkpointed run resumes
//! bit-exactly.

mod eval;
pub mod optim;
pub mod sft;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_order, batches_per_epoch, DataError, PairBatch, PreferencePair, Tokenizer};
use crate::losses::{self, LossConfig, LossError, PairInputs, ReferenceLogprobs};
use crate::model::{save_checkpoint, Checkpoint, ModelError, PolicyState};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rewards::{self, RewardError, TokenRewardVector};

pub use eval::{evaluate, evaluate_with_reference, EvalMetrics};
pub use optim::{clip_global_norm, global_norm, learning_rate, AdamW, AdamWConfig, LrSchedule};
pub use sft::{train_sft, SftConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}{}", last_good_suffix(.last_good))]
    NonFinite {
        step: u64,
        what: String,
        last_good: Option<PathBuf>,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn last_good_suffix(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!("; last good checkpoint: {}", p.display()),
        None => "; no checkpoint written yet".to_string(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Defaults to 10% of the total steps.
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub drop_last: bool,
    /// Evaluate on the held-out set every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: usize,
    /// Recompute contrastive rewards inside the loop instead of using the cache.
    pub strict_rewards: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            learning_rate: 5e-5,
            lr_schedule: LrSchedule::CosineWithWarmup,
            warmup_steps: None,
            grad_clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            drop_last: false,
            eval_every: 0,
            eval_batch_size: 32,
            checkpoint_dir: None,
            checkpoint_every: 0,
            strict_rewards: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_pairs: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * batches_per_epoch(n_pairs, self.batch_size.max(1), self.drop_last))
    }

    pub fn warmup(&self, total: usize) -> usize {
        self.warmup_steps.unwrap_or(total / 10)
    }

    pub fn validate(&self, n_pairs: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.eval_batch_size == 0 {
            return bad("train.eval_batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be a positive finite number".into());
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("train.grad_clip_norm must be non-negative".into());
        }
        let total = self.total_steps(n_pairs);
        if total > 0 && self.lr_schedule == LrSchedule::CosineWithWarmup && self.warmup(total) >= total {
            return bad(format!(
                "train.warmup_steps ({}) must be smaller than the total steps ({total})",
                self.warmup(total)
            ));
        }
        if total > 0 && n_pairs == 0 {
            return bad("training set is empty".into());
        }
        if self.drop_last && total > 0 && n_pairs < self.batch_size {
            return bad("train.drop_last with fewer pairs than train.batch_size yields no batches".into());
        }
        Ok(())
    }
}

/// Per-step means over the mini-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub base_loss: f64,
    pub reg_loss_w: f64,
    pub reg_loss_l: f64,
    pub weight: f64,
    pub sft_loss: f64,
    pub reward_margin: f64,
    /// Fraction of pairs in the batch with a positive reward margin.
    pub accuracy: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since the run (or resume) started.
    pub wall_time: f64,
}

impl StepMetrics {
    /// Bitwise equality of everything except wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        let a = [
            self.loss,
            self.base_loss,
            self.reg_loss_w,
            self.reg_loss_l,
            self.weight,
            self.sft_loss,
            self.reward_margin,
            self.accuracy,
            self.lr,
            self.grad_norm,
        ];
        let b = [
            other.loss,
            other.base_loss,
            other.reg_loss_w,
            other.reg_loss_l,
            other.weight,
            other.sft_loss,
            other.reward_margin,
            other.accuracy,
            other.lr,
            other.grad_norm,
        ];
        self.step == other.step && self.epoch == other.epoch && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: usize,
    pub accuracy: f64,
    pub path: Option<PathBuf>,
}

/// Everything a run accumulates besides the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunState {
    pub step: usize,
    pub total_steps: usize,
    pub history: Vec<StepMetrics>,
    pub eval_history: Vec<(usize, EvalMetrics)>,
    pub best: Option<BestCheckpoint>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Checkpoint metadata stored next to the tensors.
#[derive(Serialize, Deserialize)]
struct RunMeta {
    adam_t: u64,
    reference: String,
    config: TrainConfig,
    loss: LossConfig,
    state: TrainRunState,
}

pub struct Trainer<'d> {
    config: TrainConfig,
    loss: LossConfig,
    policy: PolicyState,
    reference: PolicyState,
    evaluator: Option<PolicyState>,
    tokenizer: Tokenizer,
    pairs: &'d [PreferencePair],
    reference_lp: Vec<ReferenceLogprobs>,
    eval_set: Option<(&'d [PreferencePair], Vec<ReferenceLogprobs>)>,
    optimizer: AdamW,
    warmup: usize,
    state: TrainRunState,
    started: Instant,
}

impl<'d> Trainer<'d> {
    /// Sets up a run from step 0. `reference` must be a frozen copy.
    pub fn new(
        config: TrainConfig,
        loss: LossConfig,
        policy: PolicyState,
        reference: PolicyState,
        pairs: &'d [PreferencePair],
    ) -> Result<Self, TrainError> {
        loss.validate()?;
        config.validate(pairs.len())?;
        if policy.is_frozen() {
            return Err(TrainError::Config("the policy must be trainable".into()));
        }
        if !reference.is_frozen() {
            return Err(TrainError::Config("the reference must be a frozen copy".into()));
        }
        if policy.config() != reference.config() {
            return Err(TrainError::Config("policy and reference configurations differ".into()));
        }
        let total = config.total_steps(pairs.len());
        let reference_lp = losses::reference_logprobs(&reference, pairs, config.eval_batch_size)?;
        let optimizer = AdamW::new(config.adamw.clone(), policy.params());
        Ok(Self {
            warmup: config.warmup(total),
            state: TrainRunState {
                total_steps: total,
                ..TrainRunState::default()
            },
            config,
            loss,
            policy,
            reference,
            evaluator: None,
            tokenizer: Tokenizer::new(),
            pairs,
            reference_lp,
            eval_set: None,
            optimizer,
            started: Instant::now(),
        })
    }

    /// Continues the run stored in `ckpt`. The configuration, loss and
    /// reference must be the ones the checkpoint was written with.
    pub fn resume(ckpt: Checkpoint, reference: PolicyState, pairs: &'d [PreferencePair]) -> Result<Self, TrainError> {
        let meta: RunMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| TrainError::Config(format!("checkpoint carries no run state: {e}")))?;
        if meta.reference != reference.fingerprint() {
            return Err(TrainError::Config("reference model differs from the one used by the run".into()));
        }
        let mut t = Self::new(meta.config, meta.loss, ckpt.model.clone(), reference, pairs)?;
        for (i, name) in t.policy.names().iter().enumerate() {
            let load = |kind: &str| -> Result<Vec<f64>, TrainError> {
                let key = format!("adam.{kind}.{name}");
                ckpt.extra(&key)
                    .map(|x| x.data().to_vec())
                    .ok_or_else(|| TrainError::Config(format!("checkpoint lacks `{key}`")))
            };
            t.optimizer.m[i] = load("m")?;
            t.optimizer.v[i] = load("v")?;
        }
        t.optimizer.t = meta.adam_t;
        t.state = meta.state;
        if t.state.step as u64 != ckpt.step {
            return Err(TrainError::Config("checkpoint step and run state disagree".into()));
        }
        Ok(t)
    }

    /// Recomputes contrastive rewards with `evaluator` at every step.
    pub fn with_evaluator(mut self, evaluator: PolicyState) -> Result<Self, TrainError> {
        if !evaluator.is_frozen() {
            return Err(TrainError::Config("the evaluator must be frozen".into()));
        }
        self.evaluator = Some(evaluator);
        Ok(self)
    }

    pub fn with_eval_set(mut self, pairs: &'d [PreferencePair]) -> Result<Self, TrainError> {
        let lp = losses::reference_logprobs(&self.reference, pairs, self.config.eval_batch_size)?;
        self.eval_set = Some((pairs, lp));
        Ok(self)
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn reference(&self) -> &PolicyState {
        &self.reference
    }

    pub fn state(&self) -> &TrainRunState {
        &self.state
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn into_parts(self) -> (PolicyState, TrainRunState) {
        (self.policy, self.state)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    fn batch_for(&self, step: usize) -> Result<PairBatch, TrainError> {
        let per_epoch = batches_per_epoch(self.pairs.len(), self.config.batch_size, self.config.drop_last);
        let epoch = step / per_epoch;
        let mut order = batch_order(
            self.pairs.len(),
            self.config.batch_size,
            self.config.seed,
            epoch,
            self.config.drop_last,
        );
        Ok(PairBatch::new(self.pairs, order.swap_remove(step % per_epoch), epoch)?)
    }

    fn strict_rewards(&self, indices: &[usize]) -> Result<Vec<(TokenRewardVector, TokenRewardVector)>, TrainError> {
        let eval = self
            .evaluator
            .as_ref()
            .ok_or_else(|| TrainError::Config("strict reward mode needs an evaluator".into()))?;
        indices
            .iter()
            .map(|&i| Ok(rewards::pair_contrastive_rewards(eval, &self.tokenizer, &self.pairs[i])?))
            .collect()
    }

    fn non_finite(&self, what: impl Into<String>) -> TrainError {
        TrainError::NonFinite {
            step: self.state.step as u64,
            what: what.into(),
            last_good: self.state.last_checkpoint.clone(),
        }
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<&StepMetrics, TrainError> {
        let step = self.state.step;
        let batch = self.batch_for(step)?;
        let strict = if self.config.strict_rewards && self.loss.needs_cached_rewards() {
            Some(self.strict_rewards(&batch.indices)?)
        } else {
            None
        };
        let inputs: Vec<PairInputs<'_>> = batch
            .indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut inp = PairInputs::new(&self.pairs[i], &self.reference_lp[i]);
                if let Some(s) = &strict {
                    inp.rewards = Some((&s[k].0, &s[k].1));
                }
                inp
            })
            .collect();

        let (mut grads, parts, loss_value) = {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = self.policy.bind(&mut g);
            let out = losses::batch_loss(&self.loss, self.policy.config(), &mut g, &ids, &batch.sequences, &inputs)
                .map_err(|e| match e {
                    LossError::NonFinite { id, what } => self.non_finite(format!("{what} of pair `{id}`")),
                    other => other.into(),
                })?;
            let loss_value = g.scalar(out.loss);
            if !loss_value.is_finite() {
                return Err(self.non_finite("loss"));
            }
            let mut gr = g.backward(out.loss).map_err(ModelError::from)?;
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .zip(self.policy.params())
                .map(|(id, p)| gr.take(*id).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect();
            (grads, out.pairs, loss_value)
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(self.non_finite("gradient norm"));
        }
        let lr = learning_rate(
            self.config.lr_schedule,
            self.config.learning_rate,
            step,
            self.state.total_steps,
            self.warmup,
        );
        let params = self.policy.params_mut()?;
        self.optimizer.step(params, &grads, lr).map_err(|e| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite {
                step: step as u64,
                what,
                last_good: self.state.last_checkpoint.clone(),
            },
            other => other,
        })?;

        let mean = losses::mean_breakdown(&parts);
        let correct = parts.iter().filter(|p| p.reward_margin > 0.0).count();
        self.state.history.push(StepMetrics {
            step,
            epoch: batch.epoch,
            loss: loss_value,
            base_loss: mean.base_loss,
            reg_loss_w: mean.reg_loss_w,
            reg_loss_l: mean.reg_loss_l,
            weight: mean.weight,
            sft_loss: mean.sft_loss,
            reward_margin: mean.reward_margin,
            accuracy: correct as f64 / parts.len() as f64,
            lr,
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        });
        self.state.step += 1;
        self.after_step()?;
        Ok(self.state.history.last().expect("just pushed"))
    }

    fn after_step(&mut self) -> Result<(), TrainError> {
        let step = self.state.step;
        let done = self.is_done();
        if let Some(dir) = self.config.checkpoint_dir.clone() {
            let line = serde_json::to_string(self.state.history.last().expect("step recorded")).expect("metrics serialise");
            let path = dir.join("metrics.jsonl");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            writeln!(f, "{line}").map_err(|e| io_err(&path, e))?;
        }
        let eval_now = self.eval_set.is_some() && (done || (self.config.eval_every > 0 && step % self.config.eval_every == 0));
        let mut improved = false;
        if eval_now {
            let m = self.evaluate()?.expect("eval set present");
            improved = self.state.best.as_ref().map_or(true, |b| m.accuracy > b.accuracy);
            if improved {
                self.state.best = Some(BestCheckpoint {
                    step,
                    accuracy: m.accuracy,
                    path: None,
                });
            }
            self.state.eval_history.push((step, m));
        }
        if let Some(dir) = self.config.checkpoint_dir.clone() {
            let periodic = self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0;
            if periodic || improved || done {
                let name = if done { "final.ckpt".to_string() } else { format!("step-{step:06}.ckpt") };
                let path = dir.join(name);
                if improved {
                    if let Some(b) = &mut self.state.best {
                        b.path = Some(path.clone());
                    }
                }
                self.state.last_checkpoint = Some(path.clone());
                save_checkpoint(&path, &self.checkpoint())?;
            }
        }
        Ok(())
    }

    /// Held-out metrics of the current policy, if an eval set is attached.
    pub fn evaluate(&self) -> Result<Option<EvalMetrics>, TrainError> {
        match &self.eval_set {
            None => Ok(None),
            Some((pairs, lp)) => Ok(Some(evaluate_with_reference(
                &self.policy,
                pairs,
                lp,
                &self.loss,
                self.config.eval_batch_size,
            )?)),
        }
    }

    /// Snapshot of the full run state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = Vec::with_capacity(2 * self.optimizer.m.len());
        for (i, name) in self.policy.names().iter().enumerate() {
            extra.push((format!("adam.m.{name}"), Tensor::vector(self.optimizer.m[i].clone())));
            extra.push((format!("adam.v.{name}"), Tensor::vector(self.optimizer.v[i].clone())));
        }
        // Wall-clock times stay in metrics.jsonl; leaving them out keeps
        // checkpoint files of identical runs byte-identical.
        let mut state = self.state.clone();
        for m in &mut state.history {
            m.wall_time = 0.0;
        }
        let meta = RunMeta {
            adam_t: self.optimizer.t,
            reference: self.reference.fingerprint(),
            config: self.config.clone(),
            loss: self.loss.clone(),
            state,
        };
        Checkpoint {
            model: self.policy.clone(),
            step: self.state.step as u64,
            extra,
            meta: serde_json::to_value(meta).expect("run state serialises"),
        }
    }

    /// Runs until the total step count is reached.
    pub fn run(&mut self) -> Result<&TrainRunState, TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(&self.state)
    }

    /// Runs until `step` (or the end), whichever comes first.
    pub fn run_until(&mut self, step: usize) -> Result<&TrainRunState, TrainError> {
        while !self.is_done() && self.state.step < step {
            self.step()?;
        }
        Ok(&self.state)
    }
}

/// Trains `policy` against the frozen `reference` and returns the result.
pub fn train(
    config: TrainConfig,
    loss: LossConfig,
    policy: PolicyState,
    reference: PolicyState,
    pairs: &[PreferencePair],
) -> Result<(PolicyState, TrainRunState), TrainError> {
    let mut t = Trainer::new(config, loss, policy, reference, pairs)?;
    t.run()?;
    Ok(t.into_parts())
}
