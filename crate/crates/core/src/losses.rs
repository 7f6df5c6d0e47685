//! Training objectives.
//!
//! Every objective is built on the autodiff tape from the policy's
//! per-token response log-probabilities. For one pair with chosen `w` and
//! rejected `l`:
//!
//! ```text
//! dpo     m = β·[(Σ lp_w − Σ ref_w) − (Σ lp_l − Σ ref_l)]      base = −ln σ(m)
//! simpo   m = β·(mean lp_w − mean lp_l) − γ                    base = −ln σ(m)
//! weight  w = detach(σ(−m))            (or 1 for static weighting)
//! reg     L_reg(y) = −β Σ_t r_t · lp_t
//! total   base + α·w·(L_reg(y_w) + L_reg(y_l)) + c_sft·(−Σ lp_w)
//! ```
//!
//! The batch loss is the mean of the pair totals. With `α = 0` or
//! regularization off, no regularization nodes are recorded at all, so the
//! loss and its gradients are bit-identical to the plain base objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PairBatch, PreferencePair, SequenceBatch};
use crate::model::{transformer, Bound, ModelConfig, ModelError, PolicyState};
use crate::numerics::{Graph, NodeId, NumericsError, Tensor};
use crate::rewards::{RewardSource, TokenRewardVector};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("pair `{id}`: no token rewards attached")]
    MissingRewards { id: String },
    #[error("pair `{id}`: {what} has {got} values, expected {expected}")]
    Length {
        id: String,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pair `{id}`: empty {side} response")]
    EmptyResponse { id: String, side: &'static str },
    #[error("pair `{id}`: non-finite {what}")]
    NonFinite { id: String, what: &'static str },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseObjective {
    Dpo,
    Simpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w = σ(−m)`, detached.
    Sequence,
    /// `w = 1`.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularize {
    BothOutputs,
    ChosenOnly,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub base: BaseObjective,
    pub weighting: Weighting,
    pub reward_source: RewardSource,
    pub regularize: Regularize,
    /// Coefficient of the chosen-response NLL term (DPO-SFT ablation).
    pub sft_coeff: f64,
    /// SimPO target margin.
    pub simpo_gamma: f64,
}

impl Default for LossConfig {
    /// DPO-REG: β = 0.1, α = 0.25, contrastive rewards on both outputs.
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 0.25,
            base: BaseObjective::Dpo,
            weighting: Weighting::Sequence,
            reward_source: RewardSource::Contrastive,
            regularize: Regularize::BothOutputs,
            sft_coeff: 0.0,
            simpo_gamma: 1.0,
        }
    }
}

impl LossConfig {
    /// Plain DPO.
    pub fn dpo(beta: f64) -> Self {
        Self {
            beta,
            alpha: 0.0,
            regularize: Regularize::Off,
            ..Self::default()
        }
    }

    /// SimPO-REG defaults: β = 2, γ = 1.
    pub fn simpo() -> Self {
        Self {
            beta: 2.0,
            base: BaseObjective::Simpo,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |field: &str, msg: &str| Err(LossError::Config(format!("loss.{field} {msg}")));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be a positive finite number");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be a non-negative finite number");
        }
        if !(self.sft_coeff >= 0.0 && self.sft_coeff.is_finite()) {
            return bad("sft_coeff", "must be a non-negative finite number");
        }
        if !(self.simpo_gamma >= 0.0 && self.simpo_gamma.is_finite()) {
            return bad("simpo_gamma", "must be a non-negative finite number");
        }
        Ok(())
    }

    /// Whether the regularization term contributes at all.
    pub fn regularizes(&self) -> bool {
        self.alpha != 0.0 && self.regularize != Regularize::Off
    }

    /// Whether attached token rewards are required.
    pub fn needs_cached_rewards(&self) -> bool {
        self.regularizes() && self.reward_source == RewardSource::Contrastive
    }
}

/// Reference-model log-probabilities of both responses of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLogprobs {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl ReferenceLogprobs {
    pub fn chosen_sum(&self) -> f64 {
        self.chosen.iter().sum()
    }

    pub fn rejected_sum(&self) -> f64 {
        self.rejected.iter().sum()
    }
}

/// Scores every pair under the frozen reference, `chunk` pairs per pass.
pub fn reference_logprobs(
    reference: &PolicyState,
    pairs: &[PreferencePair],
    chunk: usize,
) -> Result<Vec<ReferenceLogprobs>, LossError> {
    let mut out = Vec::with_capacity(pairs.len());
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let batch = PairBatch::new(pairs, c.to_vec(), 0).map_err(ModelError::from)?;
        let mut rows = reference.batch_logprobs(&batch.sequences)?;
        let rejected = rows.split_off(c.len());
        out.extend(rows.into_iter().zip(rejected).map(|(chosen, rejected)| ReferenceLogprobs { chosen, rejected }));
    }
    Ok(out)
}

/// Per-pair loss components, as values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairLossBreakdown {
    pub base_loss: f64,
    pub reg_loss_w: f64,
    pub reg_loss_l: f64,
    pub weight: f64,
    pub sft_loss: f64,
    pub total: f64,
    /// DPO implicit reward margin `r(x,y_w) − r(x,y_l)`, for every base.
    pub reward_margin: f64,
}

impl PairLossBreakdown {
    /// `base + α·w·(reg_w + reg_l) + c_sft·sft`, in the tape's order.
    pub fn recompose(&self, cfg: &LossConfig) -> f64 {
        let mut t = self.base_loss;
        if cfg.regularizes() {
            t += self.weight * (self.reg_loss_w + self.reg_loss_l) * cfg.alpha;
        }
        if cfg.sft_coeff != 0.0 {
            t += self.sft_loss * cfg.sft_coeff;
        }
        t
    }
}

/// Tape nodes of one pair.
#[derive(Clone, Copy, Debug)]
pub struct PairNodes {
    pub base: NodeId,
    pub margin: NodeId,
    pub weight: Option<NodeId>,
    pub reg_w: Option<NodeId>,
    pub reg_l: Option<NodeId>,
    pub sft: Option<NodeId>,
    pub total: NodeId,
}

/// Inputs that do not depend on the policy.
#[derive(Clone, Copy, Debug)]
pub struct PairInputs<'p> {
    pub id: &'p str,
    pub reference: &'p ReferenceLogprobs,
    /// Cached (chosen, rejected) token rewards, for contrastive regularization.
    pub rewards: Option<(&'p TokenRewardVector, &'p TokenRewardVector)>,
    /// Replaces the sequence weight by this constant.
    pub weight_override: Option<f64>,
}

impl<'p> PairInputs<'p> {
    pub fn new(pair: &'p PreferencePair, reference: &'p ReferenceLogprobs) -> Self {
        Self {
            id: &pair.id,
            reference,
            rewards: pair.rewards(),
            weight_override: None,
        }
    }
}

fn check_len(id: &str, what: &'static str, expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(LossError::Length {
            id: id.to_string(),
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// `−ln σ(m)` for the DPO margin of one pair.
pub fn dpo_nodes(g: &mut Graph<'_>, lp_w: NodeId, lp_l: NodeId, reference: &ReferenceLogprobs, beta: f64) -> (NodeId, NodeId) {
    let sw = g.sum(lp_w);
    let sl = g.sum(lp_l);
    let d = g.sub(sw, sl).expect("scalars");
    let r = g.constant_scalar(reference.chosen_sum() - reference.rejected_sum());
    let d = g.sub(d, r).expect("scalars");
    let m = g.scale(d, beta);
    let ls = g.log_sigmoid(m);
    (g.neg(ls), m)
}

/// `−ln σ(β(mean lp_w − mean lp_l) − γ)`.
pub fn simpo_nodes(g: &mut Graph<'_>, lp_w: NodeId, lp_l: NodeId, beta: f64, gamma: f64) -> (NodeId, NodeId) {
    let aw = g.mean(lp_w);
    let al = g.mean(lp_l);
    let d = g.sub(aw, al).expect("scalars");
    let d = g.scale(d, beta);
    let gm = g.constant_scalar(gamma);
    let m = g.sub(d, gm).expect("scalars");
    let ls = g.log_sigmoid(m);
    (g.neg(ls), m)
}

/// `−β Σ_t r_t · lp_t` with `r` held constant.
pub fn reg_nodes(g: &mut Graph<'_>, lp: NodeId, rewards: NodeId, beta: f64) -> Result<NodeId, LossError> {
    let prod = g.mul(rewards, lp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -beta))
}

fn reward_node(
    g: &mut Graph<'_>,
    cfg: &LossConfig,
    lp: NodeId,
    cached: Option<&TokenRewardVector>,
    reference: &[f64],
    id: &str,
) -> Result<NodeId, LossError> {
    let n = g.value(lp).len();
    match cfg.reward_source {
        RewardSource::Contrastive => {
            let r = cached.ok_or_else(|| LossError::MissingRewards { id: id.to_string() })?;
            check_len(id, "token rewards", n, r.len())?;
            Ok(g.constant(Tensor::vector(r.values.clone())))
        }
        RewardSource::DpoImplicit => {
            // A supplied vector of this source stands in for the live value,
            // e.g. frozen at one point for finite differencing.
            if let Some(r) = cached.filter(|r| r.source == RewardSource::DpoImplicit) {
                check_len(id, "token rewards", n, r.len())?;
                return Ok(g.constant(Tensor::vector(r.values.clone())));
            }
            check_len(id, "reference log-probs", n, reference.len())?;
            let rf = g.constant(Tensor::vector(reference.to_vec()));
            let d = g.sub(lp, rf)?;
            let d = g.scale(d, cfg.beta);
            Ok(g.detach(d))
        }
    }
}

/// Records the full objective of one pair on the tape.
pub fn pair_nodes(
    cfg: &LossConfig,
    g: &mut Graph<'_>,
    lp_w: NodeId,
    lp_l: NodeId,
    inputs: &PairInputs<'_>,
) -> Result<PairNodes, LossError> {
    let id = inputs.id;
    let (nw, nl) = (g.value(lp_w).len(), g.value(lp_l).len());
    if nw == 0 {
        return Err(LossError::EmptyResponse { id: id.into(), side: "chosen" });
    }
    if nl == 0 {
        return Err(LossError::EmptyResponse { id: id.into(), side: "rejected" });
    }
    check_len(id, "chosen reference log-probs", nw, inputs.reference.chosen.len())?;
    check_len(id, "rejected reference log-probs", nl, inputs.reference.rejected.len())?;

    let (base, margin) = match cfg.base {
        BaseObjective::Dpo => dpo_nodes(g, lp_w, lp_l, inputs.reference, cfg.beta),
        BaseObjective::Simpo => simpo_nodes(g, lp_w, lp_l, cfg.beta, cfg.simpo_gamma),
    };
    let mut nodes = PairNodes {
        base,
        margin,
        weight: None,
        reg_w: None,
        reg_l: None,
        sft: None,
        total: base,
    };
    if cfg.regularizes() {
        let weight = match (inputs.weight_override, cfg.weighting) {
            (Some(v), _) => g.constant_scalar(v),
            (None, Weighting::Static) => g.constant_scalar(1.0),
            (None, Weighting::Sequence) => {
                let nm = g.neg(margin);
                let s = g.sigmoid(nm);
                g.detach(s)
            }
        };
        let (cw, cl) = match inputs.rewards {
            Some((c, l)) => (Some(c), Some(l)),
            None => (None, None),
        };
        let rw = reward_node(g, cfg, lp_w, cw, &inputs.reference.chosen, id)?;
        let reg_w = reg_nodes(g, lp_w, rw, cfg.beta)?;
        let reg = if cfg.regularize == Regularize::BothOutputs {
            let rl = reward_node(g, cfg, lp_l, cl, &inputs.reference.rejected, id)?;
            let reg_l = reg_nodes(g, lp_l, rl, cfg.beta)?;
            nodes.reg_l = Some(reg_l);
            g.add(reg_w, reg_l)?
        } else {
            reg_w
        };
        let weighted = g.mul(weight, reg)?;
        let scaled = g.scale(weighted, cfg.alpha);
        nodes.total = g.add(nodes.total, scaled)?;
        nodes.weight = Some(weight);
        nodes.reg_w = Some(reg_w);
    }
    if cfg.sft_coeff != 0.0 {
        let s = g.sum(lp_w);
        let nll = g.neg(s);
        let scaled = g.scale(nll, cfg.sft_coeff);
        nodes.total = g.add(nodes.total, scaled)?;
        nodes.sft = Some(nll);
    }
    Ok(nodes)
}

/// Reads the breakdown of recorded pair nodes.
pub fn breakdown(
    cfg: &LossConfig,
    g: &Graph<'_>,
    nodes: &PairNodes,
    lp_w: NodeId,
    lp_l: NodeId,
    reference: &ReferenceLogprobs,
    id: &str,
) -> Result<PairLossBreakdown, LossError> {
    let val = |n: Option<NodeId>| n.map(|n| g.scalar(n)).unwrap_or(0.0);
    let sw: f64 = g.value(lp_w).data().iter().sum();
    let sl: f64 = g.value(lp_l).data().iter().sum();
    let reward_margin = cfg.beta * ((sw - sl) - (reference.chosen_sum() - reference.rejected_sum()));
    let weight = match nodes.weight {
        Some(w) => g.scalar(w),
        None => match cfg.weighting {
            Weighting::Static => 1.0,
            Weighting::Sequence => crate::numerics::sigmoid(-g.scalar(nodes.margin)),
        },
    };
    let b = PairLossBreakdown {
        base_loss: g.scalar(nodes.base),
        reg_loss_w: val(nodes.reg_w),
        reg_loss_l: val(nodes.reg_l),
        weight,
        sft_loss: val(nodes.sft),
        total: g.scalar(nodes.total),
        reward_margin,
    };
    if !b.total.is_finite() {
        return Err(LossError::NonFinite {
            id: id.to_string(),
            what: "loss",
        });
    }
    Ok(b)
}

/// Batch objective on the tape.
pub struct BatchLoss {
    /// Mean of the pair totals.
    pub loss: NodeId,
    pub pairs: Vec<PairLossBreakdown>,
}

/// Records the policy forward pass and the mean pair loss for `batch`.
///
/// `inputs[i]` belongs to pair `batch.indices[i]`.
pub fn batch_loss<'a>(
    cfg: &LossConfig,
    model: &ModelConfig,
    g: &mut Graph<'a>,
    params: &[NodeId],
    sequences: &SequenceBatch,
    inputs: &[PairInputs<'_>],
) -> Result<BatchLoss, LossError> {
    let n = inputs.len();
    if sequences.rows != 2 * n {
        return Err(LossError::Config(format!(
            "batch has {} rows for {n} pairs",
            sequences.rows
        )));
    }
    let bound = Bound::new(model, params)?;
    let lp = transformer::response_logprobs(model, g, &bound, sequences)?;
    let mut totals = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for (i, inp) in inputs.iter().enumerate() {
        let (rw, rl) = (lp.ranges[i].clone(), lp.ranges[n + i].clone());
        let lp_w = g.slice(lp.node, rw.start, rw.len())?;
        let lp_l = g.slice(lp.node, rl.start, rl.len())?;
        let nodes = pair_nodes(cfg, g, lp_w, lp_l, inp)?;
        pairs.push(breakdown(cfg, g, &nodes, lp_w, lp_l, inp.reference, inp.id)?);
        totals.push(nodes.total);
    }
    let all = g.concat(&totals);
    let loss = g.mean(all);
    Ok(BatchLoss { loss, pairs })
}

/// Mean of a set of breakdowns, field by field.
pub fn mean_breakdown(parts: &[PairLossBreakdown]) -> PairLossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = PairLossBreakdown::default();
    for p in parts {
        m.base_loss += p.base_loss;
        m.reg_loss_w += p.reg_loss_w;
        m.reg_loss_l += p.reg_loss_l;
        m.weight += p.weight;
        m.sft_loss += p.sft_loss;
        m.total += p.total;
        m.reward_margin += p.reward_margin;
    }
    m.base_loss /= n;
    m.reg_loss_w /= n;
    m.reg_loss_l /= n;
    m.weight /= n;
    m.sft_loss /= n;
    m.total /= n;
    m.reward_margin /= n;
    m
}

// ---------------------------------------------------------------------------
// Value-level entry points over whole models.

fn single_pair_breakdown(
    policy: &PolicyState,
    pair: &PreferencePair,
    reference: &ReferenceLogprobs,
    rewards: Option<(&TokenRewardVector, &TokenRewardVector)>,
    cfg: &LossConfig,
) -> Result<PairLossBreakdown, LossError> {
    cfg.validate()?;
    let batch = PairBatch::new(std::slice::from_ref(pair), vec![0], 0).map_err(ModelError::from)?;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = policy.params().iter().map(|p| g.leaf(p, false)).collect();
    let inputs = PairInputs {
        id: &pair.id,
        reference,
        rewards: rewards.or_else(|| pair.rewards()),
        weight_override: None,
    };
    let out = batch_loss(cfg, policy.config(), &mut g, &ids, &batch.sequences, &[inputs])?;
    Ok(out.pairs.into_iter().next().expect("one pair"))
}

/// Values of the detached quantities of one pair at the current policy:
/// the sequence weight and, for the `dpo_implicit` source, both reward
/// vectors.
///
/// Passing them back as overrides turns every detached node into a true
/// constant, which is what a finite-difference check perturbs around.
pub fn detached_values(
    cfg: &LossConfig,
    policy: &PolicyState,
    pair: &PreferencePair,
    reference: &ReferenceLogprobs,
    rewards: Option<(&TokenRewardVector, &TokenRewardVector)>,
) -> Result<(f64, Option<(TokenRewardVector, TokenRewardVector)>), LossError> {
    let b = single_pair_breakdown(policy, pair, reference, rewards, cfg)?;
    let implicit = if cfg.reward_source == RewardSource::DpoImplicit {
        let make = |tokens: Vec<u32>, refs: &[f64]| -> Result<TokenRewardVector, LossError> {
            let lp = policy.forward_logprobs(&tokens, pair.prompt_len())?;
            Ok(TokenRewardVector {
                values: lp.iter().zip(refs).map(|(a, b)| cfg.beta * (a - b)).collect(),
                source: RewardSource::DpoImplicit,
            })
        };
        Some((
            make(pair.chosen_sequence(), &reference.chosen)?,
            make(pair.rejected_sequence(), &reference.rejected)?,
        ))
    } else {
        None
    };
    Ok((b.weight, implicit))
}

fn pair_reference(reference: &PolicyState, pair: &PreferencePair) -> Result<ReferenceLogprobs, LossError> {
    Ok(reference_logprobs(reference, std::slice::from_ref(pair), 1)?.remove(0))
}

/// DPO loss and reward margin of one pair.
pub fn dpo_loss(policy: &PolicyState, reference: &PolicyState, pair: &PreferencePair, beta: f64) -> Result<(f64, f64), LossError> {
    let r = pair_reference(reference, pair)?;
    let b = single_pair_breakdown(policy, pair, &r, None, &LossConfig::dpo(beta))?;
    Ok((b.base_loss, b.reward_margin))
}

/// Reference-free SimPO loss of one pair.
pub fn simpo_loss(policy: &PolicyState, pair: &PreferencePair, beta: f64, gamma: f64) -> Result<f64, LossError> {
    // The reference does not enter the loss; zeros keep the shapes valid.
    let r = ReferenceLogprobs {
        chosen: vec![0.0; pair.chosen.len()],
        rejected: vec![0.0; pair.rejected.len()],
    };
    let cfg = LossConfig {
        beta,
        simpo_gamma: gamma,
        alpha: 0.0,
        regularize: Regularize::Off,
        ..LossConfig::simpo()
    };
    Ok(single_pair_breakdown(policy, pair, &r, None, &cfg)?.base_loss)
}

/// `−β Σ_t r_t log π(y_t | x, y_<t)` for one sequence.
pub fn reg_loss(
    policy: &PolicyState,
    tokens: &[u32],
    prompt_len: usize,
    rewards: &TokenRewardVector,
    beta: f64,
) -> Result<f64, LossError> {
    let lp = policy.forward_logprobs(tokens, prompt_len)?;
    check_len("<sequence>", "token rewards", lp.len(), rewards.len())?;
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(lp));
    let r = g.constant(Tensor::vector(rewards.values.clone()));
    let n = reg_nodes(&mut g, l, r, beta)?;
    Ok(g.scalar(n))
}

/// Detached sequence weight `σ(r(y_l) − r(y_w))` under DPO rewards.
pub fn sequence_weight(policy: &PolicyState, reference: &PolicyState, pair: &PreferencePair, beta: f64) -> Result<f64, LossError> {
    let (_, margin) = dpo_loss(policy, reference, pair, beta)?;
    Ok(crate::numerics::sigmoid(-margin))
}

/// Full objective of one pair under `cfg`.
pub fn treg_loss(
    policy: &PolicyState,
    reference: &PolicyState,
    rewards_w: &TokenRewardVector,
    rewards_l: &TokenRewardVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<PairLossBreakdown, LossError> {
    let r = pair_reference(reference, pair)?;
    single_pair_breakdown(policy, pair, &r, Some((rewards_w, rewards_l)), cfg)
}

/// DPO plus `sft_coeff` times the chosen-response NLL.
pub fn dpo_sft_loss(
    policy: &PolicyState,
    reference: &PolicyState,
    pair: &PreferencePair,
    beta: f64,
    sft_coeff: f64,
) -> Result<f64, LossError> {
    let r = pair_reference(reference, pair)?;
    let cfg = LossConfig {
        sft_coeff,
        ..LossConfig::dpo(beta)
    };
    Ok(single_pair_breakdown(policy, pair, &r, None, &cfg)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenizer::{BOS, EOS, SEP};
    use crate::model::Role;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> PolicyState {
        PolicyState::init(ModelConfig {
            vocab_size: 264,
            context_len: 32,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            seed,
        })
        .unwrap()
    }

    fn pair(id: &str, w: &[u32], l: &[u32]) -> PreferencePair {
        let mut c = w.to_vec();
        c.push(EOS);
        let mut r = l.to_vec();
        r.push(EOS);
        PreferencePair::new(id, vec![BOS, 104, SEP], c, r)
    }

    fn rv(values: Vec<f64>) -> TokenRewardVector {
        TokenRewardVector::new(values, RewardSource::Contrastive).unwrap()
    }

    fn perturbed(seed: u64) -> (PolicyState, PolicyState) {
        let reference = tiny(seed).freeze_copy(Role::Reference);
        let mut policy = reference.to_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in policy.params_mut().unwrap() {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        (policy, reference)
    }

    #[test]
    fn anchors_at_identity() {
        let reference = tiny(0).freeze_copy(Role::Reference);
        let policy = reference.to_policy();
        let p = pair("a", &[97, 98], &[99, 100, 101]);
        let (loss, margin) = dpo_loss(&policy, &reference, &p, 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(margin, 0.0);
        assert_eq!(sequence_weight(&policy, &reference, &p, 0.1).unwrap(), 0.5);
        let zero = rv(vec![0.0; 3]);
        assert_eq!(reg_loss(&policy, &p.chosen_sequence(), 3, &zero, 0.1).unwrap(), 0.0);
        let b = treg_loss(&policy, &reference, &zero, &rv(vec![0.0; 4]), &p, &LossConfig::default()).unwrap();
        assert_eq!(b.weight, 0.5);
    }

    #[test]
    fn simpo_anchor_and_length_normalisation() {
        // Zeroed head: every token has log-prob ln(1/V), equal averages.
        let mut m = tiny(1);
        m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
        let short = pair("s", &[97], &[98]);
        let long = pair("l", &[97, 97, 97], &[98]);
        let a = simpo_loss(&m, &short, 2.0, 0.0).unwrap();
        let b = simpo_loss(&m, &long, 2.0, 0.0).unwrap();
        assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_arithmetic() {
        // A single scored token with log π = −2 under a crafted model.
        let mut m = tiny(2);
        m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
        let v = 264.0f64;
        // Uniform: log π = −ln V; choose reward so the expected value is clear.
        let lp = -(v.ln());
        let toks = [BOS, SEP, EOS];
        let got = reg_loss(&m, &toks, 2, &rv(vec![0.5]), 0.1).unwrap();
        assert!((got - (-0.1 * 0.5 * lp)).abs() < 1e-12);
        // With log π = −2 the formula gives exactly 0.1.
        let mut g = Graph::new();
        let l = g.constant(Tensor::vector(vec![-2.0]));
        let r = g.constant(Tensor::vector(vec![0.5]));
        let n = reg_nodes(&mut g, l, r, 0.1).unwrap();
        assert!((g.scalar(n) - 0.1).abs() < 1e-15);
        assert!(reg_loss(&m, &toks, 2, &rv(vec![0.5, 0.5]), 0.1).is_err());
    }

    #[test]
    fn dpo_limits_are_stable() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::vector(vec![0.0]));
        let l = g.constant(Tensor::vector(vec![-1e6]));
        let r = ReferenceLogprobs {
            chosen: vec![0.0],
            rejected: vec![0.0],
        };
        let (big, _) = dpo_nodes(&mut g, w, l, &r, 1.0);
        assert!(g.scalar(big).abs() < 1e-300);
        let (neg, _) = dpo_nodes(&mut g, l, w, &r, 1.0);
        assert!((g.scalar(neg) - 1e6).abs() < 1e-6);
    }

    #[test]
    fn sft_uniform_nll() {
        let mut m = tiny(3);
        m.param_mut("head.weight").unwrap().data_mut().fill(0.0);
        m.param_mut("head.bias").unwrap().data_mut().fill(0.0);
        let reference = m.freeze_copy(Role::Reference);
        let p = pair("a", &[97, 98], &[99]);
        let with = dpo_sft_loss(&m, &reference, &p, 0.1, 1.0).unwrap();
        let without = dpo_sft_loss(&m, &reference, &p, 0.1, 0.0).unwrap();
        assert_eq!(without, dpo_loss(&m, &reference, &p, 0.1).unwrap().0);
        assert!(((with - without) - 3.0 * 264f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_configs() {
        let (policy, reference) = perturbed(4);
        let p = pair("a", &[97, 98], &[99, 100]);
        let (rw, rl) = (rv(vec![0.3, -0.2, 0.1]), rv(vec![-0.4, 0.5, 0.0]));
        let plain = treg_loss(&policy, &reference, &rw, &rl, &p, &LossConfig::dpo(0.1)).unwrap();
        let a0 = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let off = LossConfig {
            regularize: Regularize::Off,
            ..LossConfig::default()
        };
        for cfg in [a0, off] {
            let b = treg_loss(&policy, &reference, &rw, &rl, &p, &cfg).unwrap();
            assert_eq!(b.total.to_bits(), plain.total.to_bits());
            assert_eq!(b.total.to_bits(), b.base_loss.to_bits());
        }
        let full = treg_loss(&policy, &reference, &rw, &rl, &p, &LossConfig::default()).unwrap();
        assert_eq!(full.base_loss, plain.base_loss);
        assert_ne!(full.total, plain.total);
    }

    #[test]
    fn chosen_only_drops_rejected_term() {
        let (policy, reference) = perturbed(5);
        let p = pair("a", &[97], &[99]);
        let cfg = LossConfig {
            regularize: Regularize::ChosenOnly,
            ..LossConfig::default()
        };
        let b = treg_loss(&policy, &reference, &rv(vec![0.3, 0.1]), &rv(vec![-0.4, 0.2]), &p, &cfg).unwrap();
        assert_eq!(b.reg_loss_l, 0.0);
        assert!((b.total - b.recompose(&cfg)).abs() < 1e-12);
    }

    #[test]
    fn missing_rewards_are_an_error() {
        let (policy, reference) = perturbed(6);
        let p = pair("a", &[97], &[99]);
        let r = pair_reference(&reference, &p).unwrap();
        assert!(matches!(
            single_pair_breakdown(&policy, &p, &r, None, &LossConfig::default()),
            Err(LossError::MissingRewards { .. })
        ));
        // dpo_implicit rewards need nothing attached.
        let cfg = LossConfig {
            reward_source: RewardSource::DpoImplicit,
            ..LossConfig::default()
        };
        single_pair_breakdown(&policy, &p, &r, None, &cfg).unwrap();
    }

    #[test]
    fn reg_gradient_sign_follows_rewards() {
        // d L_reg / d logit(y_t) = −β r_t (1 − π(y_t)): opposite to r_t.
        let logits = Tensor::matrix(2, 4, vec![0.1, -0.3, 0.2, 0.0, 0.5, 0.1, -0.2, 0.3]).unwrap().with_requires_grad(true);
        let targets = [1usize, 3];
        let rewards = [0.4, -0.3];
        let mut g = Graph::new();
        let x = g.param(&logits);
        let lp = g.log_softmax_gather(x, &targets).unwrap();
        let r = g.constant(Tensor::vector(rewards.to_vec()));
        let loss = reg_nodes(&mut g, lp, r, 0.1).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (t, &tgt) in targets.iter().enumerate() {
            let d = gx[t * 4 + tgt];
            assert_eq!(d.signum(), -(rewards[t] as f64).signum());
            // Finite-difference confirmation of the sign.
            let eps = 1e-6;
            let f = |delta: f64| {
                let mut l = logits.clone();
                l.data_mut()[t * 4 + tgt] += delta;
                let lp = crate::numerics::log_softmax_gather(&l, &targets).unwrap();
                -0.1 * (rewards[0] * lp[0] + rewards[1] * lp[1])
            };
            let num = (f(eps) - f(-eps)) / (2.0 * eps);
            assert_eq!(num.signum(), d.signum());
        }
    }

    fn check_cfg(cfg: LossConfig, seed: u64) -> f64 {
        let (policy, reference) = perturbed(seed);
        let p = pair("a", &[97, 98, 99], &[97, 120]);
        let r = pair_reference(&reference, &p).unwrap();
        let rw = rv(vec![0.3, -0.2, 0.1, 0.05]);
        let rl = rv(vec![0.2, -0.45, 0.0]);
        let batch = PairBatch::new(std::slice::from_ref(&p), vec![0], 0).unwrap();
        let mcfg = policy.config().clone();
        let (w0, implicit) = detached_values(&cfg, &policy, &p, &r, Some((&rw, &rl))).unwrap();
        let rewards = implicit.as_ref().map(|(a, b)| (a, b)).unwrap_or((&rw, &rl));
        let report = grad_check(
            |g, ids| -> Result<NodeId, LossError> {
                let inputs = PairInputs {
                    id: "a",
                    reference: &r,
                    rewards: Some(rewards),
                    weight_override: cfg.regularizes().then_some(w0),
                };
                Ok(batch_loss(&cfg, &mcfg, g, ids, &batch.sequences, &[inputs])?.loss)
            },
            policy.params(),
            1e-4,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        let variants = [
            ("dpo", LossConfig::dpo(0.5)),
            ("treg", LossConfig { beta: 0.5, ..LossConfig::default() }),
            (
                "treg_static",
                LossConfig {
                    beta: 0.5,
                    weighting: Weighting::Static,
                    ..LossConfig::default()
                },
            ),
            (
                "simpo_reg",
                LossConfig::simpo(),
            ),
            (
                "dpo_sft",
                LossConfig {
                    sft_coeff: 1.0,
                    ..LossConfig::dpo(0.5)
                },
            ),
            (
                "dpo_implicit",
                LossConfig {
                    beta: 0.5,
                    reward_source: RewardSource::DpoImplicit,
                    ..LossConfig::default()
                },
            ),
        ];
        for (i, (name, cfg)) in variants.into_iter().enumerate() {
            let e = check_cfg(cfg, 10 + i as u64);
            assert!(e < 1e-4, "{name}: {e}");
        }
    }

    #[test]
    fn breakdown_recomposes() {
        let (policy, reference) = perturbed(7);
        let p = pair("a", &[97, 98], &[99, 100]);
        for cfg in [
            LossConfig::default(),
            LossConfig {
                sft_coeff: 0.3,
                ..LossConfig::default()
            },
            LossConfig::simpo(),
        ] {
            let b = treg_loss(&policy, &reference, &rv(vec![0.3, -0.2, 0.1]), &rv(vec![-0.4, 0.5, 0.0]), &p, &cfg).unwrap();
            assert!((b.total - b.recompose(&cfg)).abs() < 1e-12, "{cfg:?}");
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            LossConfig { beta: 0.0, ..LossConfig::default() },
            LossConfig { alpha: -1.0, ..LossConfig::default() },
            LossConfig { sft_coeff: f64::NAN, ..LossConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sequence_weight_in_unit_interval(margin in -50.0f64..50.0) {
            let w = crate::numerics::sigmoid(-margin);
            prop_assert!(w >= 0.0 && w <= 1.0);
        }

        #[test]
        fn recomposition_on_random_pairs(
            lw in proptest::collection::vec(-6.0f64..-0.01, 1..8),
            ll in proptest::collection::vec(-6.0f64..-0.01, 1..8),
            rw_seed in any::<u64>(),
            alpha in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(rw_seed);
            let rw = rv(lw.iter().map(|_| rng.gen_range(-0.5..0.5)).collect());
            let rl = rv(ll.iter().map(|_| rng.gen_range(-0.5..0.5)).collect());
            let reference = ReferenceLogprobs {
                chosen: lw.iter().map(|v| v * 0.9).collect(),
                rejected: ll.iter().map(|v| v * 1.1).collect(),
            };
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let mut g = Graph::new();
            let w = g.constant(Tensor::vector(lw.clone()));
            let l = g.constant(Tensor::vector(ll.clone()));
            let inputs = PairInputs { id: "p", reference: &reference, rewards: Some((&rw, &rl)), weight_override: None };
            let nodes = pair_nodes(&cfg, &mut g, w, l, &inputs).unwrap();
            let b = breakdown(&cfg, &g, &nodes, w, l, &reference, "p").unwrap();
            prop_assert!((b.total - b.recompose(&cfg)).abs() < 1e-12);
            prop_assert!(b.weight > 0.0 && b.weight < 1.0);
        }
    }
}
