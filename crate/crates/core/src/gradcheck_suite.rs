//! Finite-difference gradient checks of every loss variant on a 1-layer
//! model, as run by `treg gradcheck`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{BOS, EOS, SEP};
use crate::data::{PairBatch, PreferencePair};
use crate::losses::{
    batch_loss, detached_values, reference_logprobs, reg_nodes, BaseObjective, LossConfig, LossError, PairInputs,
    Regularize, Weighting,
};
use crate::model::{transformer, Bound, ModelConfig, PolicyState, Role};
use crate::numerics::{grad_check, NodeId, Tensor};
use crate::rewards::{RewardSource, TokenRewardVector};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub beta: f64,
    /// Uniform half-width of the noise added to the initial weights, so
    /// that no gradient is vanishingly small.
    pub weight_noise: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: 1e-4,
            beta: 0.5,
            weight_noise: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub seconds: f64,
    pub passed: bool,
}

/// Loss variants covered by the suite, by row name.
pub fn suite_variants(beta: f64) -> Vec<(&'static str, Option<LossConfig>)> {
    let treg = LossConfig {
        beta,
        ..LossConfig::default()
    };
    vec![
        ("dpo", Some(LossConfig::dpo(beta))),
        (
            "simpo",
            Some(LossConfig {
                alpha: 0.0,
                regularize: Regularize::Off,
                ..LossConfig::simpo()
            }),
        ),
        // The regularizer alone, without a base objective.
        ("reg", None),
        ("treg", Some(treg.clone())),
        (
            "treg_static",
            Some(LossConfig {
                weighting: Weighting::Static,
                ..treg.clone()
            }),
        ),
        (
            "simpo_reg",
            Some(LossConfig {
                base: BaseObjective::Simpo,
                ..LossConfig::simpo()
            }),
        ),
        (
            "treg_dpo_implicit",
            Some(LossConfig {
                reward_source: RewardSource::DpoImplicit,
                ..treg
            }),
        ),
        (
            "dpo_sft",
            Some(LossConfig {
                sft_coeff: 1.0,
                ..LossConfig::dpo(beta)
            }),
        ),
    ]
}

fn test_models(cfg: &GradcheckConfig) -> Result<(PolicyState, PolicyState), LossError> {
    let reference = PolicyState::init(ModelConfig {
        context_len: 32,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        seed: cfg.seed,
        ..ModelConfig::default()
    })?
    .freeze_copy(Role::Reference);
    let mut policy = reference.to_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    for p in policy.params_mut()? {
        for v in p.data_mut() {
            *v += rng.gen_range(-cfg.weight_noise..=cfg.weight_noise);
        }
    }
    Ok((policy, reference))
}

fn test_pair() -> (PreferencePair, TokenRewardVector, TokenRewardVector) {
    let pair = PreferencePair::new(
        "gradcheck",
        vec![BOS, 101, 99, 104, SEP],
        vec![97, 98, 99, EOS],
        vec![97, 120, EOS],
    );
    let rw = TokenRewardVector::new(vec![0.3, -0.2, 0.1, 0.05], RewardSource::Contrastive).expect("bounded");
    let rl = TokenRewardVector::new(vec![0.2, -0.45, 0.0], RewardSource::Contrastive).expect("bounded");
    (pair, rw, rl)
}

/// Runs every row of the suite.
pub fn run_gradcheck_suite(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>, LossError> {
    let (policy, reference) = test_models(cfg)?;
    let (pair, rw, rl) = test_pair();
    let r = reference_logprobs(&reference, std::slice::from_ref(&pair), 1)?.remove(0);
    let batch = PairBatch::new(std::slice::from_ref(&pair), vec![0], 0).map_err(crate::model::ModelError::from)?;
    let mcfg = policy.config().clone();
    let mut rows = Vec::new();
    for (name, loss) in suite_variants(cfg.beta) {
        let start = Instant::now();
        let report = match loss {
            Some(loss) => {
                let (w0, implicit) = detached_values(&loss, &policy, &pair, &r, Some((&rw, &rl)))?;
                let rewards = implicit.as_ref().map(|(a, b)| (a, b)).unwrap_or((&rw, &rl));
                grad_check(
                    |g, ids| -> Result<NodeId, LossError> {
                        let inputs = PairInputs {
                            id: &pair.id,
                            reference: &r,
                            rewards: Some(rewards),
                            weight_override: loss.regularizes().then_some(w0),
                        };
                        Ok(batch_loss(&loss, &mcfg, g, ids, &batch.sequences, &[inputs])?.loss)
                    },
                    policy.params(),
                    cfg.eps,
                )?
            }
            None => grad_check(
                |g, ids| -> Result<NodeId, LossError> {
                    let bound = Bound::new(&mcfg, ids)?;
                    let lp = transformer::response_logprobs(&mcfg, g, &bound, &batch.sequences)?;
                    let (a, b) = (lp.ranges[0].clone(), lp.ranges[1].clone());
                    let lp_w = g.slice(lp.node, a.start, a.len())?;
                    let lp_l = g.slice(lp.node, b.start, b.len())?;
                    let cw = g.constant(Tensor::vector(rw.values.clone()));
                    let cl = g.constant(Tensor::vector(rl.values.clone()));
                    let reg_w = reg_nodes(g, lp_w, cw, cfg.beta)?;
                    let reg_l = reg_nodes(g, lp_l, cl, cfg.beta)?;
                    Ok(g.add(reg_w, reg_l)?)
                },
                policy.params(),
                cfg.eps,
            )?,
        };
        rows.push(GradcheckRow {
            loss: name.to_string(),
            max_rel_error: report.max_rel_error,
            coords: report.coords_checked,
            seconds: start.elapsed().as_secs_f64(),
            passed: report.max_rel_error < GRADCHECK_TOLERANCE,
        });
    }
    Ok(rows)
}
