//! Small causal transformer language model and its policy / reference /
//! evaluator roles.

pub mod checkpoint;
pub mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{tokenizer, DataError, SequenceBatch};
use crate::numerics::{log_softmax_row, Graph, NodeId, NumericsError, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use transformer::{parameter_layout, Bound, ResponseLogprobs};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("sequence of {len} tokens exceeds the context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("token id {token} outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0} model is frozen and cannot be trained")]
    Frozen(Role),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// About 0.5M parameters: trains on a CPU in minutes.
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            context_len: 256,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        parameter_layout(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    Reference,
    Evaluator,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Policy => "policy",
            Role::Reference => "reference",
            Role::Evaluator => "evaluator",
        })
    }
}

/// A model instance: configuration, named parameters and its role.
///
/// Only a [`Role::Policy`] model exposes trainable parameters; reference and
/// evaluator copies bind their weights as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    role: Role,
}

/// Anything that can score response tokens by teacher forcing.
pub trait TokenScorer {
    /// `log π(tokens[p] | tokens[..p])` for `p` in `prompt_len..tokens.len()`.
    fn response_logprobs(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>, ModelError>;
}

impl PolicyState {
    /// Freshly initialised policy, deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = parameter_layout(&config);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            params.push(transformer::init_tensor(&name, &shape, config.n_layers, &mut rng).with_requires_grad(true));
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            params,
            role: Role::Policy,
        })
    }

    /// Rebuilds a model from stored tensors, checking them against the layout.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>, role: Role) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((lname, lshape), (name, t)) in layout.into_iter().zip(named) {
            if lname != name || lshape != t.shape() {
                return Err(ModelError::Config(format!(
                    "tensor `{name}` {:?} does not match layout `{lname}` {lshape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t.with_requires_grad(role == Role::Policy));
        }
        Ok(Self {
            config,
            names,
            params,
            role,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_frozen(&self) -> bool {
        self.role != Role::Policy
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Mutable parameters for an optimizer; frozen models refuse.
    pub fn params_mut(&mut self) -> Result<&mut [Tensor], ModelError> {
        if self.is_frozen() {
            return Err(ModelError::Frozen(self.role));
        }
        Ok(&mut self.params)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Deep copy in a frozen role. Later updates to `self` never reach it.
    pub fn freeze_copy(&self, role: Role) -> Self {
        let role = if role == Role::Policy { Role::Reference } else { role };
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.clone().with_requires_grad(false)).collect(),
            role,
        }
    }

    /// Trainable copy of this model's weights.
    pub fn to_policy(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.clone().with_requires_grad(true)).collect(),
            role: Role::Policy,
        }
    }

    /// Borrows every parameter onto `g`; trainable only for the policy role.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<NodeId> {
        let trainable = self.role == Role::Policy;
        self.params.iter().map(|p| g.leaf(p, trainable && p.requires_grad())).collect()
    }

    /// Hex SHA-256 over configuration and parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Response log-probabilities for one sequence (value only).
    pub fn forward_logprobs(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>, ModelError> {
        let batch = SequenceBatch::single(tokens, prompt_len)?;
        Ok(self.batch_logprobs(&batch)?.remove(0))
    }

    /// Response log-probabilities for every row of a batch (value only).
    pub fn batch_logprobs(&self, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p, false)).collect();
        let bound = Bound::new(&self.config, &ids)?;
        let out = transformer::response_logprobs(&self.config, &mut g, &bound, batch)?;
        let values = g.value(out.node).data();
        Ok(out.ranges.into_iter().map(|r| values[r].to_vec()).collect())
    }

    /// `log π(y|x)`: the sum of response log-probabilities.
    pub fn sequence_logprob(&self, tokens: &[u32], prompt_len: usize) -> Result<f64, ModelError> {
        Ok(self.forward_logprobs(tokens, prompt_len)?.iter().sum())
    }

    /// Full next-token log-distribution after every prefix `tokens[..=p]`.
    ///
    /// Row `p` is the distribution of the token at position `p + 1`.
    pub fn next_token_logprobs(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let batch = SequenceBatch::single(tokens, tokens.len())?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p, false)).collect();
        let bound = Bound::new(&self.config, &ids)?;
        let hidden = transformer::hidden_states(&self.config, &mut g, &bound, &batch)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = transformer::logits_for_rows(&mut g, &bound, hidden, &rows)?;
        let v = self.config.vocab_size;
        let data = g.value(logits).data();
        Ok(data
            .chunks(v)
            .map(|row| {
                let mut out = vec![0.0; v];
                log_softmax_row(row, &mut out);
                out
            })
            .collect())
    }

    /// Autoregressive sampling; stops at `max_new` tokens, EOS or the
    /// context limit.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        temperature: f64,
        rng_seed: u64,
    ) -> Result<Generation, ModelError> {
        if !(temperature > 0.0) {
            return Err(ModelError::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if prompt.is_empty() {
            return Err(ModelError::Config("generation needs a non-empty prompt".into()));
        }
        if prompt.len() > self.config.context_len {
            return Err(ModelError::SequenceTooLong {
                len: prompt.len(),
                context_len: self.config.context_len,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut seq = prompt.to_vec();
        let mut out = Generation::default();
        while out.tokens.len() < max_new && seq.len() < self.config.context_len {
            let dist = self.next_token_logprobs(&seq)?.pop().expect("non-empty sequence");
            let token = sample(&dist, temperature, &mut rng);
            out.tokens.push(token as u32);
            out.logprobs.push(dist[token]);
            seq.push(token as u32);
            if token as u32 == tokenizer::EOS {
                break;
            }
        }
        Ok(out)
    }
}

impl TokenScorer for PolicyState {
    fn response_logprobs(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>, ModelError> {
        self.forward_logprobs(tokens, prompt_len)
    }
}

/// Sampled continuation with the model's (temperature-1) log-probability of
/// each sampled token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

fn sample(logprobs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logprobs.iter().map(|l| l / temperature).collect();
    let mut probs = vec![0.0; scaled.len()];
    log_softmax_row(&scaled, &mut probs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut best = 0;
    for (i, lp) in probs.iter().enumerate() {
        let p = lp.exp();
        acc += p;
        if u < acc {
            return i;
        }
        if *lp > probs[best] {
            best = i;
        }
    }
    best
}
