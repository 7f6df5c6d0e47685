//! Pre-norm decoder-only transformer with learned positional embeddings.

use std::ops::Range;

use crate::data::SequenceBatch;
use crate::numerics::{Graph, NodeId, Tensor};

use super::{ModelConfig, ModelError};

/// Names and shapes of every parameter, in storage order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, c, d) = (cfg.vocab_size, cfg.context_len, cfg.d_model);
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![3 * d]),
            (p("attn.out.weight"), vec![d, d]),
            (p("attn.out.bias"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("mlp.fc.weight"), vec![d, 4 * d]),
            (p("mlp.fc.bias"), vec![4 * d]),
            (p("mlp.proj.weight"), vec![4 * d, d]),
            (p("mlp.proj.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d]),
        ("ln_f.bias".to_string(), vec![d]),
        ("head.weight".to_string(), vec![d, v]),
        ("head.bias".to_string(), vec![v]),
    ]);
    out
}

const PER_LAYER: usize = 12;

struct Block {
    ln1_g: NodeId,
    ln1_b: NodeId,
    qkv_w: NodeId,
    qkv_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    fc_w: NodeId,
    fc_b: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
}

/// Parameter nodes of one model bound onto a graph, in layout order.
pub struct Bound<'p> {
    ids: &'p [NodeId],
    n_layers: usize,
}

impl<'p> Bound<'p> {
    pub fn new(cfg: &ModelConfig, ids: &'p [NodeId]) -> Result<Self, ModelError> {
        let expected = 2 + PER_LAYER * cfg.n_layers + 4;
        if ids.len() != expected {
            return Err(ModelError::Config(format!(
                "expected {expected} parameter tensors, got {}",
                ids.len()
            )));
        }
        Ok(Self {
            ids,
            n_layers: cfg.n_layers,
        })
    }

    fn tok_emb(&self) -> NodeId {
        self.ids[0]
    }

    fn pos_emb(&self) -> NodeId {
        self.ids[1]
    }

    fn block(&self, l: usize) -> Block {
        let b = &self.ids[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        Block {
            ln1_g: b[0],
            ln1_b: b[1],
            qkv_w: b[2],
            qkv_b: b[3],
            out_w: b[4],
            out_b: b[5],
            ln2_g: b[6],
            ln2_b: b[7],
            fc_w: b[8],
            fc_b: b[9],
            proj_w: b[10],
            proj_b: b[11],
        }
    }

    fn tail(&self) -> [NodeId; 4] {
        let t = 2 + PER_LAYER * self.n_layers;
        [self.ids[t], self.ids[t + 1], self.ids[t + 2], self.ids[t + 3]]
    }
}

fn check_lengths(cfg: &ModelConfig, batch: &SequenceBatch) -> Result<(), ModelError> {
    if batch.seq_len > cfg.context_len {
        return Err(ModelError::SequenceTooLong {
            len: batch.seq_len,
            context_len: cfg.context_len,
        });
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Final residual stream, `(rows·seq_len) × d_model`, before the last norm.
pub fn hidden_states(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    params: &Bound<'_>,
    batch: &SequenceBatch,
) -> Result<NodeId, ModelError> {
    check_lengths(cfg, batch)?;
    let (rows, t) = (batch.rows, batch.seq_len);
    let positions: Vec<usize> = (0..rows).flat_map(|_| 0..t).collect();
    let tok = g.embedding(params.tok_emb(), &batch.ids)?;
    let pos = g.embedding(params.pos_emb(), &positions)?;
    let mut h = g.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        let b = params.block(l);
        let a = g.layer_norm(h, b.ln1_g, b.ln1_b)?;
        let qkv = g.matmul(a, b.qkv_w)?;
        let qkv = g.add_row(qkv, b.qkv_b)?;
        let att = g.causal_attention(qkv, rows, t, cfg.n_heads)?;
        let o = g.matmul(att, b.out_w)?;
        let o = g.add_row(o, b.out_b)?;
        h = g.add(h, o)?;
        let m = g.layer_norm(h, b.ln2_g, b.ln2_b)?;
        let f = g.matmul(m, b.fc_w)?;
        let f = g.add_row(f, b.fc_b)?;
        let f = g.gelu(f);
        let p = g.matmul(f, b.proj_w)?;
        let p = g.add_row(p, b.proj_b)?;
        h = g.add(h, p)?;
    }
    Ok(h)
}

/// Output-head logits for selected rows of the hidden state.
pub fn logits_for_rows(
    g: &mut Graph<'_>,
    params: &Bound<'_>,
    hidden: NodeId,
    rows: &[usize],
) -> Result<NodeId, ModelError> {
    let [lnf_g, lnf_b, head_w, head_b] = params.tail();
    let sel = g.select_rows(hidden, rows)?;
    let n = g.layer_norm(sel, lnf_g, lnf_b)?;
    let logits = g.matmul(n, head_w)?;
    Ok(g.add_row(logits, head_b)?)
}

/// Response-token log-probabilities of a batch.
#[derive(Clone, Debug)]
pub struct ResponseLogprobs {
    /// Vector node holding every scored token of every row, row by row.
    pub node: NodeId,
    /// Slice of `node` belonging to each row.
    pub ranges: Vec<Range<usize>>,
}

/// Teacher-forced `log π(y_t | y_<t)` for every response position.
///
/// The token at position `p` is predicted from the hidden state at `p − 1`,
/// so only real positions are ever read and padding never reaches a loss.
pub fn response_logprobs(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    params: &Bound<'_>,
    batch: &SequenceBatch,
) -> Result<ResponseLogprobs, ModelError> {
    let hidden = hidden_states(cfg, g, params, batch)?;
    let mut rows = Vec::with_capacity(batch.total_response_tokens());
    let mut targets = Vec::with_capacity(rows.capacity());
    let mut ranges = Vec::with_capacity(batch.rows);
    for r in 0..batch.rows {
        let start = rows.len();
        for p in batch.prompt_lens[r]..batch.lengths[r] {
            rows.push(r * batch.seq_len + p - 1);
            targets.push(batch.ids[r * batch.seq_len + p]);
        }
        ranges.push(start..rows.len());
    }
    let logits = logits_for_rows(g, params, hidden, &rows)?;
    let node = g.log_softmax_gather(logits, &targets)?;
    Ok(ResponseLogprobs { node, ranges })
}

/// Standard-normal-scaled initial values for one tensor.
pub(crate) fn init_tensor(name: &str, shape: &[usize], n_layers: usize, rng: &mut impl rand::Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    if name.ends_with(".gain") {
        return Tensor::full(shape, 1.0);
    }
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let std = if name.ends_with("proj.weight") || name.ends_with("out.weight") {
        0.02 / (2.0 * n_layers as f64).sqrt()
    } else {
        0.02
    };
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("layout shape")
}
