//! Token-level credit diagnostics: reward heatmaps and scores against
//! planted ground-truth spans.
//!
//! Heatmaps show the unscaled log-ratio `log π_θ(y_t|·) − log π_ref(y_t|·)`.
//! Multiplying by β gives the DPO implicit token reward; signs and
//! orderings are the same either way.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PreferencePair, Tokenizer};
use crate::model::{ModelError, TokenScorer};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("pair `{id}` has no planted span")]
    MissingSpan { id: String },
    #[error("pair `{id}`: planted span {start}..{end} exceeds the {len}-token response")]
    SpanOutOfRange { id: String, start: usize, end: usize, len: usize },
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("no pairs to score")]
    Empty,
    #[error("non-finite reward at token {position} of `{id}`")]
    NonFinite { id: String, position: usize },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Which response of a pair a heatmap shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSide {
    Chosen,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub min: f64,
    pub max: f64,
    /// Symmetric clip: colours saturate at `±clip`.
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub id: String,
    pub side: HeatmapSide,
    pub tokens: Vec<String>,
    pub rewards: Vec<f64>,
    pub source: String,
    /// Multiply `rewards` by this to get DPO implicit token rewards.
    pub beta: f64,
    pub scale: ColorScale,
}

pub const HEATMAP_SOURCE: &str = "log_ratio";

/// 95th percentile of `|v|` (nearest rank); 0 for an empty slice.
pub fn clip_magnitude(values: &[f64]) -> f64 {
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return 0.0;
    }
    abs.sort_by(f64::total_cmp);
    let rank = (0.95 * abs.len() as f64).ceil() as usize;
    abs[rank.clamp(1, abs.len()) - 1]
}

/// Builds the heatmap of one response. Pure: reads both models only.
pub fn heatmap_record(
    policy: &dyn TokenScorer,
    reference: &dyn TokenScorer,
    tok: &Tokenizer,
    pair: &PreferencePair,
    side: HeatmapSide,
    beta: f64,
) -> Result<HeatmapRecord, DiagnosticsError> {
    if !(beta > 0.0) {
        return Err(DiagnosticsError::Beta(beta));
    }
    let (seq, response) = match side {
        HeatmapSide::Chosen => (pair.chosen_sequence(), &pair.chosen),
        HeatmapSide::Rejected => (pair.rejected_sequence(), &pair.rejected),
    };
    let rewards = log_ratio(policy, reference, &seq, pair.prompt_len(), &pair.id)?;
    let tokens = response
        .iter()
        .map(|&t| tok.token_label(t))
        .collect::<Result<Vec<_>, _>>()?;
    let min = rewards.iter().copied().fold(0.0f64, f64::min);
    let max = rewards.iter().copied().fold(0.0f64, f64::max);
    Ok(HeatmapRecord {
        id: pair.id.clone(),
        side,
        tokens,
        scale: ColorScale {
            min,
            max,
            clip: clip_magnitude(&rewards),
        },
        rewards,
        source: HEATMAP_SOURCE.to_string(),
        beta,
    })
}

fn log_ratio(
    policy: &dyn TokenScorer,
    reference: &dyn TokenScorer,
    seq: &[u32],
    prompt_len: usize,
    id: &str,
) -> Result<Vec<f64>, DiagnosticsError> {
    let a = policy.response_logprobs(seq, prompt_len)?;
    let b = reference.response_logprobs(seq, prompt_len)?;
    let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    if let Some(position) = out.iter().position(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite { id: id.to_string(), position });
    }
    Ok(out)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Background colour of one cell: red for positive, blue for negative,
/// white at zero.
pub fn cell_color(value: f64, clip: f64) -> String {
    let t = if clip > 0.0 { (value / clip).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t > 0.0 {
        format!("rgb(255,{fade},{fade})")
    } else if t < 0.0 {
        format!("rgb({fade},{fade},255)")
    } else {
        "rgb(255,255,255)".to_string()
    }
}

/// Standalone static page with one row of coloured tokens per record.
pub fn render_html(records: &[HeatmapRecord]) -> String {
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>token rewards</title>\n\
         <style>body{font-family:monospace}span{padding:1px 2px;margin:1px;display:inline-block}</style>\n\
         </head><body>\n",
    );
    for r in records {
        let side = match r.side {
            HeatmapSide::Chosen => "chosen",
            HeatmapSide::Rejected => "rejected",
        };
        let _ = writeln!(html, "<h3>{} ({side})</h3>\n<p>", escape_html(&r.id));
        for (t, v) in r.tokens.iter().zip(&r.rewards) {
            let _ = write!(
                html,
                "<span style=\"background:{}\" title=\"{v:.6}\">{}</span>",
                cell_color(*v, r.scale.clip),
                escape_html(t)
            );
        }
        html.push_str("</p>\n");
    }
    html.push_str("</body></html>\n");
    html
}

/// Writes `records` as JSON to `path`, plus `path` with an `.html`
/// extension when `html` is set. Returns the files written.
pub fn export_heatmap(records: &[HeatmapRecord], path: &Path, html: bool) -> Result<Vec<PathBuf>, DiagnosticsError> {
    let io = |p: &Path, e: std::io::Error| DiagnosticsError::Io {
        path: p.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(records).expect("heatmaps serialise");
    fs::write(path, json).map_err(|e| io(path, e))?;
    let mut out = vec![path.to_path_buf()];
    if html {
        let p = path.with_extension("html");
        fs::write(&p, render_html(records)).map_err(|e| io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

/// Credit-assignment scores of rejected responses against planted spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditMetrics {
    pub pairs: usize,
    /// Fraction of responses whose mean in-span reward is negative; an
    /// exactly-zero mean counts 0.5.
    pub sign_accuracy: f64,
    /// Fraction of responses whose minimum-reward token lies in the span.
    /// Tied minima share the credit evenly.
    pub localization: f64,
    /// Mean per-response Spearman correlation between `|reward|` and span
    /// membership, over responses where it is defined.
    pub rank_correlation: f64,
    /// Responses whose in-span mean was exactly zero.
    pub sign_ties: usize,
    /// Responses with constant `|reward|` or an all-span response.
    pub undefined_correlations: usize,
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Scores token rewards of rejected responses against their spans.
/// `None` when there is nothing to score.
pub fn score_credit<'a>(items: impl IntoIterator<Item = (&'a [f64], Range<usize>)>) -> Option<CreditMetrics> {
    let (mut n, mut sign, mut loc, mut corr, mut ties, mut undefined) = (0usize, 0.0, 0.0, 0.0, 0usize, 0usize);
    let mut defined = 0usize;
    for (r, span) in items {
        if span.is_empty() || span.end > r.len() {
            continue;
        }
        n += 1;
        let mean = r[span.clone()].iter().sum::<f64>() / span.len() as f64;
        if mean < 0.0 {
            sign += 1.0;
        } else if mean == 0.0 {
            sign += 0.5;
            ties += 1;
        }
        let min = r.iter().copied().fold(f64::INFINITY, f64::min);
        let minimisers: Vec<usize> = (0..r.len()).filter(|&i| r[i] == min).collect();
        loc += minimisers.iter().filter(|i| span.contains(i)).count() as f64 / minimisers.len() as f64;
        let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        let member: Vec<f64> = (0..r.len()).map(|i| f64::from(u8::from(span.contains(&i)))).collect();
        match spearman(&abs, &member) {
            Some(c) => {
                corr += c;
                defined += 1;
            }
            None => undefined += 1,
        }
    }
    (n > 0).then(|| CreditMetrics {
        pairs: n,
        sign_accuracy: sign / n as f64,
        localization: loc / n as f64,
        rank_correlation: if defined > 0 { corr / defined as f64 } else { 0.0 },
        sign_ties: ties,
        undefined_correlations: undefined,
    })
}

/// Credit metrics of the DPO implicit rewards `β · log(π_θ/π_ref)` on the
/// rejected responses of a planted dataset.
pub fn credit_metrics(
    policy: &dyn TokenScorer,
    reference: &dyn TokenScorer,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<CreditMetrics, DiagnosticsError> {
    if !(beta > 0.0) {
        return Err(DiagnosticsError::Beta(beta));
    }
    let mut rewards = Vec::with_capacity(pairs.len());
    for p in pairs {
        let span = p
            .planted_span
            .clone()
            .ok_or_else(|| DiagnosticsError::MissingSpan { id: p.id.clone() })?;
        if span.is_empty() || span.end > p.rejected.len() {
            return Err(DiagnosticsError::SpanOutOfRange {
                id: p.id.clone(),
                start: span.start,
                end: span.end,
                len: p.rejected.len(),
            });
        }
        let r: Vec<f64> = log_ratio(policy, reference, &p.rejected_sequence(), p.prompt_len(), &p.id)?
            .into_iter()
            .map(|v| beta * v)
            .collect();
        rewards.push((r, span));
    }
    score_credit(rewards.iter().map(|(r, s)| (r.as_slice(), s.clone()))).ok_or(DiagnosticsError::Empty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_planted_task, tokenize_records};
    use crate::model::{ModelConfig, PolicyState, Role};
    use crate::rewards::dpo_implicit_token_rewards;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Every response token gets log-prob −1 under the reference; the
    /// planted model halves the probability of span tokens.
    struct Planted {
        spans: HashMap<Vec<u32>, Range<usize>>,
        halve: bool,
    }

    impl TokenScorer for Planted {
        fn response_logprobs(&self, tokens: &[u32], prompt_len: usize) -> Result<Vec<f64>, ModelError> {
            let span = self.spans.get(tokens).cloned().unwrap_or(0..0);
            Ok((0..tokens.len() - prompt_len)
                .map(|i| {
                    if self.halve && span.contains(&i) {
                        -1.0 - std::f64::consts::LN_2
                    } else {
                        -1.0
                    }
                })
                .collect())
        }
    }

    fn planted_pairs(n: usize) -> Vec<PreferencePair> {
        tokenize_records(&make_synthetic_planted_task(n, 8), &Tokenizer::new(), 64).unwrap()
    }

    fn scorers(pairs: &[PreferencePair]) -> (Planted, Planted) {
        let spans: HashMap<_, _> = pairs
            .iter()
            .map(|p| (p.rejected_sequence(), p.planted_span.clone().unwrap()))
            .collect();
        (
            Planted {
                spans: spans.clone(),
                halve: true,
            },
            Planted { spans, halve: false },
        )
    }

    #[test]
    fn halving_span_probability_localizes_perfectly() {
        let pairs = planted_pairs(20);
        let (policy, reference) = scorers(&pairs);
        let m = credit_metrics(&policy, &reference, &pairs, 0.1).unwrap();
        assert_eq!(m.localization, 1.0);
        assert_eq!(m.sign_accuracy, 1.0);
        assert_eq!(m.rank_correlation, 1.0);
        assert_eq!(m.sign_ties, 0);
        assert_eq!(m, credit_metrics(&policy, &reference, &pairs, 0.1).unwrap());
    }

    #[test]
    fn identical_models_report_ties() {
        let pairs = planted_pairs(5);
        let model = PolicyState::init(ModelConfig {
            context_len: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let m = credit_metrics(&model, &model, &pairs, 0.1).unwrap();
        assert_eq!(m.sign_accuracy, 0.5);
        assert_eq!(m.sign_ties, 5);
        assert_eq!(m.undefined_correlations, 5);
        assert_eq!(m.rank_correlation, 0.0);
    }

    #[test]
    fn missing_span_is_an_error() {
        let mut pairs = planted_pairs(2);
        let (p, r) = scorers(&pairs);
        pairs[1].planted_span = None;
        assert!(matches!(
            credit_metrics(&p, &r, &pairs, 0.1),
            Err(DiagnosticsError::MissingSpan { .. })
        ));
    }

    #[test]
    fn heatmap_matches_implicit_rewards_over_beta() {
        let pairs = planted_pairs(3);
        let cfg = ModelConfig {
            context_len: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let reference = PolicyState::init(cfg.clone()).unwrap().freeze_copy(Role::Reference);
        let policy = PolicyState::init(ModelConfig { seed: 5, ..cfg }).unwrap();
        let tok = Tokenizer::new();
        let beta = 0.3;
        for p in &pairs {
            let h = heatmap_record(&policy, &reference, &tok, p, HeatmapSide::Rejected, beta).unwrap();
            assert_eq!(h.tokens.len(), h.rewards.len());
            let r = dpo_implicit_token_rewards(&policy, &reference, &p.rejected_sequence(), p.prompt_len(), beta).unwrap();
            for (a, b) in h.rewards.iter().zip(&r.values) {
                assert!((a - b / beta).abs() < 1e-12);
            }
            assert!(h.scale.min <= 0.0 && h.scale.max >= 0.0);
        }
        let same = heatmap_record(&reference, &reference, &tok, &pairs[0], HeatmapSide::Chosen, beta).unwrap();
        assert!(same.rewards.iter().all(|v| *v == 0.0));
        assert_eq!(same.scale.clip, 0.0);
        assert!(render_html(&[same]).matches("rgb(255,255,255)").count() == pairs[0].chosen.len());
    }

    #[test]
    fn export_writes_json_and_html() {
        let dir = tempfile::tempdir().unwrap();
        let rec = HeatmapRecord {
            id: "a<b".into(),
            side: HeatmapSide::Rejected,
            tokens: vec!["x".into(), "y".into()],
            rewards: vec![0.5, -0.25],
            source: HEATMAP_SOURCE.into(),
            beta: 0.1,
            scale: ColorScale {
                min: -0.25,
                max: 0.5,
                clip: 0.5,
            },
        };
        let files = export_heatmap(&[rec.clone()], &dir.path().join("h/out.json"), true).unwrap();
        assert_eq!(files.len(), 2);
        let back: Vec<HeatmapRecord> = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, vec![rec]);
        let html = fs::read_to_string(&files[1]).unwrap();
        assert!(html.contains("a&lt;b"));
        assert!(html.contains("rgb(255,0,0)"));
        assert!(html.contains("rgb(128,128,255)"));
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), None);
        // Ties take average ranks: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3).
        let r = spearman(&[0.0, 0.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((r - 0.8660254037844387).abs() < 1e-12);
    }

    #[test]
    fn clip_is_the_95th_percentile() {
        let v: Vec<f64> = (1..=100).map(|i| -(i as f64)).collect();
        assert_eq!(clip_magnitude(&v), 95.0);
        assert_eq!(clip_magnitude(&[]), 0.0);
        assert_eq!(cell_color(-2.0, 1.0), "rgb(0,0,255)");
    }

    proptest! {
        #[test]
        fn credit_is_invariant_to_positive_scale(
            r in proptest::collection::vec(-3.0f64..3.0, 3..12),
            start in 0usize..2,
            len in 1usize..3,
            scale in 0.01f64..100.0,
        ) {
            let span = start..(start + len).min(r.len());
            let scaled: Vec<f64> = r.iter().map(|v| v * scale).collect();
            let a = score_credit([(r.as_slice(), span.clone())]).unwrap();
            let b = score_credit([(scaled.as_slice(), span)]).unwrap();
            prop_assert_eq!(a.sign_accuracy, b.sign_accuracy);
            prop_assert_eq!(a.localization, b.localization);
            prop_assert!((a.rank_correlation - b.rank_correlation).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.localization));
        }
    }
}
