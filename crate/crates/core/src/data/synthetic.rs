//! Planted-error preference task.
//!
//! Each instruction asks the model to echo a random lowercase word. The
//! chosen answer is the word itself; the rejected answer is the same word
//! with one short span (1–2 letters) replaced by different letters. The
//! span is the only difference between the two answers, so it alone decides
//! the preference and gives token-level ground truth for credit assignment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::PreferenceRecord;
use super::tokenizer::Tokenizer;
use crate::rewards::{self, template::Direction};

pub const WORD_LEN: usize = 8;
pub const MAX_SPAN: usize = 2;
pub const INSTRUCTION_PREFIX: &str = "echo: ";
const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_word(rng: &mut ChaCha8Rng) -> String {
    (0..WORD_LEN)
        .map(|_| *ALPHABET.choose(rng).expect("non-empty alphabet") as char)
        .collect()
}

fn different_letter(rng: &mut ChaCha8Rng, avoid: u8) -> u8 {
    loop {
        let c = *ALPHABET.choose(rng).expect("non-empty alphabet");
        if c != avoid {
            return c;
        }
    }
}

/// Replaces a random span of `answer` by different letters; returns the
/// corrupted text and the byte span.
pub fn corrupt(answer: &str, rng: &mut ChaCha8Rng) -> (String, [usize; 2]) {
    let bytes = answer.as_bytes();
    let span_len = rng.gen_range(1..=MAX_SPAN.min(bytes.len()));
    let start = rng.gen_range(0..=bytes.len() - span_len);
    let mut out = bytes.to_vec();
    for b in &mut out[start..start + span_len] {
        *b = different_letter(rng, *b);
    }
    (
        String::from_utf8(out).expect("ascii stays ascii"),
        [start, start + span_len],
    )
}

/// `n` planted-error records, deterministic in `seed`.
pub fn make_synthetic_planted_task(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let word = random_word(&mut rng);
            let (rejected, span) = corrupt(&word, &mut rng);
            PreferenceRecord {
                id: format!("synth-{seed}-{i:05}"),
                instruction: format!("{INSTRUCTION_PREFIX}{word}"),
                chosen: word,
                rejected,
                planted_span: Some(span),
            }
        })
        .collect()
}

/// Ground-truth scorer: the number of positions where `answer` matches the
/// word the instruction asks to echo. Higher is better.
pub fn planted_task_score(instruction: &str, answer: &str) -> usize {
    let target = instruction.strip_prefix(INSTRUCTION_PREFIX).unwrap_or(instruction);
    let matches = target.bytes().zip(answer.bytes()).filter(|(a, b)| a == b).count();
    matches.saturating_sub(target.len().abs_diff(answer.len()))
}

/// One supervised sequence: the loss covers positions `prompt_len..`.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl SftExample {
    fn new(prompt: Vec<u32>, response: Vec<u32>) -> Self {
        let prompt_len = prompt.len();
        let mut tokens = prompt;
        tokens.extend(response);
        Self { tokens, prompt_len }
    }
}

/// Supervised warm-up corpus for the planted task.
///
/// Teaches the starting model both to answer instructions and to carry out
/// the revision prompt: a "better" rewrite restores the correct word, a
/// "worse" rewrite keeps an existing error or plants a fresh one. The
/// resulting checkpoint plays the reference and evaluator roles.
pub fn planted_sft_corpus(records: &[PreferenceRecord], tok: &Tokenizer, seed: u64) -> Vec<SftExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f7_c0de);
    let mut out = Vec::with_capacity(records.len() * 5);
    for r in records {
        let revise = |slot: &str, dir: Direction, target: &str| {
            SftExample::new(
                rewards::contrastive_prefix(tok, &r.instruction, slot, dir),
                tok.encode_response(target),
            )
        };
        out.push(SftExample::new(tok.encode_prompt(&r.instruction), tok.encode_response(&r.chosen)));
        out.push(revise(&r.chosen, Direction::Better, &r.chosen));
        out.push(revise(&r.rejected, Direction::Better, &r.chosen));
        out.push(revise(&r.rejected, Direction::Worse, &r.rejected));
        let (fresh, _) = corrupt(&r.chosen, &mut rng);
        out.push(revise(&r.chosen, Direction::Worse, &fresh));
    }
    out
}
