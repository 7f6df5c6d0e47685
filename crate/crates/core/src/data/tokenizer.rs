//! Byte-level tokenizer with a small block of reserved special tokens.
//!
//! Ids `0..256` are raw bytes. Ids `256..264` are specials: control tokens
//! that never appear in text (pad, bos, eos, the assistant-turn separator)
//! and template markers, each standing for one fixed segment of the
//! revision prompt. Template segments are matched greedily wherever they
//! occur in text and decode back to the same literal, so
//! `decode(encode(s)) == s` for every string.

use std::ops::Range;

use crate::rewards::template::{self, Direction};

use super::DataError;

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
/// Separates the user instruction from the assistant response.
pub const SEP: u32 = 259;
pub const TEMPLATE_HEAD: u32 = 260;
pub const TEMPLATE_MID: u32 = 261;
pub const TEMPLATE_TAIL_BETTER: u32 = 262;
pub const TEMPLATE_TAIL_WORSE: u32 = 263;

pub const VOCAB_SIZE: usize = 264;

#[derive(Clone, Debug)]
pub struct Tokenizer {
    /// (id, literal), longest literal first.
    segments: Vec<(u32, String)>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut segments = vec![
            (TEMPLATE_HEAD, template::HEAD.to_string()),
            (TEMPLATE_MID, template::MID.to_string()),
            (TEMPLATE_TAIL_BETTER, template::tail(Direction::Better)),
            (TEMPLATE_TAIL_WORSE, template::tail(Direction::Worse)),
        ];
        segments.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
        Self { segments }
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).into_iter().map(|(t, _)| t).collect()
    }

    /// Tokens together with the byte range of `text` each one covers.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(u32, Range<usize>)> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            for (id, lit) in &self.segments {
                if bytes[i..].starts_with(lit.as_bytes()) {
                    out.push((*id, i..i + lit.len()));
                    i += lit.len();
                    continue 'outer;
                }
            }
            out.push((bytes[i] as u32, i..i + 1));
            i += 1;
        }
        out
    }

    fn segment(&self, id: u32) -> Option<&str> {
        self.segments.iter().find(|(sid, _)| *sid == id).map(|(_, s)| s.as_str())
    }

    /// Bytes a token stands for; control tokens stand for nothing.
    pub fn token_bytes(&self, id: u32) -> Result<Vec<u8>, DataError> {
        match id {
            0..=255 => Ok(vec![id as u8]),
            PAD | BOS | EOS | SEP => Ok(Vec::new()),
            _ => self
                .segment(id)
                .map(|s| s.as_bytes().to_vec())
                .ok_or(DataError::UnknownToken(id)),
        }
    }

    /// Inverse of [`Tokenizer::encode`]; control tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Result<String, DataError> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &t in tokens {
            bytes.extend(self.token_bytes(t)?);
        }
        String::from_utf8(bytes).map_err(|e| DataError::Utf8(e.utf8_error().to_string()))
    }

    /// Short printable label for one token, for heatmaps and logs.
    pub fn token_label(&self, id: u32) -> Result<String, DataError> {
        Ok(match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            SEP => "<sep>".into(),
            TEMPLATE_HEAD => "<tpl:head>".into(),
            TEMPLATE_MID => "<tpl:mid>".into(),
            TEMPLATE_TAIL_BETTER => "<tpl:better>".into(),
            TEMPLATE_TAIL_WORSE => "<tpl:worse>".into(),
            0x20..=0x7e => (id as u8 as char).to_string(),
            b if b < 256 => format!("\\x{b:02x}"),
            other => return Err(DataError::UnknownToken(other)),
        })
    }

    /// `[BOS] instruction [SEP]`.
    pub fn encode_prompt(&self, instruction: &str) -> Vec<u32> {
        let mut v = Vec::with_capacity(instruction.len() + 2);
        v.push(BOS);
        v.extend(self.encode(instruction));
        v.push(SEP);
        v
    }

    /// `response [EOS]`.
    pub fn encode_response(&self, response: &str) -> Vec<u32> {
        let mut v = self.encode(response);
        v.push(EOS);
        v
    }
}
