//! The revision prompt used for contrastive token scoring.
//!
//! The prompt asks for a rewrite of an answer in one direction ("better" or
//! "worse"). It is rendered as
//!
//! ```text
//! HEAD + instruction + MID + answer + TAIL(direction)
//! ```
//!
//! where `TAIL` ends with the opening marker of the rewritten answer and a
//! single newline, so that the answer scored next is read as the rewrite.
//! The `{detailed_description}` slot is filled as `more <aspects>`.

use std::fmt;

pub const HEAD: &str = "Instruction: Below is a conversation between an user and an AI Assistant.\n\n[User Question]\n\n";

pub const MID: &str = "\n\n[The start of Assistant's Answer]\n\n";

/// Aspect list that both directions are asked to revise along.
pub const ASPECTS: &str = "helpfulness, correctness, coherence, verbosity.";

pub const BETTER_DESCRIPTION: &str = "helpful, correct, coherent, concise";
pub const WORSE_DESCRIPTION: &str = "unhelpful, incorrect, incoherent, verbose";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Better,
    Worse,
}

impl Direction {
    pub fn word(self) -> &'static str {
        match self {
            Direction::Better => "better",
            Direction::Worse => "worse",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Direction::Better => BETTER_DESCRIPTION,
            Direction::Worse => WORSE_DESCRIPTION,
        }
    }

    pub fn detailed_description(self) -> String {
        format!("more {}", self.description())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Everything after the embedded answer, up to and including the newline
/// that follows the rewritten-answer marker.
pub fn tail(direction: Direction) -> String {
    let d = direction.word();
    format!(
        "\n\n[The end of Assistant's Answer]\n\n\
Please rewrite the Assistant's Answer to make it {d}. Specifically, the rewritten {d} answer should closely resemble the original answer but is {d} in terms of one or multiple of the following aspects:\n\n\
{ASPECTS}\n\n\
IMPORTANT: Please strictly follow the following format:\n\
First, choose one or multiple aspects to generate a {d} answer, such as rewrite the original answer to be {detail}, etc.\n\n\
[The start of a rewritten {d} answer]\n",
        detail = direction.detailed_description(),
    )
}

/// Full preamble text for one direction.
pub fn render(instruction: &str, answer: &str, direction: Direction) -> String {
    let mut s = String::with_capacity(HEAD.len() + instruction.len() + MID.len() + answer.len() + 700);
    s.push_str(HEAD);
    s.push_str(instruction);
    s.push_str(MID);
    s.push_str(answer);
    s.push_str(&tail(direction));
    s
}
