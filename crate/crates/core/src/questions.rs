//! The fixed bank of 19 Yes/No questions about ephemeral gully attributes,
//! the expert relevance ranking over it, and named subsets.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shared preamble placed before every question when prompting the VLM.
pub const PREAMBLE: &str =
    "Given these six images of the exact same area and collected over a period of 10 years ...";

/// Number of questions in the bank.
pub const BANK_SIZE: u8 = 19;

const TEXTS: [&str; 19] = [
    "Do you see a low point in the terrain?",
    "Do narrow, winding paths or channels appear?",
    "Are there winding paths that become intermittent recurrent?",
    "Are there any linear depressions or ruts which appear more pronounced along natural drainage lines or slopes?",
    "Are there narrow and shallow channels which appear intermittently deeper or more indented into the soil?",
    "Are there areas where soil appears disturbed or vegetation is removed?",
    "Does a specific path lack vegetation, suggesting an evolving or emerging channel?",
    "Are there varying types and levels of coarseness in the texture of the soil?",
    "Are there clear starting and ending points of potential channels?",
    "Are there small rills or grooves indicating water flow?",
    "Is there a varying exposure of lighter or darker colored soil?",
    "Are there sediment accumulations forming?",
    "Are there signs of water activity, like soil clumps or crusting, that appear or intensify in specific areas?",
    "Are there any branching patterns that resemble temporary streams?",
    "Are there indications of nearby human activity, such as tillage or machinery tracks?",
    "Do you see any sign of water flow patterns across the field in multiple images?",
    "Do you see any edges in the images indicating removal of soil along the water pathway?",
    "Do you see any cuts in the soil associated with water flow across the field?",
    "Do you see any indication of human activity such as tillage that is not naturally happened in the field?",
];

/// Expert ranking by relevance, most relevant first. Question 19 is unranked.
pub const EXPERT_RANKING: [u8; 18] = [2, 3, 14, 5, 4, 6, 9, 11, 13, 8, 10, 7, 1, 12, 15, 16, 17, 18];

/// Subset found by hyperparameter search over pipeline B.
pub const OPTUNA_SUBSET: [u8; 4] = [3, 6, 7, 12];

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 8] = ["q3", "q6", "q9", "q12", "q15", "q18", "optuna4", "full19"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuestionError {
    #[error("unknown question preset `{0}` (expected one of {names})", names = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("top-k size {0} out of range 1..=18")]
    OutOfRange(usize),
    #[error("question index {0} outside 1..=19")]
    InvalidIndex(i64),
    #[error("question index {0} listed more than once")]
    Duplicate(u8),
    #[error("question set is empty")]
    Empty,
    #[error("cannot parse question list `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Question {
    pub index: u8,
    pub text: &'static str,
    pub expert_rank: Option<u8>,
}

/// The whole bank in index order.
pub fn bank() -> Vec<Question> {
    (1..=BANK_SIZE).map(|i| question(i).expect("index in range")).collect()
}

pub fn question(index: u8) -> Option<Question> {
    if !(1..=BANK_SIZE).contains(&index) {
        return None;
    }
    let expert_rank = EXPERT_RANKING
        .iter()
        .position(|&q| q == index)
        .map(|p| p as u8 + 1);
    Some(Question {
        index,
        text: TEXTS[index as usize - 1],
        expert_rank,
    })
}

/// Question text for a valid index. Panics on an index outside the bank.
pub fn text(index: u8) -> &'static str {
    TEXTS[index as usize - 1]
}

/// Full VQA prompt for one question: preamble, newline, question.
pub fn render_question(index: u8) -> String {
    format!("{PREAMBLE}\n{}", text(index))
}

/// Reverse lookup used by the mock backend: which bank question does this prompt ask?
pub fn find_in_prompt(prompt: &str) -> Option<u8> {
    // Longest match first so that no question shadows a longer one containing it.
    let mut best: Option<(usize, u8)> = None;
    for (i, t) in TEXTS.iter().enumerate() {
        if prompt.contains(t) && best.is_none_or(|(len, _)| t.len() > len) {
            best = Some((t.len(), i as u8 + 1));
        }
    }
    best.map(|(_, idx)| idx)
}

/// An ordered, duplicate-free list of bank indices with a display name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionSet {
    pub name: String,
    pub indices: Vec<u8>,
}

impl QuestionSet {
    pub fn new(name: impl Into<String>, indices: Vec<u8>) -> Result<Self, QuestionError> {
        if indices.is_empty() {
            return Err(QuestionError::Empty);
        }
        let mut seen = [false; BANK_SIZE as usize + 1];
        for &i in &indices {
            if !(1..=BANK_SIZE).contains(&i) {
                return Err(QuestionError::InvalidIndex(i as i64));
            }
            if seen[i as usize] {
                return Err(QuestionError::Duplicate(i));
            }
            seen[i as usize] = true;
        }
        Ok(Self {
            name: name.into(),
            indices,
        })
    }

    /// Parse a comma-separated index list such as `3,6,7,12`.
    pub fn parse_list(list: &str) -> Result<Self, QuestionError> {
        let indices = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let v: i64 = s.parse().map_err(|_| QuestionError::Parse(list.to_string()))?;
                u8::try_from(v)
                    .ok()
                    .filter(|i| (1..=BANK_SIZE).contains(i))
                    .ok_or(QuestionError::InvalidIndex(v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let name = format!("custom({})", indices.iter().map(u8::to_string).collect::<Vec<_>>().join(","));
        Self::new(name, indices)
    }

    /// A preset name, or failing that a comma-separated list.
    pub fn resolve(arg: &str) -> Result<Self, QuestionError> {
        match preset(arg) {
            Ok(set) => Ok(set),
            Err(QuestionError::UnknownPreset(_)) if arg.contains(',') || arg.trim().parse::<i64>().is_ok() => {
                Self::parse_list(arg)
            }
            Err(e) => Err(e),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: u8) -> bool {
        self.indices.contains(&index)
    }
}

impl fmt::Display for QuestionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list: Vec<String> = self.indices.iter().map(u8::to_string).collect();
        write!(f, "{} [{}]", self.name, list.join(", "))
    }
}

pub fn preset(name: &str) -> Result<QuestionSet, QuestionError> {
    let set = match name {
        "q3" => top_k(3)?,
        "q6" => top_k(6)?,
        "q9" => top_k(9)?,
        "q12" => top_k(12)?,
        "q15" => top_k(15)?,
        "q18" => top_k(18)?,
        "optuna4" => QuestionSet::new("optuna4", OPTUNA_SUBSET.to_vec())?,
        "full19" => QuestionSet::new("full19", (1..=BANK_SIZE).collect())?,
        other => return Err(QuestionError::UnknownPreset(other.to_string())),
    };
    Ok(set)
}

/// First `k` questions of the expert ranking.
pub fn top_k(k: usize) -> Result<QuestionSet, QuestionError> {
    if k == 0 || k > EXPERT_RANKING.len() {
        return Err(QuestionError::OutOfRange(k));
    }
    QuestionSet::new(format!("q{k}"), EXPERT_RANKING[..k].to_vec())
}
