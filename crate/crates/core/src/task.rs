// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Binary review polarity.
    Emotion,
    /// Three-way natural language inference.
    Nli,
    /// Binary paraphrase identification.
    Paraphrase,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Emotion, TaskKind::Nli, TaskKind::Paraphrase];

    /// Canonical, language-neutral label ids in fixed order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            TaskKind::Emotion => &["positive", "negative"],
            TaskKind::Nli => &["entailment", "neutral", "contradiction"],
            TaskKind::Paraphrase => &["paraphrase", "not_paraphrase"],
        }
    }

    pub fn label_arity(self) -> usize {
        self.labels().len()
    }

    /// Whether instances carry a second text (premise/hypothesis, sentence pair).
    pub fn two_text(self) -> bool {
        matches!(self, TaskKind::Nli | TaskKind::Paraphrase)
    }

    pub fn has_label(self, label: &str) -> bool {
        self.labels().contains(&label)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Emotion => "emotion",
            TaskKind::Nli => "nli",
            TaskKind::Paraphrase => "paraphrase",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emotion" => Ok(TaskKind::Emotion),
            "nli" => Ok(TaskKind::Nli),
            "paraphrase" => Ok(TaskKind::Paraphrase),
            other => Err(Error::InvalidInput(format!("unknown task {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arity_matches_task() {
        assert_eq!(TaskKind::Emotion.label_arity(), 2);
        assert_eq!(TaskKind::Nli.label_arity(), 3);
        assert_eq!(TaskKind::Paraphrase.label_arity(), 2);
        assert!(!TaskKind::Emotion.two_text());
        assert!(TaskKind::Nli.two_text());
    }

    #[test]
    fn parse_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(t.as_str().parse::<TaskKind>().unwrap(), t);
        }
        assert!("sentiment".parse::<TaskKind>().is_err());
    }
}
