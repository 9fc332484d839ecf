//! Conversations, prediction instances and the data pipeline around them.

mod ingest;
mod instances;
mod split;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::labeling::ThreadPattern;
use crate::{Error, Result};

pub use ingest::{
    ingest_jsonl, ingest_reader, tokenize, write_jsonl, CorpusSummary, IngestOptions, Ingested,
    RawConversation, RawTurn, EMPTY_TURN_TOKEN, URL_TOKEN,
};
pub use instances::{
    build_histories, build_instances, extract_instances, read_instance_records,
    write_instance_records, write_records, InstanceRecord,
};
pub use split::{split, DatasetSplit};
pub use vocab::{Vocabulary, PAD_TOKEN, UNK_TOKEN};

/// Opaque, non-empty author identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidInput("empty user id".into()));
        }
        Ok(UserId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        UserId::new(s)
    }
}

impl From<UserId> for String {
    fn from(u: UserId) -> String {
        u.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One post: its author and its (non-empty) token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub author: UserId,
    pub tokens: Vec<String>,
}

impl Turn {
    pub fn new(author: UserId, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput(format!(
                "turn by {author} has no tokens"
            )));
        }
        Ok(Turn { author, tokens })
    }
}

/// Turns in posting order; at least two.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub conv_id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(conv_id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let conv_id = conv_id.into();
        if turns.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "conversation {conv_id} has {} turns (need at least 2)",
                turns.len()
            )));
        }
        Ok(Conversation { conv_id, turns })
    }

    pub fn authors(&self) -> impl Iterator<Item = &UserId> {
        self.turns.iter().map(|t| &t.author)
    }
}

/// The target user's turns from other training conversations, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChatHistory {
    pub turns: Vec<Turn>,
}

impl ChatHistory {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// An observed prefix `t_1..t_m` ending at a turn by `target`, with the
/// main label and every auxiliary label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub conv_id: String,
    /// Prefix length `m` (1-based index of the target turn).
    pub position: usize,
    pub context: Vec<Turn>,
    pub target: UserId,
    pub history: ChatHistory,
    /// The target posts again after the prefix.
    pub y_main: bool,
    pub y_sp: bool,
    pub y_rt: bool,
    /// One entry per context turn except the last.
    pub y_ta: Vec<bool>,
}

impl Instance {
    pub fn pattern(&self) -> ThreadPattern {
        ThreadPattern::from_authors(self.context.iter().map(|t| &t.author))
    }
}
