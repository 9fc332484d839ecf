use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Conversation, Instance, Turn, UserId};
use crate::{Error, Result};

/// Replacement for links under `reddit_clean`.
pub const URL_TOKEN: &str = "URL";
/// Stand-in for a turn whose text is empty after preprocessing.
pub const EMPTY_TURN_TOKEN: &str = "<empty>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Replace links with `URL` and drop non-alphabetic tokens.
    pub reddit_clean: bool,
}

/// On-disk conversation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawConversation {
    pub conv_id: String,
    pub turns: Vec<RawTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub author: String,
    pub text: String,
}

impl From<&Conversation> for RawConversation {
    fn from(c: &Conversation) -> Self {
        RawConversation {
            conv_id: c.conv_id.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| RawTurn {
                    author: t.author.as_str().to_string(),
                    text: t.tokens.join(" "),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub conversations: Vec<Conversation>,
    pub warnings: Vec<String>,
}

fn is_link(token: &str) -> bool {
    let t = token.to_ascii_lowercase();
    t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
}

/// Lowercased whitespace tokenization. The `URL` tag passes through
/// unchanged so cleaned corpora re-ingest to the same tokens.
pub fn tokenize(text: &str, opts: IngestOptions) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            if raw == URL_TOKEN {
                return Some(URL_TOKEN.to_string());
            }
            if opts.reddit_clean {
                if is_link(raw) {
                    return Some(URL_TOKEN.to_string());
                }
                if !raw.chars().all(char::is_alphabetic) {
                    return None;
                }
            }
            Some(raw.to_lowercase())
        })
        .collect()
}

pub fn ingest_jsonl(path: impl AsRef<Path>, opts: IngestOptions) -> Result<Ingested> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), opts)
}

pub fn ingest_reader<R: BufRead>(reader: R, opts: IngestOptions) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.turns.len() < 2 {
            let msg = format!(
                "line {line_no}: conversation {:?} has {} turn(s), skipped",
                raw.conv_id,
                raw.turns.len()
            );
            warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let mut turns = Vec::with_capacity(raw.turns.len());
        for t in raw.turns {
            let author = UserId::new(t.author).map_err(|_| Error::Parse {
                line: line_no,
                message: format!("empty author in conversation {:?}", raw.conv_id),
            })?;
            let mut tokens = tokenize(&t.text, opts);
            if tokens.is_empty() {
                tokens.push(EMPTY_TURN_TOKEN.to_string());
            }
            turns.push(Turn { author, tokens });
        }
        out.conversations.push(Conversation {
            conv_id: raw.conv_id,
            turns,
        });
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(writer: W, convs: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for c in convs {
        serde_json::to_writer(&mut w, &RawConversation::from(c))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<conversation writer>", e))?;
    }
    w.flush().map_err(|e| Error::io("<conversation writer>", e))
}

/// Dataset statistics in the shape of a corpus description table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub conversations: usize,
    pub turns: usize,
    pub avg_turns_per_conv: f64,
    pub avg_tokens_per_turn: f64,
    pub instances: usize,
    /// Fraction of instances whose target already posted earlier in context.
    pub repeated_target_rate: f64,
    pub positive_rate: f64,
}

impl CorpusSummary {
    pub fn compute(convs: &[Conversation], instances: &[Instance]) -> Self {
        let turns: usize = convs.iter().map(|c| c.turns.len()).sum();
        let tokens: usize = convs
            .iter()
            .flat_map(|c| &c.turns)
            .map(|t| t.tokens.len())
            .sum();
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        CorpusSummary {
            conversations: convs.len(),
            turns,
            avg_turns_per_conv: frac(turns, convs.len()),
            avg_tokens_per_turn: frac(tokens, turns),
            instances: instances.len(),
            repeated_target_rate: frac(
                instances.iter().filter(|i| i.y_rt).count(),
                instances.len(),
            ),
            positive_rate: frac(
                instances.iter().filter(|i| i.y_main).count(),
                instances.len(),
            ),
        }
    }
}
