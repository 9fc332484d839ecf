use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ChatHistory, Conversation, Instance, Turn, UserId};
use crate::labeling::{rt_label, sp_label, ta_labels, Task, TaskSet};
use crate::{Error, Result};

/// One instance per target turn at positions `min_prefix..=M`, sorted by
/// `conv_id` then position. Histories are left empty.
pub fn extract_instances(convs: &[Conversation], min_prefix: usize) -> Result<Vec<Instance>> {
    if min_prefix < 2 {
        return Err(Error::Config(format!(
            "min_prefix must be at least 2, got {min_prefix}"
        )));
    }
    let mut order: Vec<&Conversation> = convs.iter().collect();
    order.sort_by(|a, b| a.conv_id.cmp(&b.conv_id));

    let per_conv: Vec<Vec<Instance>> = order
        .par_iter()
        .map(|conv| conversation_instances(conv, min_prefix))
        .collect::<Result<_>>()?;
    Ok(per_conv.into_iter().flatten().collect())
}

fn conversation_instances(conv: &Conversation, min_prefix: usize) -> Result<Vec<Instance>> {
    let turns = &conv.turns;
    (min_prefix..=turns.len())
        .map(|m| {
            let context = turns[..m].to_vec();
            let target = turns[m - 1].author.clone();
            let y_main = turns[m..].iter().any(|t| t.author == target);
            Ok(Instance {
                conv_id: conv.conv_id.clone(),
                position: m,
                y_sp: sp_label(&context),
                y_rt: rt_label(&context, &target)?,
                y_ta: ta_labels(&context, &target)?,
                context,
                target,
                history: ChatHistory::default(),
                y_main,
            })
        })
        .collect()
}

/// Attaches to every instance the target's most recent `cap` turns from
/// `train_convs`, excluding the instance's own conversation. Posting order
/// across conversations is file order, then turn order.
pub fn build_histories(instances: &mut [Instance], train_convs: &[Conversation], cap: usize) {
    let mut by_user: HashMap<&UserId, Vec<(&str, &Turn)>> = HashMap::new();
    for conv in train_convs {
        for turn in &conv.turns {
            by_user
                .entry(&turn.author)
                .or_default()
                .push((conv.conv_id.as_str(), turn));
        }
    }
    instances.par_iter_mut().for_each(|inst| {
        let mut picked: Vec<Turn> = match by_user.get(&inst.target) {
            Some(turns) => turns
                .iter()
                .rev()
                .filter(|(cid, _)| *cid != inst.conv_id)
                .take(cap)
                .map(|(_, t)| (*t).clone())
                .collect(),
            None => Vec::new(),
        };
        picked.reverse();
        inst.history = ChatHistory { turns: picked };
    });
}

/// `extract_instances` followed by `build_histories`.
pub fn build_instances(
    convs: &[Conversation],
    history_source: &[Conversation],
    min_prefix: usize,
    history_cap: usize,
) -> Result<Vec<Instance>> {
    let mut instances = extract_instances(convs, min_prefix)?;
    build_histories(&mut instances, history_source, history_cap);
    Ok(instances)
}

/// Line format of the `labels` dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub conv_id: String,
    pub position: usize,
    pub target: String,
    pub pattern: String,
    pub history_turns: usize,
    pub y_main: u8,
    pub y_sp: u8,
    pub y_rt: u8,
    pub y_ta: Vec<u8>,
}

impl From<&Instance> for InstanceRecord {
    fn from(i: &Instance) -> Self {
        InstanceRecord {
            conv_id: i.conv_id.clone(),
            position: i.position,
            target: i.target.as_str().to_string(),
            pattern: i.pattern().as_str().to_string(),
            history_turns: i.history.len(),
            y_main: u8::from(i.y_main),
            y_sp: u8::from(i.y_sp),
            y_rt: u8::from(i.y_rt),
            y_ta: i.y_ta.iter().map(|y| u8::from(*y)).collect(),
        }
    }
}

impl InstanceRecord {
    /// Flips the selected auxiliary labels, as `invert_labels` does.
    pub fn invert(&mut self, tasks: TaskSet) {
        if tasks.contains(Task::Sp) {
            self.y_sp ^= 1;
        }
        if tasks.contains(Task::Rt) {
            self.y_rt ^= 1;
        }
        if tasks.contains(Task::Ta) {
            self.y_ta.iter_mut().for_each(|y| *y ^= 1);
        }
    }
}

pub fn write_instance_records<W: Write>(writer: W, instances: &[Instance]) -> Result<()> {
    let records: Vec<InstanceRecord> = instances.iter().map(InstanceRecord::from).collect();
    write_records(writer, &records)
}

pub fn write_records<W: Write>(writer: W, records: &[InstanceRecord]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<instance writer>", e))?;
    }
    w.flush().map_err(|e| Error::io("<instance writer>", e))
}

pub fn read_instance_records<R: BufRead>(reader: R) -> Result<Vec<InstanceRecord>> {
    reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
