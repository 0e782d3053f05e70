use std::path::Path;

use crate::error::HarnessError;
use crate::tasks::{flipflop, read_records, Record, TaskKind};

/// A record lowered to token ids plus its supervision target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input_a: Vec<u32>,
    pub input_b: Option<Vec<u32>>,
    pub target: PreparedTarget,
    /// ListOps nesting depth, kept for halting-adaptivity analysis.
    pub depth: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum PreparedTarget {
    Class(usize),
    /// Language-modeling supervision restricted to read instructions:
    /// the logits row at each position must predict the token id that
    /// follows it.
    Reads { positions: Vec<usize>, targets: Vec<usize> },
}

pub fn prepare(task: TaskKind, records: &[Record]) -> Result<Vec<Prepared>, HarnessError> {
    records
        .iter()
        .map(|r| {
            if r.task != task {
                return Err(HarnessError::TaskMismatch {
                    checkpoint: task.name().into(),
                    split: r.task.name().into(),
                });
            }
            prepare_one(task, r)
        })
        .collect()
}

fn prepare_one(task: TaskKind, r: &Record) -> Result<Prepared, HarnessError> {
    match task {
        TaskKind::Listops => Ok(Prepared {
            input_a: task.encode(&r.tokens)?,
            input_b: None,
            target: PreparedTarget::Class(task.label_index(&r.label)?),
            depth: r.meta.depth,
        }),
        TaskKind::Logic => Ok(Prepared {
            input_a: task.encode(&r.tokens)?,
            input_b: Some(task.encode(
                r.tokens2
                    .as_deref()
                    .ok_or_else(|| HarnessError::Config("logic record lacks hypothesis".into()))?,
            )?),
            target: PreparedTarget::Class(task.label_index(&r.label)?),
            depth: None,
        }),
        TaskKind::Flipflop => {
            let toks: Vec<&str> = r.tokens.split_whitespace().collect();
            let (positions, bits) = flipflop::flipflop_scan(&toks)?;
            let targets = bits
                .iter()
                .map(|b| task.token_id(if *b == 0 { "0" } else { "1" }).map(|id| id as usize))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Prepared {
                input_a: task.encode(&r.tokens)?,
                input_b: None,
                target: PreparedTarget::Reads { positions, targets },
                depth: None,
            })
        }
    }
}

#[derive(Debug)]
pub struct LoadedSplit {
    pub name: String,
    pub prepared: Vec<Prepared>,
}

pub fn load_split(dir: &Path, name: &str, task: TaskKind) -> Result<LoadedSplit, HarnessError> {
    let path = dir.join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "split file {} does not exist",
            path.display()
        )));
    }
    let records = read_records(&path)?;
    Ok(LoadedSplit {
        name: name.to_string(),
        prepared: prepare(task, &records)?,
    })
}
