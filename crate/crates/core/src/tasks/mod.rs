//! Task generators, exact oracles, and dataset serialization for ListOps,
//! flip-flop language modeling and propositional logical inference.

pub mod flipflop;
pub mod listops;
pub mod logic;

mod record;
mod split;

pub use record::{read_records, write_records, Meta, Record};
pub use split::{generate_split, regenerate_record, DatasetSpec, SplitSpec};

use serde::{Deserialize, Serialize};

use crate::error::TaskError;

pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Listops,
    Flipflop,
    Logic,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Listops => "listops",
            TaskKind::Flipflop => "flipflop",
            TaskKind::Logic => "logic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "listops" => TaskKind::Listops,
            "flipflop" => TaskKind::Flipflop,
            "logic" => TaskKind::Logic,
            _ => return None,
        })
    }

    /// Whitespace token vocabulary. Classification tasks carry the START and
    /// END markers; flip-flop does not.
    pub fn vocab(&self) -> Vec<&'static str> {
        match self {
            TaskKind::Listops => {
                let mut v: Vec<&'static str> =
                    vec!["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
                v.extend(listops::OPS);
                v.push("]");
                v.push(START_TOKEN);
                v.push(END_TOKEN);
                v
            }
            TaskKind::Flipflop => vec!["w", "r", "i", "0", "1"],
            TaskKind::Logic => vec![
                "a", "b", "c", "d", "e", "f", "not", "and", "or", "(", ")", START_TOKEN, END_TOKEN,
            ],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskKind::Listops => 10,
            TaskKind::Flipflop => 2,
            TaskKind::Logic => 7,
        }
    }

    pub fn uses_markers(&self) -> bool {
        !matches!(self, TaskKind::Flipflop)
    }

    pub fn token_id(&self, tok: &str) -> Result<u32, TaskError> {
        self.vocab()
            .iter()
            .position(|&v| v == tok)
            .map(|i| i as u32)
            .ok_or_else(|| TaskError::Generation(format!("`{tok}` is not in the {} vocabulary", self.name())))
    }

    /// Encode a space-joined token string, adding START/END markers for the
    /// classification tasks.
    pub fn encode(&self, tokens: &str) -> Result<Vec<u32>, TaskError> {
        let mut ids = Vec::new();
        if self.uses_markers() {
            ids.push(self.token_id(START_TOKEN)?);
        }
        for tok in tokens.split_whitespace() {
            ids.push(self.token_id(tok)?);
        }
        if self.uses_markers() {
            ids.push(self.token_id(END_TOKEN)?);
        }
        Ok(ids)
    }

    /// Map a record label string to its class index.
    pub fn label_index(&self, label: &str) -> Result<usize, TaskError> {
        match self {
            TaskKind::Listops => label
                .parse::<usize>()
                .ok()
                .filter(|&d| d < 10)
                .ok_or_else(|| TaskError::Generation(format!("bad listops label `{label}`"))),
            TaskKind::Flipflop => match label {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(TaskError::Generation(format!("bad flipflop label `{label}`"))),
            },
            TaskKind::Logic => logic::Relation::parse(label)
                .map(|r| r.index())
                .ok_or_else(|| TaskError::Generation(format!("bad logic label `{label}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_sizes() {
        assert_eq!(TaskKind::Listops.vocab_size(), 17);
        assert_eq!(TaskKind::Flipflop.vocab_size(), 5);
        assert_eq!(TaskKind::Logic.vocab_size(), 13);
    }

    #[test]
    fn encoding_adds_markers_except_flipflop() {
        let ids = TaskKind::Listops.encode("[MAX 3 ]").unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], TaskKind::Listops.token_id(START_TOKEN).unwrap());
        assert_eq!(ids[4], TaskKind::Listops.token_id(END_TOKEN).unwrap());

        let ff = TaskKind::Flipflop.encode("w 0 r 0").unwrap();
        assert_eq!(ff.len(), 4);
    }

    #[test]
    fn unknown_token_is_rejected() {
        assert!(TaskKind::Logic.encode("( g )").is_err());
    }
}
