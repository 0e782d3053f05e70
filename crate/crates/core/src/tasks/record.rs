use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TaskError;

use super::TaskKind;

/// One dataset line: task, token string(s), label and enough metadata to
/// regenerate the sample from its per-sample seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub task: TaskKind,
    pub tokens: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens2: Option<String>,
    pub label: String,
    pub meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Meta {
    pub index: u64,
    /// Per-sample derived generator seed; re-driving the generator with it
    /// reproduces the sample.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_args: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops_premise: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops_hypothesis: Option<usize>,
}

/// Line-delimited records, one JSON object per line.
pub fn write_records(path: &Path, records: &[Record]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, TaskError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| TaskError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("recurt-rec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_identity() {
        let recs = vec![
            Record {
                task: TaskKind::Listops,
                tokens: "[MAX 3 ]".into(),
                tokens2: None,
                label: "3".into(),
                meta: Meta { index: 0, seed: 42, depth: Some(1), max_args: Some(1), ..Default::default() },
            },
            Record {
                task: TaskKind::Logic,
                tokens: "a".into(),
                tokens2: Some("( not a )".into()),
                label: "negation".into(),
                meta: Meta { index: 1, seed: 43, ops_premise: Some(0), ops_hypothesis: Some(1), ..Default::default() },
            },
        ];
        let p = tmp("roundtrip.jsonl");
        write_records(&p, &recs).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn missing_label_is_rejected_with_line_number() {
        let p = tmp("bad.jsonl");
        std::fs::write(
            &p,
            "{\"task\":\"listops\",\"tokens\":\"[MAX 3 ]\",\"label\":\"3\",\"meta\":{\"index\":0,\"seed\":1}}\n{\"task\":\"listops\",\"tokens\":\"[MAX 4 ]\",\"meta\":{\"index\":1,\"seed\":2}}\n",
        )
        .unwrap();
        match read_records(&p) {
            Err(TaskError::Dataset { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("expected dataset error, got {other:?}"),
        }
    }
}
