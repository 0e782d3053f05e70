use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::HarnessError;

pub const CSV_HEADER: &str = "step,split,accuracy,main_loss,act_loss,mean_halt_layer,epoch_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub accuracy: f64,
    pub main_loss: f64,
    pub act_loss: f64,
    pub mean_halt_layer: f64,
    pub epoch_seconds: f64,
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.step,
            self.split,
            self.accuracy,
            self.main_loss,
            self.act_loss,
            self.mean_halt_layer,
            self.epoch_seconds
        )
    }

    pub fn parse_csv_line(line: &str) -> Option<MetricsRecord> {
        let mut parts = line.split(',');
        Some(MetricsRecord {
            step: parts.next()?.parse().ok()?,
            split: parts.next()?.to_string(),
            accuracy: parts.next()?.parse().ok()?,
            main_loss: parts.next()?.parse().ok()?,
            act_loss: parts.next()?.parse().ok()?,
            mean_halt_layer: parts.next()?.parse().ok()?,
            epoch_seconds: parts.next()?.parse().ok()?,
        })
    }
}

/// Append-only CSV log; the header is written once when the file is created.
pub struct CsvLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{CSV_HEADER}")?;
        writer.flush()?;
        Ok(CsvLog { path: path.to_path_buf(), writer })
    }

    pub fn append_to(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Self::create(path);
        }
        let writer = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(CsvLog { path: path.to_path_buf(), writer })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<(), HarnessError> {
        writeln!(self.writer, "{}", rec.to_csv_line())?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_line_round_trips() {
        let r = MetricsRecord {
            step: 120,
            split: "val".into(),
            accuracy: 0.8125,
            main_loss: 0.412345,
            act_loss: 1.75,
            mean_halt_layer: 2.5,
            epoch_seconds: 0.0,
        };
        let back = MetricsRecord::parse_csv_line(&r.to_csv_line()).unwrap();
        assert_eq!(back.step, 120);
        assert_eq!(back.split, "val");
        assert!((back.accuracy - 0.8125).abs() < 1e-9);
    }
}
