//! Line-oriented JSON training metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One metrics line. Validation accuracy appears only on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub seg_loss: f64,
    pub label_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

/// Collects records in memory and optionally appends them to a JSONL file.
pub struct MetricsSink {
    writer: Option<BufWriter<File>>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        MetricsSink { writer: None, records: Vec::new() }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsSink {
            writer: Some(BufWriter::new(File::create(path)?)),
            records: Vec::new(),
        })
    }

    pub fn log(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)
                .map_err(|e| crate::error::Error::Data(format!("metrics serialization: {e}")))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Serialized form of every record, identical to the file contents.
    pub fn lines(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("metrics record serializes"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_memory_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = MetricsSink::to_file(&path).unwrap();
        sink.log(MetricsRecord {
            step: 1,
            stage: 1,
            loss: 1.5,
            seg_loss: 1.0,
            label_loss: 0.5,
            val_accuracy: None,
            lr: 1e-3,
        })
        .unwrap();
        sink.log(MetricsRecord {
            step: 2,
            stage: 1,
            loss: 1.2,
            seg_loss: 0.8,
            label_loss: 0.4,
            val_accuracy: Some(0.75),
            lr: 1e-3,
        })
        .unwrap();
        let file = std::fs::read_to_string(&path).unwrap();
        let mem = sink.lines().join("\n") + "\n";
        assert_eq!(file, mem);
        assert!(!file.lines().next().unwrap().contains("val_accuracy"));
        assert!(file.lines().nth(1).unwrap().contains("\"val_accuracy\":0.75"));
    }
}
