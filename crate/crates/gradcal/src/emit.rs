//! Metric record types and file emitters.
//!
//! Each experiment writes two parallel streams: `metrics.jsonl` (one JSON
//! object per line, flushed per record so a crash leaves a parseable tail)
//! and `summary.csv` (same records, fixed column order).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A ratio that may carry the +inf sentinel; serialized as the string
/// "inf" when infinite, as a plain number otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaValue(pub f64);

impl Serialize for GammaValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else if self.0 == f64::INFINITY {
            serializer.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom(format!(
                "gamma value {} is not representable",
                self.0
            )))
        }
    }
}

impl<'de> Deserialize<'de> for GammaValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) => Ok(GammaValue(v)),
            Raw::Text(s) if s == "inf" => Ok(GammaValue(f64::INFINITY)),
            Raw::Text(s) => Err(D::Error::custom(format!("unexpected gamma value {s:?}"))),
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_det: f64,
    pub loss_seg: f64,
    /// Effective multiplier applied to the detection loss this step.
    pub alpha_det: f64,
    /// Effective multiplier applied to the segmentation loss this step.
    pub alpha_seg: f64,
    pub w_lid: f64,
    pub w_img: f64,
    pub gamma_task: GammaValue,
    pub gamma_modal: GammaValue,
    /// w_img / w_lid.
    pub gate_ratio: f64,
    /// Running detection accuracy over labeled training samples seen so far.
    pub det_acc: f64,
    /// Running segmentation IoU over labeled training samples seen so far.
    pub seg_iou: f64,
}

pub const CSV_HEADER: &str = "step,epoch,loss_det,loss_seg,alpha_det,alpha_seg,w_lid,w_img,gamma_task,gamma_modal,gate_ratio,det_acc,seg_iou";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss_det,
            self.loss_seg,
            self.alpha_det,
            self.alpha_seg,
            self.w_lid,
            self.w_img,
            self.gamma_task.0,
            self.gamma_modal.0,
            self.gate_ratio,
            self.det_acc,
            self.seg_iou
        )
    }
}

/// Writes the JSONL stream and the CSV summary side by side.
pub struct MetricsWriter {
    jsonl_path: PathBuf,
    jsonl: BufWriter<fs::File>,
    csv: BufWriter<fs::File>,
    records: u64,
}

impl MetricsWriter {
    /// Creates `metrics.jsonl` and `summary.csv` inside `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("summary.csv");
        let jsonl = BufWriter::new(
            fs::File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?,
        );
        let mut csv =
            BufWriter::new(fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?);
        csv.write_all(CSV_HEADER.as_bytes())
            .and_then(|_| csv.write_all(b"\n"))
            .map_err(|e| Error::io(&csv_path, e))?;
        Ok(MetricsWriter {
            jsonl_path,
            jsonl,
            csv,
            records: 0,
        })
    }

    /// Appends one record to both streams and flushes them.
    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::parse(&self.jsonl_path, e.to_string()))?;
        self.jsonl
            .write_all(line.as_bytes())
            .and_then(|_| self.jsonl.write_all(b"\n"))
            .and_then(|_| self.jsonl.flush())
            .map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv
            .write_all(record.csv_row().as_bytes())
            .and_then(|_| self.csv.write_all(b"\n"))
            .and_then(|_| self.csv.flush())
            .map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.records += 1;
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.records
    }
}

/// Reads a metrics stream back, one record per line.
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::parse(path, format!("{e}: {line}")))
        })
        .collect()
}
