//! Cross-model comparison table: one row per evaluated model, with
//! values copied verbatim from each model's report file (never
//! recomputed) and the report hash recorded as provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub report_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Read each (model, report.json) pair, hash the file, and copy the
    /// macro averages into a row.
    pub fn from_report_files(entries: &[(String, PathBuf)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(entries.len());
        for (model, path) in entries {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let report = EvaluationReport::from_json(&String::from_utf8_lossy(&bytes))?;
            rows.push(ComparisonRow {
                model: model.clone(),
                precision: report.macro_avg.precision,
                recall: report.macro_avg.recall,
                f1: report.macro_avg.f1,
                auc: report.macro_avg.auc,
                accuracy: report.accuracy,
                report_sha256: ckpt::sha256_hex(&bytes),
            });
        }
        Ok(ComparisonTable { rows })
    }

    /// Full-precision CSV; values are the report values verbatim.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,precision,recall,f1,auc,accuracy,report_sha256\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.model,
                row.precision,
                row.recall,
                row.f1,
                row.auc.map(|a| a.to_string()).unwrap_or_default(),
                row.accuracy,
                row.report_sha256
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::LabelCodec;

    #[test]
    fn rows_copy_report_values_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let codec = LabelCodec::from_class_names(["a", "b"]);
        let y_true = vec![0usize, 0, 1, 1, 1];
        let probs = ndarray::array![
            [0.9f32, 0.1],
            [0.4, 0.6],
            [0.2, 0.8],
            [0.3, 0.7],
            [0.6, 0.4]
        ];
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        let path = dir.path().join("report.json");
        std::fs::write(&path, report.to_json()).unwrap();

        let table =
            ComparisonTable::from_report_files(&[("demo".to_string(), path.clone())]).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.precision, report.macro_avg.precision);
        assert_eq!(row.recall, report.macro_avg.recall);
        assert_eq!(row.f1, report.macro_avg.f1);
        assert_eq!(row.accuracy, report.accuracy);
        assert_eq!(
            row.report_sha256,
            ckpt::sha256_hex(&std::fs::read(&path).unwrap())
        );
        assert!(table.to_csv().starts_with("model,precision"));
    }
}
