//! Metrics CSV files shared by every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const HEADER: &str = "stage,epoch,split,loss,accuracy,lr,params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub params: usize,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.stage, self.epoch, self.split, self.loss, self.accuracy, self.lr, self.params
        )
    }
}

pub fn render(rows: &[MetricsRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, render(rows)).map_err(|e| CliError::io(path, e))
}

/// Writes a CSV with an arbitrary header and pre-formatted rows.
pub fn write_table(header: &str, rows: &[String], path: &Path) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}
