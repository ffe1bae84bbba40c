use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synthdata::{filter_split, SampleRecord, Split};

use super::checkpoint::Checkpoint;
use super::train::evaluate_records;

/// Metrics of a checkpoint on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub config_hash: String,
    pub epoch: usize,
    pub samples: usize,
    pub metrics: MetricsReport,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(format!("cannot serialize report: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, records: &[SampleRecord], split: Split) -> Result<EvalReport> {
    let selected = filter_split(records, split);
    if selected.is_empty() {
        return Err(Error::Parameter(format!("split {split:?} has no records")));
    }
    let (cfg, model) = ckpt.model()?;
    let metrics = evaluate_records(&model, &cfg, &selected)?;
    Ok(EvalReport {
        split,
        config_hash: ckpt.config_hash.clone(),
        epoch: ckpt.epoch,
        samples: selected.len(),
        metrics,
    })
}
