//! Per-epoch records of the metrics stream.

use clorae_core::RoutingReport;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEpoch {
    pub dataset: String,
    /// Token-weighted mean training cross-entropy over the epoch.
    pub train_ce: f64,
    pub dev_f1: f64,
    /// Loss weight used during the epoch.
    pub weight: f64,
}

/// One line of `metrics.jsonl`. Wall time goes to `timing.jsonl` so that the
/// metrics bytes depend only on config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub datasets: Vec<DatasetEpoch>,
    /// Mean MIM loss over the epoch's groups; absent without MIM heads.
    pub mim_loss: Option<f64>,
    /// Task-specific share per layer group during training; absent without
    /// a learned gate.
    pub routing: Option<RoutingReport>,
}

impl EpochMetrics {
    pub fn weight_sum(&self) -> f64 {
        self.datasets.iter().map(|d| d.weight).sum()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub seconds: f64,
}
