//! Run reports: per-step losses plus end-of-run diagnostics, serialized as
//! a stable-key JSON document (struct field order plus sorted maps), so
//! identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub sup: f64,
    pub att: f64,
    pub exp: f64,
    pub imp: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    /// Mean hard Dice between original/augmented significance maps over the
    /// evaluation pass.
    pub dice_hard: Option<f64>,
    /// Per-category prototype concentration from the evaluation pass.
    pub d_c: BTreeMap<String, f64>,
    /// Mean of `d_c` over categories with data.
    pub mean_d_c: Option<f64>,
    /// Per-check max relative gradient errors (gradcheck runs only).
    pub gradcheck: BTreeMap<String, f64>,
    pub gradcheck_max_rel_err: Option<f64>,
    /// Mean L1 distance between two checkpoints' feature maps (diagnose
    /// with a second checkpoint only).
    pub feature_l1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub run: RunConfig,
    pub steps: Vec<StepMetrics>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn new(run: RunConfig) -> Self {
        MetricsReport {
            run,
            steps: Vec::new(),
            summary: Summary::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
