use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;

/// One evaluation on the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub lr: f64,
    /// Mean training loss since the previous record; absent at iteration 0.
    pub train_loss: Option<f64>,
    /// Main-head loss on the evaluation split.
    pub eval_loss: f64,
    pub mean_iou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub global_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Architecture in key-value form.
    pub arch: String,
    pub param_count: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub records: Vec<EvalRecord>,
    pub status: RunStatus,
    /// Checkpoint directory relative to the run directory.
    pub checkpoint: Option<String>,
}

impl RunReport {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.last().and_then(|r| r.mean_iou)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}
