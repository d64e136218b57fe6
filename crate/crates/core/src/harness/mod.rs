//! Configuration, training loops, evaluation, A/B orchestration and output
//! files.

mod ab;
mod checkpoint;
mod config;
mod data;
mod eval;
mod plot;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::track::TrackingMetrics;

pub use ab::{ab_compare, AB_SEEDS, AbComparison, AbRow, Study, Variant};
pub use checkpoint::{
    load_checkpoint, restore_into, save_checkpoint, CheckpointManifest, ParamEntry, BLOB_FILE, FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use config::{AblationFlags, EvaluationConfig, ExperimentConfig, OptimizerConfig, ViewsConfig};
pub use data::{build_view_pool, detection_eval_set, detection_train_set, PoolLandmark, Split, ViewPool};
pub use eval::{
    attention_pairs, attn_maps, descriptor_metrics, detection_metrics, evaluate, evaluation_sequence, load_descriptor,
    load_detector, match_detections, run_tracking, AttentionPairRecord, Checkpoints, DescriptorMetrics, DetectionMetrics,
    EmbeddingSource, TrackingRun, DETECTION_IOU,
};
pub use plot::{bar_chart_svg, line_plot_svg, Series};
pub use train::{smoothed, train_descriptor, train_detector, TrainedDescriptor, TrainedDetector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Final metrics of a run; absent when the run does not measure them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub target_recall: Option<f64>,
    pub source_recall: Option<f64>,
    pub target_precision: Option<f64>,
    pub source_precision: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub mean_attention_consistency: Option<f64>,
    pub tracking: Option<TrackingMetrics>,
}

impl FinalMetrics {
    /// Named scalar metrics, for tables and plots.
    pub fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("target_recall", self.target_recall),
            ("source_recall", self.source_recall),
            ("target_precision", self.target_precision),
            ("source_precision", self.source_precision),
            ("recall_at_1", self.recall_at_1),
            ("recall_at_5", self.recall_at_5),
            ("mean_attention_consistency", self.mean_attention_consistency),
            ("identity_switches", self.tracking.map(|t| t.identity_switches as f64)),
            ("match_precision", self.tracking.map(|t| t.match_precision)),
            ("match_recall", self.tracking.map(|t| t.match_recall)),
        ]
    }

    /// Fills every metric missing here from `other`.
    pub fn merge(&mut self, other: &FinalMetrics) {
        let pick = |a: &mut Option<f64>, b: Option<f64>| {
            if a.is_none() {
                *a = b;
            }
        };
        pick(&mut self.target_recall, other.target_recall);
        pick(&mut self.source_recall, other.source_recall);
        pick(&mut self.target_precision, other.target_precision);
        pick(&mut self.source_precision, other.source_precision);
        pick(&mut self.recall_at_1, other.recall_at_1);
        pick(&mut self.recall_at_5, other.recall_at_5);
        pick(&mut self.mean_attention_consistency, other.mean_attention_consistency);
        if self.tracking.is_none() {
            self.tracking = other.tracking;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub steps: Vec<StepRecord>,
    pub metrics: FinalMetrics,
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `report.json` (without the step history) and `steps.jsonl` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let summary = serde_json::json!({
            "kind": self.kind,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "wall_clock_seconds": self.wall_clock_seconds,
            "num_steps": self.steps.len(),
            "metrics": self.metrics,
        });
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
        write_jsonl(&dir.join("steps.jsonl"), &self.steps)
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ForgeError::io(format!("creating {}", dir.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ForgeError::io(format!("writing {}", path.display()), e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").expect("writing to memory");
    }
    write_file(path, &out)
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn merge_keeps_present_values() {
        let mut a = FinalMetrics { target_recall: Some(0.5), ..Default::default() };
        let b = FinalMetrics { target_recall: Some(0.1), recall_at_1: Some(0.9), ..Default::default() };
        a.merge(&b);
        assert_eq!((a.target_recall, a.recall_at_1), (Some(0.5), Some(0.9)));
    }
}
