use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, ExperimentConfig};
use super::train::{smoothed, train_descriptor, train_detector};
use super::{bar_chart_svg, ensure_dir, line_plot_svg, median, write_file, write_jsonl, RunReport, Series};
use crate::error::{ForgeError, Result};

pub const AB_SEEDS: usize = 3;

/// Which training loop an A/B study runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Detector,
    Descriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ablation: AblationFlags,
}

/// One metric of one variant across seeds. `delta` is the median minus the
/// first variant's median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub variant: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub median: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbComparison {
    pub study: Study,
    pub seeds: Vec<u64>,
    pub rows: Vec<AbRow>,
    #[serde(skip)]
    pub reports: Vec<Vec<RunReport>>,
}

impl AbComparison {
    pub fn row(&self, variant: &str, metric: &str) -> Option<&AbRow> {
        self.rows.iter().find(|r| r.variant == variant && r.metric == metric)
    }
}

/// Trains every variant at seeds `s, s+1, s+2` and tabulates per-metric medians
/// and deltas against the first variant. With `out`, each run writes its own
/// directory and the table and plots land at the top.
pub fn ab_compare(cfg: &ExperimentConfig, study: Study, variants: &[Variant], out: Option<&Path>) -> Result<AbComparison> {
    if variants.is_empty() {
        return Err(ForgeError::InvalidArgument("ab_compare needs at least one variant".into()));
    }
    let seeds: Vec<u64> = (0..AB_SEEDS as u64).map(|k| cfg.seed + k).collect();
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.ablation = v.ablation;
            let dir = out.map(|o| o.join(&v.name).join(format!("seed_{seed}")));
            let report = match study {
                Study::Detector => train_detector(&c, dir.as_deref())?.report,
                Study::Descriptor => train_descriptor(&c, dir.as_deref())?.report,
            };
            runs.push(report);
        }
        reports.push(runs);
    }

    let mut rows = Vec::new();
    let metric_names: Vec<&str> = reports[0][0].metrics.scalars().iter().map(|(n, _)| *n).collect();
    for name in metric_names {
        let per_variant: Vec<Vec<f64>> = reports
            .iter()
            .map(|runs| {
                runs.iter()
                    .filter_map(|r| r.metrics.scalars().into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v))
                    .collect()
            })
            .collect();
        let Some(base) = median(&per_variant[0]) else { continue };
        for (v, values) in variants.iter().zip(per_variant) {
            let Some(m) = median(&values) else { continue };
            rows.push(AbRow { variant: v.name.clone(), metric: name.to_string(), values, median: m, delta: m - base });
        }
    }
    let cmp = AbComparison { study, seeds, rows, reports };
    if let Some(dir) = out {
        write_outputs(&cmp, variants, dir)?;
    }
    Ok(cmp)
}

fn write_outputs(cmp: &AbComparison, variants: &[Variant], dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_jsonl(&dir.join("comparison.jsonl"), &cmp.rows)?;
    let curves: Vec<Series> = variants
        .iter()
        .zip(&cmp.reports)
        .map(|(v, runs)| Series { name: format!("{} (seed {})", v.name, cmp.seeds[0]), values: smoothed(&runs[0].losses(), 25) })
        .collect();
    write_file(&dir.join("loss_curves.svg"), line_plot_svg("smoothed training loss", "step", &curves).as_bytes())?;
    let mut metrics: Vec<String> = Vec::new();
    for r in &cmp.rows {
        if !metrics.contains(&r.metric) && r.metric != "identity_switches" {
            metrics.push(r.metric.clone());
        }
    }
    let bars: Vec<Series> = variants
        .iter()
        .map(|v| Series {
            name: v.name.clone(),
            values: metrics.iter().map(|m| cmp.row(&v.name, m).map_or(f64::NAN, |r| r.median)).collect(),
        })
        .collect();
    write_file(&dir.join("metrics.svg"), bar_chart_svg("median final metrics", &metrics, &bars).as_bytes())
}
