use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::restore_into;
use super::config::ExperimentConfig;
use super::data::{build_view_pool, detection_eval_set, Split};
use super::train::{new_descriptor, new_detector_model};
use super::{ensure_dir, write_jsonl, FinalMetrics, RunReport};
use crate::datagen::{drift_sequence, mix_seed, BBox, Domain, GrayImage, SceneSample};
use crate::describe::{attention_consistency, retrieval_eval, Descriptor, RetrievalQuery};
use crate::detector::{iou, Detection, Detector};
use crate::error::{ForgeError, Result};
use crate::params::ParamStore;
use crate::track::{
    embed_detections, ground_truth_id, oracle_detections, tracking_metrics, FrameDetection, FrameRecord,
    TrackerState, TrackingMetrics,
};

/// IoU for a detection to count as a true positive.
pub const DETECTION_IOU: f64 = 0.5;
const SEQUENCE_SALT: u64 = 0x5E9;
const RANDOM_EMBED_SALT: u64 = 0x4A4D;
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub recall: f64,
    pub precision: f64,
    pub true_positives: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

/// True positives among `dets`: greedy by descending score, each truth box
/// claimed at most once, at IoU ≥ `iou_threshold`. Class-agnostic.
pub fn match_detections(dets: &[Detection], truth: &[BBox], iou_threshold: f64) -> usize {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for i in order {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, b)| (j, iou(&dets[i].bbox, b)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Recall and precision of per-image detections against scene truth.
/// Empty denominators give 1.
pub fn detection_metrics(dets: &[Vec<Detection>], scenes: &[SceneSample]) -> Result<DetectionMetrics> {
    if dets.len() != scenes.len() {
        return Err(ForgeError::Shape(format!("{} detection lists for {} scenes", dets.len(), scenes.len())));
    }
    let (mut tp, mut gt, mut n) = (0, 0, 0);
    for (d, s) in dets.iter().zip(scenes) {
        tp += match_detections(d, &s.boxes, DETECTION_IOU);
        gt += s.boxes.len();
        n += d.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(DetectionMetrics {
        recall: ratio(tp, gt),
        precision: ratio(tp, n),
        true_positives: tp,
        ground_truth: gt,
        detections: n,
    })
}

fn detect_all(detector: &Detector, store: &ParamStore, scenes: &[SceneSample]) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_BATCH) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        out.extend(detector.detect(store, &imgs)?);
    }
    Ok(out)
}

/// Source and target detection metrics on held-out scenes.
pub(crate) fn detector_metrics(
    cfg: &ExperimentConfig,
    detector: &Detector,
    store: &ParamStore,
    seed: u64,
) -> Result<FinalMetrics> {
    let mut m = FinalMetrics::default();
    for domain in [Domain::Source, Domain::Target] {
        let scenes = detection_eval_set(cfg, domain, seed)?;
        let r = detection_metrics(&detect_all(detector, store, &scenes)?, &scenes)?;
        match domain {
            Domain::Source => (m.source_recall, m.source_precision) = (Some(r.recall), Some(r.precision)),
            Domain::Target => (m.target_recall, m.target_precision) = (Some(r.recall), Some(r.precision)),
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_attention_consistency: f64,
    pub queries: usize,
    pub pairs: usize,
}

/// Consistency of one positive pair, averaged over the given stages.
fn pair_consistency(
    a: &crate::describe::AttentionState,
    b: &crate::describe::AttentionState,
    stages: &[usize],
) -> Result<f64> {
    let mut sum = 0.0;
    for &s in stages {
        sum += attention_consistency(&a.spatial_map[s], &b.spatial_map[s])?;
    }
    Ok(sum / stages.len() as f64)
}

/// Retrieval over every view of the held-out landmarks (each view queries
/// all the others) and mean spatial-attention consistency of view pairs.
pub fn descriptor_metrics(
    cfg: &ExperimentConfig,
    descriptor: &Descriptor,
    store: &ParamStore,
    seed: u64,
) -> Result<DescriptorMetrics> {
    if cfg.views.views_per_landmark < 2 {
        return Err(ForgeError::Config("views: retrieval needs at least two views per landmark".into()));
    }
    let pool = build_view_pool(cfg, Split::Eval, seed)?;
    let stages = &cfg.mars.stages;
    let mut gallery = Vec::with_capacity(pool.num_crops());
    let (mut consistency, mut pairs) = (0.0, 0usize);
    for lm in &pool.landmarks {
        let crops: Vec<&GrayImage> = lm.crops.iter().collect();
        let described = descriptor.describe(store, &crops)?;
        for w in described.windows(2) {
            consistency += pair_consistency(&w[0].1, &w[1].1, stages)?;
            pairs += 1;
        }
        gallery.extend(described.into_iter().map(|(e, _)| (lm.key, e.z)));
    }
    let queries: Vec<RetrievalQuery> = gallery
        .iter()
        .enumerate()
        .map(|(i, (id, z))| RetrievalQuery { landmark_id: *id, z, gallery_index: Some(i) })
        .collect();
    let r = retrieval_eval(&gallery, &queries)?;
    Ok(DescriptorMetrics {
        recall_at_1: r.recall_at_1,
        recall_at_5: r.recall_at_5,
        mean_attention_consistency: if pairs == 0 { 0.0 } else { consistency / pairs as f64 },
        queries: r.queries,
        pairs,
    })
}

/// Where tracking embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Descriptor,
    /// Independent random unit vectors per detection, an appearance-free ablation.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRun {
    pub log: Vec<FrameRecord>,
    pub metrics: TrackingMetrics,
}

/// Drifting evaluation sequence in the source domain.
pub fn evaluation_sequence(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SceneSample>> {
    let e = &cfg.evaluation;
    drift_sequence(
        &cfg.datagen,
        e.sequence_frames,
        e.sequence_drift,
        e.sequence_spin,
        &crate::datagen::DomainShift::IDENTITY,
        mix_seed(seed, SEQUENCE_SALT),
    )
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|a| a / n).collect()
}

/// Tracks `frames` with the given detector (oracle boxes when `None`).
pub fn run_tracking(
    cfg: &ExperimentConfig,
    detector: Option<(&Detector, &ParamStore)>,
    descriptor: (&Descriptor, &ParamStore),
    source: EmbeddingSource,
    frames: &[SceneSample],
    seed: u64,
) -> Result<TrackingRun> {
    let mut state = TrackerState::new(cfg.track.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, RANDOM_EMBED_SALT));
    let dim = descriptor.0.config.embed_dim;
    for frame in frames {
        let dets = match detector {
            Some((d, s)) => d.detect(s, &[&frame.image])?.remove(0),
            None => oracle_detections(frame),
        };
        let embedded = match source {
            EmbeddingSource::Descriptor => embed_detections(descriptor, frame, dets)?,
            EmbeddingSource::Random => dets
                .into_iter()
                .map(|detection| FrameDetection {
                    landmark_id: ground_truth_id(frame, &detection),
                    detection,
                    embedding: random_unit(&mut rng, dim),
                })
                .collect(),
        };
        state.step_detections(embedded, frame.instance_ids.len() == frame.boxes.len());
    }
    let metrics = tracking_metrics(&state.log)?;
    Ok(TrackingRun { log: state.log, metrics })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoints {
    pub detector: Option<PathBuf>,
    pub descriptor: Option<PathBuf>,
}

pub fn load_detector(cfg: &ExperimentConfig, dir: &Path) -> Result<(Detector, ParamStore)> {
    let (model, mut store) = new_detector_model(cfg, cfg.seed);
    restore_into(dir, "detector", &mut store)?;
    Ok((model.detector, store))
}

pub fn load_descriptor(cfg: &ExperimentConfig, dir: &Path) -> Result<(Descriptor, ParamStore)> {
    let (d, mut store) = new_descriptor(cfg, cfg.seed);
    restore_into(dir, "descriptor", &mut store)?;
    Ok((d, store))
}

/// Measures whatever the given checkpoints support. Parameters are only read.
/// Tracking runs on the evaluation sequence with the descriptor, using the
/// detector when one is given and oracle boxes otherwise.
pub fn evaluate(cfg: &ExperimentConfig, checkpoints: &Checkpoints) -> Result<RunReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    let seed = cfg.seed;
    let detector = checkpoints.detector.as_deref().map(|p| load_detector(cfg, p)).transpose()?;
    let descriptor = checkpoints.descriptor.as_deref().map(|p| load_descriptor(cfg, p)).transpose()?;
    if detector.is_none() && descriptor.is_none() {
        return Err(ForgeError::InvalidArgument("evaluate needs at least one checkpoint".into()));
    }
    let mut metrics = FinalMetrics::default();
    if let Some((d, s)) = &detector {
        metrics.merge(&detector_metrics(cfg, d, s, seed)?);
    }
    if let Some((d, s)) = &descriptor {
        let m = descriptor_metrics(cfg, d, s, seed)?;
        metrics.recall_at_1 = Some(m.recall_at_1);
        metrics.recall_at_5 = Some(m.recall_at_5);
        metrics.mean_attention_consistency = Some(m.mean_attention_consistency);
        let frames = evaluation_sequence(cfg, seed)?;
        let det = detector.as_ref().map(|(d, s)| (d, s));
        let run = run_tracking(cfg, det, (d, s), EmbeddingSource::Descriptor, &frames, seed)?;
        metrics.tracking = Some(run.metrics);
    }
    Ok(RunReport {
        kind: "eval".into(),
        config_hash: cfg.hash(),
        seed,
        wall_clock_seconds: t0.elapsed().as_secs_f64(),
        steps: Vec::new(),
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPairRecord {
    pub landmark_key: u64,
    pub stage: usize,
    pub consistency: f64,
    pub image: String,
}

/// Spatial attention maps of the first two views of each held-out landmark at
/// `stage`, returned as side-by-side heat maps (crop A, map A, crop B, map B)
/// with their consistency.
pub fn attention_pairs(
    cfg: &ExperimentConfig,
    descriptor: &Descriptor,
    store: &ParamStore,
    stage: usize,
    max_pairs: usize,
) -> Result<Vec<(u64, f64, GrayImage)>> {
    if stage >= descriptor.config.channels.len() {
        return Err(ForgeError::InvalidArgument(format!("no attention stage {stage}")));
    }
    let pool = build_view_pool(cfg, Split::Eval, cfg.seed)?;
    let mut out = Vec::new();
    for lm in pool.landmarks.iter().filter(|l| l.crops.len() >= 2).take(max_pairs) {
        let described = descriptor.describe(store, &[&lm.crops[0], &lm.crops[1]])?;
        let (a, b) = (&described[0].1, &described[1].1);
        let c = attention_consistency(&a.spatial_map[stage], &b.spatial_map[stage])?;
        let side = a.spatial_size[stage];
        let panels = [
            lm.crops[0].clone(),
            upsample(&a.spatial_map[stage], side, lm.crops[0].height),
            lm.crops[1].clone(),
            upsample(&b.spatial_map[stage], side, lm.crops[1].height),
        ];
        out.push((lm.key, c, side_by_side(&panels)));
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of a square map, min-max stretched to [0, 1].
fn upsample(map: &[f64], side: usize, size: usize) -> GrayImage {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size * side / size, i % size * side / size);
            (map[y * side + x] - lo) / span
        })
        .collect();
    GrayImage::new(size, size, data)
}

fn side_by_side(panels: &[GrayImage]) -> GrayImage {
    const GAP: usize = 2;
    let h = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width).sum::<usize>() + GAP * panels.len().saturating_sub(1);
    let mut out = GrayImage::filled(h, w, 1.0);
    let mut x0 = 0;
    for p in panels {
        for y in 0..p.height {
            for x in 0..p.width {
                out.data[y * w + x0 + x] = p.get(y, x);
            }
        }
        x0 += p.width + GAP;
    }
    out
}

/// Writes one PNG per pair and `attention_pairs.jsonl` under `out`.
pub fn attn_maps(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    stage: usize,
    max_pairs: usize,
) -> Result<Vec<AttentionPairRecord>> {
    let (descriptor, store) = load_descriptor(cfg, checkpoint)?;
    ensure_dir(out)?;
    let mut records = Vec::new();
    for (i, (key, consistency, img)) in attention_pairs(cfg, &descriptor, &store, stage, max_pairs)?.into_iter().enumerate() {
        let name = format!("pair_{i:03}.png");
        img.save_png(&out.join(&name))?;
        records.push(AttentionPairRecord { landmark_key: key, stage, consistency, image: name });
    }
    write_jsonl(&out.join("attention_pairs.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LandmarkClass;

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection { bbox: b.into(), score, class_id: LandmarkClass::from_index(0).unwrap() }
    }

    #[test]
    fn each_truth_box_counts_once() {
        let truth = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([0.5, 0.0, 10.5, 10.0], 0.8)];
        assert_eq!(match_detections(&dets, &truth, 0.5), 1);
    }

    #[test]
    fn low_overlap_is_a_miss() {
        let truth = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&[det([6.0, 0.0, 16.0, 10.0], 0.9)], &truth, 0.5), 0);
    }

    #[test]
    fn empty_denominators() {
        let m = detection_metrics(&[vec![]], &[SceneSample {
            image: GrayImage::filled(8, 8, 0.0),
            boxes: vec![],
            instance_ids: vec![],
            class_ids: vec![],
            domain: Domain::Source,
            view_group: 0,
            seed: 0,
        }])
        .unwrap();
        assert_eq!((m.recall, m.precision), (1.0, 1.0));
    }

    #[test]
    fn upsampled_map_is_stretched() {
        let img = upsample(&[0.2, 0.4, 0.6, 0.8], 2, 4);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(3, 3), 1.0);
        assert_eq!(img.get(0, 3), img.get(1, 2));
    }
}
