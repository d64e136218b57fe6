//! Appearance-only landmark tracking across frames.
//!
//! Tracks and detections are associated by cosine similarity of descriptor
//! embeddings. Pairs are resolved greedily in order of decreasing
//! similarity, so each accepted pair is a mutual nearest neighbour among the
//! tracks and detections still unresolved. A resolved pair is only kept if
//! it clears `min_sim` and the ratio test against the runner-up distances;
//! otherwise both sides stay unmatched for this frame.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datagen::SceneSample;
use crate::describe::{extract_crop, Descriptor, CROP_SIZE};
use crate::detector::{iou, Detection, Detector};
use crate::error::{ForgeError, Result};
use crate::params::ParamStore;

/// IoU needed for a detection to inherit a ground-truth identity.
pub const GT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub ratio: f64,
    pub min_sim: f64,
    pub momentum: f64,
    pub max_age: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { ratio: 0.8, min_sim: 0.5, momentum: 0.7, max_age: 3 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(ForgeError::Config("track: ratio must lie in (0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.min_sim) {
            return Err(ForgeError::Config("track: min_sim must lie in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(ForgeError::Config("track: momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame: usize,
    pub detection: Detection,
    pub landmark_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub last_embedding: Vec<f64>,
    pub history: Vec<TrackEntry>,
    pub age: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(u64, usize)>,
    pub unmatched_tracks: Vec<u64>,
    pub unmatched_detections: Vec<usize>,
}

/// A detection with its embedding and, when known, its true identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetection {
    pub detection: Detection,
    pub embedding: Vec<f64>,
    pub landmark_id: Option<u32>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|a| a / n).collect()
    } else {
        v.to_vec()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity matrix, tracks × detections.
pub fn similarity_matrix(tracks: &[&[f64]], detections: &[&[f64]]) -> Vec<Vec<f64>> {
    tracks.iter().map(|t| detections.iter().map(|d| cosine(t, d)).collect()).collect()
}

/// Smallest distance `1 − sim` in `sims` other than position `skip`; 2 when
/// there is none.
fn runner_up_dist(sims: impl Iterator<Item = f64>, skip: usize) -> f64 {
    sims.enumerate().filter(|&(i, _)| i != skip).map(|(_, s)| 1.0 - s).fold(2.0, f64::min)
}

/// Whether pair `(t, d)` of `sims` clears `min_sim` and the ratio test on both
/// its row and column.
pub fn accept_pair(sims: &[Vec<f64>], t: usize, d: usize, ratio: f64, min_sim: f64) -> bool {
    let best = sims[t][d];
    let dist = 1.0 - best;
    let row = runner_up_dist(sims[t].iter().copied(), d);
    let col = runner_up_dist(sims.iter().map(|r| r[d]), t);
    best >= min_sim && dist <= ratio * row && dist <= ratio * col
}

/// Associates tracks (ids plus embeddings) with detection embeddings.
pub fn match_tracks(tracks: &[(u64, &[f64])], detections: &[&[f64]], ratio: f64, min_sim: f64) -> MatchResult {
    let t_emb: Vec<&[f64]> = tracks.iter().map(|t| t.1).collect();
    let sims = similarity_matrix(&t_emb, detections);
    let mut order: Vec<(usize, usize)> =
        (0..tracks.len()).flat_map(|t| (0..detections.len()).map(move |d| (t, d))).collect();
    order.sort_by(|a, b| sims[b.0][b.1].total_cmp(&sims[a.0][a.1]).then(a.cmp(b)));
    let mut t_used = vec![false; tracks.len()];
    let mut d_used = vec![false; detections.len()];
    let mut pairs = Vec::new();
    for (t, d) in order {
        if t_used[t] || d_used[d] {
            continue;
        }
        t_used[t] = true;
        d_used[d] = true;
        if accept_pair(&sims, t, d, ratio, min_sim) {
            pairs.push((t, d));
        }
    }
    let matched_t: HashSet<usize> = pairs.iter().map(|p| p.0).collect();
    let matched_d: HashSet<usize> = pairs.iter().map(|p| p.1).collect();
    MatchResult {
        pairs: pairs.iter().map(|&(t, d)| (tracks[t].0, d)).collect(),
        unmatched_tracks: (0..tracks.len()).filter(|t| !matched_t.contains(t)).map(|t| tracks[t].0).collect(),
        unmatched_detections: (0..detections.len()).filter(|d| !matched_d.contains(d)).collect(),
    }
}

/// What happened to one detection in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub frame: usize,
    pub detection_index: usize,
    pub track_id: u64,
    /// True when the detection extended an existing track.
    pub matched: bool,
    pub landmark_id: Option<u32>,
    /// Identity carried by the track before this frame.
    pub previous_landmark_id: Option<u32>,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub ground_truth: bool,
    pub assignments: Vec<AssignmentRecord>,
    pub retired: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub config: TrackerConfig,
    pub tracks: Vec<Track>,
    pub retired: Vec<Track>,
    pub next_id: u64,
    pub frame_index: usize,
    pub log: Vec<FrameRecord>,
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, tracks: Vec::new(), retired: Vec::new(), next_id: 0, frame_index: 0, log: Vec::new() }
    }

    /// Advances one frame given already embedded detections.
    pub fn step_detections(&mut self, detections: Vec<FrameDetection>, ground_truth: bool) -> MatchResult {
        let frame = self.frame_index;
        let track_refs: Vec<(u64, &[f64])> =
            self.tracks.iter().map(|t| (t.track_id, t.last_embedding.as_slice())).collect();
        let det_refs: Vec<&[f64]> = detections.iter().map(|d| d.embedding.as_slice()).collect();
        let result = match_tracks(&track_refs, &det_refs, self.config.ratio, self.config.min_sim);

        let mut assignments = Vec::with_capacity(detections.len());
        let index: HashMap<u64, usize> = self.tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
        let m = self.config.momentum;
        for &(tid, d) in &result.pairs {
            let track = &mut self.tracks[index[&tid]];
            let det = &detections[d];
            let previous = track.history.last().and_then(|e| e.landmark_id);
            let e = unit(&det.embedding);
            let blended: Vec<f64> = track.last_embedding.iter().zip(&e).map(|(a, b)| m * a + (1.0 - m) * b).collect();
            track.last_embedding = if m == 1.0 { track.last_embedding.clone() } else { unit(&blended) };
            track.age = 0;
            track.history.push(TrackEntry { frame, detection: det.detection, landmark_id: det.landmark_id });
            assignments.push(AssignmentRecord {
                frame,
                detection_index: d,
                track_id: tid,
                matched: true,
                landmark_id: det.landmark_id,
                previous_landmark_id: previous,
                detection: det.detection,
            });
        }
        for &tid in &result.unmatched_tracks {
            self.tracks[index[&tid]].age += 1;
        }
        for &d in &result.unmatched_detections {
            let det = &detections[d];
            let track_id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track {
                track_id,
                last_embedding: unit(&det.embedding),
                history: vec![TrackEntry { frame, detection: det.detection, landmark_id: det.landmark_id }],
                age: 0,
            });
            assignments.push(AssignmentRecord {
                frame,
                detection_index: d,
                track_id,
                matched: false,
                landmark_id: det.landmark_id,
                previous_landmark_id: None,
                detection: det.detection,
            });
        }
        let max_age = self.config.max_age;
        let (keep, gone): (Vec<Track>, Vec<Track>) = self.tracks.drain(..).partition(|t| t.age <= max_age);
        self.tracks = keep;
        let retired = gone.iter().map(|t| t.track_id).collect();
        self.retired.extend(gone);
        assignments.sort_by_key(|a| a.detection_index);
        self.log.push(FrameRecord { frame, ground_truth, assignments, retired });
        self.frame_index += 1;
        result
    }

    /// Detects, describes and associates one frame.
    pub fn step(
        &mut self,
        detector: (&Detector, &ParamStore),
        descriptor: (&Descriptor, &ParamStore),
        frame: &SceneSample,
    ) -> Result<MatchResult> {
        let dets = detector.0.detect(detector.1, &[&frame.image])?.remove(0);
        let embedded = embed_detections(descriptor, frame, dets)?;
        Ok(self.step_detections(embedded, has_ground_truth(frame)))
    }
}

fn has_ground_truth(frame: &SceneSample) -> bool {
    frame.instance_ids.len() == frame.boxes.len()
}

/// Ground-truth identity of `det`: the best-overlapping true box at IoU ≥ 0.5.
pub fn ground_truth_id(frame: &SceneSample, det: &Detection) -> Option<u32> {
    frame
        .boxes
        .iter()
        .zip(&frame.instance_ids)
        .map(|(b, &id)| (iou(b, &det.bbox), id))
        .filter(|&(v, _)| v >= GT_IOU)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, id)| id)
}

/// Crops and embeds detections of one frame.
pub fn embed_detections(
    descriptor: (&Descriptor, &ParamStore),
    frame: &SceneSample,
    dets: Vec<Detection>,
) -> Result<Vec<FrameDetection>> {
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let crops: Vec<_> = dets.iter().map(|d| extract_crop(&frame.image, &d.bbox, CROP_SIZE)).collect();
    let refs: Vec<_> = crops.iter().collect();
    let z = descriptor.0.embed(descriptor.1, &refs)?;
    Ok(dets
        .into_iter()
        .zip(z)
        .map(|(detection, embedding)| FrameDetection { landmark_id: ground_truth_id(frame, &detection), detection, embedding })
        .collect())
}

/// Ground-truth boxes as perfect detections.
pub fn oracle_detections(frame: &SceneSample) -> Vec<Detection> {
    frame
        .boxes
        .iter()
        .zip(&frame.class_ids)
        .map(|(&bbox, &class_id)| Detection { bbox, score: 1.0, class_id })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub identity_switches: usize,
    pub match_precision: f64,
    pub match_recall: f64,
    pub matches: usize,
    pub frames: usize,
}

/// Identity switches, match precision and match recall of a tracking log.
///
/// A switch is a change of track id for the same true landmark between
/// consecutive sightings. A match is correct when the track last carried the
/// same identity. Recall counts detections of landmarks seen earlier in the
/// sequence. Empty denominators give 1.
pub fn tracking_metrics(log: &[FrameRecord]) -> Result<TrackingMetrics> {
    if let Some(f) = log.iter().find(|f| !f.ground_truth) {
        return Err(ForgeError::InvalidArgument(format!("frame {} has no ground truth", f.frame)));
    }
    let mut last_track: HashMap<u32, u64> = HashMap::new();
    let mut switches = 0;
    let (mut matches, mut correct) = (0usize, 0usize);
    let (mut revisits, mut recovered) = (0usize, 0usize);
    for f in log {
        for a in &f.assignments {
            let correct_match = a.matched && a.landmark_id.is_some() && a.landmark_id == a.previous_landmark_id;
            if a.matched {
                matches += 1;
                correct += correct_match as usize;
            }
            if let Some(id) = a.landmark_id {
                if let Some(&prev) = last_track.get(&id) {
                    revisits += 1;
                    recovered += correct_match as usize;
                    switches += (prev != a.track_id) as usize;
                }
                last_track.insert(id, a.track_id);
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(TrackingMetrics {
        identity_switches: switches,
        match_precision: ratio(correct, matches),
        match_recall: ratio(recovered, revisits),
        matches,
        frames: log.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{BBox, LandmarkClass};
    use proptest::prelude::*;

    fn det(x: f64) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), score: 0.9, class_id: LandmarkClass::Crater }
    }

    fn fd(e: Vec<f64>, id: Option<u32>) -> FrameDetection {
        FrameDetection { detection: det(0.0), embedding: e, landmark_id: id }
    }

    #[test]
    fn singleton_matches() {
        let e = [0.6, 0.8];
        let r = match_tracks(&[(7, &e)], &[&e], 0.8, 0.5);
        assert_eq!(r.pairs, vec![(7, 0)]);
        let r = match_tracks(&[(7, &e)], &[], 0.8, 0.5);
        assert_eq!(r.unmatched_tracks, vec![7]);
        assert!(r.pairs.is_empty());
        let r = match_tracks(&[], &[&e], 0.8, 0.5);
        assert_eq!(r.unmatched_detections, vec![0]);
    }

    #[test]
    fn crossed_similarities_keep_identity() {
        // points on the unit circle with cos(t0,d0)=0.99, cos(t0,d1)=0.98, cos(t1,d1)=0.99
        let (ta, tb) = (0.99f64.acos(), 0.98f64.acos());
        let at = |a: f64| [a.cos(), a.sin()];
        let (tr0, da, dbv, tr1) = (at(ta), at(0.0), at(ta + tb), at(2.0 * ta + tb));
        let sims = similarity_matrix(&[&tr0, &tr1], &[&da, &dbv]);
        assert!((sims[0][0] - 0.99).abs() < 1e-12);
        let r = match_tracks(&[(0, &tr0), (1, &tr1)], &[&da, &dbv], 1.0, 0.5);
        let mut pairs = r.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn ambiguous_pairs_stay_unmatched() {
        let t = [1.0, 0.0];
        let d0 = [0.99, 0.141];
        let d1 = [0.99, -0.141];
        let r = match_tracks(&[(0, &t)], &[&d0, &d1], 0.8, 0.5);
        assert!(r.pairs.is_empty());
        let low = [0.0, 1.0];
        let r = match_tracks(&[(0, &t)], &[&low], 0.8, 0.5);
        assert!(r.pairs.is_empty());
    }

    proptest! {
        #[test]
        fn match_partitions(
            t in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 0..6),
            d in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 0..6),
            ratio in 0.1f64..=1.0,
            min_sim in -1.0f64..1.0,
        ) {
            let tracks: Vec<(u64, &[f64])> = t.iter().enumerate().map(|(i, v)| (i as u64 * 3, v.as_slice())).collect();
            let dets: Vec<&[f64]> = d.iter().map(|v| v.as_slice()).collect();
            let r = match_tracks(&tracks, &dets, ratio, min_sim);
            let mut ts: Vec<u64> = r.pairs.iter().map(|p| p.0).chain(r.unmatched_tracks.iter().copied()).collect();
            ts.sort();
            prop_assert_eq!(ts, tracks.iter().map(|t| t.0).collect::<Vec<_>>());
            let mut ds: Vec<usize> = r.pairs.iter().map(|p| p.1).chain(r.unmatched_detections.iter().copied()).collect();
            ds.sort();
            prop_assert_eq!(ds, (0..dets.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_frame_ages_tracks() {
        let mut s = TrackerState::new(TrackerConfig::default());
        s.step_detections(vec![fd(vec![1.0, 0.0], Some(1)), fd(vec![0.0, 1.0], Some(2))], true);
        s.step_detections(vec![], true);
        assert!(s.tracks.iter().all(|t| t.age == 1));
        for _ in 0..3 {
            s.step_detections(vec![], true);
        }
        assert!(s.tracks.is_empty());
        assert_eq!(s.retired.len(), 2);
    }

    #[test]
    fn full_momentum_freezes_embedding() {
        let cfg = TrackerConfig { momentum: 1.0, ratio: 1.0, min_sim: 0.0, ..TrackerConfig::default() };
        let mut s = TrackerState::new(cfg);
        s.step_detections(vec![fd(vec![1.0, 0.0], Some(1))], true);
        s.step_detections(vec![fd(vec![0.8, 0.6], Some(1))], true);
        assert_eq!(s.tracks[0].last_embedding, vec![1.0, 0.0]);
        assert_eq!(s.tracks[0].history.len(), 2);
        let cfg = TrackerConfig { momentum: 0.5, ratio: 1.0, min_sim: 0.0, ..TrackerConfig::default() };
        let mut s = TrackerState::new(cfg);
        s.step_detections(vec![fd(vec![1.0, 0.0], Some(1))], true);
        s.step_detections(vec![fd(vec![0.0, 1.0], Some(1))], true);
        let e = &s.tracks[0].last_embedding;
        assert!((e[0] - e[1]).abs() < 1e-12 && (e[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_false_track_metrics() {
        let mut s = TrackerState::new(TrackerConfig::default());
        for _ in 0..5 {
            s.step_detections(vec![fd(vec![1.0, 0.0, 0.0], Some(1)), fd(vec![0.0, 1.0, 0.0], Some(2))], true);
        }
        let m = tracking_metrics(&s.log).unwrap();
        assert_eq!((m.identity_switches, m.match_precision, m.match_recall), (0, 1.0, 1.0));
        let mut s = TrackerState::new(TrackerConfig::default());
        for _ in 0..5 {
            s.step_detections(
                vec![fd(vec![1.0, 0.0, 0.0], Some(1)), fd(vec![0.0, 1.0, 0.0], Some(2)), fd(vec![0.0, 0.0, 1.0], None)],
                true,
            );
        }
        let m = tracking_metrics(&s.log).unwrap();
        assert!(m.match_precision < 1.0);
        assert_eq!((m.identity_switches, m.match_recall), (0, 1.0));
        let mut s = TrackerState::new(TrackerConfig::default());
        s.step_detections(vec![fd(vec![1.0, 0.0], Some(1))], false);
        assert!(tracking_metrics(&s.log).is_err());
    }

    #[test]
    fn swapped_embeddings_count_switches() {
        let mut s = TrackerState::new(TrackerConfig { momentum: 0.0, ..TrackerConfig::default() });
        s.step_detections(vec![fd(vec![1.0, 0.0], Some(1)), fd(vec![0.0, 1.0], Some(2))], true);
        s.step_detections(vec![fd(vec![0.0, 1.0], Some(1)), fd(vec![1.0, 0.0], Some(2))], true);
        let m = tracking_metrics(&s.log).unwrap();
        assert_eq!(m.identity_switches, 2);
        assert_eq!(m.match_precision, 0.0);
        assert_eq!(m.match_recall, 0.0);
    }

    #[test]
    fn gt_identity_by_overlap() {
        let frame = SceneSample {
            image: crate::datagen::GrayImage::filled(64, 64, 0.0),
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 50.0, 50.0)],
            instance_ids: vec![4, 9],
            class_ids: vec![LandmarkClass::Crater, LandmarkClass::Dune],
            domain: crate::datagen::Domain::Source,
            view_group: 0,
            seed: 0,
        };
        let dets = oracle_detections(&frame);
        assert_eq!(ground_truth_id(&frame, &dets[1]), Some(9));
        assert_eq!(ground_truth_id(&frame, &det(40.0)), None);
    }
}
