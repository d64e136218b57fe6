//! Tiny one-stage grid detector: a three-stage conv backbone, a 1×1 head on
//! the stride-16 map, single-anchor box encoding, NMS decoding, and the
//! supervised detection loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, Domain, GrayImage, LandmarkClass, SceneSample};
use crate::error::{ForgeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{image_batch, Backbone, Conv, STAGE_STRIDES};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
/// Per-cell channels: tx, ty, tw, th, objectness, class logits.
pub const CELL_CHANNELS: usize = 5 + NUM_CLASSES;
/// Subtracted from pixel intensities before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;
const OBJ: usize = 4;
const LOGIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub channels: [usize; 3],
    pub anchor: f64,
    pub w_box: f64,
    pub w_obj: f64,
    pub w_cls: f64,
    /// Initial objectness bias, the log-odds prior of a cell holding a landmark.
    pub obj_prior: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            anchor: 32.0,
            w_box: 2.0,
            w_obj: 5.0,
            w_cls: 1.0,
            obj_prior: -3.0,
            conf_threshold: 0.25,
            nms_iou: 0.45,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForgeError::Config(format!("detector: {m}")));
        if self.channels.iter().any(|&c| c == 0) {
            return bad("channels must be positive");
        }
        if self.anchor <= 0.0 {
            return bad("anchor must be positive");
        }
        if self.w_box < 0.0 || self.w_obj < 0.0 || self.w_cls < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("conf_threshold and nms_iou must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Feature values of one image at one backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `[C, h, w]`
    pub values: Tensor,
    pub stage_index: usize,
}

/// Raw head output for one image, cell-major: `values[(r·S + c)·8 + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub size: usize,
    pub stride: f64,
    pub anchor: f64,
    pub values: Vec<f64>,
}

impl DetectionGrid {
    pub fn zeros(size: usize, stride: f64, anchor: f64) -> Self {
        Self { size, stride, anchor, values: vec![0.0; size * size * CELL_CHANNELS] }
    }

    /// Extracts image `n` from an NCHW head tensor `[N, 8, S, S]`.
    pub fn from_head(head: &Tensor, n: usize, stride: f64, anchor: f64) -> Self {
        let s = head.shape()[2];
        let ss = s * s;
        let src = &head.data()[n * CELL_CHANNELS * ss..(n + 1) * CELL_CHANNELS * ss];
        let mut values = vec![0.0; ss * CELL_CHANNELS];
        for ch in 0..CELL_CHANNELS {
            for cell in 0..ss {
                values[cell * CELL_CHANNELS + ch] = src[ch * ss + cell];
            }
        }
        Self { size: s, stride, anchor, values }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.size + col) * CELL_CHANNELS;
        &self.values[i..i + CELL_CHANNELS]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.size + col) * CELL_CHANNELS;
        &mut self.values[i..i + CELL_CHANNELS]
    }

    pub fn image_extent(&self) -> f64 {
        self.size as f64 * self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: LandmarkClass,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// Intersection over union; 0 for disjoint or zero-area boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Responsible cell `(row, col)` and encoded offsets `(tx, ty, tw, th)` of a box.
pub fn encode_box(b: &BBox, grid_size: usize, stride: f64, anchor: f64) -> ((usize, usize), [f64; 4]) {
    let (cx, cy) = b.center();
    let gx = cx / stride;
    let gy = cy / stride;
    let col = (gx.floor().max(0.0) as usize).min(grid_size - 1);
    let row = (gy.floor().max(0.0) as usize).min(grid_size - 1);
    let t = [
        logit(gx - col as f64),
        logit(gy - row as f64),
        (b.width() / anchor).ln(),
        (b.height() / anchor).ln(),
    ];
    ((row, col), t)
}

/// Inverse of [`encode_box`] (before clipping).
pub fn decode_cell(row: usize, col: usize, t: &[f64], stride: f64, anchor: f64) -> BBox {
    let cx = (col as f64 + sigmoid(t[0])) * stride;
    let cy = (row as f64 + sigmoid(t[1])) * stride;
    BBox::from_center(cx, cy, anchor * t[2].exp(), anchor * t[3].exp())
}

/// Per-class greedy suppression of boxes overlapping a higher-scored kept box
/// by more than `iou_threshold`. Output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for class in LandmarkClass::ALL {
        let mut class_kept: Vec<Detection> = Vec::new();
        for d in dets.iter().filter(|d| d.class_id == class) {
            if class_kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
                class_kept.push(*d);
            }
        }
        kept.extend(class_kept);
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept
}

/// Raw candidates above `conf_threshold`, before suppression, in cell order.
pub fn candidates(grid: &DetectionGrid, conf_threshold: f64) -> Vec<Detection> {
    let extent = grid.image_extent() as usize;
    let mut out = Vec::new();
    for row in 0..grid.size {
        for col in 0..grid.size {
            let v = grid.cell(row, col);
            let logits = &v[5..];
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let (best, _) = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
            let score = sigmoid(v[OBJ]) / z;
            if score < conf_threshold {
                continue;
            }
            let b = decode_cell(row, col, v, grid.stride, grid.anchor).clip(extent, extent);
            if !b.is_valid_in(extent, extent) {
                continue;
            }
            out.push(Detection { bbox: b, score, class_id: LandmarkClass::ALL[best] });
        }
    }
    out
}

/// Decodes a grid into detections: threshold, then per-class NMS.
pub fn decode(grid: &DetectionGrid, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    nms(candidates(grid, conf_threshold), nms_iou)
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub head: Conv,
}

/// Graph handles of one detector forward pass.
#[derive(Debug, Clone)]
pub struct DetectorForward {
    pub stages: Vec<Var>,
    pub head: Var,
}

impl Detector {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DetectorConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(store, "det.backbone", config.channels, rng);
        let head = Conv::new(store, "det.head", config.channels[2], CELL_CHANNELS, 1, 1, rng, 0.1);
        let bias = store.get_mut(head.bias).data_mut();
        bias[OBJ] = config.obj_prior;
        Self { config, backbone, head }
    }

    pub fn stride(&self) -> f64 {
        STAGE_STRIDES[2] as f64
    }

    fn check_images(images: &[&GrayImage]) -> Result<()> {
        if images.is_empty() {
            return Err(ForgeError::Shape("empty image batch".into()));
        }
        for im in images {
            if im.height % 16 != 0 || im.width % 16 != 0 || im.height != im.width {
                return Err(ForgeError::Shape(format!(
                    "detector input must be square with sides a multiple of 16, got {}x{}",
                    im.height, im.width
                )));
            }
        }
        Ok(())
    }

    /// Backbone stages at strides 4, 8, 16 for a batch of images.
    pub fn backbone_forward(&self, g: &mut Graph, store: &ParamStore, images: &[&GrayImage]) -> Result<Vec<Var>> {
        Self::check_images(images)?;
        let x = g.constant(image_batch(images).map(|v| v - INPUT_MEAN));
        Ok(self.backbone.forward_with(g, store, x, |_, _, h| h))
    }

    pub fn detect_head(&self, g: &mut Graph, store: &ParamStore, deepest: Var) -> Var {
        self.head.forward(g, store, deepest)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&GrayImage]) -> Result<DetectorForward> {
        let stages = self.backbone_forward(g, store, images)?;
        let head = self.detect_head(g, store, stages[2]);
        Ok(DetectorForward { stages, head })
    }

    /// Backbone feature maps of one image, as plain values.
    pub fn feature_maps(&self, store: &ParamStore, image: &GrayImage) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new();
        let stages = self.backbone_forward(&mut g, store, &[image])?;
        Ok(stages
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let t = g.value(v);
                let s = t.shape();
                FeatureMap { values: t.clone().reshape(&[s[1], s[2], s[3]]), stage_index: i }
            })
            .collect())
    }

    pub fn grids(&self, g: &Graph, fwd: &DetectorForward) -> Vec<DetectionGrid> {
        let head = g.value(fwd.head);
        (0..head.shape()[0])
            .map(|n| DetectionGrid::from_head(head, n, self.stride(), self.config.anchor))
            .collect()
    }

    /// Decoded detections for each image (inference only).
    pub fn detect(&self, store: &ParamStore, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, images)?;
        Ok(self
            .grids(&g, &fwd)
            .iter()
            .map(|grid| decode(grid, self.config.conf_threshold, self.config.nms_iou))
            .collect())
    }
}

/// Regression and classification target of one responsible cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub row: usize,
    pub col: usize,
    pub encoded: [f64; 4],
    pub class_id: LandmarkClass,
    pub truth_index: usize,
}

/// Assigns each ground-truth box to the cell holding its center. When two
/// centers share a cell the larger box wins; `collisions` counts the losers.
pub fn assign_targets(truth: &SceneSample, grid_size: usize, stride: f64, anchor: f64) -> (Vec<CellTarget>, usize) {
    let mut by_cell: Vec<Option<CellTarget>> = vec![None; grid_size * grid_size];
    let mut collisions = 0;
    for (i, b) in truth.boxes.iter().enumerate() {
        let ((row, col), encoded) = encode_box(b, grid_size, stride, anchor);
        let t = CellTarget { row, col, encoded, class_id: truth.class_ids[i], truth_index: i };
        let slot = &mut by_cell[row * grid_size + col];
        match slot {
            Some(prev) => {
                collisions += 1;
                if b.area() > truth.boxes[prev.truth_index].area() {
                    *slot = Some(t);
                }
            }
            None => *slot = Some(t),
        }
    }
    (by_cell.into_iter().flatten().collect(), collisions)
}

#[derive(Debug, Clone, Copy)]
pub struct SupervisedLoss {
    pub total: Var,
    pub objectness: Var,
    pub box_regression: Option<Var>,
    pub classification: Option<Var>,
    pub collisions: usize,
}

/// Objectness BCE averaged over cells, plus box regression and class
/// cross-entropy at responsible cells normalized by the box count, averaged
/// over the batch. Box regression is squared error on `(σ(tx), σ(ty), tw, th)`.
pub fn supervised_loss(
    g: &mut Graph,
    head: Var,
    truths: &[&SceneSample],
    config: &DetectorConfig,
    stride: f64,
) -> Result<SupervisedLoss> {
    let shape = g.shape(head).to_vec();
    let (n, s) = (shape[0], shape[2]);
    if shape[1] != CELL_CHANNELS || shape[3] != s || truths.len() != n {
        return Err(ForgeError::Shape(format!("head {shape:?} vs {} truths", truths.len())));
    }
    if truths.iter().any(|t| t.domain != Domain::Source) {
        return Err(ForgeError::InvalidArgument("supervised loss needs source-domain truth".into()));
    }
    let ss = s * s;
    let at = |ni: usize, ch: usize, row: usize, col: usize| ((ni * CELL_CHANNELS + ch) * s + row) * s + col;

    let mut obj_idx = Vec::with_capacity(n * ss);
    let mut obj_target = vec![0.0; n * ss];
    let mut xy_idx = Vec::new();
    let mut xy_target = Vec::new();
    let mut wh_idx = Vec::new();
    let mut wh_target = Vec::new();
    let mut pos_weight = Vec::new();
    let mut cls_idx = Vec::new();
    let mut cls_pick = Vec::new();
    let mut collisions = 0;
    for (ni, truth) in truths.iter().enumerate() {
        for cell in 0..ss {
            obj_idx.push(at(ni, OBJ, cell / s, cell % s));
        }
        let (targets, c) = assign_targets(truth, s, stride, config.anchor);
        collisions += c;
        let w = 1.0 / (n as f64 * targets.len().max(1) as f64);
        for t in &targets {
            obj_target[ni * ss + t.row * s + t.col] = 1.0;
            for k in 0..2 {
                xy_idx.push(at(ni, k, t.row, t.col));
                xy_target.push(sigmoid(t.encoded[k]));
                wh_idx.push(at(ni, 2 + k, t.row, t.col));
                wh_target.push(t.encoded[2 + k]);
            }
            let p = pos_weight.len();
            pos_weight.push(w);
            for k in 0..NUM_CLASSES {
                cls_idx.push(at(ni, 5 + k, t.row, t.col));
            }
            cls_pick.push(p * NUM_CLASSES + t.class_id.index());
        }
    }

    let obj_logits = g.gather(head, obj_idx, &[n * ss]);
    let bce = g.bce_logits(obj_logits, obj_target);
    let objectness = g.mean(bce);
    let mut total = g.scale(objectness, config.w_obj);

    let npos = pos_weight.len();
    let (box_regression, classification) = if npos > 0 {
        let pw2: Vec<f64> = pos_weight.iter().flat_map(|&w| [w, w]).collect();
        let xy = g.gather(head, xy_idx, &[2 * npos]);
        let xy = g.sigmoid(xy);
        let xyt = g.constant(Tensor::new(&[2 * npos], xy_target));
        let dxy = g.sub(xy, xyt);
        let wh = g.gather(head, wh_idx, &[2 * npos]);
        let wht = g.constant(Tensor::new(&[2 * npos], wh_target));
        let dwh = g.sub(wh, wht);
        let sq_xy = g.square(dxy);
        let sq_wh = g.square(dwh);
        let sq = g.add(sq_xy, sq_wh);
        let wv = g.constant(Tensor::new(&[2 * npos], pw2));
        let weighted = g.mul(sq, wv);
        let box_term = g.sum(weighted);

        let logits = g.gather(head, cls_idx, &[npos, NUM_CLASSES]);
        let logp = g.log_softmax_rows(logits, false);
        let picked = g.gather(logp, cls_pick, &[npos]);
        let wv = g.constant(Tensor::new(&[npos], pos_weight));
        let weighted = g.mul(picked, wv);
        let nll = g.sum(weighted);
        let cls_term = g.scale(nll, -1.0);

        let b = g.scale(box_term, config.w_box);
        total = g.add(total, b);
        let c = g.scale(cls_term, config.w_cls);
        total = g.add(total, c);
        (Some(box_term), Some(cls_term))
    } else {
        (None, None)
    };
    Ok(SupervisedLoss { total, objectness, box_regression, classification, collisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{scene_sample, DatagenConfig};
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], score: f64, class: LandmarkClass) -> Detection {
        Detection { bbox: b.into(), score, class_id: class }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&BBox::new(1.0, 1.0, 1.0, 3.0), &a), 0.0);
    }

    #[test]
    fn shapes_follow_strides() {
        let mut store = ParamStore::new();
        let d = Detector::new(&mut store, DetectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let img = GrayImage::filled(128, 128, 0.3);
        let maps = d.feature_maps(&store, &img).unwrap();
        let sizes: Vec<_> = maps.iter().map(|m| m.values.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]);
        let mut g = Graph::new();
        let fwd = d.forward(&mut g, &store, &[&img]).unwrap();
        assert_eq!(g.shape(fwd.head), &[1, 8, 8, 8]);
        assert!(g.value(fwd.head).all_finite());
        assert!(d.feature_maps(&store, &GrayImage::filled(120, 120, 0.0)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut store = ParamStore::new();
        let d = Detector::new(&mut store, DetectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let img = GrayImage::filled(64, 64, 0.0);
        let mut g = Graph::new();
        let fwd = d.forward(&mut g, &store, &[&img]).unwrap();
        for &s in &fwd.stages {
            assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        }
        assert!(g.value(fwd.head).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_uniform_cell_score() {
        let mut grid = DetectionGrid::zeros(8, 16.0, 32.0);
        for r in 0..8 {
            for c in 0..8 {
                grid.cell_mut(r, c)[OBJ] = -40.0;
            }
        }
        assert!(decode(&grid, 0.01, 0.5).is_empty());
        grid.cell_mut(3, 4)[OBJ] = 0.0;
        let d = decode(&grid, 0.1, 0.5);
        assert_eq!(d.len(), 1);
        assert!((d[0].score - 0.5 / 3.0).abs() < 1e-12);
        let (cx, cy) = d[0].bbox.center();
        assert!((cx - 72.0).abs() < 1e-9 && (cy - 56.0).abs() < 1e-9);
    }

    #[test]
    fn nms_keeps_best_duplicate() {
        let b = [10.0, 10.0, 40.0, 40.0];
        let out = nms(vec![det(b, 0.8, LandmarkClass::Crater), det(b, 0.9, LandmarkClass::Crater)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let out = nms(vec![det(b, 0.8, LandmarkClass::Dune), det(b, 0.9, LandmarkClass::Crater)], 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let cx = rng.gen_range(0.0..128.0);
            let cy = rng.gen_range(0.0..128.0);
            let b = BBox::from_center(cx, cy, rng.gen_range(4.0..80.0), rng.gen_range(4.0..80.0));
            let ((r, c), t) = encode_box(&b, 8, 16.0, 32.0);
            let d = decode_cell(r, c, &t, 16.0, 32.0);
            for (x, y) in <[f64; 4]>::from(b).iter().zip(<[f64; 4]>::from(d).iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    fn sample() -> SceneSample {
        scene_sample(&DatagenConfig::default(), Domain::Source, 0, 5).unwrap()
    }

    #[test]
    fn empty_truth_with_confident_background() {
        let mut s = sample();
        s.boxes.clear();
        s.instance_ids.clear();
        s.class_ids.clear();
        let mut g = Graph::new();
        let head = g.constant(Tensor::full(&[1, 8, 8, 8], -12.0));
        let cfg = DetectorConfig::default();
        let l = supervised_loss(&mut g, head, &[&s], &cfg, 16.0).unwrap();
        assert!(g.value(l.total).item() < 0.01);
        assert_eq!(g.value(l.total).item(), cfg.w_obj * g.value(l.objectness).item());
        assert!(l.box_regression.is_none());
    }

    #[test]
    fn perfect_box_prediction_has_zero_regression() {
        let s = sample();
        let (targets, _) = assign_targets(&s, 8, 16.0, 32.0);
        let mut t = Tensor::zeros(&[1, 8, 8, 8]);
        for ct in &targets {
            for k in 0..4 {
                t.data_mut()[(k * 8 + ct.row) * 8 + ct.col] = ct.encoded[k];
            }
        }
        let mut g = Graph::new();
        let head = g.constant(t);
        let l = supervised_loss(&mut g, head, &[&s], &DetectorConfig::default(), 16.0).unwrap();
        assert!(g.value(l.box_regression.unwrap()).item().abs() < 1e-15);
    }

    #[test]
    fn collisions_keep_larger_box() {
        let mut s = sample();
        s.boxes = vec![BBox::new(10.0, 10.0, 20.0, 20.0), BBox::new(2.0, 2.0, 28.0, 28.0)];
        s.instance_ids = vec![0, 1];
        s.class_ids = vec![LandmarkClass::Crater, LandmarkClass::Dune];
        let (targets, collisions) = assign_targets(&s, 8, 16.0, 32.0);
        assert_eq!(collisions, 1);
        assert_eq!(targets.len(), 1);
        assert_eq!(targets[0].truth_index, 1);
    }

    #[test]
    fn target_truth_is_rejected() {
        let mut s = sample();
        s.domain = Domain::Target;
        let mut g = Graph::new();
        let head = g.constant(Tensor::zeros(&[1, 8, 8, 8]));
        assert!(supervised_loss(&mut g, head, &[&s], &DetectorConfig::default(), 16.0).is_err());
    }

    #[test]
    fn supervised_loss_gradient() {
        let cfg = DetectorConfig { channels: [2, 3, 4], ..DetectorConfig::default() };
        let mut store = ParamStore::new();
        let d = Detector::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let s = scene_sample(&DatagenConfig { image_size: 64, ..DatagenConfig::default() }, Domain::Source, 1, 2).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        let err = check_param_gradients(&store, &ids, 12, |g, st| {
            let fwd = d.forward(g, st, &[&s.image]).unwrap();
            supervised_loss(g, fwd.head, &[&s], &cfg, d.stride()).unwrap().total
        });
        assert!(err < 1e-4, "{err}");
    }
}
