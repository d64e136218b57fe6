//! Unsupervised domain adaptation for the detector.
//!
//! Global alignment trains a domain classifier on spatially pooled stride-16
//! features behind a gradient reversal layer. Local alignment works on
//! instance features pooled inside boxes (ground truth for source images,
//! the model's own detections for target images): the top-k instances per
//! domain by objectness are moment-matched across domains, clustered by
//! visual similarity, and fed to an instance-level adversarial classifier
//! and a cluster-contrastive loss that uses cluster ids in place of labels.
//!
//! Target ground truth never enters this module: target images arrive as
//! bare [`GrayImage`]s.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, Domain, GrayImage, SceneSample};
use crate::detector::{decode, supervised_loss, Detector, DetectorConfig, FeatureMap};
use crate::error::{ForgeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const STD_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lambda_grl: f64,
    /// Fraction of training over which the reversal strength ramps 0 → `lambda_grl`.
    pub warmup_fraction: f64,
    pub w_global: f64,
    pub w_reg: f64,
    pub w_vsa_adv: f64,
    pub w_vsa_con: f64,
    pub top_k: usize,
    pub sim_threshold: f64,
    pub temperature: f64,
    /// Minimum detection score for a target box to become an instance.
    pub target_conf: f64,
    pub classifier_hidden: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_grl: 1.0,
            warmup_fraction: 0.3,
            w_global: 1.0,
            w_reg: 0.1,
            w_vsa_adv: 0.5,
            w_vsa_con: 0.5,
            top_k: 16,
            sim_threshold: 0.7,
            temperature: 0.1,
            target_conf: 0.3,
            classifier_hidden: 32,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForgeError::Config(format!("adapt: {m}")));
        if self.lambda_grl < 0.0 {
            return bad("lambda_grl must be non-negative");
        }
        if [self.w_global, self.w_reg, self.w_vsa_adv, self.w_vsa_con].iter().any(|&w| w < 0.0) {
            return bad("weights must be non-negative");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(-1.0..=1.0).contains(&self.sim_threshold) {
            return bad("sim_threshold must lie in [-1, 1]");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.target_conf) {
            return bad("warmup_fraction and target_conf must lie in [0, 1]");
        }
        if self.classifier_hidden == 0 {
            return bad("classifier_hidden must be positive");
        }
        Ok(())
    }

    pub fn all_weights_zero(&self) -> bool {
        self.w_global == 0.0 && self.w_reg == 0.0 && self.w_vsa_adv == 0.0 && self.w_vsa_con == 0.0
    }

    /// Reversal strength at `step` of `total_steps` under the linear warm-up.
    pub fn lambda_at(&self, step: usize, total_steps: usize) -> f64 {
        let ramp = self.warmup_fraction * total_steps as f64;
        if ramp <= 0.0 {
            self.lambda_grl
        } else {
            self.lambda_grl * (step as f64 / ramp).min(1.0)
        }
    }
}

/// Two-layer classifier giving the probability that a feature is from the
/// target domain. The output layer starts at zero, so a fresh classifier
/// answers exactly 0.5.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl DomainClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, true, rng, 1.0),
            out: Linear::zeroed(store, &format!("{name}.out"), d_hidden, 1),
        }
    }

    /// Logits `[m, 1]` for features `[m, d_in]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.silu(h);
        self.out.forward(g, store, h)
    }

    pub fn probability(&self, store: &ParamStore, features: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, features.len()], features.to_vec()));
        let l = self.logits(&mut g, store, x);
        let s = g.sigmoid(l);
        g.value(s).item()
    }
}

fn domain_labels(domains: &[Domain]) -> Vec<f64> {
    domains.iter().map(|d| if *d == Domain::Target { 1.0 } else { 0.0 }).collect()
}

/// Mean BCE of `classifier` over `features` (`[m, d]`) passed through a GRL.
fn adversarial_bce(
    g: &mut Graph,
    store: &ParamStore,
    classifier: &DomainClassifier,
    features: Var,
    domains: &[Domain],
    lambda: f64,
) -> Var {
    let x = g.grl(features, lambda);
    let logits = classifier.logits(g, store, x);
    let m = domains.len();
    let logits = g.reshape(logits, &[m]);
    let bce = g.bce_logits(logits, domain_labels(domains));
    g.mean(bce)
}

/// Domain BCE on spatially averaged deepest feature maps (`[N, C, h, w]`),
/// labels source = 0 and target = 1. Both domains must be present.
pub fn global_align_loss(
    g: &mut Graph,
    store: &ParamStore,
    classifier: &DomainClassifier,
    deepest: Var,
    domains: &[Domain],
    lambda: f64,
) -> Result<Var> {
    if !domains.contains(&Domain::Source) || !domains.contains(&Domain::Target) {
        return Err(ForgeError::InvalidArgument("global alignment needs both domains in the batch".into()));
    }
    if g.shape(deepest)[0] != domains.len() {
        return Err(ForgeError::Shape("domain labels do not match batch".into()));
    }
    let pooled = g.mean_spatial(deepest);
    Ok(adversarial_bce(g, store, classifier, pooled, domains, lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeature {
    pub vector: Vec<f64>,
    /// Index of the sample in its batch.
    pub source_sample: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub domain: Domain,
}

/// A box to pool, with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolRequest {
    pub sample: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub domain: Domain,
}

/// Flat cell indices of an `h × w` map (stride `stride`) whose centers fall
/// inside `b`; a box covering no center pools the cell under its own center.
pub fn box_cells(b: &BBox, h: usize, w: usize, stride: f64) -> Vec<usize> {
    let mut cells = Vec::new();
    for r in 0..h {
        let cy = (r as f64 + 0.5) * stride;
        if cy < b.y_min || cy >= b.y_max {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) * stride;
            if cx >= b.x_min && cx < b.x_max {
                cells.push(r * w + c);
            }
        }
    }
    if cells.is_empty() {
        let (cx, cy) = b.center();
        let c = ((cx / stride).floor().max(0.0) as usize).min(w - 1);
        let r = ((cy / stride).floor().max(0.0) as usize).min(h - 1);
        cells.push(r * w + c);
    }
    cells
}

/// Average-pools `fmap` (`[N, C, h, w]`) inside each requested box.
/// Returns the pooled rows `[M, C]` and their values.
pub fn pool_instances(
    g: &mut Graph,
    fmap: Var,
    requests: &[PoolRequest],
    stride: f64,
) -> (Option<Var>, Vec<InstanceFeature>) {
    if requests.is_empty() {
        return (None, Vec::new());
    }
    let shape = g.shape(fmap).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let regions = requests.iter().map(|r| (r.sample, box_cells(&r.bbox, h, w, stride))).collect();
    let pooled = g.pool_regions(fmap, regions);
    let values = g.value(pooled);
    let feats = requests
        .iter()
        .enumerate()
        .map(|(i, r)| InstanceFeature {
            vector: values.row(i).to_vec(),
            source_sample: r.sample,
            bbox: r.bbox,
            objectness: r.objectness,
            domain: r.domain,
        })
        .collect();
    (Some(pooled), feats)
}

/// Value-only pooling of a single feature map.
pub fn pool_feature_map(fmap: &FeatureMap, boxes: &[(BBox, f64)], domain: Domain, stride: f64) -> Vec<InstanceFeature> {
    let mut g = Graph::new();
    let s = fmap.values.shape();
    let x = g.constant(fmap.values.clone().reshape(&[1, s[0], s[1], s[2]]));
    let req: Vec<_> =
        boxes.iter().map(|&(bbox, objectness)| PoolRequest { sample: 0, bbox, objectness, domain }).collect();
    pool_instances(&mut g, x, &req, stride).1
}

/// Indices of the `top_k` highest-objectness instances per domain, ties
/// broken by position. Returned in input order.
pub fn select_features(instances: &[InstanceFeature], top_k: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        let mut idx: Vec<usize> = (0..instances.len()).filter(|&i| instances[i].domain == domain).collect();
        idx.sort_by(|&a, &b| instances[b].objectness.total_cmp(&instances[a].objectness).then(a.cmp(&b)));
        keep.extend(idx.into_iter().take(top_k));
    }
    keep.sort_unstable();
    keep
}

/// Squared distance between per-channel means plus between per-channel
/// standard deviations of the two domains' instance rows. `None` when either
/// side is empty.
pub fn feature_regularize(g: &mut Graph, source: Option<Var>, target: Option<Var>) -> Option<Var> {
    let (s, t) = (source?, target?);
    let (ms, ss) = moments(g, s);
    let (mt, st) = moments(g, t);
    let dm = g.sub(ms, mt);
    let dm = g.square(dm);
    let mean_term = g.sum(dm);
    let ds = g.sub(ss, st);
    let ds = g.square(ds);
    let std_term = g.sum(ds);
    Some(g.add(mean_term, std_term))
}

fn moments(g: &mut Graph, x: Var) -> (Var, Var) {
    let mean = g.mean_rows(x);
    let centered = g.sub_row(x, mean);
    let sq = g.square(centered);
    let var = g.mean_rows(sq);
    let var = g.affine(var, 1.0, STD_EPS);
    (mean, g.sqrt(var))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
    v.iter().map(|a| a / n).collect()
}

/// Cosine similarity matrix of L2-normalized vectors.
pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit: Vec<Vec<f64>> = vectors.iter().map(|v| normalized(v)).collect();
    unit.iter()
        .map(|a| unit.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Relabels cluster representatives so ids follow the order of first members.
fn relabel(rep: &[usize]) -> ClusterAssignment {
    let mut map = std::collections::HashMap::new();
    let labels: Vec<usize> = rep
        .iter()
        .map(|r| {
            let next = map.len();
            *map.entry(*r).or_insert(next)
        })
        .collect();
    ClusterAssignment { num_clusters: map.len(), labels }
}

/// Average-linkage agglomerative clustering under cosine similarity. The
/// most similar pair of clusters is merged while its average similarity is
/// at least `sim_threshold`; ties go to the lexicographically first pair.
pub fn vsa_cluster(vectors: &[Vec<f64>], sim_threshold: f64) -> ClusterAssignment {
    let n = vectors.len();
    if n == 0 {
        return ClusterAssignment { labels: Vec::new(), num_clusters: 0 };
    }
    let mut sim = cosine_matrix(vectors);
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut rep: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && best.is_none_or(|(_, _, s)| sim[i][j] > s) {
                    best = Some((i, j, sim[i][j]));
                }
            }
        }
        let Some((i, j, s)) = best else { break };
        if s < sim_threshold {
            break;
        }
        // Lance–Williams update for average linkage
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let v = (si * sim[i][k] + sj * sim[j][k]) / (si + sj);
                sim[i][k] = v;
                sim[k][i] = v;
            }
        }
        size[i] += size[j];
        active[j] = false;
        for r in rep.iter_mut() {
            if *r == j {
                *r = i;
            }
        }
    }
    relabel(&rep)
}

/// Supervised-contrastive loss over L2-normalized rows of `features`
/// (`[m, d]`) with cluster ids as labels. `None` when no anchor has a
/// same-cluster partner (including fewer than two rows).
pub fn vsa_contrastive_loss(g: &mut Graph, features: Var, assignment: &ClusterAssignment, temperature: f64) -> Option<Var> {
    let m = g.shape(features)[0];
    if m < 2 || assignment.labels.len() != m {
        return None;
    }
    let labels = &assignment.labels;
    let anchors: Vec<(usize, Vec<usize>)> = (0..m)
        .map(|i| (i, (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect::<Vec<_>>()))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if anchors.is_empty() {
        return None;
    }
    let z = g.l2_normalize_rows(features, NORM_EPS);
    let s = g.matmul_nt(z, z);
    let s = g.scale(s, 1.0 / temperature);
    let logp = g.log_softmax_rows(s, true);
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (i, pos) in &anchors {
        for &p in pos {
            idx.push(i * m + p);
            w.push(-1.0 / (pos.len() as f64 * anchors.len() as f64));
        }
    }
    let k = idx.len();
    let picked = g.gather(logp, idx, &[k]);
    let wv = g.constant(Tensor::new(&[k], w));
    let weighted = g.mul(picked, wv);
    Some(g.sum(weighted))
}

/// Instance-level domain BCE through a GRL. `None` unless both domains occur.
pub fn vsa_adversarial_loss(
    g: &mut Graph,
    store: &ParamStore,
    classifier: &DomainClassifier,
    features: Var,
    domains: &[Domain],
    lambda: f64,
) -> Option<Var> {
    if !domains.contains(&Domain::Source) || !domains.contains(&Domain::Target) {
        return None;
    }
    Some(adversarial_bce(g, store, classifier, features, domains, lambda))
}

/// Detector plus both domain classifiers, all in one parameter store.
#[derive(Debug, Clone)]
pub struct AdaptModel {
    pub detector: Detector,
    pub global_classifier: DomainClassifier,
    pub instance_classifier: DomainClassifier,
}

impl AdaptModel {
    pub fn new<R: Rng>(store: &mut ParamStore, detector: DetectorConfig, adapt: &AdaptConfig, rng: &mut R) -> Self {
        let c = detector.channels[2];
        let detector = Detector::new(store, detector, rng);
        let global_classifier = DomainClassifier::new(store, "adapt.global", c, adapt.classifier_hidden, rng);
        let instance_classifier = DomainClassifier::new(store, "adapt.instance", c, adapt.classifier_hidden, rng);
        Self { detector, global_classifier, instance_classifier }
    }
}

/// Labeled source scenes and unlabeled target images.
#[derive(Debug, Clone)]
pub struct AdaptBatch<'a> {
    pub source: Vec<&'a SceneSample>,
    pub target: Vec<&'a GrayImage>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub total: f64,
    pub supervised: f64,
    pub global: f64,
    pub regularize: f64,
    pub vsa_adversarial: f64,
    pub vsa_contrastive: f64,
    pub regularize_skipped: bool,
    pub vsa_adversarial_skipped: bool,
    pub vsa_contrastive_skipped: bool,
    pub num_clusters: usize,
    pub source_instances: usize,
    pub target_instances: usize,
    pub collisions: usize,
}

fn rows(g: &mut Graph, x: Var, idx: &[usize]) -> Var {
    let c = g.shape(x)[1];
    let flat = idx.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
    g.gather(x, flat, &[idx.len(), c])
}

fn weighted_add(g: &mut Graph, total: Var, term: Option<Var>, w: f64) -> (Var, f64) {
    match term {
        Some(t) => {
            let v = g.value(t).item();
            let s = g.scale(t, w);
            (g.add(total, s), v)
        }
        None => (total, 0.0),
    }
}

/// Supervised source loss plus the weighted adaptation terms. Terms with zero
/// weight are not evaluated; with every weight at zero the target images are
/// not even forwarded, so the result equals the supervised-only loss exactly.
pub fn total_adapt_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &AdaptModel,
    batch: &AdaptBatch<'_>,
    config: &AdaptConfig,
    lambda: f64,
) -> Result<(Var, AdaptReport)> {
    let det = &model.detector;
    let ns = batch.source.len();
    if ns == 0 {
        return Err(ForgeError::InvalidArgument("adaptation batch has no source images".into()));
    }
    let mut report = AdaptReport::default();
    let stride = det.stride();
    let source_only = config.all_weights_zero();
    if !source_only && batch.target.is_empty() {
        return Err(ForgeError::InvalidArgument("adaptation batch has no target images".into()));
    }
    let mut images: Vec<&GrayImage> = batch.source.iter().map(|s| &s.image).collect();
    if !source_only {
        images.extend(batch.target.iter().copied());
    }
    let fwd = det.forward(g, store, &images)?;
    let head_shape = g.shape(fwd.head).to_vec();
    let source_head = if source_only {
        fwd.head
    } else {
        let per = head_shape[1] * head_shape[2] * head_shape[3];
        let mut shape = head_shape.clone();
        shape[0] = ns;
        g.gather(fwd.head, (0..ns * per).collect(), &shape)
    };
    let sup = supervised_loss(g, source_head, &batch.source, &det.config, stride)?;
    report.supervised = g.value(sup.total).item();
    report.collisions = sup.collisions;
    let mut total = sup.total;
    if source_only {
        report.total = report.supervised;
        report.regularize_skipped = true;
        report.vsa_adversarial_skipped = true;
        report.vsa_contrastive_skipped = true;
        return Ok((total, report));
    }

    let deepest = fwd.stages[2];
    if config.w_global > 0.0 {
        let mut domains = vec![Domain::Source; ns];
        domains.extend(std::iter::repeat(Domain::Target).take(batch.target.len()));
        let gl = global_align_loss(g, store, &model.global_classifier, deepest, &domains, lambda)?;
        let (t, v) = weighted_add(g, total, Some(gl), config.w_global);
        total = t;
        report.global = v;
    }

    let local = config.w_reg > 0.0 || config.w_vsa_adv > 0.0 || config.w_vsa_con > 0.0;
    if local {
        let mut requests = Vec::new();
        for (i, s) in batch.source.iter().enumerate() {
            for b in &s.boxes {
                requests.push(PoolRequest { sample: i, bbox: *b, objectness: 1.0, domain: Domain::Source });
            }
        }
        let grids = det.grids(g, &fwd);
        for (j, grid) in grids.iter().enumerate().skip(ns) {
            for d in decode(grid, config.target_conf, det.config.nms_iou) {
                requests.push(PoolRequest { sample: j, bbox: d.bbox, objectness: d.score, domain: Domain::Target });
            }
        }
        let (pooled, instances) = pool_instances(g, deepest, &requests, stride);
        let selected = select_features(&instances, config.top_k);
        let src_idx: Vec<usize> = selected.iter().copied().filter(|&i| instances[i].domain == Domain::Source).collect();
        let tgt_idx: Vec<usize> = selected.iter().copied().filter(|&i| instances[i].domain == Domain::Target).collect();
        report.source_instances = src_idx.len();
        report.target_instances = tgt_idx.len();
        let sel_var = pooled.filter(|_| !selected.is_empty()).map(|p| rows(g, p, &selected));

        if config.w_reg > 0.0 {
            let s = pooled.filter(|_| !src_idx.is_empty()).map(|p| rows(g, p, &src_idx));
            let t = pooled.filter(|_| !tgt_idx.is_empty()).map(|p| rows(g, p, &tgt_idx));
            let reg = feature_regularize(g, s, t);
            report.regularize_skipped = reg.is_none();
            let (tt, v) = weighted_add(g, total, reg, config.w_reg);
            total = tt;
            report.regularize = v;
        } else {
            report.regularize_skipped = true;
        }

        if config.w_vsa_adv > 0.0 {
            let domains: Vec<Domain> = selected.iter().map(|&i| instances[i].domain).collect();
            let adv = sel_var
                .and_then(|sv| vsa_adversarial_loss(g, store, &model.instance_classifier, sv, &domains, lambda));
            report.vsa_adversarial_skipped = adv.is_none();
            let (tt, v) = weighted_add(g, total, adv, config.w_vsa_adv);
            total = tt;
            report.vsa_adversarial = v;
        } else {
            report.vsa_adversarial_skipped = true;
        }

        if config.w_vsa_con > 0.0 {
            let vectors: Vec<Vec<f64>> = selected.iter().map(|&i| instances[i].vector.clone()).collect();
            let assignment = vsa_cluster(&vectors, config.sim_threshold);
            report.num_clusters = assignment.num_clusters;
            let con = sel_var.and_then(|sv| vsa_contrastive_loss(g, sv, &assignment, config.temperature));
            report.vsa_contrastive_skipped = con.is_none();
            let (tt, v) = weighted_add(g, total, con, config.w_vsa_con);
            total = tt;
            report.vsa_contrastive = v;
        } else {
            report.vsa_contrastive_skipped = true;
        }
    } else {
        report.regularize_skipped = true;
        report.vsa_adversarial_skipped = true;
        report.vsa_contrastive_skipped = true;
    }
    report.total = g.value(total).item();
    Ok((total, report))
}
