//! Landmark descriptor with per-stage channel and spatial attention.
//!
//! Each backbone stage output `x` is rescaled as `x · γ · σ`, where `γ` is a
//! squeeze-excitation channel gate and `σ` a spatial gate computed from
//! channel mean and max maps. The head pools the deepest stage into a
//! unit-norm embedding `z`. Attention states of selected stages are
//! projected into their own unit-norm metric spaces, where the MARs penalty
//! pulls the two views of a positive pair together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, GrayImage};
use crate::error::{ForgeError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{image_batch, Backbone, Conv, Linear, STAGE_STRIDES};
use crate::params::{he_normal, ParamStore};
use crate::tensor::Tensor;

pub const CROP_SIZE: usize = 64;
/// Crop side as a multiple of the box's longer side.
pub const CROP_CONTEXT: f64 = 1.6;
const NORM_EPS: f64 = 1e-12;
const STAGE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarsConfig {
    pub alpha_channel: f64,
    pub alpha_spatial: f64,
    pub tau: f64,
    pub stages: Vec<usize>,
}

impl Default for MarsConfig {
    fn default() -> Self {
        Self { alpha_channel: 0.5, alpha_spatial: 0.5, tau: 0.2, stages: vec![1, 2] }
    }
}

impl MarsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_channel < 0.0 || self.alpha_spatial < 0.0 {
            return Err(ForgeError::Config("mars: alphas must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(ForgeError::Config("mars: tau must be positive".into()));
        }
        if self.enabled() && self.stages.is_empty() {
            return Err(ForgeError::Config("mars: stages must be non-empty when an alpha is positive".into()));
        }
        if self.stages.iter().any(|&s| s >= STAGE_STRIDES.len()) {
            return Err(ForgeError::Config("mars: stage index out of range".into()));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.alpha_channel > 0.0 || self.alpha_spatial > 0.0
    }

    pub fn disabled(&self) -> Self {
        Self { alpha_channel: 0.0, alpha_spatial: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorConfig {
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub attention_dim: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], embed_dim: 64, attention_dim: 32 }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < 4) || self.embed_dim == 0 || self.attention_dim == 0 {
            return Err(ForgeError::Config("descriptor: channels must be ≥ 4 and dimensions positive".into()));
        }
        Ok(())
    }
}

/// Square crop around the box center, resampled bilinearly to `size × size`.
/// Pixels outside the image repeat the nearest edge.
pub fn extract_crop(image: &GrayImage, bbox: &BBox, size: usize) -> GrayImage {
    let (cx, cy) = bbox.center();
    let side = (CROP_CONTEXT * bbox.width().max(bbox.height())).max(1.0);
    let step = side / size as f64;
    let (x0, y0) = (cx - side / 2.0, cy - side / 2.0);
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            data.push(image.sample(x0 + (c as f64 + 0.5) * step, y0 + (r as f64 + 0.5) * step));
        }
    }
    GrayImage::new(size, size, data)
}

/// Per-crop zero mean and unit variance; near-constant crops are only centered.
fn standardize(mut batch: Tensor) -> Tensor {
    let per = batch.len() / batch.shape()[0];
    for crop in batch.data_mut().chunks_mut(per) {
        let mean = crop.iter().sum::<f64>() / per as f64;
        let var = crop.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        let scale = if var > 1e-8 { 1.0 / var.sqrt() } else { 1.0 };
        for v in crop {
            *v = (*v - mean) * scale;
        }
    }
    batch
}

/// Squeeze-excitation gate: global average pool, bottleneck, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            reduce: Linear::new(store, &format!("{name}.reduce"), channels, hidden, true, rng, 1.0),
            expand: Linear::zeroed(store, &format!("{name}.expand"), hidden, channels),
        }
    }

    /// `γ` of shape `[N, C]` for an NCHW map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let pooled = g.mean_spatial(x);
        let h = self.reduce.forward(g, store, pooled);
        let h = g.silu(h);
        let h = self.expand.forward(g, store, h);
        g.sigmoid(h)
    }
}

/// Spatial gate: 7×7 convolution over channel mean and max maps, sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[1, 2, 7, 7]));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[1]));
        Self { conv: Conv { weight, bias, stride: 1, pad: 3 } }
    }

    /// He-initialized kernel, zero bias.
    pub fn random<R: Rng>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let weight = store.insert(format!("{name}.weight"), he_normal(rng, &[1, 2, 7, 7], 2 * 49, 1.0));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[1]));
        Self { conv: Conv { weight, bias, stride: 1, pad: 3 } }
    }

    /// `σ` of shape `[N, 1, H, W]` for an NCHW map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mm = g.channel_mean_max(x);
        let s = self.conv.forward(g, store, mm);
        g.sigmoid(s)
    }
}

/// Per-stage linear maps from attention states into the MARs metric spaces.
#[derive(Debug, Clone)]
pub struct AttentionProjection {
    pub stage: usize,
    pub channel: Linear,
    pub spatial: Linear,
}

#[derive(Debug, Clone)]
pub struct Descriptor {
    pub config: DescriptorConfig,
    pub backbone: Backbone,
    pub channel_attention: Vec<ChannelAttention>,
    pub spatial_attention: Vec<SpatialAttention>,
    pub head: Linear,
    pub projections: Vec<AttentionProjection>,
}

/// Attention gates captured during a forward pass, one entry per stage.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    /// `[N, C_i]`
    pub gamma: Vec<Var>,
    /// `[N, 1, h_i, w_i]`
    pub sigma: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DescribeForward {
    /// `[N, D]`, unit rows.
    pub z: Var,
    pub attention: AttentionVars,
}

/// Attention embeddings `(u, v)` of a batch, one `[N, d]` pair per MARs stage.
#[derive(Debug, Clone)]
pub struct AttentionEmbeddings {
    pub stages: Vec<usize>,
    pub u: Vec<Var>,
    pub v: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    /// `γ_i`, one vector per stage.
    pub channel_scale: Vec<Vec<f64>>,
    /// `σ_i` flattened row-major, one map per stage.
    pub spatial_map: Vec<Vec<f64>>,
    pub spatial_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEmbedding {
    pub z: Vec<f64>,
    pub stages: Vec<usize>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Descriptor {
    /// Builds a descriptor whose attention projections cover `mars_stages`.
    pub fn new<R: Rng>(store: &mut ParamStore, config: DescriptorConfig, mars_stages: &[usize], rng: &mut R) -> Self {
        let backbone = Backbone::new(store, "desc.backbone", config.channels, rng);
        let channel_attention =
            (0..3).map(|i| ChannelAttention::new(store, &format!("desc.ca{i}"), config.channels[i], rng)).collect();
        let spatial_attention = (0..3).map(|i| SpatialAttention::random(store, &format!("desc.sa{i}"), rng)).collect();
        let head = Linear::new(store, "desc.head", config.channels[2], config.embed_dim, true, rng, 1.0);
        let projections = mars_stages
            .iter()
            .map(|&stage| {
                let side = CROP_SIZE / STAGE_STRIDES[stage];
                let d = config.attention_dim;
                AttentionProjection {
                    stage,
                    channel: Linear::new(store, &format!("desc.pc{stage}"), config.channels[stage], d, false, rng, 1.0),
                    spatial: Linear::new(store, &format!("desc.ps{stage}"), side * side, d, false, rng, 1.0),
                }
            })
            .collect();
        Self { config, backbone, channel_attention, spatial_attention, head, projections }
    }

    fn check_crops(crops: &[&GrayImage]) -> Result<()> {
        if crops.is_empty() {
            return Err(ForgeError::Shape("empty crop batch".into()));
        }
        if let Some(c) = crops.iter().find(|c| c.height != CROP_SIZE || c.width != CROP_SIZE) {
            return Err(ForgeError::Shape(format!(
                "descriptor input must be {CROP_SIZE}x{CROP_SIZE}, got {}x{}",
                c.height, c.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, crops: &[&GrayImage]) -> Result<DescribeForward> {
        Self::check_crops(crops)?;
        let x = g.constant(standardize(image_batch(crops)));
        let mut gamma = Vec::with_capacity(3);
        let mut sigma = Vec::with_capacity(3);
        let mut bad_stage = None;
        let stages = self.backbone.forward_with(g, store, x, |g, i, h| {
            let h = g.standardize_samples(h, STAGE_EPS);
            let gm = self.channel_attention[i].forward(g, store, h);
            let h = g.mul_channel(h, gm);
            let sg = self.spatial_attention[i].forward(g, store, h);
            let h = g.mul_spatial(h, sg);
            if bad_stage.is_none() && !g.value(h).all_finite() {
                bad_stage = Some(i);
            }
            gamma.push(gm);
            sigma.push(sg);
            h
        });
        if let Some(stage) = bad_stage {
            return Err(ForgeError::Numeric { stage });
        }
        let pooled = g.mean_spatial(stages[2]);
        let z = self.head.forward(g, store, pooled);
        let z = g.l2_normalize_rows(z, NORM_EPS);
        Ok(DescribeForward { z, attention: AttentionVars { gamma, sigma } })
    }

    fn projection(&self, stage: usize) -> Result<&AttentionProjection> {
        self.projections
            .iter()
            .find(|p| p.stage == stage)
            .ok_or_else(|| ForgeError::InvalidArgument(format!("stage {stage} carries no attention projection")))
    }

    /// `u = normalize(P_c γ)` and `v = normalize(P_s vec(σ))` for one stage.
    pub fn embed_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        attention: &AttentionVars,
        stage: usize,
    ) -> Result<(Var, Var)> {
        let p = self.projection(stage)?;
        let n = g.shape(attention.gamma[stage])[0];
        let u = p.channel.forward(g, store, attention.gamma[stage]);
        let u = g.l2_normalize_rows(u, NORM_EPS);
        let hw = g.value(attention.sigma[stage]).len() / n;
        let flat = g.reshape(attention.sigma[stage], &[n, hw]);
        let v = p.spatial.forward(g, store, flat);
        let v = g.l2_normalize_rows(v, NORM_EPS);
        Ok((u, v))
    }

    pub fn embed_all(&self, g: &mut Graph, store: &ParamStore, attention: &AttentionVars) -> Result<AttentionEmbeddings> {
        let stages: Vec<usize> = self.projections.iter().map(|p| p.stage).collect();
        let mut u = Vec::new();
        let mut v = Vec::new();
        for &s in &stages {
            let (a, b) = self.embed_attention(g, store, attention, s)?;
            u.push(a);
            v.push(b);
        }
        Ok(AttentionEmbeddings { stages, u, v })
    }

    /// Embedding and attention state of each crop, as plain values.
    pub fn describe(&self, store: &ParamStore, crops: &[&GrayImage]) -> Result<Vec<(LandmarkEmbedding, AttentionState)>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, crops)?;
        let emb = self.embed_all(&mut g, store, &fwd.attention)?;
        let row = |g: &Graph, v: Var, i: usize| {
            let t = g.value(v);
            let w = t.len() / t.shape()[0];
            t.data()[i * w..(i + 1) * w].to_vec()
        };
        Ok((0..crops.len())
            .map(|i| {
                let e = LandmarkEmbedding {
                    z: row(&g, fwd.z, i),
                    stages: emb.stages.clone(),
                    u: emb.u.iter().map(|&v| row(&g, v, i)).collect(),
                    v: emb.v.iter().map(|&v| row(&g, v, i)).collect(),
                };
                let a = AttentionState {
                    channel_scale: fwd.attention.gamma.iter().map(|&v| row(&g, v, i)).collect(),
                    spatial_map: fwd.attention.sigma.iter().map(|&v| row(&g, v, i)).collect(),
                    spatial_size: fwd.attention.sigma.iter().map(|&v| g.shape(v)[2]).collect(),
                };
                (e, a)
            })
            .collect())
    }

    /// Embedding vectors `z` only.
    pub fn embed(&self, store: &ParamStore, crops: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, crops)?;
        Ok((0..crops.len()).map(|i| g.value(fwd.z).row(i).to_vec()).collect())
    }
}

/// NT-Xent over the `2N` embeddings of `N` positive pairs (rows of `za`, `zb`).
pub fn ntxent_loss(g: &mut Graph, za: Var, zb: Var, tau: f64) -> Result<Var> {
    let n = g.shape(za)[0];
    if n < 2 {
        return Err(ForgeError::InvalidArgument("contrastive loss needs at least two pairs".into()));
    }
    if g.shape(zb) != g.shape(za) {
        return Err(ForgeError::Shape("pair embeddings differ in shape".into()));
    }
    let z = g.concat_rows(&[za, zb]);
    let z = g.l2_normalize_rows(z, NORM_EPS);
    let s = g.matmul_nt(z, z);
    let s = g.scale(s, 1.0 / tau);
    let logp = g.log_softmax_rows(s, true);
    let m = 2 * n;
    let idx = (0..m).map(|i| i * m + (i + n) % m).collect();
    let picked = g.gather(logp, idx, &[m]);
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Weighted cosine distances between the two views' attention embeddings,
/// summed over stages and averaged over the batch. Computed as
/// `½‖a − b‖²`, which equals `1 − a·b` for unit vectors and is exactly zero
/// for identical inputs.
pub fn mars_loss(g: &mut Graph, a: &AttentionEmbeddings, b: &AttentionEmbeddings, config: &MarsConfig) -> Result<Var> {
    let mut terms = Vec::new();
    for &stage in &config.stages {
        let ia = a.stages.iter().position(|&s| s == stage);
        let ib = b.stages.iter().position(|&s| s == stage);
        let (Some(ia), Some(ib)) = (ia, ib) else {
            return Err(ForgeError::InvalidArgument(format!("no attention embedding for stage {stage}")));
        };
        for (alpha, x, y) in [(config.alpha_channel, a.u[ia], b.u[ib]), (config.alpha_spatial, a.v[ia], b.v[ib])] {
            if alpha == 0.0 {
                continue;
            }
            let d = g.sub(x, y);
            let d = g.square(d);
            let n = g.shape(d)[0];
            let s = g.sum(d);
            terms.push(g.scale(s, 0.5 * alpha / n as f64));
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = g.add(total, t);
    }
    Ok(total)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorReport {
    pub total: f64,
    pub ntxent: f64,
    pub mars: f64,
    pub mars_skipped: bool,
}

/// NT-Xent plus the MARs penalty for a batch of crop pairs. With both alphas
/// at zero the attention embeddings are never computed and the loss equals
/// the NT-Xent term exactly.
pub fn descriptor_total_loss(
    g: &mut Graph,
    store: &ParamStore,
    descriptor: &Descriptor,
    views_a: &[&GrayImage],
    views_b: &[&GrayImage],
    config: &MarsConfig,
) -> Result<(Var, DescriptorReport)> {
    if views_a.len() != views_b.len() {
        return Err(ForgeError::Shape("unpaired crop batch".into()));
    }
    let mut all = views_a.to_vec();
    all.extend_from_slice(views_b);
    let n = views_a.len();
    let fwd = descriptor.forward(g, store, &all)?;
    let d = g.shape(fwd.z)[1];
    let za = g.gather(fwd.z, (0..n * d).collect(), &[n, d]);
    let zb = g.gather(fwd.z, (n * d..2 * n * d).collect(), &[n, d]);
    let nt = ntxent_loss(g, za, zb, config.tau)?;
    let mut report = DescriptorReport { ntxent: g.value(nt).item(), ..Default::default() };
    if !config.enabled() {
        report.total = report.ntxent;
        report.mars_skipped = true;
        return Ok((nt, report));
    }
    let emb = descriptor.embed_all(g, store, &fwd.attention)?;
    let half = |g: &mut Graph, v: Var, second: bool| {
        let w = g.shape(v)[1];
        let start = if second { n * w } else { 0 };
        g.gather(v, (start..start + n * w).collect(), &[n, w])
    };
    let mut ea = AttentionEmbeddings { stages: emb.stages.clone(), u: vec![], v: vec![] };
    let mut eb = ea.clone();
    for (&u, &v) in emb.u.iter().zip(&emb.v) {
        ea.u.push(half(g, u, false));
        eb.u.push(half(g, u, true));
        ea.v.push(half(g, v, false));
        eb.v.push(half(g, v, true));
    }
    let mars = mars_loss(g, &ea, &eb, config)?;
    report.mars = g.value(mars).item();
    let total = g.add(nt, mars);
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Cosine similarity of two maps after subtracting their means; zero when
/// either map is constant.
pub fn attention_consistency(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(ForgeError::Shape("attention maps differ in size".into()));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa <= f64::EPSILON * f64::EPSILON || bb <= f64::EPSILON * f64::EPSILON {
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery<'a> {
    pub landmark_id: u64,
    pub z: &'a [f64],
    /// Position of this query inside the gallery, excluded from its ranking.
    pub gallery_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub queries: usize,
}

/// Nearest-neighbour retrieval by cosine similarity, ties broken by gallery order.
pub fn retrieval_eval(gallery: &[(u64, Vec<f64>)], queries: &[RetrievalQuery<'_>]) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(ForgeError::InvalidArgument("empty retrieval gallery".into()));
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS);
        v.iter().map(|a| a / n).collect::<Vec<_>>()
    };
    let gal: Vec<Vec<f64>> = gallery.iter().map(|(_, z)| unit(z)).collect();
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for q in queries {
        let qz = unit(q.z);
        let mut ranked: Vec<(usize, f64)> = gal
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != q.gallery_index)
            .map(|(i, g)| (i, g.iter().zip(&qz).map(|(a, b)| a * b).sum()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hit = |k: usize| ranked.iter().take(k).any(|&(i, _)| gallery[i].0 == q.landmark_id);
        hit1 += hit(1) as usize;
        hit5 += hit(5) as usize;
    }
    let n = queries.len().max(1) as f64;
    Ok(RetrievalMetrics { recall_at_1: hit1 as f64 / n, recall_at_5: hit5 as f64 / n, queries: queries.len() })
}
