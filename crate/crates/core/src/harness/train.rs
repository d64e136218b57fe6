use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, OptimizerConfig};
use super::data::{build_view_pool, detection_train_set, Split, ViewPool};
use super::eval::{descriptor_metrics, detector_metrics};
use super::{ensure_dir, write_file, FinalMetrics, RunReport, StepRecord};
use crate::adapt::{total_adapt_loss, AdaptBatch, AdaptModel};
use crate::datagen::{mix_seed, GrayImage, SceneSample};
use crate::describe::{descriptor_total_loss, Descriptor};
use crate::error::{ForgeError, Result};
use crate::graph::Graph;
use crate::params::ParamStore;

const INIT_SALT: u64 = 0x1417;
const SOURCE_STREAM: u64 = 0x5A5A;
const TARGET_STREAM: u64 = 0x7A7A;
const PAIR_STREAM: u64 = 0x9A1E;

pub struct TrainedDetector {
    pub report: RunReport,
    pub model: AdaptModel,
    pub store: ParamStore,
}

pub struct TrainedDescriptor {
    pub report: RunReport,
    pub descriptor: Descriptor,
    pub store: ParamStore,
}

/// Trailing mean over `window` steps (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            if i >= w {
                sum -= values[i - w];
            }
            sum / (i + 1).min(w) as f64
        })
        .collect()
}

pub(crate) fn new_detector_model(cfg: &ExperimentConfig, seed: u64) -> (AdaptModel, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, INIT_SALT));
    let model = AdaptModel::new(&mut store, cfg.detector.clone(), &cfg.adapt, &mut rng);
    (model, store)
}

pub(crate) fn new_descriptor(cfg: &ExperimentConfig, seed: u64) -> (Descriptor, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, INIT_SALT + 1));
    let d = Descriptor::new(&mut store, cfg.descriptor.clone(), &cfg.mars.stages, &mut rng);
    (d, store)
}

/// Shared SGD loop. `loss_at` builds the loss of one step on a fresh graph and
/// returns it with named terms. A non-finite loss, gradient or update aborts the run;
/// the parameters from before that step are kept as the last good checkpoint.
fn sgd_loop(
    store: &mut ParamStore,
    opt: &OptimizerConfig,
    kind: &str,
    config_hash: &str,
    out: Option<&Path>,
    mut loss_at: impl FnMut(&mut Graph, &ParamStore, usize) -> Result<(crate::graph::Var, BTreeMap<String, f64>)>,
) -> Result<Vec<StepRecord>> {
    let mut records = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let mut g = Graph::new();
        let (loss, terms) = loss_at(&mut g, store, step)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss).for_store(&g, store);
        let mut finite = value.is_finite() && grads.iter().flatten().all(|t| t.all_finite());
        let before = store.clone();
        if finite {
            store.sgd_step(&grads, opt.learning_rate);
            finite = store.iter().all(|(_, _, t)| t.data().iter().all(|v| v.abs() <= f32::MAX as f64));
        }
        if !finite {
            *store = before;
            if let Some(dir) = out {
                save_checkpoint(&dir.join("checkpoint"), store, kind, step, config_hash)?;
            }
            return Err(ForgeError::Divergence { step, last_good_step: step });
        }
        records.push(StepRecord { step, loss: value, terms });
        if let Some(dir) = out {
            if opt.checkpoint_every > 0 && (step + 1) % opt.checkpoint_every == 0 && step + 1 < opt.steps {
                let p = dir.join("checkpoints").join(format!("step_{:06}", step + 1));
                save_checkpoint(&p, store, kind, step + 1, config_hash)?;
            }
        }
    }
    Ok(records)
}

fn finish(out: Option<&Path>, cfg: &ExperimentConfig, store: &ParamStore, report: &RunReport, kind: &str) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    ensure_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    save_checkpoint(&dir.join("checkpoint"), store, kind, report.steps.len(), &report.config_hash)?;
    report.write(dir)?;
    let losses = report.losses();
    if !losses.is_empty() {
        let series = vec![
            super::Series { name: "loss".into(), values: losses.clone() },
            super::Series { name: "smoothed (25)".into(), values: smoothed(&losses, 25) },
        ];
        write_file(&dir.join("loss.svg"), super::line_plot_svg(&format!("{kind} training loss"), "step", &series).as_bytes())?;
    }
    Ok(())
}

fn pick<'a, T>(items: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    (0..n).map(|_| &items[rng.gen_range(0..items.len())]).collect()
}

/// Trains the detector on labeled source scenes and, when adaptation is
/// enabled, unlabeled target images. With `out`, writes the checkpoint,
/// config, step records, report and loss plot there.
pub fn train_detector(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainedDetector> {
    cfg.validate()?;
    let t0 = Instant::now();
    let seed = cfg.seed;
    let hash = cfg.hash();
    let (model, mut store) = new_detector_model(cfg, seed);
    let (source, target) = detection_train_set(cfg, seed)?;
    if source.is_empty() && cfg.detector_optimizer.steps > 0 {
        return Err(ForgeError::InvalidArgument("detector training needs source scenes".into()));
    }
    let adapt = cfg.effective_adapt();
    let uses_target = !adapt.all_weights_zero();
    if uses_target && target.is_empty() && cfg.detector_optimizer.steps > 0 {
        return Err(ForgeError::InvalidArgument("adaptation needs target scenes".into()));
    }
    let target_images: Vec<&GrayImage> = target.iter().map(|s| &s.image).collect();
    let mut src_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SOURCE_STREAM));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TARGET_STREAM));
    let opt = cfg.detector_optimizer.clone();
    let bs = opt.batch_size;
    let steps = sgd_loop(&mut store, &opt, "detector", &hash, out, |g, st, step| {
        let src: Vec<&SceneSample> = pick(&source, bs, &mut src_rng);
        let tgt: Vec<&GrayImage> = if uses_target { pick(&target_images, bs, &mut tgt_rng).into_iter().copied().collect() } else { Vec::new() };
        let lambda = adapt.lambda_at(step, opt.steps);
        let (loss, r) = total_adapt_loss(g, st, &model, &AdaptBatch { source: src, target: tgt }, &adapt, lambda)?;
        let mut terms = BTreeMap::from([("supervised".to_string(), r.supervised)]);
        if uses_target {
            terms.insert("lambda".into(), lambda);
            terms.insert("global".into(), r.global);
            terms.insert("regularize".into(), r.regularize);
            terms.insert("vsa_adversarial".into(), r.vsa_adversarial);
            terms.insert("vsa_contrastive".into(), r.vsa_contrastive);
            terms.insert("clusters".into(), r.num_clusters as f64);
            terms.insert("target_instances".into(), r.target_instances as f64);
        }
        Ok((loss, terms))
    })?;
    let metrics = detector_metrics(cfg, &model.detector, &store, seed)?;
    let report = RunReport {
        kind: "detector".into(),
        config_hash: hash,
        seed,
        wall_clock_seconds: t0.elapsed().as_secs_f64(),
        steps,
        metrics,
    };
    finish(out, cfg, &store, &report, "detector")?;
    Ok(TrainedDetector { report, model, store })
}

/// Draws `n` positive pairs: distinct landmarks, two distinct views each.
fn sample_pairs<'a>(pool: &'a ViewPool, n: usize, rng: &mut ChaCha8Rng) -> (Vec<&'a GrayImage>, Vec<&'a GrayImage>) {
    let n = n.min(pool.landmarks.len());
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for li in sample(rng, pool.landmarks.len(), n) {
        let crops = &pool.landmarks[li].crops;
        let v = sample(rng, crops.len(), 2);
        a.push(&crops[v.index(0)]);
        b.push(&crops[v.index(1)]);
    }
    (a, b)
}

/// Trains the descriptor contrastively on view pairs of training landmarks.
pub fn train_descriptor(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainedDescriptor> {
    cfg.validate()?;
    let t0 = Instant::now();
    let seed = cfg.seed;
    let hash = cfg.hash();
    let (descriptor, mut store) = new_descriptor(cfg, seed);
    let pool = build_view_pool(cfg, Split::Train, seed)?;
    let mars = cfg.effective_mars();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, PAIR_STREAM));
    let opt = cfg.descriptor_optimizer.clone();
    if opt.steps > 0 && opt.batch_size.min(pool.landmarks.len()) < 2 {
        return Err(ForgeError::InvalidArgument("descriptor batches need at least two landmarks".into()));
    }
    let steps = sgd_loop(&mut store, &opt, "descriptor", &hash, out, |g, st, _| {
        let (a, b) = sample_pairs(&pool, opt.batch_size, &mut rng);
        let (loss, r) = descriptor_total_loss(g, st, &descriptor, &a, &b, &mars)?;
        let mut terms = BTreeMap::from([("ntxent".to_string(), r.ntxent)]);
        if !r.mars_skipped {
            terms.insert("mars".into(), r.mars);
        }
        Ok((loss, terms))
    })?;
    let metrics = descriptor_metrics(cfg, &descriptor, &store, seed)?;
    let report = RunReport {
        kind: "descriptor".into(),
        config_hash: hash,
        seed,
        wall_clock_seconds: t0.elapsed().as_secs_f64(),
        steps,
        metrics: FinalMetrics {
            recall_at_1: Some(metrics.recall_at_1),
            recall_at_5: Some(metrics.recall_at_5),
            mean_attention_consistency: Some(metrics.mean_attention_consistency),
            ..Default::default()
        },
    };
    finish(out, cfg, &store, &report, "descriptor")?;
    Ok(TrainedDescriptor { report, descriptor, store })
}
