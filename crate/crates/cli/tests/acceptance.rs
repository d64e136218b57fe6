//! Acceptance criteria. Prints one PASS/FAIL line per criterion. Failing
//! criteria do not fail the run unless `FORGE_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forge_core::adapt::{
    feature_regularize, global_align_loss, vsa_adversarial_loss, vsa_cluster, vsa_contrastive_loss, ClusterAssignment,
    DomainClassifier,
};
use forge_core::datagen::{drift_sequence, scene_sample, BBox, DatagenConfig, Domain, DomainShift};
use forge_core::describe::{
    mars_loss, ntxent_loss, AttentionEmbeddings, AttentionVars, ChannelAttention, Descriptor, DescriptorConfig,
    MarsConfig, SpatialAttention,
};
use forge_core::detector::{
    candidates, decode_cell, encode_box, iou, nms, supervised_loss, Detection, DetectionGrid, Detector, DetectorConfig,
};
use forge_core::gradcheck::{check_gradients, check_param_gradients, relative_error, DEFAULT_STEP};
use forge_core::harness::{
    ab_compare, load_descriptor, run_tracking, train_descriptor, train_detector, AblationFlags, EmbeddingSource,
    ExperimentConfig, Study, Variant,
};
use forge_core::track::{match_tracks, similarity_matrix};
use forge_core::{Graph, ParamStore, Tensor, Var};

const GRAD_TOL: f64 = 1e-4;
const INSTANCES: usize = 10;
const ORACLE_TRIALS: usize = 200;
const CLOSED_FORM_TOL: f64 = 1e-6;
const ROUND_TRIP_TOL: f64 = 1e-5;
const UDA_TARGET_GAIN: f64 = 0.10;
const UDA_SOURCE_LOSS: f64 = 0.05;
const MARS_RECALL_GAIN: f64 = 0.05;
const MARS_CONSISTENCY_GAIN: f64 = 0.10;
const AB_BUDGET_S: f64 = 30.0 * 60.0;
const GRAD_BUDGET_S: f64 = 5.0 * 60.0;
const LATENCY_MS: f64 = 250.0;
const DETECTOR_AB_LR: f64 = 0.02;
const DETECTOR_AB_STEPS: usize = 1500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("criterion {id} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn all_ids(store: &ParamStore) -> Vec<forge_core::ParamId> {
    store.iter().map(|(id, _, _)| id).collect()
}

/// Gradient of a scalar w.r.t. one input, by central differences of forward values only.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let o = f(&mut g, v);
        g.value(o).item()
    };
    let mut work = x.clone();
    (0..x.len())
        .map(|j| {
            let orig = x.data()[j];
            work.data_mut()[j] = orig + DEFAULT_STEP;
            let hi = eval(&work);
            work.data_mut()[j] = orig - DEFAULT_STEP;
            let lo = eval(&work);
            work.data_mut()[j] = orig;
            (hi - lo) / (2.0 * DEFAULT_STEP)
        })
        .collect()
}

/// Relative error of the input gradient through a gradient reversal, whose
/// backward pass is `−λ` times the true derivative.
fn reversed_input_error(x: &Tensor, lambda: f64, f: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let o = f(&mut g, v);
    let grads = g.backward(o);
    let analytic = grads.get(v).map_or_else(|| vec![0.0; x.len()], |t| t.data().to_vec());
    let expected: Vec<f64> = numeric_grad(x, f).iter().map(|n| -lambda * n).collect();
    relative_error(&analytic, &expected)
}

fn classifier(rng: &mut ChaCha8Rng, d_in: usize) -> (ParamStore, DomainClassifier) {
    let mut store = ParamStore::new();
    let clf = DomainClassifier::new(&mut store, "c", d_in, 6, rng);
    perturb(&mut store, rng, 0.5);
    (store, clf)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    let dcfg = DatagenConfig { image_size: 64, ..DatagenConfig::default() };
    for trial in 0..INSTANCES {
        let k = trial as u64;

        let cfg = DetectorConfig { channels: [2, 3, 4], ..DetectorConfig::default() };
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, cfg.clone(), &mut rng);
        perturb(&mut store, &mut rng, 0.1);
        let scene = scene_sample(&dcfg, Domain::Source, trial, 77).unwrap();
        let e = check_param_gradients(&store, &all_ids(&store), 8, |g, st| {
            let fwd = det.forward(g, st, &[&scene.image]).unwrap();
            supervised_loss(g, fwd.head, &[&scene], &cfg, det.stride()).unwrap().total
        });
        record("supervised_loss", e);

        let (store, clf) = classifier(&mut rng, 3);
        let x = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let doms = [Domain::Source, Domain::Target];
        let lambda = 0.3 + 0.1 * k as f64;
        let e1 = check_param_gradients(&store, &all_ids(&store), 50, |g, st| {
            let v = g.constant(x.clone());
            global_align_loss(g, st, &clf, v, &doms, lambda).unwrap()
        });
        let e2 = reversed_input_error(&x, lambda, &|g, v| global_align_loss(g, &store, &clf, v, &doms, lambda).unwrap());
        record("global_align_loss", e1.max(e2));

        let (store, clf) = classifier(&mut rng, 4);
        let x = random(&mut rng, &[5, 4], -1.0, 1.0);
        let doms = [Domain::Source, Domain::Target, Domain::Target, Domain::Source, Domain::Target];
        let e1 = check_param_gradients(&store, &all_ids(&store), 50, |g, st| {
            let v = g.constant(x.clone());
            vsa_adversarial_loss(g, st, &clf, v, &doms, lambda).unwrap()
        });
        let e2 =
            reversed_input_error(&x, lambda, &|g, v| vsa_adversarial_loss(g, &store, &clf, v, &doms, lambda).unwrap());
        record("vsa_adversarial_loss", e1.max(e2));

        let labels: Vec<usize> = (0..6).map(|i| (i + trial) % 3).collect();
        let a = ClusterAssignment { labels, num_clusters: 3 };
        let x = random(&mut rng, &[6, 4], -1.0, 1.0);
        let tau = 0.1 + 0.05 * k as f64;
        record("vsa_contrastive_loss", check_gradients(&[x], |g, v| vsa_contrastive_loss(g, v[0], &a, tau).unwrap()));

        let xs = [random(&mut rng, &[3 + trial % 3, 4], -1.0, 1.0), random(&mut rng, &[4, 4], -1.0, 1.0)];
        record(
            "feature_regularize",
            check_gradients(&xs, |g, v| feature_regularize(g, Some(v[0]), Some(v[1])).unwrap()),
        );

        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, &mut rng);
        perturb(&mut store, &mut rng, 0.3);
        let x = random(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
        let w = random(&mut rng, &[2, 4], -1.0, 1.0);
        let obj = |g: &mut Graph, gm: Var, w: &Tensor| {
            let wv = g.constant(w.clone());
            let p = g.mul(gm, wv);
            g.sum(p)
        };
        let e1 = check_param_gradients(&store, &all_ids(&store), 40, |g, st| {
            let xv = g.constant(x.clone());
            let gm = ca.forward(g, st, xv);
            obj(g, gm, &w)
        });
        let e2 = check_gradients(&[x], |g, v| {
            let gm = ca.forward(g, &store, v[0]);
            obj(g, gm, &w)
        });
        record("channel_attention", e1.max(e2));

        let mut store = ParamStore::new();
        let sa = SpatialAttention::new(&mut store, "sa");
        perturb(&mut store, &mut rng, 0.3);
        let x = random(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let w = random(&mut rng, &[2, 1, 5, 5], -1.0, 1.0);
        let e1 = check_param_gradients(&store, &all_ids(&store), 60, |g, st| {
            let xv = g.constant(x.clone());
            let s = sa.forward(g, st, xv);
            obj(g, s, &w)
        });
        let e2 = check_gradients(&[x], |g, v| {
            let s = sa.forward(g, &store, v[0]);
            obj(g, s, &w)
        });
        record("spatial_attention", e1.max(e2));

        let mut store = ParamStore::new();
        let dc = DescriptorConfig { channels: [4, 4, 8], embed_dim: 6, attention_dim: 5 };
        let d = Descriptor::new(&mut store, dc, &[2], &mut rng);
        perturb(&mut store, &mut rng, 0.3);
        let gamma = random(&mut rng, &[3, 8], 0.05, 0.95);
        let sigma = random(&mut rng, &[3, 1, 4, 4], 0.05, 0.95);
        let w = random(&mut rng, &[3, 5], -1.0, 1.0);
        let embed = |g: &mut Graph, st: &ParamStore, gm: Var, sg: Var| {
            let pad = |g: &mut Graph, shape: &[usize]| g.constant(Tensor::zeros(shape));
            let att = AttentionVars {
                gamma: vec![pad(g, &[3, 4]), pad(g, &[3, 4]), gm],
                sigma: vec![pad(g, &[3, 1, 1, 1]), pad(g, &[3, 1, 1, 1]), sg],
            };
            let (u, v) = d.embed_attention(g, st, &att, 2).unwrap();
            let wv = g.constant(w.clone());
            let a = g.mul(u, wv);
            let b = g.mul(v, wv);
            let a = g.sum(a);
            let b = g.sum(b);
            g.add(a, b)
        };
        let p = &d.projections[0];
        let e1 = check_param_gradients(&store, &[p.channel.weight, p.spatial.weight], 60, |g, st| {
            let gm = g.constant(gamma.clone());
            let sg = g.constant(sigma.clone());
            embed(g, st, gm, sg)
        });
        let e2 = check_gradients(&[gamma, sigma], |g, v| embed(g, &store, v[0], v[1]));
        record("embed_attention", e1.max(e2));

        let zs = [random(&mut rng, &[3, 5], -1.0, 1.0), random(&mut rng, &[3, 5], -1.0, 1.0)];
        record("ntxent_loss", check_gradients(&zs, |g, v| ntxent_loss(g, v[0], v[1], tau).unwrap()));

        let ts: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[3, 5], -1.0, 1.0)).collect();
        let mcfg = MarsConfig { stages: vec![2], alpha_channel: 0.2 + 0.05 * k as f64, alpha_spatial: 0.7, tau: 0.2 };
        record(
            "mars_loss",
            check_gradients(&ts, |g, v| {
                let n: Vec<Var> = v.iter().map(|&x| g.l2_normalize_rows(x, 1e-12)).collect();
                let a = AttentionEmbeddings { stages: vec![2], u: vec![n[0]], v: vec![n[1]] };
                let b = AttentionEmbeddings { stages: vec![2], u: vec![n[2]], v: vec![n[3]] };
                mars_loss(g, &a, &b, &mcfg).unwrap()
            }),
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<String> =
        worst.iter().filter(|w| !(w.1 < GRAD_TOL)).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    Outcome {
        pass: failing.is_empty() && secs < GRAD_BUDGET_S,
        detail: format!(
            "{} operations x {INSTANCES} instances, worst rel err {max:.2e} (tol {GRAD_TOL:.0e}), {secs:.1}s{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!(", failing {}", failing.join(" ")) }
        ),
    }
}

/// Suppression by repeated arg-max: take the best remaining box, drop every
/// remaining same-class box overlapping it, repeat.
fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let best = (0..dets.len())
            .filter(|&i| alive[i])
            .max_by(|&a, &b| dets[a].score.total_cmp(&dets[b].score).then(b.cmp(&a)));
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(dets[b]);
        for j in 0..dets.len() {
            if alive[j] && dets[j].class_id == dets[b].class_id && iou(&dets[j].bbox, &dets[b].bbox) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Clusters as explicit member lists; average linkage recomputed from the raw
/// similarity matrix at every step.
fn cluster_reference(vectors: &[Vec<f64>], thr: f64) -> ClusterAssignment {
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n).collect()
        })
        .collect();
    let cos = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
    let mut clusters: Vec<Vec<usize>> = (0..vectors.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += cos(i, j);
                    }
                }
                s /= (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        match best {
            Some((a, b, s)) if s >= thr => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
            }
            _ => break,
        }
    }
    let mut labels = vec![0; vectors.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = c;
        }
    }
    ClusterAssignment { labels, num_clusters: clusters.len() }
}

/// Among all maximal one-to-one assignments, the one whose similarities sorted
/// in descending order are lexicographically largest, filtered by the same
/// acceptance rule the matcher applies.
fn match_reference(sims: &[Vec<f64>], ratio: f64, min_sim: f64) -> Vec<(usize, usize)> {
    fn extend(
        t: usize,
        sims: &[Vec<f64>],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut Option<(Vec<f64>, Vec<(usize, usize)>)>,
    ) {
        let nd = used.len();
        if t == sims.len() {
            let want = sims.len().min(nd);
            if cur.len() != want {
                return;
            }
            let mut key: Vec<f64> = cur.iter().map(|&(a, b)| sims[a][b]).collect();
            key.sort_by(|a, b| b.total_cmp(a));
            let better = match best {
                None => true,
                Some((bk, _)) => key.iter().zip(bk.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
            };
            if better {
                *best = Some((key, cur.clone()));
            }
            return;
        }
        extend(t + 1, sims, used, cur, best);
        for d in 0..nd {
            if !used[d] {
                used[d] = true;
                cur.push((t, d));
                extend(t + 1, sims, used, cur, best);
                cur.pop();
                used[d] = false;
            }
        }
    }
    if sims.is_empty() || sims[0].is_empty() {
        return Vec::new();
    }
    let mut best = None;
    extend(0, sims, &mut vec![false; sims[0].len()], &mut Vec::new(), &mut best);
    let accept = |t: usize, d: usize| {
        let s = sims[t][d];
        let row = (0..sims[t].len()).filter(|&j| j != d).map(|j| 1.0 - sims[t][j]).fold(2.0, f64::min);
        let col = (0..sims.len()).filter(|&i| i != t).map(|i| 1.0 - sims[i][d]).fold(2.0, f64::min);
        s >= min_sim && 1.0 - s <= ratio * row && 1.0 - s <= ratio * col
    };
    let mut pairs: Vec<(usize, usize)> = best.map(|b| b.1).unwrap_or_default().into_iter().filter(|&(t, d)| accept(t, d)).collect();
    pairs.sort();
    pairs
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let (mut nms_ok, mut clu_ok, mut match_ok) = (0, 0, 0);
    for _ in 0..ORACLE_TRIALS {
        let size = rng.gen_range(2..=7);
        let mut grid = DetectionGrid::zeros(size, 16.0, 32.0);
        for v in grid.values.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut cands = candidates(&grid, 0.05);
        cands.truncate(50);
        let thr = rng.gen_range(0.1..0.7);
        if nms(cands.clone(), thr) == nms_reference(&cands, thr) {
            nms_ok += 1;
        }

        let n = rng.gen_range(1..=10);
        let dim = rng.gen_range(2..=5);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let thr = rng.gen_range(-0.5..0.9);
        if vsa_cluster(&vs, thr) == cluster_reference(&vs, thr) {
            clu_ok += 1;
        }

        let (nt, nd) = (rng.gen_range(0..=6), rng.gen_range(0..=6));
        let emb = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let tracks: Vec<Vec<f64>> = (0..nt).map(|_| emb(&mut rng)).collect();
        let dets: Vec<Vec<f64>> = (0..nd).map(|_| emb(&mut rng)).collect();
        let t_refs: Vec<(u64, &[f64])> = tracks.iter().enumerate().map(|(i, t)| (i as u64, t.as_slice())).collect();
        let d_refs: Vec<&[f64]> = dets.iter().map(|d| d.as_slice()).collect();
        let sims = similarity_matrix(&t_refs.iter().map(|t| t.1).collect::<Vec<_>>(), &d_refs);
        let ratio = rng.gen_range(0.5..1.0);
        let min_sim = -1.0;
        let r = match_tracks(&t_refs, &d_refs, ratio, min_sim);
        let mut got: Vec<(usize, usize)> = r.pairs.iter().map(|&(t, d)| (t as usize, d)).collect();
        got.sort();
        if got == match_reference(&sims, ratio, min_sim) {
            match_ok += 1;
        }
    }
    let t = ORACLE_TRIALS;
    Outcome {
        pass: nms_ok == t && clu_ok == t && match_ok == t,
        detail: format!("nms {nms_ok}/{t}, clustering {clu_ok}/{t}, matching {match_ok}/{t} exact"),
    }
}

fn criterion_3() -> Outcome {
    let ln3 = 3f64.ln();
    let mut g = Graph::new();
    let z = g.constant(Tensor::full(&[2, 2], 0.6));
    let v = ntxent_loss(&mut g, z, z, 0.2).unwrap();
    let nt = g.value(v).item();
    let x = g.constant(Tensor::full(&[4, 2], 0.6));
    let a = ClusterAssignment { labels: vec![0, 0, 1, 1], num_clusters: 2 };
    let v = vsa_contrastive_loss(&mut g, x, &a, 0.1).unwrap();
    let vc = g.value(v).item();

    let mut store = ParamStore::new();
    let clf = DomainClassifier::new(&mut store, "c", 3, 8, &mut ChaCha8Rng::seed_from_u64(3));
    let f = g.constant(Tensor::new(&[2, 3, 2, 2], (0..24).map(|i| (i as f64).sin()).collect()));
    let v = global_align_loss(&mut g, &store, &clf, f, &[Domain::Source, Domain::Target], 1.0).unwrap();
    let bce = g.value(v).item();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = random(&mut rng, &[3, 5], -1.0, 1.0);
    let v = random(&mut rng, &[3, 5], -1.0, 1.0);
    let uv = g.constant(u);
    let vv = g.constant(v);
    let un = g.l2_normalize_rows(uv, 1e-12);
    let vn = g.l2_normalize_rows(vv, 1e-12);
    let e = AttentionEmbeddings { stages: vec![1, 2], u: vec![un, un], v: vec![vn, vn] };
    let v = mars_loss(&mut g, &e, &e.clone(), &MarsConfig::default()).unwrap();
    let mars = g.value(v).item();

    let mut worst_px: f64 = 0.0;
    for _ in 0..1000 {
        let (cx, cy) = (rng.gen_range(0.5..127.5), rng.gen_range(0.5..127.5));
        let b = BBox::from_center(cx, cy, rng.gen_range(4.0..60.0), rng.gen_range(4.0..60.0));
        let ((row, col), t) = encode_box(&b, 8, 16.0, 32.0);
        let d = decode_cell(row, col, &t, 16.0, 32.0);
        for (p, q) in <[f64; 4]>::from(b).iter().zip(<[f64; 4]>::from(d).iter()) {
            worst_px = worst_px.max((p - q).abs());
        }
    }
    let pass = (nt - ln3).abs() <= CLOSED_FORM_TOL
        && (vc - ln3).abs() <= CLOSED_FORM_TOL
        && (bce - std::f64::consts::LN_2).abs() <= CLOSED_FORM_TOL
        && mars == 0.0
        && worst_px <= ROUND_TRIP_TOL;
    Outcome {
        pass,
        detail: format!(
            "ntxent-ln3 {:.1e}, vsa_con-ln3 {:.1e}, bce-ln2 {:.1e}, mars {mars}, round trip {worst_px:.1e}px",
            nt - ln3,
            vc - ln3,
            bce - std::f64::consts::LN_2
        ),
    }
}

fn ab_row(cmp: &forge_core::harness::AbComparison, variant: &str, metric: &str) -> (f64, f64) {
    cmp.row(variant, metric).map_or((f64::NAN, f64::NAN), |r| (r.median, r.delta))
}

fn per_seed(cmp: &forge_core::harness::AbComparison, metric: &str) -> String {
    cmp.rows
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| format!("{} {:.3?}", r.variant, r.values))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_4(cfg: &ExperimentConfig) -> Outcome {
    let t0 = Instant::now();
    let variants = [
        Variant { name: "source_only".into(), ablation: AblationFlags { adapt_enabled: false, mars_enabled: true } },
        Variant { name: "uda".into(), ablation: AblationFlags { adapt_enabled: true, mars_enabled: true } },
    ];
    let cmp = match ab_compare(cfg, Study::Detector, &variants, None) {
        Ok(c) => c,
        Err(e) => return Outcome { pass: false, detail: format!("error: {e}") },
    };
    let secs = t0.elapsed().as_secs_f64();
    let (base_t, _) = ab_row(&cmp, "source_only", "target_recall");
    let (uda_t, dt) = ab_row(&cmp, "uda", "target_recall");
    let (base_s, _) = ab_row(&cmp, "source_only", "source_recall");
    let (uda_s, ds) = ab_row(&cmp, "uda", "source_recall");
    Outcome {
        pass: dt >= UDA_TARGET_GAIN && ds > -UDA_SOURCE_LOSS && secs <= AB_BUDGET_S,
        detail: format!(
            "median target recall {base_t:.3} -> {uda_t:.3} (delta {dt:+.3}, need >= {UDA_TARGET_GAIN}), \
             source recall {base_s:.3} -> {uda_s:.3} (delta {ds:+.3}, need > -{UDA_SOURCE_LOSS}), {:.1} min; \
             per-seed target recall: {}",
            secs / 60.0,
            per_seed(&cmp, "target_recall")
        ),
    }
}

fn criterion_5(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let t0 = Instant::now();
    let variants = [
        Variant { name: "baseline".into(), ablation: AblationFlags { adapt_enabled: true, mars_enabled: false } },
        Variant { name: "mars".into(), ablation: AblationFlags { adapt_enabled: true, mars_enabled: true } },
    ];
    let cmp = match ab_compare(cfg, Study::Descriptor, &variants, Some(out)) {
        Ok(c) => c,
        Err(e) => return Outcome { pass: false, detail: format!("error: {e}") },
    };
    let secs = t0.elapsed().as_secs_f64();
    let (b_r, _) = ab_row(&cmp, "baseline", "recall_at_1");
    let (m_r, dr) = ab_row(&cmp, "mars", "recall_at_1");
    let (b_c, _) = ab_row(&cmp, "baseline", "mean_attention_consistency");
    let (m_c, dc) = ab_row(&cmp, "mars", "mean_attention_consistency");
    Outcome {
        pass: dr >= MARS_RECALL_GAIN && dc >= MARS_CONSISTENCY_GAIN && secs <= AB_BUDGET_S,
        detail: format!(
            "median recall@1 {b_r:.3} -> {m_r:.3} (delta {dr:+.3}, need >= {MARS_RECALL_GAIN}), \
             consistency {b_c:.3} -> {m_c:.3} (delta {dc:+.3}, need >= {MARS_CONSISTENCY_GAIN}), {:.1} min; \
             per-seed recall@1: {}",
            secs / 60.0,
            per_seed(&cmp, "recall_at_1")
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.datagen.n_source = 16;
    cfg.datagen.n_target = 16;
    cfg.evaluation.detection_images = 4;
    cfg.views.train_worlds = 4;
    cfg.views.eval_worlds = 2;
    cfg.detector_optimizer.steps = 25;
    cfg.detector_optimizer.batch_size = 2;
    cfg.descriptor_optimizer.steps = 25;
    cfg.descriptor_optimizer.batch_size = 4;
    let bits = |l: Vec<f64>| l.into_iter().map(f64::to_bits).collect::<Vec<_>>();

    let mut off = cfg.clone();
    off.ablation.adapt_enabled = false;
    let mut zero = cfg.clone();
    zero.adapt.w_global = 0.0;
    zero.adapt.w_reg = 0.0;
    zero.adapt.w_vsa_adv = 0.0;
    zero.adapt.w_vsa_con = 0.0;
    let det_a = train_detector(&off, None).unwrap().report.losses();
    let det_b = train_detector(&zero, None).unwrap().report.losses();

    let mut off = cfg.clone();
    off.ablation.mars_enabled = false;
    let mut zero = cfg.clone();
    zero.mars.alpha_channel = 0.0;
    zero.mars.alpha_spatial = 0.0;
    let desc_a = train_descriptor(&off, None).unwrap().report.losses();
    let desc_b = train_descriptor(&zero, None).unwrap().report.losses();
    let det_same = det_a.len() == 25 && bits(det_a) == bits(det_b);
    let desc_same = desc_a.len() == 25 && bits(desc_a) == bits(desc_b);
    Outcome {
        pass: det_same && desc_same,
        detail: format!("detector histories identical: {det_same}, descriptor histories identical: {desc_same}"),
    }
}

fn forge(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).output().is_ok_and(|o| o.status.success())
}

fn criterion_7(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.datagen.n_source = 6;
    cfg.datagen.n_target = 6;
    cfg.datagen.sequence_frames = 3;
    cfg.evaluation.detection_images = 4;
    cfg.views.train_worlds = 4;
    cfg.views.eval_worlds = 2;
    cfg.detector_optimizer.steps = 15;
    cfg.detector_optimizer.batch_size = 2;
    cfg.descriptor_optimizer.steps = 15;
    cfg.descriptor_optimizer.batch_size = 4;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();
    let mut checks = Vec::new();
    for (verb, files) in [
        ("datagen", vec!["manifest.jsonl", "sequence/manifest.jsonl"]),
        ("train-detector", vec!["checkpoint/manifest.json", "checkpoint/params.bin"]),
        ("train-descriptor", vec!["checkpoint/manifest.json", "checkpoint/params.bin"]),
    ] {
        let runs: Vec<_> = (0..2).map(|k| dir.join(format!("{verb}_{k}"))).collect();
        let ok = runs.iter().all(|r| forge(&["--config", c, "--seed", "5", "--out", r.to_str().unwrap(), verb]));
        let same = ok
            && files.iter().all(|f| {
                let a = fs::read(runs[0].join(f));
                let b = fs::read(runs[1].join(f));
                matches!((a, b), (Ok(a), Ok(b)) if a == b)
            });
        checks.push((verb, same));
    }
    Outcome {
        pass: checks.iter().all(|c| c.1),
        detail: checks.iter().map(|(v, s)| format!("{v} byte-identical: {s}")).collect::<Vec<_>>().join(", "),
    }
}

fn criterion_8() -> Outcome {
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, DetectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
    let img = scene_sample(&DatagenConfig::default(), Domain::Source, 0, 8).unwrap().image;
    det.detect(&store, &[&img]).unwrap();
    let mut times: Vec<f64> = (0..10)
        .map(|_| {
            let t = Instant::now();
            let mut g = Graph::new();
            det.forward(&mut g, &store, &[&img]).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let med = times[times.len() / 2];
    Outcome { pass: med < LATENCY_MS, detail: format!("median forward {med:.1} ms on {}x{}, limit {LATENCY_MS} ms", img.height, img.width) }
}

fn criterion_9(cfg: &ExperimentConfig, descriptors: &Path) -> Outcome {
    let mut static_switches = Vec::new();
    let mut trained = Vec::new();
    let mut random = Vec::new();
    for k in 0..3u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + k;
        let ckpt = descriptors.join("mars").join(format!("seed_{}", c.seed)).join("checkpoint");
        let (d, s) = match load_descriptor(&c, &ckpt) {
            Ok(x) => x,
            Err(e) => return Outcome { pass: false, detail: format!("no trained descriptor: {e}") },
        };
        let frames = drift_sequence(&c.datagen, 20, [0.0, 0.0], 0.0, &DomainShift::IDENTITY, 900 + c.seed).unwrap();
        let run = run_tracking(&c, None, (&d, &s), EmbeddingSource::Descriptor, &frames, c.seed).unwrap();
        static_switches.push(run.metrics.identity_switches);
        let frames = forge_core::harness::evaluation_sequence(&c, c.seed).unwrap();
        trained.push(run_tracking(&c, None, (&d, &s), EmbeddingSource::Descriptor, &frames, c.seed).unwrap().metrics.identity_switches);
        random.push(run_tracking(&c, None, (&d, &s), EmbeddingSource::Random, &frames, c.seed).unwrap().metrics.identity_switches);
    }
    let med = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort();
        v[v.len() / 2]
    };
    let (mt, mr) = (med(&trained), med(&random));
    Outcome {
        pass: static_switches.iter().all(|&s| s == 0) && mt < mr,
        detail: format!(
            "static-sequence switches {static_switches:?}, drifting-sequence median switches trained {mt} vs random {mr}"
        ),
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("FORGE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let tmp = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig::default();
    let mut all = true;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        report(id, name, &o);
        all &= o.pass;
    };
    run(1, "gradient suite", &mut criterion_1);
    run(2, "oracle equivalence", &mut criterion_2);
    run(3, "closed-form values", &mut criterion_3);
    let mut det_cfg = cfg.clone();
    det_cfg.detector_optimizer.learning_rate = DETECTOR_AB_LR;
    det_cfg.detector_optimizer.steps = DETECTOR_AB_STEPS;
    run(4, "uda directional", &mut || criterion_4(&det_cfg));
    let desc_dir = tmp.path().join("descriptor_ab");
    run(5, "mars directional", &mut || criterion_5(&cfg, &desc_dir));
    run(6, "ablation identities", &mut criterion_6);
    let det_dir = tmp.path().join("determinism");
    fs::create_dir_all(&det_dir).unwrap();
    run(7, "determinism", &mut || criterion_7(&det_dir));
    run(8, "latency budget", &mut criterion_8);
    run(9, "tracking sanity", &mut || criterion_9(&cfg, &desc_dir));
    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria fail" });
    if strict && !all {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
