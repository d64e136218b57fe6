//! Browser demo over the core crate. Three operations: render a synthetic
//! scene, cluster its landmarks by appearance, and track landmarks through a
//! drifting sequence. Appearance here is a small centered thumbnail of each
//! landmark crop, so nothing needs a trained checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use forge_core::adapt::vsa_cluster;
use forge_core::datagen::{drift_sequence, generate_world, render_view, DatagenConfig, Domain, DomainShift, GrayImage, SceneSample};
use forge_core::describe::extract_crop;
use forge_core::track::{oracle_detections, tracking_metrics, FrameDetection, TrackerConfig, TrackerState};

const THUMB: usize = 16;

#[wasm_bindgen]
pub struct Scene {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    boxes: String,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels, RGBA row-major.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// `[{"box":[x0,y0,x1,y1],"id":..,"class":..}, ...]`
    pub fn boxes(&self) -> String {
        self.boxes.clone()
    }
}

/// One world and camera per seed; `target` only switches the rendering domain.
fn scene(seed: u32, target: bool) -> Result<SceneSample, JsError> {
    let config = DatagenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let n = rng.gen_range(config.landmarks_min..=config.landmarks_max);
    let (domain, shift) = if target { (Domain::Target, config.shift) } else { (Domain::Source, DomainShift::IDENTITY) };
    generate_world(n, seed as u64)
        .and_then(|world| {
            let view = config.random_view(&mut rng);
            render_view(&world, &view, &shift, config.size(), domain, seed as u64)
        })
        .map_err(|e| JsError::new(&e.to_string()))
}

fn to_rgba(img: &GrayImage) -> Vec<u8> {
    img.data
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn boxes_json(s: &SceneSample) -> serde_json::Value {
    s.boxes
        .iter()
        .zip(&s.instance_ids)
        .zip(&s.class_ids)
        .map(|((b, id), c)| json!({ "box": [b.x_min, b.y_min, b.x_max, b.y_max], "id": id, "class": c.index() }))
        .collect()
}

/// Renders scene `seed` in the source or the shifted target domain.
#[wasm_bindgen]
pub fn render_scene(seed: u32, target: bool) -> Result<Scene, JsError> {
    let s = scene(seed, target)?;
    Ok(Scene { width: s.image.width, height: s.image.height, rgba: to_rgba(&s.image), boxes: boxes_json(&s).to_string() })
}

/// Mean-centered `THUMB × THUMB` thumbnail of the crop around a box.
pub fn appearance(image: &GrayImage, bbox: &forge_core::datagen::BBox) -> Vec<f64> {
    let c = extract_crop(image, bbox, THUMB);
    let mean = c.data.iter().sum::<f64>() / c.data.len() as f64;
    c.data.iter().map(|v| v - mean).collect()
}

/// Groups the landmarks of a scene by cosine similarity of their appearance
/// at `threshold`. Returns `{"labels":[..],"num_clusters":n}`.
#[wasm_bindgen]
pub fn cluster_landmarks(seed: u32, target: bool, threshold: f64) -> Result<String, JsError> {
    let s = scene(seed, target)?;
    let feats: Vec<Vec<f64>> = s.boxes.iter().map(|b| appearance(&s.image, b)).collect();
    let a = vsa_cluster(&feats, threshold);
    Ok(json!({ "labels": a.labels, "num_clusters": a.num_clusters }).to_string())
}

/// Tracks ground-truth boxes through a drifting sequence, matching on
/// appearance thumbnails or on random vectors. Returns per-frame track ids
/// and the tracking metrics.
#[wasm_bindgen]
pub fn track_sequence(seed: u32, frames: usize, ratio: f64, min_sim: f64, random: bool) -> Result<String, JsError> {
    let err = |e: forge_core::ForgeError| JsError::new(&e.to_string());
    let cfg = TrackerConfig { ratio, min_sim, ..TrackerConfig::default() };
    cfg.validate().map_err(err)?;
    let seq = drift_sequence(&DatagenConfig::default(), frames, [1.5, 0.5], 0.01, &DomainShift::IDENTITY, seed as u64)
        .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut state = TrackerState::new(cfg);
    let mut per_frame = Vec::with_capacity(seq.len());
    for f in &seq {
        let dets: Vec<FrameDetection> = oracle_detections(f)
            .into_iter()
            .zip(&f.instance_ids)
            .map(|(d, &id)| FrameDetection {
                embedding: if random {
                    (0..THUMB * THUMB).map(|_| rng.gen_range(-1.0..1.0)).collect()
                } else {
                    appearance(&f.image, &d.bbox)
                },
                detection: d,
                landmark_id: Some(id),
            })
            .collect();
        state.step_detections(dets, true);
        let log = state.log.last().expect("one record per step");
        per_frame.push(log.assignments.iter().map(|a| json!({ "track": a.track_id, "id": a.landmark_id })).collect::<Vec<_>>());
    }
    let m = tracking_metrics(&state.log).map_err(err)?;
    Ok(json!({ "frames": per_frame, "metrics": m }).to_string())
}
