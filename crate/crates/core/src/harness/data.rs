use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::datagen::{
    generate_world, make_views, mix_seed, scene_sample, Domain, DomainShift, GrayImage, LandmarkClass, SceneSample,
};
use crate::describe::{extract_crop, CROP_SIZE};
use crate::error::{ForgeError, Result};

const TRAIN_SALT: u64 = 0xD7A1;
const EVAL_SALT: u64 = 0xE7A1;
const VIEW_TRAIN_SALT: u64 = 0x71E1;
const VIEW_EVAL_SALT: u64 = 0x71E2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Labeled source scenes and target scenes for detector training. Target
/// ground truth is carried along but never read by the training loop.
pub fn detection_train_set(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let s = mix_seed(seed, TRAIN_SALT);
    let source = (0..cfg.datagen.n_source).map(|i| scene_sample(&cfg.datagen, Domain::Source, i, s)).collect::<Result<_>>()?;
    let target = (0..cfg.datagen.n_target).map(|i| scene_sample(&cfg.datagen, Domain::Target, i, s)).collect::<Result<_>>()?;
    Ok((source, target))
}

/// Held-out scenes of one domain, disjoint from the training worlds.
pub fn detection_eval_set(cfg: &ExperimentConfig, domain: Domain, seed: u64) -> Result<Vec<SceneSample>> {
    let s = mix_seed(seed, EVAL_SALT);
    (0..cfg.evaluation.detection_images).map(|i| scene_sample(&cfg.datagen, domain, i, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolLandmark {
    /// Unique over the pool: world index in the high bits, landmark id below.
    pub key: u64,
    pub class_id: LandmarkClass,
    /// One crop per view, all `CROP_SIZE × CROP_SIZE`.
    pub crops: Vec<GrayImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPool {
    pub landmarks: Vec<PoolLandmark>,
}

impl ViewPool {
    pub fn num_crops(&self) -> usize {
        self.landmarks.iter().map(|l| l.crops.len()).sum()
    }
}

/// Several jittered views of every landmark in a set of worlds, cropped around
/// the landmark. Landmarks that cannot be kept in view are skipped.
pub fn build_view_pool(cfg: &ExperimentConfig, split: Split, seed: u64) -> Result<ViewPool> {
    let (salt, worlds) = match split {
        Split::Train => (VIEW_TRAIN_SALT, cfg.views.train_worlds),
        Split::Eval => (VIEW_EVAL_SALT, cfg.views.eval_worlds),
    };
    let base_seed = mix_seed(seed, salt);
    let mut landmarks = Vec::new();
    for w in 0..worlds {
        let ws = mix_seed(base_seed, w as u64);
        let world = generate_world(cfg.views.landmarks_per_world, ws)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ws, 1));
        let base = cfg.datagen.random_view(&mut rng);
        for lm in &world.landmarks {
            let vs = mix_seed(ws, 100 + lm.landmark_id as u64);
            let views = match make_views(
                &world,
                lm.landmark_id,
                &base,
                &cfg.views.jitter,
                &DomainShift::IDENTITY,
                cfg.datagen.size(),
                Domain::Source,
                vs,
                cfg.views.views_per_landmark,
            ) {
                Ok(v) => v,
                Err(ForgeError::Visibility { .. }) => continue,
                Err(e) => return Err(e),
            };
            let crops = views
                .iter()
                .map(|s| extract_crop(&s.image, &s.box_of(lm.landmark_id).expect("view keeps the landmark"), CROP_SIZE))
                .collect();
            landmarks.push(PoolLandmark { key: ((w as u64) << 16) | lm.landmark_id as u64, class_id: lm.class_id, crops });
        }
    }
    if landmarks.len() < 2 {
        return Err(ForgeError::InvalidArgument("view pool holds fewer than two landmarks".into()));
    }
    Ok(ViewPool { landmarks })
}
