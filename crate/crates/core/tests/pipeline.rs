use std::fs;
use std::path::Path;

use forge_core::harness::{
    evaluate, evaluation_sequence, load_checkpoint, load_descriptor, load_detector, run_tracking, smoothed,
    train_descriptor, train_detector, Checkpoints, EmbeddingSource, ExperimentConfig, BLOB_FILE, MANIFEST_FILE,
};
use forge_core::ForgeError;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.datagen.image_size = 64;
    c.datagen.n_source = 12;
    c.datagen.n_target = 12;
    c.detector.channels = [4, 8, 8];
    c.adapt.classifier_hidden = 8;
    c.descriptor.channels = [4, 8, 8];
    c.descriptor.embed_dim = 8;
    c.descriptor.attention_dim = 4;
    c.views.train_worlds = 2;
    c.views.eval_worlds = 2;
    c.views.landmarks_per_world = 3;
    c.views.views_per_landmark = 2;
    c.evaluation.detection_images = 4;
    c.evaluation.sequence_frames = 4;
    c.detector_optimizer.steps = 6;
    c.detector_optimizer.batch_size = 2;
    c.descriptor_optimizer.steps = 4;
    c.descriptor_optimizer.batch_size = 3;
    c
}

fn bytes(dir: &Path) -> Vec<u8> {
    let mut b = fs::read(dir.join(MANIFEST_FILE)).unwrap();
    b.extend(fs::read(dir.join(BLOB_FILE)).unwrap());
    b
}

#[test]
fn detector_runs_are_reproducible() {
    let cfg = tiny();
    let a = train_detector(&cfg, None).unwrap();
    let b = train_detector(&cfg, None).unwrap();
    assert_eq!(a.report.steps, b.report.steps);
    assert_eq!(a.report.metrics, b.report.metrics);

    let mut other = cfg.clone();
    other.seed = 1;
    let c = train_detector(&other, None).unwrap();
    assert_ne!(a.report.losses(), c.report.losses());
}

#[test]
fn descriptor_runs_are_reproducible() {
    let cfg = tiny();
    let a = train_descriptor(&cfg, None).unwrap();
    let b = train_descriptor(&cfg, None).unwrap();
    assert_eq!(a.report.steps, b.report.steps);
    assert_eq!(a.report.metrics, b.report.metrics);
}

#[test]
fn zero_steps_saves_the_initialization() {
    let mut cfg = tiny();
    cfg.detector_optimizer.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let t = train_detector(&cfg, Some(dir.path())).unwrap();
    assert!(t.report.steps.is_empty());
    let (manifest, store) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(manifest.step, 0);
    assert_eq!(store.len(), t.store.len());
    for (_, name, want) in t.store.iter() {
        let got = store.get(store.id(name).unwrap());
        assert!(want.data().iter().map(|&v| v as f32).eq(got.data().iter().map(|&v| v as f32)), "{name}");
    }
    assert!(!dir.path().join("loss.svg").exists());
}

#[test]
fn run_directory_layout() {
    let mut cfg = tiny();
    cfg.detector_optimizer.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    train_detector(&cfg, Some(dir.path())).unwrap();
    for f in ["config.toml", "report.json", "steps.jsonl", "loss.svg", "checkpoint/manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(dir.path().join("checkpoints/step_000002").exists());
    assert!(dir.path().join("checkpoints/step_000004").exists());
    let saved = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
    let lines = fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), cfg.detector_optimizer.steps);
}

#[test]
fn evaluation_leaves_checkpoints_untouched() {
    let cfg = tiny();
    let det = tempfile::tempdir().unwrap();
    let desc = tempfile::tempdir().unwrap();
    train_detector(&cfg, Some(det.path())).unwrap();
    train_descriptor(&cfg, Some(desc.path())).unwrap();
    let ck = Checkpoints { detector: Some(det.path().join("checkpoint")), descriptor: Some(desc.path().join("checkpoint")) };
    let before = (bytes(&det.path().join("checkpoint")), bytes(&desc.path().join("checkpoint")));
    let a = evaluate(&cfg, &ck).unwrap();
    let b = evaluate(&cfg, &ck).unwrap();
    let after = (bytes(&det.path().join("checkpoint")), bytes(&desc.path().join("checkpoint")));
    assert_eq!(before, after);
    assert_eq!(a.metrics, b.metrics);
    assert!(a.metrics.target_recall.is_some());
    assert!(a.metrics.recall_at_1.is_some());
    assert!(a.metrics.tracking.is_some());
}

#[test]
fn tracking_from_checkpoints() {
    let cfg = tiny();
    let det = tempfile::tempdir().unwrap();
    let desc = tempfile::tempdir().unwrap();
    train_detector(&cfg, Some(det.path())).unwrap();
    train_descriptor(&cfg, Some(desc.path())).unwrap();
    let (d, ds) = load_detector(&cfg, &det.path().join("checkpoint")).unwrap();
    let (e, es) = load_descriptor(&cfg, &desc.path().join("checkpoint")).unwrap();
    let frames = evaluation_sequence(&cfg, 3).unwrap();
    assert_eq!(frames.len(), cfg.evaluation.sequence_frames);
    let with_det = run_tracking(&cfg, Some((&d, &ds)), (&e, &es), EmbeddingSource::Descriptor, &frames, 3).unwrap();
    assert_eq!(with_det.log.len(), frames.len());
    let oracle = run_tracking(&cfg, None, (&e, &es), EmbeddingSource::Random, &frames, 3).unwrap();
    assert_eq!(oracle.log.len(), frames.len());
    assert!((0.0..=1.0).contains(&oracle.metrics.match_recall));
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let cfg = tiny();
    let det = tempfile::tempdir().unwrap();
    train_detector(&cfg, Some(det.path())).unwrap();
    assert!(load_descriptor(&cfg, &det.path().join("checkpoint")).is_err());
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let mut cfg = tiny();
    cfg.detector_optimizer.learning_rate = 1e12;
    cfg.detector_optimizer.steps = 50;
    let dir = tempfile::tempdir().unwrap();
    match train_detector(&cfg, Some(dir.path())) {
        Err(ForgeError::Divergence { step, last_good_step }) => {
            assert!(step > 0 && step < 50);
            let (m, store) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
            assert_eq!(m.step, last_good_step);
            assert!(store.all_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.report.steps.len())),
    }
}

#[test]
fn smoothed_loss_decreases_on_a_short_run() {
    let mut cfg = tiny();
    cfg.datagen.n_source = 32;
    cfg.detector_optimizer.steps = 150;
    cfg.detector_optimizer.batch_size = 4;
    cfg.ablation.adapt_enabled = false;
    let t = train_detector(&cfg, None).unwrap();
    let s = smoothed(&t.report.losses(), 25);
    assert!(s[s.len() - 1] < s[24], "{} -> {}", s[24], s[s.len() - 1]);
}

#[test]
fn config_rejects_unknown_fields_and_round_trips() {
    let cfg = tiny();
    let text = cfg.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap().hash(), cfg.hash());
    let bad = format!("{text}\n[extra]\nx = 1\n");
    assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ForgeError::Config(_))));
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(other.hash(), cfg.hash());
}
