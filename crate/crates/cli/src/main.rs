use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forge_core::datagen::{build_dataset, load_manifest};
use forge_core::harness::{
    ab_compare, attn_maps, evaluate, load_descriptor, load_detector, run_tracking, train_descriptor, train_detector,
    write_jsonl, AblationFlags, Checkpoints, EmbeddingSource, ExperimentConfig, Study, Variant, MANIFEST_FILE,
};
use forge_core::ForgeError;

#[derive(Parser)]
#[command(name = "forge", version, about = "Synthetic landmark detection, description and tracking")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Shared {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Render the labeled source and unlabeled target scenes.
    Datagen,
    /// Train the detector, with domain adaptation unless disabled in the config.
    TrainDetector,
    /// Train the descriptor, with attention regularization unless disabled.
    TrainDescriptor,
    /// Evaluate checkpoints without touching them.
    Eval {
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        descriptor: Option<PathBuf>,
    },
    /// Track landmarks through a frame sequence.
    Track {
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        descriptor: PathBuf,
        /// Sequence manifest (`manifest.jsonl`).
        #[arg(long)]
        sequence: PathBuf,
        /// Use random embeddings instead of the descriptor.
        #[arg(long)]
        random_embeddings: bool,
    },
    /// Compare ablation variants over three seeds.
    Ab {
        #[arg(long, value_enum)]
        study: StudyArg,
    },
    /// Side-by-side spatial attention heat maps of held-out view pairs.
    AttnMaps {
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long, default_value_t = 2)]
        stage: usize,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    /// Source-only against domain-adapted detector training.
    Detector,
    /// Plain contrastive against attention-regularized descriptor training.
    Descriptor,
}

fn fail(e: &ForgeError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(record) => {
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn load_config(shared: &Shared) -> Result<ExperimentConfig, ForgeError> {
    let mut cfg = match &shared.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(shared: &Shared) -> Result<&Path, ForgeError> {
    shared.out.as_deref().ok_or_else(|| ForgeError::InvalidArgument("--out is required".into()))
}

/// A training run directory holds its checkpoint under `checkpoint/`; either
/// form is accepted.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join(MANIFEST_FILE).exists() {
        p.to_path_buf()
    } else {
        p.join("checkpoint")
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, ForgeError> {
    let cfg = load_config(&cli.shared)?;
    match cli.verb {
        Verb::Datagen => {
            let out = out_dir(&cli.shared)?;
            let m = build_dataset(&cfg.datagen, cfg.seed, out)?;
            Ok(json!({ "verb": "datagen", "records": m.records.len(), "manifest_sha256": m.checksum }))
        }
        Verb::TrainDetector => {
            let t = train_detector(&cfg, Some(out_dir(&cli.shared)?))?;
            Ok(json!({ "verb": "train-detector", "steps": t.report.steps.len(), "metrics": t.report.metrics }))
        }
        Verb::TrainDescriptor => {
            let t = train_descriptor(&cfg, Some(out_dir(&cli.shared)?))?;
            Ok(json!({ "verb": "train-descriptor", "steps": t.report.steps.len(), "metrics": t.report.metrics }))
        }
        Verb::Eval { detector, descriptor } => {
            let ck = Checkpoints {
                detector: detector.as_deref().map(checkpoint_dir),
                descriptor: descriptor.as_deref().map(checkpoint_dir),
            };
            let report = evaluate(&cfg, &ck)?;
            if let Some(out) = &cli.shared.out {
                report.write(out)?;
            }
            Ok(json!({ "verb": "eval", "metrics": report.metrics }))
        }
        Verb::Track { detector, descriptor, sequence, random_embeddings } => {
            let out = out_dir(&cli.shared)?;
            let frames = load_manifest(&sequence)?;
            let det = detector.as_deref().map(|p| load_detector(&cfg, &checkpoint_dir(p))).transpose()?;
            let (desc, store) = load_descriptor(&cfg, &checkpoint_dir(&descriptor))?;
            let source = if random_embeddings { EmbeddingSource::Random } else { EmbeddingSource::Descriptor };
            let run = run_tracking(&cfg, det.as_ref().map(|(d, s)| (d, s)), (&desc, &store), source, &frames, cfg.seed)?;
            std::fs::create_dir_all(out).map_err(|e| ForgeError::io(format!("creating {}", out.display()), e))?;
            write_jsonl(&out.join("frames.jsonl"), &run.log)?;
            write_jsonl(&out.join("metrics.jsonl"), &[run.metrics])?;
            Ok(json!({ "verb": "track", "frames": run.log.len(), "metrics": run.metrics }))
        }
        Verb::Ab { study } => {
            let (study, variants) = match study {
                StudyArg::Detector => (
                    Study::Detector,
                    vec![
                        variant("source_only", false, cfg.ablation.mars_enabled),
                        variant("uda", true, cfg.ablation.mars_enabled),
                    ],
                ),
                StudyArg::Descriptor => (
                    Study::Descriptor,
                    vec![
                        variant("baseline", cfg.ablation.adapt_enabled, false),
                        variant("mars", cfg.ablation.adapt_enabled, true),
                    ],
                ),
            };
            let cmp = ab_compare(&cfg, study, &variants, cli.shared.out.as_deref())?;
            Ok(json!({ "verb": "ab", "seeds": cmp.seeds, "rows": cmp.rows }))
        }
        Verb::AttnMaps { descriptor, stage, pairs } => {
            let out = out_dir(&cli.shared)?;
            let records = attn_maps(&cfg, &checkpoint_dir(&descriptor), out, stage, pairs)?;
            let mean = records.iter().map(|r| r.consistency).sum::<f64>() / records.len().max(1) as f64;
            Ok(json!({ "verb": "attn-maps", "pairs": records.len(), "mean_consistency": mean }))
        }
    }
}

fn variant(name: &str, adapt_enabled: bool, mars_enabled: bool) -> Variant {
    Variant { name: name.into(), ablation: AblationFlags { adapt_enabled, mars_enabled } }
}
