//! `cnc train`: run one curriculum stage with line-JSON step logs and
//! atomic checkpoints.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cnc_core::trainer::{train_items_from_triplets, Stage, Trainer};

use crate::config::ExperimentConfig;
use crate::manifest::{ManifestBuilder, OutputLock, RunManifest};
use crate::store;
use crate::util::{field_error, require};

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub stage: Option<String>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub triplets: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub checkpoint: PathBuf,
    pub start_loss: f64,
    pub end_loss: f64,
    pub wall_seconds: f64,
}

pub fn run(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    // flags win over the config document
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(p) = &args.triplets {
        cfg.triplets = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.out = Some(p.clone());
    }
    let stage_name = require(args.stage.as_deref(), "stage")?;
    let stage = Stage::from_name(stage_name)
        .ok_or_else(|| field_error("stage", "must be prior|local|global|finetune"))?;
    let triplets_dir = require(cfg.triplets.clone(), "triplets")?;
    let out = require(cfg.out.clone(), "out")?;
    cfg.trainer.validate().map_err(|e| field_error("trainer", &e.to_string()))?;

    std::fs::create_dir_all(&out)?;
    let _lock = OutputLock::acquire(&out.join(format!("stage-{}", stage.name())))?;
    let mut mb = ManifestBuilder::new(cfg.config_hash()?);
    mb.input("triplets", &triplets_dir)?;
    mb.seed("trainer", cfg.trainer.seed);

    let triplets = store::load_triplets(&triplets_dir, "train")?;
    let embedder = cnc_core::embedders::ImageEmbedder::new(
        cfg.trainer.image_embedder_seed,
        cfg.trainer.unet.emb_dim,
    );
    let items = train_items_from_triplets(&triplets, &cfg.trainer, &embedder)?;

    let mut trainer = match (&args.resume, stage) {
        (None, Stage::Prior) => Trainer::fresh(cfg.trainer.clone())?,
        (None, other) => {
            return Err(anyhow::anyhow!(
                "staging error: stage `{}` requires --resume with the `{}` checkpoint",
                other.name(),
                other.prerequisite().map(|s| s.name()).unwrap_or("prior")
            ))
        }
        (Some(path), _) => {
            mb.input("resume", path)?;
            Trainer::load_checkpoint(path, &cfg.trainer)?
        }
    };

    // stage outputs are quarantined until the stage completes
    let tmp = out.join(format!(".tmp-{}-{}", stage.name(), std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    let log_path = tmp.join(format!("{}.log.jsonl", stage.name()));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let report = trainer.run_stage(
        stage,
        &items,
        |step| {
            let line = serde_json::to_string(step).expect("step log serializes");
            writeln!(log, "{line}").expect("log write");
        },
        Some(&tmp),
    )?;
    log.flush()?;
    drop(log);

    let ckpt_tmp = tmp.join(format!("{}-final.ckpt", stage.name()));
    trainer.save_checkpoint(&ckpt_tmp)?;

    // promote stage artifacts
    let mut artifacts = Vec::new();
    for entry in std::fs::read_dir(&tmp)? {
        let p = entry?.path();
        let name = p.file_name().unwrap().to_owned();
        let dst = out.join(&name);
        std::fs::rename(&p, &dst).with_context(|| format!("promoting {}", dst.display()))?;
        artifacts.push(dst);
    }
    std::fs::remove_dir(&tmp)?;
    for a in &artifacts {
        mb.artifact(a);
    }
    let manifest = mb.write(&out, &format!("{}.run_manifest.json", stage.name()), 0)?;
    let checkpoint = out.join(format!("{}-final.ckpt", stage.name()));
    println!(
        "stage {}: {} steps, smoothed loss {:.4} -> {:.4}, {:.1}s, checkpoint {}",
        stage.name(),
        report.losses.len(),
        report.start_loss,
        report.end_loss,
        report.wall_seconds,
        checkpoint.display()
    );
    Ok(TrainOutcome {
        manifest,
        checkpoint,
        start_loss: report.start_loss,
        end_loss: report.end_loss,
        wall_seconds: report.wall_seconds,
    })
}
