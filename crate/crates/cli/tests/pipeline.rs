//! End-to-end pipeline smoke at tiny scale: dataset -> triplets -> one
//! training stage -> sampling -> eval, plus binary exit-code contracts.

use std::path::{Path, PathBuf};
use std::process::Command;

use cnc_cli::{dataset, evalcmd, samplecmd, store, traincmd, triplet};
use cnc_core::backbone::{CodecMode, LatentCodec, UNetConfig};
use cnc_core::trainer::{StageSpec, TrainerConfig};

fn tiny_trainer_config(seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig {
        unet: UNetConfig {
            encoder_blocks: 4,
            base_channels: 8,
            channel_mults: [1, 1, 2, 2],
            attention_levels: vec![2, 3],
            transformer_per_block: false,
            heads: 2,
            ffn_mult: 2,
            codec: LatentCodec { mode: CodecMode::Identity, pixel_res: 32 },
            time_dim: 16,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    for spec in [
        &mut cfg.stages.prior,
        &mut cfg.stages.local,
        &mut cfg.stages.global,
        &mut cfg.stages.finetune,
    ] {
        *spec = StageSpec { epochs: 1, batch_size: 8, ..spec.clone() };
    }
    cfg
}

fn write_config(dir: &Path, trainer: TrainerConfig) -> PathBuf {
    let cfg = cnc_cli::config::ExperimentConfig {
        trainer,
        sampler: Default::default(),
        triplets: None,
        out: None,
    };
    let p = dir.join("exp.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let m = dataset::run(&dataset::DatasetGenArgs {
        seed: 5,
        count: 12,
        resolution: 32,
        out: scenes.clone(),
    })
    .unwrap();
    assert!(scenes.join("dataset.json").exists());
    assert!(m.artifacts.iter().any(|a| a.ends_with("dataset.json")));
    // every split directory listed in the manifest exists on disk
    for a in &m.artifacts {
        assert!(Path::new(a).exists(), "manifest lists missing artifact {a}");
    }

    let triplets = dir.path().join("triplets");
    triplet::run(&triplet::TripletBuildArgs {
        dataset: scenes.clone(),
        backend: "oracle".into(),
        condition: "depth".into(),
        out: triplets.clone(),
        dilation_radius: None,
    })
    .unwrap();
    let loaded = store::load_triplets(&triplets, "train").unwrap();
    assert_eq!(loaded.len(), 12);
    for t in &loaded {
        t.validate().unwrap();
    }

    let runs = dir.path().join("runs");
    let config_path = write_config(dir.path(), tiny_trainer_config(3));
    let prior = traincmd::run(&traincmd::TrainArgs {
        config: Some(config_path.clone()),
        stage: Some("prior".into()),
        resume: None,
        seed: None,
        triplets: Some(triplets.clone()),
        out: Some(runs.clone()),
    })
    .unwrap();
    assert!(prior.checkpoint.exists());
    assert!(runs.join("prior.log.jsonl").exists());
    // log lines parse and carry the schema fields
    let log = std::fs::read_to_string(runs.join("prior.log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "stage", "loss", "lr", "wall_time"] {
        assert!(first.get(key).is_some(), "log line missing {key}");
    }

    let local = traincmd::run(&traincmd::TrainArgs {
        config: Some(config_path.clone()),
        stage: Some("local".into()),
        resume: Some(prior.checkpoint.clone()),
        seed: None,
        triplets: Some(triplets.clone()),
        out: Some(runs.clone()),
    })
    .unwrap();

    // sampling from the local checkpoint with file conditions
    let sample_dir = store::split_dir(&triplets, "test", 0);
    let out_png = dir.path().join("grid.png");
    samplecmd::run(&samplecmd::SampleArgs {
        checkpoint: Some(local.checkpoint.clone()),
        fg_cond: Some(sample_dir.join("fg_cond.png")),
        bg_cond: Some(sample_dir.join("bg_cond.png")),
        mask: Some(sample_dir.join("mask.png")),
        prompt: Some("red circle on navy background".into()),
        steps: 2,
        cfg: 1.0,
        out: Some(out_png.clone()),
        ..Default::default()
    })
    .unwrap();
    assert!(out_png.exists());

    // ordering suite end to end (no dataset needed)
    let report = dir.path().join("ordering.json");
    evalcmd::run(&evalcmd::EvalArgs {
        checkpoint: Some(local.checkpoint.clone()),
        suite: Some("ordering".into()),
        n: 4,
        dataset: None,
        out: Some(report.clone()),
        steps: 2,
        cfg: 1.0,
        seed: 0,
        estimator_cache: None,
        lambda_grid: vec![1.0],
    })
    .unwrap();
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["suite"], "ordering");
    assert!(rep["metrics"]["occlusion_accuracy"]["mean"].as_f64().is_some());

    // lambda sweep with a degenerate grid matches a direct call shape-wise
    let sweep = dir.path().join("sweep.json");
    evalcmd::run(&evalcmd::EvalArgs {
        checkpoint: Some(local.checkpoint),
        suite: Some("lambda-sweep".into()),
        n: 2,
        dataset: Some(scenes.clone()),
        out: Some(sweep.clone()),
        steps: 2,
        cfg: 1.0,
        seed: 0,
        estimator_cache: None,
        lambda_grid: vec![1.0],
    })
    .unwrap();
    assert!(dir.path().join("lambda_sweep.csv").exists());
}

#[test]
fn dataset_gen_is_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str| {
        let out = dir.path().join(name);
        dataset::run(&dataset::DatasetGenArgs {
            seed: 9,
            count: 6,
            resolution: 32,
            out: out.clone(),
        })
        .unwrap();
        // exclude run manifests (they embed the output path)
        std::fs::remove_file(out.join("run_manifest.json")).unwrap();
        cnc_cli::manifest::hash_dir(&out).unwrap()
    };
    assert_eq!(mk("a"), mk("b"));
}

#[test]
fn locked_output_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scenes");
    let _lock = cnc_cli::manifest::OutputLock::acquire(&out).unwrap();
    let err = dataset::run(&dataset::DatasetGenArgs {
        seed: 0,
        count: 4,
        resolution: 32,
        out,
    })
    .unwrap_err();
    assert!(err.to_string().contains("locked"));
}

// ---- binary-level exit-code contracts ----

fn cnc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cnc"))
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = cnc().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.to_lowercase().contains("usage"), "stderr: {text}");
}

#[test]
fn unknown_flag_exits_2() {
    let out = cnc().args(["dataset", "gen", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_validation_error_exit_1() {
    let out = cnc().args(["sample", "--out", "/tmp/never.png"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("checkpoint"), "stderr must name the field: {text}");
}

#[test]
fn dataset_gen_smoke_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = cnc()
        .args([
            "dataset",
            "gen",
            "--seed",
            "0",
            "--count",
            "10",
            "--resolution",
            "32",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let manifest = store::read_dataset_manifest(&out_dir).unwrap();
    let train = manifest.splits.iter().find(|s| s.split == "train").unwrap();
    assert_eq!(train.entries.len(), 10);
    assert!(out_dir.join("run_manifest.json").exists());
}

#[test]
fn invalid_field_validation_exits_1_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = cnc()
        .args(["dataset", "gen", "--resolution", "30", "--count", "2", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("resolution"), "stderr: {text}");
}
