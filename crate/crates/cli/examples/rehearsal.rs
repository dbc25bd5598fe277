// Scaled-down curriculum rehearsal: checks that the ordering / semantics /
// reconstruction metrics move in the right direction before the full run.
use cnc_cli::*;
use cnc_core::trainer::{StageSpec, TrainerConfig};
use std::time::Instant;

fn main() -> anyhow::Result<()> {
    let root = std::path::PathBuf::from("/tmp/cnc-rehearsal");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root)?;
    let t0 = Instant::now();

    let scenes = root.join("scenes");
    dataset::run(&dataset::DatasetGenArgs { seed: 11, count: 520, resolution: 32, out: scenes.clone() })?;
    let trips = root.join("triplets");
    triplet::run(&triplet::TripletBuildArgs {
        dataset: scenes.clone(), backend: "oracle".into(), condition: "depth".into(),
        out: trips.clone(), dilation_radius: None,
    })?;
    println!("[{:.0}s] data ready", t0.elapsed().as_secs_f64());

    let mut tc = TrainerConfig::default();
    tc.seed = 11;
    tc.stages.prior = StageSpec { epochs: 8, ..tc.stages.prior.clone() };
    tc.stages.local = StageSpec { epochs: 6, ..tc.stages.local.clone() };
    tc.stages.global = StageSpec { epochs: 6, ..tc.stages.global.clone() };
    tc.stages.finetune = StageSpec { epochs: 2, ..tc.stages.finetune.clone() };
    let cfg = config::ExperimentConfig { trainer: tc, sampler: Default::default(), triplets: Some(trips.clone()), out: None };
    let cfg_path = root.join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg)?)?;

    let runs = root.join("runs");
    let mut resume = None;
    for stage in ["prior", "local", "global", "finetune"] {
        let out = traincmd::run(&traincmd::TrainArgs {
            config: Some(cfg_path.clone()), stage: Some(stage.into()), resume: resume.clone(),
            seed: None, triplets: Some(trips.clone()), out: Some(runs.clone()),
        })?;
        println!("[{:.0}s] stage {stage}: loss {:.4} -> {:.4} in {:.0}s",
            t0.elapsed().as_secs_f64(), out.start_loss, out.end_loss, out.wall_seconds);
        resume = Some(out.checkpoint.clone());

        if stage == "local" {
            let report = root.join("ordering_local.json");
            evalcmd::run(&evalcmd::EvalArgs {
                checkpoint: Some(out.checkpoint.clone()), suite: Some("ordering".into()), n: 20,
                dataset: None, out: Some(report.clone()), steps: 15, cfg: 7.0, seed: 0,
                estimator_cache: None, lambda_grid: vec![1.0],
            })?;
            let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&report)?)?;
            println!("[{:.0}s] ordering after local: {}", t0.elapsed().as_secs_f64(), rep["metrics"]["occlusion_accuracy"]["mean"]);
        }
    }
    let final_ckpt = resume.unwrap();

    for (suite, n) in [("ordering", 20), ("semantics", 20), ("lambda-sweep", 12), ("recon", 20)] {
        let report = root.join(format!("{suite}.json"));
        evalcmd::run(&evalcmd::EvalArgs {
            checkpoint: Some(final_ckpt.clone()), suite: Some(suite.into()), n,
            dataset: Some(scenes.clone()), out: Some(report.clone()), steps: 15, cfg: 7.0, seed: 0,
            estimator_cache: Some(root.join("est.blob")), lambda_grid: vec![0.0, 0.5, 1.0, 1.5],
        })?;
        let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&report)?)?;
        println!("[{:.0}s] {suite}: {}", t0.elapsed().as_secs_f64(), serde_json::to_string(&rep["metrics"])?);
    }
    println!("[{:.0}s] rehearsal done", t0.elapsed().as_secs_f64());
    Ok(())
}
