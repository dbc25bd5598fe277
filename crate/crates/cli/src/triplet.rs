//! `cnc triplet build`: derive synthetic image triplets from a dataset,
//! re-running the analytic oracles from stored seeds.

use std::path::PathBuf;

use anyhow::Result;
use cnc_core::triplets::{
    build_triplet, ConditionKind, Inpainter, MeanFillInpainter, OracleInpainter, TripletOptions,
};

use crate::manifest::{ManifestBuilder, OutputLock, RunManifest, StagedDir};
use crate::store::{self, SceneEntry, SplitManifest, TripletStoreManifest};
use crate::util::field_error;

#[derive(Debug, Clone)]
pub struct TripletBuildArgs {
    pub dataset: PathBuf,
    pub backend: String,
    pub condition: String,
    pub out: PathBuf,
    pub dilation_radius: Option<i32>,
}

pub fn run(args: &TripletBuildArgs) -> Result<RunManifest> {
    let kind = ConditionKind::from_name(&args.condition)
        .ok_or_else(|| field_error("condition", "must be `depth` or `edge`"))?;
    if args.backend != "oracle" && args.backend != "mean-fill" {
        return Err(field_error("backend", "must be `oracle` or `mean-fill`"));
    }
    store::ensure_dataset(&args.dataset)?;
    let dataset = store::read_dataset_manifest(&args.dataset)?;
    let radius = args
        .dilation_radius
        .unwrap_or_else(|| cnc_core::triplets::default_dilation_radius(dataset.resolution));
    if radius < 0 {
        return Err(field_error("dilation-radius", "must be >= 0"));
    }

    let _lock = OutputLock::acquire(&args.out)?;
    let staged = StagedDir::begin(&args.out)?;
    let mut mb = ManifestBuilder::new(crate::manifest::sha256_hex(
        format!("triplet-build:{}:{}:{}", args.backend, args.condition, radius).as_bytes(),
    ));
    mb.input("dataset", &args.dataset)?;
    mb.seed("dataset_master", dataset.master_seed);

    let opts = TripletOptions { condition_kind: kind, dilation_radius: Some(radius) };
    let mut splits = Vec::new();
    let mut artifact_paths = Vec::new();
    for split in &dataset.splits {
        let samples = store::rerender_split(&dataset, &split.split)?;
        let mut entries = Vec::with_capacity(samples.len());
        for (entry, sample) in split.entries.iter().zip(&samples) {
            let triplet = match args.backend.as_str() {
                "oracle" => {
                    let inp = OracleInpainter::for_sample(sample);
                    build_triplet(sample, &inp, &opts)?
                }
                _ => {
                    let inp = MeanFillInpainter;
                    let _ = inp.info();
                    build_triplet(sample, &inp, &opts)?
                }
            };
            let dir = store::split_dir(staged.path(), &split.split, entry.id);
            let files = store::write_triplet(&dir, &triplet)?;
            for f in &files {
                artifact_paths.push(format!("{}/{:05}/{f}", split.split, entry.id));
            }
            entries.push(SceneEntry {
                id: entry.id,
                scene_seed: entry.scene_seed,
                prompt: triplet.prompt.clone(),
                files,
            });
        }
        splits.push(SplitManifest { split: split.split.clone(), entries });
    }
    let manifest = TripletStoreManifest {
        condition_kind: kind.name().to_string(),
        backend: args.backend.clone(),
        dilation_radius: radius,
        resolution: dataset.resolution,
        dataset_master_seed: dataset.master_seed,
        splits,
    };
    std::fs::write(staged.path().join("triplets.json"), serde_json::to_vec_pretty(&manifest)?)?;
    artifact_paths.push("triplets.json".to_string());

    let out = staged.promote()?;
    for rel in &artifact_paths {
        mb.artifact(&out.join(rel));
    }
    let m = mb.write(&out, "run_manifest.json", 0)?;
    println!(
        "triplets: backend={} condition={} radius={} -> {}",
        args.backend,
        kind.name(),
        radius,
        out.display()
    );
    Ok(m)
}
