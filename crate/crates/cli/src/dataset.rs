//! `cnc dataset gen`: procedurally generate a scenes dataset with
//! train/val/test splits and a seed-carrying manifest.

use std::path::PathBuf;

use anyhow::Result;
use cnc_core::toy_world::{render_scene, sample_scene, GeneratorConfig};

use crate::manifest::{ManifestBuilder, OutputLock, RunManifest, StagedDir};
use crate::store::{self, DatasetManifest, SceneEntry, SplitManifest, SPLITS};
use crate::util::field_error;

#[derive(Debug, Clone)]
pub struct DatasetGenArgs {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub out: PathBuf,
}

pub fn split_counts(train: usize) -> [usize; 3] {
    [train, (train / 10).max(8), (train / 20).max(8)]
}

pub fn run(args: &DatasetGenArgs) -> Result<RunManifest> {
    if args.count == 0 {
        return Err(field_error("count", "must be at least 1"));
    }
    if args.resolution % 8 != 0 {
        return Err(field_error("resolution", "must be a multiple of 8"));
    }
    let generator = GeneratorConfig { canvas: args.resolution, ..Default::default() };
    generator
        .validate()
        .map_err(|e| field_error("resolution", &e.to_string()))?;

    let _lock = OutputLock::acquire(&args.out)?;
    let staged = StagedDir::begin(&args.out)?;
    let mut mb = ManifestBuilder::new(crate::manifest::sha256_hex(
        format!("dataset-gen:{}:{}:{}", args.seed, args.count, args.resolution).as_bytes(),
    ));
    mb.seed("master", args.seed);

    let counts = split_counts(args.count);
    let mut splits = Vec::new();
    let mut artifact_paths = Vec::new();
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let mut entries = Vec::with_capacity(count);
        for id in 0..count {
            let scene_seed = store::scene_seed(args.seed, split, id);
            let scene = sample_scene(scene_seed, &generator)?;
            let sample = render_scene(&scene, args.resolution)?;
            let dir = store::split_dir(staged.path(), split, id);
            let files = store::write_sample(&dir, &sample)?;
            for f in &files {
                artifact_paths.push(format!("{split}/{id:05}/{f}"));
            }
            entries.push(SceneEntry { id, scene_seed, prompt: sample.prompt.clone(), files });
        }
        splits.push(SplitManifest { split: split.to_string(), entries });
    }
    let manifest = DatasetManifest {
        resolution: args.resolution,
        master_seed: args.seed,
        generator,
        splits,
    };
    std::fs::write(staged.path().join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
    artifact_paths.push("dataset.json".to_string());

    // prompt vocabulary as a word -> id map
    let vocab: std::collections::BTreeMap<String, usize> = cnc_core::toy_world::vocabulary()
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i))
        .collect();
    std::fs::write(staged.path().join("vocab.json"), serde_json::to_vec_pretty(&vocab)?)?;
    artifact_paths.push("vocab.json".to_string());

    let out = staged.promote()?;
    for rel in &artifact_paths {
        mb.artifact(&out.join(rel));
    }
    let m = mb.write(&out, "run_manifest.json", 0)?;
    println!(
        "dataset: {} scenes at {}px -> {}",
        counts.iter().sum::<usize>(),
        args.resolution,
        out.display()
    );
    Ok(m)
}
