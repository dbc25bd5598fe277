//! On-disk dataset and triplet stores.
//!
//! Datasets: `scenes/{split}/{id}/` with lossless images (8-bit for color,
//! 16-bit gray for depth/edges) plus JSON manifests carrying seeds and
//! prompts. Because seeds are stored, downstream stages can re-derive the
//! analytic oracles exactly instead of relying on quantized pixels.
//!
//! Triplets: `triplets/{split}/{id}/` with the six named images and a JSON
//! manifest recording condition kind, backend and dilation radius.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cnc_core::tensor::Tensor;
use cnc_core::toy_world::{
    render_scene, sample_scene, GeneratorConfig, RenderedSample,
};
use cnc_core::triplets::{ConditionKind, ImageTriplet};
use serde::{Deserialize, Serialize};

use crate::pngio;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub master_seed: u64,
    pub generator: GeneratorConfig,
    pub splits: Vec<SplitManifest>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct SplitManifest {
    pub split: String,
    pub entries: Vec<SceneEntry>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct SceneEntry {
    pub id: usize,
    pub scene_seed: u64,
    pub prompt: Vec<String>,
    pub files: Vec<String>,
}

pub fn scene_seed(master: u64, split: &str, index: usize) -> u64 {
    cnc_core::rng::seed_for(master, &format!("dataset/{split}/{index}"))
}

/// Write one rendered sample into `dir` and return the file list.
pub fn write_sample(dir: &Path, sample: &RenderedSample) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        ("image.png", Kind::Rgb(&sample.image)),
        ("salient_mask.png", Kind::Mask(&sample.salient_mask)),
        ("true_background.png", Kind::Rgb(&sample.true_background)),
        ("depth_map.png", Kind::Gray16(&sample.depth_map)),
        ("edge_map.png", Kind::Gray16(&sample.edge_map)),
    ];
    let mut names = Vec::new();
    for (name, kind) in files {
        let p = dir.join(name);
        match kind {
            Kind::Rgb(t) => pngio::save_rgb8(&p, t)?,
            Kind::Mask(t) => pngio::save_mask8(&p, t)?,
            Kind::Gray16(t) => pngio::save_gray16(&p, t)?,
        }
        names.push(name.to_string());
    }
    Ok(names)
}

enum Kind<'a> {
    Rgb(&'a Tensor<f32>),
    Mask(&'a Tensor<f32>),
    Gray16(&'a Tensor<f32>),
}

pub fn read_dataset_manifest(dataset: &Path) -> Result<DatasetManifest> {
    let p = dataset.join("dataset.json");
    let bytes =
        std::fs::read(&p).with_context(|| format!("dataset manifest {} missing", p.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-render a dataset split analytically from its stored seeds.
pub fn rerender_split(
    manifest: &DatasetManifest,
    split: &str,
) -> Result<Vec<RenderedSample>> {
    let sm = manifest
        .splits
        .iter()
        .find(|s| s.split == split)
        .with_context(|| format!("split `{split}` not in dataset manifest"))?;
    sm.entries
        .iter()
        .map(|e| {
            let scene = sample_scene(e.scene_seed, &manifest.generator)?;
            Ok(render_scene(&scene, manifest.resolution)?)
        })
        .collect()
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TripletStoreManifest {
    pub condition_kind: String,
    pub backend: String,
    pub dilation_radius: i32,
    pub resolution: usize,
    pub dataset_master_seed: u64,
    pub splits: Vec<SplitManifest>,
}

pub fn write_triplet(dir: &Path, t: &ImageTriplet) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    pngio::save_rgb8(&dir.join("source.png"), &t.source)?;
    pngio::save_rgb8(&dir.join("foreground.png"), &t.foreground)?;
    pngio::save_rgb8(&dir.join("background.png"), &t.background)?;
    pngio::save_mask8(&dir.join("mask.png"), &t.mask)?;
    pngio::save_mask8(&dir.join("dilated_mask.png"), &t.dilated_mask)?;
    pngio::save_gray16(&dir.join("fg_cond.png"), &t.fg_condition)?;
    pngio::save_gray16(&dir.join("bg_cond.png"), &t.bg_condition)?;
    Ok([
        "source.png",
        "foreground.png",
        "background.png",
        "mask.png",
        "dilated_mask.png",
        "fg_cond.png",
        "bg_cond.png",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect())
}

pub fn read_triplet_manifest(dir: &Path) -> Result<TripletStoreManifest> {
    let p = dir.join("triplets.json");
    let bytes =
        std::fs::read(&p).with_context(|| format!("triplet manifest {} missing", p.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_triplet(dir: &Path, entry: &SceneEntry, kind: ConditionKind) -> Result<ImageTriplet> {
    let t = ImageTriplet {
        source: pngio::load_rgb8(&dir.join("source.png"))?,
        foreground: pngio::load_rgb8(&dir.join("foreground.png"))?,
        background: pngio::load_rgb8(&dir.join("background.png"))?,
        mask: pngio::load_mask8(&dir.join("mask.png"))?,
        dilated_mask: pngio::load_mask8(&dir.join("dilated_mask.png"))?,
        prompt: entry.prompt.clone(),
        fg_condition: pngio::load_gray16(&dir.join("fg_cond.png"))?,
        bg_condition: pngio::load_gray16(&dir.join("bg_cond.png"))?,
        condition_kind: kind,
    };
    Ok(t)
}

/// Load a triplet-store split into memory.
pub fn load_triplets(root: &Path, split: &str) -> Result<Vec<ImageTriplet>> {
    let manifest = read_triplet_manifest(root)?;
    let kind = ConditionKind::from_name(&manifest.condition_kind)
        .with_context(|| format!("unknown condition kind `{}`", manifest.condition_kind))?;
    let sm = manifest
        .splits
        .iter()
        .find(|s| s.split == split)
        .with_context(|| format!("split `{split}` not in triplet store"))?;
    sm.entries
        .iter()
        .map(|e| load_triplet(&root.join(split).join(format!("{:05}", e.id)), e, kind))
        .collect()
}

pub fn split_dir(root: &Path, split: &str, id: usize) -> PathBuf {
    root.join(split).join(format!("{id:05}"))
}

/// Sanity guard used by commands that consume a dataset directory.
pub fn ensure_dataset(path: &Path) -> Result<()> {
    if !path.join("dataset.json").exists() {
        bail!("{} does not look like a dataset (dataset.json missing)", path.display());
    }
    Ok(())
}
