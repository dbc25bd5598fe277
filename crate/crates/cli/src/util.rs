//! Shared command plumbing: model loading, field validation, prompt parsing.

use std::path::Path;

use anyhow::{anyhow, Result};
use cnc_core::backbone::{ControlledUNet, UNetConfig};
use cnc_core::diffusion::DiffusionSchedule;
use cnc_core::embedders::{ImageEmbedder, Vocabulary};
use cnc_core::nn::ParamStore;
use cnc_core::toy_world::DepthEstimator;
use cnc_core::trainer::{Stage, Trainer, TrainerConfig};

/// Domain-validation failure naming the offending field path (exit code 1).
pub fn field_error(field: &str, msg: &str) -> anyhow::Error {
    anyhow!("validation error at `{field}`: {msg}")
}

pub fn require<T>(opt: Option<T>, field: &str) -> Result<T> {
    opt.ok_or_else(|| field_error(field, "required but missing"))
}

pub struct LoadedModel {
    pub model: ControlledUNet,
    pub store: ParamStore<f32>,
    pub schedule: DiffusionSchedule,
    pub vocab: Vocabulary,
    pub config: TrainerConfig,
    pub stage: Option<Stage>,
    pub embedder: ImageEmbedder,
}

pub fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    let config = Trainer::peek_config(checkpoint)?;
    let trainer = Trainer::load_checkpoint(checkpoint, &config)?;
    let stage = trainer.completed;
    let mut model = trainer.model;
    if let Some(s) = stage {
        model.set_attachment(s.attachment());
    }
    let embedder = ImageEmbedder::new(config.image_embedder_seed, config.unet.emb_dim);
    Ok(LoadedModel {
        model,
        store: trainer.store,
        schedule: trainer.schedule,
        vocab: trainer.vocab,
        config,
        stage,
        embedder,
    })
}

pub fn parse_prompt(prompt: Option<&str>) -> Vec<String> {
    prompt
        .map(|p| p.split_whitespace().map(|s| s.to_string()).collect())
        .unwrap_or_default()
}

pub fn unet_latent_summary(cfg: &UNetConfig) -> String {
    let l = cfg.codec.latent_shape();
    format!("{}x{}x{}", l[0], l[1], l[2])
}

/// Depth estimator cache: train on the dataset's train split if no cached
/// file exists, otherwise load it.
pub fn estimator_for_dataset(
    dataset: &Path,
    cache: &Path,
    config: &cnc_core::toy_world::DepthEstimatorConfig,
) -> Result<DepthEstimator> {
    if cache.exists() {
        let blobs = cnc_core::trainer::load_tensor_blobs(cache, "depth-estimator")?;
        let mut store = ParamStore::new();
        let mut mae = f64::INFINITY;
        let (fresh_store, _) = {
            let est = DepthEstimator::untrained(0);
            (est.store, ())
        };
        for (name, t) in blobs {
            if name == "__validation_mae" {
                mae = t.data()[0] as f64;
            } else {
                store.add(name, cnc_core::nn::ParamGroup::Auxiliary, t);
            }
        }
        // layout guard: same parameter names as a fresh build
        for id in fresh_store.ids() {
            let name = &fresh_store.get(id).name;
            if store.id_of(name).is_none() {
                return Err(anyhow!("estimator cache is missing parameter `{name}`"));
            }
        }
        return Ok(DepthEstimator::from_store(store, mae));
    }
    let manifest = crate::store::read_dataset_manifest(dataset)?;
    let renders = crate::store::rerender_split(&manifest, "train")?;
    let est = cnc_core::toy_world::train_depth_estimator(&renders, config)?;
    let mut items: Vec<(String, cnc_core::tensor::Tensor<f32>)> = est
        .store
        .ids()
        .map(|id| (est.store.get(id).name.clone(), est.store.tensor(id).clone()))
        .collect();
    items.push((
        "__validation_mae".to_string(),
        cnc_core::tensor::Tensor::new(&[1], vec![est.validation_mae as f32]),
    ));
    cnc_core::trainer::save_tensor_blobs(cache, "depth-estimator", &items)?;
    Ok(est)
}
