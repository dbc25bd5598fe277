//! `cnc sample`: conditional DDIM sampling from file-based conditions.

use std::path::PathBuf;

use anyhow::Result;
use cnc_core::diffusion::{ddim_sample_batch, ConditionSet, DropFlags, SampleRequest, SamplerOptions};
use cnc_core::global_conditioning::SoftGuidanceMode;
use cnc_core::tensor::Tensor;
use cnc_core::toy_world::BACKGROUND_DEPTH;

use crate::manifest::{ManifestBuilder, RunManifest};
use crate::pngio;
use crate::util::{field_error, load_model, parse_prompt, require};

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: Option<PathBuf>,
    pub fg_cond: Option<PathBuf>,
    pub bg_cond: Option<PathBuf>,
    pub fg_exemplar: Option<PathBuf>,
    pub bg_exemplar: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub prompt: Option<String>,
    pub steps: usize,
    pub cfg: f32,
    pub lambda_fg: f32,
    pub lambda_bg: f32,
    pub seed: u64,
    pub count: usize,
    pub out: Option<PathBuf>,
    pub soft_guidance_mode: String,
    pub fg_depth_version: String,
}

impl Default for SampleArgs {
    fn default() -> Self {
        SampleArgs {
            checkpoint: None,
            fg_cond: None,
            bg_cond: None,
            fg_exemplar: None,
            bg_exemplar: None,
            mask: None,
            prompt: None,
            steps: 50,
            cfg: 7.0,
            lambda_fg: 1.0,
            lambda_bg: 1.0,
            seed: 0,
            count: 1,
            out: None,
            soft_guidance_mode: "additive".into(),
            fg_depth_version: "foreground".into(),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<SoftGuidanceMode> {
    match s {
        "additive" => Ok(SoftGuidanceMode::Additive),
        "hadamard" => Ok(SoftGuidanceMode::Hadamard),
        _ => Err(field_error("soft-guidance-mode", "must be `additive` or `hadamard`")),
    }
}

/// Threshold a foreground condition map just above the background floor.
pub fn mask_from_condition(fg_cond: &Tensor<f32>) -> Tensor<f32> {
    fg_cond.map(|v| if v > BACKGROUND_DEPTH + 0.01 { 1.0 } else { 0.0 })
}

pub fn run(args: &SampleArgs) -> Result<(RunManifest, PathBuf)> {
    let checkpoint = require(args.checkpoint.clone(), "checkpoint")?;
    let out = require(args.out.clone(), "out")?;
    let mode = parse_mode(&args.soft_guidance_mode)?;
    if args.count == 0 {
        return Err(field_error("count", "must be at least 1"));
    }

    let loaded = load_model(&checkpoint)?;
    let px = loaded.config.unet.codec.pixel_res;
    let mut mb = ManifestBuilder::new(loaded.config.unet.architecture_hash());
    mb.input("checkpoint", &checkpoint)?;
    mb.seed("sample", args.seed);

    let load_map = |p: &Option<PathBuf>, field: &str| -> Result<Option<Tensor<f32>>> {
        match p {
            None => Ok(None),
            Some(path) => {
                let t = pngio::load_gray16(path)?;
                if t.shape() != [px, px] {
                    return Err(field_error(field, &format!("must be {px}x{px}")));
                }
                Ok(Some(t))
            }
        }
    };
    let mut fg_cond = load_map(&args.fg_cond, "fg-cond")?;
    let bg_cond = load_map(&args.bg_cond, "bg-cond")?;
    for (label, p) in [("fg_cond", &args.fg_cond), ("bg_cond", &args.bg_cond)] {
        if let Some(path) = p {
            mb.input(label, path)?;
        }
    }

    let mask = match &args.mask {
        Some(path) => {
            mb.input("mask", path)?;
            let m = pngio::load_mask8(path)?;
            if m.shape() != [px, px] {
                return Err(field_error("mask", &format!("must be {px}x{px}")));
            }
            m
        }
        None => match &fg_cond {
            Some(c) => mask_from_condition(c),
            None => Tensor::full(&[px, px], 1.0),
        },
    };

    match args.fg_depth_version.as_str() {
        "scene" | "foreground" => {}
        "masked-foreground" => {
            if let Some(c) = fg_cond.take() {
                fg_cond = Some(c.zip(&mask, |v, m| if m > 0.5 { v } else { 0.0 }));
            }
        }
        _ => {
            return Err(field_error(
                "fg-depth-version",
                "must be scene|foreground|masked-foreground",
            ))
        }
    }

    let embed = |p: &Option<PathBuf>| -> Result<Option<Tensor<f32>>> {
        match p {
            None => Ok(None),
            Some(path) => {
                let img = pngio::load_rgb8(path)?;
                Ok(Some(loaded.embedder.embed(&img)?.vector))
            }
        }
    };
    let fg_emb = embed(&args.fg_exemplar)?;
    let bg_emb = embed(&args.bg_exemplar)?;
    for (label, p) in [("fg_exemplar", &args.fg_exemplar), ("bg_exemplar", &args.bg_exemplar)] {
        if let Some(path) = p {
            mb.input(label, path)?;
        }
    }

    let emb_dim = loaded.config.unet.emb_dim;
    let cond = ConditionSet {
        drop: DropFlags {
            fg_map: fg_cond.is_none(),
            bg_map: bg_cond.is_none(),
            fg_emb: fg_emb.is_none(),
            bg_emb: bg_emb.is_none(),
            text: args.prompt.is_none(),
        },
        fg_cond: fg_cond.unwrap_or_else(|| Tensor::zeros(&[px, px])),
        bg_cond: bg_cond.unwrap_or_else(|| Tensor::zeros(&[px, px])),
        fg_embedding: fg_emb.unwrap_or_else(|| Tensor::zeros(&[emb_dim])),
        bg_embedding: bg_emb.unwrap_or_else(|| Tensor::zeros(&[emb_dim])),
        prompt: parse_prompt(args.prompt.as_deref()),
        mask,
        lambda_fg: args.lambda_fg,
        lambda_bg: args.lambda_bg,
    };
    cond.validate()?;

    let requests: Vec<SampleRequest> = (0..args.count)
        .map(|i| SampleRequest {
            cond: cond.clone(),
            seed: cnc_core::rng::seed_for(args.seed, &format!("sample/{i}")),
        })
        .collect();
    let opts = SamplerOptions { steps: args.steps, cfg_scale: args.cfg, mode };
    let images =
        ddim_sample_batch(&loaded.model, &loaded.store, &loaded.schedule, &loaded.vocab, &requests, &opts)?;

    let grid = pngio::tile_grid(&images, (args.count as f64).sqrt().ceil() as usize)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    pngio::save_rgb8(&out, &grid)?;
    mb.artifact(&out);
    let manifest_dir = out.parent().unwrap_or_else(|| std::path::Path::new("."));
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    let m = mb.write(manifest_dir, &format!("{stem}.run_manifest.json"), 0)?;
    println!(
        "sampled {} image(s), steps={} cfg={} -> {}",
        args.count,
        args.steps,
        args.cfg,
        out.display()
    );
    Ok((m, out))
}
