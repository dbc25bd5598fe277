//! `cnc eval`: reconstruction, occlusion ordering, semantic localization and
//! lambda sweeps against a trained checkpoint.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use cnc_core::diffusion::{ddim_sample_batch, ConditionSet, SampleRequest, SamplerOptions};
use cnc_core::eval::{
    aggregate, build_occlusion_pairs, depth_mae, lambda_sweep, occlusion_accuracy,
    semantic_localization_score, ssim, EvalReport, FgDepthVersion, MetricAggregate, OcclusionPair,
    SweepRow, SweepSample, REPORT_SCHEMA_VERSION,
};
use cnc_core::tensor::Tensor;
use cnc_core::toy_world::{DepthEstimator, RenderedSample};
use cnc_core::triplets::{build_triplet, ImageTriplet, OracleInpainter, TripletOptions};

use crate::manifest::{ManifestBuilder, RunManifest};
use crate::pngio;
use crate::store;
use crate::util::{field_error, load_model, require, LoadedModel};

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub suite: Option<String>,
    pub n: usize,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: usize,
    pub cfg: f32,
    pub seed: u64,
    pub estimator_cache: Option<PathBuf>,
    pub lambda_grid: Vec<f32>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            checkpoint: None,
            suite: None,
            n: 50,
            dataset: None,
            out: None,
            steps: 50,
            cfg: 7.0,
            seed: 0,
            estimator_cache: None,
            lambda_grid: vec![0.5, 1.0, 1.5],
        }
    }
}

/// Held-out conditions derived from one test-split sample.
pub struct EvalItem {
    pub sample: RenderedSample,
    pub triplet: ImageTriplet,
    pub cond: ConditionSet,
}

pub fn eval_items(loaded: &LoadedModel, samples: &[RenderedSample]) -> Result<Vec<EvalItem>> {
    samples
        .iter()
        .map(|s| {
            let inp = OracleInpainter::for_sample(s);
            let triplet = build_triplet(s, &inp, &TripletOptions::default())?;
            let cond = ConditionSet {
                fg_cond: triplet.fg_condition.clone(),
                bg_cond: triplet.bg_condition.clone(),
                fg_embedding: loaded.embedder.embed(&triplet.source)?.vector,
                bg_embedding: loaded.embedder.embed(&triplet.background)?.vector,
                prompt: triplet.prompt.clone(),
                mask: triplet.mask.clone(),
                lambda_fg: 1.0,
                lambda_bg: 1.0,
                drop: Default::default(),
            };
            Ok(EvalItem { sample: s.clone(), triplet, cond })
        })
        .collect()
}

fn batched_sample(
    loaded: &LoadedModel,
    conds: &[ConditionSet],
    seed: u64,
    label: &str,
    opts: &SamplerOptions,
) -> Result<Vec<Tensor<f32>>> {
    let requests: Vec<SampleRequest> = conds
        .iter()
        .enumerate()
        .map(|(i, c)| SampleRequest {
            cond: c.clone(),
            seed: cnc_core::rng::seed_for(seed, &format!("{label}/{i}")),
        })
        .collect();
    Ok(ddim_sample_batch(
        &loaded.model,
        &loaded.store,
        &loaded.schedule,
        &loaded.vocab,
        &requests,
        opts,
    )?)
}

pub struct ReconOutcome {
    pub ssim: MetricAggregate,
    pub depth_mae: MetricAggregate,
    pub estimator_val_mae: f64,
    pub per_sample: Vec<(f64, f64)>,
    pub images: Vec<Tensor<f32>>,
}

/// Reconstruct held-out images from their own triplet conditions.
pub fn run_recon_suite(
    loaded: &LoadedModel,
    items: &[EvalItem],
    estimator: &DepthEstimator,
    opts: &SamplerOptions,
    seed: u64,
) -> Result<ReconOutcome> {
    let conds: Vec<ConditionSet> = items.iter().map(|i| i.cond.clone()).collect();
    let images = batched_sample(loaded, &conds, seed, "recon", opts)?;
    let mut ssims = Vec::new();
    let mut maes = Vec::new();
    let mut per_sample = Vec::new();
    for (img, item) in images.iter().zip(items) {
        let s = ssim(img, &item.sample.image)?;
        let m = depth_mae(img, &item.sample.depth_map, estimator)?;
        ssims.push(s);
        maes.push(m);
        per_sample.push((s, m));
    }
    Ok(ReconOutcome {
        ssim: aggregate(&ssims),
        depth_mae: aggregate(&maes),
        estimator_val_mae: estimator.validation_mae,
        per_sample,
        images,
    })
}

pub struct OrderingOutcome {
    pub accuracy: f64,
    pub used: usize,
    pub pairs: Vec<OcclusionPair>,
    pub images: Vec<Tensor<f32>>,
}

pub fn run_ordering_suite(
    loaded: &LoadedModel,
    n: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<OrderingOutcome> {
    let px = loaded.config.unet.codec.pixel_res;
    let pairs = build_occlusion_pairs(seed, "eval-ordering", n, px, &loaded.embedder)?;
    let conds: Vec<ConditionSet> = pairs.iter().map(|p| p.cond.clone()).collect();
    let images = batched_sample(loaded, &conds, seed, "ordering", opts)?;
    let mut iter = images.iter();
    let mut gen = |_p: &OcclusionPair| -> cnc_core::error::Result<Tensor<f32>> {
        Ok(iter.next().expect("one image per pair").clone())
    };
    let (accuracy, used) = occlusion_accuracy(&mut gen, &pairs, &loaded.embedder)?;
    Ok(OrderingOutcome { accuracy, used, pairs, images })
}

pub struct SemanticsOutcome {
    pub correct: MetricAggregate,
    pub swapped: MetricAggregate,
    pub margin: MetricAggregate,
    pub gray_margin: MetricAggregate,
    pub lambda0_bitwise_invariant: bool,
    pub images: Vec<Tensor<f32>>,
}

/// Score generated images against correct and swapped exemplar pairings
/// (cutout exemplars), with a gray-image baseline margin for context, and
/// check the lambda_bg = 0 invariance to the background exemplar.
pub fn run_semantics_suite(
    loaded: &LoadedModel,
    items: &[EvalItem],
    opts: &SamplerOptions,
    seed: u64,
) -> Result<SemanticsOutcome> {
    let conds: Vec<ConditionSet> = items.iter().map(|i| i.cond.clone()).collect();
    let images = batched_sample(loaded, &conds, seed, "semantics", opts)?;
    let emb = &loaded.embedder;
    let mut correct = Vec::new();
    let mut swapped = Vec::new();
    let mut margins = Vec::new();
    let mut gray_margins = Vec::new();
    for (img, item) in images.iter().zip(items) {
        let fg_ex = &item.triplet.foreground;
        let bg_ex = &item.triplet.background;
        let c = semantic_localization_score(img, &item.triplet.mask, fg_ex, bg_ex, emb)?;
        let s = semantic_localization_score(img, &item.triplet.mask, bg_ex, fg_ex, emb)?;
        if let (Some(cv), Some(sv)) = (c.avg, s.avg) {
            correct.push(cv);
            swapped.push(sv);
            margins.push(cv - sv);
        }
        let gray = Tensor::full(&[3, img.shape()[1], img.shape()[2]], 0.5f32);
        let gc = semantic_localization_score(&gray, &item.triplet.mask, fg_ex, bg_ex, emb)?;
        let gs = semantic_localization_score(&gray, &item.triplet.mask, bg_ex, fg_ex, emb)?;
        if let (Some(a), Some(b)) = (gc.avg, gs.avg) {
            gray_margins.push(a - b);
        }
    }

    // lambda_bg = 0: the output must be bitwise invariant to the bg exemplar
    let invariance_n = items.len().min(4);
    let mut invariant = true;
    for item in items.iter().take(invariance_n) {
        let mut a = item.cond.clone();
        a.lambda_bg = 0.0;
        let mut b = a.clone();
        b.bg_embedding = loaded.embedder.embed(&item.sample.image)?.vector;
        let ia = batched_sample(loaded, std::slice::from_ref(&a), seed, "l0", opts)?;
        let ib = batched_sample(loaded, std::slice::from_ref(&b), seed, "l0", opts)?;
        if ia[0] != ib[0] {
            invariant = false;
        }
    }

    Ok(SemanticsOutcome {
        correct: aggregate(&correct),
        swapped: aggregate(&swapped),
        margin: aggregate(&margins),
        gray_margin: aggregate(&gray_margins),
        lambda0_bitwise_invariant: invariant,
        images,
    })
}

pub fn run_lambda_sweep(
    loaded: &LoadedModel,
    items: &[EvalItem],
    grid: &[f32],
    opts: &SamplerOptions,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let samples: Vec<SweepSample> = items
        .iter()
        .enumerate()
        .map(|(i, item)| SweepSample {
            cond: item.cond.clone(),
            fg_exemplar: item.triplet.foreground.clone(),
            bg_exemplar: item.triplet.background.clone(),
            seed: cnc_core::rng::seed_for(seed, &format!("sweep/{i}")),
        })
        .collect();
    Ok(lambda_sweep(
        &loaded.model,
        &loaded.store,
        &loaded.schedule,
        &loaded.vocab,
        &samples,
        grid,
        opts,
        &loaded.embedder,
    )?)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "lambda_bg,fg_sim_mean,fg_sim_std,bg_sim_mean,bg_sim_std,avg_mean,avg_std,n\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.lambda_bg,
            r.fg_sim.mean,
            r.fg_sim.std,
            r.bg_sim.mean,
            r.bg_sim.std,
            r.avg.mean,
            r.avg.std,
            r.avg.n
        ));
    }
    out
}

pub fn run(args: &EvalArgs) -> Result<(RunManifest, PathBuf)> {
    let checkpoint = require(args.checkpoint.clone(), "checkpoint")?;
    let suite = require(args.suite.clone(), "suite")?;
    let out = require(args.out.clone(), "out")?;
    if args.n == 0 {
        return Err(field_error("n", "must be at least 1"));
    }
    if !["recon", "ordering", "semantics", "lambda-sweep"].contains(&suite.as_str()) {
        return Err(field_error("suite", "must be recon|ordering|semantics|lambda-sweep"));
    }
    let loaded = load_model(&checkpoint)?;
    let opts = SamplerOptions {
        steps: args.steps,
        cfg_scale: args.cfg,
        mode: loaded.config.soft_guidance_mode,
    };
    let out_dir = out.parent().unwrap_or_else(|| std::path::Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let mut mb = ManifestBuilder::new(loaded.config.unet.architecture_hash());
    mb.input("checkpoint", &checkpoint)?;
    mb.seed("eval", args.seed);

    let mut metrics: BTreeMap<String, MetricAggregate> = BTreeMap::new();
    let mut per_sample: Vec<serde_json::Value> = Vec::new();
    let mut artifacts: Vec<PathBuf> = vec![out.clone()];

    let need_dataset = suite != "ordering";
    let items: Vec<EvalItem> = if need_dataset {
        let dataset = require(args.dataset.clone(), "dataset")?;
        store::ensure_dataset(&dataset).map_err(|e| field_error("dataset", &e.to_string()))?;
        mb.input("dataset", &dataset)?;
        let manifest = store::read_dataset_manifest(&dataset)?;
        let mut samples = store::rerender_split(&manifest, "test")?;
        if samples.len() < args.n {
            let extra = store::rerender_split(&manifest, "val")?;
            samples.extend(extra);
        }
        if samples.len() < args.n {
            return Err(field_error(
                "n",
                &format!("dataset only provides {} held-out samples", samples.len()),
            ));
        }
        samples.truncate(args.n);
        eval_items(&loaded, &samples)?
    } else {
        Vec::new()
    };

    match suite.as_str() {
        "recon" => {
            let dataset = args.dataset.clone().expect("checked above");
            let cache = args
                .estimator_cache
                .clone()
                .unwrap_or_else(|| out_dir.join("depth_estimator.blob"));
            let estimator = crate::util::estimator_for_dataset(
                &dataset,
                &cache,
                &cnc_core::toy_world::DepthEstimatorConfig::default(),
            )?;
            artifacts.push(cache.clone());
            let rec = run_recon_suite(&loaded, &items, &estimator, &opts, args.seed)?;
            metrics.insert("ssim".into(), rec.ssim);
            metrics.insert("depth_mae".into(), rec.depth_mae);
            metrics.insert(
                "estimator_val_mae".into(),
                MetricAggregate { mean: rec.estimator_val_mae, std: 0.0, n: 1 },
            );
            for (i, (s, m)) in rec.per_sample.iter().enumerate() {
                per_sample.push(serde_json::json!({"index": i, "ssim": s, "depth_mae": m}));
            }
            // side-by-side grid: source | generated
            let mut tiles = Vec::new();
            for (item, img) in items.iter().zip(&rec.images).take(8) {
                tiles.push(item.sample.image.clone());
                tiles.push(img.clone());
            }
            let grid_path = out_dir.join("recon_grid.png");
            pngio::save_rgb8(&grid_path, &pngio::tile_grid(&tiles, 4)?)?;
            artifacts.push(grid_path);
            // qualitative depth-map version ablation on the first samples
            let mut vtiles = Vec::new();
            for item in items.iter().take(4) {
                for version in
                    [FgDepthVersion::Scene, FgDepthVersion::Foreground, FgDepthVersion::MaskedForeground]
                {
                    let mut cond = item.cond.clone();
                    cond.fg_cond = version.apply(&item.sample);
                    let img = batched_sample(
                        &loaded,
                        std::slice::from_ref(&cond),
                        args.seed,
                        "depth-version",
                        &opts,
                    )?;
                    vtiles.push(img.into_iter().next().unwrap());
                }
            }
            if !vtiles.is_empty() {
                let v_path = out_dir.join("depth_versions_grid.png");
                pngio::save_rgb8(&v_path, &pngio::tile_grid(&vtiles, 3)?)?;
                artifacts.push(v_path);
            }
        }
        "ordering" => {
            let ord = run_ordering_suite(&loaded, args.n, args.seed, &opts)?;
            metrics.insert(
                "occlusion_accuracy".into(),
                MetricAggregate { mean: ord.accuracy, std: 0.0, n: ord.used },
            );
            let mut tiles = Vec::new();
            for (p, img) in ord.pairs.iter().zip(&ord.images).take(8) {
                tiles.push(p.sample.image.clone());
                tiles.push(img.clone());
            }
            let grid_path = out_dir.join("ordering_grid.png");
            pngio::save_rgb8(&grid_path, &pngio::tile_grid(&tiles, 4)?)?;
            artifacts.push(grid_path);
        }
        "semantics" => {
            let sem = run_semantics_suite(&loaded, &items, &opts, args.seed)?;
            metrics.insert("avg_cos_correct".into(), sem.correct);
            metrics.insert("avg_cos_swapped".into(), sem.swapped);
            metrics.insert("pairing_margin".into(), sem.margin);
            metrics.insert("gray_baseline_margin".into(), sem.gray_margin);
            metrics.insert(
                "lambda0_bitwise_invariant".into(),
                MetricAggregate {
                    mean: if sem.lambda0_bitwise_invariant { 1.0 } else { 0.0 },
                    std: 0.0,
                    n: 1,
                },
            );
            let grid_path = out_dir.join("semantics_grid.png");
            pngio::save_rgb8(
                &grid_path,
                &pngio::tile_grid(&sem.images.iter().take(16).cloned().collect::<Vec<_>>(), 4)?,
            )?;
            artifacts.push(grid_path);
        }
        _ => {
            let rows = run_lambda_sweep(&loaded, &items, &args.lambda_grid, &opts, args.seed)?;
            for r in &rows {
                metrics.insert(format!("bg_sim@{}", r.lambda_bg), r.bg_sim);
                metrics.insert(format!("fg_sim@{}", r.lambda_bg), r.fg_sim);
                metrics.insert(format!("avg@{}", r.lambda_bg), r.avg);
                per_sample.push(serde_json::to_value(r)?);
            }
            let csv_path = out_dir.join("lambda_sweep.csv");
            std::fs::write(&csv_path, sweep_csv(&rows))?;
            artifacts.push(csv_path);
        }
    }

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        suite: suite.clone(),
        checkpoint_id: crate::manifest::hash_file(&checkpoint)?[..16].to_string(),
        config: serde_json::to_value(&loaded.config)?,
        metrics,
        per_sample,
    };
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    for a in &artifacts {
        mb.artifact(a);
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    let m = mb.write(&out_dir, &format!("{stem}.run_manifest.json"), 0)?;
    println!("eval suite `{suite}` -> {}", out.display());
    Ok((m, out))
}
