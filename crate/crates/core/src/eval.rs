//! Desk-scale evaluation: structural similarity, depth fidelity, occlusion
//! ordering of overlapping condition pairs, and semantic-localization
//! scoring with lambda sweeps.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::backbone::ControlledUNet;
use crate::diffusion::{
    ddim_sample_batch, ConditionSet, DiffusionSchedule, SampleRequest, SamplerOptions,
};
use crate::embedders::{cosine_similarity, ImageEmbedder, Vocabulary};
use crate::error::{CncError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::toy_world::{
    background_depth_oracle, foreground_depth_oracle, render_scene, sample_scene, shade,
    DepthEstimator, GeneratorConfig, ObjectStyle, RenderedSample, SceneObject, Shape, ToyScene,
};

// ---- structural similarity ----

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn luma(image: &Tensor<f32>) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    (0..h * w)
        .map(|p| {
            0.299 * d[p] as f64 + 0.587 * d[h * w + p] as f64 + 0.114 * d[2 * h * w + p] as f64
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -half..=half {
        for x in -half..=half {
            k.push((-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid window positions of the luma channels; Gaussian
/// 7x7 window with sigma 1.5 and the standard stability constants for a
/// unit dynamic range.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CncError::shape(format!(
            "ssim inputs disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape().len() != 3 || a.shape()[0] != 3 {
        return Err(CncError::shape("ssim expects [3,H,W] images"));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CncError::shape("image smaller than the ssim window"));
    }
    let (la, lb) = (luma(a), luma(b));
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=(h - SSIM_WINDOW) {
        for x in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            let mut wi = 0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let va = la[(y + dy) * w + x + dx];
                    let vb = lb[(y + dy) * w + x + dx];
                    let wt = win[wi];
                    wi += 1;
                    mx += wt * va;
                    my += wt * vb;
                    mxx += wt * va * va;
                    myy += wt * vb * vb;
                    mxy += wt * va * vb;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean absolute error between the estimator's depth of a generated image
/// and the ground-truth depth map.
pub fn depth_mae(
    generated: &Tensor<f32>,
    gt_depth: &Tensor<f32>,
    estimator: &DepthEstimator,
) -> Result<f64> {
    if !estimator.validation_mae.is_finite() {
        return Err(CncError::State("depth estimator has not been trained".into()));
    }
    let pred = estimator.predict(generated)?;
    if pred.shape() != gt_depth.shape() {
        return Err(CncError::shape("depth map resolution mismatch"));
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt_depth.data())
        .map(|(&p, &t)| (p - t).abs() as f64)
        .sum::<f64>()
        / n)
}

// ---- occlusion ordering ----

/// A held-out two-object scene with a guaranteed overlap region between the
/// near (salient) and far object.
#[derive(Clone, Debug)]
pub struct OcclusionPair {
    pub scene: ToyScene,
    pub sample: RenderedSample,
    pub cond: ConditionSet,
    /// Binary overlap-region indicator at pixel resolution.
    pub overlap: Tensor<f32>,
    pub fg_style: ObjectStyle,
    pub fg_z: f32,
    pub bg_style: ObjectStyle,
    pub bg_z: f32,
}

/// Deterministically construct overlapping two-object pairs with distinct
/// colors. Pairs whose overlap would be empty are resampled.
pub fn build_occlusion_pairs(
    master_seed: u64,
    label: &str,
    n: usize,
    resolution: usize,
    embedder: &ImageEmbedder,
) -> Result<Vec<OcclusionPair>> {
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let seed = crate::rng::seed_for(master_seed, &format!("{label}/occl/{attempt}"));
        attempt += 1;
        if attempt > (n as u64) * 200 {
            return Err(CncError::argument("could not construct enough overlapping pairs"));
        }
        let mut rng = crate::rng::rng_for(seed, "occlusion-pair");
        use rand::Rng as _;
        let c = resolution as f32;
        let fg_color = rng.gen_range(0..crate::toy_world::OBJECT_COLORS.len());
        let bg_color = loop {
            let cc = rng.gen_range(0..crate::toy_world::OBJECT_COLORS.len());
            if cc != fg_color {
                break cc;
            }
        };
        let fg_z = rng.gen_range(0.2f32..0.4);
        let bg_z = rng.gen_range(0.6f32..0.9);
        let center = (rng.gen_range(0.38 * c..0.62 * c), rng.gen_range(0.38 * c..0.62 * c));
        let offset = (rng.gen_range(-0.15 * c..0.15 * c), rng.gen_range(-0.15 * c..0.15 * c));
        let mk = |shape: Shape, center: (f32, f32), z: f32, color: usize, tex: usize| SceneObject {
            shape,
            center,
            size: (0.38 * c * (1.3 - 0.6 * z)).max(3.0),
            z,
            style: ObjectStyle { color, texture: tex },
        };
        let shapes = Shape::ALL;
        let far = mk(
            shapes[rng.gen_range(0..3)],
            (center.0 + offset.0, center.1 + offset.1),
            bg_z,
            bg_color,
            rng.gen_range(0..crate::toy_world::TEXTURES.len()),
        );
        let near = mk(
            shapes[rng.gen_range(0..3)],
            center,
            fg_z,
            fg_color,
            rng.gen_range(0..crate::toy_world::TEXTURES.len()),
        );
        let scene = ToyScene {
            background_style: rng.gen_range(0..crate::toy_world::BACKGROUND_STYLES.len()),
            objects: vec![far.clone(), near.clone()],
            seed,
            canvas: resolution,
        };
        if scene.validate().is_err() {
            continue;
        }
        let mut overlap = Tensor::zeros(&[resolution, resolution]);
        let mut count = 0;
        for y in 0..resolution {
            for x in 0..resolution {
                if near.covers(x, y) && far.covers(x, y) {
                    overlap.data_mut()[y * resolution + x] = 1.0;
                    count += 1;
                }
            }
        }
        // require a classifiable region
        if count < 6 {
            continue;
        }
        let sample = render_scene(&scene, resolution)?;
        let cond = ConditionSet {
            fg_cond: foreground_depth_oracle(&scene, resolution),
            bg_cond: background_depth_oracle(&scene, resolution),
            fg_embedding: embedder.embed(&sample.image)?.vector,
            bg_embedding: embedder.embed(&sample.true_background)?.vector,
            prompt: sample.prompt.clone(),
            mask: sample.salient_mask.clone(),
            lambda_fg: 1.0,
            lambda_bg: 1.0,
            drop: Default::default(),
        };
        out.push(OcclusionPair {
            scene,
            sample,
            cond,
            overlap,
            fg_style: near.style,
            fg_z,
            bg_style: far.style,
            bg_z,
        });
    }
    Ok(out)
}

/// Render a swatch: the style's texture (with depth shading) inside the
/// region, black elsewhere. The classifier compares like with like.
pub fn style_swatch(region: &Tensor<f32>, style: ObjectStyle, z: f32) -> Tensor<f32> {
    let (h, w) = (region.shape()[0], region.shape()[1]);
    let mut img = Tensor::zeros(&[3, h, w]);
    let sh = shade(z);
    for y in 0..h {
        for x in 0..w {
            if region.data()[y * w + x] > 0.5 {
                let c = style.color_at(x, y);
                for ch in 0..3 {
                    img.data_mut()[ch * h * w + y * w + x] = c[ch] * sh;
                }
            }
        }
    }
    img
}

fn masked_image(image: &Tensor<f32>, mask: &Tensor<f32>, invert: bool) -> Tensor<f32> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = image.clone();
    for ch in 0..3 {
        for p in 0..h * w {
            let m = mask.data()[p] > 0.5;
            if m == invert {
                out.data_mut()[ch * h * w + p] = 0.0;
            }
        }
    }
    out
}

/// Classify the overlap region's dominant palette against the two candidate
/// styles (nearest centroid by cosine in embedding space); returns true when
/// the foreground style wins.
pub fn classify_overlap_winner(
    generated: &Tensor<f32>,
    pair: &OcclusionPair,
    embedder: &ImageEmbedder,
) -> Result<bool> {
    let region = masked_image(generated, &pair.overlap, false);
    let e = embedder.embed(&region)?;
    let fg_sw = embedder.embed(&style_swatch(&pair.overlap, pair.fg_style, pair.fg_z))?;
    let bg_sw = embedder.embed(&style_swatch(&pair.overlap, pair.bg_style, pair.bg_z))?;
    let fg_sim = cosine_similarity(&e.vector, &fg_sw.vector);
    let bg_sim = cosine_similarity(&e.vector, &bg_sw.vector);
    Ok(fg_sim >= bg_sim)
}

/// Fraction of pairs whose generated overlap region is painted in the
/// foreground object's style. Pairs with an empty overlap are skipped and
/// excluded from the denominator.
pub fn occlusion_accuracy(
    generate: &mut dyn FnMut(&OcclusionPair) -> Result<Tensor<f32>>,
    pairs: &[OcclusionPair],
    embedder: &ImageEmbedder,
) -> Result<(f64, usize)> {
    let mut hits = 0usize;
    let mut used = 0usize;
    for pair in pairs {
        if pair.overlap.sum() < 1.0 {
            // degenerate pair: warn and skip
            eprintln!("occlusion pair with empty overlap skipped (scene seed {})", pair.scene.seed);
            continue;
        }
        let img = generate(pair)?;
        if classify_overlap_winner(&img, pair, embedder)? {
            hits += 1;
        }
        used += 1;
    }
    if used == 0 {
        return Err(CncError::argument("no usable occlusion pairs"));
    }
    Ok((hits as f64 / used as f64, used))
}

// ---- semantic localization ----

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LocalizationScore {
    pub fg_sim: Option<f64>,
    pub bg_sim: Option<f64>,
    pub avg: Option<f64>,
}

/// Cosine similarity between the masked generated regions and their
/// exemplars. A side whose mask region is empty is reported as undefined
/// and excluded from the average.
pub fn semantic_localization_score(
    generated: &Tensor<f32>,
    mask: &Tensor<f32>,
    fg_exemplar: &Tensor<f32>,
    bg_exemplar: &Tensor<f32>,
    embedder: &ImageEmbedder,
) -> Result<LocalizationScore> {
    if mask.shape() != [generated.shape()[1], generated.shape()[2]] {
        return Err(CncError::shape("mask does not match the generated image"));
    }
    let fg_count = mask.data().iter().filter(|&&m| m > 0.5).count();
    let bg_count = mask.numel() - fg_count;
    let fg_sim = if fg_count == 0 {
        None
    } else {
        let g = embedder.embed(&masked_image(generated, mask, false))?;
        let e = embedder.embed(fg_exemplar)?;
        Some(cosine_similarity(&g.vector, &e.vector))
    };
    let bg_sim = if bg_count == 0 {
        None
    } else {
        let g = embedder.embed(&masked_image(generated, mask, true))?;
        let e = embedder.embed(bg_exemplar)?;
        Some(cosine_similarity(&g.vector, &e.vector))
    };
    let avg = match (fg_sim, bg_sim) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    Ok(LocalizationScore { fg_sim, bg_sim, avg })
}

// ---- lambda sweep ----

#[derive(Clone, Debug)]
pub struct SweepSample {
    pub cond: ConditionSet,
    pub fg_exemplar: Tensor<f32>,
    pub bg_exemplar: Tensor<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub lambda_bg: f64,
    pub fg_sim: MetricAggregate,
    pub bg_sim: MetricAggregate,
    pub avg: MetricAggregate,
}

/// For each lambda_bg in the grid, sample with lambda_fg fixed at 1 (same
/// seed per condition set across the grid) and aggregate localization
/// scores.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    model: &ControlledUNet,
    store: &ParamStore<f32>,
    schedule: &DiffusionSchedule,
    vocab: &Vocabulary,
    samples: &[SweepSample],
    grid: &[f32],
    opts: &SamplerOptions,
    embedder: &ImageEmbedder,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CncError::argument("empty lambda grid"));
    }
    if samples.is_empty() {
        return Err(CncError::argument("no sweep samples"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda_bg in grid {
        let requests: Vec<SampleRequest> = samples
            .iter()
            .map(|s| {
                let mut cond = s.cond.clone();
                cond.lambda_fg = 1.0;
                cond.lambda_bg = lambda_bg;
                SampleRequest { cond, seed: s.seed }
            })
            .collect();
        let images = ddim_sample_batch(model, store, schedule, vocab, &requests, opts)?;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut avg = Vec::new();
        for (img, s) in images.iter().zip(samples) {
            let score = semantic_localization_score(
                img,
                &s.cond.mask,
                &s.fg_exemplar,
                &s.bg_exemplar,
                embedder,
            )?;
            if let Some(v) = score.fg_sim {
                fg.push(v);
            }
            if let Some(v) = score.bg_sim {
                bg.push(v);
            }
            if let Some(v) = score.avg {
                avg.push(v);
            }
        }
        rows.push(SweepRow {
            lambda_bg: lambda_bg as f64,
            fg_sim: aggregate(&fg),
            bg_sim: aggregate(&bg),
            avg: aggregate(&avg),
        });
    }
    Ok(rows)
}

// ---- report plumbing ----

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricAggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Stable two-pass mean/std (sample standard deviation).
pub fn aggregate(xs: &[f64]) -> MetricAggregate {
    let n = xs.len();
    if n == 0 {
        return MetricAggregate { mean: f64::NAN, std: f64::NAN, n: 0 };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    MetricAggregate { mean, std: var.sqrt(), n }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub suite: String,
    pub checkpoint_id: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, MetricAggregate>,
    pub per_sample: Vec<serde_json::Value>,
}

/// Condition-map preparation for the foreground stream: the depth map of the
/// full scene, of the cutout alone, or the cutout's depth re-masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgDepthVersion {
    Scene,
    Foreground,
    MaskedForeground,
}

impl FgDepthVersion {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "scene" => Some(FgDepthVersion::Scene),
            "foreground" => Some(FgDepthVersion::Foreground),
            "masked-foreground" => Some(FgDepthVersion::MaskedForeground),
            _ => None,
        }
    }

    pub fn apply(&self, sample: &RenderedSample) -> Tensor<f32> {
        let res = sample.depth_map.shape()[0];
        match self {
            FgDepthVersion::Scene => sample.depth_map.clone(),
            FgDepthVersion::Foreground => foreground_depth_oracle(&sample.scene, res),
            FgDepthVersion::MaskedForeground => {
                let fg = foreground_depth_oracle(&sample.scene, res);
                fg.zip(&sample.salient_mask, |d, m| if m > 0.5 { d } else { 0.0 })
            }
        }
    }
}

/// Deterministic held-out render for evaluation suites.
pub fn heldout_samples(master_seed: u64, label: &str, n: usize, resolution: usize) -> Result<Vec<RenderedSample>> {
    (0..n)
        .map(|i| {
            let seed = crate::rng::seed_for(master_seed, &format!("{label}/{i}"));
            let scene = sample_scene(seed, &GeneratorConfig::default())?;
            render_scene(&scene, resolution)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::{train_depth_estimator, DepthEstimatorConfig};

    fn toy_image(seed: u64) -> RenderedSample {
        let scene = sample_scene(seed, &GeneratorConfig::default()).unwrap();
        render_scene(&scene, 32).unwrap()
    }

    #[test]
    fn ssim_self_and_symmetry() {
        let a = toy_image(0).image;
        let b = toy_image(1).image;
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
        let small = Tensor::zeros(&[3, 4, 4]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_anticorrelated_checkerboard_is_negative() {
        let mut a = Tensor::zeros(&[3, 16, 16]);
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    a.data_mut()[ch * 256 + y * 16 + x] = ((x + y) % 2) as f32;
                }
            }
        }
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();

        // straight-line single-window oracle at one position
        let (la, lb) = (luma(&a), luma(&b));
        let win = gaussian_window();
        let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut wi = 0;
        for dy in 0..7 {
            for dx in 0..7 {
                let va = la[dy * 16 + dx];
                let vb = lb[dy * 16 + dx];
                mx += win[wi] * va;
                my += win[wi] * vb;
                mxx += win[wi] * va * va;
                myy += win[wi] * vb * vb;
                mxy += win[wi] * va * vb;
                wi += 1;
            }
        }
        let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
        let oracle = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        assert!(oracle < 0.0, "window oracle should be negative: {oracle}");
        assert!(s < 0.0, "checkerboard anti-correlation must be negative: {s}");
        // uniform pattern: every window identical to the oracle window
        assert!((s - oracle).abs() < 1e-9);
    }

    fn quick_estimator() -> DepthEstimator {
        let data = crate::toy_world::render_dataset(
            77,
            "eval-est",
            500,
            32,
            &GeneratorConfig::default(),
        )
        .unwrap();
        let cfg = DepthEstimatorConfig {
            epochs: 6,
            mae_threshold: 0.2,
            ..Default::default()
        };
        train_depth_estimator(&data, &cfg).unwrap()
    }

    #[test]
    fn depth_mae_behavior() {
        let est = quick_estimator();
        let s = toy_image(5);
        // reconstruction of the render itself stays near the estimator's own error
        let m = depth_mae(&s.image, &s.depth_map, &est).unwrap();
        assert!(m <= est.validation_mae + 0.01, "mae {m} vs val {}", est.validation_mae);
        // determinism
        assert_eq!(m, depth_mae(&s.image, &s.depth_map, &est).unwrap());
        // constant image scores what the straight-line recomputation says
        let gray = Tensor::full(&[3, 32, 32], 0.5f32);
        let got = depth_mae(&gray, &s.depth_map, &est).unwrap();
        let pred = est.predict(&gray).unwrap();
        let oracle = pred
            .data()
            .iter()
            .zip(s.depth_map.data())
            .map(|(&p, &t)| (p - t).abs() as f64)
            .sum::<f64>()
            / 1024.0;
        assert!((got - oracle).abs() < 1e-12);
        assert!(got > est.validation_mae, "constant prediction should be clearly worse");
        // untrained estimator is a state error
        let untrained = DepthEstimator::untrained(0);
        assert!(matches!(
            depth_mae(&s.image, &s.depth_map, &untrained),
            Err(CncError::State(_))
        ));
    }

    #[test]
    fn occlusion_oracle_calibrates_to_one() {
        let embedder = ImageEmbedder::new(0, 64);
        let pairs = build_occlusion_pairs(1, "unit", 12, 32, &embedder).unwrap();
        let mut render_oracle =
            |p: &OcclusionPair| -> Result<Tensor<f32>> { Ok(p.sample.image.clone()) };
        let (acc, used) = occlusion_accuracy(&mut render_oracle, &pairs, &embedder).unwrap();
        assert_eq!(used, 12);
        assert_eq!(acc, 1.0, "analytic renderer must score perfectly");
    }

    #[test]
    fn occlusion_on_noise_is_near_chance() {
        let embedder = ImageEmbedder::new(0, 64);
        let pairs = build_occlusion_pairs(2, "noise", 40, 32, &embedder).unwrap();
        let mut i = 0u64;
        let mut noise = |_p: &OcclusionPair| -> Result<Tensor<f32>> {
            i += 1;
            let mut rng = crate::rng::rng_for(i, "noise-image");
            Ok(Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng))
        };
        let (acc, _) = occlusion_accuracy(&mut noise, &pairs, &embedder).unwrap();
        assert!(acc <= 0.75, "noise should be near chance, got {acc}");
    }

    #[test]
    fn swapped_conditions_flip_expected_winner() {
        let embedder = ImageEmbedder::new(0, 64);
        let pairs = build_occlusion_pairs(3, "swap", 6, 32, &embedder).unwrap();
        for p in &pairs {
            // swapping the roles makes the old bg style the expected winner
            let mut swapped = p.clone();
            std::mem::swap(&mut swapped.fg_style, &mut swapped.bg_style);
            std::mem::swap(&mut swapped.fg_z, &mut swapped.bg_z);
            let win = classify_overlap_winner(&p.sample.image, p, &embedder).unwrap();
            let win_sw = classify_overlap_winner(&p.sample.image, &swapped, &embedder).unwrap();
            assert!(win && !win_sw);
        }
    }

    #[test]
    fn localization_score_on_stitched_exemplars() {
        let embedder = ImageEmbedder::new(0, 64);
        let mut avgs = Vec::new();
        for seed in 0..12 {
            let s = toy_image(seed);
            let inp = crate::triplets::OracleInpainter::for_sample(&s);
            let t = crate::triplets::build_triplet(&s, &inp, &Default::default()).unwrap();
            // stitch the exemplars themselves along M
            let stitch = {
                let mut img = t.background.clone();
                for ch in 0..3 {
                    for p in 0..1024 {
                        if t.mask.data()[p] > 0.5 {
                            img.data_mut()[ch * 1024 + p] = t.foreground.data()[ch * 1024 + p];
                        }
                    }
                }
                img
            };
            let score = semantic_localization_score(
                &stitch,
                &t.mask,
                &t.foreground,
                &t.background,
                &embedder,
            )
            .unwrap();
            avgs.push(score.avg.unwrap());
        }
        let mean = avgs.iter().sum::<f64>() / avgs.len() as f64;
        assert!(mean >= 0.9, "stitched exemplars should score high: {mean}");
    }

    #[test]
    fn localization_swap_and_empty_sides() {
        let embedder = ImageEmbedder::new(0, 64);
        let s = toy_image(3);
        let gen = toy_image(9).image;
        let fg_ex = toy_image(4).image;
        let bg_ex = toy_image(5).image;
        let a =
            semantic_localization_score(&gen, &s.salient_mask, &fg_ex, &bg_ex, &embedder).unwrap();
        let b =
            semantic_localization_score(&gen, &s.salient_mask, &bg_ex, &fg_ex, &embedder).unwrap();
        // swapping exemplars swaps which exemplar each side is scored against
        assert!((a.fg_sim.unwrap()
            - cosine_similarity(
                &embedder.embed(&masked_image(&gen, &s.salient_mask, false)).unwrap().vector,
                &embedder.embed(&fg_ex).unwrap().vector
            ))
        .abs()
            < 1e-12);
        assert_ne!(a.fg_sim, b.fg_sim);

        // an all-ones mask leaves the background side undefined
        let ones = Tensor::full(&[32, 32], 1.0f32);
        let c = semantic_localization_score(&gen, &ones, &fg_ex, &bg_ex, &embedder).unwrap();
        assert!(c.bg_sim.is_none());
        assert_eq!(c.avg, c.fg_sim);
    }

    #[test]
    fn uniform_gray_has_no_localization_signal() {
        // A uniform image carries no pairing preference: swapping the
        // exemplars moves its average score by roughly nothing, while a
        // perfectly localized stitch collapses under the swap.
        let embedder = ImageEmbedder::new(0, 64);
        let mut gray_margins = Vec::new();
        let mut stitch_margins = Vec::new();
        let mut gray_full_margins = Vec::new();
        for seed in 0..10 {
            let s = toy_image(seed);
            let inp = crate::triplets::OracleInpainter::for_sample(&s);
            let t = crate::triplets::build_triplet(&s, &inp, &Default::default()).unwrap();
            let stitch = {
                let mut img = t.background.clone();
                for ch in 0..3 {
                    for p in 0..1024 {
                        if t.mask.data()[p] > 0.5 {
                            img.data_mut()[ch * 1024 + p] = t.foreground.data()[ch * 1024 + p];
                        }
                    }
                }
                img
            };
            let margin = |img: &Tensor<f32>| {
                let correct = semantic_localization_score(
                    img,
                    &t.mask,
                    &t.foreground,
                    &t.background,
                    &embedder,
                )
                .unwrap();
                let swapped = semantic_localization_score(
                    img,
                    &t.mask,
                    &t.background,
                    &t.foreground,
                    &embedder,
                )
                .unwrap();
                correct.avg.unwrap() - swapped.avg.unwrap()
            };
            let margin_full = |img: &Tensor<f32>| {
                let correct = semantic_localization_score(
                    img,
                    &t.mask,
                    &t.source,
                    &t.background,
                    &embedder,
                )
                .unwrap();
                let swapped = semantic_localization_score(
                    img,
                    &t.mask,
                    &t.background,
                    &t.source,
                    &embedder,
                )
                .unwrap();
                correct.avg.unwrap() - swapped.avg.unwrap()
            };
            let gray = Tensor::full(&[3, 32, 32], 0.5f32);
            gray_margins.push(margin(&gray));
            stitch_margins.push(margin(&stitch));
            gray_full_margins.push(margin_full(&gray));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gm = mean(&gray_margins);
        let sm = mean(&stitch_margins);
        // cutout exemplars share the mask's support, so part of any margin is
        // structural; the localized stitch must still dominate gray clearly
        assert!(sm > gm + 0.1, "localized stitch must dominate gray: {sm} vs {gm}");
        // under structure-matched (full-image) exemplars a gray image shows
        // no pairing preference
        let gfm = mean(&gray_full_margins);
        assert!(gfm.abs() < 0.1, "gray pairing margin should be near zero: {gfm}");
    }

    #[test]
    fn aggregate_mean_std() {
        let a = aggregate(&[1.0, 2.0, 3.0, 4.0]);
        assert!((a.mean - 2.5).abs() < 1e-12);
        assert!((a.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(a.n, 4);
        assert_eq!(aggregate(&[]).n, 0);
    }

    #[test]
    fn fg_depth_versions() {
        let s = toy_image(6);
        let v1 = FgDepthVersion::Scene.apply(&s);
        let v2 = FgDepthVersion::Foreground.apply(&s);
        let v3 = FgDepthVersion::MaskedForeground.apply(&s);
        assert_eq!(v1, s.depth_map);
        // outside the mask, v2 keeps the floor while v3 is zero
        let mut saw_floor = false;
        for p in 0..1024 {
            if s.salient_mask.data()[p] <= 0.5 {
                assert_eq!(v3.data()[p], 0.0);
                if v2.data()[p] == crate::toy_world::BACKGROUND_DEPTH {
                    saw_floor = true;
                }
            } else {
                assert_eq!(v2.data()[p], v3.data()[p]);
            }
        }
        assert!(saw_floor);
    }
}
