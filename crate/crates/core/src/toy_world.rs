//! Procedurally generated layered-shape scenes with analytic ground truth.
//!
//! Every quantity a real pipeline would estimate with a pretrained network
//! (depth, saliency, the clean background behind the salient object) is exact
//! here: scenes are lists of colored shapes with an explicit z-order, rendered
//! far-to-near with hard edges. Depth is visually recoverable by construction:
//! object brightness falls off with z, and apparent size shrinks with z, so an
//! image-to-depth regressor has an honest signal to learn.

use serde::{Deserialize, Serialize};

use crate::error::{CncError, Result};
use crate::nn::{Adam, Conv2dLayer, Ctx, Init, ParamGroup, ParamStore};
use crate::rng::rng_for_indexed;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

pub const BACKGROUND_DEPTH: f32 = 0.05;
/// Brightness falloff per unit z; nearer objects render brighter.
const SHADE_SLOPE: f32 = 0.62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// Object fill styles: a saturated base color plus a tiling pattern.
pub const OBJECT_COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.90, 0.15, 0.85]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.55, 0.15, 0.85]),
];

pub const TEXTURES: [&str; 4] = ["solid", "striped", "dotted", "checkered"];

/// Background styles: dim two-tone palettes, visually distinct from objects.
pub const BACKGROUND_STYLES: [(&str, [f32; 3], [f32; 3], usize); 8] = [
    ("slate", [0.22, 0.24, 0.28], [0.28, 0.30, 0.34], 3),
    ("navy", [0.10, 0.12, 0.30], [0.14, 0.17, 0.38], 1),
    ("forest", [0.10, 0.25, 0.12], [0.13, 0.31, 0.16], 2),
    ("sand", [0.45, 0.38, 0.24], [0.52, 0.45, 0.30], 0),
    ("plum", [0.28, 0.12, 0.30], [0.34, 0.16, 0.37], 1),
    ("teal", [0.08, 0.28, 0.30], [0.11, 0.35, 0.38], 3),
    ("charcoal", [0.15, 0.15, 0.16], [0.20, 0.20, 0.21], 2),
    ("olive", [0.25, 0.27, 0.10], [0.31, 0.33, 0.13], 0),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStyle {
    pub color: usize,
    pub texture: usize,
}

impl ObjectStyle {
    /// Fill color at absolute pixel coordinates, before depth shading.
    pub fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        let base = OBJECT_COLORS[self.color].1;
        let alt = [base[0] * 0.55, base[1] * 0.55, base[2] * 0.55];
        match self.texture {
            0 => base,
            1 => {
                if (y / 2) % 2 == 0 {
                    base
                } else {
                    alt
                }
            }
            2 => {
                if x % 4 < 2 && y % 4 < 2 {
                    base
                } else {
                    alt
                }
            }
            _ => {
                if ((x / 2) + (y / 2)) % 2 == 0 {
                    base
                } else {
                    alt
                }
            }
        }
    }
}

pub fn background_color_at(style: usize, x: usize, y: usize) -> [f32; 3] {
    let (_, a, b, texture) = BACKGROUND_STYLES[style];
    match texture {
        0 => a,
        1 => {
            if (y / 2) % 2 == 0 {
                a
            } else {
                b
            }
        }
        2 => {
            if x % 4 < 2 && y % 4 < 2 {
                b
            } else {
                a
            }
        }
        _ => {
            if ((x / 2) + (y / 2)) % 2 == 0 {
                a
            } else {
                b
            }
        }
    }
}

pub fn shade(z: f32) -> f32 {
    1.0 - SHADE_SLOPE * z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Pixel coordinates of the shape center.
    pub center: (f32, f32),
    /// Characteristic size in pixels (diameter / side length).
    pub size: f32,
    /// Depth in (0, 1]; smaller is nearer.
    pub z: f32,
    pub style: ObjectStyle,
}

impl SceneObject {
    /// Hard-edged coverage test at the center of pixel (x, y).
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f32 + 0.5;
        let py = y as f32 + 0.5;
        let dx = px - self.center.0;
        let dy = py - self.center.1;
        let half = self.size / 2.0;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= half * half,
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            Shape::Triangle => {
                // upward triangle: apex on top, base below
                let h = self.size * 0.866;
                let top = (self.center.0, self.center.1 - h / 2.0);
                let left = (self.center.0 - half, self.center.1 + h / 2.0);
                let right = (self.center.0 + half, self.center.1 + h / 2.0);
                let sign = |a: (f32, f32), b: (f32, f32)| {
                    (px - b.0) * (a.1 - b.1) - (a.0 - b.0) * (py - b.1)
                };
                let d1 = sign(top, left);
                let d2 = sign(left, right);
                let d3 = sign(right, top);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    pub fn bbox(&self) -> (f32, f32, f32, f32) {
        let half = self.size / 2.0;
        (self.center.0 - half, self.center.1 - half, self.center.0 + half, self.center.1 + half)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub background_style: usize,
    /// Sorted strictly by z descending: farthest first, salient (nearest) last.
    pub objects: Vec<SceneObject>,
    pub seed: u64,
    pub canvas: usize,
}

impl ToyScene {
    pub fn salient(&self) -> &SceneObject {
        self.objects.last().expect("scene has at least one object")
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(CncError::config("scene must contain at least one object"));
        }
        if self.background_style >= BACKGROUND_STYLES.len() {
            return Err(CncError::config("unknown background style"));
        }
        for pair in self.objects.windows(2) {
            if pair[0].z <= pair[1].z {
                return Err(CncError::config(format!(
                    "objects must be strictly z-descending, got {} then {}",
                    pair[0].z, pair[1].z
                )));
            }
        }
        let c = self.canvas as f32;
        for obj in &self.objects {
            if !(obj.z > 0.0 && obj.z <= 1.0) {
                return Err(CncError::config(format!("z out of (0,1]: {}", obj.z)));
            }
            if obj.size < 3.0 {
                return Err(CncError::config("object too small to rasterize"));
            }
            let (x0, y0, x1, y1) = obj.bbox();
            if x1 < 0.0 || y1 < 0.0 || x0 > c || y0 > c {
                return Err(CncError::config("object bounding box outside canvas"));
            }
        }
        Ok(())
    }

    /// Prompt tokens describing the scene, nearest object first.
    pub fn prompt(&self) -> Vec<String> {
        let bg = BACKGROUND_STYLES[self.background_style].0;
        let word = |o: &SceneObject| {
            (OBJECT_COLORS[o.style.color].0.to_string(), o.shape.word().to_string())
        };
        let mut near_first: Vec<&SceneObject> = self.objects.iter().rev().collect();
        match near_first.len() {
            1 => {
                let o = near_first[0];
                vec![
                    OBJECT_COLORS[o.style.color].0.into(),
                    TEXTURES[o.style.texture].into(),
                    o.shape.word().into(),
                    "on".into(),
                    bg.into(),
                    "background".into(),
                ]
            }
            2 => {
                let (c1, s1) = word(near_first[0]);
                let (c2, s2) = word(near_first[1]);
                vec![c1, s1, "in".into(), "front".into(), "of".into(), c2, s2]
            }
            _ => {
                near_first.truncate(3);
                let mut toks = Vec::new();
                for o in &near_first {
                    let (c, s) = word(o);
                    toks.push(c);
                    toks.push(s);
                }
                toks.push("on".into());
                toks.push(bg.into());
                toks
            }
        }
    }
}

/// The closed prompt vocabulary, pad token first.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = vec!["<pad>".into()];
    v.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
    v.extend(OBJECT_COLORS.iter().map(|(n, _)| n.to_string()));
    v.extend(TEXTURES.iter().map(|t| t.to_string()));
    v.extend(BACKGROUND_STYLES.iter().map(|(n, _, _, _)| n.to_string()));
    v.extend(["on", "in", "front", "of", "background"].map(String::from));
    v
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object base size as a fraction of the canvas side.
    pub size_frac: (f32, f32),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { canvas: 32, min_objects: 1, max_objects: 3, size_frac: (0.30, 0.46) }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 {
            return Err(CncError::config("min_objects must be >= 1"));
        }
        if self.min_objects > self.max_objects {
            return Err(CncError::config(format!(
                "invalid object count range [{}, {}]",
                self.min_objects, self.max_objects
            )));
        }
        if self.size_frac.0 > self.size_frac.1 || self.size_frac.0 <= 0.0 {
            return Err(CncError::config("invalid size_frac range"));
        }
        if self.canvas < 16 {
            return Err(CncError::config("canvas must be at least 16 px"));
        }
        Ok(())
    }
}

/// Deterministic scene generation. The nearest (last) object is salient.
pub fn sample_scene(seed: u64, config: &GeneratorConfig) -> Result<ToyScene> {
    config.validate()?;
    let mut rng = rng_for_indexed(seed, "toy-scene", 0);
    use rand::Rng as _;
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let background_style = rng.gen_range(0..BACKGROUND_STYLES.len());

    // stratified z in [0.15, 0.95]: one draw per stratum guarantees distinct,
    // well separated depths
    let (z_lo, z_hi) = (0.15f32, 0.95f32);
    let stratum = (z_hi - z_lo) / n as f32;
    let mut zs: Vec<f32> = (0..n)
        .map(|i| {
            let lo = z_lo + stratum * i as f32;
            lo + stratum * (0.1 + 0.8 * rng.gen_range(0.0f32..1.0))
        })
        .collect();
    zs.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
    let c = config.canvas as f32;
    let mut objects = Vec::with_capacity(n);
    for z in zs {
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let color_pos = rng.gen_range(0..colors.len());
        let color = colors.remove(color_pos);
        let texture = rng.gen_range(0..TEXTURES.len());
        let base = rng.gen_range(config.size_frac.0..config.size_frac.1) * c;
        // perspective cue: nearer objects render larger
        let size = (base * (1.3 - 0.6 * z)).max(3.0);
        let center = (rng.gen_range(0.28 * c..0.72 * c), rng.gen_range(0.28 * c..0.72 * c));
        objects.push(SceneObject { shape, center, size, z, style: ObjectStyle { color, texture } });
    }
    let scene = ToyScene { background_style, objects, seed, canvas: config.canvas };
    scene.validate()?;
    Ok(scene)
}

#[derive(Clone, Debug)]
pub struct RenderedSample {
    /// I_s, [3, H, W] in [0, 1].
    pub image: Tensor<f32>,
    /// Binary M, [H, W].
    pub salient_mask: Tensor<f32>,
    /// Scene rendered without the salient object, [3, H, W].
    pub true_background: Tensor<f32>,
    /// [H, W] in [0, 1], larger = nearer, background floor 0.05.
    pub depth_map: Tensor<f32>,
    /// Normalized depth-gradient magnitude, [H, W] in [0, 1].
    pub edge_map: Tensor<f32>,
    pub prompt: Vec<String>,
    pub scene: ToyScene,
}

fn paint(
    scene: &ToyScene,
    res: usize,
    skip_salient: bool,
) -> (Tensor<f32>, Tensor<f32>) {
    let scale = res as f32 / scene.canvas as f32;
    let mut image = Tensor::zeros(&[3, res, res]);
    let mut depth = Tensor::full(&[res, res], BACKGROUND_DEPTH);
    let salient_idx = scene.objects.len() - 1;
    {
        let img = image.data_mut();
        let dep = depth.data_mut();
        for y in 0..res {
            for x in 0..res {
                let c = background_color_at(scene.background_style, x, y);
                for ch in 0..3 {
                    img[ch * res * res + y * res + x] = c[ch];
                }
            }
        }
        for (idx, obj) in scene.objects.iter().enumerate() {
            if skip_salient && idx == salient_idx {
                continue;
            }
            let scaled = SceneObject {
                center: (obj.center.0 * scale, obj.center.1 * scale),
                size: obj.size * scale,
                ..obj.clone()
            };
            let sh = shade(obj.z);
            let (x0, y0, x1, y1) = scaled.bbox();
            let xr = (x0.floor().max(0.0) as usize)..=clamp_px(x1, res);
            let yr = (y0.floor().max(0.0) as usize)..=clamp_px(y1, res);
            for y in yr {
                for x in xr.clone() {
                    if scaled.covers(x, y) {
                        let c = obj.style.color_at(x, y);
                        for ch in 0..3 {
                            img[ch * res * res + y * res + x] = c[ch] * sh;
                        }
                        dep[y * res + x] = 1.0 - obj.z;
                    }
                }
            }
        }
    }
    (image, depth)
}

fn clamp_px(v: f32, res: usize) -> usize {
    (v.ceil().max(0.0) as usize).min(res - 1)
}

/// Normalized gradient magnitude of a depth map (central differences).
pub fn edge_oracle(depth: &Tensor<f32>) -> Tensor<f32> {
    let res = depth.shape()[0];
    let w = depth.shape()[1];
    let d = depth.data();
    let mut out = Tensor::zeros(&[res, w]);
    let mut mx = 0.0f32;
    {
        let o = out.data_mut();
        for y in 0..res {
            for x in 0..w {
                let gx = d[y * w + (x + 1).min(w - 1)] - d[y * w + x.saturating_sub(1)];
                let gy = d[(y + 1).min(res - 1) * w + x] - d[y.saturating_sub(1) * w + x];
                let m = (gx * gx + gy * gy).sqrt();
                o[y * w + x] = m;
                if m > mx {
                    mx = m;
                }
            }
        }
        if mx > 0.0 {
            o.iter_mut().for_each(|v| *v /= mx);
        }
    }
    out
}

/// Render with the painter's algorithm (far to near) at `resolution` pixels.
pub fn render_scene(scene: &ToyScene, resolution: usize) -> Result<RenderedSample> {
    if resolution % 8 != 0 {
        return Err(CncError::shape(format!(
            "resolution {resolution} must be a multiple of 8"
        )));
    }
    scene.validate()?;
    let (image, depth_map) = paint(scene, resolution, false);
    let (true_background, _) = paint(scene, resolution, true);
    let scale = resolution as f32 / scene.canvas as f32;
    let sal = scene.salient();
    let sal_scaled = SceneObject {
        center: (sal.center.0 * scale, sal.center.1 * scale),
        size: sal.size * scale,
        ..sal.clone()
    };
    let mut salient_mask = Tensor::zeros(&[resolution, resolution]);
    {
        let m = salient_mask.data_mut();
        for y in 0..resolution {
            for x in 0..resolution {
                if sal_scaled.covers(x, y) {
                    m[y * resolution + x] = 1.0;
                }
            }
        }
    }
    if salient_mask.sum() < 1.0 {
        return Err(CncError::config("salient object rasterized to zero pixels"));
    }
    let edge_map = edge_oracle(&depth_map);
    Ok(RenderedSample {
        image,
        salient_mask,
        true_background,
        depth_map,
        edge_map,
        prompt: scene.prompt(),
        scene: scene.clone(),
    })
}

/// Depth map of the salient object alone: object depth inside its coverage,
/// background floor elsewhere. This is the analytic depth oracle of I_f.
pub fn foreground_depth_oracle(scene: &ToyScene, resolution: usize) -> Tensor<f32> {
    let fg_scene = ToyScene {
        background_style: scene.background_style,
        objects: vec![scene.salient().clone()],
        seed: scene.seed,
        canvas: scene.canvas,
    };
    let (_, depth) = paint(&fg_scene, resolution, false);
    depth
}

/// Depth map of the scene without its salient object (the oracle for I_b).
pub fn background_depth_oracle(scene: &ToyScene, resolution: usize) -> Tensor<f32> {
    let (_, depth) = paint(scene, resolution, true);
    depth
}

// ---- depth estimator ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthEstimatorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Validation MAE the fit must reach.
    pub mae_threshold: f64,
    pub seed: u64,
}

impl Default for DepthEstimatorConfig {
    fn default() -> Self {
        DepthEstimatorConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            holdout_fraction: 0.1,
            mae_threshold: 0.05,
            seed: 0,
        }
    }
}

/// Small convolutional image-to-depth regressor (sigmoid output in [0,1]).
pub struct DepthEstimator {
    pub store: ParamStore<f32>,
    layers: Vec<Conv2dLayer>,
    pub validation_mae: f64,
}

impl DepthEstimator {
    pub const LAYER_CHANNELS: [usize; 5] = [3, 16, 24, 16, 1];

    fn build(seed: u64) -> (ParamStore<f32>, Vec<Conv2dLayer>) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::rng_for(seed, "depth-estimator-init");
        let chs = Self::LAYER_CHANNELS;
        let layers = (0..chs.len() - 1)
            .map(|i| {
                Conv2dLayer::init(
                    &mut store,
                    &format!("depth_est.c{i}"),
                    ParamGroup::Auxiliary,
                    chs[i],
                    chs[i + 1],
                    3,
                    1,
                    Init::He,
                    &mut rng,
                )
            })
            .collect();
        (store, layers)
    }

    pub fn from_store(store: ParamStore<f32>, validation_mae: f64) -> Self {
        let (fresh, layers) = Self::build(0);
        assert_eq!(fresh.len(), store.len(), "depth estimator store layout mismatch");
        DepthEstimator { store, layers, validation_mae }
    }

    /// Freshly initialized, unfit estimator (error-path tests, plumbing).
    pub fn untrained(seed: u64) -> Self {
        let (store, layers) = Self::build(seed);
        DepthEstimator { store, layers, validation_mae: f64::INFINITY }
    }

    fn forward(&self, cx: &Ctx<f32>, x: crate::tensor::tape::Var) -> crate::tensor::tape::Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h);
            if i + 1 < self.layers.len() {
                h = cx.tape.silu(h);
            }
        }
        cx.tape.sigmoid(h)
    }

    /// Predict depth for a batch of images [B, 3, H, W] -> [B, H, W].
    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !images.is_finite() {
            return Err(CncError::Input("non-finite pixels in depth estimator input".into()));
        }
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(CncError::shape(format!("expected [B,3,H,W], got {s:?}")));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &self.store);
        let x = tape.constant(images.clone());
        let y = self.forward(&cx, x);
        Ok(tape.value(y).as_ref().clone().reshaped(&[b, h, w]))
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape().to_vec();
        let batched = image.clone().reshaped(&[1, s[0], s[1], s[2]]);
        let out = self.predict_batch(&batched)?;
        Ok(out.reshaped(&[s[1], s[2]]))
    }
}

/// Fit the depth estimator on rendered samples; hold out a validation split
/// and report its MAE. Fails with a training-failure report if the threshold
/// is not reached.
pub fn train_depth_estimator(
    dataset: &[RenderedSample],
    config: &DepthEstimatorConfig,
) -> Result<DepthEstimator> {
    if dataset.len() < 500 {
        return Err(CncError::argument(format!(
            "depth estimator needs at least 500 samples, got {}",
            dataset.len()
        )));
    }
    let n_val = ((dataset.len() as f64 * config.holdout_fraction) as usize).max(1);
    let (val, train) = dataset.split_at(n_val);

    let (mut store, layers) = DepthEstimator::build(config.seed);
    store.set_trainable(ParamGroup::Auxiliary, true);
    let mut opt = Adam::new(config.learning_rate);
    opt.clip_global_norm = None;
    let res = train[0].image.shape()[1];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = crate::rng::rng_for(config.seed, "depth-estimator-shuffle");

    for _epoch in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let mut xs = Tensor::zeros(&[chunk.len(), 3, res, res]);
            let mut ys = Tensor::zeros(&[chunk.len(), 1, res, res]);
            for (i, &idx) in chunk.iter().enumerate() {
                let img = &train[idx].image;
                let dep = &train[idx].depth_map;
                xs.data_mut()[i * 3 * res * res..(i + 1) * 3 * res * res]
                    .copy_from_slice(img.data());
                ys.data_mut()[i * res * res..(i + 1) * res * res].copy_from_slice(dep.data());
            }
            let est = DepthEstimator { store, layers: layers.clone(), validation_mae: 0.0 };
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &est.store);
            let x = tape.constant(xs);
            let pred = est.forward(&cx, x);
            let target = tape.constant(ys);
            let loss = tape.mse_loss(pred, target);
            let grads = tape.backward(loss);
            let mut pairs: Vec<_> = cx
                .bound_vars()
                .into_iter()
                .filter_map(|(id, var)| grads.get(var).map(|g| (id, g.clone())))
                .collect();
            store = est.store;
            drop(grads);
            opt.step(&mut store, &mut pairs);
        }
    }

    let est = DepthEstimator { store, layers, validation_mae: 0.0 };
    let mut abs_sum = 0.0f64;
    let mut count = 0usize;
    for s in val {
        let pred = est.predict(&s.image)?;
        for (p, t) in pred.data().iter().zip(s.depth_map.data()) {
            abs_sum += (p - t).abs() as f64;
            count += 1;
        }
    }
    let mae = abs_sum / count as f64;
    if mae > config.mae_threshold {
        return Err(CncError::TrainingFailure {
            message: format!(
                "depth estimator validation MAE above threshold {}",
                config.mae_threshold
            ),
            final_metric: mae,
        });
    }
    Ok(DepthEstimator { validation_mae: mae, ..est })
}

pub fn shuffle<R: rand::Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Convenience: deterministic rendered dataset from an indexed seed stream.
pub fn render_dataset(
    master_seed: u64,
    label: &str,
    count: usize,
    resolution: usize,
    config: &GeneratorConfig,
) -> Result<Vec<RenderedSample>> {
    (0..count)
        .map(|i| {
            let scene_seed = crate::rng::seed_for(master_seed, &format!("{label}/{i}"));
            let scene = sample_scene(scene_seed, config)?;
            render_scene(&scene, resolution)
        })
        .collect()
}
