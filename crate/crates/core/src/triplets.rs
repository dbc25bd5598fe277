//! Synthetic image triplets: salient-object cutout, clean background, and
//! the masks and condition maps derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{CncError, Result};
use crate::tensor::Tensor;
use crate::toy_world::{
    background_depth_oracle, edge_oracle, foreground_depth_oracle, DepthEstimator, RenderedSample,
};

/// Inpainting prompt recorded for a future latent-diffusion inpainting
/// backend; the in-repo backends do not consume prompts.
pub const LDM_INPAINT_PROMPT: &str = "empty scenery, highly detailed, no people";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Depth,
    Edge,
}

impl ConditionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionKind::Depth => "depth",
            ConditionKind::Edge => "edge",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "depth" => Some(ConditionKind::Depth),
            "edge" => Some(ConditionKind::Edge),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackendInfo {
    pub id: &'static str,
    /// Safe for concurrent read-only use across worker threads.
    pub concurrent_safe: bool,
}

/// Fills masked holes in an image. Output must equal the input outside the
/// hole mask.
pub trait Inpainter: Sync {
    fn info(&self) -> BackendInfo;
    /// `image`: [3,H,W]; `hole`: binary [H,W]; returns [3,H,W].
    fn fill(&self, image: &Tensor<f32>, hole: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Analytic backend: substitutes the renderer's salient-object-removed
/// background inside the hole. Exact by construction.
pub struct OracleInpainter {
    true_background: Tensor<f32>,
}

impl OracleInpainter {
    pub fn new(true_background: Tensor<f32>) -> Self {
        OracleInpainter { true_background }
    }

    pub fn for_sample(sample: &RenderedSample) -> Self {
        OracleInpainter { true_background: sample.true_background.clone() }
    }
}

impl Inpainter for OracleInpainter {
    fn info(&self) -> BackendInfo {
        BackendInfo { id: "oracle", concurrent_safe: true }
    }

    fn fill(&self, image: &Tensor<f32>, hole: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image_mask(image, hole)?;
        if self.true_background.shape() != image.shape() {
            return Err(CncError::Inpaint {
                backend: "oracle".into(),
                message: "true background resolution mismatch".into(),
            });
        }
        let (h, w) = (hole.shape()[0], hole.shape()[1]);
        let mut out = image.clone();
        for ch in 0..3 {
            for p in 0..h * w {
                if hole.data()[p] > 0.5 {
                    out.data_mut()[ch * h * w + p] = self.true_background.data()[ch * h * w + p];
                }
            }
        }
        Ok(out)
    }
}

/// Naive backend for external images: fills the hole with the per-channel
/// mean of the surrounding context.
pub struct MeanFillInpainter;

impl Inpainter for MeanFillInpainter {
    fn info(&self) -> BackendInfo {
        BackendInfo { id: "mean-fill", concurrent_safe: true }
    }

    fn fill(&self, image: &Tensor<f32>, hole: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image_mask(image, hole)?;
        let (h, w) = (hole.shape()[0], hole.shape()[1]);
        let context = hole.data().iter().filter(|&&m| m <= 0.5).count();
        if context == 0 {
            return Err(CncError::Inpaint {
                backend: "mean-fill".into(),
                message: "hole covers the entire image; no context to fill from".into(),
            });
        }
        let mut out = image.clone();
        for ch in 0..3 {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            let mean = plane
                .iter()
                .zip(hole.data())
                .filter(|(_, &m)| m <= 0.5)
                .map(|(&v, _)| v)
                .sum::<f32>()
                / context as f32;
            for p in 0..h * w {
                if hole.data()[p] > 0.5 {
                    out.data_mut()[ch * h * w + p] = mean;
                }
            }
        }
        Ok(out)
    }
}

fn check_image_mask(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let m = mask.shape();
    if s.len() != 3 || s[0] != 3 || m.len() != 2 || s[1] != m[0] || s[2] != m[1] {
        return Err(CncError::shape(format!(
            "image {s:?} and mask {m:?} are incompatible"
        )));
    }
    Ok(())
}

/// I_f = I_s (x) M, elementwise with channel broadcast.
pub fn make_foreground(source: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_image_mask(source, mask)?;
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = source.clone();
    for ch in 0..3 {
        for p in 0..h * w {
            if mask.data()[p] <= 0.5 {
                out.data_mut()[ch * h * w + p] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Morphological dilation with a disk structuring element.
pub fn dilate_mask(mask: &Tensor<f32>, radius: i32) -> Result<Tensor<f32>> {
    if radius < 0 {
        return Err(CncError::argument(format!("dilation radius must be >= 0, got {radius}")));
    }
    if mask.shape().len() != 2 {
        return Err(CncError::shape("mask must be 2-d"));
    }
    if radius == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if mask.data()[y as usize * w + x as usize] > 0.5 {
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out.data_mut()[ny as usize * w + nx as usize] = 1.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Default dilation radius: 3% of the image side, rounded up.
pub fn default_dilation_radius(side: usize) -> i32 {
    (side as f64 * 0.03).ceil() as i32
}

/// I_b = inpainter.fill(I_s (x) (1 - M~), M~).
pub fn make_background(
    source: &Tensor<f32>,
    dilated_mask: &Tensor<f32>,
    inpainter: &dyn Inpainter,
) -> Result<Tensor<f32>> {
    check_image_mask(source, dilated_mask)?;
    let (h, w) = (dilated_mask.shape()[0], dilated_mask.shape()[1]);
    let mut holed = source.clone();
    for ch in 0..3 {
        for p in 0..h * w {
            if dilated_mask.data()[p] > 0.5 {
                holed.data_mut()[ch * h * w + p] = 0.0;
            }
        }
    }
    inpainter.fill(&holed, dilated_mask)
}

#[derive(Clone, Debug)]
pub struct ImageTriplet {
    pub source: Tensor<f32>,
    pub foreground: Tensor<f32>,
    pub background: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub dilated_mask: Tensor<f32>,
    pub prompt: Vec<String>,
    pub fg_condition: Tensor<f32>,
    pub bg_condition: Tensor<f32>,
    pub condition_kind: ConditionKind,
}

impl ImageTriplet {
    /// Check the defining identities exactly.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.mask.shape()[0], self.mask.shape()[1]);
        for p in 0..h * w {
            let m = self.mask.data()[p] > 0.5;
            let md = self.dilated_mask.data()[p] > 0.5;
            if m && !md {
                return Err(CncError::shape("dilated mask does not contain mask"));
            }
            for ch in 0..3 {
                let i = ch * h * w + p;
                let fg = self.foreground.data()[i];
                let src = self.source.data()[i];
                if m {
                    if fg != src {
                        return Err(CncError::shape("foreground != source inside mask"));
                    }
                } else if fg != 0.0 {
                    return Err(CncError::shape("foreground leak outside mask"));
                }
                if !md && self.background.data()[i] != src {
                    return Err(CncError::shape("background != source outside dilated mask"));
                }
            }
        }
        Ok(())
    }
}

/// An externally supplied (non-toy) record.
#[derive(Clone, Debug)]
pub struct ExternalRecord {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
    pub prompt: Vec<String>,
}

pub struct TripletOptions {
    pub condition_kind: ConditionKind,
    /// None: ceil(0.03 * side).
    pub dilation_radius: Option<i32>,
}

impl Default for TripletOptions {
    fn default() -> Self {
        TripletOptions { condition_kind: ConditionKind::Depth, dilation_radius: None }
    }
}

/// Build a triplet from a toy render. Condition maps come from the analytic
/// oracles re-run on the component scenes, so the background condition never
/// carries the salient object's depth signature.
pub fn build_triplet(
    sample: &RenderedSample,
    inpainter: &dyn Inpainter,
    opts: &TripletOptions,
) -> Result<ImageTriplet> {
    let res = sample.salient_mask.shape()[0];
    let radius = opts.dilation_radius.unwrap_or_else(|| default_dilation_radius(res));
    let mask = sample.salient_mask.clone();
    let dilated = dilate_mask(&mask, radius)?;
    let foreground = make_foreground(&sample.image, &mask)?;
    let background = make_background(&sample.image, &dilated, inpainter)?;
    let fg_depth = foreground_depth_oracle(&sample.scene, res);
    let bg_depth = background_depth_oracle(&sample.scene, res);
    let (fg_condition, bg_condition) = match opts.condition_kind {
        ConditionKind::Depth => (fg_depth, bg_depth),
        ConditionKind::Edge => (edge_oracle(&fg_depth), edge_oracle(&bg_depth)),
    };
    let triplet = ImageTriplet {
        source: sample.image.clone(),
        foreground,
        background,
        mask,
        dilated_mask: dilated,
        prompt: sample.prompt.clone(),
        fg_condition,
        bg_condition,
        condition_kind: opts.condition_kind,
    };
    triplet.validate()?;
    Ok(triplet)
}

/// Build a triplet from an external record; condition maps come from the
/// trained depth estimator.
pub fn build_triplet_external(
    record: &ExternalRecord,
    inpainter: &dyn Inpainter,
    estimator: &DepthEstimator,
    opts: &TripletOptions,
) -> Result<ImageTriplet> {
    let mask = record
        .mask
        .as_ref()
        .ok_or_else(|| CncError::Ingestion("external record is missing its mask".into()))?;
    let s = record.image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CncError::Ingestion(format!("external image must be [3,H,W], got {s:?}")));
    }
    if mask.shape() != [s[1], s[2]] {
        return Err(CncError::Ingestion(format!(
            "mask resolution {:?} does not match image {:?}",
            mask.shape(),
            s
        )));
    }
    let radius = opts.dilation_radius.unwrap_or_else(|| default_dilation_radius(s[1]));
    let dilated = dilate_mask(mask, radius)?;
    let foreground = make_foreground(&record.image, mask)?;
    let background = make_background(&record.image, &dilated, inpainter)?;
    let fg_depth = estimator.predict(&foreground)?;
    let bg_depth = estimator.predict(&background)?;
    let (fg_condition, bg_condition) = match opts.condition_kind {
        ConditionKind::Depth => (fg_depth, bg_depth),
        ConditionKind::Edge => (edge_oracle(&fg_depth), edge_oracle(&bg_depth)),
    };
    let triplet = ImageTriplet {
        source: record.image.clone(),
        foreground,
        background,
        mask: mask.clone(),
        dilated_mask: dilated,
        prompt: record.prompt.clone(),
        fg_condition,
        bg_condition,
        condition_kind: opts.condition_kind,
    };
    triplet.validate()?;
    Ok(triplet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::{render_scene, sample_scene, GeneratorConfig};
    use proptest::prelude::*;

    fn toy_sample(seed: u64) -> RenderedSample {
        let scene = sample_scene(seed, &GeneratorConfig::default()).unwrap();
        render_scene(&scene, 32).unwrap()
    }

    #[test]
    fn identity_and_null_masks() {
        let s = toy_sample(0);
        let ones = Tensor::full(&[32, 32], 1.0);
        let zeros = Tensor::zeros(&[32, 32]);
        assert_eq!(make_foreground(&s.image, &ones).unwrap(), s.image);
        let fg = make_foreground(&s.image, &zeros).unwrap();
        assert!(fg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreground_shape_mismatch_is_error() {
        let s = toy_sample(0);
        let bad = Tensor::zeros(&[16, 16]);
        assert!(matches!(make_foreground(&s.image, &bad), Err(CncError::Shape(_))));
    }

    #[test]
    fn reconstruction_identity_exact() {
        for seed in 0..30 {
            let s = toy_sample(seed);
            let fg = make_foreground(&s.image, &s.salient_mask).unwrap();
            let (h, w) = (32, 32);
            for ch in 0..3 {
                for p in 0..h * w {
                    let i = ch * h * w + p;
                    let complement = if s.salient_mask.data()[p] > 0.5 {
                        0.0
                    } else {
                        s.image.data()[i]
                    };
                    assert_eq!(fg.data()[i] + complement, s.image.data()[i]);
                }
            }
        }
    }

    #[test]
    fn dilation_radius0_and_negative() {
        let s = toy_sample(1);
        assert_eq!(dilate_mask(&s.salient_mask, 0).unwrap(), s.salient_mask);
        assert!(matches!(dilate_mask(&s.salient_mask, -1), Err(CncError::Argument(_))));
    }

    #[test]
    fn dilation_single_pixel_disk_r1_is_plus() {
        let mut m = Tensor::zeros(&[7, 7]);
        m.data_mut()[3 * 7 + 3] = 1.0;
        let d = dilate_mask(&m, 1).unwrap();
        // brute-force neighborhood oracle
        let mut expected = Tensor::zeros(&[7, 7]);
        for y in 0..7i32 {
            for x in 0..7i32 {
                if (y - 3) * (y - 3) + (x - 3) * (x - 3) <= 1 {
                    expected.data_mut()[(y * 7 + x) as usize] = 1.0;
                }
            }
        }
        assert_eq!(d, expected);
        assert_eq!(d.sum() as usize, 5);
    }

    proptest! {
        #[test]
        fn dilation_is_monotone(seed in 0u64..500, radius in 0i32..4) {
            let s = toy_sample(seed);
            let d = dilate_mask(&s.salient_mask, radius).unwrap();
            prop_assert!(d.sum() >= s.salient_mask.sum());
            // containment: M~ AND M == M
            for (dm, m) in d.data().iter().zip(s.salient_mask.data()) {
                prop_assert!(*dm >= *m);
            }
        }

        #[test]
        fn triplet_invariants_hold(seed in 0u64..200) {
            let s = toy_sample(seed);
            let inp = OracleInpainter::for_sample(&s);
            let t = build_triplet(&s, &inp, &TripletOptions::default()).unwrap();
            t.validate().unwrap();
        }
    }

    #[test]
    fn background_with_empty_hole_is_source() {
        let s = toy_sample(2);
        let zeros = Tensor::zeros(&[32, 32]);
        let inp = OracleInpainter::for_sample(&s);
        assert_eq!(make_background(&s.image, &zeros, &inp).unwrap(), s.image);
    }

    #[test]
    fn oracle_backend_recovers_true_background() {
        let s = toy_sample(3);
        let dilated = dilate_mask(&s.salient_mask, 1).unwrap();
        let inp = OracleInpainter::for_sample(&s);
        let bg = make_background(&s.image, &dilated, &inp).unwrap();
        let (h, w) = (32, 32);
        for ch in 0..3 {
            for p in 0..h * w {
                let i = ch * h * w + p;
                if dilated.data()[p] > 0.5 {
                    assert_eq!(bg.data()[i], s.true_background.data()[i]);
                } else {
                    assert_eq!(bg.data()[i], s.image.data()[i]);
                }
            }
        }
    }

    #[test]
    fn mean_fill_on_uniform_context_matches_surround() {
        let img = Tensor::full(&[3, 8, 8], 0.25f32);
        let mut hole = Tensor::zeros(&[8, 8]);
        hole.data_mut()[3 * 8 + 3] = 1.0;
        hole.data_mut()[3 * 8 + 4] = 1.0;
        let filled = MeanFillInpainter.fill(&img, &hole).unwrap();
        assert!(filled.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn mean_fill_total_hole_is_backend_error() {
        let img = Tensor::full(&[3, 4, 4], 0.5f32);
        let hole = Tensor::full(&[4, 4], 1.0);
        match MeanFillInpainter.fill(&img, &hole) {
            Err(CncError::Inpaint { backend, .. }) => assert_eq!(backend, "mean-fill"),
            other => panic!("expected inpaint error, got {other:?}"),
        }
    }

    #[test]
    fn inpainter_locality_for_all_backends() {
        let s = toy_sample(4);
        let dilated = dilate_mask(&s.salient_mask, 2).unwrap();
        let holed = {
            let mut h = s.image.clone();
            for ch in 0..3 {
                for p in 0..32 * 32 {
                    if dilated.data()[p] > 0.5 {
                        h.data_mut()[ch * 32 * 32 + p] = 0.0;
                    }
                }
            }
            h
        };
        let backends: Vec<Box<dyn Inpainter>> = vec![
            Box::new(OracleInpainter::for_sample(&s)),
            Box::new(MeanFillInpainter),
        ];
        for b in &backends {
            let out = b.fill(&holed, &dilated).unwrap();
            for ch in 0..3 {
                for p in 0..32 * 32 {
                    if dilated.data()[p] <= 0.5 {
                        assert_eq!(
                            out.data()[ch * 32 * 32 + p],
                            holed.data()[ch * 32 * 32 + p],
                            "backend {} broke locality",
                            b.info().id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn bg_condition_never_contains_salient_signature() {
        use crate::toy_world::background_depth_oracle;
        for seed in 0..50 {
            let s = toy_sample(seed);
            let inp = OracleInpainter::for_sample(&s);
            let t = build_triplet(&s, &inp, &TripletOptions::default()).unwrap();
            let oracle = background_depth_oracle(&s.scene, 32);
            assert!(t.bg_condition.max_abs_diff(&oracle) < 1e-6);
        }
    }

    #[test]
    fn edge_kind_dispatches_to_edge_oracle() {
        let s = toy_sample(5);
        let inp = OracleInpainter::for_sample(&s);
        let opts = TripletOptions { condition_kind: ConditionKind::Edge, dilation_radius: None };
        let t = build_triplet(&s, &inp, &opts).unwrap();
        let fg_depth = crate::toy_world::foreground_depth_oracle(&s.scene, 32);
        assert_eq!(t.fg_condition, edge_oracle(&fg_depth));
    }

    #[test]
    fn external_record_errors() {
        let s = toy_sample(6);
        let est = DepthEstimator::untrained(0);
        let opts = TripletOptions::default();
        let rec = ExternalRecord { image: s.image.clone(), mask: None, prompt: vec![] };
        assert!(matches!(
            build_triplet_external(&rec, &MeanFillInpainter, &est, &opts),
            Err(CncError::Ingestion(_))
        ));
        let bad = ExternalRecord {
            image: s.image.clone(),
            mask: Some(Tensor::zeros(&[8, 8])),
            prompt: vec![],
        };
        assert!(matches!(
            build_triplet_external(&bad, &MeanFillInpainter, &est, &opts),
            Err(CncError::Ingestion(_))
        ));
    }

    #[test]
    fn external_record_roundtrips_with_estimator() {
        let s = toy_sample(7);
        let est = DepthEstimator::untrained(0);
        let rec = ExternalRecord {
            image: s.image.clone(),
            mask: Some(s.salient_mask.clone()),
            prompt: s.prompt.clone(),
        };
        let t = build_triplet_external(&rec, &MeanFillInpainter, &est, &TripletOptions::default())
            .unwrap();
        t.validate().unwrap();
        assert_eq!(t.fg_condition.shape(), &[32, 32]);
    }
}
