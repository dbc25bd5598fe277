//! Deterministic stand-ins for the text and image encoders.
//!
//! Text: learned lookup table plus fixed sinusoidal position offsets.
//! Image: frozen feature-engineered embedder (8x8 thumbnail + 16-bin color
//! histograms through a seeded random projection, unit-normalized). Freezing
//! the image embedder keeps cosine-similarity metrics training-independent.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CncError, Result};
use crate::tensor::{area_downsample_chw, position_table, Scalar, Tensor};

pub const DEFAULT_CONTEXT_LEN: usize = 8;
pub const DEFAULT_CTX_DIM: usize = 64;
pub const DEFAULT_EMB_DIM: usize = 64;
const THUMB: usize = 8;
const HIST_BINS: usize = 16;
const HIST_WEIGHT: f32 = 2.0;
pub const IMAGE_FEATURE_DIM: usize = THUMB * THUMB * 3 + 3 * HIST_BINS;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn toy() -> Self {
        Self::new(crate::toy_world::vocabulary())
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| CncError::Vocabulary(word.to_string()))
    }

    /// Token ids padded to `context_len` with the pad token.
    pub fn tokenize(&self, prompt: &[String], context_len: usize) -> Result<Vec<usize>> {
        if prompt.len() > context_len {
            return Err(CncError::argument(format!(
                "prompt has {} tokens but the context holds {}",
                prompt.len(),
                context_len
            )));
        }
        let mut ids = Vec::with_capacity(context_len);
        for w in prompt {
            ids.push(self.id(w)?);
        }
        ids.resize(context_len, self.pad_id());
        Ok(ids)
    }
}

#[derive(Clone, Debug)]
pub struct TextTokens<T: Scalar> {
    /// [T_ctx, D_ctx]
    pub tokens: Tensor<T>,
    pub ids: Vec<usize>,
}

/// Raw table lookup without position offsets (the pre-positional view).
pub fn lookup_tokens<T: Scalar>(
    ids: &[usize],
    table: &Tensor<T>,
) -> Tensor<T> {
    let d = table.shape()[1];
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    out
}

/// Table lookup plus fixed sinusoidal position offsets, padded to length.
pub fn embed_text<T: Scalar>(
    prompt: &[String],
    table: &Tensor<T>,
    vocab: &Vocabulary,
    context_len: usize,
) -> Result<TextTokens<T>> {
    if table.shape().len() != 2 || table.shape()[0] != vocab.len() {
        return Err(CncError::shape(format!(
            "embedding table {:?} does not cover vocabulary of {}",
            table.shape(),
            vocab.len()
        )));
    }
    let ids = vocab.tokenize(prompt, context_len)?;
    let d = table.shape()[1];
    let mut tokens = lookup_tokens(&ids, table);
    let pos = position_table::<T>(context_len, d);
    tokens.add_assign(&pos);
    Ok(TextTokens { tokens, ids })
}

#[derive(Clone, Debug)]
pub struct SemanticEmbedding {
    /// Unit-norm vector of dimension D_emb.
    pub vector: Tensor<f32>,
}

/// Frozen image embedder: thumbnail + color histogram features through a
/// seeded Gaussian projection, then unit normalization.
pub struct ImageEmbedder {
    pub seed: u64,
    pub dim: usize,
    projection: Tensor<f32>,
}

impl ImageEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = crate::rng::rng_for(seed, "image-embedder-projection");
        let scale = 1.0 / (IMAGE_FEATURE_DIM as f64).sqrt();
        let projection = Tensor::randn_scaled(&[dim, IMAGE_FEATURE_DIM], scale, &mut rng);
        ImageEmbedder { seed, dim, projection }
    }

    /// Raw interpretable features before projection: [thumbnail | histograms].
    pub fn features(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(CncError::shape(format!("embed_image expects [3,H,W], got {s:?}")));
        }
        if !image.is_finite() {
            return Err(CncError::Input("non-finite pixels in embed_image input".into()));
        }
        let (h, w) = (s[1], s[2]);
        if h % THUMB != 0 || w % THUMB != 0 {
            return Err(CncError::shape(format!(
                "image side must be a multiple of {THUMB}, got {h}x{w}"
            )));
        }
        let thumb = area_downsample_chw(image, h / THUMB);
        let mut feat = Vec::with_capacity(IMAGE_FEATURE_DIM);
        feat.extend_from_slice(thumb.data());
        let npix = (h * w) as f32;
        for ch in 0..3 {
            let mut hist = [0f32; HIST_BINS];
            for &v in &image.data()[ch * h * w..(ch + 1) * h * w] {
                let bin = ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[bin] += 1.0;
            }
            feat.extend(hist.iter().map(|c| c / npix * HIST_WEIGHT));
        }
        Ok(feat)
    }

    pub fn embed(&self, image: &Tensor<f32>) -> Result<SemanticEmbedding> {
        let feat = self.features(image)?;
        let mut out = vec![0f32; self.dim];
        crate::tensor::gemm_nn(
            self.dim,
            IMAGE_FEATURE_DIM,
            1,
            1.0,
            self.projection.data(),
            &feat,
            0.0,
            &mut out,
        );
        let norm = out.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12) as f32;
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(SemanticEmbedding { vector: Tensor::new(&[self.dim], out) })
    }
}

pub fn cosine_similarity(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-30)
}
