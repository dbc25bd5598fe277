//! Global conditioning: semantic embeddings projected to global tokens, the
//! extended cross-attention context, and soft guidance.
//!
//! Soft guidance builds a Boolean matrix M' = concat(J, phi(M), 1-phi(M))
//! over the attention similarity matrix so foreground/background tokens only
//! attend to their mask-designated latent positions, while text tokens attend
//! everywhere. Two masking modes are implemented: the default additive form
//! (masked logits -> -inf, masked weights exactly zero) and the literal
//! Hadamard override (masked logits -> 0), kept behind a flag because its
//! zeroed logits still receive softmax mass.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CncError, Result};
use crate::nn::{Ctx, Init, LinearLayer, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::tape::{AttnMask, MaskMode, Tape, Var};
use crate::tensor::{area_downsample_2d, Scalar, Tensor};

pub type SoftGuidanceMode = MaskMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuserActivation {
    Silu,
    /// Purely linear stack (homogeneity tests).
    Identity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlobalFuserConfig {
    pub emb_dim: usize,
    pub ctx_dim: usize,
    /// Global tokens per stream (N).
    pub n_tokens: usize,
    pub hidden: usize,
    pub activation: FuserActivation,
    pub bias: bool,
}

impl Default for GlobalFuserConfig {
    fn default() -> Self {
        GlobalFuserConfig {
            emb_dim: crate::embedders::DEFAULT_EMB_DIM,
            ctx_dim: crate::embedders::DEFAULT_CTX_DIM,
            n_tokens: 4,
            hidden: 256,
            activation: FuserActivation::Silu,
            bias: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MlpStream {
    l1: LinearLayer,
    l2: LinearLayer,
}

/// Two stacked-feedforward streams mapping D_emb -> N x D_ctx each.
/// Architecturally identical, independent weights; the final layer is
/// zero-initialized so fresh global tokens are exactly zero for any input.
#[derive(Clone, Debug)]
pub struct GlobalFuser {
    pub config: GlobalFuserConfig,
    fg: MlpStream,
    bg: MlpStream,
}

impl GlobalFuser {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: GlobalFuserConfig,
        rng: &mut Rng,
    ) -> Self {
        let stream = |store: &mut ParamStore<T>, rng: &mut Rng, sname: &str| MlpStream {
            l1: LinearLayer::init(
                store,
                &format!("{name}.{sname}.l1"),
                ParamGroup::GlobalFuser,
                config.emb_dim,
                config.hidden,
                config.bias,
                Init::He,
                rng,
            ),
            l2: LinearLayer::init(
                store,
                &format!("{name}.{sname}.l2"),
                ParamGroup::GlobalFuser,
                config.hidden,
                config.n_tokens * config.ctx_dim,
                config.bias,
                Init::Zeros,
                rng,
            ),
        };
        let fg = stream(store, rng, "fg");
        let bg = stream(store, rng, "bg");
        GlobalFuser { config, fg, bg }
    }

    /// Project a batch of embeddings [B, D_emb] to [B, N, D_ctx] on the tape.
    pub fn project_tokens<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        embeddings: Var,
        stream: Stream,
    ) -> Result<Var> {
        let shape = cx.tape.shape(embeddings);
        if shape.len() != 2 || shape[1] != self.config.emb_dim {
            return Err(CncError::shape(format!(
                "expected embeddings [B, {}], got {shape:?}",
                self.config.emb_dim
            )));
        }
        let b = shape[0];
        let s = match stream {
            Stream::Foreground => &self.fg,
            Stream::Background => &self.bg,
        };
        let mut h = s.l1.forward(cx, embeddings);
        if self.config.activation == FuserActivation::Silu {
            h = cx.tape.silu(h);
        }
        let flat = s.l2.forward(cx, h);
        Ok(cx.tape.reshape(flat, &[b, self.config.n_tokens, self.config.ctx_dim]))
    }

    /// Tensor-level projection of a single embedding, for inspection paths.
    pub fn project_tokens_tensor<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        embedding: &Tensor<T>,
        stream: Stream,
    ) -> Result<Tensor<T>> {
        if embedding.shape() != [self.config.emb_dim] {
            return Err(CncError::shape(format!(
                "expected embedding [{}], got {:?}",
                self.config.emb_dim,
                embedding.shape()
            )));
        }
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, store);
        let e = tape.constant(embedding.clone().reshaped(&[1, self.config.emb_dim]));
        let out = self.project_tokens(&cx, e, stream)?;
        Ok(tape
            .value(out)
            .as_ref()
            .clone()
            .reshaped(&[self.config.n_tokens, self.config.ctx_dim]))
    }
}

/// The concatenated cross-attention context. Row layout contract:
/// [0..text_len) text, then N foreground tokens, then N background tokens.
#[derive(Clone, Debug)]
pub struct ExtendedContext<T: Scalar> {
    pub tokens: Tensor<T>,
    pub text_len: usize,
    pub n_tokens: usize,
}

/// concat(y_text, lambda_fg * y_fg, lambda_bg * y_bg).
pub fn assemble_context<T: Scalar>(
    y_text: &Tensor<T>,
    y_fg: &Tensor<T>,
    y_bg: &Tensor<T>,
    lambda_fg: T,
    lambda_bg: T,
) -> Result<ExtendedContext<T>> {
    let d = y_text.shape().last().copied().unwrap_or(0);
    for (name, t) in [("y_text", y_text), ("y_fg", y_fg), ("y_bg", y_bg)] {
        if t.shape().len() != 2 || t.shape()[1] != d {
            return Err(CncError::shape(format!(
                "{name} must be [*, {d}], got {:?}",
                t.shape()
            )));
        }
    }
    if y_fg.shape()[0] != y_bg.shape()[0] {
        return Err(CncError::shape("foreground/background token counts differ"));
    }
    let text_len = y_text.shape()[0];
    let n_tokens = y_fg.shape()[0];
    let mut data = Vec::with_capacity((text_len + 2 * n_tokens) * d);
    data.extend_from_slice(y_text.data());
    data.extend(y_fg.data().iter().map(|&v| v * lambda_fg));
    data.extend(y_bg.data().iter().map(|&v| v * lambda_bg));
    Ok(ExtendedContext {
        tokens: Tensor::new(&[text_len + 2 * n_tokens, d], data),
        text_len,
        n_tokens,
    })
}

/// Boolean mask over the similarity matrix: J for text columns, phi(M) for
/// foreground token columns, 1-phi(M) for background token columns.
#[derive(Clone, Debug)]
pub struct GuidanceMask {
    pub mask: AttnMask,
    pub text_len: usize,
    pub n_tokens: usize,
}

impl GuidanceMask {
    pub fn attn_mask(&self) -> Rc<AttnMask> {
        Rc::new(self.mask.clone())
    }

    /// Structural invariants: text columns all true, fg/bg complementary,
    /// constant across each N-column block.
    pub fn validate(&self) -> Result<()> {
        let (t, n) = (self.text_len, self.n_tokens);
        let cols = self.mask.cols;
        if cols != t + 2 * n {
            return Err(CncError::shape("guidance mask column count mismatch"));
        }
        for b in 0..self.mask.batch {
            for r in 0..self.mask.rows {
                let row = &self.mask.bits[(b * self.mask.rows + r) * cols..][..cols];
                if row[..t].iter().any(|&x| !x) {
                    return Err(CncError::shape("text columns must be all ones"));
                }
                for k in 0..n {
                    if row[t + k] != row[t] || row[t + n + k] != row[t + n] {
                        return Err(CncError::shape("token blocks must be constant per row"));
                    }
                    if row[t + k] == row[t + n + k] {
                        return Err(CncError::shape("fg/bg blocks must be complements"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Downsample M to the attention resolution (area average, threshold 0.5),
/// flatten row-major, and repeat across the N token columns.
pub fn build_guidance_mask(
    mask: &Tensor<f32>,
    latent_hw: (usize, usize),
    text_len: usize,
    n_tokens: usize,
) -> Result<GuidanceMask> {
    build_guidance_mask_batch(std::slice::from_ref(mask), latent_hw, text_len, n_tokens)
}

/// Batch variant: one (possibly different) M per sample.
pub fn build_guidance_mask_batch(
    masks: &[Tensor<f32>],
    latent_hw: (usize, usize),
    text_len: usize,
    n_tokens: usize,
) -> Result<GuidanceMask> {
    let (lh, lw) = latent_hw;
    if lh == 0 || lw == 0 {
        return Err(CncError::shape("empty latent dims for guidance mask"));
    }
    if masks.is_empty() {
        return Err(CncError::shape("no masks supplied"));
    }
    let rows = lh * lw;
    let cols = text_len + 2 * n_tokens;
    let mut bits = Vec::with_capacity(masks.len() * rows * cols);
    for m in masks {
        let s = m.shape();
        if s.len() != 2 {
            return Err(CncError::shape("mask must be [H, W]"));
        }
        if s[0] % lh != 0 || s[1] % lw != 0 || s[0] / lh != s[1] / lw {
            return Err(CncError::shape(format!(
                "mask {s:?} is not an integer multiple of latent {latent_hw:?}"
            )));
        }
        let factor = s[0] / lh;
        let phi_src = if factor == 1 { m.clone() } else { area_downsample_2d(m, factor) };
        for p in 0..rows {
            let bit = phi_src.data()[p] >= 0.5;
            for _ in 0..text_len {
                bits.push(true);
            }
            for _ in 0..n_tokens {
                bits.push(bit);
            }
            for _ in 0..n_tokens {
                bits.push(!bit);
            }
        }
    }
    let gm = GuidanceMask {
        mask: AttnMask::new(masks.len(), rows, cols, bits),
        text_len,
        n_tokens,
    };
    gm.validate()?;
    Ok(gm)
}

/// Soft-guided cross-attention in functional form: project queries from the
/// latent tokens and keys/values from the extended context, then apply the
/// masked attention. All inputs live on the tape so gradients flow.
#[allow(clippy::too_many_arguments)]
pub fn masked_cross_attention<T: Scalar>(
    tape: &Tape<T>,
    z_tokens: Var,
    context: Var,
    mask: &GuidanceMask,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    mode: SoftGuidanceMode,
    heads: usize,
) -> Result<Var> {
    let zs = tape.shape(z_tokens);
    let cs = tape.shape(context);
    if zs.len() != 3 || cs.len() != 3 {
        return Err(CncError::shape("z_tokens and context must be [B, len, dim]"));
    }
    if cs[1] != mask.mask.cols {
        return Err(CncError::shape(format!(
            "context has {} tokens but mask has {} columns",
            cs[1], mask.mask.cols
        )));
    }
    if zs[1] != mask.mask.rows {
        return Err(CncError::shape(format!(
            "{} latent positions but mask has {} rows",
            zs[1], mask.mask.rows
        )));
    }
    let q = tape.linear(z_tokens, w_q, None);
    let k = tape.linear(context, w_k, None);
    let v = tape.linear(context, w_v, None);
    Ok(tape.attention(q, k, v, heads, Some(mask.attn_mask()), mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::tape::finite_diff_check;

    fn fuser_store(
        config: GlobalFuserConfig,
        seed: u64,
    ) -> (ParamStore<f64>, GlobalFuser) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(seed, "gf");
        let fuser = GlobalFuser::init(&mut store, "gf", config, &mut rng);
        (store, fuser)
    }

    #[test]
    fn zero_init_final_layer_gives_zero_tokens() {
        let (store, fuser) = fuser_store(GlobalFuserConfig::default(), 0);
        let mut rng = rng_for(1, "emb");
        let emb = Tensor::<f64>::randn(&[64], &mut rng);
        for stream in [Stream::Foreground, Stream::Background] {
            let toks = fuser.project_tokens_tensor(&store, &emb, stream).unwrap();
            assert!(toks.data().iter().all(|&v| v == 0.0));
        }
        let zero = Tensor::<f64>::zeros(&[64]);
        let toks = fuser.project_tokens_tensor(&store, &zero, Stream::Foreground).unwrap();
        assert!(toks.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_embedding_dim_is_shape_error() {
        let (store, fuser) = fuser_store(GlobalFuserConfig::default(), 0);
        let bad = Tensor::<f64>::zeros(&[32]);
        assert!(matches!(
            fuser.project_tokens_tensor(&store, &bad, Stream::Foreground),
            Err(CncError::Shape(_))
        ));
    }

    #[test]
    fn streams_diverge_once_weights_do() {
        // trained-checkpoint stand-in: independently randomized weights
        let cfg = GlobalFuserConfig::default();
        let (mut store, fuser) = fuser_store(cfg, 3);
        let mut rng = rng_for(9, "randomize");
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.tensor(id).shape().to_vec();
            store.set_tensor(id, Tensor::randn_scaled(&shape, 0.2, &mut rng));
        }
        let emb = Tensor::<f64>::randn(&[64], &mut rng_for(5, "emb"));
        let fg = fuser.project_tokens_tensor(&store, &emb, Stream::Foreground).unwrap();
        let bg = fuser.project_tokens_tensor(&store, &emb, Stream::Background).unwrap();
        assert!(fg.max_abs_diff(&bg) > 1e-6, "independent streams must differ");
    }

    #[test]
    fn purely_linear_stack_is_homogeneous() {
        let cfg = GlobalFuserConfig {
            activation: FuserActivation::Identity,
            bias: false,
            ..Default::default()
        };
        let (mut store, fuser) = fuser_store(cfg, 4);
        // open the zero-initialized final layer so the map is nontrivial
        let mut rng = rng_for(10, "open");
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.tensor(id).shape().to_vec();
            store.set_tensor(id, Tensor::randn_scaled(&shape, 0.1, &mut rng));
        }
        let emb = Tensor::<f64>::randn(&[64], &mut rng_for(6, "emb"));
        let t1 = fuser.project_tokens_tensor(&store, &emb, Stream::Foreground).unwrap();
        let t2 = fuser.project_tokens_tensor(&store, &emb.scale(2.0), Stream::Foreground).unwrap();
        assert!(t2.max_abs_diff(&t1.scale(2.0)) < 1e-9);
    }

    #[test]
    fn context_blocks_scale_independently() {
        let mut rng = rng_for(0, "ctx");
        let y_text = Tensor::<f64>::randn(&[8, 64], &mut rng);
        let y_fg = Tensor::<f64>::randn(&[4, 64], &mut rng);
        let y_bg = Tensor::<f64>::randn(&[4, 64], &mut rng);

        // lambdas = 1: all blocks verbatim
        let c = assemble_context(&y_text, &y_fg, &y_bg, 1.0, 1.0).unwrap();
        assert_eq!(&c.tokens.data()[..8 * 64], y_text.data());
        assert_eq!(&c.tokens.data()[8 * 64..12 * 64], y_fg.data());
        assert_eq!(&c.tokens.data()[12 * 64..], y_bg.data());
        assert_eq!(c.tokens.shape(), &[16, 64]);

        // lambda_fg = 0 annihilates rows [T, T+N)
        let c0 = assemble_context(&y_text, &y_fg, &y_bg, 0.0, 1.0).unwrap();
        assert!(c0.tokens.data()[8 * 64..12 * 64].iter().all(|&v| v == 0.0));

        // lambda_bg = 2 scales only the bg block
        let c2 = assemble_context(&y_text, &y_fg, &y_bg, 1.0, 2.0).unwrap();
        assert_eq!(&c2.tokens.data()[..12 * 64], &c.tokens.data()[..12 * 64]);
        for (a, b) in c2.tokens.data()[12 * 64..].iter().zip(y_bg.data()) {
            assert_eq!(*a, b * 2.0);
        }

        let bad = Tensor::<f64>::zeros(&[4, 32]);
        assert!(matches!(
            assemble_context(&y_text, &bad, &y_bg, 1.0, 1.0),
            Err(CncError::Shape(_))
        ));
    }

    #[test]
    fn hand_enumerated_mask_2x2() {
        // 2x2 latent, T=1, N=1, M flattens to [1,1,0,0]
        let m = Tensor::new(&[2, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
        let gm = build_guidance_mask(&m, (2, 2), 1, 1).unwrap();
        let rows: Vec<Vec<bool>> = (0..4)
            .map(|r| gm.mask.bits[r * 3..(r + 1) * 3].to_vec())
            .collect();
        assert_eq!(rows[0], vec![true, true, false]);
        assert_eq!(rows[1], vec![true, true, false]);
        assert_eq!(rows[2], vec![true, false, true]);
        assert_eq!(rows[3], vec![true, false, true]);
    }

    #[test]
    fn all_ones_mask_structure() {
        let m = Tensor::full(&[8, 8], 1.0f32);
        let gm = build_guidance_mask(&m, (4, 4), 3, 2).unwrap();
        gm.validate().unwrap();
        for r in 0..16 {
            let row = &gm.mask.bits[r * 7..(r + 1) * 7];
            assert!(row[..3].iter().all(|&x| x));
            assert!(row[3] && row[4], "fg block all true");
            assert!(!row[5] && !row[6], "bg block all false");
        }
    }

    #[test]
    fn empty_latent_is_shape_error() {
        let m = Tensor::full(&[8, 8], 1.0f32);
        assert!(matches!(build_guidance_mask(&m, (0, 4), 1, 1), Err(CncError::Shape(_))));
    }

    #[test]
    fn downsampling_thresholds_at_half() {
        let mut m = Tensor::zeros(&[4, 4]);
        // top-left 2x2 block: 2 of 4 pixels set -> avg 0.5 -> counted as fg
        m.data_mut()[0] = 1.0;
        m.data_mut()[1] = 1.0;
        // bottom-right block: 1 of 4 -> 0.25 -> bg
        m.data_mut()[3 * 4 + 3] = 1.0;
        let gm = build_guidance_mask(&m, (2, 2), 1, 1).unwrap();
        assert!(gm.mask.bits[0 * 3 + 1], "0.5 average rounds to foreground");
        assert!(!gm.mask.bits[3 * 3 + 1]);
    }

    fn hand_attention_setup(
        mode: SoftGuidanceMode,
    ) -> (Tensor<f64>, GuidanceMask) {
        // S == 0 via W_Q = 0; mask rows alternate [1,1,0] / [1,0,1]
        let m = Tensor::new(&[2, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
        let gm = build_guidance_mask(&m, (2, 2), 1, 1).unwrap();
        let tape = Tape::no_grad();
        let d = 4usize;
        let z = tape.constant(Tensor::<f64>::zeros(&[1, 4, d]));
        let ctx_tokens = tape.constant(Tensor::<f64>::randn(&[1, 3, d], &mut rng_for(0, "ctx")));
        let w_q = tape.constant(Tensor::zeros(&[d, d]));
        let w_k = tape.constant(Tensor::randn(&[d, d], &mut rng_for(1, "wk")));
        let q = tape.linear(z, w_q, None);
        let k = tape.linear(ctx_tokens, w_k, None);
        let weights = tape.attention_weights(
            &tape.value(q),
            &tape.value(k),
            1,
            Some(&gm.mask),
            mode,
        );
        (weights, gm)
    }

    #[test]
    fn hand_softmax_additive_mode() {
        let (w, _) = hand_attention_setup(SoftGuidanceMode::Additive);
        // fg rows: [0.5, 0.5, 0.0] exactly
        for r in 0..2 {
            assert_eq!(w.data()[r * 3], 0.5);
            assert_eq!(w.data()[r * 3 + 1], 0.5);
            assert_eq!(w.data()[r * 3 + 2], 0.0);
        }
        // bg rows: [0.5, 0.0, 0.5]
        for r in 2..4 {
            assert_eq!(w.data()[r * 3], 0.5);
            assert_eq!(w.data()[r * 3 + 1], 0.0);
            assert_eq!(w.data()[r * 3 + 2], 0.5);
        }
    }

    #[test]
    fn hand_softmax_hadamard_literal_quirk() {
        let (w, _) = hand_attention_setup(SoftGuidanceMode::Hadamard);
        // all logits zero after the Hadamard product: uniform over all 3
        for r in 0..4 {
            for c in 0..3 {
                assert!((w.data()[r * 3 + c] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_true_mask_is_a_noop() {
        let mut rng = rng_for(2, "noop");
        let tape = Tape::<f64>::no_grad();
        let z = tape.constant(Tensor::randn(&[2, 6, 8], &mut rng));
        let ctx_t = tape.constant(Tensor::randn(&[2, 5, 8], &mut rng));
        let w_q = tape.constant(Tensor::randn(&[8, 8], &mut rng));
        let w_k = tape.constant(Tensor::randn(&[8, 8], &mut rng));
        let w_v = tape.constant(Tensor::randn(&[8, 8], &mut rng));
        let q = tape.linear(z, w_q, None);
        let k = tape.linear(ctx_t, w_k, None);
        let v = tape.linear(ctx_t, w_v, None);
        let all = AttnMask::all_true(6, 5);
        let masked = tape.attention(q, k, v, 2, Some(Rc::new(all)), MaskMode::Additive);
        let unmasked = tape.attention(q, k, v, 2, None, MaskMode::Additive);
        assert_eq!(tape.value(masked).as_ref(), tape.value(unmasked).as_ref());
    }

    #[test]
    fn zero_leak_and_row_stochasticity_randomized() {
        let mut rng = rng_for(7, "leak");
        for trial in 0..10 {
            use rand::Rng as _;
            let lh = rng.gen_range(1..=8usize);
            let lw = rng.gen_range(1..=8usize);
            let t_len = rng.gen_range(1..=8usize);
            let n = rng.gen_range(1..=4usize);
            let heads = 8;
            let d = 16;
            let mut m = Tensor::<f32>::zeros(&[lh, lw]);
            for v in m.data_mut().iter_mut() {
                *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            }
            let gm = build_guidance_mask(&m, (lh, lw), t_len, n).unwrap();
            let tape = Tape::<f64>::no_grad();
            let q = Tensor::randn(&[1, lh * lw, d], &mut rng);
            let k = Tensor::randn(&[1, t_len + 2 * n, d], &mut rng);
            for mode in [MaskMode::Additive, MaskMode::Hadamard] {
                let w = tape.attention_weights(&q, &k, heads, Some(&gm.mask), mode);
                for hd in 0..heads {
                    for r in 0..lh * lw {
                        let row =
                            &w.data()[(hd * lh * lw + r) * (t_len + 2 * n)..][..t_len + 2 * n];
                        let sum: f64 = row.iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum} trial {trial}");
                        assert!(row[..t_len].iter().all(|&x| x > 0.0), "text ubiquity");
                        if mode == MaskMode::Additive {
                            let bit = m.data()[r] >= 0.5;
                            let (dead_lo, dead_hi) =
                                if bit { (t_len + n, t_len + 2 * n) } else { (t_len, t_len + n) };
                            assert!(
                                row[dead_lo..dead_hi].iter().all(|&x| x == 0.0),
                                "masked block must carry exactly zero weight"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn masked_cross_attention_gradients() {
        let m = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]);
        let gm = build_guidance_mask(&m, (2, 2), 2, 1).unwrap();
        for mode in [MaskMode::Additive, MaskMode::Hadamard] {
            let gm2 = gm.mask.clone();
            let err = finite_diff_check(
                &[
                    Tensor::randn(&[1, 4, 8], &mut rng_for(0, "z")),
                    Tensor::randn(&[1, 4, 8], &mut rng_for(1, "c")),
                    Tensor::randn(&[8, 8], &mut rng_for(2, "wq")),
                    Tensor::randn(&[8, 8], &mut rng_for(3, "wk")),
                    Tensor::randn(&[8, 8], &mut rng_for(4, "wv")),
                ],
                &[true, true, true, true, true],
                |tp, v| {
                    let gmask = GuidanceMask { mask: gm2.clone(), text_len: 2, n_tokens: 1 };
                    let out =
                        masked_cross_attention(tp, v[0], v[1], &gmask, v[2], v[3], v[4], mode, 2)
                            .unwrap();
                    tp.mse_loss(out, v[0])
                },
                1e-5,
            );
            assert!(err < 1e-5, "masked_cross_attention grad err {err} mode {mode:?}");
        }
    }

    #[test]
    fn context_mask_column_mismatch_is_shape_error() {
        let m = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]);
        let gm = build_guidance_mask(&m, (2, 2), 2, 1).unwrap();
        let tape = Tape::<f64>::no_grad();
        let mut rng = rng_for(0, "mm");
        let z = tape.constant(Tensor::randn(&[1, 4, 8], &mut rng));
        let ctx_t = tape.constant(Tensor::randn(&[1, 9, 8], &mut rng)); // wrong token count
        let w = tape.constant(Tensor::randn(&[8, 8], &mut rng));
        assert!(matches!(
            masked_cross_attention(&tape, z, ctx_t, &gm, w, w, w, MaskMode::Additive, 2),
            Err(CncError::Shape(_))
        ));
    }
}
