//! The latent UNet: a frozen generative prior plus a trainable cloned
//! encoder/center branch wired in through zero convolutions, feature
//! denormalization injection from the local fuser, and soft-guided
//! cross-attention from the global fuser.
//!
//! Decoder block i consumes encoder skip j with i + j = B + 1; block 1
//! consumes concat(c + zc(c'), e_B + zc(e'_B)), and the rest consume
//! concat(d_{i-1}, e_j + zc(e'_j)).

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedders;
use crate::error::{CncError, Result};
use crate::global_conditioning::{
    build_guidance_mask_batch, GlobalFuser, GlobalFuserConfig, SoftGuidanceMode, Stream,
};
use crate::local_fuser::{fuse_local, FdnLayer, LocalFuserConfig, LocalFuserParams};
use crate::nn::{
    hex_str, norm_groups, Conv2dLayer, Ctx, GroupNormLayer, Init, LayerNormLayer, LinearLayer,
    ParamGroup, ParamStore,
};
use crate::rng::Rng;
use crate::tensor::tape::{AttnMask, Var};
use crate::tensor::{position_table, timestep_embedding, Scalar, Tensor};

pub const NUM_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    /// Pixels are the latents (clamped to [0,1] on decode).
    Identity,
    /// Fixed 4x box-filter downsampling to a 4-channel latent.
    Box4,
}

/// Image <-> latent mapping. Fixed (never trained).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatentCodec {
    pub mode: CodecMode,
    pub pixel_res: usize,
}

impl LatentCodec {
    pub fn latent_shape(&self) -> [usize; 3] {
        match self.mode {
            CodecMode::Identity => [3, self.pixel_res, self.pixel_res],
            CodecMode::Box4 => [4, self.pixel_res / 4, self.pixel_res / 4],
        }
    }

    pub fn downsample_factor(&self) -> usize {
        match self.mode {
            CodecMode::Identity => 1,
            CodecMode::Box4 => 4,
        }
    }

    pub fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape();
        if s != [3, self.pixel_res, self.pixel_res] {
            return Err(CncError::shape(format!(
                "codec expects [3,{0},{0}], got {s:?}",
                self.pixel_res
            )));
        }
        match self.mode {
            CodecMode::Identity => Ok(image.clone()),
            CodecMode::Box4 => {
                let rgb = crate::tensor::area_downsample_chw(image, 4);
                let lr = self.pixel_res / 4;
                let mut out = Tensor::zeros(&[4, lr, lr]);
                out.data_mut()[..3 * lr * lr].copy_from_slice(rgb.data());
                for p in 0..lr * lr {
                    let (r, g, b) = (rgb.data()[p], rgb.data()[lr * lr + p], rgb.data()[2 * lr * lr + p]);
                    out.data_mut()[3 * lr * lr + p] = 0.299 * r + 0.587 * g + 0.114 * b;
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let expect = self.latent_shape();
        if latent.shape() != expect {
            return Err(CncError::shape(format!(
                "codec expects latent {expect:?}, got {:?}",
                latent.shape()
            )));
        }
        match self.mode {
            CodecMode::Identity => Ok(latent.map(|v| v.clamp(0.0, 1.0))),
            CodecMode::Box4 => {
                let lr = self.pixel_res / 4;
                let mut out = Tensor::zeros(&[3, self.pixel_res, self.pixel_res]);
                for ch in 0..3 {
                    let plane = &latent.data()[ch * lr * lr..(ch + 1) * lr * lr];
                    let up = bilinear_upsample(plane, lr, lr, 4);
                    out.data_mut()[ch * self.pixel_res * self.pixel_res
                        ..(ch + 1) * self.pixel_res * self.pixel_res]
                        .copy_from_slice(&up);
                }
                Ok(out.map(|v| v.clamp(0.0, 1.0)))
            }
        }
    }
}

fn bilinear_upsample(src: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0f32; oh * ow];
    for oy in 0..oh {
        let fy = ((oy as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..ow {
            let fx = ((ox as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let v = src[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * w + x1] * (1.0 - wy) * wx
                + src[y1 * w + x0] * wy * (1.0 - wx)
                + src[y1 * w + x1] * wy * wx;
            out[oy * ow + ox] = v;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of encoder (and decoder) blocks B; even, at least 4.
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub channel_mults: [usize; NUM_LEVELS],
    /// Levels carrying transformer blocks (0 = finest).
    pub attention_levels: Vec<usize>,
    /// Transformer on every block of an attention level, or only at the
    /// level boundary (last encoder block, first decoder block).
    pub transformer_per_block: bool,
    pub heads: usize,
    pub ffn_mult: usize,
    pub codec: LatentCodec,
    pub train_timesteps: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub ctx_dim: usize,
    pub n_global_tokens: usize,
    pub emb_dim: usize,
    /// Apply soft guidance in the cloned branch's cross-attention too.
    pub soft_guidance_in_clone: bool,
    pub fuser_stream_width: usize,
    pub fuser_stream_blocks: usize,
    pub global_hidden: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            encoder_blocks: 12,
            base_channels: 32,
            channel_mults: [1, 2, 4, 4],
            attention_levels: vec![2, 3],
            transformer_per_block: true,
            heads: 4,
            ffn_mult: 2,
            codec: LatentCodec { mode: CodecMode::Identity, pixel_res: 32 },
            train_timesteps: 1000,
            time_dim: 128,
            vocab_size: crate::toy_world::vocabulary().len(),
            context_len: embedders::DEFAULT_CONTEXT_LEN,
            ctx_dim: embedders::DEFAULT_CTX_DIM,
            n_global_tokens: 4,
            emb_dim: embedders::DEFAULT_EMB_DIM,
            soft_guidance_in_clone: true,
            fuser_stream_width: 16,
            fuser_stream_blocks: 3,
            global_hidden: 256,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks < 4 || self.encoder_blocks % 2 != 0 {
            return Err(CncError::config(format!(
                "encoder_blocks must be even and >= 4, got {}",
                self.encoder_blocks
            )));
        }
        if self.attention_levels.iter().any(|&l| l >= NUM_LEVELS) {
            return Err(CncError::config("attention level outside available scales"));
        }
        let latent = self.codec.latent_shape();
        if latent[1] % (1 << (NUM_LEVELS - 1)) != 0 {
            return Err(CncError::config(format!(
                "latent side {} must divide by {}",
                latent[1],
                1 << (NUM_LEVELS - 1)
            )));
        }
        if self.codec.mode == CodecMode::Box4 && self.codec.pixel_res % 32 != 0 {
            return Err(CncError::config("box codec needs pixel resolution divisible by 32"));
        }
        for l in &self.attention_levels {
            let ch = self.base_channels * self.channel_mults[*l];
            if ch % self.heads != 0 {
                return Err(CncError::config("attention channels must divide heads"));
            }
        }
        Ok(())
    }

    pub fn blocks_per_level(&self) -> [usize; NUM_LEVELS] {
        let b = self.encoder_blocks;
        let mut out = [b / NUM_LEVELS; NUM_LEVELS];
        for slot in out.iter_mut().take(b % NUM_LEVELS) {
            *slot += 1;
        }
        out
    }

    /// Level of the k-th encoder block (0-based k).
    pub fn level_of_block(&self, k: usize) -> usize {
        let per = self.blocks_per_level();
        let mut acc = 0;
        for (l, &n) in per.iter().enumerate() {
            acc += n;
            if k < acc {
                return l;
            }
        }
        NUM_LEVELS - 1
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// (decoder block i, encoder skip j), both 1-based, with i + j = B + 1.
    pub fn decoder_skip_pairs(&self) -> Vec<(usize, usize)> {
        (1..=self.encoder_blocks).map(|i| (i, self.encoder_blocks + 1 - i)).collect()
    }

    /// Spatial side of the latent at a given level.
    pub fn level_side(&self, level: usize) -> usize {
        self.codec.latent_shape()[1] >> level
    }

    /// Architecture fingerprint: checkpoints refuse to load across changes.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_str(&h.finalize())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNormLayer,
    conv1: Conv2dLayer,
    temb_proj: LinearLayer,
    gn2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        ResBlock {
            gn1: GroupNormLayer::init(store, &format!("{name}.gn1"), group, in_ch, norm_groups(in_ch)),
            conv1: Conv2dLayer::init(store, &format!("{name}.conv1"), group, in_ch, out_ch, 3, 1, Init::He, rng),
            temb_proj: LinearLayer::init(store, &format!("{name}.temb"), group, time_dim, out_ch, true, Init::He, rng),
            gn2: GroupNormLayer::init(store, &format!("{name}.gn2"), group, out_ch, norm_groups(out_ch)),
            conv2: Conv2dLayer::init(store, &format!("{name}.conv2"), group, out_ch, out_ch, 3, 1, Init::He, rng),
            skip: (in_ch != out_ch).then(|| {
                Conv2dLayer::init(store, &format!("{name}.skip"), group, in_ch, out_ch, 1, 1, Init::He, rng)
            }),
        }
    }

    fn forward<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        x: Var,
        temb: Var,
        fdn: Option<(&FdnLayer, Var)>,
    ) -> Result<Var> {
        let tape = cx.tape;
        // feature denormalization replaces the first norm at injection sites
        let mut h = match fdn {
            Some((layer, local)) => layer.forward(cx, x, local)?,
            None => self.gn1.forward(cx, x),
        };
        h = tape.silu(h);
        h = self.conv1.forward(cx, h);
        let t = self.temb_proj.forward(cx, tape.silu(temb));
        h = tape.add_broadcast_bc(h, t);
        h = self.gn2.forward(cx, h);
        h = tape.silu(h);
        h = self.conv2.forward(cx, h);
        let shortcut = match &self.skip {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        Ok(tape.add(shortcut, h))
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    gn: GroupNormLayer,
    proj_in: Conv2dLayer,
    ln1: LayerNormLayer,
    self_q: LinearLayer,
    self_k: LinearLayer,
    self_v: LinearLayer,
    self_o: LinearLayer,
    ln2: LayerNormLayer,
    cross_q: LinearLayer,
    cross_k: LinearLayer,
    cross_v: LinearLayer,
    cross_o: LinearLayer,
    ln3: LayerNormLayer,
    ff1: LinearLayer,
    ff2: LinearLayer,
    proj_out: Conv2dLayer,
    heads: usize,
}

impl TransformerBlock {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        ch: usize,
        ctx_dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut Rng,
    ) -> Self {
        let lin = |store: &mut ParamStore<T>, rng: &mut Rng, n: &str, i: usize, o: usize, bias: bool, init: Init| {
            LinearLayer::init(store, &format!("{name}.{n}"), group, i, o, bias, init, rng)
        };
        TransformerBlock {
            gn: GroupNormLayer::init(store, &format!("{name}.gn"), group, ch, norm_groups(ch)),
            proj_in: Conv2dLayer::init(store, &format!("{name}.proj_in"), group, ch, ch, 1, 1, Init::He, rng),
            ln1: LayerNormLayer::init(store, &format!("{name}.ln1"), group, ch),
            self_q: lin(store, rng, "self_q", ch, ch, false, Init::Xavier),
            self_k: lin(store, rng, "self_k", ch, ch, false, Init::Xavier),
            self_v: lin(store, rng, "self_v", ch, ch, false, Init::Xavier),
            self_o: lin(store, rng, "self_o", ch, ch, true, Init::Xavier),
            ln2: LayerNormLayer::init(store, &format!("{name}.ln2"), group, ch),
            cross_q: lin(store, rng, "cross_q", ch, ch, false, Init::Xavier),
            cross_k: lin(store, rng, "cross_k", ctx_dim, ch, false, Init::Xavier),
            cross_v: lin(store, rng, "cross_v", ctx_dim, ch, false, Init::Xavier),
            cross_o: lin(store, rng, "cross_o", ch, ch, true, Init::Xavier),
            ln3: LayerNormLayer::init(store, &format!("{name}.ln3"), group, ch),
            ff1: lin(store, rng, "ff1", ch, ch * ffn_mult, true, Init::He),
            ff2: lin(store, rng, "ff2", ch * ffn_mult, ch, true, Init::He),
            // a zero-initialized output projection keeps a fresh transformer
            // close to the identity
            proj_out: Conv2dLayer::init(store, &format!("{name}.proj_out"), group, ch, ch, 1, 1, Init::Zeros, rng),
            heads,
        }
    }

    fn forward<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        x: Var,
        context: Var,
        mask: Option<Rc<AttnMask>>,
        mode: SoftGuidanceMode,
    ) -> Var {
        let tape = cx.tape;
        let s = tape.shape(x);
        let (h, w) = (s[2], s[3]);
        let mut tokens = {
            let n = self.gn.forward(cx, x);
            let n = self.proj_in.forward(cx, n);
            tape.spatial_to_tokens(n)
        };
        // self-attention (never masked)
        {
            let t = self.ln1.forward(cx, tokens);
            let q = self.self_q.forward(cx, t);
            let k = self.self_k.forward(cx, t);
            let v = self.self_v.forward(cx, t);
            let a = tape.attention(q, k, v, self.heads, None, SoftGuidanceMode::Additive);
            let a = self.self_o.forward(cx, a);
            tokens = tape.add(tokens, a);
        }
        // soft-guided cross-attention over the extended context
        {
            let t = self.ln2.forward(cx, tokens);
            let q = self.cross_q.forward(cx, t);
            let k = self.cross_k.forward(cx, context);
            let v = self.cross_v.forward(cx, context);
            let a = tape.attention(q, k, v, self.heads, mask, mode);
            let a = self.cross_o.forward(cx, a);
            tokens = tape.add(tokens, a);
        }
        {
            let t = self.ln3.forward(cx, tokens);
            let f = self.ff1.forward(cx, t);
            let f = tape.silu(f);
            let f = self.ff2.forward(cx, f);
            tokens = tape.add(tokens, f);
        }
        let spatial = tape.tokens_to_spatial(tokens, h, w);
        let out = self.proj_out.forward(cx, spatial);
        tape.add(x, out)
    }
}

#[derive(Clone, Debug)]
struct EncBlock {
    level: usize,
    down: Option<Conv2dLayer>,
    res: ResBlock,
    attn: Option<TransformerBlock>,
}

#[derive(Clone, Debug)]
struct DecBlock {
    level: usize,
    upsample: Option<Conv2dLayer>,
    res: ResBlock,
    attn: Option<TransformerBlock>,
}

#[derive(Clone, Debug)]
struct CenterBlock {
    res1: ResBlock,
    attn: TransformerBlock,
    res2: ResBlock,
}

/// Which paths run in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub control: bool,
    pub global: bool,
}

impl Attachment {
    pub const PRIOR: Attachment = Attachment { control: false, global: false };
    pub const LOCAL: Attachment = Attachment { control: true, global: false };
    pub const FULL: Attachment = Attachment { control: true, global: true };
}

/// Batch-level conditioning inputs, already past dropout decisions.
#[derive(Clone, Debug)]
pub struct BatchConditioning<T: Scalar> {
    /// Flattened [B * context_len] token ids.
    pub text_ids: Vec<usize>,
    /// [B, 1, Hpx, Wpx]; all-zero planes encode dropped conditions.
    pub fg_cond: Tensor<T>,
    pub bg_cond: Tensor<T>,
    /// [B, emb_dim]
    pub fg_emb: Tensor<T>,
    pub bg_emb: Tensor<T>,
    pub lambda_fg: Vec<T>,
    pub lambda_bg: Vec<T>,
    /// Per-sample binary masks at pixel resolution.
    pub masks: Vec<Tensor<f32>>,
    pub mode: SoftGuidanceMode,
}

pub struct ControlledUNet {
    pub config: UNetConfig,
    stem: Conv2dLayer,
    enc: Vec<EncBlock>,
    center: CenterBlock,
    dec: Vec<DecBlock>,
    out_norm: GroupNormLayer,
    out_conv: Conv2dLayer,
    temb_l1: LinearLayer,
    temb_l2: LinearLayer,
    pub text_table: crate::nn::ParamId,
    clone_stem: Conv2dLayer,
    clone_enc: Vec<EncBlock>,
    clone_center: CenterBlock,
    zc_enc: Vec<Conv2dLayer>,
    zc_center: Conv2dLayer,
    fdn: Vec<FdnLayer>,
    pub local_fuser: LocalFuserParams,
    pub global_fuser: GlobalFuser,
    pub attachment: Attachment,
}

fn build_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    group_for: impl Fn(usize) -> ParamGroup,
    config: &UNetConfig,
    rng: &mut Rng,
) -> Vec<EncBlock> {
    let per = config.blocks_per_level();
    let mut blocks = Vec::with_capacity(config.encoder_blocks);
    let mut ch = config.base_channels;
    let mut k = 0;
    for (level, &count) in per.iter().enumerate() {
        let out_ch = config.level_channels(level);
        for b in 0..count {
            let group = group_for(k);
            let name = format!("{prefix}.b{k}");
            let down = (level > 0 && b == 0).then(|| {
                Conv2dLayer::init(store, &format!("{name}.down"), group, ch, ch, 3, 2, Init::He, rng)
            });
            let res = ResBlock::init(store, &format!("{name}.res"), group, ch, out_ch, config.time_dim, rng);
            let has_attn = config.attention_levels.contains(&level)
                && (config.transformer_per_block || b == count - 1);
            let attn = has_attn.then(|| {
                TransformerBlock::init(
                    store,
                    &format!("{name}.attn"),
                    group,
                    out_ch,
                    config.ctx_dim,
                    config.heads,
                    config.ffn_mult,
                    rng,
                )
            });
            blocks.push(EncBlock { level, down, res, attn });
            ch = out_ch;
            k += 1;
        }
    }
    blocks
}

fn build_center<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    group: ParamGroup,
    config: &UNetConfig,
    rng: &mut Rng,
) -> CenterBlock {
    let ch = config.level_channels(NUM_LEVELS - 1);
    CenterBlock {
        res1: ResBlock::init(store, &format!("{prefix}.res1"), group, ch, ch, config.time_dim, rng),
        attn: TransformerBlock::init(
            store,
            &format!("{prefix}.attn"),
            group,
            ch,
            config.ctx_dim,
            config.heads,
            config.ffn_mult,
            rng,
        ),
        res2: ResBlock::init(store, &format!("{prefix}.res2"), group, ch, ch, config.time_dim, rng),
    }
}

/// Deterministically build the full model (prior + control branch + fusers).
pub fn build_unet<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<(ControlledUNet, ParamStore<T>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = crate::rng::rng_for(seed, "unet-init");
    let latent_ch = config.codec.latent_shape()[0];

    let stem = Conv2dLayer::init(&mut store, "stem.conv", ParamGroup::Prior, latent_ch, config.base_channels, 3, 1, Init::He, &mut rng);
    let enc = build_encoder(&mut store, "enc", |_| ParamGroup::Prior, config, &mut rng);
    let center = build_center(&mut store, "center", ParamGroup::Prior, config, &mut rng);

    // decoder
    let per = config.blocks_per_level();
    let mut dec = Vec::with_capacity(config.encoder_blocks);
    let mut cur_ch = config.level_channels(NUM_LEVELS - 1);
    let mut cur_level = NUM_LEVELS - 1;
    for (i, j) in config.decoder_skip_pairs() {
        let skip_level = config.level_of_block(j - 1);
        let name = format!("dec.b{}", i - 1);
        let upsample = (skip_level < cur_level).then(|| {
            Conv2dLayer::init(&mut store, &format!("{name}.up"), ParamGroup::Prior, cur_ch, cur_ch, 3, 1, Init::He, &mut rng)
        });
        if skip_level < cur_level {
            cur_level = skip_level;
        }
        assert_eq!(cur_level, skip_level, "decoder level walk must mirror encoder");
        let skip_ch = config.level_channels(skip_level);
        let out_ch = skip_ch;
        let res = ResBlock::init(&mut store, &format!("{name}.res"), ParamGroup::Prior, cur_ch + skip_ch, out_ch, config.time_dim, &mut rng);
        // mirror of the encoder placement: attend where the paired skip does
        let b_in_level: usize = {
            let first_k: usize = per[..skip_level].iter().sum();
            j - 1 - first_k
        };
        let has_attn = config.attention_levels.contains(&skip_level)
            && (config.transformer_per_block || b_in_level == per[skip_level] - 1);
        let attn = has_attn.then(|| {
            TransformerBlock::init(
                &mut store,
                &format!("{name}.attn"),
                ParamGroup::Prior,
                out_ch,
                config.ctx_dim,
                config.heads,
                config.ffn_mult,
                &mut rng,
            )
        });
        dec.push(DecBlock { level: skip_level, upsample, res, attn });
        cur_ch = out_ch;
    }

    let out_norm = GroupNormLayer::init(&mut store, "out.gn", ParamGroup::Prior, cur_ch, norm_groups(cur_ch));
    let out_conv = Conv2dLayer::init(&mut store, "out.conv", ParamGroup::Prior, cur_ch, latent_ch, 3, 1, Init::Zeros, &mut rng);
    let sin_dim = config.time_dim / 2;
    let temb_l1 = LinearLayer::init(&mut store, "temb.l1", ParamGroup::Prior, sin_dim, config.time_dim, true, Init::He, &mut rng);
    let temb_l2 = LinearLayer::init(&mut store, "temb.l2", ParamGroup::Prior, config.time_dim, config.time_dim, true, Init::He, &mut rng);
    let text_table = store.add(
        "text.table",
        ParamGroup::Prior,
        Tensor::<T>::randn_scaled(&[config.vocab_size, config.ctx_dim], 0.02, &mut rng),
    );

    // trainable clone of stem + encoder + center
    let clone_stem = Conv2dLayer::init(&mut store, "clone.stem.conv", ParamGroup::CloneEncoder, latent_ch, config.base_channels, 3, 1, Init::He, &mut rng);
    let clone_enc = build_encoder(&mut store, "clone.enc", |_| ParamGroup::CloneEncoder, config, &mut rng);
    let clone_center = build_center(&mut store, "clone.center", ParamGroup::CloneCenter, config, &mut rng);
    let zc_enc = (0..config.encoder_blocks)
        .map(|k| {
            let ch = config.level_channels(config.level_of_block(k));
            Conv2dLayer::init(&mut store, &format!("zc.enc{k}"), ParamGroup::CloneEncoder, ch, ch, 1, 1, Init::Zeros, &mut rng)
        })
        .collect();
    let ch_top = config.level_channels(NUM_LEVELS - 1);
    let zc_center = Conv2dLayer::init(&mut store, "zc.center", ParamGroup::CloneCenter, ch_top, ch_top, 1, 1, Init::Zeros, &mut rng);

    let fuser_cfg = LocalFuserConfig {
        stream_width: config.fuser_stream_width,
        stream_blocks: config.fuser_stream_blocks,
        scale_channels: [
            config.level_channels(0),
            config.level_channels(1),
            config.level_channels(2),
            config.level_channels(3),
        ],
        stem_factor: config.codec.downsample_factor(),
    };
    let local_fuser = LocalFuserParams::init(&mut store, "local_fuser", fuser_cfg, &mut rng);
    // FDN replaces the first norm of each level's first clone block, so its
    // host width is that block's input channel count
    let fdn = (0..NUM_LEVELS)
        .map(|l| {
            let host_ch =
                if l == 0 { config.base_channels } else { config.level_channels(l - 1) };
            FdnLayer::init(
                &mut store,
                &format!("fdn.l{l}"),
                ParamGroup::LocalFuser,
                config.level_channels(l),
                host_ch,
                &mut rng,
            )
        })
        .collect();
    let gf_cfg = GlobalFuserConfig {
        emb_dim: config.emb_dim,
        ctx_dim: config.ctx_dim,
        n_tokens: config.n_global_tokens,
        hidden: config.global_hidden,
        activation: crate::global_conditioning::FuserActivation::Silu,
        bias: true,
    };
    let global_fuser = GlobalFuser::init(&mut store, "global_fuser", gf_cfg, &mut rng);

    let mut model = ControlledUNet {
        config: config.clone(),
        stem,
        enc,
        center,
        dec,
        out_norm,
        out_conv,
        temb_l1,
        temb_l2,
        text_table,
        clone_stem,
        clone_enc,
        clone_center,
        zc_enc,
        zc_center,
        fdn,
        local_fuser,
        global_fuser,
        attachment: Attachment::PRIOR,
    };
    model.clone_control(&mut store);
    Ok((model, store))
}

impl ControlledUNet {
    /// Re-snapshot the trainable clone from the current frozen weights.
    /// Fuser parameters and zero convolutions are untouched.
    pub fn clone_control<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        store.copy_prefixed("stem.", "clone.stem.");
        store.copy_prefixed("enc.", "clone.enc.");
        store.copy_prefixed("center.", "clone.center.");
    }

    pub fn set_attachment(&mut self, attachment: Attachment) {
        self.attachment = attachment;
    }

    /// Spatial sides at which cross-attention operates, coarse set.
    pub fn attention_sides(&self) -> Vec<usize> {
        let mut sides: Vec<usize> =
            self.config.attention_levels.iter().map(|&l| self.config.level_side(l)).collect();
        sides.sort_unstable();
        sides.dedup();
        sides
    }

    fn time_embedding<T: Scalar>(&self, cx: &Ctx<T>, ts: &[usize]) -> Var {
        let sin = timestep_embedding::<T>(ts, self.config.time_dim / 2);
        let v = cx.tape.constant(sin);
        let h = self.temb_l1.forward(cx, v);
        let h = cx.tape.silu(h);
        self.temb_l2.forward(cx, h)
    }

    /// Build the cross-attention context and per-resolution guidance masks.
    fn build_context<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        batch: usize,
        cond: &BatchConditioning<T>,
    ) -> Result<(Var, HashMap<usize, Rc<AttnMask>>)> {
        let cfg = &self.config;
        if cond.text_ids.len() != batch * cfg.context_len {
            return Err(CncError::shape("text id count mismatch"));
        }
        let table = cx.var(self.text_table);
        let gathered = cx.tape.gather_rows(table, Rc::new(cond.text_ids.clone()));
        let text = cx.tape.reshape(gathered, &[batch, cfg.context_len, cfg.ctx_dim]);
        let pos = position_table::<T>(cfg.context_len, cfg.ctx_dim);
        let mut pos_b = Tensor::zeros(&[batch, cfg.context_len, cfg.ctx_dim]);
        for b in 0..batch {
            pos_b.data_mut()[b * pos.numel()..(b + 1) * pos.numel()].copy_from_slice(pos.data());
        }
        let text = cx.tape.add(text, cx.tape.constant(pos_b));

        if !self.attachment.global {
            return Ok((text, HashMap::new()));
        }

        let fg_e = cx.tape.constant(cond.fg_emb.clone());
        let bg_e = cx.tape.constant(cond.bg_emb.clone());
        let y_fg = self.global_fuser.project_tokens(cx, fg_e, Stream::Foreground)?;
        let y_bg = self.global_fuser.project_tokens(cx, bg_e, Stream::Background)?;
        let y_fg = cx.tape.scale_samples(y_fg, Rc::new(cond.lambda_fg.clone()));
        let y_bg = cx.tape.scale_samples(y_bg, Rc::new(cond.lambda_bg.clone()));
        let context = cx.tape.concat(&[text, y_fg, y_bg], 1);

        if cond.masks.len() != batch {
            return Err(CncError::shape("one guidance mask per sample required"));
        }
        let mut masks = HashMap::new();
        for side in self.attention_sides() {
            let gm = build_guidance_mask_batch(
                &cond.masks,
                (side, side),
                cfg.context_len,
                cfg.n_global_tokens,
            )?;
            masks.insert(side, gm.attn_mask());
        }
        Ok((context, masks))
    }

    fn mask_for<'m>(
        &self,
        masks: &'m HashMap<usize, Rc<AttnMask>>,
        side: usize,
        in_clone: bool,
    ) -> Option<Rc<AttnMask>> {
        if !self.attachment.global {
            return None;
        }
        if in_clone && !self.config.soft_guidance_in_clone {
            return None;
        }
        masks.get(&side).cloned()
    }

    /// Epsilon prediction for a batch of noised latents.
    pub fn forward<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        z_t: &Tensor<T>,
        ts: &[usize],
        cond: &BatchConditioning<T>,
    ) -> Result<Var> {
        let tape = cx.tape;
        let cfg = &self.config;
        let latent = cfg.codec.latent_shape();
        let s = z_t.shape().to_vec();
        if s.len() != 4 || s[1] != latent[0] || s[2] != latent[1] || s[3] != latent[2] {
            return Err(CncError::shape(format!("latent batch {s:?} does not match {latent:?}")));
        }
        let batch = s[0];
        if ts.len() != batch {
            return Err(CncError::argument("one timestep per sample"));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t >= cfg.train_timesteps) {
            return Err(CncError::argument(format!(
                "timestep {bad} outside [0, {})",
                cfg.train_timesteps
            )));
        }
        if !z_t.is_finite() {
            return Err(CncError::Numeric("non-finite latents".into()));
        }

        let temb = self.time_embedding(cx, ts);
        let (context, masks) = self.build_context(cx, batch, cond)?;
        let mode = cond.mode;

        let z = tape.constant(z_t.clone());

        // frozen encoder
        let mut h = self.stem.forward(cx, z);
        let mut skips: Vec<Var> = Vec::with_capacity(cfg.encoder_blocks);
        for blk in &self.enc {
            if let Some(down) = &blk.down {
                h = down.forward(cx, h);
            }
            h = blk.res.forward(cx, h, temb, None)?;
            if let Some(attn) = &blk.attn {
                let side = cfg.level_side(blk.level);
                h = attn.forward(cx, h, context, self.mask_for(&masks, side, false), mode);
            }
            skips.push(h);
        }
        let mut c = self.center.res1.forward(cx, h, temb, None)?;
        {
            let side = cfg.level_side(NUM_LEVELS - 1);
            c = self.center.attn.forward(cx, c, context, self.mask_for(&masks, side, false), mode);
        }
        c = self.center.res2.forward(cx, c, temb, None)?;

        // control branch
        let (clone_skips, clone_c) = if self.attachment.control {
            let fg = tape.constant(cond.fg_cond.clone());
            let bg = tape.constant(cond.bg_cond.clone());
            let feats = fuse_local(cx, fg, bg, &self.local_fuser)?;
            let mut hc = self.clone_stem.forward(cx, z);
            let mut cskips = Vec::with_capacity(cfg.encoder_blocks);
            let mut seen_level = usize::MAX;
            for blk in &self.clone_enc {
                if let Some(down) = &blk.down {
                    hc = down.forward(cx, hc);
                }
                let fdn = if blk.level != seen_level {
                    seen_level = blk.level;
                    Some((&self.fdn[blk.level], feats.scales[blk.level]))
                } else {
                    None
                };
                hc = blk.res.forward(cx, hc, temb, fdn)?;
                if let Some(attn) = &blk.attn {
                    let side = cfg.level_side(blk.level);
                    hc = attn.forward(cx, hc, context, self.mask_for(&masks, side, true), mode);
                }
                cskips.push(hc);
            }
            let mut cc = self.clone_center.res1.forward(cx, hc, temb, None)?;
            {
                let side = cfg.level_side(NUM_LEVELS - 1);
                cc = self.clone_center.attn.forward(
                    cx,
                    cc,
                    context,
                    self.mask_for(&masks, side, true),
                    mode,
                );
            }
            cc = self.clone_center.res2.forward(cx, cc, temb, None)?;
            (Some(cskips), Some(cc))
        } else {
            (None, None)
        };

        // decoder with i + j = B + 1 skip pairing
        let mut d = match clone_c {
            Some(cc) => tape.add(c, self.zc_center.forward(cx, cc)),
            None => c,
        };
        for (idx, (i, j)) in cfg.decoder_skip_pairs().into_iter().enumerate() {
            debug_assert_eq!(i + j, cfg.encoder_blocks + 1);
            let blk = &self.dec[idx];
            if let Some(up) = &blk.upsample {
                d = tape.upsample_nearest2(d);
                d = up.forward(cx, d);
            }
            let mut skip = skips[j - 1];
            if let Some(cskips) = &clone_skips {
                let tapped = self.zc_enc[j - 1].forward(cx, cskips[j - 1]);
                skip = tape.add(skip, tapped);
            }
            let x = tape.concat(&[d, skip], 1);
            d = blk.res.forward(cx, x, temb, None)?;
            if let Some(attn) = &blk.attn {
                let side = cfg.level_side(blk.level);
                d = attn.forward(cx, d, context, self.mask_for(&masks, side, false), mode);
            }
        }

        let out = self.out_norm.forward(cx, d);
        let out = tape.silu(out);
        Ok(self.out_conv.forward(cx, out))
    }
}

/// All-dropped conditioning for a batch (classifier-free unconditional branch
/// and zero-init transparency checks): null maps, zero lambdas, pad text,
/// all-ones masks.
pub fn null_conditioning<T: Scalar>(
    config: &UNetConfig,
    batch: usize,
    mode: SoftGuidanceMode,
) -> BatchConditioning<T> {
    let px = config.codec.pixel_res;
    BatchConditioning {
        text_ids: vec![0; batch * config.context_len],
        fg_cond: Tensor::zeros(&[batch, 1, px, px]),
        bg_cond: Tensor::zeros(&[batch, 1, px, px]),
        fg_emb: Tensor::zeros(&[batch, config.emb_dim]),
        bg_emb: Tensor::zeros(&[batch, config.emb_dim]),
        lambda_fg: vec![T::zero(); batch],
        lambda_bg: vec![T::zero(); batch],
        masks: vec![Tensor::full(&[px, px], 1.0); batch],
        mode,
    }
}
