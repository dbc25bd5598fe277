//! Two-stream local condition network with channel-wise late fusion.
//!
//! Foreground and background condition maps pass through independent
//! residual conv streams, are concatenated on channels, and features are
//! extracted at four spatial scales. Each scale ends in a zero-initialized
//! 1x1 projection, so a freshly attached fuser contributes exactly nothing.
//! The extracted features enter the cloned encoder through feature
//! denormalization: normalize, then scale/shift with conv-predicted gamma
//! and beta.

use serde::{Deserialize, Serialize};

use crate::error::{CncError, Result};
use crate::nn::{Conv2dLayer, Ctx, Init, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalFuserConfig {
    /// Channels per stream before fusion.
    pub stream_width: usize,
    /// Residual conv blocks per stream.
    pub stream_blocks: usize,
    /// Channels of the four extracted scales (match the host block widths).
    pub scale_channels: [usize; 4],
    /// Pixel-to-latent downsampling applied by the stem (1 in identity-latent
    /// mode; the autoencoder factor otherwise). Must be a power of two.
    pub stem_factor: usize,
}

impl Default for LocalFuserConfig {
    fn default() -> Self {
        LocalFuserConfig {
            stream_width: 16,
            stream_blocks: 3,
            scale_channels: [32, 64, 128, 128],
            stem_factor: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct StreamParams {
    stem: Vec<Conv2dLayer>,
    blocks: Vec<(Conv2dLayer, Conv2dLayer)>,
}

/// Parameter set of the local fuser. `fg` and `bg` share architecture but
/// never weights.
#[derive(Clone, Debug)]
pub struct LocalFuserParams {
    pub config: LocalFuserConfig,
    fg: StreamParams,
    bg: StreamParams,
    extraction: Vec<Conv2dLayer>,
    zero_projections: Vec<Conv2dLayer>,
}

fn init_stream<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    config: &LocalFuserConfig,
    rng: &mut Rng,
) -> StreamParams {
    let w = config.stream_width;
    let mut stem = vec![Conv2dLayer::init(
        store,
        &format!("{name}.stem0"),
        ParamGroup::LocalFuser,
        1,
        w,
        3,
        1,
        Init::He,
        rng,
    )];
    let mut factor = config.stem_factor;
    let mut i = 1;
    while factor > 1 {
        stem.push(Conv2dLayer::init(
            store,
            &format!("{name}.stem{i}"),
            ParamGroup::LocalFuser,
            w,
            w,
            3,
            2,
            Init::He,
            rng,
        ));
        factor /= 2;
        i += 1;
    }
    let blocks = (0..config.stream_blocks)
        .map(|b| {
            (
                Conv2dLayer::init(
                    store,
                    &format!("{name}.res{b}.conv1"),
                    ParamGroup::LocalFuser,
                    w,
                    w,
                    3,
                    1,
                    Init::He,
                    rng,
                ),
                Conv2dLayer::init(
                    store,
                    &format!("{name}.res{b}.conv2"),
                    ParamGroup::LocalFuser,
                    w,
                    w,
                    3,
                    1,
                    Init::He,
                    rng,
                ),
            )
        })
        .collect();
    StreamParams { stem, blocks }
}

impl LocalFuserParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: LocalFuserConfig,
        rng: &mut Rng,
    ) -> Self {
        assert!(config.stem_factor.is_power_of_two(), "stem factor must be a power of two");
        let fg = init_stream(store, &format!("{name}.fg"), &config, rng);
        let bg = init_stream(store, &format!("{name}.bg"), &config, rng);
        let fused = 2 * config.stream_width;
        let mut extraction = Vec::new();
        let mut in_ch = fused;
        for (i, &out_ch) in config.scale_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            extraction.push(Conv2dLayer::init(
                store,
                &format!("{name}.extract{i}"),
                ParamGroup::LocalFuser,
                in_ch,
                out_ch,
                3,
                stride,
                Init::He,
                rng,
            ));
            in_ch = out_ch;
        }
        let zero_projections = config
            .scale_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                Conv2dLayer::init(
                    store,
                    &format!("{name}.zero{i}"),
                    ParamGroup::LocalFuser,
                    ch,
                    ch,
                    1,
                    1,
                    Init::Zeros,
                    rng,
                )
            })
            .collect();
        LocalFuserParams { config, fg, bg, extraction, zero_projections }
    }
}

/// Features for the four host scales (1/1, 1/2, 1/4, 1/8 of latent
/// resolution), in order fine to coarse.
pub struct LocalFeatures {
    pub scales: Vec<Var>,
}

impl LocalFeatures {
    pub fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        let mut prev: Option<Vec<usize>> = None;
        for &v in &self.scales {
            let s = tape.shape(v);
            let val = tape.value(v);
            if !val.is_finite() {
                return Err(CncError::Numeric("non-finite local feature".into()));
            }
            if let Some(p) = prev {
                if s[2] * 2 != p[2] || s[3] * 2 != p[3] {
                    return Err(CncError::shape("scales must halve spatially"));
                }
            }
            prev = Some(s);
        }
        Ok(())
    }
}

fn run_stream<T: Scalar>(cx: &Ctx<T>, stream: &StreamParams, x: Var) -> Var {
    let mut h = x;
    for (i, conv) in stream.stem.iter().enumerate() {
        h = conv.forward(cx, h);
        if i + 1 < stream.stem.len() {
            h = cx.tape.silu(h);
        }
    }
    h = cx.tape.silu(h);
    for (c1, c2) in &stream.blocks {
        let inner = cx.tape.silu(c1.forward(cx, h));
        let inner = c2.forward(cx, inner);
        h = cx.tape.silu(cx.tape.add(h, inner));
    }
    h
}

/// Run both streams independently, fuse on channels, extract four scales,
/// and apply the zero projections last.
pub fn fuse_local<T: Scalar>(
    cx: &Ctx<T>,
    fg_cond: Var,
    bg_cond: Var,
    params: &LocalFuserParams,
) -> Result<LocalFeatures> {
    let fs = cx.tape.shape(fg_cond);
    let bs = cx.tape.shape(bg_cond);
    if fs != bs {
        return Err(CncError::shape(format!(
            "condition maps disagree on resolution: {fs:?} vs {bs:?}"
        )));
    }
    if fs.len() != 4 || fs[1] != 1 {
        return Err(CncError::shape(format!("condition maps must be [B,1,H,W], got {fs:?}")));
    }
    let fg = run_stream(cx, &params.fg, fg_cond);
    let bg = run_stream(cx, &params.bg, bg_cond);
    let mut h = cx.tape.concat(&[fg, bg], 1);
    let mut scales = Vec::with_capacity(4);
    for (ext, zero) in params.extraction.iter().zip(&params.zero_projections) {
        h = cx.tape.silu(ext.forward(cx, h));
        scales.push(zero.forward(cx, h));
    }
    Ok(LocalFeatures { scales })
}

/// Feature denormalization parameters for one injection site: convolutions
/// predicting gamma and beta from the local feature.
#[derive(Clone, Copy, Debug)]
pub struct FdnLayer {
    pub gamma: Conv2dLayer,
    pub beta: Conv2dLayer,
}

impl FdnLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        local_ch: usize,
        host_ch: usize,
        rng: &mut Rng,
    ) -> Self {
        FdnLayer {
            gamma: Conv2dLayer::init(
                store,
                &format!("{name}.gamma"),
                group,
                local_ch,
                host_ch,
                3,
                1,
                Init::He,
                rng,
            ),
            beta: Conv2dLayer::init(
                store,
                &format!("{name}.beta"),
                group,
                local_ch,
                host_ch,
                3,
                1,
                Init::He,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, host: Var, local: Var) -> Result<Var> {
        fdn_modulate(
            cx.tape,
            host,
            local,
            cx.var(self.gamma.w),
            self.gamma.b.map(|b| cx.var(b)),
            cx.var(self.beta.w),
            self.beta.b.map(|b| cx.var(b)),
        )
    }
}

/// out = instance_norm(host) * (1 + gamma(local)) + beta(local).
pub fn fdn_modulate<T: Scalar>(
    tape: &Tape<T>,
    host: Var,
    local: Var,
    gamma_w: Var,
    gamma_b: Option<Var>,
    beta_w: Var,
    beta_b: Option<Var>,
) -> Result<Var> {
    let hs = tape.shape(host);
    let ls = tape.shape(local);
    if hs.len() != 4 || ls.len() != 4 || hs[0] != ls[0] || hs[2] != ls[2] || hs[3] != ls[3] {
        return Err(CncError::shape(format!(
            "host {hs:?} and local {ls:?} must share batch and spatial dims"
        )));
    }
    let gw = tape.shape(gamma_w);
    if gw[0] != hs[1] || gw[1] != ls[1] {
        return Err(CncError::shape(format!(
            "fdn conv {gw:?} incompatible with host {hs:?} / local {ls:?}"
        )));
    }
    let normalized = tape.instance_norm(host, 1e-5);
    let pad = gw[2] / 2;
    let gamma = tape.conv2d(local, gamma_w, gamma_b, 1, pad);
    let beta = tape.conv2d(local, beta_w, beta_b, 1, pad);
    let scaled = tape.mul(normalized, tape.add_scalar(gamma, T::one()));
    Ok(tape.add(scaled, beta))
}
