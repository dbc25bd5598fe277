//! Noise schedule, forward process, the noise-prediction training loss,
//! classifier-free guidance and deterministic DDIM sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{BatchConditioning, ControlledUNet, UNetConfig};
use crate::embedders::Vocabulary;
use crate::error::{CncError, Result};
use crate::global_conditioning::SoftGuidanceMode;
use crate::nn::{Ctx, ParamStore};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Linear-beta schedule with cumulative alpha products kept in f64.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.t_steps < 2 {
            return Err(CncError::config("schedule needs at least 2 timesteps"));
        }
        if !(0.0 < config.beta_start && config.beta_start < config.beta_end && config.beta_end < 1.0)
        {
            return Err(CncError::config("need 0 < beta_start < beta_end < 1"));
        }
        let n = config.t_steps;
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0f64;
        for t in 0..n {
            let beta = config.beta_start
                + (config.beta_end - config.beta_start) * t as f64 / (n - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { config, alpha_bars })
    }

    pub fn t_steps(&self) -> usize {
        self.config.t_steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)
    pub fn q_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    if t >= schedule.t_steps() {
        return Err(CncError::argument(format!("timestep {t} out of range")));
    }
    if z0.shape() != eps.shape() {
        return Err(CncError::shape("noise must match latent shape"));
    }
    let (a, b) = schedule.q_coeffs(t);
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    Ok(z0.zip(eps, |z, e| a * z + b * e))
}

/// eps_uncond + scale * (eps_cond - eps_uncond). The fixed points at scale
/// 0 and 1 are exact.
pub fn cfg_combine<T: Scalar>(
    eps_uncond: &Tensor<T>,
    eps_cond: &Tensor<T>,
    scale: T,
) -> Tensor<T> {
    if scale == T::zero() {
        return eps_uncond.clone();
    }
    if scale == T::one() {
        return eps_cond.clone();
    }
    eps_uncond.zip(eps_cond, |u, c| u + scale * (c - u))
}

/// Per-sample condition inputs for one training example or sampling request.
#[derive(Clone, Debug)]
pub struct ConditionSet {
    /// [H, W] single-channel condition maps at pixel resolution.
    pub fg_cond: Tensor<f32>,
    pub bg_cond: Tensor<f32>,
    /// [D_emb] unit-norm semantic embeddings.
    pub fg_embedding: Tensor<f32>,
    pub bg_embedding: Tensor<f32>,
    pub prompt: Vec<String>,
    /// Binary [H, W] soft-guidance mask.
    pub mask: Tensor<f32>,
    pub lambda_fg: f32,
    pub lambda_bg: f32,
    pub drop: DropFlags,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub fg_map: bool,
    pub bg_map: bool,
    pub fg_emb: bool,
    pub bg_emb: bool,
    pub text: bool,
}

impl DropFlags {
    pub const ALL: DropFlags =
        DropFlags { fg_map: true, bg_map: true, fg_emb: true, bg_emb: true, text: true };
}

impl ConditionSet {
    pub fn validate(&self) -> Result<()> {
        let hw = self.mask.shape();
        for (name, t) in [("fg_cond", &self.fg_cond), ("bg_cond", &self.bg_cond)] {
            if t.shape() != hw {
                return Err(CncError::shape(format!(
                    "{name} {:?} does not match mask {hw:?}",
                    t.shape()
                )));
            }
        }
        if !(self.lambda_fg.is_finite() && self.lambda_bg.is_finite())
            || self.lambda_fg < 0.0
            || self.lambda_bg < 0.0
        {
            return Err(CncError::argument("lambda weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Drop everything (the classifier-free unconditional branch).
    pub fn nulled(&self) -> ConditionSet {
        ConditionSet { drop: DropFlags::ALL, ..self.clone() }
    }
}

/// Per-condition dropout rates plus the all-conditions drop used to train
/// the classifier-free unconditional branch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DropoutRates {
    pub fg_map: f64,
    pub bg_map: f64,
    pub fg_emb: f64,
    pub bg_emb: f64,
    pub text: f64,
    pub all: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { fg_map: 0.1, bg_map: 0.1, fg_emb: 0.1, bg_emb: 0.1, text: 0.1, all: 0.05 }
    }
}

impl DropoutRates {
    pub const NONE: DropoutRates =
        DropoutRates { fg_map: 0.0, bg_map: 0.0, fg_emb: 0.0, bg_emb: 0.0, text: 0.0, all: 0.0 };

    pub fn sample(&self, rng: &mut Rng) -> DropFlags {
        let all = rng.gen_bool(self.all);
        let mut f = DropFlags {
            fg_map: rng.gen_bool(self.fg_map),
            bg_map: rng.gen_bool(self.bg_map),
            fg_emb: rng.gen_bool(self.fg_emb),
            bg_emb: rng.gen_bool(self.bg_emb),
            text: rng.gen_bool(self.text),
        };
        if all {
            f = DropFlags::ALL;
        }
        f
    }
}

/// Assemble per-sample condition sets into batch tensors, applying drop
/// flags: dropped maps become null (zero) maps, dropped embeddings zero
/// their lambda, dropped text becomes all pad tokens.
pub fn prepare_batch<T: Scalar>(
    conds: &[ConditionSet],
    vocab: &Vocabulary,
    config: &UNetConfig,
    mode: SoftGuidanceMode,
) -> Result<BatchConditioning<T>> {
    if conds.is_empty() {
        return Err(CncError::argument("empty condition batch"));
    }
    let b = conds.len();
    let px = config.codec.pixel_res;
    let mut text_ids = Vec::with_capacity(b * config.context_len);
    let mut fg_cond = Tensor::zeros(&[b, 1, px, px]);
    let mut bg_cond = Tensor::zeros(&[b, 1, px, px]);
    let mut fg_emb = Tensor::zeros(&[b, config.emb_dim]);
    let mut bg_emb = Tensor::zeros(&[b, config.emb_dim]);
    let mut lambda_fg = Vec::with_capacity(b);
    let mut lambda_bg = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for (i, c) in conds.iter().enumerate() {
        c.validate()?;
        if c.mask.shape() != [px, px] {
            return Err(CncError::shape(format!(
                "condition resolution {:?} does not match pixel resolution {px}",
                c.mask.shape()
            )));
        }
        let ids = if c.drop.text {
            vec![vocab.pad_id(); config.context_len]
        } else {
            vocab.tokenize(&c.prompt, config.context_len)?
        };
        text_ids.extend(ids);
        if !c.drop.fg_map {
            copy_map(&mut fg_cond, i, &c.fg_cond);
        }
        if !c.drop.bg_map {
            copy_map(&mut bg_cond, i, &c.bg_cond);
        }
        for (dst, src) in
            [(&mut fg_emb, &c.fg_embedding), (&mut bg_emb, &c.bg_embedding)]
        {
            let d = config.emb_dim;
            if src.shape() != [d] {
                return Err(CncError::shape("embedding dimension mismatch"));
            }
            for (k, &v) in src.data().iter().enumerate() {
                dst.data_mut()[i * d + k] = T::from_f64(v as f64);
            }
        }
        lambda_fg.push(if c.drop.fg_emb { T::zero() } else { T::from_f64(c.lambda_fg as f64) });
        lambda_bg.push(if c.drop.bg_emb { T::zero() } else { T::from_f64(c.lambda_bg as f64) });
        masks.push(c.mask.clone());
    }
    Ok(BatchConditioning {
        text_ids,
        fg_cond,
        bg_cond,
        fg_emb,
        bg_emb,
        lambda_fg,
        lambda_bg,
        masks,
        mode,
    })
}

fn copy_map<T: Scalar>(dst: &mut Tensor<T>, index: usize, src: &Tensor<f32>) {
    let n = src.numel();
    for (k, &v) in src.data().iter().enumerate() {
        dst.data_mut()[index * n + k] = T::from_f64(v as f64);
    }
}

/// One training example: clean latent plus its conditions.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub z0: Tensor<f32>,
    pub cond: ConditionSet,
}

/// Deterministic core of the loss: forward on pre-noised latents and the
/// mean squared error against the injected noise.
pub fn loss_for_noised<T: Scalar>(
    cx: &Ctx<T>,
    model: &ControlledUNet,
    z_t: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    cond: &BatchConditioning<T>,
) -> Result<Var> {
    let pred = model.forward(cx, z_t, ts, cond)?;
    let target = cx.tape.constant(eps.clone());
    Ok(cx.tape.mse_loss(pred, target))
}

/// Draw (t, eps, dropout) per sample, noise the latents, run the model and
/// return the scalar loss var on the tape.
#[allow(clippy::too_many_arguments)]
pub fn loss_step<T: Scalar>(
    cx: &Ctx<T>,
    model: &ControlledUNet,
    batch: &[TrainItem],
    schedule: &DiffusionSchedule,
    vocab: &Vocabulary,
    dropout: &DropoutRates,
    mode: SoftGuidanceMode,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(CncError::argument("empty training batch"));
    }
    let latent = model.config.codec.latent_shape();
    let b = batch.len();
    let mut z_t = Tensor::<T>::zeros(&[b, latent[0], latent[1], latent[2]]);
    let mut eps_all = Tensor::<T>::zeros(&[b, latent[0], latent[1], latent[2]]);
    let mut ts = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    let stride = latent.iter().product::<usize>();
    for (i, item) in batch.iter().enumerate() {
        if item.z0.shape() != latent {
            return Err(CncError::shape(format!(
                "latent {:?} does not match configured {latent:?}",
                item.z0.shape()
            )));
        }
        let t = rng.gen_range(0..schedule.t_steps());
        let eps = Tensor::<f32>::randn(&[latent[0], latent[1], latent[2]], rng);
        let zt = q_sample(&item.z0, t, &eps, schedule)?;
        for (k, &v) in zt.data().iter().enumerate() {
            z_t.data_mut()[i * stride + k] = T::from_f64(v as f64);
        }
        for (k, &v) in eps.data().iter().enumerate() {
            eps_all.data_mut()[i * stride + k] = T::from_f64(v as f64);
        }
        ts.push(t);
        let mut cond = item.cond.clone();
        cond.drop = dropout.sample(rng);
        conds.push(cond);
    }
    let prepared = prepare_batch::<T>(&conds, vocab, &model.config, mode)?;
    loss_for_noised(cx, model, &z_t, &ts, &eps_all, &prepared)
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub cond: ConditionSet,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerOptions {
    pub steps: usize,
    pub cfg_scale: f32,
    pub mode: SoftGuidanceMode,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { steps: 50, cfg_scale: 7.0, mode: SoftGuidanceMode::Additive }
    }
}

/// Deterministic DDIM (eta = 0) over a uniform-stride timestep subset, with
/// classifier-free guidance. Returns decoded images.
pub fn ddim_sample_batch(
    model: &ControlledUNet,
    store: &ParamStore<f32>,
    schedule: &DiffusionSchedule,
    vocab: &Vocabulary,
    requests: &[SampleRequest],
    opts: &SamplerOptions,
) -> Result<Vec<Tensor<f32>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    if opts.steps == 0 || opts.steps > schedule.t_steps() {
        return Err(CncError::argument(format!(
            "steps {} must be in [1, {}]",
            opts.steps,
            schedule.t_steps()
        )));
    }
    let latent = model.config.codec.latent_shape();
    let stride: usize = latent.iter().product();
    let b = requests.len();

    let mut z = Tensor::<f32>::zeros(&[b, latent[0], latent[1], latent[2]]);
    for (i, req) in requests.iter().enumerate() {
        let mut rng = crate::rng::rng_for(req.seed, "ddim-init");
        let init = Tensor::<f32>::randn(&[latent[0], latent[1], latent[2]], &mut rng);
        z.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(init.data());
    }

    let conds: Vec<ConditionSet> = requests.iter().map(|r| r.cond.clone()).collect();
    let cond_batch = prepare_batch::<f32>(&conds, vocab, &model.config, opts.mode)?;
    let nulls: Vec<ConditionSet> = conds.iter().map(|c| c.nulled()).collect();
    let null_batch = prepare_batch::<f32>(&nulls, vocab, &model.config, opts.mode)?;

    let step_stride = schedule.t_steps() / opts.steps;
    let timesteps: Vec<usize> = (0..opts.steps).map(|i| i * step_stride).rev().collect();

    for (k, &t) in timesteps.iter().enumerate() {
        let ts = vec![t; b];
        let eps_hat = {
            let tape = Tape::no_grad();
            let cx = Ctx::new(&tape, store);
            let cond_eps = model.forward(&cx, &z, &ts, &cond_batch)?;
            let cond_eps = tape.value(cond_eps).as_ref().clone();
            let tape = Tape::no_grad();
            let cx = Ctx::new(&tape, store);
            let uncond_eps = model.forward(&cx, &z, &ts, &null_batch)?;
            let uncond_eps = tape.value(uncond_eps).as_ref().clone();
            cfg_combine(&uncond_eps, &cond_eps, opts.cfg_scale)
        };
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if k + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[k + 1])
        } else {
            1.0
        };
        let (sa_t, sb_t) = (ab_t.sqrt() as f32, (1.0 - ab_t).sqrt() as f32);
        let (sa_p, sb_p) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        let zd = z.data_mut();
        let ed = eps_hat.data();
        for i in 0..zd.len() {
            let z0_hat = (zd[i] - sb_t * ed[i]) / sa_t;
            zd[i] = sa_p * z0_hat + sb_p * ed[i];
        }
    }

    (0..b)
        .map(|i| {
            let lat = Tensor::new(
                &latent,
                z.data()[i * stride..(i + 1) * stride].to_vec(),
            );
            model.config.codec.decode(&lat)
        })
        .collect()
}

pub fn ddim_sample(
    model: &ControlledUNet,
    store: &ParamStore<f32>,
    schedule: &DiffusionSchedule,
    vocab: &Vocabulary,
    request: &SampleRequest,
    opts: &SamplerOptions,
) -> Result<Tensor<f32>> {
    Ok(ddim_sample_batch(model, store, schedule, vocab, std::slice::from_ref(request), opts)?
        .remove(0))
}
