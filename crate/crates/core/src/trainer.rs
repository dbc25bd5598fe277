//! Staged training: prior pretrain -> local stage -> global stage -> joint
//! finetune, with per-stage freeze contracts, deterministic data order, and
//! a versioned binary checkpoint container with bitwise round-trips.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_unet, Attachment, ControlledUNet, UNetConfig};
use crate::diffusion::{
    loss_step, ConditionSet, DiffusionSchedule, DropFlags, DropoutRates, ScheduleConfig, TrainItem,
};
use crate::embedders::{ImageEmbedder, Vocabulary};
use crate::error::{CncError, Result};
use crate::global_conditioning::SoftGuidanceMode;
use crate::nn::{Adam, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::triplets::ImageTriplet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prior,
    Local,
    Global,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Prior, Stage::Local, Stage::Global, Stage::Finetune];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Prior => "prior",
            Stage::Local => "local",
            Stage::Global => "global",
            Stage::Finetune => "finetune",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Self::ALL.iter().copied().find(|st| st.name() == s)
    }

    pub fn prerequisite(&self) -> Option<Stage> {
        match self {
            Stage::Prior => None,
            Stage::Local => Some(Stage::Prior),
            Stage::Global => Some(Stage::Local),
            Stage::Finetune => Some(Stage::Global),
        }
    }

    pub fn attachment(&self) -> Attachment {
        match self {
            Stage::Prior => Attachment::PRIOR,
            Stage::Local => Attachment::LOCAL,
            Stage::Global | Stage::Finetune => Attachment::FULL,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: DropoutRates,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSpecs {
    pub prior: StageSpec,
    pub local: StageSpec,
    pub global: StageSpec,
    pub finetune: StageSpec,
}

impl Default for StageSpecs {
    fn default() -> Self {
        let text_only = DropoutRates {
            fg_map: 0.0,
            bg_map: 0.0,
            fg_emb: 0.0,
            bg_emb: 0.0,
            text: 0.1,
            all: 0.05,
        };
        StageSpecs {
            prior: StageSpec {
                epochs: 20,
                batch_size: 16,
                learning_rate: 1e-4,
                dropout: text_only,
            },
            local: StageSpec {
                epochs: 15,
                batch_size: 16,
                learning_rate: 1e-4,
                dropout: DropoutRates::default(),
            },
            global: StageSpec {
                epochs: 15,
                batch_size: 16,
                learning_rate: 1e-4,
                dropout: DropoutRates::default(),
            },
            finetune: StageSpec {
                epochs: 5,
                batch_size: 16,
                learning_rate: 1e-5,
                dropout: DropoutRates::default(),
            },
        }
    }
}

impl StageSpecs {
    pub fn get(&self, stage: Stage) -> &StageSpec {
        match stage {
            Stage::Prior => &self.prior,
            Stage::Local => &self.local,
            Stage::Global => &self.global,
            Stage::Finetune => &self.finetune,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub stages: StageSpecs,
    pub seed: u64,
    /// Open-question switch: also train the cloned encoder/center during the
    /// global stage (default: global fuser only).
    pub global_stage_trains_clone: bool,
    pub soft_guidance_mode: SoftGuidanceMode,
    pub image_embedder_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            stages: StageSpecs::default(),
            seed: 0,
            global_stage_trains_clone: false,
            soft_guidance_mode: SoftGuidanceMode::Additive,
            image_embedder_seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.train_timesteps != self.schedule.t_steps {
            return Err(CncError::config(
                "unet.train_timesteps must equal schedule.t_steps",
            ));
        }
        Ok(())
    }

    pub fn trainable_groups(&self, stage: Stage) -> Vec<ParamGroup> {
        match stage {
            Stage::Prior => vec![ParamGroup::Prior],
            Stage::Local => {
                vec![ParamGroup::CloneEncoder, ParamGroup::CloneCenter, ParamGroup::LocalFuser]
            }
            Stage::Global => {
                let mut g = vec![ParamGroup::GlobalFuser];
                if self.global_stage_trains_clone {
                    g.push(ParamGroup::CloneEncoder);
                    g.push(ParamGroup::CloneCenter);
                }
                g
            }
            Stage::Finetune => vec![
                ParamGroup::CloneEncoder,
                ParamGroup::CloneCenter,
                ParamGroup::LocalFuser,
                ParamGroup::GlobalFuser,
            ],
        }
    }
}

/// Build training items from triplets: encode sources to latents and embed
/// the source/background exemplars for the global streams.
pub fn train_items_from_triplets(
    triplets: &[ImageTriplet],
    config: &TrainerConfig,
    embedder: &ImageEmbedder,
) -> Result<Vec<TrainItem>> {
    triplets
        .iter()
        .map(|t| {
            Ok(TrainItem {
                z0: config.unet.codec.encode(&t.source)?,
                cond: ConditionSet {
                    fg_cond: t.fg_condition.clone(),
                    bg_cond: t.bg_condition.clone(),
                    fg_embedding: embedder.embed(&t.source)?.vector,
                    bg_embedding: embedder.embed(&t.background)?.vector,
                    prompt: t.prompt.clone(),
                    mask: t.mask.clone(),
                    lambda_fg: 1.0,
                    lambda_bg: 1.0,
                    drop: DropFlags::default(),
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: &'static str,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
    pub start_loss: f64,
    pub end_loss: f64,
}

/// Mean over the first and last max(10, 5%) steps of a loss curve.
pub fn smoothed_endpoints(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 20).max(10).min(losses.len().max(1));
    let head: f64 = losses.iter().take(k).sum::<f64>() / k as f64;
    let tail: f64 = losses.iter().rev().take(k).sum::<f64>() / k as f64;
    (head, tail)
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub model: ControlledUNet,
    pub store: ParamStore<f32>,
    pub schedule: DiffusionSchedule,
    pub vocab: Vocabulary,
    pub completed: Option<Stage>,
    pub step: u64,
    opt: Adam<f32>,
    rng: Rng,
    /// Frozen-prior fingerprint captured when the prior stage finishes.
    pub prior_hash: Option<String>,
}

impl Trainer {
    pub fn fresh(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = build_unet::<f32>(&config.unet, config.seed)?;
        let schedule = DiffusionSchedule::new(config.schedule.clone())?;
        let rng = crate::rng::rng_for(config.seed, "trainer");
        Ok(Trainer {
            opt: Adam::new(config.stages.prior.learning_rate),
            model,
            store,
            schedule,
            vocab: Vocabulary::toy(),
            completed: None,
            step: 0,
            rng,
            prior_hash: None,
            config,
        })
    }

    pub fn group_hashes(&self) -> BTreeMap<&'static str, String> {
        ParamGroup::ALL
            .iter()
            .map(|g| (g.name(), self.store.hash_group(*g)))
            .collect()
    }

    /// Run one stage of the curriculum over the training items.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        items: &[TrainItem],
        mut on_step: impl FnMut(&StepLog),
        ckpt_dir: Option<&Path>,
    ) -> Result<StageReport> {
        if items.is_empty() {
            return Err(CncError::argument("no training items"));
        }
        if self.completed != stage.prerequisite() && self.completed != Some(stage) {
            return Err(CncError::Staging(format!(
                "stage `{}` requires completed `{:?}`, trainer is at `{:?}`",
                stage.name(),
                stage.prerequisite().map(|s| s.name()),
                self.completed.map(|s| s.name()),
            )));
        }
        // entering the local stage snapshots the trained prior into the clone
        if stage == Stage::Local && self.completed == Some(Stage::Prior) {
            self.model.clone_control(&mut self.store);
        }
        if stage.prerequisite() == self.completed && stage != Stage::Prior {
            // stage boundary: fresh optimizer at the stage's learning rate
            self.opt = Adam::new(self.config.stages.get(stage).learning_rate);
        }
        let spec = self.config.stages.get(stage).clone();
        self.opt.lr = spec.learning_rate;
        self.model.set_attachment(stage.attachment());
        self.store.freeze_all();
        for g in self.config.trainable_groups(stage) {
            self.store.set_trainable(g, true);
        }

        let stage_rng_label = format!("stage-{}", stage.name());
        let mut rng = crate::rng::rng_for(self.config.seed, &stage_rng_label);
        let t0 = Instant::now();
        let mut losses = Vec::new();
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut best = f64::INFINITY;
        for epoch in 0..spec.epochs {
            crate::toy_world::shuffle(&mut order, &mut rng);
            for chunk in order.chunks(spec.batch_size) {
                let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
                let (loss, mut pairs) = {
                    let tape = crate::tensor::tape::Tape::new();
                    let cx = crate::nn::Ctx::new(&tape, &self.store);
                    let loss_var = loss_step(
                        &cx,
                        &self.model,
                        &batch,
                        &self.schedule,
                        &self.vocab,
                        &spec.dropout,
                        self.config.soft_guidance_mode,
                        &mut rng,
                    )?;
                    let loss = tape.value(loss_var).item() as f64;
                    let grads = tape.backward(loss_var);
                    let mut pairs = Vec::new();
                    for (id, var) in cx.bound_vars() {
                        if self.store.is_trainable(id) {
                            if let Some(g) = grads.get(var) {
                                pairs.push((id, g.clone()));
                            }
                        }
                    }
                    (loss, pairs)
                };
                self.opt.step(&mut self.store, &mut pairs);
                self.step += 1;
                losses.push(loss);
                on_step(&StepLog {
                    step: self.step,
                    stage: stage.name(),
                    loss,
                    lr: spec.learning_rate,
                    wall_time: t0.elapsed().as_secs_f64(),
                });
            }
            // per-epoch checkpoints: last plus best-by-epoch-mean
            if let Some(dir) = ckpt_dir {
                let steps_per_epoch = items.len().div_ceil(spec.batch_size);
                let epoch_losses = &losses[losses.len() - steps_per_epoch.min(losses.len())..];
                let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
                let _ = epoch;
                self.completed_partial_save(stage, dir, "last")?;
                if mean < best {
                    best = mean;
                    self.completed_partial_save(stage, dir, "best")?;
                }
            }
        }
        self.completed = Some(stage);
        if stage == Stage::Prior {
            self.prior_hash = Some(self.store.hash_group(ParamGroup::Prior));
        }
        let (start_loss, end_loss) = smoothed_endpoints(&losses);
        Ok(StageReport {
            stage,
            losses,
            wall_seconds: t0.elapsed().as_secs_f64(),
            start_loss,
            end_loss,
        })
    }

    fn completed_partial_save(&self, stage: Stage, dir: &Path, tag: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{}-{}.ckpt", stage.name(), tag));
        self.save_checkpoint_as(&path, Some(stage))?;
        Ok(path)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.save_checkpoint_as(path, self.completed)
    }

    fn save_checkpoint_as(&self, path: &Path, stage: Option<Stage>) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(
            &mut buf,
            &self.config,
            stage,
            self.step,
            &self.store,
            &self.opt,
            &self.rng,
            self.prior_hash.as_deref(),
        )?;
        atomic_write(path, &buf)
    }

    /// Load a checkpoint; the stored architecture hash must match `config`.
    pub fn load_checkpoint(path: &Path, config: &TrainerConfig) -> Result<Trainer> {
        config.validate()?;
        let bytes = std::fs::read(path)?;
        let parsed = read_checkpoint(&bytes)?;
        if parsed.arch_hash != config.unet.architecture_hash() {
            return Err(CncError::Incompatible(format!(
                "checkpoint was built for architecture {}, requested {}",
                &parsed.arch_hash[..12],
                &config.unet.architecture_hash()[..12]
            )));
        }
        let (model, mut store) = build_unet::<f32>(&config.unet, config.seed)?;
        if store.len() != parsed.params.len() {
            return Err(CncError::CheckpointLoad(format!(
                "parameter count mismatch: built {}, stored {}",
                store.len(),
                parsed.params.len()
            )));
        }
        for (name, tensor) in parsed.params {
            let id = store
                .id_of(&name)
                .ok_or_else(|| CncError::CheckpointLoad(format!("unknown parameter `{name}`")))?;
            store.set_tensor(id, tensor);
        }
        let mut opt = Adam::new(config.stages.prior.learning_rate);
        opt.load_state(parsed.opt_step, parsed.opt_state);
        let mut rng = Rng::from_seed(parsed.rng_seed);
        rng.set_word_pos(parsed.rng_word_pos);
        Ok(Trainer {
            config: config.clone(),
            model,
            store,
            schedule: DiffusionSchedule::new(config.schedule.clone())?,
            vocab: Vocabulary::toy(),
            completed: parsed.stage,
            step: parsed.step,
            opt,
            rng,
            prior_hash: parsed.prior_hash,
        })
    }

    /// Read only the embedded config snapshot of a checkpoint file.
    pub fn peek_config(path: &Path) -> Result<TrainerConfig> {
        let bytes = std::fs::read(path)?;
        let parsed = read_checkpoint(&bytes)?;
        Ok(parsed.config)
    }
}

/// Standalone named-tensor container (auxiliary models like the depth
/// estimator); same LE layout as checkpoint sections.
pub fn save_tensor_blobs(path: &Path, tag: &str, items: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"CNCBLOB1");
    write_section(&mut out, "tag", tag.as_bytes());
    let mut body = Vec::new();
    write_u64(&mut body, items.len() as u64);
    for (name, t) in items {
        write_tensor_entry(&mut body, name, t);
    }
    write_section(&mut out, "blobs", &body);
    atomic_write(path, &out)
}

pub fn load_tensor_blobs(path: &Path, expect_tag: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != b"CNCBLOB1" {
        return Err(CncError::CheckpointLoad("not a tensor blob file".into()));
    }
    let rest = &bytes[8..];
    let mut cur = std::io::Cursor::new(rest);
    let tag = read_named_section(&mut cur, "tag")?;
    if tag != expect_tag.as_bytes() {
        return Err(CncError::Incompatible(format!(
            "blob file holds `{}`, expected `{expect_tag}`",
            String::from_utf8_lossy(&tag)
        )));
    }
    let body = read_named_section(&mut cur, "blobs")?;
    let mut bc = std::io::Cursor::new(body.as_slice());
    let n = read_u64(&mut bc, "blobs")?;
    (0..n).map(|_| read_tensor_entry(&mut bc, "blobs")).collect()
}

/// Atomic write: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- checkpoint container ----

const MAGIC: &[u8; 8] = b"CNCCKPT1";
const VERSION: u32 = 1;

struct ParsedCheckpoint {
    arch_hash: String,
    stage: Option<Stage>,
    step: u64,
    config: TrainerConfig,
    params: Vec<(String, Tensor<f32>)>,
    opt_step: u64,
    opt_state: Vec<(String, Tensor<f32>, Tensor<f32>)>,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
    prior_hash: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn write_checkpoint(
    out: &mut Vec<u8>,
    config: &TrainerConfig,
    stage: Option<Stage>,
    step: u64,
    store: &ParamStore<f32>,
    opt: &Adam<f32>,
    rng: &Rng,
    prior_hash: Option<&str>,
) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    write_section(out, "arch", config.unet.architecture_hash().as_bytes());
    write_section(out, "stage", stage.map(|s| s.name()).unwrap_or("none").as_bytes());
    write_section(out, "step", &step.to_le_bytes());
    write_section(out, "config", &serde_json::to_vec(config)?);
    write_section(out, "prior_hash", prior_hash.unwrap_or("none").as_bytes());

    let mut params = Vec::new();
    let mut names: Vec<&str> = Vec::new();
    for id in store.ids() {
        names.push(&store.get(id).name);
        let _ = id;
    }
    names.sort();
    write_u64(&mut params, names.len() as u64);
    for name in names {
        let id = store.id_of(name).unwrap();
        write_tensor_entry(&mut params, name, store.tensor(id));
    }
    write_section(out, "params", &params);

    let (opt_step, items) = opt.state();
    let mut optbuf = Vec::new();
    write_u64(&mut optbuf, opt_step);
    write_u64(&mut optbuf, items.len() as u64);
    for (name, m, v) in items {
        write_tensor_entry(&mut optbuf, &name, &m);
        write_tensor_entry(&mut optbuf, &name, &v);
    }
    write_section(out, "optim", &optbuf);

    let mut rngbuf = Vec::new();
    rngbuf.extend_from_slice(&rng.get_seed());
    rngbuf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    write_section(out, "rng", &rngbuf);

    write_section(out, "end", b"");
    Ok(())
}

fn read_checkpoint(bytes: &[u8]) -> Result<ParsedCheckpoint> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| CncError::CheckpointLoad("file too short for magic header".into()))?;
    if &magic != MAGIC {
        return Err(CncError::CheckpointLoad("bad magic; not a checkpoint file".into()));
    }
    let mut ver = [0u8; 4];
    cur.read_exact(&mut ver)
        .map_err(|_| CncError::CheckpointLoad("missing version".into()))?;
    if u32::from_le_bytes(ver) != VERSION {
        return Err(CncError::Incompatible(format!(
            "checkpoint version {} unsupported (expected {VERSION})",
            u32::from_le_bytes(ver)
        )));
    }

    let arch = read_named_section(&mut cur, "arch")?;
    let stage_raw = read_named_section(&mut cur, "stage")?;
    let step_raw = read_named_section(&mut cur, "step")?;
    let config_raw = read_named_section(&mut cur, "config")?;
    let prior_raw = read_named_section(&mut cur, "prior_hash")?;
    let params_raw = read_named_section(&mut cur, "params")?;
    let opt_raw = read_named_section(&mut cur, "optim")?;
    let rng_raw = read_named_section(&mut cur, "rng")?;
    read_named_section(&mut cur, "end")?;

    let stage_name = String::from_utf8_lossy(&stage_raw).to_string();
    let stage = if stage_name == "none" { None } else { Stage::from_name(&stage_name) };
    if stage.is_none() && stage_name != "none" {
        return Err(CncError::CheckpointLoad(format!("unknown stage `{stage_name}`")));
    }
    let step = u64::from_le_bytes(
        step_raw
            .as_slice()
            .try_into()
            .map_err(|_| CncError::CheckpointLoad("malformed step section".into()))?,
    );
    let config: TrainerConfig = serde_json::from_slice(&config_raw)?;

    let mut pc = std::io::Cursor::new(params_raw.as_slice());
    let n = read_u64(&mut pc, "params")?;
    let mut params = Vec::with_capacity(n as usize);
    for _ in 0..n {
        params.push(read_tensor_entry(&mut pc, "params")?);
    }

    let mut oc = std::io::Cursor::new(opt_raw.as_slice());
    let opt_step = read_u64(&mut oc, "optim")?;
    let n = read_u64(&mut oc, "optim")?;
    let mut opt_state = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (name, m) = read_tensor_entry(&mut oc, "optim")?;
        let (name2, v) = read_tensor_entry(&mut oc, "optim")?;
        if name != name2 {
            return Err(CncError::CheckpointLoad("optimizer m/v name mismatch".into()));
        }
        opt_state.push((name, m, v));
    }

    if rng_raw.len() != 48 {
        return Err(CncError::CheckpointLoad("malformed rng section".into()));
    }
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&rng_raw[..32]);
    let rng_word_pos = u128::from_le_bytes(rng_raw[32..48].try_into().unwrap());

    let prior_name = String::from_utf8_lossy(&prior_raw).to_string();
    Ok(ParsedCheckpoint {
        arch_hash: String::from_utf8_lossy(&arch).to_string(),
        stage,
        step,
        config,
        params,
        opt_step,
        opt_state,
        rng_seed,
        rng_word_pos,
        prior_hash: (prior_name != "none").then_some(prior_name),
    })
}

fn write_section(out: &mut Vec<u8>, name: &str, body: &[u8]) {
    write_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    write_u64(out, body.len() as u64);
    out.extend_from_slice(body);
}

fn read_named_section(cur: &mut std::io::Cursor<&[u8]>, expect: &str) -> Result<Vec<u8>> {
    let err = |what: &str| CncError::CheckpointLoad(format!("truncated while reading {what} of section `{expect}`"));
    let name_len = read_u64(cur, expect)? as usize;
    let mut name = vec![0u8; name_len];
    cur.read_exact(&mut name).map_err(|_| err("name"))?;
    let name = String::from_utf8_lossy(&name).to_string();
    if name != expect {
        return Err(CncError::CheckpointLoad(format!(
            "expected section `{expect}`, found `{name}`"
        )));
    }
    let body_len = read_u64(cur, expect)? as usize;
    let mut body = vec![0u8; body_len];
    cur.read_exact(&mut body).map_err(|_| err("body"))?;
    Ok(body)
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u64(cur: &mut std::io::Cursor<&[u8]>, section: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b).map_err(|_| {
        CncError::CheckpointLoad(format!("truncated integer in section `{section}`"))
    })?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensor_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    write_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    write_u64(out, t.shape().len() as u64);
    for &d in t.shape() {
        write_u64(out, d as u64);
    }
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    write_u64(out, bytes.len() as u64);
    out.extend_from_slice(&bytes);
}

fn read_tensor_entry(
    cur: &mut std::io::Cursor<&[u8]>,
    section: &str,
) -> Result<(String, Tensor<f32>)> {
    let err =
        |what: &str| CncError::CheckpointLoad(format!("truncated {what} in section `{section}`"));
    let name_len = read_u64(cur, section)? as usize;
    let mut name = vec![0u8; name_len];
    cur.read_exact(&mut name).map_err(|_| err("tensor name"))?;
    let rank = read_u64(cur, section)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(cur, section)? as usize);
    }
    let byte_len = read_u64(cur, section)? as usize;
    let mut bytes = vec![0u8; byte_len];
    cur.read_exact(&mut bytes).map_err(|_| err("tensor data"))?;
    if byte_len != shape.iter().product::<usize>() * 4 {
        return Err(CncError::CheckpointLoad(format!(
            "tensor byte length disagrees with shape in section `{section}`"
        )));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(f32::read_le).collect();
    Ok((String::from_utf8_lossy(&name).to_string(), Tensor::new(&shape, data)))
}
