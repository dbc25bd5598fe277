//! Parameter storage, layer descriptors and the Adam optimizer.
//!
//! Layers hold `ParamId`s rather than data; all tensors live in a
//! `ParamStore` keyed by hierarchical names. That keeps freezing,
//! checkpointing, cloning and hashing uniform across the model.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// The pretrained generative prior: stem, encoder, center, decoder,
    /// output head, time embedding, text embedding table.
    Prior,
    /// Trainable cloned encoder blocks plus their zero-convolution taps.
    CloneEncoder,
    /// Trainable cloned center block plus its zero-convolution tap.
    CloneCenter,
    LocalFuser,
    GlobalFuser,
    /// Standalone models (depth estimator) that train outside the UNet.
    Auxiliary,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Prior,
        ParamGroup::CloneEncoder,
        ParamGroup::CloneCenter,
        ParamGroup::LocalFuser,
        ParamGroup::GlobalFuser,
        ParamGroup::Auxiliary,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Prior => "prior",
            ParamGroup::CloneEncoder => "clone_encoder",
            ParamGroup::CloneCenter => "clone_center",
            ParamGroup::LocalFuser => "local_fuser",
            ParamGroup::GlobalFuser => "global_fuser",
            ParamGroup::Auxiliary => "auxiliary",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|g| g.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

pub struct Param<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub data: Rc<Tensor<T>>,
}

pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    trainable: HashMap<ParamGroup, bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), trainable: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, data: Rc::new(t) });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].data
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable.insert(group, trainable);
    }

    pub fn freeze_all(&mut self) {
        for g in ParamGroup::ALL {
            self.trainable.insert(g, false);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        *self.trainable.get(&self.params[id.0].group).unwrap_or(&false)
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut v: Vec<ParamGroup> =
            self.trainable.iter().filter(|(_, &t)| t).map(|(&g, _)| g).collect();
        v.sort();
        v
    }

    /// Overwrite a parameter in place (optimizer step, cloning, loading).
    pub fn set_tensor(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(self.params[id.0].data.shape(), t.shape(), "set_tensor shape change");
        self.params[id.0].data = Rc::new(t);
    }

    /// Mutable access without reallocating when nothing else holds the data.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].data)
    }

    /// Copy every `src_prefix.*` parameter onto its `dst_prefix.*` counterpart.
    pub fn copy_prefixed(&mut self, src_prefix: &str, dst_prefix: &str) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.name.strip_prefix(src_prefix).and_then(|suffix| {
                    self.by_name.get(&format!("{dst_prefix}{suffix}")).map(|&dst| (ParamId(i), dst))
                })
            })
            .collect();
        for (src, dst) in pairs {
            let data = self.params[src.0].data.as_ref().clone();
            self.set_tensor(dst, data);
        }
    }

    /// SHA-256 over (name, shape, LE bytes) of every parameter in the group,
    /// in name order.
    pub fn hash_group(&self, group: ParamGroup) -> String {
        let mut items: Vec<&Param<T>> = self.params.iter().filter(|p| p.group == group).collect();
        items.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in items {
            h.update(p.name.as_bytes());
            for &d in p.data.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(p.data.numel() * T::BYTES);
            for &v in p.data.data() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        hex_str(&h.finalize())
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).filter(|&id| self.params[id.0].group == group).collect()
    }

    /// Snapshot (name, tensor) pairs of a group, for audits.
    pub fn snapshot_group(&self, group: ParamGroup) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| (p.name.clone(), p.data.as_ref().clone()))
            .collect()
    }

    /// Cast the whole store to another scalar type, preserving ids.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    data: Rc::new(p.data.cast::<U>()),
                })
                .collect(),
            by_name: self.by_name.clone(),
            trainable: self.trainable.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, data: Rc::clone(&p.data) })
                .collect(),
            by_name: self.by_name.clone(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Finite-difference check of parameter gradients for a store-backed model.
/// Samples up to `cap` elements per listed parameter; returns the worst
/// relative error against central differences.
pub fn finite_diff_check_params<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    cap: usize,
    eps: f64,
    build_loss: F,
) -> f64
where
    F: Fn(&Tape<f64>, &Ctx<f64>) -> Var,
{
    let tape = Tape::new();
    let cx = Ctx::new(&tape, store);
    let loss = build_loss(&tape, &cx);
    let grads = tape.backward(loss);
    let bound: HashMap<ParamId, Var> = cx.bound_vars().into_iter().collect();

    let eval = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, store);
        tape.value(build_loss(&tape, &cx)).item()
    };

    let mut worst = 0.0f64;
    for &pid in params {
        assert!(store.is_trainable(pid), "finite_diff_check_params needs trainable params");
        let var = bound.get(&pid).copied().expect("parameter not used by the loss");
        let ga = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(pid).shape()));
        let n = store.tensor(pid).numel();
        let stride = (n / cap.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = store.tensor(pid).data()[e];
            let step = eps * (1.0 + orig.abs());
            let mut probe = store.clone();
            {
                let t = probe.tensor_mut(pid);
                t.data_mut()[e] = orig + step;
            }
            let fp = eval(&probe);
            {
                let t = probe.tensor_mut(pid);
                t.data_mut()[e] = orig - step;
            }
            let fm = eval(&probe);
            let gn = (fp - fm) / (2.0 * step);
            let gav = ga.data()[e];
            let err = (gav - gn).abs() / (gav.abs() + gn.abs()).max(1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

pub fn hex_str(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-forward-pass context: binds store parameters to tape leaves lazily,
/// so frozen-only passes never register unused parameters.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    vars: RefCell<HashMap<ParamId, Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx { tape, store, vars: RefCell::new(HashMap::new()) }
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.borrow().get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.store.is_trainable(id) {
            self.tape.leaf_shared(Rc::clone(&p.data))
        } else {
            self.tape.constant_shared(Rc::clone(&p.data))
        };
        self.vars.borrow_mut().insert(id, v);
        v
    }

    /// Tape var for every registered parameter (used to collect gradients).
    pub fn bound_vars(&self) -> Vec<(ParamId, Var)> {
        self.vars.borrow().iter().map(|(&id, &v)| (id, v)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Kaiming-He normal, std = sqrt(2 / fan_in).
    He,
    /// Xavier normal, std = sqrt(2 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    /// Normal with explicit std.
    Normal(f64),
}

fn init_tensor<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut Rng,
) -> Tensor<T> {
    match init {
        Init::He => Tensor::randn_scaled(shape, (2.0 / fan_in as f64).sqrt(), rng),
        Init::Xavier => Tensor::randn_scaled(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => Tensor::randn_scaled(shape, std, rng),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            group,
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, out_ch * kernel * kernel, init, rng),
        );
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[out_ch]));
        Conv2dLayer { w, b: Some(b), stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.tape.conv2d(x, cx.var(self.w), self.b.map(|b| cx.var(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            group,
            init_tensor(&[out_dim, in_dim], in_dim, out_dim, init, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim])));
        LinearLayer { w, b }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.tape.linear(x, cx.var(self.w), self.b.map(|b| cx.var(b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        channels: usize,
        groups: usize,
    ) -> Self {
        let gamma = store.add(format!("{name}.g"), group, Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.b"), group, Tensor::zeros(&[channels]));
        GroupNormLayer { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.tape.group_norm(x, self.groups, cx.var(self.gamma), cx.var(self.beta), self.eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        let gamma = store.add(format!("{name}.g"), group, Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.b"), group, Tensor::zeros(&[dim]));
        LayerNormLayer { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.tape.layer_norm(x, cx.var(self.gamma), cx.var(self.beta), self.eps)
    }
}

/// Group-norm channel count heuristic: 8 groups when divisible, else the
/// largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_global_norm: Option<f64>,
    step: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_global_norm: Some(1.0),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` pairs each parameter with its gradient;
    /// iteration order is fixed by the caller for determinism.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Vec<(ParamId, Tensor<T>)>) {
        grads.sort_by(|a, b| store.get(a.0).name.cmp(&store.get(b.0).name));
        if let Some(max_norm) = self.clip_global_norm {
            let total: f64 = grads.iter().map(|(_, g)| g.sq_norm().to_f64_()).sum();
            let norm = total.sqrt();
            if norm > max_norm {
                let scale = T::from_f64(max_norm / norm);
                for (_, g) in grads.iter_mut() {
                    *g = g.scale(scale);
                }
            }
        }
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (id, g) in grads.iter() {
            let name = store.get(*id).name.clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.tensor_mut(*id);
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// (name, m, v) triplets plus step count, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(String, Tensor<T>, Tensor<T>)>) {
        let mut keys: Vec<&String> = self.m.keys().collect();
        keys.sort();
        let items = keys
            .into_iter()
            .map(|k| (k.clone(), self.m[k].clone(), self.v[k].clone()))
            .collect();
        (self.step, items)
    }

    pub fn load_state(&mut self, step: u64, items: Vec<(String, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in items {
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamGroup::Auxiliary, Tensor::full(&[4], 3.0));
        store.set_trainable(ParamGroup::Auxiliary, true);
        let mut opt = Adam::new(0.1);
        opt.clip_global_norm = None;
        for _ in 0..300 {
            let g = store.tensor(id).scale(2.0); // d/dx of x^2
            let mut grads = vec![(id, g)];
            opt.step(&mut store, &mut grads);
        }
        assert!(store.tensor(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn ctx_binds_trainable_params_as_leaves() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(0, "nn");
        let w = store.add("w", ParamGroup::LocalFuser, Tensor::randn(&[3, 3], &mut rng));
        let frozen = store.add("f", ParamGroup::Prior, Tensor::randn(&[3, 3], &mut rng));
        store.set_trainable(ParamGroup::LocalFuser, true);
        store.set_trainable(ParamGroup::Prior, false);

        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let wv = cx.var(w);
        let fv = cx.var(frozen);
        let y = tape.mul(wv, fv);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(wv).is_some());
        assert!(grads.get(fv).is_none());
    }

    #[test]
    fn copy_prefixed_transfers_weights() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, "nn");
        let src = store.add("enc.c1.w", ParamGroup::Prior, Tensor::randn(&[2, 2], &mut rng));
        let dst = store.add("clone.enc.c1.w", ParamGroup::CloneEncoder, Tensor::zeros(&[2, 2]));
        store.copy_prefixed("enc.", "clone.enc.");
        assert_eq!(store.tensor(src), store.tensor(dst));
    }

    #[test]
    fn group_hash_tracks_content() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("a", ParamGroup::Prior, Tensor::full(&[2], 1.0));
        let h1 = store.hash_group(ParamGroup::Prior);
        assert_eq!(h1, store.hash_group(ParamGroup::Prior));
        store.tensor_mut(id).data_mut()[0] = 2.0;
        assert_ne!(h1, store.hash_group(ParamGroup::Prior));
    }
}
