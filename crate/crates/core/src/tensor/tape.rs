//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops append nodes in execution order, so reverse iteration is a valid
//! topological order for backpropagation. Gradients are only propagated
//! along paths that can reach a trainable leaf, which lets a forward pass
//! through frozen blocks skip their weight gradients entirely.
//!
//! Parallelism lives inside ops (rayon over the batch axis); the graph
//! itself is single-threaded and all cross-sample reductions run in a
//! fixed order, so results are bitwise independent of thread count.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use super::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvSpec, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// How a Boolean mask enters the attention similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskMode {
    /// softmax(S + log M'): masked logits are -inf, masked weights exactly 0.
    Additive,
    /// softmax(S (x) M'): the literal Hadamard override; masked logits become 0.
    Hadamard,
}

/// Boolean attention mask, broadcast across heads. `batch` is 1 (shared) or B.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), batch * rows * cols);
        AttnMask { batch, rows, cols, bits }
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        AttnMask { batch: 1, rows, cols, bits: vec![true; rows * cols] }
    }

    fn row(&self, b: usize, r: usize) -> &[bool] {
        let bi = if self.batch == 1 { 0 } else { b };
        let base = (bi * self.rows + r) * self.cols;
        &self.bits[base..base + self.cols]
    }
}

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    reaches_param: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
    reaches: &'a [bool],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.reaches[v.id] {
            return;
        }
        match &mut self.grads[v.id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are produced for it.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(Rc::new(t), self.grad_enabled, None)
    }

    pub fn leaf_shared(&self, t: Rc<Tensor<T>>) -> Var {
        self.push(t, self.grad_enabled, None)
    }

    /// Non-trainable input: gradients never flow into or through it alone.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(Rc::new(t), false, None)
    }

    pub fn constant_shared(&self, t: Rc<Tensor<T>>) -> Var {
        self.push(t, false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    fn push(&self, value: Rc<Tensor<T>>, reaches: bool, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, reaches_param: reaches, backward });
        Var { id: nodes.len() - 1 }
    }

    fn reaches(&self, parents: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|p| nodes[p.id].reaches_param)
    }

    fn push_op<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor<T>, &mut GradSink<T>) + 'static,
    {
        let reaches = self.grad_enabled && self.reaches(parents);
        let bf: Option<BackwardFn<T>> = if reaches { Some(Box::new(backward)) } else { None };
        self.push(Rc::new(value), reaches, bf)
    }

    /// Backpropagate from a scalar loss; returns gradients for all reachable vars.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward() needs a scalar loss");
        let reaches: Vec<bool> = nodes.iter().map(|nd| nd.reaches_param).collect();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if reaches[loss.id] {
            grads[loss.id] = Some(Tensor::scalar(T::one()));
        }
        for id in (0..n).rev() {
            if grads[id].is_none() {
                continue;
            }
            let bf = nodes[id].backward.take();
            if let Some(f) = bf {
                let g = grads[id].take().unwrap();
                let mut sink = GradSink { grads: &mut grads, reaches: &reaches };
                f(&g, &mut sink);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.add(&bv);
        self.push_op(out, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.sub(&bv);
        self.push_op(out, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.scale(-T::one()));
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.mul(&bv);
        self.push_op(out, &[a, b], move |g, sink| {
            sink.add(a, g.mul(&bv));
            sink.add(b, g.mul(&av));
        })
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let av = self.value(a);
        self.push_op(av.scale(c), &[a], move |g, sink| sink.add(a, g.scale(c)))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let av = self.value(a);
        self.push_op(av.map(|x| x + c), &[a], move |g, sink| sink.add(a, g.clone()))
    }

    /// Scale each sample of a batched tensor [B, ..] by its own factor.
    pub fn scale_samples(&self, a: Var, scales: Rc<Vec<T>>) -> Var {
        let av = self.value(a);
        let b = av.shape()[0];
        assert_eq!(scales.len(), b, "one scale per sample");
        let stride = av.numel() / b;
        let mut out = av.as_ref().clone();
        for (bi, &s) in scales.iter().enumerate() {
            out.data_mut()[bi * stride..(bi + 1) * stride].iter_mut().for_each(|v| *v = *v * s);
        }
        let scales_b = Rc::clone(&scales);
        self.push_op(out, &[a], move |g, sink| {
            let mut gx = g.clone();
            for (bi, &s) in scales_b.iter().enumerate() {
                gx.data_mut()[bi * stride..(bi + 1) * stride]
                    .iter_mut()
                    .for_each(|v| *v = *v * s);
            }
            sink.add(a, gx);
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x * sigmoid_s(x));
        let saved = Rc::clone(&av);
        self.push_op(out, &[a], move |g, sink| {
            let d = saved.map(|x| {
                let s = sigmoid_s(x);
                s * (T::one() + x * (T::one() - s))
            });
            sink.add(a, g.mul(&d));
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(sigmoid_s);
        let saved = out.clone();
        self.push_op(out, &[a], move |g, sink| {
            let d = saved.map(|y| y * (T::one() - y));
            sink.add(a, g.mul(&d));
        })
    }

    // ---- shape plumbing ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old_shape = av.shape().to_vec();
        let out = av.as_ref().clone().reshaped(shape);
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.clone().reshaped(&old_shape));
        })
    }

    /// [B,C,H,W] -> [B, H*W, C]
    pub fn spatial_to_tokens(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.shape();
        assert_eq!(s.len(), 4, "spatial_to_tokens expects NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[b, h * w, c]);
        permute_bchw_to_btc(av.data(), out.data_mut(), b, c, h * w);
        self.push_op(out, &[a], move |g, sink| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            permute_btc_to_bchw(g.data(), gx.data_mut(), b, c, h * w);
            sink.add(a, gx);
        })
    }

    /// [B, H*W, C] -> [B,C,H,W]
    pub fn tokens_to_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let s = av.shape();
        assert_eq!(s.len(), 3, "tokens_to_spatial expects [B, HW, C]");
        let (b, hw, c) = (s[0], s[1], s[2]);
        assert_eq!(hw, h * w);
        let mut out = Tensor::zeros(&[b, c, h, w]);
        permute_btc_to_bchw(av.data(), out.data_mut(), b, c, hw);
        self.push_op(out, &[a], move |g, sink| {
            let mut gx = Tensor::zeros(&[b, hw, c]);
            permute_bchw_to_btc(g.data(), gx.data_mut(), b, c, hw);
            sink.add(a, gx);
        })
    }

    /// Concatenate along `dim`; all other dims must match.
    pub fn concat(&self, parts: &[Var], dim: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let base = values[0].shape().to_vec();
        let mut dim_sizes = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(base.iter()).enumerate() {
                if d != dim {
                    assert_eq!(a, b, "concat non-target dim mismatch");
                }
            }
            dim_sizes.push(s[dim]);
        }
        let total: usize = dim_sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[dim] = total;
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for o in 0..outer {
                let mut off = 0;
                for (v, &ds) in values.iter().zip(&dim_sizes) {
                    let chunk = ds * inner;
                    let src = &v.data()[o * chunk..(o + 1) * chunk];
                    let dst_base = o * total * inner + off * inner;
                    od[dst_base..dst_base + chunk].copy_from_slice(src);
                    off += ds;
                }
            }
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.push_op(out, parts, move |g, sink| {
            for (idx, &p) in parts_owned.iter().enumerate() {
                let ds = shapes[idx][dim];
                let mut gp = Tensor::zeros(&shapes[idx]);
                {
                    let gpd = gp.data_mut();
                    let off: usize = shapes[..idx].iter().map(|s| s[dim]).sum();
                    for o in 0..outer {
                        let chunk = ds * inner;
                        let src_base = o * total * inner + off * inner;
                        gpd[o * chunk..(o + 1) * chunk]
                            .copy_from_slice(&g.data()[src_base..src_base + chunk]);
                    }
                }
                sink.add(p, gp);
            }
        })
    }

    /// Nearest-neighbor 2x spatial upsampling of NCHW.
    pub fn upsample_nearest2(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            let id = av.data();
            for bc in 0..b * c {
                let src = &id[bc * h * w..(bc + 1) * h * w];
                let dst = &mut od[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = src[y * w + x];
                        let r0 = (2 * y) * 2 * w + 2 * x;
                        let r1 = (2 * y + 1) * 2 * w + 2 * x;
                        dst[r0] = v;
                        dst[r0 + 1] = v;
                        dst[r1] = v;
                        dst[r1 + 1] = v;
                    }
                }
            }
        }
        self.push_op(out, &[a], move |g, sink| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            {
                let gd = gx.data_mut();
                let gs = g.data();
                for bc in 0..b * c {
                    let src = &gs[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let dst = &mut gd[bc * h * w..(bc + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let r0 = (2 * y) * 2 * w + 2 * x;
                            let r1 = (2 * y + 1) * 2 * w + 2 * x;
                            dst[y * w + x] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
                        }
                    }
                }
            }
            sink.add(a, gx);
        })
    }

    /// x: [B,C,H,W] plus per-sample channel vector v: [B,C].
    pub fn add_broadcast_bc(&self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        let s = xv.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(vv.shape(), &[b, c]);
        let mut out = xv.as_ref().clone();
        {
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let add = vv.data()[bi * c + ci];
                    let base = (bi * c + ci) * h * w;
                    od[base..base + h * w].iter_mut().for_each(|p| *p = *p + add);
                }
            }
        }
        self.push_op(out, &[x, v], move |g, sink| {
            sink.add(x, g.clone());
            let mut gv = Tensor::zeros(&[b, c]);
            {
                let gd = gv.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        gd[bi * c + ci] = g.data()[base..base + h * w].iter().copied().sum();
                    }
                }
            }
            sink.add(v, gv);
        })
    }

    /// Row lookup: table [V, D], ids flattened -> out [len(ids), D].
    pub fn gather_rows(&self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let s = tv.shape();
        assert_eq!(s.len(), 2);
        let (v_rows, d) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        {
            let od = out.data_mut();
            for (i, &id) in ids.iter().enumerate() {
                assert!(id < v_rows, "gather id {} out of range {}", id, v_rows);
                od[i * d..(i + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
            }
        }
        let ids_b = Rc::clone(&ids);
        self.push_op(out, &[table], move |g, sink| {
            let mut gt = Tensor::zeros(&[v_rows, d]);
            {
                let gd = gt.data_mut();
                for (i, &id) in ids_b.iter().enumerate() {
                    let src = &g.data()[i * d..(i + 1) * d];
                    let dst = &mut gd[id * d..(id + 1) * d];
                    for (a2, b2) in dst.iter_mut().zip(src) {
                        *a2 = *a2 + *b2;
                    }
                }
            }
            sink.add(table, gt);
        })
    }

    // ---- dense / conv ----

    /// x: [.., Din] -> [.., Dout]  with w: [Dout, Din], optional bias [Dout].
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let ws = wv.shape();
        assert_eq!(ws.len(), 2);
        let (dout, din) = (ws[0], ws[1]);
        let xs = xv.shape();
        assert_eq!(*xs.last().unwrap(), din, "linear input dim mismatch");
        let rows = xv.numel() / din;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&out_shape);
        gemm_nt(rows, din, dout, T::one(), xv.data(), wv.data(), T::zero(), out.data_mut());
        if let Some(bias) = b {
            let bv = self.value(bias);
            assert_eq!(bv.shape(), &[dout]);
            let od = out.data_mut();
            for r in 0..rows {
                for (o, &bb) in od[r * dout..(r + 1) * dout].iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        let parents: Vec<Var> = match b {
            Some(bias) => vec![x, w, bias],
            None => vec![x, w],
        };
        let (xv_b, wv_b) = (Rc::clone(&xv), Rc::clone(&wv));
        let xs_b = xs.to_vec();
        self.push_op(out, &parents, move |g, sink| {
            // dx = g @ w
            let mut gx = Tensor::zeros(&xs_b);
            gemm_nn(rows, dout, din, T::one(), g.data(), wv_b.data(), T::zero(), gx.data_mut());
            sink.add(x, gx);
            // dw = g^T @ x
            let mut gw = Tensor::zeros(&[dout, din]);
            gemm_tn(dout, rows, din, T::one(), g.data(), xv_b.data(), T::zero(), gw.data_mut());
            sink.add(w, gw);
            if let Some(bias) = b {
                let mut gb = Tensor::zeros(&[dout]);
                {
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        for (acc, &gg) in gbd.iter_mut().zip(&g.data()[r * dout..(r + 1) * dout]) {
                            *acc = *acc + gg;
                        }
                    }
                }
                sink.add(bias, gb);
            }
        })
    }

    /// NCHW convolution via im2col + GEMM. w: [Cout, Cin, k, k].
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,k,k]");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (bsz, cin, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let spec = ConvSpec { in_ch: cin, out_ch: cout, kernel: k, stride, pad };
        let (ho, wo) = spec.out_hw(h, w_dim);
        let ckk = cin * k * k;
        let bias_v = b.map(|bias| self.value(bias));
        if let Some(bv) = &bias_v {
            assert_eq!(bv.shape(), &[cout]);
        }

        let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
        {
            let wd = wv.data();
            let xd = xv.data();
            let bias = bias_v.as_ref().map(|bv| bv.data().to_vec());
            out.data_mut()
                .par_chunks_mut(cout * ho * wo)
                .enumerate()
                .for_each(|(bi, out_b)| {
                    let mut cols = vec![T::zero(); ckk * ho * wo];
                    im2col(&xd[bi * cin * h * w_dim..(bi + 1) * cin * h * w_dim], cin, h, w_dim, &spec, &mut cols);
                    gemm_nn(cout, ckk, ho * wo, T::one(), wd, &cols, T::zero(), out_b);
                    if let Some(bias) = &bias {
                        for co in 0..cout {
                            let add = bias[co];
                            out_b[co * ho * wo..(co + 1) * ho * wo]
                                .iter_mut()
                                .for_each(|p| *p = *p + add);
                        }
                    }
                });
        }

        let parents: Vec<Var> = match b {
            Some(bias) => vec![x, w, bias],
            None => vec![x, w],
        };
        let (xv_b, wv_b) = (Rc::clone(&xv), Rc::clone(&wv));
        self.push_op(out, &parents, move |g, sink| {
            let gd = g.data();
            let xd = xv_b.data();
            let wd = wv_b.data();
            // per-sample partials, then a fixed-order reduction
            let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..bsz)
                .into_par_iter()
                .map(|bi| {
                    let g_b = &gd[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
                    let x_b = &xd[bi * cin * h * w_dim..(bi + 1) * cin * h * w_dim];
                    // dcols = w^T @ g_b
                    let mut dcols = vec![T::zero(); ckk * ho * wo];
                    gemm_tn(ckk, cout, ho * wo, T::one(), wd, g_b, T::zero(), &mut dcols);
                    let mut dx_b = vec![T::zero(); cin * h * w_dim];
                    col2im(&dcols, cin, h, w_dim, &spec, &mut dx_b);
                    // dw_b = g_b @ cols^T (recompute cols)
                    let mut cols = dcols; // reuse allocation
                    im2col(x_b, cin, h, w_dim, &spec, &mut cols);
                    let mut dw_b = vec![T::zero(); cout * ckk];
                    gemm_nt(cout, ho * wo, ckk, T::one(), g_b, &cols, T::zero(), &mut dw_b);
                    let mut db_b = vec![T::zero(); cout];
                    for co in 0..cout {
                        db_b[co] = g_b[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
                    }
                    (dx_b, dw_b, db_b)
                })
                .collect();

            let mut gx = Tensor::zeros(&[bsz, cin, h, w_dim]);
            let mut gw = Tensor::zeros(&[cout, cin, k, k]);
            let mut gb = Tensor::zeros(&[cout]);
            {
                let gxd = gx.data_mut();
                for (bi, (dx_b, dw_b, db_b)) in partials.iter().enumerate() {
                    gxd[bi * cin * h * w_dim..(bi + 1) * cin * h * w_dim].copy_from_slice(dx_b);
                    for (acc, &v) in gw.data_mut().iter_mut().zip(dw_b) {
                        *acc = *acc + v;
                    }
                    for (acc, &v) in gb.data_mut().iter_mut().zip(db_b) {
                        *acc = *acc + v;
                    }
                }
            }
            sink.add(x, gx);
            sink.add(w, gw);
            if let Some(bias) = b {
                sink.add(bias, gb);
            }
        })
    }

    // ---- normalization ----

    /// GroupNorm with affine parameters. x: [B,C,H,W], gamma/beta: [C].
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c % groups, 0, "channels must divide groups");
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let gsize = (c / groups) * h * w;
        let epst = T::from_f64(eps);

        let mut xhat = Tensor::zeros(&s);
        let mut inv_std = Tensor::zeros(&[bsz, groups]);
        {
            let xd = xv.data();
            let xh = xhat.data_mut();
            let isd = inv_std.data_mut();
            for bi in 0..bsz {
                for gi in 0..groups {
                    let base = bi * c * h * w + gi * gsize;
                    let chunk = &xd[base..base + gsize];
                    let n = T::from_f64(gsize as f64);
                    let mean = chunk.iter().copied().sum::<T>() / n;
                    let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let is = T::one() / (var + epst).sqrt();
                    isd[bi * groups + gi] = is;
                    for (o, &v) in xh[base..base + gsize].iter_mut().zip(chunk) {
                        *o = (v - mean) * is;
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&s);
        {
            let od = out.data_mut();
            let xh = xhat.data();
            for bi in 0..bsz {
                for ci in 0..c {
                    let ga = gv.data()[ci];
                    let be = bv.data()[ci];
                    let base = (bi * c + ci) * h * w;
                    for (o, &v) in od[base..base + h * w].iter_mut().zip(&xh[base..base + h * w]) {
                        *o = v * ga + be;
                    }
                }
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let (xhat_b, inv_std_b, gv_b) = (Rc::clone(&xhat), Rc::clone(&inv_std), Rc::clone(&gv));
        self.push_op(out, &[x, gamma, beta], move |g, sink| {
            let gd = g.data();
            let xh = xhat_b.data();
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            {
                let ggd = ggamma.data_mut();
                let gbd = gbeta.data_mut();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for (&gg, &xx) in gd[base..base + h * w].iter().zip(&xh[base..base + h * w]) {
                            sg = sg + gg;
                            sgx = sgx + gg * xx;
                        }
                        gbd[ci] = gbd[ci] + sg;
                        ggd[ci] = ggd[ci] + sgx;
                    }
                }
            }
            let mut gx = Tensor::zeros(&[bsz, c, h, w]);
            {
                let gxd = gx.data_mut();
                let n = T::from_f64(gsize as f64);
                for bi in 0..bsz {
                    for gi in 0..groups {
                        let base = bi * c * h * w + gi * gsize;
                        let is = inv_std_b.data()[bi * groups + gi];
                        // weighted upstream grad: gg = g * gamma (per channel)
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        let cpg = c / groups;
                        for cc in 0..cpg {
                            let ga = gv_b.data()[gi * cpg + cc];
                            let cbase = base + cc * h * w;
                            for (&gg, &xx) in
                                gd[cbase..cbase + h * w].iter().zip(&xh[cbase..cbase + h * w])
                            {
                                sum_gg = sum_gg + gg * ga;
                                sum_ggx = sum_ggx + gg * ga * xx;
                            }
                        }
                        let mean_gg = sum_gg / n;
                        let mean_ggx = sum_ggx / n;
                        for cc in 0..cpg {
                            let ga = gv_b.data()[gi * cpg + cc];
                            let cbase = base + cc * h * w;
                            for i in 0..h * w {
                                let gg = gd[cbase + i] * ga;
                                let xx = xh[cbase + i];
                                gxd[cbase + i] = is * (gg - mean_gg - xx * mean_ggx);
                            }
                        }
                    }
                }
            }
            sink.add(x, gx);
            sink.add(gamma, ggamma);
            sink.add(beta, gbeta);
        })
    }

    /// Per-(sample, channel) normalization over spatial dims, no affine part.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let epst = T::from_f64(eps);
        let mut xhat = Tensor::zeros(&s);
        let mut inv_std = Tensor::zeros(&[bsz, c]);
        {
            let xd = xv.data();
            let xh = xhat.data_mut();
            let isd = inv_std.data_mut();
            let n = T::from_f64(hw as f64);
            for bc in 0..bsz * c {
                let chunk = &xd[bc * hw..(bc + 1) * hw];
                let mean = chunk.iter().copied().sum::<T>() / n;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + epst).sqrt();
                isd[bc] = is;
                for (o, &v) in xh[bc * hw..(bc + 1) * hw].iter_mut().zip(chunk) {
                    *o = (v - mean) * is;
                }
            }
        }
        let out = xhat.clone();
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        self.push_op(out, &[x], move |g, sink| {
            let gd = g.data();
            let xh = xhat.data();
            let mut gx = Tensor::zeros(&[bsz, c, h, w]);
            {
                let gxd = gx.data_mut();
                let n = T::from_f64(hw as f64);
                for bc in 0..bsz * c {
                    let base = bc * hw;
                    let is = inv_std.data()[bc];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..hw {
                        sum_g = sum_g + gd[base + i];
                        sum_gx = sum_gx + gd[base + i] * xh[base + i];
                    }
                    let mean_g = sum_g / n;
                    let mean_gx = sum_gx / n;
                    for i in 0..hw {
                        gxd[base + i] = is * (gd[base + i] - mean_g - xh[base + i] * mean_gx);
                    }
                }
            }
            sink.add(x, gx);
        })
    }

    /// LayerNorm over the last dim. x: [.., D], gamma/beta: [D].
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let s = xv.shape().to_vec();
        let d = *s.last().unwrap();
        assert_eq!(gv.shape(), &[d]);
        assert_eq!(bv.shape(), &[d]);
        let rows = xv.numel() / d;
        let epst = T::from_f64(eps);
        let mut xhat = Tensor::zeros(&s);
        let mut inv_std = vec![T::zero(); rows];
        {
            let xd = xv.data();
            let xh = xhat.data_mut();
            let n = T::from_f64(d as f64);
            for r in 0..rows {
                let chunk = &xd[r * d..(r + 1) * d];
                let mean = chunk.iter().copied().sum::<T>() / n;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + epst).sqrt();
                inv_std[r] = is;
                for (o, &v) in xh[r * d..(r + 1) * d].iter_mut().zip(chunk) {
                    *o = (v - mean) * is;
                }
            }
        }
        let mut out = Tensor::zeros(&s);
        {
            let od = out.data_mut();
            let xh = xhat.data();
            for r in 0..rows {
                for i in 0..d {
                    od[r * d + i] = xh[r * d + i] * gv.data()[i] + bv.data()[i];
                }
            }
        }
        let xhat = Rc::new(xhat);
        let gv_b = Rc::clone(&gv);
        self.push_op(out, &[x, gamma, beta], move |g, sink| {
            let gd = g.data();
            let xh = xhat.data();
            let mut ggamma = Tensor::zeros(&[d]);
            let mut gbeta = Tensor::zeros(&[d]);
            let mut gx = Tensor::zeros(&s);
            {
                let ggd = ggamma.data_mut();
                let gbd = gbeta.data_mut();
                let gxd = gx.data_mut();
                let n = T::from_f64(d as f64);
                for r in 0..rows {
                    let base = r * d;
                    let is = inv_std[r];
                    let mut sum_gg = T::zero();
                    let mut sum_ggx = T::zero();
                    for i in 0..d {
                        let gg = gd[base + i] * gv_b.data()[i];
                        sum_gg = sum_gg + gg;
                        sum_ggx = sum_ggx + gg * xh[base + i];
                        ggd[i] = ggd[i] + gd[base + i] * xh[base + i];
                        gbd[i] = gbd[i] + gd[base + i];
                    }
                    let mean_gg = sum_gg / n;
                    let mean_ggx = sum_ggx / n;
                    for i in 0..d {
                        let gg = gd[base + i] * gv_b.data()[i];
                        gxd[base + i] = is * (gg - mean_gg - xh[base + i] * mean_ggx);
                    }
                }
            }
            sink.add(x, gx);
            sink.add(gamma, ggamma);
            sink.add(beta, gbeta);
        })
    }

    // ---- attention ----

    /// Multi-head attention with optional Boolean masking of the similarity
    /// matrix. q: [B,i,C], k/v: [B,j,C]; the mask broadcasts across heads.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Rc<AttnMask>>,
        mode: MaskMode,
    ) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let qs = qv.shape().to_vec();
        let ks = kv.shape().to_vec();
        assert_eq!(qs.len(), 3);
        assert_eq!(ks.len(), 3);
        assert_eq!(vv.shape(), ks.as_slice());
        let (bsz, i_len, c) = (qs[0], qs[1], qs[2]);
        let j_len = ks[1];
        assert_eq!(ks[0], bsz);
        assert_eq!(ks[2], c);
        assert_eq!(c % heads, 0, "channels must divide heads");
        let dh = c / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        if let Some(m) = &mask {
            assert!(m.batch == 1 || m.batch == bsz, "mask batch mismatch");
            assert_eq!(m.rows, i_len, "mask rows mismatch");
            assert_eq!(m.cols, j_len, "mask cols mismatch");
        }

        let mut out: Tensor<T> = Tensor::zeros(&[bsz, i_len, c]);
        let mut attn: Tensor<T> = Tensor::zeros(&[bsz, heads, i_len, j_len]);
        {
            let qd = qv.data();
            let kd = kv.data();
            let vd = vv.data();
            let mask_ref = mask.as_deref();
            let out_chunks = out.data_mut().par_chunks_mut(i_len * c);
            let attn_chunks = attn.data_mut().par_chunks_mut(heads * i_len * j_len);
            out_chunks.zip(attn_chunks).enumerate().for_each(|(bi, (out_b, attn_b))| {
                for hd in 0..heads {
                    let a_h = &mut attn_b[hd * i_len * j_len..(hd + 1) * i_len * j_len];
                    unsafe {
                        // S = scale * Q_h @ K_h^T
                        T::gemm_raw(
                            i_len, dh, j_len, scale,
                            qd.as_ptr().add(bi * i_len * c + hd * dh), c as isize, 1,
                            kd.as_ptr().add(bi * j_len * c + hd * dh), 1, c as isize,
                            T::zero(),
                            a_h.as_mut_ptr(), j_len as isize, 1,
                        );
                    }
                    for r in 0..i_len {
                        let row = &mut a_h[r * j_len..(r + 1) * j_len];
                        let bits = mask_ref.map(|m| m.row(bi, r));
                        masked_softmax_row(row, bits, mode);
                    }
                    unsafe {
                        // out_h = A @ V_h
                        T::gemm_raw(
                            i_len, j_len, dh, T::one(),
                            a_h.as_ptr(), j_len as isize, 1,
                            vd.as_ptr().add(bi * j_len * c + hd * dh), c as isize, 1,
                            T::zero(),
                            out_b.as_mut_ptr().add(hd * dh), c as isize, 1,
                        );
                    }
                }
            });
        }

        let attn = Rc::new(attn);
        let attn_b = Rc::clone(&attn);
        let (qv_b, kv_b, vv_b) = (Rc::clone(&qv), Rc::clone(&kv), Rc::clone(&vv));
        let mask_b = mask.clone();
        self.push_op(out, &[q, k, v], move |g, sink| {
            let gd = g.data();
            let ad = attn_b.data();
            let qd = qv_b.data();
            let kd = kv_b.data();
            let vd = vv_b.data();
            let mask_ref = mask_b.as_deref();
            let per_b: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..bsz)
                .into_par_iter()
                .map(|bi| {
                    let mut dq_b = vec![T::zero(); i_len * c];
                    let mut dk_b = vec![T::zero(); j_len * c];
                    let mut dv_b = vec![T::zero(); j_len * c];
                    let mut d_attn = vec![T::zero(); i_len * j_len];
                    let mut d_s = vec![T::zero(); i_len * j_len];
                    for hd in 0..heads {
                        let a_h = &ad[(bi * heads + hd) * i_len * j_len..(bi * heads + hd + 1) * i_len * j_len];
                        unsafe {
                            // dA = dOut_h @ V_h^T
                            T::gemm_raw(
                                i_len, dh, j_len, T::one(),
                                gd.as_ptr().add(bi * i_len * c + hd * dh), c as isize, 1,
                                vd.as_ptr().add(bi * j_len * c + hd * dh), 1, c as isize,
                                T::zero(),
                                d_attn.as_mut_ptr(), j_len as isize, 1,
                            );
                            // dV_h += A^T @ dOut_h
                            T::gemm_raw(
                                j_len, i_len, dh, T::one(),
                                a_h.as_ptr(), 1, j_len as isize,
                                gd.as_ptr().add(bi * i_len * c + hd * dh), c as isize, 1,
                                T::one(),
                                dv_b.as_mut_ptr().add(hd * dh), c as isize, 1,
                            );
                        }
                        // softmax backward rows: dS = A * (dA - sum(dA * A))
                        for r in 0..i_len {
                            let a_r = &a_h[r * j_len..(r + 1) * j_len];
                            let da_r = &d_attn[r * j_len..(r + 1) * j_len];
                            let dot: T = a_r.iter().zip(da_r).map(|(&a2, &d2)| a2 * d2).sum();
                            let ds_r = &mut d_s[r * j_len..(r + 1) * j_len];
                            for idx in 0..j_len {
                                ds_r[idx] = a_r[idx] * (da_r[idx] - dot);
                            }
                            if mode == MaskMode::Hadamard {
                                if let Some(m) = mask_ref {
                                    let bits = m.row(bi, r);
                                    for idx in 0..j_len {
                                        if !bits[idx] {
                                            ds_r[idx] = T::zero();
                                        }
                                    }
                                }
                            }
                        }
                        unsafe {
                            // dQ_h += scale * dS @ K_h
                            T::gemm_raw(
                                i_len, j_len, dh, scale,
                                d_s.as_ptr(), j_len as isize, 1,
                                kd.as_ptr().add(bi * j_len * c + hd * dh), c as isize, 1,
                                T::one(),
                                dq_b.as_mut_ptr().add(hd * dh), c as isize, 1,
                            );
                            // dK_h += scale * dS^T @ Q_h
                            T::gemm_raw(
                                j_len, i_len, dh, scale,
                                d_s.as_ptr(), 1, j_len as isize,
                                qd.as_ptr().add(bi * i_len * c + hd * dh), c as isize, 1,
                                T::one(),
                                dk_b.as_mut_ptr().add(hd * dh), c as isize, 1,
                            );
                        }
                    }
                    (dq_b, dk_b, dv_b)
                })
                .collect();
            let mut gq = Tensor::zeros(&[bsz, i_len, c]);
            let mut gk = Tensor::zeros(&[bsz, j_len, c]);
            let mut gv2 = Tensor::zeros(&[bsz, j_len, c]);
            for (bi, (dq_b, dk_b, dv_b)) in per_b.iter().enumerate() {
                gq.data_mut()[bi * i_len * c..(bi + 1) * i_len * c].copy_from_slice(dq_b);
                gk.data_mut()[bi * j_len * c..(bi + 1) * j_len * c].copy_from_slice(dk_b);
                gv2.data_mut()[bi * j_len * c..(bi + 1) * j_len * c].copy_from_slice(dv_b);
            }
            sink.add(q, gq);
            sink.add(k, gk);
            sink.add(v, gv2);
        })
    }

    /// Attention weights only (no value mix), shape [B, heads, i, j].
    /// Diagnostic path for weight-level assertions; same math as `attention`.
    pub fn attention_weights(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        heads: usize,
        mask: Option<&AttnMask>,
        mode: MaskMode,
    ) -> Tensor<T> {
        let (bsz, i_len, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let j_len = k.shape()[1];
        let dh = c / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut attn: Tensor<T> = Tensor::zeros(&[bsz, heads, i_len, j_len]);
        let ad = attn.data_mut();
        for bi in 0..bsz {
            for hd in 0..heads {
                let a_h =
                    &mut ad[(bi * heads + hd) * i_len * j_len..(bi * heads + hd + 1) * i_len * j_len];
                unsafe {
                    T::gemm_raw(
                        i_len, dh, j_len, scale,
                        q.data().as_ptr().add(bi * i_len * c + hd * dh), c as isize, 1,
                        k.data().as_ptr().add(bi * j_len * c + hd * dh), 1, c as isize,
                        T::zero(),
                        a_h.as_mut_ptr(), j_len as isize, 1,
                    );
                }
                for r in 0..i_len {
                    let row = &mut a_h[r * j_len..(r + 1) * j_len];
                    masked_softmax_row(row, mask.map(|m| m.row(bi, r)), mode);
                }
            }
        }
        attn
    }

    // ---- losses / reductions ----

    pub fn mse_loss(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape());
        let n = av.numel();
        let diff = av.sub(&bv);
        let loss = diff.sq_norm() / T::from_f64(n as f64);
        let diff = Rc::new(diff);
        self.push_op(Tensor::scalar(loss), &[a, b], move |g, sink| {
            let c = g.item() * T::from_f64(2.0 / n as f64);
            sink.add(a, diff.scale(c));
            sink.add(b, diff.scale(-c));
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.numel();
        let shape = av.shape().to_vec();
        self.push_op(Tensor::scalar(av.mean()), &[a], move |g, sink| {
            let c = g.item() / T::from_f64(n as f64);
            sink.add(a, Tensor::full(&shape, c));
        })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.push_op(Tensor::scalar(av.sum()), &[a], move |g, sink| {
            sink.add(a, Tensor::full(&shape, g.item()));
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_s<T: Scalar>(x: T) -> T {
    // numerically stable on both tails
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn masked_softmax_row<T: Scalar>(row: &mut [T], bits: Option<&[bool]>, mode: MaskMode) {
    match (bits, mode) {
        (None, _) => softmax_dense(row),
        (Some(bits), MaskMode::Additive) => {
            let mut mx = T::neg_infinity();
            for (i, &s) in row.iter().enumerate() {
                if bits[i] && s > mx {
                    mx = s;
                }
            }
            debug_assert!(mx > T::neg_infinity(), "attention row fully masked");
            let mut z = T::zero();
            for i in 0..row.len() {
                if bits[i] {
                    row[i] = (row[i] - mx).exp();
                    z = z + row[i];
                } else {
                    row[i] = T::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        (Some(bits), MaskMode::Hadamard) => {
            for (i, v) in row.iter_mut().enumerate() {
                if !bits[i] {
                    *v = T::zero();
                }
            }
            softmax_dense(row);
        }
    }
}

fn softmax_dense<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn permute_bchw_to_btc<T: Scalar>(src: &[T], dst: &mut [T], b: usize, c: usize, hw: usize) {
    for bi in 0..b {
        for ci in 0..c {
            let sbase = (bi * c + ci) * hw;
            for p in 0..hw {
                dst[(bi * hw + p) * c + ci] = src[sbase + p];
            }
        }
    }
}

fn permute_btc_to_bchw<T: Scalar>(src: &[T], dst: &mut [T], b: usize, c: usize, hw: usize) {
    for bi in 0..b {
        for ci in 0..c {
            let dbase = (bi * c + ci) * hw;
            for p in 0..hw {
                dst[dbase + p] = src[(bi * hw + p) * c + ci];
            }
        }
    }
}

/// Max relative elementwise error between the tape gradient of `f` and a
/// central finite difference, checked for every input marked in `check`.
/// `f` must build a scalar loss from the given leaf vars.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], check: &[bool], f: F, eps: f64) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    assert_eq!(inputs.len(), check.len());
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let mut grads = tape.backward(loss);

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        tape.value(f(&tape, &vars)).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, &do_check) in check.iter().enumerate() {
        if !do_check {
            continue;
        }
        let ga = grads
            .take(vars[idx])
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        for e in 0..inputs[idx].numel() {
            let orig = work[idx].data()[e];
            let step = eps * (1.0 + orig.abs());
            work[idx].data_mut()[e] = orig + step;
            let fp = eval(&work);
            work[idx].data_mut()[e] = orig - step;
            let fm = eval(&work);
            work[idx].data_mut()[e] = orig;
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
