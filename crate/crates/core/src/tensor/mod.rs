//! Dense row-major tensors over f32/f64 plus the raw numeric kernels
//! (GEMM, im2col convolution) that both the forward pass and the
//! reverse-mode tape build on.

pub mod tape;

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Element type of all tensors: f32 for training throughput, f64 for
/// finite-difference gradient verification.
pub trait Scalar:
    Float
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn standard_normal(rng: &mut crate::rng::Rng) -> Self;

    /// C <- alpha * A * B + beta * C with explicit strides (row, col) per matrix.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn standard_normal(rng: &mut crate::rng::Rng) -> Self {
        StandardNormal.sample(rng)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn standard_normal(rng: &mut crate::rng::Rng) -> Self {
        StandardNormal.sample(rng)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::standard_normal(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Normal with the given standard deviation.
    pub fn randn_scaled(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Self {
        let s = T::from_f64(std);
        let mut t = Self::randn(shape, rng);
        t.data.iter_mut().for_each(|x| *x = *x * s);
        t
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.numel(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scaled_add_assign(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * *b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_())
            .fold(0.0, f64::max)
    }

    /// Relative L2 difference: |a - b| / max(|a|, |b|, tiny).
    pub fn rel_l2_diff(&self, other: &Self) -> f64 {
        let num = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b).to_f64_();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let den = self.sq_norm().to_f64_().sqrt().max(other.sq_norm().to_f64_().sqrt()).max(1e-30);
        num / den
    }

    /// Cast between scalar types through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64_())).collect(),
        }
    }
}

/// C[m,n] = alpha * A[m,k] @ B[k,n] + beta * C, all row-major slices.
pub fn gemm_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if k == 0 && beta == T::zero() {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    unsafe {
        T::gemm_raw(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// C[m,n] = alpha * A[m,k] @ B^T + beta * C where B is stored row-major as [n,k].
pub fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if k == 0 && beta == T::zero() {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    unsafe {
        T::gemm_raw(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// C[m,n] = alpha * A^T @ B[k,n] + beta * C where A is stored row-major as [k,m].
pub fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if k == 0 && beta == T::zero() {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    unsafe {
        T::gemm_raw(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfold one sample [C,H,W] into columns [C*k*k, Ho*Wo].
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let (ho, wo) = spec.out_hw(h, w);
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    let pad = spec.pad as isize;
    let stride = spec.stride as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = oy as isize * stride + ki as isize - pad;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kj as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns [C*k*k, Ho*Wo] back into one sample [C,H,W], accumulating overlaps.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, x: &mut [T]) {
    let k = spec.kernel;
    let (ho, wo) = spec.out_hw(h, w);
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    debug_assert_eq!(x.len(), c * h * w);
    x.iter_mut().for_each(|v| *v = T::zero());
    let pad = spec.pad as isize;
    let stride = spec.stride as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for oy in 0..ho {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

/// Integer-factor area (box) downsampling of a [H, W] map.
pub fn area_downsample_2d<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0, "bad downsample factor");
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    let mut out = Tensor::zeros(&[ho, wo]);
    {
        let od = out.data_mut();
        let id = t.data();
        for y in 0..ho {
            for x in 0..wo {
                let mut s = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        s = s + id[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                od[y * wo + x] = s * inv;
            }
        }
    }
    out
}

/// Integer-factor area downsampling of a [C, H, W] image.
pub fn area_downsample_chw<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], t.data()[ch * h * w..(ch + 1) * h * w].to_vec());
        let small = area_downsample_2d(&plane, factor);
        out.data_mut()[ch * ho * wo..(ch + 1) * ho * wo].copy_from_slice(small.data());
    }
    out
}

/// Sinusoidal embedding of integer timesteps, shape [len(ts), dim].
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
            data.push(T::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::new(&[ts.len(), dim], data)
}

/// Fixed sinusoidal position table, shape [len, dim].
pub fn position_table<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let positions: Vec<usize> = (0..len).collect();
    timestep_embedding(&positions, dim)
}
