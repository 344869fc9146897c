//! Dense row-major `f32` tensors and the numeric kernels behind every
//! taped op.
//!
//! Kernels work on plain slices with explicit dimensions. Reductions
//! (inner products, batch sums) accumulate in `f64` and round once on
//! store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension, or 1 for a scalar-like tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all dimensions after the first.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                context: "reshape",
                expected: shape,
                actual: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Row slice `[start, end)` of the leading dimension.
    pub fn rows_range(&self, start: usize, end: usize) -> Tensor {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    /// Gathers the given rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }
}

pub(crate) mod kernels {
    //! Slice-level numeric kernels.

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let row = &a[i * k..(i + 1) * k];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let brow = &b[p * n..(p + 1) * n];
                for (acc_j, &bv) in acc.iter_mut().zip(brow) {
                    *acc_j += av * bv as f64;
                }
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
        out
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x as f64 * y as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        out
    }

    /// `[k,m]^T x [k,n] -> [m,n]`
    pub fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
        let mut acc = vec![0.0f64; m * n];
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let out = &mut acc[i * n..(i + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv as f64;
                }
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Splits a shape into (outer, channels, inner) around axis 1.
    pub fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
        let outer = shape[0];
        let channels = shape.get(1).copied().unwrap_or(1);
        let inner = shape.iter().skip(2).product();
        (outer, channels, inner)
    }

    pub fn bias_add(x: &[f32], b: &[f32], shape: &[usize]) -> Vec<f32> {
        let (outer, c, inner) = channel_dims(shape);
        let mut out = x.to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[ch];
                }
            }
        }
        out
    }

    /// Sums over every axis except axis 1.
    pub fn bias_reduce(x: &[f32], shape: &[usize]) -> Vec<f32> {
        let (outer, c, inner) = channel_dims(shape);
        let mut acc = vec![0.0f64; c];
        for o in 0..outer {
            for (ch, a) in acc.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *a += x[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    pub fn bias_broadcast(b: &[f32], shape: &[usize]) -> Vec<f32> {
        let (outer, c, inner) = channel_dims(shape);
        let mut out = Vec::with_capacity(outer * c * inner);
        for _ in 0..outer {
            for &bv in b.iter().take(c) {
                out.extend(std::iter::repeat_n(bv, inner));
            }
        }
        out
    }

    pub struct ConvDims {
        pub batch: usize,
        pub in_ch: usize,
        pub out_ch: usize,
        pub height: usize,
        pub width: usize,
        pub kernel: usize,
        pub pad: usize,
    }

    impl ConvDims {
        pub fn out_h(&self) -> usize {
            self.height + 2 * self.pad + 1 - self.kernel
        }
        pub fn out_w(&self) -> usize {
            self.width + 2 * self.pad + 1 - self.kernel
        }
    }

    /// Stride-1 cross-correlation, `x[N,Ci,H,W] * w[Co,Ci,K,K]`.
    pub fn conv2d(x: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let k = d.kernel;
        let mut out = vec![0.0f32; d.batch * d.out_ch * oh * ow];
        for n in 0..d.batch {
            for co in 0..d.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..d.in_ch {
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < d.pad || iy - d.pad >= d.height {
                                    continue;
                                }
                                let iy = iy - d.pad;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < d.pad || ix - d.pad >= d.width {
                                        continue;
                                    }
                                    let ix = ix - d.pad;
                                    let xv = x[((n * d.in_ch + ci) * d.height + iy) * d.width + ix];
                                    let wv = w[((co * d.in_ch + ci) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((n * d.out_ch + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`conv2d`] in its input: maps `g[N,Co,Ho,Wo]` to `[N,Ci,H,W]`.
    pub fn conv2d_back_input(g: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let k = d.kernel;
        let mut acc = vec![0.0f64; d.batch * d.in_ch * d.height * d.width];
        for n in 0..d.batch {
            for co in 0..d.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[((n * d.out_ch + co) * oh + oy) * ow + ox] as f64;
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..d.in_ch {
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < d.pad || iy - d.pad >= d.height {
                                    continue;
                                }
                                let iy = iy - d.pad;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < d.pad || ix - d.pad >= d.width {
                                        continue;
                                    }
                                    let ix = ix - d.pad;
                                    let wv = w[((co * d.in_ch + ci) * k + ky) * k + kx] as f64;
                                    acc[((n * d.in_ch + ci) * d.height + iy) * d.width + ix] += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Adjoint of [`conv2d`] in its weight: `(x, g) -> [Co,Ci,K,K]`.
    pub fn conv2d_back_weight(x: &[f32], g: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let k = d.kernel;
        let mut acc = vec![0.0f64; d.out_ch * d.in_ch * k * k];
        for n in 0..d.batch {
            for co in 0..d.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[((n * d.out_ch + co) * oh + oy) * ow + ox] as f64;
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..d.in_ch {
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < d.pad || iy - d.pad >= d.height {
                                    continue;
                                }
                                let iy = iy - d.pad;
                                for kx in 0..k {
                                    let ix = ox + kx;
                                    if ix < d.pad || ix - d.pad >= d.width {
                                        continue;
                                    }
                                    let ix = ix - d.pad;
                                    let xv = x[((n * d.in_ch + ci) * d.height + iy) * d.width + ix] as f64;
                                    acc[((co * d.in_ch + ci) * k + ky) * k + kx] += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Non-overlapping `size x size` average pool over `[N,C,H,W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn avg_pool(x: &[f32], shape: &[usize], size: usize) -> Vec<f32> {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / size, w / size);
        let scale = 1.0 / (size * size) as f64;
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..size {
                        for dx in 0..size {
                            acc += x[(plane * h + oy * size + dy) * w + ox * size + dx] as f64;
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = (acc * scale) as f32;
                }
            }
        }
        out
    }

    /// Adjoint of [`avg_pool`]: spreads each output cell evenly over its window.
    pub fn avg_pool_back(g: &[f32], in_shape: &[usize], size: usize) -> Vec<f32> {
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (oh, ow) = (h / size, w / size);
        let scale = 1.0 / (size * size) as f32;
        let mut out = vec![0.0f32; n * c * h * w];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = g[(plane * oh + oy) * ow + ox] * scale;
                    for dy in 0..size {
                        for dx in 0..size {
                            out[(plane * h + oy * size + dy) * w + ox * size + dx] = v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(z: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &z[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = ((v as f64 - max).exp() / denom) as f32;
            }
        }
        out
    }

    /// Per-row cross-entropy `logsumexp(z) - z[label]`, in `f64`.
    pub fn cross_entropy_rows(z: &[f32], labels: &[usize], cols: usize) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &z[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
                lse - row[y] as f64
            })
            .collect()
    }

    pub fn row_sum(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        (0..rows)
            .map(|r| x[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    }

    pub fn sum(x: &[f32]) -> f32 {
        x.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn argmax(row: &[f32]) -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}
