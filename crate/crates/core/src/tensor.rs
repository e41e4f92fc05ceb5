//! Dense row-major `f32` tensors and the handful of kernels a ViT forward needs.
//!
//! There is no broadcasting: every binary op requires identical shapes and
//! callers reshape explicitly. Every matmul and convolution reports its
//! multiply-accumulate count to [`crate::flops`].

use crate::error::{Error, Result};
use crate::flops;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(f).collect(),
        }
    }

    /// A 1-D tensor holding `values`.
    pub fn vector(values: Vec<f32>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// A 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim("dims3", format!("expected 3-D, got {:?}", self.shape))),
        }
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of the tensor viewed as `[-1, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Gathers rows of a 2-D tensor in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim(
                    "select_rows",
                    format!("row {} out of range for {:?}", i, self.shape),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            shape: vec![indices.len(), cols],
            data,
        })
    }

    /// Stacks two 2-D tensors with equal column counts.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, ca) = self.dims2()?;
        let (rb, cb) = other.dims2()?;
        if ca != cb {
            return Err(Error::dim(
                "concat_rows",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: vec![ra + rb, ca],
            data,
        })
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if start > end || end > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("range {}..{} out of bounds for {:?}", start, end, self.shape),
            ));
        }
        Ok(Tensor {
            shape: vec![end - start, cols],
            data: self.data[start * cols..end * cols].to_vec(),
        })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if start > end || end > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("range {}..{} out of bounds for {:?}", start, end, self.shape),
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Tensor {
            shape: vec![cols, rows],
            data,
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let cols = self.last_dim();
        if bias.shape != [cols] {
            return Err(Error::dim(
                "add_row_vector",
                format!("bias {:?} does not match rows of {:?}", bias.shape, self.shape),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

const COL_BLOCK: usize = 256;
const DEPTH_BLOCK: usize = 128;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output element accumulates over `t` in ascending order, so results are
/// bitwise reproducible regardless of blocking.
#[inline(always)]
fn gemm_accumulate(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for t0 in (0..k).step_by(DEPTH_BLOCK) {
            let t1 = (t0 + DEPTH_BLOCK).min(k);
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let c_row = &mut c[i * n + j0..i * n + j1];
                for t in t0..t1 {
                    let av = a_row[t];
                    let b_row = &b[t * n + j0..t * n + j1];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_accumulate(m, k, n, a, b, c)
}

// Wider vectors change throughput only: without FMA contraction each lane
// performs the same rounded multiply then add, so results are bitwise equal.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { gemm_avx2(m, k, n, a, b, c) };
    }
    gemm_accumulate(m, k, n, a, b, c)
}

/// Matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    flops::record_macs((m * k * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2()?;
    let (_, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::dim(
            "matmul_bt",
            format!("row widths differ: {:?} x {:?}ᵀ", a.shape, b.shape),
        ));
    }
    matmul(a, &b.transpose2d()?)
}

/// `x · w + bias` with `x: n×in`, `w: in×out`, `bias: out`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, w)?;
    match bias {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// Softmax over the last dimension with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let w = x.last_dim();
    if w == 0 {
        return out;
    }
    for row in out.data.chunks_exact_mut(w) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Per-row normalization to zero mean and unit variance followed by `gamma`, `beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::dim(
            "layernorm",
            format!(
                "gamma {:?} / beta {:?} do not match feature width {}",
                gamma.shape, beta.shape, d
            ),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Parameter(format!("layernorm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
    Ok(out)
}

/// Error function, Abramowitz & Stegun 7.1.26 (|error| < 1.5e-7).
fn erf(x: f64) -> f64 {
    const P: f64 = 0.327_591_1;
    const A: [f64; 5] = [
        0.254_829_592,
        -0.284_496_736,
        1.421_413_741,
        -1.453_152_027,
        1.061_405_429,
    ];
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn gelu_scalar(v: f32) -> f32 {
    let x = v as f64;
    (0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))) as f32
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Depthwise 2-D convolution with zero "same" padding.
///
/// `x: c×h×w`, `kernel: c×kh×kw` with odd `kh`, `kw`; `bias: c`.
pub fn conv2d_depthwise(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (kc, kh, kw) = kernel.dims3()?;
    if kc != c {
        return Err(Error::dim(
            "conv2d_depthwise",
            format!("kernel {:?} does not match input {:?}", kernel.shape, x.shape),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(
            "conv2d_depthwise",
            format!("kernel spatial size {}x{} must be odd", kh, kw),
        ));
    }
    if dilation == 0 {
        return Err(Error::Parameter("dilation must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.shape != [c] {
            return Err(Error::dim("conv2d_depthwise", format!("bias {:?} for {} channels", b.shape, c)));
        }
    }
    let pad_y = (dilation * (kh - 1) / 2) as isize;
    let pad_x = (dilation * (kw - 1) / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        let kern = &kernel.data[ch * kh * kw..(ch + 1) * kh * kw];
        let b = bias.map_or(0.0, |b| b.data[ch]);
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let iy = oy as isize + (ky * dilation) as isize - pad_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize + (kx * dilation) as isize - pad_x;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += plane[iy as usize * w + ix as usize] * kern[ky * kw + kx];
                    }
                }
                out[ch * h * w + oy * w + ox] = acc + b;
            }
        }
    }
    flops::record_macs((c * h * w * kh * kw) as u64);
    Tensor::new(vec![c, h, w], out)
}

/// 1×1 convolution: `kernel: c_out×c_in` applied at every pixel of `x: c_in×h×w`.
pub fn conv2d_pointwise(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let (cout, kin) = kernel.dims2()?;
    if kin != cin {
        return Err(Error::dim(
            "conv2d_pointwise",
            format!("kernel {:?} does not match input {:?}", kernel.shape, x.shape),
        ));
    }
    let flat = Tensor {
        shape: vec![cin, h * w],
        data: x.data.clone(),
    };
    let mut y = matmul(kernel, &flat)?;
    if let Some(b) = bias {
        if b.shape != [cout] {
            return Err(Error::dim("conv2d_pointwise", format!("bias {:?} for {} channels", b.shape, cout)));
        }
        for (row, &bv) in y.data.chunks_exact_mut(h * w).zip(&b.data) {
            for v in row {
                *v += bv;
            }
        }
    }
    y.reshape(&[cout, h, w])
}

/// Nearest-neighbour upsampling of `x: c×h×w` by an integer factor.
pub fn nearest_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x.data[ch * h * w + (oy / factor) * w..ch * h * w + (oy / factor + 1) * w];
            out.extend((0..ow).map(|ox| src[ox / factor]));
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Non-overlapping `window×window` average pooling of `x: c×h×w`.
pub fn avgpool2d(x: &Tensor, window: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(
            "avgpool2d",
            format!("spatial size {}x{} not divisible by window {}", h, w, window),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f32;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..window {
                    for dx in 0..window {
                        acc += x.data[ch * h * w + (oy * window + dy) * w + ox * window + dx];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Cuts `image: c×h×w` into non-overlapping `patch×patch` tiles.
///
/// Returns `(h/patch · w/patch) × (c·patch·patch)`; tiles are ordered row-major
/// over the grid and each tile is flattened channel-major, matching the layout
/// of a strided convolution kernel.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("image {}x{} not divisible by patch size {}", h, w, patch),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    let start = ch * h * w + (gy * patch + py) * w + gx * patch;
                    out.extend_from_slice(&image.data[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

/// Token rows `(h·w)×d` to a channel-first grid `d×h×w`.
pub fn tokens_to_grid(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, d) = tokens.dims2()?;
    if n != h * w {
        return Err(Error::dim(
            "tokens_to_grid",
            format!("{} tokens cannot fill a {}x{} grid", n, h, w),
        ));
    }
    tokens.transpose2d()?.reshape(&[d, h, w])
}

/// Channel-first grid `d×h×w` back to token rows `(h·w)×d`.
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let (d, h, w) = grid.dims3()?;
    Tensor {
        shape: vec![d, h * w],
        data: grid.data.clone(),
    }
    .transpose2d()
}
