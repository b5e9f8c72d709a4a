//! Dense row-major `f32` tensors and the numeric kernels built on them.
//!
//! Kernels are plain functions of immutable inputs. Convolution is
//! cross-correlation (no kernel flip) with zero padding.

use std::fmt;

use crate::alloc;
use crate::error::{Error, Result};

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        alloc::record_alloc(data.len() * 4);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("length matches shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(&mut f).collect()).expect("length matches shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f32> {
        let data = std::mem::take(&mut self.data);
        alloc::record_free(data.len() * 4);
        data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D position; panics if the tensor is not 2-D.
    #[inline]
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(H, W)` of a 2-D tensor, or the trailing two dims of a 3-D one.
    pub fn hw(&self) -> (usize, usize) {
        let n = self.shape.len();
        (self.shape[n - 2], self.shape[n - 1])
    }

    pub(crate) fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.ndim() != ndim {
            return Err(Error::dim(format!(
                "{what}: expected {ndim}-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(&self.shape, self.data.clone()).expect("same shape")
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::record_free(self.data.len() * 4);
    }
}

/// Bitwise equality of shape and payload.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        input.expect_ndim(3, "conv2d input")?;
        weights.expect_ndim(4, "conv2d weights")?;
        let (in_ch, in_h, in_w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (out_ch, w_in, k_h, k_w) = (
            weights.shape[0],
            weights.shape[1],
            weights.shape[2],
            weights.shape[3],
        );
        if w_in != in_ch {
            return Err(Error::dim(format!(
                "conv2d: input has {in_ch} channels, weights expect {w_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive"));
        }
        if k_h == 0 || k_w == 0 || in_h + 2 * padding < k_h || in_w + 2 * padding < k_w {
            return Err(Error::dim(format!(
                "conv2d: kernel {k_h}x{k_w} does not fit input {in_h}x{in_w} with padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            in_ch,
            out_ch,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            padding,
            out_h: (in_h + 2 * padding - k_h) / stride + 1,
            out_w: (in_w + 2 * padding - k_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut cols = vec![0.0f32; g.patch_len() * p];
    for c in 0..g.in_ch {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut out = vec![0.0f32; g.in_ch * g.in_h * g.in_w];
    for c in 0..g.in_ch {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-major `c[m×n] = a[m×k] · b[k×n]` where `a` and `b` are described by
/// explicit row/column strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched by sgemm is within the slices: the caller
    // passes strides that describe m×k, k×n and m×n views of these buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kH, kW]`
/// weights and zero padding.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if bias.numel() != g.out_ch {
        return Err(Error::dim(format!(
            "conv2d: bias has {} entries, expected {}",
            bias.numel(),
            g.out_ch
        )));
    }
    let p = g.positions();
    let k = g.patch_len();
    let scratch;
    let cols: &[f32] = if g.is_pointwise() {
        &input.data
    } else {
        scratch = im2col(&input.data, &g);
        &scratch
    };
    let mut out = vec![0.0f32; g.out_ch * p];
    gemm(g.out_ch, k, p, &weights.data, (k, 1), cols, (p, 1), &mut out);
    for (co, row) in out.chunks_mut(p).enumerate() {
        let b = bias.data[co];
        row.iter_mut().for_each(|v| *v += b);
    }
    Tensor::from_vec(&[g.out_ch, g.out_h, g.out_w], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Exact gradients of [`conv2d`] with respect to its input, weights and bias,
/// contracted with `grad_out`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if grad_out.shape() != [g.out_ch, g.out_h, g.out_w] {
        return Err(Error::dim(format!(
            "conv2d_backward: grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_ch, g.out_h, g.out_w]
        )));
    }
    let p = g.positions();
    let k = g.patch_len();
    let go = &grad_out.data;

    let grad_bias: Vec<f32> = go.chunks(p).map(|row| row.iter().sum()).collect();

    let scratch;
    let cols: &[f32] = if g.is_pointwise() {
        &input.data
    } else {
        scratch = im2col(&input.data, &g);
        &scratch
    };
    let mut grad_w = vec![0.0f32; g.out_ch * k];
    gemm(g.out_ch, p, k, go, (p, 1), cols, (1, p), &mut grad_w);

    let mut grad_cols = vec![0.0f32; k * p];
    gemm(k, g.out_ch, p, &weights.data, (1, k), go, (p, 1), &mut grad_cols);
    let grad_in = if g.is_pointwise() {
        grad_cols
    } else {
        col2im(&grad_cols, &g)
    };

    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weights: Tensor::from_vec(weights.shape(), grad_w)?,
        bias: Tensor::from_vec(&[g.out_ch], grad_bias)?,
    })
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Gradient of [`relu`]; the subgradient at exactly zero is taken as zero.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::dim("relu_backward: shape mismatch"));
    }
    let data = grad_out
        .data
        .iter()
        .zip(&input.data)
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

/// Gradient of [`sigmoid`] given its forward output.
pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != output.shape() {
        return Err(Error::dim("sigmoid_backward: shape mismatch"));
    }
    let data = grad_out
        .data
        .iter()
        .zip(&output.data)
        .map(|(&g, &y)| g * y * (1.0 - y))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

// ---------------------------------------------------------------------------
// Filtering and resampling
// ---------------------------------------------------------------------------

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let denom = 2.0 * (sigma as f64) * (sigma as f64);
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|&t| (t / total) as f32).collect()
}

/// Index into `0..n` under half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn convolve_rows(src: &[f32], h: usize, w: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &k) in taps.iter().enumerate() {
                acc += k * row[reflect_index(x as isize + t as isize - r, w)];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn convolve_cols(src: &[f32], h: usize, w: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for (t, &k) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            let src_row = &src[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += k * s;
            }
        }
    }
    out
}

/// Separable Gaussian smoothing of a 2-D map with reflect padding.
/// `sigma == 0` returns a copy of the input.
pub fn gaussian_filter(map: &Tensor, sigma: f32) -> Result<Tensor> {
    map.expect_ndim(2, "gaussian_filter")?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::dim(format!("gaussian_filter: invalid sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let (h, w) = map.hw();
    let taps = gaussian_kernel(sigma);
    let tmp = convolve_rows(&map.data, h, w, &taps);
    Tensor::from_vec(&[h, w], convolve_cols(&tmp, h, w, &taps))
}

#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f32 / dst_len as f32;
    let s = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f32)
}

/// Bilinear resize of a `[C, H, W]` (or `[H, W]`) tensor using half-pixel
/// centers (align-corners = false).
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize: target size must be positive"));
    }
    let (channels, h, w, planar) = match t.shape() {
        [h, w] => (1, *h, *w, false),
        [c, h, w] => (*c, *h, *w, true),
        s => return Err(Error::dim(format!("bilinear_resize: unsupported shape {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::dim("bilinear_resize: empty source"));
    }
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &t.data[c * h * w..(c + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = source_coord(y, h, out_h);
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = if planar {
        vec![channels, out_h, out_w]
    } else {
        vec![out_h, out_w]
    };
    Tensor::from_vec(&shape, out)
}

/// Value of the map bilinearly resized to `(out_h, out_w)`, evaluated at one
/// output pixel, without materializing the resized map.
pub fn resized_value_at(map: &Tensor, out_h: usize, out_w: usize, y: usize, x: usize) -> f32 {
    let (h, w) = map.hw();
    let (y0, y1, fy) = source_coord(y, h, out_h);
    let (x0, x1, fx) = source_coord(x, w, out_w);
    let top = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
    let bot = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear sample of a 2-D map at fractional pixel coordinates, clamped to
/// the map bounds.
pub fn sample_bilinear(map: &Tensor, x: f32, y: f32) -> f32 {
    let (h, w) = map.hw();
    let sx = x.clamp(0.0, (w - 1) as f32);
    let sy = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
    let top = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
    let bot = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

// ---------------------------------------------------------------------------
// Pooling and normalization over `[h, w, c]` feature maps
// ---------------------------------------------------------------------------

/// Mean feature vector over the pixels where `mask` is set (> 0.5).
pub fn masked_avg_pool(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    features.expect_ndim(3, "masked_avg_pool features")?;
    let (h, w, c) = (features.shape[0], features.shape[1], features.shape[2]);
    if mask.shape() != [h, w] {
        return Err(Error::dim(format!(
            "masked_avg_pool: mask shape {:?} does not match features {h}x{w}",
            mask.shape()
        )));
    }
    let mut acc = vec![0.0f64; c];
    let mut count = 0usize;
    for (p, &m) in mask.data.iter().enumerate() {
        if m > 0.5 {
            count += 1;
            for (a, &f) in acc.iter_mut().zip(&features.data[p * c..(p + 1) * c]) {
                *a += f as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Tensor::from_vec(&[c], acc.iter().map(|&a| (a / count as f64) as f32).collect())
}

const NORM_EPS: f32 = 1e-8;

fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|&x| x * x).sum::<f32>().sqrt().max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= norm);
}

pub fn l2_normalize_vec(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    normalize_in_place(&mut out.data);
    out
}

/// Normalizes each pixel's channel vector of an `[h, w, c]` map.
pub fn l2_normalize_pixels(features: &Tensor) -> Result<Tensor> {
    features.expect_ndim(3, "l2_normalize_pixels")?;
    let c = features.shape[2];
    let mut out = features.clone();
    if c > 0 {
        out.data.chunks_mut(c).for_each(normalize_in_place);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

/// `[c, h, w]` → `[h, w, c]`.
pub fn chw_to_hwc(t: &Tensor) -> Result<Tensor> {
    t.expect_ndim(3, "chw_to_hwc")?;
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = t.data[ch * h * w + p];
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// `[h, w, c]` → `[c, h, w]`.
pub fn hwc_to_chw(t: &Tensor) -> Result<Tensor> {
    t.expect_ndim(3, "hwc_to_chw")?;
    let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut out = vec![0.0f32; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = t.data[p * c + ch];
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Stacks `[c_i, h, w]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels: nothing to concatenate"))?;
    first.expect_ndim(3, "concat_channels")?;
    let hw = (first.shape[1], first.shape[2]);
    let mut channels = 0;
    let mut data = Vec::new();
    for t in parts {
        t.expect_ndim(3, "concat_channels")?;
        if (t.shape[1], t.shape[2]) != hw {
            return Err(Error::dim("concat_channels: spatial sizes differ"));
        }
        channels += t.shape[0];
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(&[channels, hw.0, hw.1], data)
}

/// Splits a `[c, h, w]` tensor into `[at, h, w]` and `[c - at, h, w]`.
pub fn split_channels(t: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    t.expect_ndim(3, "split_channels")?;
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if at > c {
        return Err(Error::dim("split_channels: split point beyond channel count"));
    }
    let cut = at * h * w;
    Ok((
        Tensor::from_vec(&[at, h, w], t.data[..cut].to_vec())?,
        Tensor::from_vec(&[c - at, h, w], t.data[cut..].to_vec())?,
    ))
}
