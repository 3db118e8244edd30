//! Dense channel-major feature maps and the handful of layer primitives the
//! fixed network needs, each with its input-gradient counterpart.
//!
//! All primitives are pure: inputs are borrowed, outputs freshly allocated.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm;

/// A `channels × height × width` block of `f32`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "tensor data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), self.data.len(), "with_data length mismatch");
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// `h×w` window with top-left corner `(y, x)`, all channels.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::config(format!(
                "crop {h}x{w} at ({y}, {x}) exceeds a {}x{} map",
                self.height, self.width
            )));
        }
        Ok(Tensor::from_fn(self.channels, h, w, |c, dy, dx| {
            self.get(c, y + dy, x + dx)
        }))
    }

    /// Sum of squares, accumulated in f64.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Convolution kernel side. Every conv in the trunk is 3×3, stride 1, pad 1.
pub const KERNEL: usize = 3;
const PAD: usize = 1;

/// Fixed weights of one same-padded 3×3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    /// `out × in × 3 × 3`, out-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let expected = out_channels * in_channels * KERNEL * KERNEL;
        if weights.len() != expected {
            return Err(Error::config(format!(
                "conv weights have {} values, expected {expected}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "conv bias has {} values, expected {out_channels}",
                bias.len()
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Values per filter (`in × 3 × 3`).
    pub fn filter_len(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }
}

/// Sliding `k×k` windows of a tensor, one row per window position.
///
/// Row layout is `(channel, dy, dx)`, the same order as a conv filter and as
/// a flattened neural patch.
#[derive(Clone, Debug)]
pub struct Unfolded {
    pub rows: Vec<f32>,
    pub out_h: usize,
    pub out_w: usize,
    pub row_len: usize,
}

/// Output grid size of a `k`-window scan, or `None` if no window fits.
pub fn window_grid(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return None;
    }
    Some((
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    ))
}

/// Unrolls every `k×k` window (zero padded by `pad`) into a row.
pub fn unfold(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Unfolded> {
    let (c, h, w) = input.shape();
    let (out_h, out_w) = window_grid(h, w, k, stride, pad).ok_or_else(|| {
        Error::config(format!(
            "{k}x{k} window with stride {stride} does not fit a {h}x{w} map"
        ))
    })?;
    let row_len = c * k * k;
    let mut rows = vec![0.0f32; out_h * out_w * row_len];
    let data = input.data();
    rows.par_chunks_mut(out_w * row_len)
        .enumerate()
        .for_each(|(oy, band)| {
            for ox in 0..out_w {
                let row = &mut band[ox * row_len..(ox + 1) * row_len];
                let mut i = 0;
                for ch in 0..c {
                    for dy in 0..k {
                        let y = (oy * stride + dy) as isize - pad as isize;
                        for dx in 0..k {
                            let x = (ox * stride + dx) as isize - pad as isize;
                            row[i] = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                data[(ch * h + y as usize) * w + x as usize]
                            } else {
                                0.0
                            };
                            i += 1;
                        }
                    }
                }
            }
        });
    Ok(Unfolded {
        rows,
        out_h,
        out_w,
        row_len,
    })
}

/// Adjoint of [`unfold`]: scatters window rows back onto a `c×h×w` map,
/// summing where windows overlap. Padding positions are dropped.
pub fn fold(
    rows: &[f32],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (out_h, out_w) = window_grid(h, w, k, stride, pad)
        .ok_or_else(|| Error::config(format!("{k}x{k} window does not fit a {h}x{w} map")))?;
    let row_len = c * k * k;
    if rows.len() != out_h * out_w * row_len {
        return Err(Error::config(format!(
            "fold got {} values, expected {}",
            rows.len(),
            out_h * out_w * row_len
        )));
    }
    let mut data = vec![0.0f32; c * h * w];
    // Each channel owns a disjoint plane, so per-cell summation order is fixed.
    data.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, plane)| {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let row = &rows[(oy * out_w + ox) * row_len + ch * k * k..][..k * k];
                    for dy in 0..k {
                        let y = (oy * stride + dy) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let x = (ox * stride + dx) as isize - pad as isize;
                            if x < 0 || x as usize >= w {
                                continue;
                            }
                            plane[y as usize * w + x as usize] += row[dy * k + dx];
                        }
                    }
                }
            }
        });
    Tensor::new(c, h, w, data)
}

/// Same-padded 3×3 convolution via window unrolling and [`gemm::gemm_nt`].
pub fn conv2d_forward(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if input.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels,
            input.channels()
        )));
    }
    let (_, h, w) = input.shape();
    let cols = unfold(input, KERNEL, 1, PAD)?;
    let mut out = gemm::gemm_nt(
        &spec.weights,
        &cols.rows,
        spec.out_channels,
        h * w,
        cols.row_len,
    );
    for (plane, &b) in out.chunks_exact_mut(h * w).zip(&spec.bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(spec.out_channels, h, w, out)
}

/// Gradient w.r.t. the conv input. Weights are fixed, so no weight gradient.
pub fn conv2d_backward(input: &Tensor, spec: &ConvSpec, grad_output: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.shape();
    if c != spec.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    if grad_output.shape() != (spec.out_channels, h, w) {
        return Err(Error::config(format!(
            "conv grad_output shape {:?} does not match output shape {:?}",
            grad_output.shape(),
            (spec.out_channels, h, w)
        )));
    }
    let hw = h * w;
    let k_len = spec.filter_len();
    let grad_t = gemm::transpose(grad_output.data(), spec.out_channels, hw);
    let weights_t = gemm::transpose(&spec.weights, spec.out_channels, k_len);
    let cols = gemm::gemm_nt(&grad_t, &weights_t, hw, k_len, spec.out_channels);
    fold(&cols, (c, h, w), KERNEL, 1, PAD)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Tensor {
    assert!(
        input.same_shape(grad_output),
        "relu_backward shape mismatch"
    );
    input.with_data(
        input
            .data()
            .iter()
            .zip(grad_output.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Argmax bookkeeping from [`maxpool2_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    /// Flat input index that won each output cell.
    pub argmax: Vec<usize>,
    pub input_shape: (usize, usize, usize),
    /// Whether a row/column was replicated to make the input even.
    pub padded: (bool, bool),
}

/// 2×2 non-overlapping max pool. Odd inputs are first extended by
/// replicating the last row/column, so output dims are `ceil(h/2)×ceil(w/2)`.
/// Ties go to the first position in scan order.
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, PoolIndices) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    let data = input.data();
    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(ch, (o_plane, a_plane))| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = usize::MAX;
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        let y = (2 * oy + dy).min(h - 1);
                        for dx in 0..2 {
                            let x = (2 * ox + dx).min(w - 1);
                            let idx = (ch * h + y) * w + x;
                            if best_idx == usize::MAX || data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    o_plane[oy * ow + ox] = best;
                    a_plane[oy * ow + ox] = best_idx;
                }
            }
        });
    (
        Tensor {
            channels: c,
            height: oh,
            width: ow,
            data: out,
        },
        PoolIndices {
            argmax,
            input_shape: (c, h, w),
            padded: (h % 2 == 1, w % 2 == 1),
        },
    )
}

/// Routes each output gradient to its recorded argmax, zeros elsewhere.
pub fn maxpool2_backward(indices: &PoolIndices, grad_output: &Tensor) -> Tensor {
    assert_eq!(
        indices.argmax.len(),
        grad_output.len(),
        "maxpool2_backward shape mismatch"
    );
    let (c, h, w) = indices.input_shape;
    let mut grad = Tensor::zeros(c, h, w);
    for (&idx, &g) in indices.argmax.iter().zip(grad_output.data()) {
        grad.data[idx] += g;
    }
    grad
}

/// Corner-aligned sample position of output index `i` on an `n_in` axis.
#[inline]
fn corner_aligned(i: usize, n_in: usize, n_out: usize) -> f32 {
    if n_out == 1 {
        (n_in as f32 - 1.0) * 0.5
    } else {
        i as f32 * (n_in as f32 - 1.0) / (n_out as f32 - 1.0)
    }
}

/// Bilinear sample with coordinates clamped to the map (edge replication).
#[inline]
fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with corner-aligned sampling: output corners land exactly
/// on input corners, so resizing to the current size is the identity.
pub fn bilinear_resize(input: &Tensor, new_height: usize, new_width: usize) -> Result<Tensor> {
    if new_height == 0 || new_width == 0 {
        return Err(Error::config("resize target must be at least 1x1"));
    }
    let (c, h, w) = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::config("cannot resize an empty tensor"));
    }
    if (h, w) == (new_height, new_width) {
        return Ok(input.clone());
    }
    let mut out = vec![0.0f32; c * new_height * new_width];
    out.par_chunks_mut(new_height * new_width)
        .enumerate()
        .for_each(|(ch, o_plane)| {
            let plane = input.channel(ch);
            for y in 0..new_height {
                let sy = corner_aligned(y, h, new_height);
                for x in 0..new_width {
                    let sx = corner_aligned(x, w, new_width);
                    o_plane[y * new_width + x] = sample_clamped(plane, h, w, sy, sx);
                }
            }
        });
    Tensor::new(c, new_height, new_width, out)
}

/// Rotates about the map center by `angle` radians (counter-clockwise in
/// image coordinates), bilinear sampling with edge-replication fill.
pub fn rotate(input: &Tensor, angle: f32) -> Tensor {
    if angle == 0.0 {
        return input.clone();
    }
    let (c, h, w) = input.shape();
    let (cy, cx) = ((h as f32 - 1.0) * 0.5, (w as f32 - 1.0) * 0.5);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0f32; c * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, o_plane)| {
            let plane = input.channel(ch);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                    // Inverse map: rotate the output position back by -angle.
                    let sx = cos * dx - sin * dy + cx;
                    let sy = sin * dx + cos * dy + cy;
                    o_plane[y * w + x] = sample_clamped(plane, h, w, sy, sx);
                }
            }
        });
    input.with_data(out)
}
