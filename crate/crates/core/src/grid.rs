//! Differentiable building blocks of the projector: sequence/grid
//! reorganization, pointwise and strided depthwise convolution, average
//! pooling, affine layers and GELU.
//!
//! Every forward returns the cache its backward needs. Each output element is
//! produced by one fixed-order `f64` reduction (row-major over the window or
//! ascending over the contracted index), so results are bit-identical no
//! matter how many worker threads rayon uses.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Patch features laid out as `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(shape_err!(
                "feature grid must be [H, W, C], got {:?}",
                values.shape()
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[height, width, channels])?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values.data()[(row * self.width() + col) * self.channels() + ch]
    }

    /// Raster-order slice of the features at one patch.
    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let c = self.channels();
        let start = (row * self.width() + col) * c;
        &self.values.data()[start..start + c]
    }
}

/// Lays a raster-order patch sequence `[N, C]` out on an `H x W` grid.
pub fn reorganize(seq: &Tensor, height: usize, width: usize) -> Result<FeatureGrid> {
    if seq.rank() != 2 {
        return Err(shape_err!(
            "patch sequence must be [N, C], got {:?}",
            seq.shape()
        ));
    }
    let (n, c) = (seq.shape()[0], seq.shape()[1]);
    if height == 0 || width == 0 || n != height * width {
        return Err(shape_err!(
            "sequence of {n} patches does not tile a {height}x{width} grid"
        ));
    }
    FeatureGrid::new(seq.clone().reshape(&[height, width, c])?)
}

/// Inverse of [`reorganize`]: row `r*W + c` carries patch `(r, c)`.
pub fn flatten(grid: &FeatureGrid) -> Tensor {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    grid.values
        .clone()
        .reshape(&[h * w, c])
        .expect("grid extents are positive")
}

/// Backward of [`reorganize`] is the inverse reshape.
pub fn reorganize_bwd(upstream: &FeatureGrid) -> Tensor {
    flatten(upstream)
}

pub fn flatten_bwd(upstream: &Tensor, height: usize, width: usize) -> Result<FeatureGrid> {
    reorganize(upstream, height, width)
}

/// Cache of an affine map `y = x W + b` over rows.
#[derive(Debug, Clone)]
pub struct AffineCache {
    input: Tensor,
    weight: Tensor,
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_affine(din: usize, weight: &Tensor, bias: &Tensor) -> Result<usize> {
    if weight.rank() != 2 || weight.shape()[0] != din {
        return Err(shape_err!(
            "weight {:?} does not accept {din} input features",
            weight.shape()
        ));
    }
    let dout = weight.shape()[1];
    bias.expect_shape(&[dout], "bias")?;
    Ok(dout)
}

/// `rows x din` times `din x dout` plus bias. Each output is accumulated in
/// f64 over the input index in ascending order.
fn affine_rows(x: &[f32], din: usize, weight: &[f32], dout: usize, bias: &[f32]) -> Vec<f32> {
    let rows = x.len() / din;
    let mut out = vec![0.0f32; rows * dout];
    out.par_chunks_mut(dout)
        .zip(x.par_chunks(din))
        .for_each_init(
            || vec![0.0f64; dout],
            |acc, (out_row, x_row)| {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (i, &xi) in x_row.iter().enumerate() {
                    let xi = xi as f64;
                    let w_row = &weight[i * dout..(i + 1) * dout];
                    for (a, &w) in acc.iter_mut().zip(w_row) {
                        *a += xi * w as f64;
                    }
                }
                for ((o, a), &b) in out_row.iter_mut().zip(acc.iter()).zip(bias) {
                    *o = (*a + b as f64) as f32;
                }
            },
        );
    out
}

fn affine_rows_bwd(cache: &AffineCache, upstream: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let x = cache.input.data();
    let w = cache.weight.data();
    let (din, dout) = (cache.weight.shape()[0], cache.weight.shape()[1]);
    let rows = x.len() / din;

    let mut dx = vec![0.0f32; rows * din];
    dx.par_chunks_mut(din)
        .zip(upstream.par_chunks(dout))
        .for_each(|(dx_row, up_row)| {
            for (i, d) in dx_row.iter_mut().enumerate() {
                let w_row = &w[i * dout..(i + 1) * dout];
                let acc = up_row
                    .iter()
                    .zip(w_row)
                    .fold(0.0f64, |a, (&u, &wv)| a + u as f64 * wv as f64);
                *d = acc as f32;
            }
        });

    let mut dw = vec![0.0f32; din * dout];
    dw.par_chunks_mut(dout).enumerate().for_each_init(
        || vec![0.0f64; dout],
        |acc, (i, dw_row)| {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in 0..rows {
                let xi = x[r * din + i] as f64;
                let up_row = &upstream[r * dout..(r + 1) * dout];
                for (a, &u) in acc.iter_mut().zip(up_row) {
                    *a += xi * u as f64;
                }
            }
            for (d, a) in dw_row.iter_mut().zip(acc.iter()) {
                *d = *a as f32;
            }
        },
    );

    let mut db = vec![0.0f64; dout];
    for up_row in upstream.chunks(dout) {
        for (a, &u) in db.iter_mut().zip(up_row) {
            *a += u as f64;
        }
    }
    (dx, dw, db.into_iter().map(|v| v as f32).collect())
}

/// `y = x W + b` for `x: [M, Din]`, `W: [Din, Dout]`, `b: [Dout]`.
pub fn linear_fwd(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, AffineCache)> {
    if x.rank() != 2 {
        return Err(shape_err!(
            "linear input must be [M, D], got {:?}",
            x.shape()
        ));
    }
    let (m, din) = (x.shape()[0], x.shape()[1]);
    let dout = check_affine(din, weight, bias)?;
    let y = affine_rows(x.data(), din, weight.data(), dout, bias.data());
    let cache = AffineCache {
        input: x.clone(),
        weight: weight.clone(),
    };
    Ok((Tensor::new(vec![m, dout], y)?, cache))
}

pub fn linear_bwd(cache: &AffineCache, upstream: &Tensor) -> Result<AffineGrads> {
    let m = cache.input.shape()[0];
    let (din, dout) = (cache.weight.shape()[0], cache.weight.shape()[1]);
    upstream.expect_shape(&[m, dout], "linear upstream")?;
    let (dx, dw, db) = affine_rows_bwd(cache, upstream.data());
    Ok(AffineGrads {
        input: Tensor::new(vec![m, din], dx)?,
        weight: Tensor::new(vec![din, dout], dw)?,
        bias: Tensor::new(vec![dout], db)?,
    })
}

#[derive(Debug, Clone)]
pub struct PointwiseCache {
    height: usize,
    width: usize,
    affine: AffineCache,
}

#[derive(Debug, Clone)]
pub struct PointwiseGrads {
    pub input: FeatureGrid,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 1x1 convolution mixing channels at every patch position.
pub fn pointwise_conv_fwd(
    grid: &FeatureGrid,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(FeatureGrid, PointwiseCache)> {
    let (h, w) = (grid.height(), grid.width());
    let (y, affine) = linear_fwd(&flatten(grid), weight, bias)?;
    let cout = y.shape()[1];
    let out = FeatureGrid::new(y.reshape(&[h, w, cout])?)?;
    Ok((
        out,
        PointwiseCache {
            height: h,
            width: w,
            affine,
        },
    ))
}

pub fn pointwise_conv_bwd(
    cache: &PointwiseCache,
    upstream: &FeatureGrid,
) -> Result<PointwiseGrads> {
    let cout = cache.affine.weight.shape()[1];
    upstream
        .values()
        .expect_shape(&[cache.height, cache.width, cout], "pointwise upstream")?;
    let g = linear_bwd(&cache.affine, &flatten(upstream))?;
    Ok(PointwiseGrads {
        input: reorganize(&g.input, cache.height, cache.width)?,
        weight: g.weight,
        bias: g.bias,
    })
}

fn check_tiling(grid: &FeatureGrid, stride: usize, what: &str) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Arg(format!("{what}: stride must be at least 1")));
    }
    let (h, w) = (grid.height(), grid.width());
    if h % stride != 0 || w % stride != 0 {
        return Err(shape_err!(
            "{what}: {h}x{w} grid is not divisible by stride {stride}"
        ));
    }
    Ok((h / stride, w / stride))
}

/// Sums `f(u, v, value)` over the `s x s` tile at output cell `(r, c)` for
/// channel `ch`, u-major then v, in f64.
#[inline]
fn tile_sum(
    data: &[f32],
    width: usize,
    channels: usize,
    s: usize,
    (r, c, ch): (usize, usize, usize),
    f: impl Fn(usize, usize, f64) -> f64,
) -> f64 {
    let mut acc = 0.0f64;
    for u in 0..s {
        let row = r * s + u;
        for v in 0..s {
            let col = c * s + v;
            acc += f(u, v, data[(row * width + col) * channels + ch] as f64);
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct DepthwiseCache {
    input: FeatureGrid,
    kernels: Tensor,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct DepthwiseGrads {
    pub input: FeatureGrid,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Per-channel `s x s` convolution with stride `s` and no padding.
pub fn depthwise_conv_fwd(
    grid: &FeatureGrid,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(FeatureGrid, DepthwiseCache)> {
    let (oh, ow) = check_tiling(grid, stride, "depthwise conv")?;
    let (w, ch) = (grid.width(), grid.channels());
    kernels.expect_shape(&[ch, stride, stride], "depthwise kernels")?;
    bias.expect_shape(&[ch], "depthwise bias")?;
    let (x, k, b) = (grid.values.data(), kernels.data(), bias.data());
    let ss = stride * stride;

    let mut out = vec![0.0f32; oh * ow * ch];
    out.par_chunks_mut(ch)
        .enumerate()
        .for_each(|(cell, out_px)| {
            let (r, c) = (cell / ow, cell % ow);
            for (k_ch, o) in out_px.iter_mut().enumerate() {
                let kern = &k[k_ch * ss..(k_ch + 1) * ss];
                let acc = tile_sum(x, w, ch, stride, (r, c, k_ch), |u, v, val| {
                    val * kern[u * stride + v] as f64
                });
                *o = (acc + b[k_ch] as f64) as f32;
            }
        });
    let cache = DepthwiseCache {
        input: grid.clone(),
        kernels: kernels.clone(),
        stride,
    };
    Ok((
        FeatureGrid::new(Tensor::new(vec![oh, ow, ch], out)?)?,
        cache,
    ))
}

pub fn depthwise_conv_bwd(
    cache: &DepthwiseCache,
    upstream: &FeatureGrid,
) -> Result<DepthwiseGrads> {
    let s = cache.stride;
    let x = &cache.input;
    let (h, w, ch) = (x.height(), x.width(), x.channels());
    let (oh, ow) = (h / s, w / s);
    upstream
        .values()
        .expect_shape(&[oh, ow, ch], "depthwise upstream")?;
    let up = upstream.values.data();
    let k = cache.kernels.data();
    let ss = s * s;

    let mut dx = vec![0.0f32; h * w * ch];
    dx.par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(row, dx_row)| {
            let (r, u) = (row / s, row % s);
            for col in 0..w {
                let (c, v) = (col / s, col % s);
                for k_ch in 0..ch {
                    let g = up[(r * ow + c) * ch + k_ch] as f64;
                    dx_row[col * ch + k_ch] = (g * k[k_ch * ss + u * s + v] as f64) as f32;
                }
            }
        });

    let mut dk = vec![0.0f32; ch * ss];
    dk.par_chunks_mut(ss).enumerate().for_each(|(k_ch, dk_ch)| {
        for (uv, d) in dk_ch.iter_mut().enumerate() {
            let (u, v) = (uv / s, uv % s);
            let mut acc = 0.0f64;
            for r in 0..oh {
                for c in 0..ow {
                    let xv = x.values.data()[((r * s + u) * w + c * s + v) * ch + k_ch] as f64;
                    acc += up[(r * ow + c) * ch + k_ch] as f64 * xv;
                }
            }
            *d = acc as f32;
        }
    });

    let db = channel_sums(up, ch);
    Ok(DepthwiseGrads {
        input: FeatureGrid::new(Tensor::new(vec![h, w, ch], dx)?)?,
        kernels: Tensor::new(vec![ch, s, s], dk)?,
        bias: Tensor::new(vec![ch], db)?,
    })
}

fn channel_sums(values: &[f32], ch: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; ch];
    for px in values.chunks(ch) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Mean over non-overlapping `s x s` windows.
pub fn avg_pool_fwd(grid: &FeatureGrid, stride: usize) -> Result<FeatureGrid> {
    let (oh, ow) = check_tiling(grid, stride, "average pool")?;
    let (w, ch) = (grid.width(), grid.channels());
    let x = grid.values.data();
    let inv = 1.0 / (stride * stride) as f64;

    let mut out = vec![0.0f32; oh * ow * ch];
    out.par_chunks_mut(ch)
        .enumerate()
        .for_each(|(cell, out_px)| {
            let (r, c) = (cell / ow, cell % ow);
            for (k_ch, o) in out_px.iter_mut().enumerate() {
                let acc = tile_sum(x, w, ch, stride, (r, c, k_ch), |_, _, val| val);
                *o = (acc * inv) as f32;
            }
        });
    FeatureGrid::new(Tensor::new(vec![oh, ow, ch], out)?)
}

/// Spreads `upstream / s^2` uniformly over each window.
pub fn avg_pool_bwd(upstream: &FeatureGrid, stride: usize) -> Result<FeatureGrid> {
    if stride == 0 {
        return Err(Error::Arg("average pool: stride must be at least 1".into()));
    }
    let (oh, ow, ch) = (upstream.height(), upstream.width(), upstream.channels());
    let (h, w) = (oh * stride, ow * stride);
    let inv = 1.0 / (stride * stride) as f64;
    let up = upstream.values.data();
    let dx = Tensor::from_fn(&[h, w, ch], |i| {
        let (px, k_ch) = (i / ch, i % ch);
        let (row, col) = (px / w, px % w);
        (up[((row / stride) * ow + col / stride) * ch + k_ch] as f64 * inv) as f32
    })?;
    FeatureGrid::new(dx)
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[derive(Debug, Clone)]
pub struct GeluCache {
    input: Tensor,
}

/// Tanh-approximation GELU, elementwise.
pub fn gelu_fwd(x: &Tensor) -> (Tensor, GeluCache) {
    (
        x.map(|v| gelu_scalar(v as f64) as f32),
        GeluCache { input: x.clone() },
    )
}

pub fn gelu_bwd(cache: &GeluCache, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(cache.input.shape(), "gelu upstream")?;
    let data = cache
        .input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| (g as f64 * gelu_grad_scalar(x as f64)) as f32)
        .collect();
    Tensor::new(cache.input.shape().to_vec(), data)
}

/// GELU applied to a grid, keeping the grid layout.
pub fn gelu_grid_fwd(grid: &FeatureGrid) -> (FeatureGrid, GeluCache) {
    let (y, cache) = gelu_fwd(&grid.values);
    (FeatureGrid { values: y }, cache)
}

pub fn gelu_grid_bwd(cache: &GeluCache, upstream: &FeatureGrid) -> Result<FeatureGrid> {
    FeatureGrid::new(gelu_bwd(cache, &upstream.values)?)
}

/// Concatenates same-shape grids along channels, first grid first.
pub fn concat_channels(grids: &[&FeatureGrid]) -> Result<FeatureGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Arg("nothing to concatenate".into()))?;
    let (h, w) = (first.height(), first.width());
    for g in grids {
        if g.height() != h || g.width() != w {
            return Err(shape_err!(
                "cannot stack {}x{} grid onto {h}x{w}",
                g.height(),
                g.width()
            ));
        }
    }
    let total: usize = grids.iter().map(|g| g.channels()).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for row in 0..h {
        for col in 0..w {
            for g in grids {
                data.extend_from_slice(g.patch(row, col));
            }
        }
    }
    FeatureGrid::new(Tensor::new(vec![h, w, total], data)?)
}

/// Splits a channel-stacked grid back into pieces of the given widths.
pub fn split_channels(grid: &FeatureGrid, widths: &[usize]) -> Result<Vec<FeatureGrid>> {
    if widths.iter().sum::<usize>() != grid.channels() {
        return Err(shape_err!(
            "channel split {widths:?} does not cover {} channels",
            grid.channels()
        ));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut parts: Vec<Vec<f32>> = widths
        .iter()
        .map(|c| Vec::with_capacity(h * w * c))
        .collect();
    for row in 0..h {
        for col in 0..w {
            let mut px = grid.patch(row, col);
            for (part, &c) in parts.iter_mut().zip(widths) {
                part.extend_from_slice(&px[..c]);
                px = &px[c..];
            }
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &c)| FeatureGrid::new(Tensor::new(vec![h, w, c], data)?))
        .collect()
}
