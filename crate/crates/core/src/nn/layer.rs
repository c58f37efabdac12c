//! Layer descriptions and their forward/backward kernels.
//!
//! Convolutions go through im2col + GEMM. 2D convolutions are the depth-1
//! special case of the 3D kernel. Output extent along each convolved axis is
//! `(n + 2 * padding - kernel) / stride + 1` (floor division).

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Nearest-neighbour x2 upsample followed by a stride-1 "same" convolution.
    UpsampleConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    UpsampleConv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    /// Per-channel normalization over spatial positions, without affine parameters.
    InstanceNorm { channels: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    /// Appends the output of layer `source` (which has `channels` channels) to the current activation.
    SkipConcat { source: usize, channels: usize },
}

/// Geometry shared by the convolution variants.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub upsample: bool,
    pub rank: usize,
    pub bias: bool,
}

impl ConvGeom {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::UpsampleConv2d { .. } => "upsample_conv2d",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::UpsampleConv3d { .. } => "upsample_conv3d",
            LayerSpec::InstanceNorm { .. } => "instance_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Tanh => "tanh",
            LayerSpec::SkipConcat { .. } => "skip_concat",
        }
    }

    pub(crate) fn conv_geom(&self) -> Option<ConvGeom> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => Some(ConvGeom {
                in_channels,
                out_channels,
                kernel: (1, kernel, kernel),
                stride: (1, stride, stride),
                padding: (0, padding, padding),
                upsample: false,
                rank: 2,
                bias,
            }),
            LayerSpec::UpsampleConv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => Some(ConvGeom {
                in_channels,
                out_channels,
                kernel: (1, kernel, kernel),
                stride: (1, 1, 1),
                padding: (0, kernel / 2, kernel / 2),
                upsample: true,
                rank: 2,
                bias,
            }),
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => Some(ConvGeom {
                in_channels,
                out_channels,
                kernel: (kernel, kernel, kernel),
                stride: (stride, stride, stride),
                padding: (padding, padding, padding),
                upsample: false,
                rank: 3,
                bias,
            }),
            LayerSpec::UpsampleConv3d {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => Some(ConvGeom {
                in_channels,
                out_channels,
                kernel: (kernel, kernel, kernel),
                stride: (1, 1, 1),
                padding: (kernel / 2, kernel / 2, kernel / 2),
                upsample: true,
                rank: 3,
                bias,
            }),
            _ => None,
        }
    }

    /// Validates hyper-parameters and returns the output channel count given `in_channels`.
    pub(crate) fn check(&self, index: usize, in_channels: usize, rank: usize, channels_at: &[usize]) -> Result<usize> {
        let bad = |msg: String| Err(Error::Config(format!("layer {index} ({}): {msg}", self.name())));
        if let Some(g) = self.conv_geom() {
            if g.in_channels != in_channels {
                return bad(format!("expects {} input channels, got {in_channels}", g.in_channels));
            }
            if g.rank != rank {
                return bad(format!("is a {}D layer in a {rank}D model", g.rank));
            }
            if g.out_channels == 0 || g.kernel.1 == 0 {
                return bad("zero channels or kernel".into());
            }
            if !matches!(g.stride.1, 1 | 2) {
                return bad(format!("stride must be 1 or 2, got {}", g.stride.1));
            }
            if g.upsample && g.kernel.1 % 2 == 0 {
                return bad("upsample convolution needs an odd kernel".into());
            }
            if g.padding.1 >= g.kernel.1 {
                return bad("padding must be smaller than the kernel".into());
            }
            return Ok(g.out_channels);
        }
        match *self {
            LayerSpec::InstanceNorm { channels } => {
                if channels != in_channels {
                    return bad(format!("expects {channels} channels, got {in_channels}"));
                }
                Ok(channels)
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(slope.is_finite() && slope >= 0.0) {
                    return bad(format!("invalid slope {slope}"));
                }
                Ok(in_channels)
            }
            LayerSpec::SkipConcat { source, channels } => {
                if source >= index {
                    return bad(format!("source {source} is not an earlier layer"));
                }
                if channels_at[source] != channels {
                    return bad(format!(
                        "source {source} has {} channels, spec says {channels}",
                        channels_at[source]
                    ));
                }
                Ok(in_channels + channels)
            }
            _ => Ok(in_channels),
        }
    }
}

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

pub(crate) fn conv_out_spatial(
    g: &ConvGeom,
    spatial: (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    let (d, h, w) = if g.upsample {
        let d = if g.rank == 3 { spatial.0 * 2 } else { spatial.0 };
        (d, spatial.1 * 2, spatial.2 * 2)
    } else {
        spatial
    };
    match (
        out_extent(d, g.kernel.0, g.stride.0, g.padding.0),
        out_extent(h, g.kernel.1, g.stride.1, g.padding.1),
        out_extent(w, g.kernel.2, g.stride.2, g.padding.2),
    ) {
        (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
        _ => Err(Error::Shape(format!(
            "input {spatial:?} smaller than kernel {:?}",
            g.kernel
        ))),
    }
}

fn make_shape(channels: usize, spatial: (usize, usize, usize), rank: usize) -> Vec<usize> {
    if rank == 3 {
        vec![channels, spatial.0, spatial.1, spatial.2]
    } else {
        vec![channels, spatial.1, spatial.2]
    }
}

/// Nearest-neighbour x2 upsampling (depth too for 3D tensors).
pub(crate) fn upsample2<T: Real>(x: &Tensor<T>, rank: usize) -> Tensor<T> {
    let c = x.channels();
    let (d, h, w) = x.spatial();
    let fd = if rank == 3 { 2 } else { 1 };
    let (od, oh, ow) = (d * fd, h * 2, w * 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = ((ch * d + z / fd) * h + y / 2) * w;
                for xx in 0..ow {
                    out.push(src[row + xx / 2]);
                }
            }
        }
    }
    Tensor::new(make_shape(c, (od, oh, ow), rank), out).expect("upsample shape")
}

pub(crate) fn upsample2_backward<T: Real>(grad: &Tensor<T>, input_shape: &[usize], rank: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(input_shape);
    let c = input_shape[0];
    let (d, h, w) = out.spatial();
    let fd = if rank == 3 { 2 } else { 1 };
    let (od, oh, ow) = (d * fd, h * 2, w * 2);
    let g = grad.data();
    let dst = out.data_mut();
    let mut i = 0;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = ((ch * d + z / fd) * h + y / 2) * w;
                for xx in 0..ow {
                    dst[row + xx / 2] += g[i];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Unfolds `x` into a `(C*kd*kh*kw) x (od*oh*ow)` column matrix.
fn im2col<T: Real>(x: &Tensor<T>, g: &ConvGeom, out: (usize, usize, usize)) -> Vec<T> {
    let (d, h, w) = x.spatial();
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.padding;
    let (od, oh, ow) = out;
    let p = od * oh * ow;
    let rows = g.in_channels * kd * kh * kw;
    let mut col = vec![T::zero(); rows * p];
    let src = x.data();
    let mut r = 0;
    for c in 0..g.in_channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[r * p..(r + 1) * p];
                    let mut j = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            j += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                j += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[j] = src[base + ix as usize];
                                }
                                j += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, in_shape: &[usize], out: (usize, usize, usize)) -> Tensor<T> {
    let mut x = Tensor::zeros(in_shape);
    let (d, h, w) = x.spatial();
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.padding;
    let (od, oh, ow) = out;
    let p = od * oh * ow;
    let dst = x.data_mut();
    let mut r = 0;
    for c in 0..g.in_channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[r * p..(r + 1) * p];
                    let mut j = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            j += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                j += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ix as usize] += src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    x
}

/// Convolution of an (already upsampled, if applicable) input.
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeom,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let geom = ConvGeom { upsample: false, ..*g };
    let out = conv_out_spatial(&geom, x.spatial())?;
    let p = out.0 * out.1 * out.2;
    let k = g.fan_in();
    let mut y = vec![T::zero(); g.out_channels * p];
    if let Some(b) = bias {
        for (oc, chunk) in y.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.kernel == (1, 1, 1) && g.stride == (1, 1, 1) && g.padding == (0, 0, 0) {
        T::gemm(g.out_channels, k, p, weight.data(), false, x.data(), false, beta, &mut y);
    } else {
        let col = im2col(x, &geom, out);
        T::gemm(g.out_channels, k, p, weight.data(), false, &col, false, beta, &mut y);
    }
    Tensor::new(make_shape(g.out_channels, out, g.rank), y)
}

/// Returns `(dW, db, dx)`; `dx` only when requested.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeom,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> (Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let geom = ConvGeom { upsample: false, ..*g };
    let (od, oh, ow) = grad_out.spatial();
    let out = (od, oh, ow);
    let p = od * oh * ow;
    let k = g.fan_in();
    let pointwise = g.kernel == (1, 1, 1) && g.stride == (1, 1, 1) && g.padding == (0, 0, 0);
    let col_owned;
    let col: &[T] = if pointwise {
        x.data()
    } else {
        col_owned = im2col(x, &geom, out);
        &col_owned
    };
    let mut dw = Tensor::zeros(weight.shape());
    T::gemm(g.out_channels, p, k, grad_out.data(), false, col, true, T::zero(), dw.data_mut());
    let db = g.bias.then(|| {
        let data = grad_out
            .data()
            .chunks(p)
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        Tensor::new(vec![g.out_channels], data).expect("bias shape")
    });
    let dx = need_input_grad.then(|| {
        let mut dcol = vec![T::zero(); k * p];
        T::gemm(k, g.out_channels, p, weight.data(), true, grad_out.data(), false, T::zero(), &mut dcol);
        if pointwise {
            Tensor::new(x.shape().to_vec(), dcol).expect("pointwise grad shape")
        } else {
            col2im(&dcol, &geom, x.shape(), out)
        }
    });
    (dw, db, dx)
}

/// Instance norm forward; returns output and per-channel inverse std.
pub(crate) fn instance_norm_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let n = x.spatial_len();
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(INSTANCE_NORM_EPS);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.channels());
    for chunk in out.data_mut().chunks_mut(n) {
        let mean = chunk.iter().fold(T::zero(), |a, &b| a + b) / nf;
        let var = chunk
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / nf;
        let inv_std = T::one() / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        inv.push(inv_std);
    }
    (out, inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], grad: &Tensor<T>) -> Tensor<T> {
    let n = y.spatial_len();
    let nf = T::from_f64(n as f64);
    let mut dx = grad.clone();
    for ((dxc, yc), &inv) in dx
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(inv_std)
    {
        let sum_g = dxc.iter().fold(T::zero(), |a, &b| a + b);
        let sum_gy = dxc
            .iter()
            .zip(yc)
            .fold(T::zero(), |a, (&g, &yy)| a + g * yy);
        for (g, &yy) in dxc.iter_mut().zip(yc) {
            *g = inv / nf * (nf * *g - sum_g - yy * sum_gy);
        }
    }
    dx
}

pub(crate) fn activation_forward<T: Real>(spec: &LayerSpec, x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let data = y.data_mut();
    match *spec {
        LayerSpec::Relu => data.iter_mut().for_each(|v| *v = v.max(T::zero())),
        LayerSpec::LeakyRelu { slope } => {
            let s = T::from_f64(slope);
            data.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v *= s
                }
            })
        }
        LayerSpec::Sigmoid => data
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
        LayerSpec::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
        _ => unreachable!("not an activation"),
    }
    y
}

/// Gradient through an activation given its input `x` and output `y`.
pub(crate) fn activation_backward<T: Real>(
    spec: &LayerSpec,
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = grad.clone();
    let d = dx.data_mut();
    match *spec {
        LayerSpec::Relu => d.iter_mut().zip(x.data()).for_each(|(g, &v)| {
            if v <= T::zero() {
                *g = T::zero()
            }
        }),
        LayerSpec::LeakyRelu { slope } => {
            let s = T::from_f64(slope);
            d.iter_mut().zip(x.data()).for_each(|(g, &v)| {
                if v < T::zero() {
                    *g *= s
                }
            })
        }
        LayerSpec::Sigmoid => d
            .iter_mut()
            .zip(y.data())
            .for_each(|(g, &s)| *g *= s * (T::one() - s)),
        LayerSpec::Tanh => d
            .iter_mut()
            .zip(y.data())
            .for_each(|(g, &t)| *g *= T::one() - t * t),
        _ => unreachable!("not an activation"),
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used to cross-check the im2col path.
    fn conv_naive(x: &Tensor<f64>, g: &ConvGeom, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (d, h, wd) = x.spatial();
        let out = conv_out_spatial(g, (d, h, wd)).unwrap();
        let (kd, kh, kw) = g.kernel;
        let mut y = vec![0.0; g.out_channels * out.0 * out.1 * out.2];
        let mut i = 0;
        for oc in 0..g.out_channels {
            for oz in 0..out.0 {
                for oy in 0..out.1 {
                    for ox in 0..out.2 {
                        let mut acc = b.get(oc).copied().unwrap_or(0.0);
                        for ic in 0..g.in_channels {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iz = (oz * g.stride.0 + kz) as isize - g.padding.0 as isize;
                                        let iy = (oy * g.stride.1 + ky) as isize - g.padding.1 as isize;
                                        let ix = (ox * g.stride.2 + kx) as isize - g.padding.2 as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ic * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((oc * g.in_channels + ic) * kd + kz) * kh + ky) * kw + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        y[i] = acc;
                        i += 1;
                    }
                }
            }
        }
        Tensor::new(make_shape(g.out_channels, out, g.rank), y).unwrap()
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64).wrapping_mul(2654435761).wrapping_add(salt * 97) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn im2col_conv_matches_naive() {
        for spec in [
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, padding: 1, bias: true },
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 1, stride: 1, padding: 0, bias: false },
            LayerSpec::Conv3d { in_channels: 2, out_channels: 2, kernel: 3, stride: 1, padding: 1, bias: true },
            LayerSpec::Conv3d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, padding: 1, bias: false },
        ] {
            let g = spec.conv_geom().unwrap();
            let shape = if g.rank == 3 { vec![g.in_channels, 5, 6, 4] } else { vec![g.in_channels, 7, 6] };
            let x = Tensor::new(shape.clone(), pseudo(shape.iter().product(), 1)).unwrap();
            let wshape = vec![g.out_channels, g.in_channels, g.kernel.0, g.kernel.1, g.kernel.2];
            let w = Tensor::new(wshape.clone(), pseudo(wshape.iter().product(), 2)).unwrap();
            let b = Tensor::new(vec![g.out_channels], pseudo(g.out_channels, 3)).unwrap();
            let fast = conv_forward(&x, &g, &w, g.bias.then_some(&b)).unwrap();
            let slow = conv_naive(&x, &g, &w, if g.bias { b.data() } else { &[] });
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride2_shape_rule() {
        let g = LayerSpec::Conv2d { in_channels: 1, out_channels: 16, kernel: 3, stride: 2, padding: 1, bias: true }
            .conv_geom()
            .unwrap();
        assert_eq!(conv_out_spatial(&g, (1, 32, 32)).unwrap(), (1, 16, 16));
        let up = LayerSpec::UpsampleConv2d { in_channels: 16, out_channels: 1, kernel: 3, bias: true }
            .conv_geom()
            .unwrap();
        assert_eq!(conv_out_spatial(&up, (1, 16, 16)).unwrap(), (1, 32, 32));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::new(vec![2, 3, 2], pseudo(12, 5)).unwrap();
        let u = upsample2(&x, 2);
        let gy = Tensor::new(u.shape().to_vec(), pseudo(u.len(), 9)).unwrap();
        let gx = upsample2_backward(&gy, x.shape(), 2);
        let lhs: f64 = u.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
