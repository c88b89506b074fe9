use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::nn::mat::Mat;
use crate::nn::params::{Init, ParamId, ParamSet};
use crate::ops::{conv3d, conv3d_shape, upsample_nearest3d, Kernel3};
use crate::rng::Rng;
use crate::shape_err;
use crate::volume::{Shape4, Volume};

#[inline(always)]
pub fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

fn name_of(prefix: &str, suffix: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + suffix.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(suffix);
    s
}

// ---------------------------------------------------------------------------
// Convolution layer
// ---------------------------------------------------------------------------

/// 3D convolution with owned weight/bias parameters.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvSaved {
    input: Volume,
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let fan_in = (in_c * k * k * k) as f64;
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Normal {
                std: 1.0 / math::sqrt(fan_in),
            }
        };
        let w = ps.register(&name_of(name, "weight"), &[out_c, in_c, k, k, k], init, rng)?;
        let b = ps.register(&name_of(name, "bias"), &[out_c], Init::Zeros, rng)?;
        Ok(Conv3dLayer {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            padding,
        })
    }

    pub fn out_shape(&self, input: Shape4) -> Result<Shape4> {
        let d = conv3d_shape(input.d, self.k, self.stride, self.padding);
        let h = conv3d_shape(input.h, self.k, self.stride, self.padding);
        let w = conv3d_shape(input.w, self.k, self.stride, self.padding);
        match (d, h, w) {
            (Some(d), Some(h), Some(w)) if d * h * w > 0 => Ok(Shape4::new(self.out_c, d, h, w)),
            _ => Err(shape_err!("convolution output empty for input {input}")),
        }
    }

    pub fn forward(&self, ps: &ParamSet, input: &Volume) -> Result<(Volume, ConvSaved)> {
        let kernel = Kernel3::new(self.out_c, self.in_c, self.k, ps.value(self.w))?;
        let out = conv3d(input, kernel, ps.value(self.b), self.stride, self.padding)?;
        Ok((
            out,
            ConvSaved {
                input: input.clone(),
            },
        ))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, ps: &mut ParamSet, saved: &ConvSaved, gout: &Volume) -> Result<Volume> {
        let ishape = saved.input.shape();
        let oshape = gout.shape();
        let k = self.k;
        let stride = self.stride;
        let pad = self.padding;

        // bias gradient: plain channel sums
        {
            let gb: Vec<f64> = (0..self.out_c)
                .map(|oc| gout.channel(oc).iter().sum::<f64>())
                .collect();
            ps.add_grad(self.b, &gb);
        }

        // weight gradient
        {
            let mut gw = vec![0.0f64; self.out_c * self.in_c * k * k * k];
            let inp = saved.input.data();
            let g = gout.data();
            for oc in 0..self.out_c {
                let gchan = &g[oc * oshape.spatial()..(oc + 1) * oshape.spatial()];
                for ic in 0..self.in_c {
                    let ichan = &inp[ic * ishape.spatial()..(ic + 1) * ishape.spatial()];
                    for kz in 0..k {
                        let (zlo, zhi) = valid_range(oshape.d, ishape.d, stride, kz, pad);
                        for ky in 0..k {
                            let (ylo, yhi) = valid_range(oshape.h, ishape.h, stride, ky, pad);
                            for kx in 0..k {
                                let (xlo, xhi) = valid_range(oshape.w, ishape.w, stride, kx, pad);
                                if xlo >= xhi || zlo >= zhi || ylo >= yhi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oz in zlo..zhi {
                                    let iz = oz * stride + kz - pad;
                                    for oy in ylo..yhi {
                                        let iy = oy * stride + ky - pad;
                                        let grow = &gchan[(oz * oshape.h + oy) * oshape.w + xlo
                                            ..(oz * oshape.h + oy) * oshape.w + xhi];
                                        let ibase = (iz * ishape.h + iy) * ishape.w;
                                        if stride == 1 {
                                            let ix0 = xlo + kx - pad;
                                            acc += math::dot(grow, &ichan[ibase + ix0..ibase + ix0 + grow.len()]);
                                        } else {
                                            let mut ix = xlo * stride + kx - pad;
                                            for &gv in grow {
                                                acc += gv * ichan[ibase + ix];
                                                ix += stride;
                                            }
                                        }
                                    }
                                }
                                gw[(((oc * self.in_c + ic) * k + kz) * k + ky) * k + kx] = acc;
                            }
                        }
                    }
                }
            }
            ps.add_grad(self.w, &gw);
        }

        // input gradient: transposed convolution of gout with the kernel
        let kernel = Kernel3::new(self.out_c, self.in_c, k, ps.value(self.w))?;
        Ok(conv3d_input_grad(kernel, gout, ishape, stride, pad))
    }
}

/// Gradient of a convolution with respect to its input (transposed
/// convolution of `gout` with the kernel). Shared by the parameterized conv
/// layer and the frozen feature extractors.
pub(crate) fn conv3d_input_grad(
    kernel: Kernel3<'_>,
    gout: &Volume,
    input_shape: Shape4,
    stride: usize,
    pad: usize,
) -> Volume {
    let ishape = input_shape;
    let oshape = gout.shape();
    let k = kernel.k;
    let mut gin = Volume::zeros(ishape);
    let wdata = kernel.data;
    let g = gout.data();
    let gi = gin.data_mut();
    for oc in 0..kernel.out_c {
        let gchan = &g[oc * oshape.spatial()..(oc + 1) * oshape.spatial()];
        for ic in 0..kernel.in_c {
            for kz in 0..k {
                let (zlo, zhi) = valid_range(oshape.d, ishape.d, stride, kz, pad);
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(oshape.h, ishape.h, stride, ky, pad);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(oshape.w, ishape.w, stride, kx, pad);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = wdata[(((oc * kernel.in_c + ic) * k + kz) * k + ky) * k + kx];
                        for oz in zlo..zhi {
                            let iz = oz * stride + kz - pad;
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gchan[(oz * oshape.h + oy) * oshape.w + xlo
                                    ..(oz * oshape.h + oy) * oshape.w + xhi];
                                let ibase = ic * ishape.spatial() + (iz * ishape.h + iy) * ishape.w;
                                if stride == 1 {
                                    let ix0 = xlo + kx - pad;
                                    math::axpy(&mut gi[ibase + ix0..ibase + ix0 + grow.len()], wv, grow);
                                } else {
                                    let mut ix = xlo * stride + kx - pad;
                                    for &gv in grow {
                                        gi[ibase + ix] += wv * gv;
                                        ix += stride;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Output range with in-bounds input index; mirrors the forward clipping.
#[inline]
fn valid_range(out_dim: usize, in_dim: usize, stride: usize, koff: usize, pad: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    let hi_num = in_dim + pad;
    let hi = if hi_num > koff {
        ((hi_num - 1 - koff) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

/// GroupNorm with per-channel affine. Groups default to 8, clamped down to
/// the nearest divisor of the channel count.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormSaved {
    xhat: Volume,
    inv_std: Vec<f64>,
}

pub(crate) fn clamp_groups(wanted: usize, channels: usize) -> usize {
    let mut g = wanted.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

impl GroupNorm {
    pub fn build(ps: &mut ParamSet, rng: &mut Rng, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = clamp_groups(groups, channels);
        let gamma = ps.register(&name_of(name, "gamma"), &[channels], Init::Ones, rng)?;
        let beta = ps.register(&name_of(name, "beta"), &[channels], Init::Zeros, rng)?;
        Ok(GroupNorm {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Volume) -> Result<(Volume, GroupNormSaved)> {
        let shape = x.shape();
        if shape.c != self.channels {
            return Err(shape_err!(
                "groupnorm expects {} channels, got {}",
                self.channels,
                shape.c
            ));
        }
        let spatial = shape.spatial();
        let cpg = self.channels / self.groups;
        let group_len = cpg * spatial;
        let mut xhat = Volume::zeros(shape);
        let mut inv_std = Vec::with_capacity(self.groups);
        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);
        let mut out = Volume::zeros(shape);
        for g in 0..self.groups {
            let lo = g * group_len;
            let hi = lo + group_len;
            let chunk = &x.data()[lo..hi];
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let r = 1.0 / math::sqrt(var + self.eps);
            inv_std.push(r);
            let xh = &mut xhat.data_mut()[lo..hi];
            for (dst, &v) in xh.iter_mut().zip(chunk) {
                *dst = (v - mean) * r;
            }
            for lc in 0..cpg {
                let c = g * cpg + lc;
                let seg = lo + lc * spatial;
                let xh = &xhat.data()[seg..seg + spatial];
                let o = &mut out.data_mut()[seg..seg + spatial];
                for (dst, &v) in o.iter_mut().zip(xh) {
                    *dst = gamma[c] * v + beta[c];
                }
            }
        }
        Ok((out, GroupNormSaved { xhat, inv_std }))
    }

    pub fn backward(&self, ps: &mut ParamSet, saved: &GroupNormSaved, gout: &Volume) -> Result<Volume> {
        let shape = gout.shape();
        let spatial = shape.spatial();
        let cpg = self.channels / self.groups;
        let group_len = cpg * spatial;
        let gamma = ps.value(self.gamma).to_vec();

        let mut dgamma = vec![0.0f64; self.channels];
        let mut dbeta = vec![0.0f64; self.channels];
        let mut gin = Volume::zeros(shape);

        for g in 0..self.groups {
            let lo = g * group_len;
            let r = saved.inv_std[g];
            // dxhat = gout * gamma_c, plus the two group means for the
            // projection terms of the normalization derivative
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for lc in 0..cpg {
                let c = g * cpg + lc;
                let seg = lo + lc * spatial;
                let go = &gout.data()[seg..seg + spatial];
                let xh = &saved.xhat.data()[seg..seg + spatial];
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in 0..spatial {
                    let dxh = go[i] * gamma[c];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[i];
                    dg += go[i] * xh[i];
                    db += go[i];
                }
                dgamma[c] = dg;
                dbeta[c] = db;
            }
            let mean_dxhat = sum_dxhat / group_len as f64;
            let mean_dxhat_xhat = sum_dxhat_xhat / group_len as f64;
            for lc in 0..cpg {
                let c = g * cpg + lc;
                let seg = lo + lc * spatial;
                let go = &gout.data()[seg..seg + spatial];
                let xh = &saved.xhat.data()[seg..seg + spatial];
                let gi = &mut gin.data_mut()[seg..seg + spatial];
                for i in 0..spatial {
                    let dxh = go[i] * gamma[c];
                    gi[i] = r * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                }
            }
        }
        ps.add_grad(self.gamma, &dgamma);
        ps.add_grad(self.beta, &dbeta);
        Ok(gin)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SiluSaved {
    input: Volume,
}

pub fn silu_forward(x: &Volume) -> (Volume, SiluSaved) {
    (x.map(silu), SiluSaved { input: x.clone() })
}

pub fn silu_backward(saved: &SiluSaved, gout: &Volume) -> Volume {
    let mut gin = gout.clone();
    for (g, &x) in gin.data_mut().iter_mut().zip(saved.input.data()) {
        let s = math::sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
    gin
}

/// SiLU over a plain vector (time-embedding trunk).
pub fn silu_vec_forward(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (x.iter().map(|&v| silu(v)).collect(), x.to_vec())
}

pub fn silu_vec_backward(saved_input: &[f64], gout: &[f64]) -> Vec<f64> {
    saved_input
        .iter()
        .zip(gout)
        .map(|(&x, &g)| {
            let s = math::sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TanhSaved {
    output: Volume,
}

pub fn tanh_forward(x: &Volume) -> (Volume, TanhSaved) {
    let out = x.map(math::tanh);
    let saved = TanhSaved { output: out.clone() };
    (out, saved)
}

pub fn tanh_backward(saved: &TanhSaved, gout: &Volume) -> Volume {
    let mut gin = gout.clone();
    for (g, &y) in gin.data_mut().iter_mut().zip(saved.output.data()) {
        *g *= 1.0 - y * y;
    }
    gin
}

#[derive(Debug, Clone, Copy)]
pub struct LeakyRelu {
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct LeakyReluSaved {
    input: Volume,
}

impl LeakyRelu {
    pub fn forward(&self, x: &Volume) -> (Volume, LeakyReluSaved) {
        let a = self.slope;
        (
            x.map(|v| if v > 0.0 { v } else { a * v }),
            LeakyReluSaved { input: x.clone() },
        )
    }

    pub fn backward(&self, saved: &LeakyReluSaved, gout: &Volume) -> Volume {
        let a = self.slope;
        let mut gin = gout.clone();
        for (g, &x) in gin.data_mut().iter_mut().zip(saved.input.data()) {
            *g *= if x > 0.0 { 1.0 } else { a };
        }
        gin
    }
}

// ---------------------------------------------------------------------------
// Linear layer over row-major matrices
// ---------------------------------------------------------------------------

/// `y = x W^T + b`, applied row-wise. `W` has shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct LinearSaved {
    input: Mat,
}

impl Linear {
    pub fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Normal {
                std: 1.0 / math::sqrt(in_dim as f64),
            }
        };
        let w = ps.register(&name_of(name, "weight"), &[out_dim, in_dim], init, rng)?;
        let b = ps.register(&name_of(name, "bias"), &[out_dim], Init::Zeros, rng)?;
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Mat) -> Result<(Mat, LinearSaved)> {
        if x.cols != self.in_dim {
            return Err(shape_err!(
                "linear expects {} input columns, got {}",
                self.in_dim,
                x.cols
            ));
        }
        let w = ps.value(self.w);
        let b = ps.value(self.b);
        let mut out = Mat::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            let xrow = x.row(r);
            let orow = out.row_mut(r);
            for (o, dst) in orow.iter_mut().enumerate() {
                *dst = math::dot(&w[o * self.in_dim..(o + 1) * self.in_dim], xrow) + b[o];
            }
        }
        Ok((out, LinearSaved { input: x.clone() }))
    }

    pub fn backward(&self, ps: &mut ParamSet, saved: &LinearSaved, gout: &Mat) -> Result<Mat> {
        let x = &saved.input;
        let mut dw = vec![0.0f64; self.out_dim * self.in_dim];
        let mut db = vec![0.0f64; self.out_dim];
        let mut dx = Mat::zeros(x.rows, self.in_dim);
        let w = ps.value(self.w);
        for r in 0..x.rows {
            let xrow = x.row(r);
            let grow = gout.row(r);
            let dxrow = dx.row_mut(r);
            for o in 0..self.out_dim {
                let g = grow[o];
                db[o] += g;
                math::axpy(&mut dw[o * self.in_dim..(o + 1) * self.in_dim], g, xrow);
                math::axpy(dxrow, g, &w[o * self.in_dim..(o + 1) * self.in_dim]);
            }
        }
        ps.add_grad(self.w, &dw);
        ps.add_grad(self.b, &db);
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsample followed by a convolution
// ---------------------------------------------------------------------------

/// Up path building block: nearest upsample by 2 then a 3x3x3 convolution,
/// which avoids checkerboard artifacts.
#[derive(Debug, Clone)]
pub struct UpsampleLayer {
    pub conv: Conv3dLayer,
    pub factor: usize,
}

#[derive(Debug, Clone)]
pub struct UpsampleSaved {
    conv: ConvSaved,
    input_shape: Shape4,
}

impl UpsampleLayer {
    pub fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        factor: usize,
    ) -> Result<Self> {
        let conv = Conv3dLayer::build(ps, rng, name, in_c, out_c, 3, 1, 1, false)?;
        Ok(UpsampleLayer { conv, factor })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Volume) -> Result<(Volume, UpsampleSaved)> {
        let up = upsample_nearest3d(x, self.factor)?;
        let (out, conv) = self.conv.forward(ps, &up)?;
        Ok((
            out,
            UpsampleSaved {
                conv,
                input_shape: x.shape(),
            },
        ))
    }

    pub fn backward(&self, ps: &mut ParamSet, saved: &UpsampleSaved, gout: &Volume) -> Result<Volume> {
        let gup = self.conv.backward(ps, &saved.conv, gout)?;
        // nearest-neighbor backward: sum gradient over each replicated cell
        let is = saved.input_shape;
        let f = self.factor;
        let us = gup.shape();
        let mut gin = Volume::zeros(is);
        for c in 0..is.c {
            let gchan = gup.channel(c);
            let ichan = gin.channel_mut(c);
            for z in 0..us.d {
                let iz = z / f;
                for y in 0..us.h {
                    let irow_base = (iz * is.h + y / f) * is.w;
                    let grow = &gchan[(z * us.h + y) * us.w..(z * us.h + y) * us.w + us.w];
                    for (x, &g) in grow.iter().enumerate() {
                        ichan[irow_base + x / f] += g;
                    }
                }
            }
        }
        Ok(gin)
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

/// Pre-norm residual block, optionally modulated by a time embedding:
///
/// ```text
/// h = conv1(silu(gn1(x)))
/// h = gn2(h) * (1 + scale) + shift        (scale/shift from the time MLP)
/// y = conv2(silu(h)) + skip(x)
/// ```
///
/// `conv2` is zero-initialized so a fresh block is the identity map.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv3dLayer,
    pub gn2: GroupNorm,
    pub conv2: Conv3dLayer,
    pub temb_proj: Option<Linear>,
    pub skip: Option<Conv3dLayer>,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlockSaved {
    gn1: GroupNormSaved,
    silu1: SiluSaved,
    conv1: ConvSaved,
    gn2: GroupNormSaved,
    film: Option<FilmSaved>,
    silu2: SiluSaved,
    conv2: ConvSaved,
    skip: Option<ConvSaved>,
}

#[derive(Debug, Clone)]
pub struct FilmSaved {
    h: Volume,
    scale: Vec<f64>,
    temb: LinearSaved,
}

impl ResBlock {
    pub fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        groups: usize,
        temb_dim: Option<usize>,
    ) -> Result<Self> {
        let gn1 = GroupNorm::build(ps, rng, &name_of(name, "gn1"), in_c, groups)?;
        let conv1 = Conv3dLayer::build(ps, rng, &name_of(name, "conv1"), in_c, out_c, 3, 1, 1, false)?;
        let gn2 = GroupNorm::build(ps, rng, &name_of(name, "gn2"), out_c, groups)?;
        let conv2 = Conv3dLayer::build(ps, rng, &name_of(name, "conv2"), out_c, out_c, 3, 1, 1, true)?;
        let temb_proj = match temb_dim {
            Some(dim) => Some(Linear::build(ps, rng, &name_of(name, "temb"), dim, 2 * out_c, false)?),
            None => None,
        };
        let skip = if in_c != out_c {
            Some(Conv3dLayer::build(ps, rng, &name_of(name, "skip"), in_c, out_c, 1, 1, 0, false)?)
        } else {
            None
        };
        Ok(ResBlock {
            gn1,
            conv1,
            gn2,
            conv2,
            temb_proj,
            skip,
            in_c,
            out_c,
        })
    }

    /// `temb` is the shared (already SiLU-activated) time trunk; required iff
    /// the block was built with a time projection.
    pub fn forward(&self, ps: &ParamSet, x: &Volume, temb: Option<&[f64]>) -> Result<(Volume, ResBlockSaved)> {
        let (a1, gn1s) = self.gn1.forward(ps, x)?;
        let (a2, silu1) = silu_forward(&a1);
        let (h, conv1s) = self.conv1.forward(ps, &a2)?;
        let (mut h2, gn2s) = self.gn2.forward(ps, &h)?;

        let film = match (&self.temb_proj, temb) {
            (Some(lin), Some(t)) => {
                let tin = Mat::new(1, t.len(), t.to_vec())?;
                let (ss, temb_saved) = lin.forward(ps, &tin)?;
                let scale = ss.data[..self.out_c].to_vec();
                let shift = &ss.data[self.out_c..];
                let saved_h = h2.clone();
                let spatial = h2.shape().spatial();
                for c in 0..self.out_c {
                    let seg = &mut h2.data_mut()[c * spatial..(c + 1) * spatial];
                    let a = 1.0 + scale[c];
                    let b = shift[c];
                    for v in seg.iter_mut() {
                        *v = *v * a + b;
                    }
                }
                Some(FilmSaved {
                    h: saved_h,
                    scale,
                    temb: temb_saved,
                })
            }
            (None, None) => None,
            (Some(_), None) => return Err(shape_err!("residual block requires a time embedding")),
            (None, Some(_)) => return Err(shape_err!("residual block does not take a time embedding")),
        };

        let (a3, silu2) = silu_forward(&h2);
        let (h4, conv2s) = self.conv2.forward(ps, &a3)?;

        let (y, skip_saved) = match &self.skip {
            Some(sk) => {
                let (sx, saved) = sk.forward(ps, x)?;
                (h4.add_scaled(&sx, 1.0)?, Some(saved))
            }
            None => (h4.add_scaled(x, 1.0)?, None),
        };

        Ok((
            y,
            ResBlockSaved {
                gn1: gn1s,
                silu1,
                conv1: conv1s,
                gn2: gn2s,
                film,
                silu2,
                conv2: conv2s,
                skip: skip_saved,
            },
        ))
    }

    /// Returns `(dx, dtemb)`; `dtemb` is present iff the block is modulated.
    pub fn backward(
        &self,
        ps: &mut ParamSet,
        saved: &ResBlockSaved,
        gout: &Volume,
    ) -> Result<(Volume, Option<Vec<f64>>)> {
        let da3 = self.conv2.backward(ps, &saved.conv2, gout)?;
        let dh2 = silu_backward(&saved.silu2, &da3);

        let (dh2, dtemb) = match (&self.temb_proj, &saved.film) {
            (Some(lin), Some(film)) => {
                let spatial = dh2.shape().spatial();
                let mut dscale = vec![0.0f64; self.out_c];
                let mut dshift = vec![0.0f64; self.out_c];
                let mut dh = dh2.clone();
                for c in 0..self.out_c {
                    let g = &dh2.data()[c * spatial..(c + 1) * spatial];
                    let hv = &film.h.data()[c * spatial..(c + 1) * spatial];
                    let mut ds = 0.0;
                    let mut db = 0.0;
                    for i in 0..spatial {
                        ds += g[i] * hv[i];
                        db += g[i];
                    }
                    dscale[c] = ds;
                    dshift[c] = db;
                    let a = 1.0 + film.scale[c];
                    for v in dh.data_mut()[c * spatial..(c + 1) * spatial].iter_mut() {
                        *v *= a;
                    }
                }
                let mut gvec = dscale;
                gvec.extend_from_slice(&dshift);
                let gmat = Mat::new(1, 2 * self.out_c, gvec)?;
                let dt = lin.backward(ps, &film.temb, &gmat)?;
                (dh, Some(dt.data))
            }
            _ => (dh2, None),
        };

        let dh = self.gn2.backward(ps, &saved.gn2, &dh2)?;
        let da2 = self.conv1.backward(ps, &saved.conv1, &dh)?;
        let da1 = silu_backward(&saved.silu1, &da2);
        let mut dx = self.gn1.backward(ps, &saved.gn1, &da1)?;

        match (&self.skip, &saved.skip) {
            (Some(sk), Some(sks)) => {
                let dskip = sk.backward(ps, sks, gout)?;
                dx = dx.add_scaled(&dskip, 1.0)?;
            }
            (None, None) => {
                dx = dx.add_scaled(gout, 1.0)?;
            }
            _ => unreachable!("skip saved state out of sync"),
        }
        Ok((dx, dtemb))
    }
}
