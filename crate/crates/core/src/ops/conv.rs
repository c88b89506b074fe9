//! 3D convolution (cross-correlation, no kernel flip).

use alloc::vec;

use crate::error::{Error, Result};
use crate::math;
use crate::shape_err;
use crate::volume::{Shape4, Volume};

/// Borrowed view of a rank-5 convolution kernel `[out_c, in_c, k, k, k]`,
/// flat in row-major order.
#[derive(Debug, Clone, Copy)]
pub struct Kernel3<'a> {
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    pub data: &'a [f64],
}

impl<'a> Kernel3<'a> {
    pub fn new(out_c: usize, in_c: usize, k: usize, data: &'a [f64]) -> Result<Self> {
        let expect = out_c * in_c * k * k * k;
        if data.len() != expect {
            return Err(shape_err!(
                "kernel data length {} != {out_c}x{in_c}x{k}^3 = {expect}",
                data.len()
            ));
        }
        if k == 0 || out_c == 0 || in_c == 0 {
            return Err(shape_err!("kernel dims must be positive"));
        }
        Ok(Kernel3 {
            out_c,
            in_c,
            k,
            data,
        })
    }

    #[inline(always)]
    fn at(&self, oc: usize, ic: usize, kz: usize, ky: usize, kx: usize) -> f64 {
        self.data[(((oc * self.in_c + ic) * self.k + kz) * self.k + ky) * self.k + kx]
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv3d_shape(dim: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = dim + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output coordinates whose input index `o*stride + koff - padding`
/// lies in `[0, dim)`.
#[inline]
fn valid_out_range(out_dim: usize, in_dim: usize, stride: usize, koff: usize, pad: usize) -> (usize, usize) {
    // o*stride + koff - pad >= 0  =>  o >= ceil((pad - koff)/stride)
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    // o*stride + koff - pad <= in_dim-1
    let hi_num = in_dim + pad;
    let hi = if hi_num > koff {
        ((hi_num - 1 - koff) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Strided 3D cross-correlation with zero padding.
///
/// Every output voxel accumulates its terms in the fixed order
/// `(in_c, kz, ky, kx)` on top of the bias, so results are bitwise
/// reproducible no matter how the outer loops are scheduled.
pub fn conv3d(
    input: &Volume,
    kernel: Kernel3<'_>,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Volume> {
    let ishape = input.shape();
    if kernel.in_c != ishape.c {
        return Err(shape_err!(
            "kernel expects {} input channels, volume has {}",
            kernel.in_c,
            ishape.c
        ));
    }
    if bias.len() != kernel.out_c {
        return Err(shape_err!(
            "bias length {} != out_c {}",
            bias.len(),
            kernel.out_c
        ));
    }
    if stride < 1 {
        return Err(Error::Invalid("stride must be >= 1".into()));
    }
    input.ensure_finite("conv3d input")?;
    if !math::all_finite(kernel.data) || !math::all_finite(bias) {
        return Err(Error::NonFinite("conv3d weights contain NaN/Inf".into()));
    }

    let k = kernel.k;
    let (od, oh, ow) = match (
        conv3d_shape(ishape.d, k, stride, padding),
        conv3d_shape(ishape.h, k, stride, padding),
        conv3d_shape(ishape.w, k, stride, padding),
    ) {
        (Some(d), Some(h), Some(w)) if d > 0 && h > 0 && w > 0 => (d, h, w),
        _ => {
            return Err(shape_err!(
                "conv output would be empty for input {ishape}, k={k}, stride={stride}, padding={padding}"
            ))
        }
    };

    let oshape = Shape4::new(kernel.out_c, od, oh, ow);
    let mut out = vec![0.0f64; oshape.len()];
    let inp = input.data();

    for oc in 0..kernel.out_c {
        let ochan = &mut out[oc * od * oh * ow..(oc + 1) * od * oh * ow];
        ochan.fill(bias[oc]);
        for ic in 0..kernel.in_c {
            let ichan = &inp[ic * ishape.spatial()..(ic + 1) * ishape.spatial()];
            for kz in 0..k {
                let (zlo, zhi) = valid_out_range(od, ishape.d, stride, kz, padding);
                for ky in 0..k {
                    let (ylo, yhi) = valid_out_range(oh, ishape.h, stride, ky, padding);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_out_range(ow, ishape.w, stride, kx, padding);
                        if xlo >= xhi {
                            continue;
                        }
                        let w = kernel.at(oc, ic, kz, ky, kx);
                        for oz in zlo..zhi {
                            let iz = oz * stride + kz - padding;
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - padding;
                                let orow = &mut ochan[(oz * oh + oy) * ow + xlo..(oz * oh + oy) * ow + xhi];
                                let ibase = (iz * ishape.h + iy) * ishape.w;
                                if stride == 1 {
                                    let ix0 = xlo + kx - padding;
                                    let irow = &ichan[ibase + ix0..ibase + ix0 + orow.len()];
                                    for (o, &v) in orow.iter_mut().zip(irow) {
                                        *o += w * v;
                                    }
                                } else {
                                    let mut ix = xlo * stride + kx - padding;
                                    for o in orow.iter_mut() {
                                        *o += w * ichan[ibase + ix];
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

    Volume::new(oshape, out)
}
