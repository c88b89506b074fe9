//! Non-overlapping pooling and nearest-neighbor upsampling.

use crate::error::{Error, Result};
use crate::shape_err;
use crate::volume::{Shape4, Volume};

fn pooled_shape(shape: Shape4, k: usize) -> Result<Shape4> {
    if k == 0 {
        return Err(Error::Invalid("pool kernel must be >= 1".into()));
    }
    if shape.d % k != 0 || shape.h % k != 0 || shape.w % k != 0 {
        return Err(shape_err!(
            "spatial dims {shape} not divisible by pool kernel {k} (no implicit padding)"
        ));
    }
    Ok(Shape4::new(shape.c, shape.d / k, shape.h / k, shape.w / k))
}

fn pool3d(input: &Volume, k: usize, max: bool) -> Result<Volume> {
    input.ensure_finite("pool input")?;
    let ishape = input.shape();
    let oshape = pooled_shape(ishape, k)?;
    let mut out = Volume::zeros(oshape);
    let inv = 1.0 / (k * k * k) as f64;
    let mut window = alloc::vec![0.0f64; k * k * k];
    for c in 0..ishape.c {
        let ichan = input.channel(c);
        let ochan = out.channel_mut(c);
        for oz in 0..oshape.d {
            for oy in 0..oshape.h {
                for ox in 0..oshape.w {
                    let mut i = 0;
                    for dz in 0..k {
                        for dy in 0..k {
                            let base = ((oz * k + dz) * ishape.h + oy * k + dy) * ishape.w + ox * k;
                            window[i..i + k].copy_from_slice(&ichan[base..base + k]);
                            i += k;
                        }
                    }
                    let v = if max {
                        window.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
                    } else {
                        crate::math::pairwise_sum(&window) * inv
                    };
                    ochan[(oz * oshape.h + oy) * oshape.w + ox] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Max over non-overlapping `k^3` windows; channels preserved.
pub fn max_pool3d(input: &Volume, k: usize) -> Result<Volume> {
    pool3d(input, k, true)
}

/// Mean over non-overlapping `k^3` windows; channels preserved.
pub fn avg_pool3d(input: &Volume, k: usize) -> Result<Volume> {
    pool3d(input, k, false)
}

/// Replicates every voxel `factor^3` times. `avg_pool3d(factor)` of the
/// result recovers the input exactly.
pub fn upsample_nearest3d(input: &Volume, factor: usize) -> Result<Volume> {
    if factor < 1 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    let is = input.shape();
    let os = Shape4::new(is.c, is.d * factor, is.h * factor, is.w * factor);
    let mut out = Volume::zeros(os);
    for c in 0..is.c {
        let ichan = input.channel(c);
        let ochan = out.channel_mut(c);
        for z in 0..os.d {
            let iz = z / factor;
            for y in 0..os.h {
                let irow = &ichan[(iz * is.h + y / factor) * is.w..];
                let orow = &mut ochan[(z * os.h + y) * os.w..(z * os.h + y) * os.w + os.w];
                for (x, o) in orow.iter_mut().enumerate() {
                    *o = irow[x / factor];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn pool_reference(input: &Volume, k: usize, max: bool) -> Volume {
        let is = input.shape();
        let os = Shape4::new(is.c, is.d / k, is.h / k, is.w / k);
        let mut out = Volume::zeros(os);
        for c in 0..is.c {
            for oz in 0..os.d {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut vals = alloc::vec::Vec::new();
                        for dz in 0..k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    vals.push(input.at(c, oz * k + dz, oy * k + dy, ox * k + dx));
                                }
                            }
                        }
                        let v = if max {
                            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        };
                        out.set(c, oz, oy, ox, v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn max_propagates_single_voxel() {
        let mut v = Volume::zeros(Shape4::new(1, 4, 4, 4));
        v.set(0, 2, 1, 3, 1.0);
        let out = max_pool3d(&v, 4).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled(Shape4::new(2, 4, 4, 4), 0.625);
        for k in [1, 2, 4] {
            assert!(max_pool3d(&v, k).unwrap().data().iter().all(|&x| x == 0.625));
            assert!(avg_pool3d(&v, k).unwrap().data().iter().all(|&x| x == 0.625));
        }
    }

    #[test]
    fn avg_is_arithmetic_mean() {
        // two 4s among six zeros -> mean 1.0
        let v = Volume::new(
            Shape4::new(1, 2, 2, 2),
            alloc::vec![0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0],
        )
        .unwrap();
        let out = avg_pool3d(&v, 2).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn pools_match_reference() {
        let mut rng = Rng::new(21);
        let v = rng.normal_volume(Shape4::new(1, 8, 8, 8));
        for k in [2usize, 4] {
            let fast_max = max_pool3d(&v, k).unwrap();
            let slow_max = pool_reference(&v, k, true);
            assert_eq!(fast_max.data(), slow_max.data());
            let fast_avg = avg_pool3d(&v, k).unwrap();
            let slow_avg = pool_reference(&v, k, false);
            for (a, b) in fast_avg.data().iter().zip(slow_avg.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_divisible_dims() {
        let v = Volume::zeros(Shape4::new(1, 5, 4, 4));
        assert!(matches!(max_pool3d(&v, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_replicates_and_roundtrips() {
        let v = Volume::new(Shape4::new(1, 1, 1, 1), alloc::vec![5.0]).unwrap();
        let up = upsample_nearest3d(&v, 2).unwrap();
        assert_eq!(up.shape(), Shape4::new(1, 2, 2, 2));
        assert!(up.data().iter().all(|&x| x == 5.0));

        let mut rng = Rng::new(4);
        let v = rng.normal_volume(Shape4::new(2, 3, 2, 4));
        let round = avg_pool3d(&upsample_nearest3d(&v, 2).unwrap(), 2).unwrap();
        // mean of k^3 identical values is exact in binary arithmetic for k=2
        assert_eq!(round.data(), v.data());
    }

    #[test]
    fn rejects_zero_factor() {
        let v = Volume::zeros(Shape4::new(1, 2, 2, 2));
        assert!(upsample_nearest3d(&v, 0).is_err());
    }
}
