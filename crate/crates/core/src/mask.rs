//! Anatomical mask conditioning: integer labels -> scalar codebook ->
//! latent-resolution downsampling -> (a) concatenation channel and
//! (b) cross-attention context tokens.

use alloc::vec::Vec;

use crate::error::Result;
use crate::invalid_err;
use crate::math;
use crate::nn::{Init, Mat, ParamId, ParamSet};
use crate::ops::max_pool3d;
use crate::rng::Rng;
use crate::shape_err;
use crate::volume::{Shape4, Volume};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LUNG: u8 = 1;
/// Nodule labels are `2..=6`, encoding texture scores `1..=5`.
pub const LABEL_NODULE_MIN: u8 = 2;
pub const LABEL_NODULE_MAX: u8 = 6;

/// Spatial factor between image masks and latents.
pub const MASK_DOWNSAMPLE: usize = 4;

/// Integer-labeled voxel grid over the full image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    d: usize,
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(d: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if d * h * w == 0 {
            return Err(shape_err!("mask dims must be positive"));
        }
        if labels.len() != d * h * w {
            return Err(shape_err!(
                "mask label count {} != {d}x{h}x{w}",
                labels.len()
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l > LABEL_NODULE_MAX {
                let z = i / (h * w);
                let y = (i / w) % h;
                let x = i % w;
                return Err(invalid_err!(
                    "invalid mask label {l} at voxel (z={z}, y={y}, x={x}); labels are 0..=6"
                ));
            }
        }
        Ok(MaskVolume { d, h, w, labels })
    }

    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        MaskVolume {
            d,
            h,
            w,
            labels: alloc::vec![0u8; d * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, label: u8) {
        self.labels[(z * self.h + y) * self.w + x] = label;
    }
}

/// Which anatomical cues enter the conditioning signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Nodules only; lung voxels encode as background.
    Nodule,
    /// Nodules plus the lung field; nodules carry a fixed mid-solidity code.
    NoduleLung,
    /// Nodules with their texture score plus the lung field.
    NoduleLungTexture,
}

impl ConditioningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditioningMode::Nodule => "nodule",
            ConditioningMode::NoduleLung => "nodule+lung",
            ConditioningMode::NoduleLungTexture => "nodule+lung+texture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nodule" => Ok(ConditioningMode::Nodule),
            "nodule+lung" => Ok(ConditioningMode::NoduleLung),
            "nodule+lung+texture" => Ok(ConditioningMode::NoduleLungTexture),
            other => Err(invalid_err!(
                "unknown conditioning mode {other:?} (expected nodule, nodule+lung or nodule+lung+texture)"
            )),
        }
    }
}

/// Raw code before [0,1] normalization: background 0, lung 0.5,
/// nodules 1..=5 by texture (fixed 3 when texture is not conditioned on).
fn raw_code(mode: ConditioningMode, label: u8) -> f64 {
    match label {
        LABEL_BACKGROUND => 0.0,
        LABEL_LUNG => match mode {
            ConditioningMode::Nodule => 0.0,
            _ => 0.5,
        },
        nodule => {
            let texture = (nodule - 1) as f64;
            match mode {
                ConditioningMode::NoduleLungTexture => texture,
                _ => 3.0,
            }
        }
    }
}

/// Encodes labels into `[0, 1]` by dividing the raw codes by 5, so the
/// codebook is exactly {0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0}.
pub fn encode_mask(mask: &MaskVolume, mode: ConditioningMode) -> Volume {
    let (d, h, w) = mask.dims();
    let data: Vec<f64> = mask
        .labels()
        .iter()
        .map(|&l| raw_code(mode, l) / 5.0)
        .collect();
    Volume::new(Shape4::new(1, d, h, w), data).expect("codebook values are finite")
}

/// Max-pools the encoded mask by the latent compression factor. Max keeps a
/// nodule visible in any cell it touches, since nodule codes dominate the
/// lung code.
pub fn downsample_mask(encoded: &Volume) -> Result<Volume> {
    if encoded.shape().c != 1 {
        return Err(shape_err!(
            "encoded mask must have one channel, got {}",
            encoded.shape().c
        ));
    }
    max_pool3d(encoded, MASK_DOWNSAMPLE)
}

/// Concatenates the downsampled mask as a trailing channel of the latent.
pub fn concat_condition(z_t: &Volume, mask: &Volume) -> Result<Volume> {
    let zs = z_t.shape();
    let ms = mask.shape();
    if ms.c != 1 {
        return Err(shape_err!("mask channel count must be 1, got {}", ms.c));
    }
    if (zs.d, zs.h, zs.w) != (ms.d, ms.h, ms.w) {
        return Err(shape_err!(
            "latent spatial dims {zs} do not match mask dims {ms}"
        ));
    }
    let mut data = Vec::with_capacity((zs.c + 1) * zs.spatial());
    data.extend_from_slice(z_t.data());
    data.extend_from_slice(mask.data());
    Volume::new(Shape4::new(zs.c + 1, zs.d, zs.h, zs.w), data)
}

/// Token grid edge length; tokens summarize nothing finer than coarse
/// laterality, which keeps attention cheap.
pub const TOKEN_GRID: usize = 4;

/// Learned embedding of pooled mask scalars into cross-attention tokens:
/// per-token affine of the pooled value plus a per-position embedding.
#[derive(Debug, Clone)]
pub struct ContextEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub pos: ParamId,
    pub d_ctx: usize,
}

#[derive(Debug, Clone)]
pub struct ContextSaved {
    scalars: Vec<f64>,
    pos_indices: Vec<usize>,
}

impl ContextEmbed {
    pub fn build(ps: &mut ParamSet, rng: &mut Rng, name: &str, d_ctx: usize) -> Result<Self> {
        let w = ps.register(
            &alloc::format!("{name}.weight"),
            &[d_ctx],
            Init::Normal { std: 1.0 },
            rng,
        )?;
        let b = ps.register(&alloc::format!("{name}.bias"), &[d_ctx], Init::Zeros, rng)?;
        let pos = ps.register(
            &alloc::format!("{name}.pos"),
            &[TOKEN_GRID * TOKEN_GRID * TOKEN_GRID, d_ctx],
            Init::Normal { std: 0.02 },
            rng,
        )?;
        Ok(ContextEmbed { w, b, pos, d_ctx })
    }

    /// Pools the downsampled mask onto a fixed token grid (clamped to the
    /// available dims) and embeds each scalar. Token order is z-major.
    pub fn forward(&self, ps: &ParamSet, downsampled: &Volume) -> Result<(Mat, ContextSaved)> {
        let s = downsampled.shape();
        if s.c != 1 {
            return Err(shape_err!("context input must have one channel"));
        }
        let gz = TOKEN_GRID.min(s.d);
        let gy = TOKEN_GRID.min(s.h);
        let gx = TOKEN_GRID.min(s.w);
        let chan = downsampled.channel(0);

        let mut scalars = Vec::with_capacity(gz * gy * gx);
        let mut pos_indices = Vec::with_capacity(gz * gy * gx);
        let mut bucket = Vec::new();
        for zi in 0..gz {
            let z0 = zi * s.d / gz;
            let z1 = (zi + 1) * s.d / gz;
            for yi in 0..gy {
                let y0 = yi * s.h / gy;
                let y1 = (yi + 1) * s.h / gy;
                for xi in 0..gx {
                    let x0 = xi * s.w / gx;
                    let x1 = (xi + 1) * s.w / gx;
                    bucket.clear();
                    for z in z0..z1 {
                        for y in y0..y1 {
                            bucket.extend_from_slice(
                                &chan[(z * s.h + y) * s.w + x0..(z * s.h + y) * s.w + x1],
                            );
                        }
                    }
                    scalars.push(math::pairwise_sum(&bucket) / bucket.len() as f64);
                    pos_indices.push((zi * TOKEN_GRID + yi) * TOKEN_GRID + xi);
                }
            }
        }

        let w = ps.value(self.w);
        let b = ps.value(self.b);
        let pos = ps.value(self.pos);
        let n = scalars.len();
        let mut tokens = Mat::zeros(n, self.d_ctx);
        for (j, (&sv, &pi)) in scalars.iter().zip(&pos_indices).enumerate() {
            let row = tokens.row_mut(j);
            let prow = &pos[pi * self.d_ctx..(pi + 1) * self.d_ctx];
            for c in 0..self.d_ctx {
                row[c] = w[c] * sv + b[c] + prow[c];
            }
        }
        Ok((tokens, ContextSaved { scalars, pos_indices }))
    }

    /// Accumulates embedding gradients; the mask itself is data, so no input
    /// gradient is produced.
    pub fn backward(&self, ps: &mut ParamSet, saved: &ContextSaved, dtokens: &Mat) -> Result<()> {
        let d = self.d_ctx;
        if dtokens.rows != saved.scalars.len() || dtokens.cols != d {
            return Err(shape_err!("context gradient shape mismatch"));
        }
        let mut dw = alloc::vec![0.0f64; d];
        let mut db = alloc::vec![0.0f64; d];
        let mut dpos = alloc::vec![0.0f64; TOKEN_GRID * TOKEN_GRID * TOKEN_GRID * d];
        for (j, (&sv, &pi)) in saved.scalars.iter().zip(&saved.pos_indices).enumerate() {
            let g = dtokens.row(j);
            math::axpy(&mut dw, sv, g);
            math::axpy(&mut db, 1.0, g);
            math::axpy(&mut dpos[pi * d..(pi + 1) * d], 1.0, g);
        }
        ps.add_grad(self.w, &dw);
        ps.add_grad(self.b, &db);
        ps.add_grad(self.pos, &dpos);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codebook() -> [f64; 7] {
        [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
    }

    #[test]
    fn encode_covers_exact_codebook() {
        // exhaustive: every label in every mode lands exactly on a codebook value
        let labels: Vec<u8> = (0..=6).collect();
        let mask = MaskVolume::new(1, 1, 7, labels).unwrap();
        for mode in [
            ConditioningMode::Nodule,
            ConditioningMode::NoduleLung,
            ConditioningMode::NoduleLungTexture,
        ] {
            let enc = encode_mask(&mask, mode);
            for &v in enc.data() {
                assert!(codebook().contains(&v), "{v} not in codebook (mode {mode:?})");
            }
        }
    }

    #[test]
    fn mode_specific_codes() {
        let mask = MaskVolume::new(1, 1, 3, alloc::vec![0, 1, 6]).unwrap();
        let nod = encode_mask(&mask, ConditioningMode::Nodule);
        assert_eq!(nod.data(), &[0.0, 0.0, 0.6]);
        let nl = encode_mask(&mask, ConditioningMode::NoduleLung);
        assert_eq!(nl.data(), &[0.0, 0.1, 0.6]);
        let nlt = encode_mask(&mask, ConditioningMode::NoduleLungTexture);
        assert_eq!(nlt.data(), &[0.0, 0.1, 1.0]);
    }

    #[test]
    fn rejects_invalid_label_with_coordinates() {
        let err = MaskVolume::new(1, 2, 2, alloc::vec![0, 1, 7, 0]).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("z=0") && msg.contains("y=1") && msg.contains("x=0"), "{msg}");
    }

    #[test]
    fn nodule_survives_pooling_over_lung() {
        // one nodule voxel inside an otherwise-lung block
        let mut mask = MaskVolume::zeros(4, 4, 4);
        mask.labels_mut().fill(LABEL_LUNG);
        mask.set(1, 2, 3, 6);
        let enc = encode_mask(&mask, ConditioningMode::NoduleLungTexture);
        let down = downsample_mask(&enc).unwrap();
        assert_eq!(down.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(down.data(), &[1.0]);
    }

    #[test]
    fn all_lung_block_pools_to_lung_code() {
        let mut mask = MaskVolume::zeros(8, 8, 8);
        mask.labels_mut().fill(LABEL_LUNG);
        let enc = encode_mask(&mask, ConditioningMode::NoduleLung);
        let down = downsample_mask(&enc).unwrap();
        assert_eq!(down.shape(), Shape4::new(1, 2, 2, 2));
        assert!(down.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn concat_places_mask_last_bitwise() {
        let mut rng = Rng::new(3);
        let z = rng.normal_volume(Shape4::new(4, 2, 2, 2));
        let m = rng.normal_volume(Shape4::new(1, 2, 2, 2));
        let out = concat_condition(&z, &m).unwrap();
        assert_eq!(out.shape().c, 5);
        assert_eq!(&out.data()[..z.data().len()], z.data());
        assert_eq!(&out.data()[z.data().len()..], m.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let z = Volume::zeros(Shape4::new(4, 2, 2, 2));
        let m = Volume::zeros(Shape4::new(1, 2, 2, 4));
        assert!(concat_condition(&z, &m).is_err());
    }

    #[test]
    fn zero_mask_tokens_are_bias_plus_position() {
        let mut rng = Rng::new(5);
        let mut ps = ParamSet::new();
        let embed = ContextEmbed::build(&mut ps, &mut rng, "ctx", 8).unwrap();
        let down = Volume::zeros(Shape4::new(1, 16, 16, 16));
        let (tokens, _) = embed.forward(&ps, &down).unwrap();
        assert_eq!(tokens.rows, 64);
        let b = ps.value(embed.b);
        let pos = ps.value(embed.pos);
        for j in 0..64 {
            for c in 0..8 {
                assert_eq!(tokens.at(j, c), b[c] + pos[j * 8 + c]);
            }
        }
    }

    #[test]
    fn token_grid_clamps_to_small_inputs() {
        let mut rng = Rng::new(6);
        let mut ps = ParamSet::new();
        let embed = ContextEmbed::build(&mut ps, &mut rng, "ctx", 4).unwrap();
        let down = Volume::zeros(Shape4::new(1, 2, 2, 2));
        let (tokens, _) = embed.forward(&ps, &down).unwrap();
        assert_eq!(tokens.rows, 8);
    }

    #[test]
    fn permuted_regions_change_token_sequence() {
        let mut rng = Rng::new(7);
        let mut ps = ParamSet::new();
        let embed = ContextEmbed::build(&mut ps, &mut rng, "ctx", 8).unwrap();
        // blob in one corner vs the opposite corner
        let mut a = Volume::zeros(Shape4::new(1, 8, 8, 8));
        let mut b = Volume::zeros(Shape4::new(1, 8, 8, 8));
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    a.set(0, z, y, x, 1.0);
                    b.set(0, 7 - z, 7 - y, 7 - x, 1.0);
                }
            }
        }
        let (ta, _) = embed.forward(&ps, &a).unwrap();
        let (tb, _) = embed.forward(&ps, &b).unwrap();
        assert_ne!(ta.data, tb.data);
    }

    #[test]
    fn mode_parse_roundtrip() {
        for mode in [
            ConditioningMode::Nodule,
            ConditioningMode::NoduleLung,
            ConditioningMode::NoduleLungTexture,
        ] {
            assert_eq!(ConditioningMode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(ConditioningMode::parse("lungs").is_err());
    }
}
