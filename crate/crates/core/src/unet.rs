//! Conditional 3D U-Net denoiser: time-modulated residual blocks, stride-2
//! down path, nearest-upsample up path, additive skip connections, and
//! optional cross-attention over mask context tokens. Predicts velocity.

use alloc::vec::Vec;

use crate::error::Result;
use crate::invalid_err;
use crate::mask::{concat_condition, ContextEmbed, ContextSaved};
use crate::nn::{
    silu_backward, silu_forward, silu_vec_backward, silu_vec_forward, time_embedding,
    AttentionSaved, Conv3dLayer, ConvSaved, CrossAttention, GroupNorm, GroupNormSaved, Linear,
    LinearSaved, Mat, ParamSet, ResBlock, ResBlockSaved, SiluSaved, UpsampleLayer, UpsampleSaved,
};
use crate::rng::Rng;
use crate::shape_err;
use crate::volume::{Shape4, Volume};

/// Denoiser architecture. The desk default is 3 levels on small latents; the
/// full-scale variant (5 levels, two blocks per level) is the same code with
/// different numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub levels: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Levels whose block stacks are followed by cross-attention; only
    /// meaningful for conditional models.
    pub attention_levels: Vec<usize>,
    pub d_ctx: usize,
    pub heads: usize,
    pub latent_channels: usize,
    pub conditional: bool,
    pub t_max: u32,
    pub groups: usize,
}

impl UnetConfig {
    pub fn new(conditional: bool) -> Self {
        UnetConfig {
            levels: 3,
            blocks_per_level: 2,
            base_channels: 32,
            channel_cap: 512,
            attention_levels: if conditional { alloc::vec![1, 2] } else { Vec::new() },
            d_ctx: 64,
            heads: 1,
            latent_channels: 4,
            conditional,
            t_max: 1000,
            groups: 8,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + usize::from(self.conditional)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.blocks_per_level == 0 || self.base_channels == 0 {
            return Err(invalid_err!("levels, blocks and base channels must be positive"));
        }
        if !self.conditional && !self.attention_levels.is_empty() {
            return Err(invalid_err!(
                "unconditional model cannot have attention levels (got {:?})",
                self.attention_levels
            ));
        }
        if let Some(&bad) = self.attention_levels.iter().find(|&&l| l >= self.levels) {
            return Err(invalid_err!(
                "attention level {bad} out of range for {} levels",
                self.levels
            ));
        }
        if self.conditional && (self.d_ctx == 0 || self.heads == 0) {
            return Err(invalid_err!("conditional model needs d_ctx and heads"));
        }
        if self.t_max < 2 {
            return Err(invalid_err!("t_max must be >= 2"));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        // sinusoidal width; must be even
        let d = self.base_channels.max(2);
        d + d % 2
    }

    fn trunk_dim(&self) -> usize {
        4 * self.base_channels
    }
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig::new(false)
    }
}

/// One denoising query: the noisy latent, its timestep, and (for conditional
/// models) the downsampled encoded mask from which both the concatenation
/// channel and the attention context are derived.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    pub z_t: &'a Volume,
    pub t: u32,
    pub mask_latent: Option<&'a Volume>,
}

/// Elementwise sum skip merge: channels are preserved, nothing is
/// concatenated anywhere in the skip path.
pub fn additive_skip_merge(decoder_feat: &Volume, encoder_feat: &Volume) -> Result<Volume> {
    decoder_feat.ensure_same_shape(encoder_feat, "additive skip merge")?;
    decoder_feat.add_scaled(encoder_feat, 1.0)
}

struct LevelDown {
    blocks: Vec<ResBlock>,
    attn: Option<CrossAttention>,
    down: Option<Conv3dLayer>,
}

struct LevelUp {
    up: UpsampleLayer,
    blocks: Vec<ResBlock>,
    attn: Option<CrossAttention>,
}

/// The denoiser network. All parameters live in one [`ParamSet`] built by
/// [`UNet::build`].
pub struct UNet {
    pub config: UnetConfig,
    conv_in: Conv3dLayer,
    time_lin: Linear,
    ctx_embed: Option<ContextEmbed>,
    down: Vec<LevelDown>,
    up: Vec<LevelUp>,
    out_gn: GroupNorm,
    out_conv: Conv3dLayer,
}

pub struct UnetSaved {
    conv_in: ConvSaved,
    time_lin: LinearSaved,
    trunk_pre: Vec<f64>,
    ctx: Option<(Mat, ContextSaved)>,
    down: Vec<(Vec<ResBlockSaved>, Option<AttentionSaved>, Option<ConvSaved>)>,
    up: Vec<(UpsampleSaved, Vec<ResBlockSaved>, Option<AttentionSaved>)>,
    out_gn: GroupNormSaved,
    out_silu: SiluSaved,
    out_conv: ConvSaved,
    input_conditional: bool,
}

impl UNet {
    pub fn build(config: UnetConfig, ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c0 = config.channels_at(0);
        let conv_in = Conv3dLayer::build(ps, rng, "unet.conv_in", config.in_channels(), c0, 3, 1, 1, false)?;
        let time_lin = Linear::build(ps, rng, "unet.time", config.time_dim(), config.trunk_dim(), false)?;
        let ctx_embed = if config.conditional {
            Some(ContextEmbed::build(ps, rng, "unet.ctx", config.d_ctx)?)
        } else {
            None
        };

        let mut down = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let ch = config.channels_at(l);
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for b in 0..config.blocks_per_level {
                blocks.push(ResBlock::build(
                    ps,
                    rng,
                    &alloc::format!("unet.down{l}.block{b}"),
                    ch,
                    ch,
                    config.groups,
                    Some(config.trunk_dim()),
                )?);
            }
            let attn = if config.attention_levels.contains(&l) {
                Some(CrossAttention::build(
                    ps,
                    rng,
                    &alloc::format!("unet.down{l}.attn"),
                    ch,
                    config.d_ctx,
                    64,
                    config.heads,
                )?)
            } else {
                None
            };
            let down_conv = if l + 1 < config.levels {
                Some(Conv3dLayer::build(
                    ps,
                    rng,
                    &alloc::format!("unet.down{l}.down"),
                    ch,
                    config.channels_at(l + 1),
                    3,
                    2,
                    1,
                    false,
                )?)
            } else {
                None
            };
            down.push(LevelDown {
                blocks,
                attn,
                down: down_conv,
            });
        }

        let mut up = Vec::new();
        for l in (0..config.levels.saturating_sub(1)).rev() {
            let ch = config.channels_at(l);
            let upsample = UpsampleLayer::build(
                ps,
                rng,
                &alloc::format!("unet.up{l}.upsample"),
                config.channels_at(l + 1),
                ch,
                2,
            )?;
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for b in 0..config.blocks_per_level {
                blocks.push(ResBlock::build(
                    ps,
                    rng,
                    &alloc::format!("unet.up{l}.block{b}"),
                    ch,
                    ch,
                    config.groups,
                    Some(config.trunk_dim()),
                )?);
            }
            let attn = if config.attention_levels.contains(&l) {
                Some(CrossAttention::build(
                    ps,
                    rng,
                    &alloc::format!("unet.up{l}.attn"),
                    ch,
                    config.d_ctx,
                    64,
                    config.heads,
                )?)
            } else {
                None
            };
            up.push(LevelUp {
                up: upsample,
                blocks,
                attn,
            });
        }

        let out_gn = GroupNorm::build(ps, rng, "unet.out_gn", c0, config.groups)?;
        // zero-initialized head: a fresh model predicts exactly zero velocity
        let out_conv = Conv3dLayer::build(ps, rng, "unet.out_conv", c0, config.latent_channels, 3, 1, 1, true)?;

        Ok(UNet {
            config,
            conv_in,
            time_lin,
            ctx_embed,
            down,
            up,
            out_gn,
            out_conv,
        })
    }

    fn check_input(&self, input: &DenoiseInput<'_>) -> Result<()> {
        let zs = input.z_t.shape();
        if zs.c != self.config.latent_channels {
            return Err(shape_err!(
                "latent has {} channels, model expects {}",
                zs.c,
                self.config.latent_channels
            ));
        }
        let div = 1usize << (self.config.levels - 1);
        if zs.d % div != 0 || zs.h % div != 0 || zs.w % div != 0 {
            return Err(shape_err!(
                "latent spatial dims {zs} must be divisible by 2^(levels-1) = {div}"
            ));
        }
        match (self.config.conditional, input.mask_latent) {
            (true, None) => Err(invalid_err!(
                "conditional model requires a mask latent; none was provided"
            )),
            (false, Some(_)) => Err(invalid_err!(
                "unconditional model was given a mask latent; conditional and unconditional modes are exclusive"
            )),
            (true, Some(m)) => {
                let ms = m.shape();
                if (ms.d, ms.h, ms.w) != (zs.d, zs.h, zs.w) || ms.c != 1 {
                    return Err(shape_err!(
                        "mask latent shape {ms} does not match latent {zs}"
                    ));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Full forward pass keeping everything the backward pass needs.
    pub fn forward(&self, ps: &ParamSet, input: &DenoiseInput<'_>) -> Result<(Volume, UnetSaved)> {
        self.check_input(input)?;

        let x = match input.mask_latent {
            Some(m) => concat_condition(input.z_t, m)?,
            None => input.z_t.clone(),
        };

        let sin = time_embedding(input.t, self.config.t_max, self.config.time_dim())?;
        let tmat = Mat::new(1, sin.len(), sin)?;
        let (trunk_pre_mat, time_lin_saved) = self.time_lin.forward(ps, &tmat)?;
        let (trunk, trunk_pre) = silu_vec_forward(&trunk_pre_mat.data);

        let ctx = match (&self.ctx_embed, input.mask_latent) {
            (Some(embed), Some(m)) => Some(embed.forward(ps, m)?),
            _ => None,
        };

        let (mut h, conv_in_saved) = self.conv_in.forward(ps, &x)?;

        let mut skips: Vec<Volume> = Vec::new();
        let mut down_saved = Vec::with_capacity(self.down.len());
        for level in self.down.iter() {
            let mut blocks_saved = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                let (nh, saved) = block.forward(ps, &h, Some(&trunk))?;
                h = nh;
                blocks_saved.push(saved);
            }
            let attn_saved = match (&level.attn, &ctx) {
                (Some(attn), Some((tokens, _))) => {
                    let (nh, saved) = attn.forward(ps, &h, tokens)?;
                    h = nh;
                    Some(saved)
                }
                _ => None,
            };
            let down_conv_saved = match &level.down {
                Some(dc) => {
                    skips.push(h.clone());
                    let (nh, saved) = dc.forward(ps, &h)?;
                    h = nh;
                    Some(saved)
                }
                None => None,
            };
            down_saved.push((blocks_saved, attn_saved, down_conv_saved));
        }

        let mut up_saved = Vec::with_capacity(self.up.len());
        for level in &self.up {
            let (uh, upsample_saved) = level.up.forward(ps, &h)?;
            let skip = skips.pop().expect("one skip per up level");
            h = additive_skip_merge(&uh, &skip)?;
            let mut blocks_saved = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                let (nh, saved) = block.forward(ps, &h, Some(&trunk))?;
                h = nh;
                blocks_saved.push(saved);
            }
            let attn_saved = match (&level.attn, &ctx) {
                (Some(attn), Some((tokens, _))) => {
                    let (nh, saved) = attn.forward(ps, &h, tokens)?;
                    h = nh;
                    Some(saved)
                }
                _ => None,
            };
            up_saved.push((upsample_saved, blocks_saved, attn_saved));
        }

        let (hn, out_gn_saved) = self.out_gn.forward(ps, &h)?;
        let (ha, out_silu_saved) = silu_forward(&hn);
        let (v_hat, out_conv_saved) = self.out_conv.forward(ps, &ha)?;

        Ok((
            v_hat,
            UnetSaved {
                conv_in: conv_in_saved,
                time_lin: time_lin_saved,
                trunk_pre,
                ctx,
                down: down_saved,
                up: up_saved,
                out_gn: out_gn_saved,
                out_silu: out_silu_saved,
                out_conv: out_conv_saved,
                input_conditional: input.mask_latent.is_some(),
            },
        ))
    }

    /// Inference-only forward: predicted velocity with `z_t`'s shape.
    pub fn denoise(&self, ps: &ParamSet, input: &DenoiseInput<'_>) -> Result<Volume> {
        Ok(self.forward(ps, input)?.0)
    }

    /// Accumulates parameter gradients from the output gradient. Gradients
    /// into `z_t` / the mask are discarded (both are data).
    pub fn backward(&self, ps: &mut ParamSet, saved: &UnetSaved, d_vhat: &Volume) -> Result<()> {
        let mut dtrunk = alloc::vec![0.0f64; self.config.trunk_dim()];
        let mut dtokens = saved
            .ctx
            .as_ref()
            .map(|(tokens, _)| Mat::zeros(tokens.rows, tokens.cols));

        let da = self.out_conv.backward(ps, &saved.out_conv, d_vhat)?;
        let dn = silu_backward(&saved.out_silu, &da);
        let mut dh = self.out_gn.backward(ps, &saved.out_gn, &dn)?;

        // up path in reverse
        let mut dskips: Vec<Volume> = Vec::new();
        for (level, (upsample_saved, blocks_saved, attn_saved)) in
            self.up.iter().zip(&saved.up).rev()
        {
            if let (Some(attn), Some(asaved)) = (&level.attn, attn_saved) {
                let (ndh, dctx) = attn.backward(ps, asaved, &dh)?;
                dh = ndh;
                if let Some(dt) = dtokens.as_mut() {
                    crate::math::axpy(&mut dt.data, 1.0, &dctx.data);
                }
            }
            for (block, bsaved) in level.blocks.iter().zip(blocks_saved).rev() {
                let (ndh, dt) = block.backward(ps, bsaved, &dh)?;
                dh = ndh;
                if let Some(dt) = dt {
                    crate::math::axpy(&mut dtrunk, 1.0, &dt);
                }
            }
            // additive merge: gradient flows unchanged to both inputs
            dskips.push(dh.clone());
            dh = level.up.backward(ps, upsample_saved, &dh)?;
        }

        // down path in reverse
        for (level, (blocks_saved, attn_saved, down_conv_saved)) in
            self.down.iter().zip(&saved.down).rev()
        {
            if let (Some(dc), Some(dcs)) = (&level.down, down_conv_saved) {
                let mut ndh = dc.backward(ps, dcs, &dh)?;
                let dskip = dskips.pop().expect("one skip gradient per down level");
                ndh = ndh.add_scaled(&dskip, 1.0)?;
                dh = ndh;
            }
            if let (Some(attn), Some(asaved)) = (&level.attn, attn_saved) {
                let (ndh, dctx) = attn.backward(ps, asaved, &dh)?;
                dh = ndh;
                if let Some(dt) = dtokens.as_mut() {
                    crate::math::axpy(&mut dt.data, 1.0, &dctx.data);
                }
            }
            for (block, bsaved) in level.blocks.iter().zip(blocks_saved).rev() {
                let (ndh, dt) = block.backward(ps, bsaved, &dh)?;
                dh = ndh;
                if let Some(dt) = dt {
                    crate::math::axpy(&mut dtrunk, 1.0, &dt);
                }
            }
        }

        let _dx = self.conv_in.backward(ps, &saved.conv_in, &dh)?;

        if let (Some(embed), Some((_, csaved)), Some(dt)) =
            (&self.ctx_embed, &saved.ctx, dtokens.as_ref())
        {
            embed.backward(ps, csaved, dt)?;
        }

        let dtrunk_pre = silu_vec_backward(&saved.trunk_pre, &dtrunk);
        let dmat = Mat::new(1, dtrunk_pre.len(), dtrunk_pre)?;
        self.time_lin.backward(ps, &saved.time_lin, &dmat)?;
        Ok(())
    }

    /// Latent shape the model accepts for a given spatial size.
    pub fn latent_shape(&self, d: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(self.config.latent_channels, d, h, w)
    }
}
