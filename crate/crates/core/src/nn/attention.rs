use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::nn::mat::Mat;
use crate::nn::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::shape_err;
use crate::volume::Volume;

/// Multi-head cross-attention over a feature volume.
///
/// Queries come from the flattened spatial positions of the input volume,
/// keys/values from an external context token matrix. The attended output is
/// projected back to the channel width and added residually to the input.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub ctx_dim: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionSaved {
    x_mat: Mat,    // N x C
    ctx: Mat,      // n_ctx x d_ctx
    q: Mat,        // N x d_k
    k: Mat,        // n_ctx x d_k
    v: Mat,        // n_ctx x d_v
    probs: Vec<Mat>, // per head, N x n_ctx
    attended: Mat, // N x d_v
}

/// `out[r,:] = x[r,:] W^T` for a row-major `W: [out_dim, in_dim]`.
fn matmul_wt(x: &Mat, w: &[f64], out_dim: usize, in_dim: usize) -> Mat {
    let mut out = Mat::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let xrow = x.row(r);
        let orow = out.row_mut(r);
        for (o, dst) in orow.iter_mut().enumerate() {
            *dst = math::dot(&w[o * in_dim..(o + 1) * in_dim], xrow);
        }
    }
    out
}

impl CrossAttention {
    pub fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        ctx_dim: usize,
        d_k: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_k % heads != 0 {
            return Err(shape_err!("attention heads ({heads}) must divide d_k ({d_k})"));
        }
        let d_v = d_k;
        let init = |dim_in: usize| crate::nn::params::Init::Normal {
            std: 1.0 / math::sqrt(dim_in as f64),
        };
        let wq = ps.register(&alloc::format!("{name}.wq"), &[d_k, channels], init(channels), rng)?;
        let wk = ps.register(&alloc::format!("{name}.wk"), &[d_k, ctx_dim], init(ctx_dim), rng)?;
        let wv = ps.register(&alloc::format!("{name}.wv"), &[d_v, ctx_dim], init(ctx_dim), rng)?;
        // zero out-projection: the residual branch starts as the identity
        let wo = ps.register(
            &alloc::format!("{name}.wo"),
            &[channels, d_v],
            crate::nn::params::Init::Zeros,
            rng,
        )?;
        Ok(CrossAttention {
            wq,
            wk,
            wv,
            wo,
            channels,
            ctx_dim,
            d_k,
            d_v,
            heads,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &Volume, ctx: &Mat) -> Result<(Volume, AttentionSaved)> {
        let shape = x.shape();
        if shape.c != self.channels {
            return Err(shape_err!(
                "attention expects {} channels, got {}",
                self.channels,
                shape.c
            ));
        }
        if ctx.rows == 0 {
            return Err(shape_err!("attention context is empty"));
        }
        if ctx.cols != self.ctx_dim {
            return Err(shape_err!(
                "context width {} != configured d_ctx {}",
                ctx.cols,
                self.ctx_dim
            ));
        }
        let n = shape.spatial();
        // flatten: X[pos, c] = x[c, pos]
        let mut x_mat = Mat::zeros(n, self.channels);
        for c in 0..self.channels {
            let chan = x.channel(c);
            for (pos, &v) in chan.iter().enumerate() {
                x_mat.data[pos * self.channels + c] = v;
            }
        }

        let q = matmul_wt(&x_mat, ps.value(self.wq), self.d_k, self.channels);
        let k = matmul_wt(ctx, ps.value(self.wk), self.d_k, self.ctx_dim);
        let v = matmul_wt(ctx, ps.value(self.wv), self.d_v, self.ctx_dim);

        let dh = self.d_k / self.heads;
        let dhv = self.d_v / self.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut probs = Vec::with_capacity(self.heads);
        let mut attended = Mat::zeros(n, self.d_v);
        for h in 0..self.heads {
            let qo = h * dh;
            let vo = h * dhv;
            let mut p = Mat::zeros(n, ctx.rows);
            for r in 0..n {
                let qrow = &q.row(r)[qo..qo + dh];
                let prow = p.row_mut(r);
                let mut mx = f64::NEG_INFINITY;
                for (m, dst) in prow.iter_mut().enumerate() {
                    let s = math::dot(qrow, &k.row(m)[qo..qo + dh]) * scale;
                    *dst = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = 0.0;
                for dst in prow.iter_mut() {
                    *dst = math::exp(*dst - mx);
                    z += *dst;
                }
                for dst in prow.iter_mut() {
                    *dst /= z;
                }
            }
            for r in 0..n {
                let arow = &mut attended.row_mut(r)[vo..vo + dhv];
                for m in 0..ctx.rows {
                    let pv = p.at(r, m);
                    math::axpy(arow, pv, &v.row(m)[vo..vo + dhv]);
                }
            }
            probs.push(p);
        }

        let o = matmul_wt(&attended, ps.value(self.wo), self.channels, self.d_v);
        let mut out = x.clone();
        for c in 0..self.channels {
            let chan = out.channel_mut(c);
            for (pos, dst) in chan.iter_mut().enumerate() {
                *dst += o.data[pos * self.channels + c];
            }
        }

        Ok((
            out,
            AttentionSaved {
                x_mat,
                ctx: ctx.clone(),
                q,
                k,
                v,
                probs,
                attended,
            },
        ))
    }

    /// Returns `(dx, dctx)`, accumulating projection gradients.
    pub fn backward(
        &self,
        ps: &mut ParamSet,
        saved: &AttentionSaved,
        gout: &Volume,
    ) -> Result<(Volume, Mat)> {
        let shape = gout.shape();
        let n = shape.spatial();
        let n_ctx = saved.ctx.rows;
        let dh = self.d_k / self.heads;
        let dhv = self.d_v / self.heads;
        let scale = 1.0 / math::sqrt(dh as f64);

        // gout as N x C
        let mut g_mat = Mat::zeros(n, self.channels);
        for c in 0..self.channels {
            let chan = gout.channel(c);
            for (pos, &v) in chan.iter().enumerate() {
                g_mat.data[pos * self.channels + c] = v;
            }
        }

        // out-projection: O = A Wo^T
        let wo = ps.value(self.wo).to_vec();
        let mut dwo = vec![0.0f64; self.channels * self.d_v];
        let mut d_attended = Mat::zeros(n, self.d_v);
        for r in 0..n {
            let grow = g_mat.row(r);
            let arow = saved.attended.row(r);
            let darow = d_attended.row_mut(r);
            for c in 0..self.channels {
                let g = grow[c];
                math::axpy(&mut dwo[c * self.d_v..(c + 1) * self.d_v], g, arow);
                math::axpy(darow, g, &wo[c * self.d_v..(c + 1) * self.d_v]);
            }
        }
        ps.add_grad(self.wo, &dwo);

        let mut dq = Mat::zeros(n, self.d_k);
        let mut dk = Mat::zeros(n_ctx, self.d_k);
        let mut dv = Mat::zeros(n_ctx, self.d_v);
        for h in 0..self.heads {
            let qo = h * dh;
            let vo = h * dhv;
            let p = &saved.probs[h];
            for r in 0..n {
                let darow = &d_attended.row(r)[vo..vo + dhv];
                // dP[r,m] = dA[r] . V[m]; dV[m] += P[r,m] dA[r]
                let mut dprow = vec![0.0f64; n_ctx];
                for m in 0..n_ctx {
                    dprow[m] = math::dot(darow, &saved.v.row(m)[vo..vo + dhv]);
                    math::axpy(&mut dv.row_mut(m)[vo..vo + dhv], p.at(r, m), darow);
                }
                // softmax backward: dS = P o (dP - sum(dP o P))
                let prow = p.row(r);
                let dot_pp = math::dot(&dprow, prow);
                for m in 0..n_ctx {
                    let ds = prow[m] * (dprow[m] - dot_pp) * scale;
                    math::axpy(&mut dq.row_mut(r)[qo..qo + dh], ds, &saved.k.row(m)[qo..qo + dh]);
                    math::axpy(&mut dk.row_mut(m)[qo..qo + dh], ds, &saved.q.row(r)[qo..qo + dh]);
                }
            }
        }

        // project back through Wq/Wk/Wv
        let wq = ps.value(self.wq).to_vec();
        let wk = ps.value(self.wk).to_vec();
        let wv = ps.value(self.wv).to_vec();

        let mut dwq = vec![0.0f64; self.d_k * self.channels];
        let mut dx_mat = Mat::zeros(n, self.channels);
        for r in 0..n {
            let xrow = saved.x_mat.row(r);
            let dqrow = dq.row(r);
            let dxrow = dx_mat.row_mut(r);
            for o in 0..self.d_k {
                let g = dqrow[o];
                math::axpy(&mut dwq[o * self.channels..(o + 1) * self.channels], g, xrow);
                math::axpy(dxrow, g, &wq[o * self.channels..(o + 1) * self.channels]);
            }
        }
        ps.add_grad(self.wq, &dwq);

        let mut dwk = vec![0.0f64; self.d_k * self.ctx_dim];
        let mut dwv = vec![0.0f64; self.d_v * self.ctx_dim];
        let mut dctx = Mat::zeros(n_ctx, self.ctx_dim);
        for m in 0..n_ctx {
            let crow = saved.ctx.row(m);
            let dkrow = dk.row(m);
            let dvrow = dv.row(m);
            let dcrow = dctx.row_mut(m);
            for o in 0..self.d_k {
                let g = dkrow[o];
                math::axpy(&mut dwk[o * self.ctx_dim..(o + 1) * self.ctx_dim], g, crow);
                math::axpy(dcrow, g, &wk[o * self.ctx_dim..(o + 1) * self.ctx_dim]);
            }
            for o in 0..self.d_v {
                let g = dvrow[o];
                math::axpy(&mut dwv[o * self.ctx_dim..(o + 1) * self.ctx_dim], g, crow);
                math::axpy(dcrow, g, &wv[o * self.ctx_dim..(o + 1) * self.ctx_dim]);
            }
        }
        ps.add_grad(self.wk, &dwk);
        ps.add_grad(self.wv, &dwv);

        // residual: dx = gout + attention-path gradient
        let mut dx = gout.clone();
        for c in 0..self.channels {
            let chan = dx.channel_mut(c);
            for (pos, dst) in chan.iter_mut().enumerate() {
                *dst += dx_mat.data[pos * self.channels + c];
            }
        }
        Ok((dx, dctx))
    }
}
