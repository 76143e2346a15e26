//! Convolutional VAE over full images: two stride-2 stages down to `n/4`,
//! a dense bottleneck, and a mirrored decoder conditioned on `z` in every
//! residual layer. Full resolution runs at half width.

use super::params::{Ctx, Group, ParamBuilder, ParamId};
use super::pixelcnn::clamp_log_scales;
use super::{NetworkConfig, LOGVAR_BOUND};
use crate::conv::{Geom, Pad};
use crate::graph::Var;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
}

impl Conv {
    fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize, k: usize, stride: usize, scale: f64) -> Self {
        Conv {
            w: pb.kernel(format!("{name}.w"), [co, ci, k, k], scale, false),
            b: pb.bias(format!("{name}.b"), co),
            k,
            stride,
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let [_, _, h, w] = ctx.g.shape(x);
        let g = Geom::conv(h, w, self.k, self.k, self.stride, Pad::same(self.k, self.k));
        let (wv, bv) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv(x, wv, Some(bv), g)
    }
}

#[derive(Clone, Debug)]
struct Up {
    w: ParamId,
    b: ParamId,
}

impl Up {
    fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize) -> Self {
        Up {
            w: pb.kernel(format!("{name}.w"), [ci, co, 2, 2], 1.0, true),
            b: pb.bias(format!("{name}.b"), co),
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let [_, _, h, w] = ctx.g.shape(x);
        let g = Geom {
            kh: 2,
            kw: 2,
            stride: 2,
            off_top: 0,
            off_left: 0,
            rows: h,
            cols: w,
        };
        let (wv, bv) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv_t(x, wv, Some(bv), g, 2 * h, 2 * w)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize) -> Self {
        Dense {
            w: pb.kernel(format!("{name}.w"), [co, ci, 1, 1], 1.0, false),
            b: pb.bias(format!("{name}.b"), co),
        }
    }

    /// `x` is `[ci, B, 1, 1]`.
    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let g = Geom::conv(1, 1, 1, 1, 1, Pad::default());
        let (wv, bv) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv(x, wv, Some(bv), g)
    }
}

/// `x + conv(elu(conv(elu(x)) + P·z))`.
#[derive(Clone, Debug)]
struct Res {
    c1: Conv,
    c2: Conv,
    latent: Option<ParamId>,
}

impl Res {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize, latent: Option<usize>) -> Self {
        Res {
            c1: Conv::new(pb, &format!("{name}.c1"), c, c, 3, 1, 1.0),
            c2: Conv::new(pb, &format!("{name}.c2"), c, c, 3, 1, 0.1),
            latent: latent.map(|l| pb.kernel(format!("{name}.latent"), [c, l, 1, 1], 1.0, false)),
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, z: Option<Var>) -> Var {
        let e = ctx.g.elu(x);
        let mut h = self.c1.apply(ctx, e);
        if let (Some(w), Some(z)) = (self.latent, z) {
            let g = Geom::conv(1, 1, 1, 1, 1, Pad::default());
            let wv = ctx.p(w);
            let pz = ctx.g.conv(z, wv, None, g);
            h = ctx.g.add_bcast(h, pz);
        }
        let e = ctx.g.elu(h);
        let h = self.c2.apply(ctx, e);
        ctx.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub image_side: usize,
    pub latent_len: usize,
    channels: usize,
    log_scale_floor: f64,
    enc_in: Conv,
    enc_down1: Conv,
    enc_res1: Res,
    enc_down2: Conv,
    enc_res2: Res,
    enc_out: Dense,
    dec_in: Dense,
    dec_res1: Res,
    dec_up1: Up,
    dec_res2: Res,
    dec_up2: Up,
    dec_out: Conv,
}

impl Vae {
    pub fn build(cfg: &NetworkConfig, pb: &mut ParamBuilder) -> Self {
        pb.set_group(Group::Vae);
        let c = cfg.vae_channels;
        let l = cfg.latent_len;
        let q = cfg.image_side / 4;
        let flat = c * q * q;
        let half = c.div_ceil(2);
        let vae = Vae {
            image_side: cfg.image_side,
            latent_len: l,
            channels: c,
            log_scale_floor: cfg.log_scale_floor,
            enc_in: Conv::new(pb, "vae.enc.in", 1, half, 3, 1, 1.0),
            enc_down1: Conv::new(pb, "vae.enc.down1", half, c, 3, 2, 1.0),
            enc_res1: Res::new(pb, "vae.enc.res1", c, None),
            enc_down2: Conv::new(pb, "vae.enc.down2", c, c, 3, 2, 1.0),
            enc_res2: Res::new(pb, "vae.enc.res2", c, None),
            enc_out: Dense::new(pb, "vae.enc.out", flat, 2 * l),
            dec_in: Dense::new(pb, "vae.dec.in", l, flat),
            dec_res1: Res::new(pb, "vae.dec.res1", c, Some(l)),
            dec_up1: Up::new(pb, "vae.dec.up1", c, c),
            dec_res2: Res::new(pb, "vae.dec.res2", c, Some(l)),
            dec_up2: Up::new(pb, "vae.dec.up2", c, half),
            dec_out: Conv::new(pb, "vae.dec.out", half, 2, 3, 1, 0.1),
        };
        pb.set_group(Group::PixelCnn);
        vae
    }

    /// `x: [1, B, n, n]` → `(mu, logvar)`, each `[L, B, 1, 1]`.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> (Var, Var) {
        let h = self.enc_in.apply(ctx, x);
        let h = ctx.g.elu(h);
        let h = self.enc_down1.apply(ctx, h);
        let h = self.enc_res1.apply(ctx, h, None);
        let h = ctx.g.elu(h);
        let h = self.enc_down2.apply(ctx, h);
        let h = self.enc_res2.apply(ctx, h, None);
        let h = ctx.g.elu(h);
        let flat = ctx.g.flatten(h);
        let out = self.enc_out.apply(ctx, flat);
        let mu = ctx.g.slice(out, 0, self.latent_len);
        let lv = ctx.g.slice(out, self.latent_len, self.latent_len);
        let lv = ctx.g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        (mu, lv)
    }

    /// `z: [L, B, 1, 1]` → `[2, B, n, n]` (mean, clamped log-scale).
    pub fn decode<T: Scalar>(&self, ctx: &mut Ctx<T>, z: Var) -> Var {
        let q = self.image_side / 4;
        let h = self.dec_in.apply(ctx, z);
        let h = ctx.g.unflatten(h, self.channels, q, q);
        let h = self.dec_res1.apply(ctx, h, Some(z));
        let h = ctx.g.elu(h);
        let h = self.dec_up1.apply(ctx, h);
        let h = self.dec_res2.apply(ctx, h, Some(z));
        let h = ctx.g.elu(h);
        let h = self.dec_up2.apply(ctx, h);
        let h = ctx.g.elu(h);
        let out = self.dec_out.apply(ctx, h);
        clamp_log_scales(ctx, out, 1, self.log_scale_floor)
    }
}
