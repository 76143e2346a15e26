//! Two-stream gated PixelCNN over a patch, U-shaped across three or more
//! resolutions, with per-layer coordinate and latent gating.

use super::params::{Ctx, ParamBuilder, ParamId};
use super::NetworkConfig;
use crate::conv::{Geom, Pad};
use crate::graph::Var;
use crate::tensor::Scalar;

/// Stream a convolution belongs to; fixes its kernel and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stream {
    /// Vertical stack: sees the current row and everything above.
    Down,
    /// Horizontal stack: sees the current row up to the current column.
    DownRight,
}

#[derive(Clone, Debug)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    kh: usize,
    kw: usize,
    stream: Stream,
}

impl ConvP {
    fn new(pb: &mut ParamBuilder, name: &str, ci: usize, co: usize, kh: usize, kw: usize, stream: Stream, scale: f64) -> Self {
        ConvP {
            w: pb.kernel(format!("{name}.w"), [co, ci, kh, kw], scale, false),
            b: pb.bias(format!("{name}.b"), co),
            kh,
            kw,
            stream,
        }
    }

    fn pad(&self) -> Pad {
        match self.stream {
            Stream::Down => Pad {
                top: self.kh - 1,
                bottom: 0,
                left: (self.kw - 1) / 2,
                right: (self.kw - 1) / 2,
            },
            Stream::DownRight => Pad {
                top: self.kh - 1,
                bottom: 0,
                left: self.kw - 1,
                right: 0,
            },
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, stride: usize) -> Var {
        let [_, _, h, w] = ctx.g.shape(x);
        let g = Geom::conv(h, w, self.kh, self.kw, stride, self.pad());
        let (wv, bv) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv(x, wv, Some(bv), g)
    }
}

/// Stride-2 transposed convolution that doubles the resolution while
/// keeping each stream's causal footprint.
#[derive(Clone, Debug)]
struct DeconvP {
    w: ParamId,
    b: ParamId,
    kh: usize,
    kw: usize,
    off_left: usize,
}

impl DeconvP {
    fn new(pb: &mut ParamBuilder, name: &str, f: usize, kh: usize, kw: usize, stream: Stream) -> Self {
        DeconvP {
            w: pb.kernel(format!("{name}.w"), [f, f, kh, kw], 1.0, true),
            b: pb.bias(format!("{name}.b"), f),
            kh,
            kw,
            off_left: match stream {
                Stream::Down => (kw - 1) / 2,
                Stream::DownRight => 0,
            },
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let [_, _, h, w] = ctx.g.shape(x);
        let g = Geom {
            kh: self.kh,
            kw: self.kw,
            stride: 2,
            off_top: 0,
            off_left: self.off_left,
            rows: h,
            cols: w,
        };
        let (wv, bv) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv_t(x, wv, Some(bv), g, 2 * h, 2 * w)
    }
}

fn one_by_one<T: Scalar>(ctx: &mut Ctx<T>, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
    let [_, _, h, wd] = ctx.g.shape(x);
    let g = Geom::conv(h, wd, 1, 1, 1, Pad::default());
    let wv = ctx.p(w);
    let bv = b.map(|b| ctx.p(b));
    ctx.g.conv(x, wv, bv, g)
}

/// Zero-initialized projections of the coordinate map (per location) and
/// the latent code (broadcast) into the `2F` gate pre-activations.
#[derive(Clone, Debug)]
pub struct GateProjections {
    pub grid: Option<ParamId>,
    pub latent: Option<ParamId>,
}

impl GateProjections {
    pub fn new(pb: &mut ParamBuilder, name: &str, f: usize, latent_len: Option<usize>, coords: bool) -> Self {
        GateProjections {
            grid: coords.then(|| pb.conditioning(format!("{name}.grid"), [2 * f, 2, 1, 1])),
            latent: latent_len.map(|l| pb.conditioning(format!("{name}.latent"), [2 * f, l, 1, 1])),
        }
    }
}

/// `tanh(a + W_g·g + W_z·z) ⊙ σ(b + V_g·g + V_z·z)` where `[a; b]` is the
/// `2F`-channel input, `g` a `[2, B, H, W]` coordinate map and `z` a
/// `[L, B, 1, 1]` latent code.
pub fn gated_condition<T: Scalar>(
    ctx: &mut Ctx<T>,
    ab: Var,
    g: Option<Var>,
    z: Option<Var>,
    proj: &GateProjections,
) -> Var {
    let mut pre = ab;
    if let (Some(g), Some(w)) = (g, proj.grid) {
        let [_, _, h, wd] = ctx.g.shape(pre);
        assert_eq!(&ctx.g.shape(g)[2..], &[h, wd], "coordinate map resolution");
        let pg = one_by_one(ctx, g, w, None);
        pre = ctx.g.add(pre, pg);
    }
    if let (Some(z), Some(w)) = (z, proj.latent) {
        let pz = one_by_one(ctx, z, w, None);
        pre = ctx.g.add_bcast(pre, pz);
    }
    let f = ctx.g.shape(pre)[0] / 2;
    let a = ctx.g.slice(pre, 0, f);
    let b = ctx.g.slice(pre, f, f);
    let ta = ctx.g.tanh(a);
    let sb = ctx.g.sigmoid(b);
    ctx.g.mul(ta, sb)
}

#[derive(Clone, Debug)]
struct GatedResnet {
    c1: ConvP,
    skip: Option<(ParamId, ParamId)>,
    c2: ConvP,
    gate: GateProjections,
}

impl GatedResnet {
    #[allow(clippy::too_many_arguments)]
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        f: usize,
        skip_channels: Option<usize>,
        kh: usize,
        kw: usize,
        stream: Stream,
        cfg: &NetworkConfig,
    ) -> Self {
        GatedResnet {
            c1: ConvP::new(pb, &format!("{name}.c1"), 2 * f, f, kh, kw, stream, 1.0),
            skip: skip_channels.map(|s| {
                (
                    pb.kernel(format!("{name}.skip.w"), [f, 2 * s, 1, 1], 1.0, false),
                    pb.bias(format!("{name}.skip.b"), f),
                )
            }),
            c2: ConvP::new(pb, &format!("{name}.c2"), 2 * f, 2 * f, kh, kw, stream, 0.1),
            gate: GateProjections::new(
                pb,
                name,
                f,
                cfg.use_latent.then_some(cfg.latent_len),
                cfg.use_coords,
            ),
        }
    }

    fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, a: Option<Var>, g: Option<Var>, z: Option<Var>) -> Var {
        let e = ctx.g.concat_elu(x);
        let mut c = self.c1.apply(ctx, e, 1);
        if let (Some(a), Some((w, b))) = (a, self.skip) {
            let ea = ctx.g.concat_elu(a);
            let s = one_by_one(ctx, ea, w, Some(b));
            c = ctx.g.add(c, s);
        }
        let e = ctx.g.concat_elu(c);
        let e = ctx.dropout(e);
        let c2 = self.c2.apply(ctx, e, 1);
        let gated = gated_condition(ctx, c2, g, z, &self.gate);
        ctx.g.add(x, gated)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    u: GatedResnet,
    ul: GatedResnet,
}

#[derive(Clone, Debug)]
pub struct PixelCnn {
    pub cfg: NetworkConfig,
    init_u: ConvP,
    init_ul_v: ConvP,
    init_ul_h: ConvP,
    /// `up[level][layer]`.
    up: Vec<Vec<Layer>>,
    down_u: Vec<ConvP>,
    down_ul: Vec<ConvP>,
    /// `down[i][layer]`, deepest resolution first.
    down: Vec<Vec<Layer>>,
    up_u: Vec<DeconvP>,
    up_ul: Vec<DeconvP>,
    out_w: ParamId,
    out_b: ParamId,
}

impl PixelCnn {
    pub fn build(cfg: &NetworkConfig, pb: &mut ParamBuilder) -> Self {
        let f = cfg.channels;
        let k = cfg.kernel;
        let kh = k.div_ceil(2);
        let kw_r = k.div_ceil(2);
        let levels = cfg.levels();
        let n = cfg.layers_per_block;
        let layer = |pb: &mut ParamBuilder, name: String, u_skip: Option<usize>, ul_skip: usize| Layer {
            u: GatedResnet::new(pb, &format!("{name}.u"), f, u_skip, kh, k, Stream::Down, cfg),
            ul: GatedResnet::new(pb, &format!("{name}.ul"), f, Some(ul_skip), kh, kw_r, Stream::DownRight, cfg),
        };

        let init_u = ConvP::new(pb, "pcnn.init.u", 2, f, kh, k, Stream::Down, 1.0);
        let init_ul_v = ConvP::new(pb, "pcnn.init.ul_v", 2, f, 1, k, Stream::Down, 1.0);
        let init_ul_h = ConvP::new(pb, "pcnn.init.ul_h", 2, f, kh, 1, Stream::DownRight, 1.0);

        let mut up = Vec::new();
        let mut down_u = Vec::new();
        let mut down_ul = Vec::new();
        for l in 0..levels {
            up.push((0..n).map(|i| layer(pb, format!("pcnn.up{l}.{i}"), None, f)).collect());
            if l + 1 < levels {
                down_u.push(ConvP::new(pb, &format!("pcnn.down{l}.u"), f, f, kh, k, Stream::Down, 1.0));
                down_ul.push(ConvP::new(pb, &format!("pcnn.down{l}.ul"), f, f, kh, kw_r, Stream::DownRight, 1.0));
            }
        }
        let mut down = Vec::new();
        let mut up_u = Vec::new();
        let mut up_ul = Vec::new();
        for i in 0..levels {
            let reps = if i == 0 { n } else { n + 1 };
            down.push(
                (0..reps)
                    .map(|j| layer(pb, format!("pcnn.dn{i}.{j}"), Some(f), 2 * f))
                    .collect(),
            );
            if i + 1 < levels {
                up_u.push(DeconvP::new(pb, &format!("pcnn.deconv{i}.u"), f, kh, k, Stream::Down));
                up_ul.push(DeconvP::new(pb, &format!("pcnn.deconv{i}.ul"), f, kh, kw_r, Stream::DownRight));
            }
        }
        let outc = 3 * cfg.mixture_components;
        let out_w = pb.kernel("pcnn.out.w", [outc, f, 1, 1], 1.0, false);
        let out_b = pb.bias("pcnn.out.b", outc);
        PixelCnn {
            cfg: cfg.clone(),
            init_u,
            init_ul_v,
            init_ul_h,
            up,
            down_u,
            down_ul,
            down,
            up_u,
            up_ul,
            out_w,
            out_b,
        }
    }

    /// Forward pass. `y` is `[1, B, m, m]` in normalized units, `grids[l]`
    /// the `[2, B, m/2^l, m/2^l]` coordinate map per resolution, `z` the
    /// `[L, B, 1, 1]` latent code. Returns mixture parameters
    /// `[3K, B, m, m]` (logits, means, log-scales) with clamped log-scales.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, y: Var, grids: &[Var], z: Option<Var>) -> Var {
        let cfg = &self.cfg;
        let levels = cfg.levels();
        let [_, b, h, w] = ctx.g.shape(y);
        let grid = |l: usize| cfg.use_coords.then(|| grids[l]);
        let z = if cfg.use_latent { z } else { None };
        let ones = ctx.g.constant(crate::tensor::Tensor::full([1, b, h, w], T::one()));
        let x = ctx.g.concat(&[y, ones]);

        let u0 = self.init_u.apply(ctx, x, 1);
        let u0 = ctx.g.shift(u0, 1, 0);
        let v = self.init_ul_v.apply(ctx, x, 1);
        let v = ctx.g.shift(v, 1, 0);
        let hz = self.init_ul_h.apply(ctx, x, 1);
        let hz = ctx.g.shift(hz, 0, 1);
        let ul0 = ctx.g.add(v, hz);

        let mut us = vec![u0];
        let mut uls = vec![ul0];
        for l in 0..levels {
            for layer in &self.up[l] {
                let u = layer.u.apply(ctx, *us.last().unwrap(), None, grid(l), z);
                us.push(u);
                let ul = layer.ul.apply(ctx, *uls.last().unwrap(), Some(u), grid(l), z);
                uls.push(ul);
            }
            if l + 1 < levels {
                let u = self.down_u[l].apply(ctx, *us.last().unwrap(), 2);
                let ul = self.down_ul[l].apply(ctx, *uls.last().unwrap(), 2);
                us.push(u);
                uls.push(ul);
            }
        }

        let mut u = us.pop().unwrap();
        let mut ul = uls.pop().unwrap();
        for (i, block) in self.down.iter().enumerate() {
            let l = levels - 1 - i;
            for layer in block {
                let su = us.pop().expect("u skip");
                u = layer.u.apply(ctx, u, Some(su), grid(l), z);
                let sul = uls.pop().expect("ul skip");
                let a = ctx.g.concat(&[u, sul]);
                ul = layer.ul.apply(ctx, ul, Some(a), grid(l), z);
            }
            if i + 1 < levels {
                u = self.up_u[i].apply(ctx, u);
                ul = self.up_ul[i].apply(ctx, ul);
            }
        }
        debug_assert!(us.is_empty() && uls.is_empty());

        let e = ctx.g.elu(ul);
        let out = one_by_one(ctx, e, self.out_w, Some(self.out_b));
        clamp_log_scales(ctx, out, cfg.mixture_components, cfg.log_scale_floor)
    }
}

/// Clamps the trailing `k` log-scale channels below at `floor`.
pub(crate) fn clamp_log_scales<T: Scalar>(ctx: &mut Ctx<T>, out: Var, k: usize, floor: f64) -> Var {
    let c = ctx.g.shape(out)[0];
    let head = ctx.g.slice(out, 0, c - k);
    let ls = ctx.g.slice(out, c - k, k);
    let ls = ctx.g.clamp(ls, floor, f64::INFINITY);
    ctx.g.concat(&[head, ls])
}
