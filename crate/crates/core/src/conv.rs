//! Convolution and transposed convolution over `[C, B, H, W]` tensors.
//!
//! Both directions are a GEMM against a column buffer built by [`gather`]
//! and its adjoint [`scatter_add`]. Work is split into batch chunks whose
//! size depends only on the geometry, and per-chunk weight gradients are
//! summed in chunk order, so results do not depend on the thread count.

use crate::par;
use crate::tensor::{matmul, Scalar, Tensor, Trans};

const TARGET_COLUMNS: usize = 4096;

/// Sampling geometry: output position `(y, x)` and kernel tap `(kr, kc)`
/// read source pixel `(y·stride + kr − off_top, x·stride + kc − off_left)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub off_top: usize,
    pub off_left: usize,
    /// Positions on the "column" side (conv output, or transposed-conv input).
    pub rows: usize,
    pub cols: usize,
}

/// Zero padding of a convolution input, in pixels per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn same(kh: usize, kw: usize) -> Pad {
        Pad {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

impl Geom {
    pub fn conv(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: Pad) -> Geom {
        let ph = h + pad.top + pad.bottom;
        let pw = w + pad.left + pad.right;
        assert!(ph >= kh && pw >= kw, "kernel larger than padded input");
        Geom {
            kh,
            kw,
            stride,
            off_top: pad.top,
            off_left: pad.left,
            rows: (ph - kh) / stride + 1,
            cols: (pw - kw) / stride + 1,
        }
    }

    /// Positions `p` in `0..n` whose source `p·stride + k − off` lies in
    /// `0..size`, as a half-open range.
    fn valid(&self, k: usize, off: usize, n: usize, size: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= off { 0 } else { (off - k).div_ceil(s) };
        let hi = if size + off > k { ((size + off - k - 1) / s + 1).min(n) } else { 0 };
        (lo.min(hi), hi)
    }

    fn chunk(&self) -> usize {
        (TARGET_COLUMNS / (self.rows * self.cols).max(1)).max(1)
    }
}

/// `cols[(c,kr,kc), (b,y,x)] = src[c, b0+b, y·s+kr−ot, x·s+kc−ol]`, zero
/// outside the source.
pub fn gather<T: Scalar>(src: &Tensor<T>, b0: usize, nb: usize, g: &Geom) -> Vec<T> {
    let [c, bs, h, w] = src.shape;
    let k2 = g.kh * g.kw;
    let ncol = nb * g.rows * g.cols;
    let mut out = vec![T::zero(); c * k2 * ncol];
    for ch in 0..c {
        for kr in 0..g.kh {
            let (y0, y1) = g.valid(kr, g.off_top, g.rows, h);
            for kc in 0..g.kw {
                let (x0, x1) = g.valid(kc, g.off_left, g.cols, w);
                let row = (ch * k2 + kr * g.kw + kc) * ncol;
                for b in 0..nb {
                    let sb = ((ch * bs) + b0 + b) * h * w;
                    for y in y0..y1 {
                        let srow = sb + (y * g.stride + kr - g.off_top) * w;
                        let orow = row + (b * g.rows + y) * g.cols;
                        let dst = &mut out[orow + x0..orow + x1];
                        if g.stride == 1 {
                            let s0 = srow + x0 + kc - g.off_left;
                            dst.copy_from_slice(&src.data[s0..s0 + (x1 - x0)]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src.data[srow + (x0 + i) * g.stride + kc - g.off_left];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`gather`]: accumulates columns back into a local
/// `[C, nb, H, W]` buffer.
pub fn scatter_add<T: Scalar>(
    cols: &[T],
    c: usize,
    nb: usize,
    h: usize,
    w: usize,
    g: &Geom,
) -> Vec<T> {
    let k2 = g.kh * g.kw;
    let ncol = nb * g.rows * g.cols;
    let mut out = vec![T::zero(); c * nb * h * w];
    for ch in 0..c {
        for kr in 0..g.kh {
            let (y0, y1) = g.valid(kr, g.off_top, g.rows, h);
            for kc in 0..g.kw {
                let (x0, x1) = g.valid(kc, g.off_left, g.cols, w);
                let row = (ch * k2 + kr * g.kw + kc) * ncol;
                for b in 0..nb {
                    let db = (ch * nb + b) * h * w;
                    for y in y0..y1 {
                        let drow = db + (y * g.stride + kr - g.off_top) * w;
                        let crow = row + (b * g.rows + y) * g.cols;
                        let src = &cols[crow + x0..crow + x1];
                        if g.stride == 1 {
                            let d0 = drow + x0 + kc - g.off_left;
                            for (d, &v) in out[d0..d0 + (x1 - x0)].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        } else {
                            for (i, &v) in src.iter().enumerate() {
                                let d = &mut out[drow + (x0 + i) * g.stride + kc - g.off_left];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn chunks(batch: usize, per: usize) -> Vec<(usize, usize)> {
    (0..batch)
        .step_by(per)
        .map(|b0| (b0, per.min(batch - b0)))
        .collect()
}

/// Copies batch items `b0..b0+nb` of every channel into a contiguous
/// `[C, nb·H·W]` matrix.
fn batch_slice<T: Scalar>(t: &Tensor<T>, b0: usize, nb: usize) -> Vec<T> {
    let [c, bs, h, w] = t.shape;
    let hw = h * w;
    let mut out = Vec::with_capacity(c * nb * hw);
    for ch in 0..c {
        let s = (ch * bs + b0) * hw;
        out.extend_from_slice(&t.data[s..s + nb * hw]);
    }
    out
}

fn put_batch_slice<T: Scalar>(dst: &mut Tensor<T>, b0: usize, nb: usize, src: &[T]) {
    let [c, bs, h, w] = dst.shape;
    let n = nb * h * w;
    for ch in 0..c {
        let d = (ch * bs + b0) * h * w;
        dst.data[d..d + n].copy_from_slice(&src[ch * n..(ch + 1) * n]);
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let plane = out.plane();
        for (ch, chunk) in out.data.chunks_mut(plane).enumerate() {
            let v = b.data[ch];
            chunk.iter_mut().for_each(|x| *x = *x + v);
        }
    }
}

fn bias_grad<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let plane = dout.plane();
    let data = dout
        .data
        .chunks(plane)
        .map(|c| c.iter().copied().sum())
        .collect();
    Tensor::from_vec([dout.channels(), 1, 1, 1], data)
}

/// Forward convolution. `w` is `[Co, Ci, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &Geom) -> Tensor<T> {
    let [ci, bs, _, _] = x.shape;
    let co = w.shape[0];
    assert_eq!(w.shape[1], ci, "conv input channels");
    let k = ci * g.kh * g.kw;
    let plan = chunks(bs, g.chunk());
    let parts = par::map_slice(&plan, |&(b0, nb)| {
        let cols = gather(x, b0, nb, g);
        let n = nb * g.rows * g.cols;
        let mut o = vec![T::zero(); co * n];
        matmul(co, k, n, &w.data, Trans::N, &cols, Trans::N, T::zero(), &mut o);
        o
    });
    let mut out = Tensor::zeros([co, bs, g.rows, g.cols]);
    for (&(b0, nb), p) in plan.iter().zip(&parts) {
        put_batch_slice(&mut out, b0, nb, p);
    }
    add_bias(&mut out, bias);
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    g: &Geom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let [ci, bs, h, wd] = x.shape;
    let co = w.shape[0];
    let k = ci * g.kh * g.kw;
    let plan = chunks(bs, g.chunk());
    let (need_x, need_w, need_b) = need;
    let parts = par::map_slice(&plan, |&(b0, nb)| {
        let n = nb * g.rows * g.cols;
        let d = batch_slice(dout, b0, nb);
        let dw = need_w.then(|| {
            let cols = gather(x, b0, nb, g);
            let mut dw = vec![T::zero(); co * k];
            matmul(co, n, k, &d, Trans::N, &cols, Trans::T, T::zero(), &mut dw);
            dw
        });
        let dx = need_x.then(|| {
            let mut dcols = vec![T::zero(); k * n];
            matmul(k, co, n, &w.data, Trans::T, &d, Trans::N, T::zero(), &mut dcols);
            scatter_add(&dcols, ci, nb, h, wd, g)
        });
        (dw, dx)
    });
    let mut dw_total = need_w.then(|| Tensor::zeros(w.shape));
    let mut dx_total = need_x.then(|| Tensor::zeros(x.shape));
    for (&(b0, nb), (dw, dx)) in plan.iter().zip(parts) {
        if let (Some(t), Some(p)) = (dw_total.as_mut(), dw) {
            t.data.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
        }
        if let (Some(t), Some(p)) = (dx_total.as_mut(), dx) {
            put_batch_slice(t, b0, nb, &p);
        }
    }
    ConvGrads {
        dx: dx_total,
        dw: dw_total,
        db: need_b.then(|| bias_grad(dout)),
    }
}

/// Transposed convolution. `w` is `[Ci, Co, kh, kw]`; `g` describes how
/// input positions (`g.rows × g.cols`, the input size) land on the
/// `out_h × out_w` output after cropping `g.off_top`/`g.off_left`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Geom,
    out_h: usize,
    out_w: usize,
) -> Tensor<T> {
    let [ci, bs, h, wd] = x.shape;
    assert_eq!((h, wd), (g.rows, g.cols), "transposed conv geometry");
    assert_eq!(w.shape[0], ci, "transposed conv input channels");
    let co = w.shape[1];
    let k = co * g.kh * g.kw;
    let plan = chunks(bs, g.chunk());
    let parts = par::map_slice(&plan, |&(b0, nb)| {
        let n = nb * h * wd;
        let xc = batch_slice(x, b0, nb);
        let mut cols = vec![T::zero(); k * n];
        matmul(k, ci, n, &w.data, Trans::T, &xc, Trans::N, T::zero(), &mut cols);
        scatter_add(&cols, co, nb, out_h, out_w, g)
    });
    let mut out = Tensor::zeros([co, bs, out_h, out_w]);
    for (&(b0, nb), p) in plan.iter().zip(&parts) {
        put_batch_slice(&mut out, b0, nb, p);
    }
    add_bias(&mut out, bias);
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    g: &Geom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let [ci, bs, h, wd] = x.shape;
    let co = w.shape[1];
    let k = co * g.kh * g.kw;
    let plan = chunks(bs, g.chunk());
    let (need_x, need_w, need_b) = need;
    let parts = par::map_slice(&plan, |&(b0, nb)| {
        let n = nb * h * wd;
        let dcols = gather(dout, b0, nb, g);
        let dx = need_x.then(|| {
            let mut dx = vec![T::zero(); ci * n];
            matmul(ci, k, n, &w.data, Trans::N, &dcols, Trans::N, T::zero(), &mut dx);
            dx
        });
        let dw = need_w.then(|| {
            let xc = batch_slice(x, b0, nb);
            let mut dw = vec![T::zero(); ci * k];
            matmul(ci, n, k, &xc, Trans::N, &dcols, Trans::T, T::zero(), &mut dw);
            dw
        });
        (dw, dx)
    });
    let mut dw_total = need_w.then(|| Tensor::zeros(w.shape));
    let mut dx_total = need_x.then(|| Tensor::zeros(x.shape));
    for (&(b0, nb), (dw, dx)) in plan.iter().zip(parts) {
        if let (Some(t), Some(p)) = (dw_total.as_mut(), dw) {
            t.data.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
        }
        if let (Some(t), Some(p)) = (dx_total.as_mut(), dx) {
            put_batch_slice(t, b0, nb, &p);
        }
    }
    ConvGrads {
        dx: dx_total,
        dw: dw_total,
        db: need_b.then(|| bias_grad(dout)),
    }
}
