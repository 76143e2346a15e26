//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its output value. [`Graph::backward`]
//! walks the tape in reverse and returns a gradient for every node that
//! depends on a leaf created with `requires_grad`.

use crate::conv::{self, Geom};
use crate::losses;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Geom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Geom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    /// `x + h` with `h: [C, B, 1, 1]` broadcast over space.
    AddBcast(Var, Var),
    Scale(Var, T),
    ConstMul(Var, Tensor<T>),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    ConcatElu(Var),
    Clamp(Var, T, T),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Shift(Var, usize, usize),
    Dropout(Var, Vec<T>),
    MaxPool2(Var, Vec<u32>),
    Flatten(Var),
    Unflatten(Var),
    Sum(Var),
    /// Per-sample loss with its gradient precomputed at forward time.
    Fused(Var, Tensor<T>),
    Kl(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[inline]
fn elu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.fexpm1()
    }
}

#[inline]
fn elu_grad<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        v.fexp()
    }
}

#[inline]
fn sigm<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).fexp())
    } else {
        let e = v.fexp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, g: Geom) -> Var {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &g);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, g }, ng)
    }

    pub fn conv_t(&mut self, x: Var, w: Var, b: Option<Var>, g: Geom, out_h: usize, out_w: usize) -> Var {
        let out = conv::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &g,
            out_h,
            out_w,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::ConvT { x, w, b, g }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bcast(&mut self, x: Var, h: Var) -> Var {
        let vx = self.value(x);
        let vh = self.value(h);
        let [c, b, hh, ww] = vx.shape;
        assert_eq!(vh.shape, [c, b, 1, 1], "broadcast operand shape");
        let hw = hh * ww;
        let mut out = vx.clone();
        for (i, chunk) in out.data.chunks_mut(hw).enumerate() {
            let v = vh.data[i];
            chunk.iter_mut().for_each(|e| *e = *e + v);
        }
        let ng = self.ng(x) || self.ng(h);
        self.push(out, Op::AddBcast(x, h), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::f(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn const_mul(&mut self, x: Var, c: Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape, c.shape, "const_mul shape");
        let data = vx.data.iter().zip(&c.data).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(vx.shape, data);
        let ng = self.ng(x);
        self.push(out, Op::ConstMul(x, c), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ftanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigm, Op::Sigmoid(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::f(lo), T::f(hi));
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// `elu([x, −x])` along channels.
    pub fn concat_elu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [c, b, h, w] = vx.shape;
        let mut data = Vec::with_capacity(2 * vx.len());
        data.extend(vx.data.iter().map(|&v| elu(v)));
        data.extend(vx.data.iter().map(|&v| elu(-v)));
        let out = Tensor::from_vec([2 * c, b, h, w], data);
        let ng = self.ng(x);
        self.push(out, Op::ConcatElu(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let [_, b, h, w] = self.shape(xs[0]);
        let mut c = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(&v.shape[1..], &[b, h, w], "concat shape");
            c += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::from_vec([c, b, h, w], data), Op::Concat(xs.to_vec()), ng)
    }

    /// Channels `start..start+len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let [c, b, h, w] = v.shape;
        assert!(start + len <= c, "channel slice out of range");
        let p = v.plane();
        let out = Tensor::from_vec([len, b, h, w], v.data[start * p..(start + len) * p].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::Slice(x, start), ng)
    }

    /// Moves content `down` rows and `right` columns, filling with zeros.
    pub fn shift(&mut self, x: Var, down: usize, right: usize) -> Var {
        let v = self.value(x);
        let [c, b, h, w] = v.shape;
        let mut out = Tensor::zeros(v.shape);
        for cb in 0..c * b {
            for y in down..h {
                let s = (cb * h + y - down) * w;
                let d = (cb * h + y) * w;
                out.data[d + right..d + w].copy_from_slice(&v.data[s..s + w - right]);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Shift(x, down, right), ng)
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1−p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), mask.len(), "dropout mask size");
        let data = v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(v.shape, data);
        let ng = self.ng(x);
        self.push(out, Op::Dropout(x, mask), ng)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [c, b, h, w] = v.shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([c, b, oh, ow]);
        let mut arg = vec![0u32; c * b * oh * ow];
        for cb in 0..c * b {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (cb * h + 2 * y + dy) * w + 2 * xx + dx;
                        if v.data[i] > best {
                            best = v.data[i];
                            bi = i;
                        }
                    }
                    let o = (cb * oh + y) * ow + xx;
                    out.data[o] = best;
                    arg[o] = bi as u32;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2(x, arg), ng)
    }

    /// `[C, B, H, W] → [C·H·W, B, 1, 1]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [c, b, h, w] = v.shape;
        let hw = h * w;
        let mut out = Tensor::zeros([c * hw, b, 1, 1]);
        for ch in 0..c {
            for bi in 0..b {
                for p in 0..hw {
                    out.data[(ch * hw + p) * b + bi] = v.data[(ch * b + bi) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Flatten(x), ng)
    }

    /// Inverse of [`Graph::flatten`].
    pub fn unflatten(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [f, b, _, _] = v.shape;
        let hw = h * w;
        assert_eq!(f, c * hw, "unflatten size");
        let mut out = Tensor::zeros([c, b, h, w]);
        for ch in 0..c {
            for bi in 0..b {
                for p in 0..hw {
                    out.data[(ch * b + bi) * hw + p] = v.data[(ch * hw + p) * b + bi];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Unflatten(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Per-sample discretized-logistic-mixture NLL, `[1, B, 1, 1]`.
    ///
    /// `params` holds `3K` channels (logits, means, log-scales) or, for a
    /// single component, 2 channels (means, log-scales). `targets` is
    /// `[B, H, W]` bytes.
    pub fn dlm_nll(&mut self, params: Var, k: usize, targets: &[u8]) -> Var {
        let v = self.value(params);
        let [c, b, h, w] = v.shape;
        let with_logits = c == 3 * k;
        assert!(with_logits || (k == 1 && c == 2), "mixture channel layout");
        assert_eq!(targets.len(), b * h * w, "target count");
        let plane = b * h * w;
        let hw = h * w;
        let off = if with_logits { k } else { 0 };
        let per_sample: Vec<(f64, Vec<(usize, f64)>)> = crate::par::map_range(b, |bi| {
            let mut lg = vec![0.0; k];
            let mut mu = vec![0.0; k];
            let mut ls = vec![0.0; k];
            let (mut dl, mut dm, mut ds) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(hw * c);
            for p in 0..hw {
                let pos = bi * hw + p;
                for j in 0..k {
                    if with_logits {
                        lg[j] = v.data[j * plane + pos].to_f();
                    }
                    mu[j] = v.data[(off + j) * plane + pos].to_f();
                    ls[j] = v.data[(off + k + j) * plane + pos].to_f();
                }
                let logits: &[f64] = if with_logits { &lg } else { &[] };
                total += losses::mixture_pixel_nll(logits, &mu, &ls, targets[pos], &mut dl, &mut dm, &mut ds);
                for j in 0..k {
                    if with_logits {
                        grads.push((j * plane + pos, dl[j]));
                    }
                    grads.push(((off + j) * plane + pos, dm[j]));
                    grads.push(((off + k + j) * plane + pos, ds[j]));
                }
            }
            (total, grads)
        });
        let mut gtensor = Tensor::zeros(v.shape);
        let mut out = Tensor::zeros([1, b, 1, 1]);
        for (bi, (total, grads)) in per_sample.into_iter().enumerate() {
            out.data[bi] = T::f(total);
            for (i, g) in grads {
                gtensor.data[i] = T::f(g);
            }
        }
        let ng = self.ng(params);
        self.push(out, Op::Fused(params, gtensor), ng)
    }

    /// Per-sample `KL(N(μ, e^{logvar}) ‖ N(0, I))`, `[1, B, 1, 1]`.
    pub fn kl_gauss(&mut self, mu: Var, logvar: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        let [f, b, _, _] = m.shape;
        assert_eq!(lv.shape, m.shape, "posterior shapes");
        let mut out = Tensor::zeros([1, b, 1, 1]);
        for bi in 0..b {
            let mut acc = 0.0;
            for d in 0..f {
                let (mv, l) = (m.data[d * b + bi].to_f(), lv.data[d * b + bi].to_f());
                acc += 0.5 * (mv * mv + l.exp() - 1.0 - l);
            }
            out.data[bi] = T::f(acc);
        }
        let ng = self.ng(mu) || self.ng(logvar);
        self.push(out, Op::Kl(mu, logvar), ng)
    }

    /// Per-sample softmax cross-entropy of `logits: [C, B, 1, 1]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[u8]) -> Var {
        let v = self.value(logits);
        let [c, b, _, _] = v.shape;
        assert_eq!(labels.len(), b, "label count");
        let mut out = Tensor::zeros([1, b, 1, 1]);
        let mut g = Tensor::zeros(v.shape);
        for bi in 0..b {
            let col: Vec<f64> = (0..c).map(|k| v.data[k * b + bi].to_f()).collect();
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + col.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            let y = labels[bi] as usize;
            out.data[bi] = T::f(lse - col[y]);
            for k in 0..c {
                let p = (col[k] - lse).exp();
                g.data[k * b + bi] = T::f(p - if k == y { 1.0 } else { 0.0 });
            }
        }
        let ng = self.ng(logits);
        self.push(out, Op::Fused(logits, g), ng)
    }

    /// Gradients of the scalar (or summed) node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape, T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, gy: &Tensor<T>, f: impl Fn(usize, T) -> T) {
        if !self.ng(v) {
            return;
        }
        let data = gy.data.iter().enumerate().map(|(i, &g)| f(i, g)).collect();
        self.acc(grads, v, Tensor::from_vec(gy.shape, data));
    }

    fn backprop(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, g } => {
                let need = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let r = conv::conv2d_backward(self.value(*x), self.value(*w), gy, g, need);
                if let Some(d) = r.dx {
                    self.acc(grads, *x, d);
                }
                if let Some(d) = r.dw {
                    self.acc(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    self.acc(grads, *b, d);
                }
            }
            Op::ConvT { x, w, b, g } => {
                let need = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let r = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), gy, g, need);
                if let Some(d) = r.dx {
                    self.acc(grads, *x, d);
                }
                if let Some(d) = r.dw {
                    self.acc(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    self.acc(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, gy, |_, g| g);
                self.acc_with(grads, *b, gy, |_, g| g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, gy, |i, g| g * vb.data[i]);
                self.acc_with(grads, *b, gy, |i, g| g * va.data[i]);
            }
            Op::AddBcast(x, h) => {
                self.acc_with(grads, *x, gy, |_, g| g);
                if self.ng(*h) {
                    let hw = gy.spatial();
                    let data = gy.data.chunks(hw).map(|c| c.iter().copied().sum()).collect();
                    self.acc(grads, *h, Tensor::from_vec(self.shape(*h), data));
                }
            }
            Op::Scale(x, s) => self.acc_with(grads, *x, gy, |_, g| g * *s),
            Op::ConstMul(x, c) => self.acc_with(grads, *x, gy, |i, g| g * c.data[i]),
            Op::Tanh(x) => self.acc_with(grads, *x, gy, |i, g| g * (T::one() - y.data[i] * y.data[i])),
            Op::Sigmoid(x) => self.acc_with(grads, *x, gy, |i, g| g * y.data[i] * (T::one() - y.data[i])),
            Op::Elu(x) => {
                let vx = self.value(*x);
                self.acc_with(grads, *x, gy, |i, g| g * elu_grad(vx.data[i]))
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.acc_with(grads, *x, gy, |i, g| if vx.data[i] > T::zero() { g } else { T::zero() })
            }
            Op::Exp(x) => self.acc_with(grads, *x, gy, |i, g| g * y.data[i]),
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                self.acc_with(grads, *x, gy, |i, g| {
                    let v = vx.data[i];
                    if v >= *lo && v <= *hi {
                        g
                    } else {
                        T::zero()
                    }
                })
            }
            Op::ConcatElu(x) => {
                if self.ng(*x) {
                    let vx = self.value(*x);
                    let n = vx.len();
                    let data = (0..n)
                        .map(|k| {
                            let v = vx.data[k];
                            gy.data[k] * elu_grad(v) - gy.data[n + k] * elu_grad(-v)
                        })
                        .collect();
                    self.acc(grads, *x, Tensor::from_vec(vx.shape, data));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let s = self.shape(x);
                    let n: usize = s.iter().product();
                    if self.ng(x) {
                        self.acc(grads, x, Tensor::from_vec(s, gy.data[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Slice(x, start) => {
                if self.ng(*x) {
                    let s = self.shape(*x);
                    let mut g = Tensor::zeros(s);
                    let p = s[1] * s[2] * s[3];
                    g.data[start * p..start * p + gy.len()].copy_from_slice(&gy.data);
                    self.acc(grads, *x, g);
                }
            }
            Op::Shift(x, down, right) => {
                if self.ng(*x) {
                    let [c, b, h, w] = gy.shape;
                    let mut g = Tensor::zeros(gy.shape);
                    for cb in 0..c * b {
                        for yy in *down..h {
                            let d = (cb * h + yy - down) * w;
                            let s = (cb * h + yy) * w;
                            g.data[d..d + w - right].copy_from_slice(&gy.data[s + right..s + w]);
                        }
                    }
                    self.acc(grads, *x, g);
                }
            }
            Op::Dropout(x, mask) => self.acc_with(grads, *x, gy, |i, g| g * mask[i]),
            Op::MaxPool2(x, arg) => {
                if self.ng(*x) {
                    let mut g = Tensor::zeros(self.shape(*x));
                    for (o, &a) in arg.iter().enumerate() {
                        let d = &mut g.data[a as usize];
                        *d = *d + gy.data[o];
                    }
                    self.acc(grads, *x, g);
                }
            }
            Op::Flatten(x) => {
                if self.ng(*x) {
                    let [c, b, h, w] = self.shape(*x);
                    let hw = h * w;
                    let mut g = Tensor::zeros([c, b, h, w]);
                    for ch in 0..c {
                        for bi in 0..b {
                            for p in 0..hw {
                                g.data[(ch * b + bi) * hw + p] = gy.data[(ch * hw + p) * b + bi];
                            }
                        }
                    }
                    self.acc(grads, *x, g);
                }
            }
            Op::Unflatten(x) => {
                if self.ng(*x) {
                    let [c, b, h, w] = gy.shape;
                    let hw = h * w;
                    let mut g = Tensor::zeros(self.shape(*x));
                    for ch in 0..c {
                        for bi in 0..b {
                            for p in 0..hw {
                                g.data[(ch * hw + p) * b + bi] = gy.data[(ch * b + bi) * hw + p];
                            }
                        }
                    }
                    self.acc(grads, *x, g);
                }
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.acc(grads, *x, Tensor::full(s, gy.data[0]));
            }
            Op::Fused(x, saved) => {
                if self.ng(*x) {
                    let [_, b, h, w] = saved.shape;
                    let hw = h * w;
                    let data = saved
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &s)| s * gy.data[(i / hw) % b])
                        .collect();
                    self.acc(grads, *x, Tensor::from_vec(saved.shape, data));
                }
            }
            Op::Kl(mu, lv) => {
                let b = gy.shape[1];
                let vm = self.value(*mu);
                let vl = self.value(*lv);
                let half = T::f(0.5);
                self.acc_with_shape(grads, *mu, vm.shape, |i| gy.data[i % b] * vm.data[i]);
                self.acc_with_shape(grads, *lv, vl.shape, |i| {
                    gy.data[i % b] * half * (vl.data[i].exp() - T::one())
                });
            }
        }
    }

    fn acc_with_shape(&self, grads: &mut [Option<Tensor<T>>], v: Var, shape: [usize; 4], f: impl Fn(usize) -> T) {
        if !self.ng(v) {
            return;
        }
        let n = shape.iter().product();
        self.acc(grads, v, Tensor::from_vec(shape, (0..n).map(f).collect()));
    }
}
