//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] walks the tape once in reverse and returns gradients
//! for every node that requires them. Nodes built only from constants never
//! receive gradients, which is how frozen networks are expressed.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    AtanhScaled(Var, T),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    GridDecode { raw: Var, sig: Vec<T> },
    /// Scalar reduction with precomputed local gradients per input.
    Reduce(Vec<(Var, Tensor<T>)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a node's current value into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// `atanh(c * x)` for `0 < c < 1`; finite for inputs in `[-1, 1]`.
    pub fn atanh_scaled(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| (c * x).atanh());
        let rg = self.rg(a);
        self.push(out, Op::AtanhScaled(a, c), rg)
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let m = h * w;
        let mut out = Tensor::zeros(v.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        let mf = T::lit(m as f64);
        for (plane, dst) in v.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
            let mean = plane.iter().copied().sum::<T>() / mf;
            let var = plane.iter().map(|&p| (p - mean) * (p - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            for (d, &p) in dst.iter_mut().zip(plane) {
                *d = (p - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let out = avg_pool_forward(self.value(x), k);
        let rg = self.rg(x);
        self.push(out, Op::AvgPool(x, k), rg)
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample(&mut self, x: Var, k: usize) -> Var {
        let out = upsample_forward(self.value(x), k);
        let rg = self.rg(x);
        self.push(out, Op::Upsample(x, k), rg)
    }

    /// Maps a raw `[N, 5, S, S]` head to normalized `(objectness, cx, cy, w, h)`.
    ///
    /// Every channel passes through a sigmoid; the center channels are then
    /// offset by the cell's column/row and divided by `S`.
    pub fn grid_decode(&mut self, raw: Var) -> Var {
        let v = self.value(raw);
        let (n, c, s, s2) = v.dims4();
        assert_eq!(c, 5, "grid head must have 5 channels");
        assert_eq!(s, s2, "grid head must be square");
        let sig: Vec<T> = v.data().iter().map(|&x| sigmoid(x)).collect();
        let mut out = Tensor::from_vec(v.shape(), sig.clone());
        let inv = T::one() / T::lit(s as f64);
        let plane = s * s;
        for b in 0..n {
            for row in 0..s {
                for col in 0..s {
                    let cell = row * s + col;
                    let ix = (b * 5 + 1) * plane + cell;
                    let iy = (b * 5 + 2) * plane + cell;
                    let d = out.data_mut();
                    d[ix] = (T::lit(col as f64) + d[ix]) * inv;
                    d[iy] = (T::lit(row as f64) + d[iy]) * inv;
                }
            }
        }
        let rg = self.rg(raw);
        self.push(out, Op::GridDecode { raw, sig }, rg)
    }

    /// Scalar node with caller-supplied value and local gradients.
    ///
    /// Gradients are only kept for inputs that require them.
    pub fn reduce(&mut self, value: T, parts: Vec<(Var, Tensor<T>)>) -> Var {
        let parts: Vec<_> = parts.into_iter().filter(|(v, _)| self.rg(*v)).collect();
        for (v, g) in &parts {
            assert_eq!(self.value(*v).shape(), g.shape(), "local gradient shape mismatch");
        }
        let rg = !parts.is_empty();
        self.push(Tensor::scalar(value), Op::Reduce(parts), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::lit(v.len() as f64);
        let value = v.data().iter().copied().sum::<T>() / n;
        let grad = Tensor::full(v.shape(), T::one() / n);
        self.reduce(value, vec![(a, grad)])
    }

    /// `scale * sum |a - b|`.
    pub fn abs_diff_sum(&mut self, a: Var, b: Var, scale: T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "abs_diff_sum shape mismatch");
        let mut total = T::zero();
        let mut ga = Vec::with_capacity(va.len());
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            total += d.abs();
            ga.push(signum0(d) * scale);
        }
        let ga = Tensor::from_vec(va.shape(), ga);
        let gb = ga.map(|g| -g);
        self.reduce(total * scale, vec![(a, ga), (b, gb)])
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let n = self.value(a).len();
        self.abs_diff_sum(a, b, T::one() / T::lit(n as f64))
    }

    /// Mean squared difference from a constant target.
    pub fn mse_const(&mut self, a: Var, target: T) -> Var {
        let va = self.value(a);
        let n = T::lit(va.len() as f64);
        let mut total = T::zero();
        let mut g = Vec::with_capacity(va.len());
        for &x in va.data() {
            let d = x - target;
            total += d * d;
            g.push(T::lit(2.0) * d / n);
        }
        let g = Tensor::from_vec(va.shape(), g);
        self.reduce(total / n, vec![(a, g)])
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = zip(gy, self.value(*b), |g, y| g * y);
                    acc(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = zip(gy, self.value(*a), |g, x| g * x);
                    acc(grads, *b, g);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, gy.map(|g| g * c));
            }
            Op::AddScalar(a) => acc(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let g = zip(gy, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                acc(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let g = zip(gy, self.value(*a), |g, x| if x > T::zero() { g } else { g * s });
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = zip(gy, &node.value, |g, y| g * y * (T::one() - y));
                acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = zip(gy, &node.value, |g, y| g * (T::one() - y * y));
                acc(grads, *a, g);
            }
            Op::AtanhScaled(a, c) => {
                let c = *c;
                let g = zip(gy, self.value(*a), |g, x| g * c / (T::one() - c * c * x * x));
                acc(grads, *a, g);
            }
            Op::InstanceNorm { x, inv_std } => {
                let xhat = &node.value;
                let (_, _, h, w) = xhat.dims4();
                let m = h * w;
                let mf = T::lit(m as f64);
                let mut dx = Tensor::zeros(xhat.shape());
                for (((dxp, gp), xp), &r) in dx
                    .data_mut()
                    .chunks_mut(m)
                    .zip(gy.data().chunks(m))
                    .zip(xhat.data().chunks(m))
                    .zip(inv_std)
                {
                    let sum_g = gp.iter().copied().sum::<T>();
                    let sum_gx = gp.iter().zip(xp).map(|(&g, &x)| g * x).sum::<T>();
                    for ((d, &g), &xh) in dxp.iter_mut().zip(gp).zip(xp) {
                        *d = r / mf * (mf * g - sum_g - xh * sum_gx);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::AvgPool(x, k) => {
                let dx = avg_pool_backward(self.value(*x).shape(), gy, *k);
                acc(grads, *x, dx);
            }
            Op::Upsample(x, k) => {
                let dx = upsample_backward(self.value(*x).shape(), gy, *k);
                acc(grads, *x, dx);
            }
            Op::GridDecode { raw, sig } => {
                let (_, _, s, _) = gy.dims4();
                let plane = s * s;
                let inv = T::one() / T::lit(s as f64);
                let data = gy
                    .data()
                    .iter()
                    .zip(sig)
                    .enumerate()
                    .map(|(i, (&g, &p))| {
                        let ch = (i / plane) % 5;
                        let d = g * p * (T::one() - p);
                        if ch == 1 || ch == 2 {
                            d * inv
                        } else {
                            d
                        }
                    })
                    .collect();
                acc(grads, *raw, Tensor::from_vec(gy.shape(), data));
            }
            Op::Reduce(parts) => {
                let up = gy.item();
                for (v, local) in parts {
                    acc(grads, *v, local.map(|g| g * up));
                }
            }
        }
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn signum0<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` lies in `[0, w)`.
fn valid_cols(kj: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(kj, stride, pad, w, wo);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * stride + kj - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(kj, stride, pad, w, wo);
                    let start = lo * stride + kj - pad;
                    for (d, s) in dst[start..].iter_mut().step_by(stride).zip(&src[lo..hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Direct 2-D convolution (cross-correlation) of `[N, C, H, W]` by `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (o, c2, kh, kw) = w.dims4();
    assert_eq!(c, c2, "conv2d channel mismatch: input {c}, weight {c2}");
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad));
    let ck = c * kh * kw;
    let hw = ho * wo;
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ck * hw] };
    let in_per = c * h * wd;
    for i in 0..n {
        let xi = &x.data()[i * in_per..(i + 1) * in_per];
        let dst = &mut out.data_mut()[i * o * hw..(i + 1) * o * hw];
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let cols_ref: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, (c, h, wd), (kh, kw), stride, pad, (ho, wo), &mut cols);
            &cols
        };
        gemm(MatRef::new(w.data(), o, ck), MatRef::new(cols_ref, ck, hw), beta, dst);
    }
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (o, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = gy.dims4();
    let ck = c * kh * kw;
    let hw = ho * wo;
    let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[o]));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ck * hw] };
    let in_per = c * h * wd;
    for i in 0..n {
        let gyi = &gy.data()[i * o * hw..(i + 1) * o * hw];
        if let Some(db) = db.as_mut() {
            for (d, chunk) in db.data_mut().iter_mut().zip(gyi.chunks(hw)) {
                *d += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let cols_ref: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, (c, h, wd), (kh, kw), stride, pad, (ho, wo), &mut cols);
                &cols
            };
            gemm(MatRef::new(gyi, o, hw), MatRef::new(cols_ref, ck, hw).t(), T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_per..(i + 1) * in_per];
            if pointwise {
                gemm(MatRef::new(w.data(), o, ck).t(), MatRef::new(gyi, o, hw), T::zero(), dxi);
            } else {
                gemm(MatRef::new(w.data(), o, ck).t(), MatRef::new(gyi, o, hw), T::zero(), &mut cols);
                col2im(&cols, (c, h, wd), (kh, kw), stride, pad, (ho, wo), dxi);
            }
        }
    }
    (dx, dw, db)
}

fn avg_pool_forward<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let norm = T::one() / T::lit((k * k) as f64);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / k) * wo..(y / k + 1) * wo];
            for (xx, &v) in row.iter().enumerate() {
                drow[xx / k] += v * norm;
            }
        }
    }
    out
}

fn avg_pool_backward<T: Real>(shape: &[usize], gy: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    let (_, _, h, w) = dx.dims4();
    let wo = w / k;
    let ho = h / k;
    let norm = T::one() / T::lit((k * k) as f64);
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(ho * wo)) {
        for y in 0..h {
            let srow = &src[(y / k) * wo..(y / k + 1) * wo];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = srow[xx / k] * norm;
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for each output coordinate of a `k`-fold upsample.
fn upsample_taps<T: Real>(size: usize, k: usize) -> Vec<(usize, usize, T)> {
    (0..size * k)
        .map(|o| {
            let src = ((o as f64 + 0.5) / k as f64 - 0.5).max(0.0);
            let i0 = (src as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

fn upsample_forward<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * k, w * k);
    let ty = upsample_taps::<T>(h, k);
    let tx = upsample_taps::<T>(w, k);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * wo..(oy + 1) * wo];
            for (d, &(x0, x1, fx)) in drow.iter_mut().zip(&tx) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *d = top + (bot - top) * fy;
            }
        }
    }
    out
}

fn upsample_backward<T: Real>(shape: &[usize], gy: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    let (_, _, h, w) = dx.dims4();
    let (ho, wo) = (h * k, w * k);
    let ty = upsample_taps::<T>(h, k);
    let tx = upsample_taps::<T>(w, k);
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(gy.data().chunks(ho * wo)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let grow = &src[oy * wo..(oy + 1) * wo];
            for (&g, &(x0, x1, fx)) in grow.iter().zip(&tx) {
                let one = T::one();
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` w.r.t. every element of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "analytic {x} vs numeric {y}");
        }
    }

    /// Builds `sum(op(x) * probe)` so every output element has a distinct weight.
    fn check_unary(shape: &[usize], op: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(shape, &mut rng);
        let probe_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = op(&mut g, xv);
            g.value(y).shape().to_vec()
        };
        let probe = random(&probe_shape, &mut rng);
        let eval = |xt: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(xt.clone());
            let y = op(&mut g, xv);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = op(&mut g, xv);
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p);
        let loss = g.mean(prod);
        let n = probe.len() as f64;
        let grads = g.backward(loss);
        let analytic = grads.get(xv).unwrap().map(|v| v * n);
        assert_close(&analytic, &numeric_grad(&x, &eval), 1e-5);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d_forward(&x, &w, Some(&b), 2, 1);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = b.data()[o];
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    s += x.data()[((n * 3 + c) * 5 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((o * 3 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = y.data()[((n * 4 + o) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let wc = w.clone();
        check_unary(&[2, 2, 6, 5], &move |g, x| {
            let wv = g.constant(wc.clone());
            g.conv2d(x, wv, None, 2, 1)
        });
        let x = random(&[1, 2, 6, 6], &mut rng);
        check_unary(&[3, 2, 3, 3], &move |g, wv| {
            let xv = g.constant(x.clone());
            g.conv2d(xv, wv, None, 1, 1)
        });
        let w1 = random(&[4, 3, 1, 1], &mut rng);
        check_unary(&[2, 3, 4, 4], &move |g, x| {
            let wv = g.constant(w1.clone());
            g.conv2d(x, wv, None, 1, 0)
        });
    }

    #[test]
    fn elementwise_and_resampling_gradients() {
        check_unary(&[1, 2, 4, 4], &|g, x| g.sigmoid(x));
        check_unary(&[1, 2, 4, 4], &|g, x| g.tanh(x));
        check_unary(&[1, 2, 4, 4], &|g, x| g.leaky_relu(x, 0.2));
        check_unary(&[1, 2, 4, 4], &|g, x| g.atanh_scaled(x, 0.9));
        check_unary(&[2, 3, 4, 5], &|g, x| g.instance_norm(x, 1e-5));
        check_unary(&[1, 2, 4, 6], &|g, x| g.avg_pool(x, 2));
        check_unary(&[1, 2, 3, 4], &|g, x| g.upsample(x, 4));
        check_unary(&[2, 5, 3, 3], &|g, x| g.grid_decode(x));
        check_unary(&[1, 1, 3, 3], &|g, x| {
            let y = g.scale(x, 3.0);
            let z = g.add_scalar(y, 0.5);
            g.mul(z, x)
        });
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.param(Tensor::full(&[1, 1, 2, 2], 2.0));
        let c = g.mul(a, b);
        let loss = g.mean(c);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 0.7));
        let y = g.upsample(x, 4);
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
