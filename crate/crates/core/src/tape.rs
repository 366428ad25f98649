//! Reverse-mode automatic differentiation over an explicit recorded tape.
//!
//! Every primitive application is pushed onto the tape in forward order;
//! `backward` replays the records in reverse, accumulating cotangents into
//! every node that (transitively) requires a gradient. A tape is confined to
//! one forward/backward pass on one thread; tensors themselves stay plain
//! values.
//!
//! The only broadcast form is a per-channel column: a second operand of
//! shape (n,c,1,1) — or (1,c,1,1) for batch-shared parameters — combined
//! with an (n,c,h,w) first operand. Its adjoint is the matching spatial
//! (and, for shared parameters, batch) sum.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add { a: ValId, b: ValId },
    Sub { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Div { a: ValId, b: ValId },
    Scale { a: ValId, c: T },
    Abs { a: ValId },
    Relu { a: ValId },
    Sigmoid { a: ValId },
    Tanh { a: ValId },
    Rsqrt { a: ValId },
    Clamp01 { a: ValId },
    MeanSpatial { a: ValId },
    BroadcastSpatial { a: ValId },
    MeanAll { a: ValId },
    Conv2d { x: ValId, w: ValId, b: ValId, stride: usize },
    AvgPool { a: ValId, k: usize },
    Upsample2 { a: ValId },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// How a binary op's second operand lines up with its first.
#[derive(Clone, Copy, PartialEq)]
enum Pairing {
    Same,
    /// b is (n,c,1,1) or (1,c,1,1) against a (n,c,h,w) first operand.
    Column,
}

fn pairing(a: Shape, b: Shape, ctx: &'static str) -> Result<Pairing> {
    if a == b {
        return Ok(Pairing::Same);
    }
    if b.h == 1 && b.w == 1 && b.c == a.c && (b.n == a.n || b.n == 1) {
        return Ok(Pairing::Column);
    }
    Err(Error::ShapeMismatch { ctx, lhs: a, rhs: b })
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    /// Record a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> ValId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> ValId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: ValId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a (1,1,1,1) node.
    pub fn scalar_value(&self, id: ValId) -> T {
        let t = self.value(id);
        debug_assert_eq!(t.numel(), 1);
        t.data()[0]
    }

    pub fn grad(&self, id: ValId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn grad_tensor(&self, id: ValId) -> Option<Tensor<T>> {
        let shape = self.nodes[id.0].value.shape();
        self.nodes[id.0]
            .grad
            .as_ref()
            .map(|g| Tensor::from_vec(shape, g.clone()).expect("grad shape"))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> ValId {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        ValId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise binary ops ───────────────────────────────────────

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise division, same shapes only.
    pub fn div(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (asn, bsn) = (self.value(a).shape(), self.value(b).shape());
        if asn != bsn {
            return Err(Error::ShapeMismatch { ctx: "div", lhs: asn, rhs: bsn });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    fn binary(
        &mut self,
        a: ValId,
        b: ValId,
        ctx: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<ValId> {
        let asn = self.value(a).shape();
        let bsn = self.value(b).shape();
        let pair = pairing(asn, bsn, ctx)?;
        let out = match pair {
            Pairing::Same => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            Pairing::Column => {
                let (av, bv) = (self.value(a), self.value(b));
                apply_column(av, bv, &f)
            }
        };
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(asn, out)?;
        Ok(self.push(value, op, needs))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: ValId, c: T) -> ValId {
        let value = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    // ── Elementwise unary ops ────────────────────────────────────────

    pub fn abs(&mut self, a: ValId) -> ValId {
        let value = self.value(a).map(|x| x.abs());
        let needs = self.needs(a);
        self.push(value, Op::Abs { a }, needs)
    }

    pub fn relu(&mut self, a: ValId) -> ValId {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.needs(a);
        self.push(value, Op::Relu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: ValId) -> ValId {
        let value = self.value(a).map(stable_sigmoid);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid { a }, needs)
    }

    pub fn tanh_act(&mut self, a: ValId) -> ValId {
        let value = self.value(a).map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(value, Op::Tanh { a }, needs)
    }

    /// 1/sqrt(x); every element must be strictly positive.
    pub fn rsqrt(&mut self, a: ValId) -> Result<ValId> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x <= T::zero()) {
            return Err(Error::NonFinite { ctx: "rsqrt", index: i });
        }
        let value = self.value(a).map(|x| x.sqrt().recip());
        let needs = self.needs(a);
        Ok(self.push(value, Op::Rsqrt { a }, needs))
    }

    /// Clamp to [0,1]; the gradient passes through inside the range
    /// (inclusive) and is zero outside.
    pub fn clamp01(&mut self, a: ValId) -> ValId {
        let value = self.value(a).map(|x| x.max(T::zero()).min(T::one()));
        let needs = self.needs(a);
        self.push(value, Op::Clamp01 { a }, needs)
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    /// Per-(n,c) spatial mean: (n,c,h,w) -> (n,c,1,1).
    pub fn mean_spatial(&mut self, a: ValId) -> Result<ValId> {
        let s = self.value(a).shape();
        if s.plane() == 0 {
            return Err(Error::InvalidArg(format!("mean over empty spatial extent {s}")));
        }
        let inv = T::from_f64(1.0 / s.plane() as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); s.n * s.c];
        for (i, chunk) in src.chunks_exact(s.plane()).enumerate() {
            let mut sum = T::zero();
            for &v in chunk {
                sum = sum + v;
            }
            out[i] = sum * inv;
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)?;
        Ok(self.push(value, Op::MeanSpatial { a }, needs))
    }

    /// Repeat a (n,c,1,1) column over an (h,w) plane.
    pub fn broadcast_spatial(&mut self, a: ValId, h: usize, w: usize) -> Result<ValId> {
        let s = self.value(a).shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::InvalidArg(format!(
                "broadcast_spatial expects (n,c,1,1), got {s}"
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); s.n * s.c * h * w];
        for (i, &v) in src.iter().enumerate() {
            out[i * h * w..(i + 1) * h * w].iter_mut().for_each(|o| *o = v);
        }
        let needs = self.needs(a);
        let value = Tensor::from_vec(Shape::new(s.n, s.c, h, w), out)?;
        Ok(self.push(value, Op::BroadcastSpatial { a }, needs))
    }

    /// Mean over every element: (n,c,h,w) -> (1,1,1,1).
    pub fn mean_all(&mut self, a: ValId) -> ValId {
        let src = self.value(a).data();
        let inv = T::from_f64(1.0 / src.len() as f64);
        let mut sum = T::zero();
        for &v in src {
            sum = sum + v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(sum * inv), Op::MeanAll { a }, needs)
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Same-padded cross-correlation; `w` is (out,in,k,k), `b` is (1,out,1,1).
    pub fn conv2d(&mut self, x: ValId, w: ValId, b: ValId, stride: usize) -> Result<ValId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::InvalidArg(format!("conv kernel must be square and odd, got {ws}")));
        }
        if xs.c != ws.c {
            return Err(Error::ChannelMismatch { ctx: "conv2d", got: xs.c, expected: ws.c });
        }
        if bs.numel() != ws.n {
            return Err(Error::ShapeMismatch { ctx: "conv2d bias", lhs: ws, rhs: bs });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArg(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let (out, os) = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws,
            self.value(b).data(),
            stride,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_vec(os, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, needs))
    }

    /// Same-size box filter with valid-tap normalization; k odd.
    pub fn avg_pool(&mut self, a: ValId, k: usize) -> Result<ValId> {
        if k % 2 == 0 {
            return Err(Error::EvenKernel { k });
        }
        let s = self.value(a).shape();
        let out = kernels::avg_pool_forward(self.value(a).data(), s, k);
        let needs = self.needs(a);
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(value, Op::AvgPool { a, k }, needs))
    }

    /// Global average pooling broadcast back to the input size.
    pub fn global_avg_pool(&mut self, a: ValId) -> Result<ValId> {
        let s = self.value(a).shape();
        let m = self.mean_spatial(a)?;
        self.broadcast_spatial(m, s.h, s.w)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, a: ValId) -> ValId {
        let s = self.value(a).shape();
        let (out, os) = kernels::upsample_nearest2_forward(self.value(a).data(), s);
        let needs = self.needs(a);
        let value = Tensor::from_vec(os, out).expect("upsample shape");
        self.push(value, Op::Upsample2 { a }, needs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Consumes the tape's one backward
    /// budget; gradients stay queryable afterwards via `grad`.
    pub fn backward(&mut self, root: ValId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rs = self.nodes[root.0].value.shape();
        if rs != Shape::new(1, 1, 1, 1) {
            return Err(Error::NonScalarRoot { shape: rs });
        }
        self.consumed = true;
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            // Interior cotangents are consumed here; only leaves keep
            // their gradients queryable after the sweep.
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let g = if is_leaf {
                continue;
            } else {
                match self.nodes[i].grad.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValId, delta: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi = *gi + *di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.needs(b) {
                    let delta = reduce_to_column(g, self.nodes[out_idx].value.shape(), self.value(b).shape());
                    self.accumulate(b, delta);
                }
            }

            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.needs(b) {
                    let mut delta =
                        reduce_to_column(g, self.nodes[out_idx].value.shape(), self.value(b).shape());
                    delta.iter_mut().for_each(|v| *v = T::zero() - *v);
                    self.accumulate(b, delta);
                }
            }

            Op::Mul { a, b } => {
                let os = self.nodes[out_idx].value.shape();
                if self.needs(a) {
                    // g ⊙ b, broadcasting b if it is a column.
                    let delta = apply_column_data(g, os, self.value(b), &|x, y| x * y);
                    self.accumulate(a, delta);
                }
                if self.needs(b) {
                    let ga: Vec<T> =
                        g.iter().zip(self.value(a).data()).map(|(&gi, &ai)| gi * ai).collect();
                    let delta = reduce_to_column(&ga, os, self.value(b).shape());
                    self.accumulate(b, delta);
                }
            }

            Op::Div { a, b } => {
                if self.needs(a) {
                    let delta: Vec<T> =
                        g.iter().zip(self.value(b).data()).map(|(&gi, &bi)| gi / bi).collect();
                    self.accumulate(a, delta);
                }
                if self.needs(b) {
                    let (ad, bd) = (self.value(a).data(), self.value(b).data());
                    let delta: Vec<T> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&gi, (&ai, &bi))| T::zero() - gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(b, delta);
                }
            }

            Op::Scale { a, c } => {
                if self.needs(a) {
                    self.accumulate(a, g.iter().map(|&gi| gi * c).collect());
                }
            }

            Op::Abs { a } => {
                if self.needs(a) {
                    // Subgradient 0 at zero.
                    let delta: Vec<T> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gi, &xi)| {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                T::zero() - gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(a, delta);
                }
            }

            Op::Relu { a } => {
                if self.needs(a) {
                    let delta: Vec<T> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    self.accumulate(a, delta);
                }
            }

            Op::Sigmoid { a } => {
                if self.needs(a) {
                    let y = self.nodes[out_idx].value.data();
                    let delta: Vec<T> = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect();
                    self.accumulate(a, delta);
                }
            }

            Op::Tanh { a } => {
                if self.needs(a) {
                    let y = self.nodes[out_idx].value.data();
                    let delta: Vec<T> =
                        g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect();
                    self.accumulate(a, delta);
                }
            }

            Op::Rsqrt { a } => {
                if self.needs(a) {
                    let y = self.nodes[out_idx].value.data();
                    let half = T::from_f64(0.5);
                    let delta: Vec<T> = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| T::zero() - gi * half * yi * yi * yi)
                        .collect();
                    self.accumulate(a, delta);
                }
            }

            Op::Clamp01 { a } => {
                if self.needs(a) {
                    let delta: Vec<T> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gi, &xi)| {
                            if xi >= T::zero() && xi <= T::one() {
                                gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(a, delta);
                }
            }

            Op::MeanSpatial { a } => {
                if self.needs(a) {
                    let s = self.value(a).shape();
                    let inv = T::from_f64(1.0 / s.plane() as f64);
                    let mut delta = vec![T::zero(); s.numel()];
                    for (i, chunk) in delta.chunks_exact_mut(s.plane()).enumerate() {
                        let gv = g[i] * inv;
                        chunk.iter_mut().for_each(|d| *d = gv);
                    }
                    self.accumulate(a, delta);
                }
            }

            Op::BroadcastSpatial { a } => {
                if self.needs(a) {
                    let os = self.nodes[out_idx].value.shape();
                    let mut delta = vec![T::zero(); os.n * os.c];
                    for (i, chunk) in g.chunks_exact(os.plane()).enumerate() {
                        let mut sum = T::zero();
                        for &v in chunk {
                            sum = sum + v;
                        }
                        delta[i] = sum;
                    }
                    self.accumulate(a, delta);
                }
            }

            Op::MeanAll { a } => {
                if self.needs(a) {
                    let n = self.value(a).numel();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    self.accumulate(a, vec![gv; n]);
                }
            }

            Op::Conv2d { x, w, b, stride } => {
                let os = self.nodes[out_idx].value.shape();
                let xs = self.value(x).shape();
                let ws = self.value(w).shape();
                let need_x = self.needs(x);
                let need_wb = self.needs(w) || self.needs(b);
                if !need_x && !need_wb {
                    return;
                }
                let (gx, gw, gb) = kernels::conv2d_backward(
                    g,
                    os,
                    self.value(x).data(),
                    xs,
                    self.value(w).data(),
                    ws,
                    stride,
                    need_x,
                    need_wb,
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }

            Op::AvgPool { a, k } => {
                if self.needs(a) {
                    let s = self.value(a).shape();
                    let delta = kernels::avg_pool_backward(g, s, k);
                    self.accumulate(a, delta);
                }
            }

            Op::Upsample2 { a } => {
                if self.needs(a) {
                    let s = self.value(a).shape();
                    let delta = kernels::upsample_nearest2_backward(g, s);
                    self.accumulate(a, delta);
                }
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (T::zero() - x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Apply f(a[n,c,h,w], b[n|0,c,0,0]) over the full extent of `a`.
fn apply_column<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: &impl Fn(T, T) -> T) -> Vec<T> {
    apply_column_data(a.data(), a.shape(), b, f)
}

fn apply_column_data<T: Scalar>(
    a: &[T],
    s: Shape,
    b: &Tensor<T>,
    f: &impl Fn(T, T) -> T,
) -> Vec<T> {
    let bs = b.shape();
    if s == bs {
        return a.iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        let bn = if bs.n == 1 { 0 } else { n };
        for c in 0..s.c {
            let bv = b.data()[bn * bs.c + c];
            let base = s.idx(n, c, 0, 0);
            let src = &a[base..base + plane];
            let dst = &mut out[base..base + plane];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = f(x, bv);
            }
        }
    }
    out
}

/// Sum `g` (shaped like `full`) down to a column shape `col`, covering the
/// same-shape case as a no-op copy.
fn reduce_to_column<T: Scalar>(g: &[T], full: Shape, col: Shape) -> Vec<T> {
    if full == col {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); col.numel()];
    let plane = full.plane();
    for n in 0..full.n {
        let bn = if col.n == 1 { 0 } else { n };
        for c in 0..full.c {
            let base = full.idx(n, c, 0, 0);
            let mut sum = T::zero();
            for &v in &g[base..base + plane] {
                sum = sum + v;
            }
            out[bn * col.c + c] = out[bn * col.c + c] + sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_identity_and_mul_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let o = tape.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
        let m = tape.mul(x, o).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sub_self_cancels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.37));
        let b = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.37));
        let d = tape.sub(a, b).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 2)));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,2,3,3)") && msg.contains("(1,2,3,2)"), "{msg}");
    }

    #[test]
    fn mean_spatial_values_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).with_grad());
        let m = tape.mean_spatial(x).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn mean_spatial_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(1, 3, 4, 4);
        let x = t(s, (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let m = tape.mean_spatial(xid).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    sum += x.at(0, c, i, j);
                }
            }
            assert!((tape.value(m).at(0, c, 0, 0) - sum / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_backward() {
        // root = mean(x*x) at x=[[1,2],[3,4]] → grad = 2x/4.
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let root = tape.mean_all(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn broadcast_mul_adjoint_sum_rule() {
        // Brute force on a 2x2 plane: grad of the column operand equals the
        // spatial sum of cotangent ⊙ other operand.
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape::new(1, 2, 2, 2), (1..=8).map(f64::from).collect()).with_grad());
        let b = tape.leaf(t(Shape::new(1, 2, 1, 1), vec![2.0, -1.5]).with_grad());
        let prod = tape.mul(a, b).unwrap();
        let root = tape.mean_all(prod);
        tape.backward(root).unwrap();
        // d root / d b_c = sum over plane of a / 8
        let gb = tape.grad(b).unwrap();
        assert!((gb[0] - (1.0 + 2.0 + 3.0 + 4.0) / 8.0).abs() < 1e-12);
        assert!((gb[1] - (5.0 + 6.0 + 7.0 + 8.0) / 8.0).abs() < 1e-12);
        let ga = tape.grad(a).unwrap();
        assert_eq!(&ga[..4], &[0.25; 4]);
        assert_eq!(&ga[4..], &[-0.1875; 4]);
    }

    #[test]
    fn batch_shared_column_broadcast() {
        // (1,c,1,1) parameter against a batch of 2.
        let mut tape = Tape::new();
        let a = tape.leaf(t(Shape::new(2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let p = tape.leaf(t(Shape::new(1, 1, 1, 1), vec![3.0]).with_grad());
        let prod = tape.mul(a, p).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 6.0, 9.0, 12.0]);
        let root = tape.mean_all(prod);
        tape.backward(root).unwrap();
        assert!((tape.grad(p).unwrap()[0] - 10.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(Shape::new(1, 1, 2, 2)).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_rejects_consumed_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(Shape::new(1, 1, 1, 1)).with_grad());
        let root = tape.mean_all(x);
        tape.backward(root).unwrap();
        assert!(matches!(tape.backward(root), Err(Error::TapeConsumed)));
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 3), vec![0.0, -3.2, 3.2]));
        let s = tape.sigmoid(x);
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-15);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.2]);
        let th = tape.tanh_act(x);
        assert!(tape.value(th).data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(2, 3, 6, 6);
        let x = t(s, (0..s.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let p = tape.avg_pool(xid, 3).unwrap();
            let sg = tape.sigmoid(p);
            let m = tape.mean_all(sg);
            tape.scalar_value(m).to_bits()
        };
        assert_eq!(run(&x), run(&x));
    }
}
