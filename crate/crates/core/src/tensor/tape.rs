//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order; [`Tape::backward`] walks it once in reverse.

use super::scalar::{gemm, MatRef, Scalar};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `a [rows, k] x w [k, n]`, `w` shared across all rows.
    Linear { a: usize, w: usize, rows: usize, k: usize, n: usize },
    /// Per-batch `a [m, k] x b [k, n]` (or `b [n, k]` read transposed).
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    /// `b` repeats over the leading axes of `x`.
    AddBroadcast { x: usize, b: usize },
    /// `b` is either same-shaped or broadcasts over the trailing axis.
    Mul { a: usize, b: usize, trailing: bool },
    Scale { x: usize, c: T },
    Act { x: usize, kind: Activation },
    Softmax { x: usize },
    LayerNorm { x: usize, g: usize, b: usize, xhat: Vec<T>, rstd: Vec<T> },
    Pool { x: usize, kind: PoolKind, argmax: Vec<u32> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize> },
    Sum { x: usize },
    Mse { pred: usize, target: Vec<T>, weights: Vec<T>, batch: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    /// Learnable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Non-learnable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let (shape, value) = t.into_parts();
        self.push(shape, value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Linear map over the last axis: `a [..., k] x w [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sw[0] {
            return Err(Error::shape("matmul", &sa, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(
            MatRef::new(self.value(a), rows, k),
            MatRef::new(self.value(w), k, n),
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a.0, w.0]);
        Ok(self.push(shape, out, Op::Linear { a: a.0, w: w.0, rows, k, n }, rg))
    }

    /// Batched product over matching leading axes:
    /// `a [..., m, k] x b [..., k, n]`, or `b [..., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("bmm", &sa, &sb);
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(bad());
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let bm = if trans_b {
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], n, k).t()
                } else {
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n)
                };
                gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::BatchMatMul { a: a.0, b: b.0, batch, m, k, n, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// `x + b` where `b`'s shape (ignoring leading singleton axes) is a
    /// suffix of `x`'s shape. Used for biases and positional offsets.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        let core: Vec<usize> = sb.iter().copied().skip_while(|&d| d == 1).collect();
        if core.len() > sx.len() || sx[sx.len() - core.len()..] != core[..] {
            return Err(Error::shape("add_broadcast", sx, sb));
        }
        let bn = numel(&core);
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(bn.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&u, &v)| u + v))
            .collect();
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(sx.to_vec(), out, Op::AddBroadcast { x: x.0, b: b.0 }, rg))
    }

    /// Hadamard product. `b` may drop the trailing axis to size 1, in which
    /// case each trailing fiber of `a` is scaled by one entry of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let trailing = if sa == sb {
            false
        } else if !sa.is_empty()
            && sa.len() == sb.len()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
            && sb[sb.len() - 1] == 1
        {
            true
        } else {
            return Err(Error::shape("mul", &sa, &sb));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<T> = if trailing {
            let d = sa[sa.len() - 1];
            av.chunks(d.max(1)).zip(bv).flat_map(|(row, &s)| row.iter().map(move |&u| u * s)).collect()
        } else {
            av.iter().zip(bv).map(|(&u, &v)| u * v).collect()
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(sa, out, Op::Mul { a: a.0, b: b.0, trailing }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&u| u * c).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&u| match kind {
                Activation::Relu => {
                    if u > T::zero() {
                        u
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => sigmoid(u),
            })
            .collect();
        let rg = self.rg(&[x.0]);
        self.push(self.shape(x).to_vec(), out, Op::Act { x: x.0, kind }, rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = match s.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(Error::shape("softmax_last", &s, &[])),
        };
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(s, out, Op::Softmax { x: x.0 }, rg))
    }

    /// Normalizes each last-axis slice to zero mean / unit variance, then
    /// applies the per-feature affine `g`, `b` (each with `d` entries).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        if self.value(g).len() != d || self.value(b).len() != d {
            return Err(Error::shape("layer_norm", &s, self.shape(g)));
        }
        if eps <= T::zero() {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let gv = self.value(g);
        let bv = self.value(b);
        let rows = xv.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x.0, g.0, b.0]);
        Ok(self.push(s, out, Op::LayerNorm { x: x.0, g: g.0, b: b.0, xhat, rstd }, rg))
    }

    /// Reduces the last axis to size 1. Max ties resolve to the lowest index.
    pub fn pool_last(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = match s.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(Error::shape("pool_last", &s, &[])),
        };
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::new();
        let dn = T::from_usize(d).unwrap();
        for row in xv.chunks(d) {
            match kind {
                PoolKind::Max => {
                    let mut best = 0usize;
                    for (j, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    argmax.push(best as u32);
                    out.push(row[best]);
                }
                PoolKind::Avg => out.push(row.iter().copied().sum::<T>() / dn),
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Pool { x: x.0, kind, argmax }, rg))
    }

    /// Same-size 2-D cross-correlation with bias.
    /// `x [B, C_in, H, W]`, `w [C_out, C_in, KH, KW]`, `b [C_out]`; kernel
    /// sizes must be odd, padding is `(K-1)/2` zeros on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::config(format!(
                "convolution kernel {}x{} must have odd sizes",
                sw[2], sw[3]
            )));
        }
        if self.value(b).len() != sw[0] {
            return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
        };
        let plane = geom.plane();
        let mut out = vec![T::zero(); geom.batch * geom.c_out * plane];
        let mut cols = vec![T::zero(); geom.patch() * plane];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for bi in 0..geom.batch {
                let xs = &xv[bi * geom.c_in * plane..(bi + 1) * geom.c_in * plane];
                im2col(xs, &geom, &mut cols);
                let o = &mut out[bi * geom.c_out * plane..(bi + 1) * geom.c_out * plane];
                gemm(
                    MatRef::new(wv, geom.c_out, geom.patch()),
                    MatRef::new(&cols, geom.patch(), plane),
                    o,
                    false,
                );
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![geom.batch, geom.c_out, geom.h, geom.w],
            out,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, geom },
            rg,
        ))
    }

    /// Same-size 1-D cross-correlation: `x [B, C_in, L]`, `w [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let x4 = self.reshape(x, &[sx[0], sx[1], 1, sx[2]])?;
        let w4 = self.reshape(w, &[sw[0], sw[1], 1, sw[2]])?;
        let y = self.conv2d(x4, w4, b)?;
        self.reshape(y, &[sx[0], sw[0], sx[2]])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape { x: x.0 }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&s, perm, |o, i| out[o] = src[i]);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Permute { x: x.0, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last2", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::config("concat of nothing"))?).to_vec();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(shape, out, Op::Concat { parts: ids }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, rg)
    }

    /// `(1/B) sum_i w_i ||target_i - pred_i||^2` with the batch on axis 0.
    pub fn mse_loss(&mut self, pred: Var, target: &[T], weights: Option<&[T]>) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if target.len() != self.value(pred).len() || s.is_empty() {
            return Err(Error::shape("mse_loss", &s, &[target.len()]));
        }
        let batch = s[0];
        let weights = match weights {
            Some(w) if w.len() != batch => return Err(Error::shape("mse_loss weights", &s, &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![T::one(); batch],
        };
        let per = target.len() / batch.max(1);
        let pv = self.value(pred);
        let mut total = T::zero();
        for i in 0..batch {
            let sse: T = pv[i * per..(i + 1) * per]
                .iter()
                .zip(&target[i * per..(i + 1) * per])
                .map(|(&p, &t)| (t - p) * (t - p))
                .sum();
            total += weights[i] * sse;
        }
        let loss = total / T::from_usize(batch).unwrap();
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Mse { pred: pred.0, target: target.to_vec(), weights, batch },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (scalar root)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Linear { a, w, rows, k, n } => {
                if self.wants(a) {
                    let ga = slot(grads, a, rows * k);
                    gemm(MatRef::new(g, rows, n), MatRef::new(&self.nodes[w].value, k, n).t(), ga, true);
                }
                if self.wants(w) {
                    let gw = slot(grads, w, k * n);
                    gemm(MatRef::new(&self.nodes[a].value, rows, k).t(), MatRef::new(g, rows, n), gw, true);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                if self.wants(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC B^T  (B stored k x n)  or  dC B  (B stored n x k)
                        let bm = if trans_b { MatRef::new(bs, n, k) } else { MatRef::new(bs, k, n).t() };
                        gemm(gi, bm, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for i in 0..batch {
                        let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB (n x k) = dC^T A
                            gemm(gi.t(), am, out, true);
                        } else {
                            gemm(am.t(), gi, out, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if self.wants(p) {
                        axpy(slot(grads, p, g.len()), g);
                    }
                }
            }
            &Op::AddBroadcast { x, b } => {
                if self.wants(x) {
                    axpy(slot(grads, x, g.len()), g);
                }
                if self.wants(b) {
                    let bn = self.nodes[b].value.len();
                    let gb = slot(grads, b, bn);
                    for row in g.chunks(bn.max(1)) {
                        axpy(gb, row);
                    }
                }
            }
            &Op::Mul { a, b, trailing } => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                if trailing {
                    let d = *node.shape.last().unwrap();
                    if self.wants(a) {
                        let ga = slot(grads, a, av.len());
                        for ((gr, gar), &s) in g.chunks(d).zip(ga.chunks_mut(d)).zip(bv) {
                            gar.iter_mut().zip(gr).for_each(|(o, &u)| *o += u * s);
                        }
                    }
                    if self.wants(b) {
                        let gb = slot(grads, b, bv.len());
                        for ((gr, ar), o) in g.chunks(d).zip(av.chunks(d)).zip(gb.iter_mut()) {
                            *o += gr.iter().zip(ar).map(|(&u, &v)| u * v).sum::<T>();
                        }
                    }
                } else {
                    if self.wants(a) {
                        let ga = slot(grads, a, av.len());
                        ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (&u, &v))| *o += u * v);
                    }
                    if self.wants(b) {
                        let gb = slot(grads, b, bv.len());
                        gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&u, &v))| *o += u * v);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.wants(x) {
                    let gx = slot(grads, x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &u)| *o += u * c);
                }
            }
            &Op::Act { x, kind } => {
                if self.wants(x) {
                    let xv = &self.nodes[x].value;
                    let yv = &node.value;
                    let gx = slot(grads, x, g.len());
                    match kind {
                        Activation::Relu => {
                            for ((o, &u), &xi) in gx.iter_mut().zip(g).zip(xv) {
                                if xi > T::zero() {
                                    *o += u;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for ((o, &u), &y) in gx.iter_mut().zip(g).zip(yv) {
                                *o += u * y * (T::one() - y);
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if self.wants(x) {
                    let d = *node.shape.last().unwrap();
                    let gx = slot(grads, x, g.len());
                    for ((gr, yr), o) in g.chunks(d).zip(node.value.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &y)| u * y).sum();
                        for j in 0..d {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gam, b, xhat, rstd } => {
                let (x, gam, b) = (*x, *gam, *b);
                let d = *node.shape.last().unwrap();
                let gv = &self.nodes[gam].value;
                if self.wants(gam) {
                    let gg = slot(grads, gam, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (&u, &h))| *o += u * h);
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, b, d);
                    for gr in g.chunks(d) {
                        axpy(gb, gr);
                    }
                }
                if self.wants(x) {
                    let dn = T::from_usize(d).unwrap();
                    let gx = slot(grads, x, g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        let rs = rstd[r];
                        let o = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            o[j] += rs * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Pool { x, kind, argmax } => {
                let x = *x;
                if self.wants(x) {
                    let d = *self.nodes[x].shape.last().unwrap();
                    let gx = slot(grads, x, g.len() * d);
                    match kind {
                        PoolKind::Max => {
                            for (r, (&u, &j)) in g.iter().zip(argmax).enumerate() {
                                gx[r * d + j as usize] += u;
                            }
                        }
                        PoolKind::Avg => {
                            let dn = T::from_usize(d).unwrap();
                            for (r, &u) in g.iter().enumerate() {
                                let share = u / dn;
                                gx[r * d..(r + 1) * d].iter_mut().for_each(|o| *o += share);
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let plane = geom.plane();
                let patch = geom.patch();
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                if self.wants(b) {
                    let gb = slot(grads, b, geom.c_out);
                    for bi in 0..geom.batch {
                        let gs = &g[bi * geom.c_out * plane..(bi + 1) * geom.c_out * plane];
                        for (co, chunk) in gs.chunks(plane).enumerate() {
                            gb[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                let want_w = self.wants(w);
                let want_x = self.wants(x);
                let mut cols = vec![T::zero(); patch * plane];
                let mut dcols = vec![T::zero(); patch * plane];
                for bi in 0..geom.batch {
                    let gs = MatRef::new(&g[bi * geom.c_out * plane..(bi + 1) * geom.c_out * plane], geom.c_out, plane);
                    if want_w {
                        im2col(&xv[bi * geom.c_in * plane..(bi + 1) * geom.c_in * plane], &geom, &mut cols);
                        let gw = slot(grads, w, geom.c_out * patch);
                        gemm(gs, MatRef::new(&cols, patch, plane).t(), gw, true);
                    }
                    if want_x {
                        gemm(MatRef::new(wv, geom.c_out, patch).t(), gs, &mut dcols, false);
                        let gx = slot(grads, x, geom.batch * geom.c_in * plane);
                        col2im_add(&dcols, &geom, &mut gx[bi * geom.c_in * plane..(bi + 1) * geom.c_in * plane]);
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    axpy(slot(grads, x, g.len()), g);
                }
            }
            Op::Permute { x, perm } => {
                let x = *x;
                if self.wants(x) {
                    let s = self.nodes[x].shape.clone();
                    let gx = slot(grads, x, g.len());
                    for_each_permuted(&s, perm, |o, i| gx[i] += g[o]);
                }
            }
            Op::Concat { parts } => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = *self.nodes[p].shape.last().unwrap();
                    if self.wants(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            axpy(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    let n = self.nodes[x].value.len();
                    let gx = slot(grads, x, n);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mse { pred, target, weights, batch } => {
                let pred = *pred;
                if self.wants(pred) {
                    let pv = &self.nodes[pred].value;
                    let per = pv.len() / (*batch).max(1);
                    let two = T::from_f64_lossy(2.0) / T::from_usize(*batch).unwrap();
                    let gp = slot(grads, pred, pv.len());
                    for i in 0..*batch {
                        let c = two * weights[i] * g[0];
                        for j in i * per..(i + 1) * per {
                            gp[j] += c * (pv[j] - target[j]);
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(u: T) -> T {
    if u >= T::zero() {
        T::one() / (T::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (T::one() + e)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, n: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); n])
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &u)| *o += u);
}

/// Calls `f(out_index, in_index)` for every element of a permuted copy.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = shape.len();
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        // odometer increment over the output shape
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - ph;
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - pw;
                        dst[i * g.w + j] = if si >= 0 && si < g.h as isize && sj >= 0 && sj < g.w as isize {
                            x[c * plane + si as usize * g.w + sj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - ph;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - pw;
                        if sj >= 0 && sj < g.w as isize {
                            dx[c * plane + si as usize * g.w + sj as usize] += src[i * g.w + j];
                        }
                    }
                }
            }
        }
    }
}
