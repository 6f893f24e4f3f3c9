//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value. Node indices are the
//! recording order, which is a valid topological order, so `backward` walks
//! the nodes in exact reverse. A fresh tape is built per training step.

use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm_acc, gemm_nt_acc, gemm_tn_acc, logsumexp, softmax_row};
use super::tensor::{numel, Tensor, TensorId};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf(Option<TensorId>),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Expand { x: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<TensorId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", format!("shape {:?} vs {} values", shape, data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf(None), false))
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice returns the
    /// same node, so shared weights accumulate gradients in one leaf.
    pub fn bind(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf(Some(t.id())),
            t.requires_grad(),
        );
        self.bound.insert(t.id(), v);
        v
    }

    /// Binds a tensor's current values as a constant, regardless of its flag.
    pub fn bind_detached(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf(None), false)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `b` is either a plain matrix shared across the leading axes of `a`,
    /// or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands need rank >= 2, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dims differ: {:?} x {:?}", sa, sb)));
        }
        let lead = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if b_batched && &sb[..sb.len() - 2] != lead {
            return Err(shape_err("matmul", format!("batch dims differ: {:?} x {:?}", sa, sb)));
        }
        let batch = numel(lead);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a), self.value(b));
            for i in 0..batch {
                let boff = if b_batched { i * k * n } else { 0 };
                gemm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[boff..boff + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, b_batched }, rg))
    }

    /// Orders operands so the second one broadcasts over leading axes of the first.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(shape_err(op, format!("cannot broadcast {:?} with {:?}", sa, sb)))
        }
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let (ad, bd) = (self.value(a), self.value(b));
        let data: Vec<T> = ad
            .chunks(bd.len().max(1))
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::Add { a, b }, rg))
    }

    /// Elementwise product; the smaller operand broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let (ad, bd) = (self.value(a), self.value(b));
        let data: Vec<T> = ad
            .chunks(bd.len().max(1))
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, data, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::Scale { x, s }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::Tanh(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
        let xd = self.value(x);
        let mut out = vec![T::zero(); xd.len()];
        if d > 0 {
            for (row, o) in xd.chunks(d).zip(out.chunks_mut(d)) {
                softmax_row(row, o);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} must be [{}]", self.shape(g), self.shape(b), d),
            ));
        }
        let (xd, gd, bd) = (self.value(x), self.value(g), self.value(b));
        let rows = xd.len() / d.max(1);
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        let eps = T::of(LN_EPS);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, g, b]);
        Ok(self.push(shape, out, Op::LayerNorm { x, g, b, xhat, rstd }, rg))
    }

    /// Row lookup: output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", format!("table must be rank 2, got {:?}", ts)));
        }
        if numel(ids_shape) != ids.len() {
            return Err(shape_err("embedding", format!("ids shape {:?} vs {} ids", ids_shape, ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let td = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(shape, out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {} out of range for {:?}", axis, s0)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(shape_err("concat", format!("{:?} vs {:?} along axis {}", s0, s, axis)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let xd = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank >= 2 required, got {:?}", s)));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let xd = self.value(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Transpose(x), rg))
    }

    /// Repeats `x` over new leading axes `lead`.
    pub fn expand(&mut self, x: Var, lead: &[usize]) -> Var {
        let copies = numel(lead);
        let xd = self.value(x);
        let mut out = Vec::with_capacity(copies * xd.len());
        for _ in 0..copies {
            out.extend_from_slice(xd);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Expand { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xd = self.value(x);
        let s: T = xd.iter().copied().sum::<T>() / T::of(xd.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (ad, bd) = (self.value(a), self.value(b));
        let n = T::of(ad.len().max(1) as f64);
        let s: T = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![s], Op::Mse { a, b }, rg))
    }

    /// Mean cross-entropy of softmax(logits) against targets.
    ///
    /// `targets` has one entry per logits row; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().ok_or_else(|| shape_err("cross_entropy", "rank-0 logits"))?;
        let rows = numel(&s[..s.len() - 1]);
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), s),
            ));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(shape_err("cross_entropy", "no target positions"));
        }
        let ld = self.value(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &ld[r * v..(r + 1) * v];
            softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            if let Some(t) = *t {
                total = total + logsumexp(row) - row[t];
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf(Some(id)) = node.op {
                if node.requires_grad {
                    let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.data.len()]);
                    leaves.insert(id, g);
                }
            }
        }
        // Leaves recorded after the loss are off every path to it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Leaf(Some(id)) = node.op {
                if node.requires_grad {
                    leaves.insert(id, vec![T::zero(); node.data.len()]);
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn apply_rule(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf(_) => {}
            &Op::MatMul { a, b, batch, m, k, n, b_batched } => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                with_grad!(a, |ga| {
                    for i in 0..batch {
                        let boff = if b_batched { i * k * n } else { 0 };
                        gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                with_grad!(b, |gb| {
                    for i in 0..batch {
                        let boff = if b_batched { i * k * n } else { 0 };
                        gemm_tn_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Add { a, b } => {
                with_grad!(a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                });
                with_grad!(b, |gb| {
                    let len = gb.len().max(1);
                    for chunk in g.chunks(len) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                let len = bd.len().max(1);
                with_grad!(a, |ga| {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x = *x + g[idx] * bd[idx % len];
                    }
                });
                with_grad!(b, |gb| {
                    for (idx, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        gb[idx % len] = gb[idx % len] + gv * av;
                    }
                });
            }
            &Op::Scale { x, s } => {
                with_grad!(x, |gx| {
                    for (a, &y) in gx.iter_mut().zip(g) {
                        *a = *a + y * s;
                    }
                });
            }
            &Op::Gelu(x) => {
                let xd = &nodes[x.0].data;
                with_grad!(x, |gx| {
                    for ((a, &y), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *a = *a + y * gelu_grad(v);
                    }
                });
            }
            &Op::Tanh(x) => {
                with_grad!(x, |gx| {
                    for ((a, &y), &t) in gx.iter_mut().zip(g).zip(&node.data) {
                        *a = *a + y * (T::one() - t * t);
                    }
                });
            }
            &Op::Softmax(x) => {
                let d = *node.shape.last().unwrap_or(&1);
                with_grad!(x, |gx| {
                    for ((gr, yr), xr) in g.chunks(d).zip(node.data.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            xr[j] = xr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, g: gain, b: bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap_or(&1);
                let gd = &nodes[gain.0].data;
                with_grad!(*x, |gx| {
                    let dn = T::of(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let gh = gy[j] * gd[j];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xh[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let gh = gy[j] * gd[j];
                            gx[r * d + j] = gx[r * d + j] + rs * (gh - m1 - xh[j] * m2);
                        }
                    }
                });
                with_grad!(*gain, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * xr[j];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = *node.shape.last().unwrap_or(&1);
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = nodes[p.0].shape[*axis];
                    with_grad!(p, |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * plen * inner;
                            for j in 0..plen * inner {
                                gp[dst + j] = gp[dst + j] + g[src + j];
                            }
                        }
                    });
                    offset += plen;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = &nodes[x.0].shape;
                let (outer, alen, inner) = split_axis(xs, axis);
                let len = node.shape[axis];
                with_grad!(x, |gx| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        for j in 0..len * inner {
                            gx[base + j] = gx[base + j] + g[o * len * inner + j];
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let s = &node.shape;
                // Output is [.., c, r]; input was [.., r, c].
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = numel(&s[..s.len() - 2]);
                with_grad!(x, |gx| {
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] = gx[off + i * c + j] + g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            &Op::Expand { x } => {
                with_grad!(x, |gx| {
                    let len = gx.len().max(1);
                    for chunk in g.chunks(len) {
                        for (a, &y) in gx.iter_mut().zip(chunk) {
                            *a = *a + y;
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                with_grad!(x, |gx| {
                    for (a, &y) in gx.iter_mut().zip(g) {
                        *a = *a + y;
                    }
                });
            }
            &Op::Sum(x) => {
                with_grad!(x, |gx| {
                    for a in gx.iter_mut() {
                        *a = *a + g[0];
                    }
                });
            }
            &Op::Mean(x) => {
                with_grad!(x, |gx| {
                    let s = g[0] / T::of(gx.len().max(1) as f64);
                    for a in gx.iter_mut() {
                        *a = *a + s;
                    }
                });
            }
            &Op::Mse { a, b } => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                let s = T::of(2.0) * g[0] / T::of(ad.len().max(1) as f64);
                with_grad!(a, |ga| {
                    for ((x, &u), &v) in ga.iter_mut().zip(ad).zip(bd) {
                        *x = *x + s * (u - v);
                    }
                });
                with_grad!(b, |gb| {
                    for ((x, &u), &v) in gb.iter_mut().zip(ad).zip(bd) {
                        *x = *x - s * (u - v);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = *nodes[logits.0].shape.last().unwrap_or(&1);
                let s = g[0] / T::of(*count as f64);
                with_grad!(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                gl[r * v + j] = gl[r * v + j] + s * probs[r * v + j];
                            }
                            gl[r * v + t] = gl[r * v + t] - s;
                        }
                    }
                });
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.data.len()]))
}

/// Gradients of a scalar with respect to every bound leaf tensor that
/// requires a gradient. Leaves off every path to the loss get zeros.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.leaves.get(&t.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.leaves.remove(&t.id())
    }

    /// Moves the gradient for `t` into `t.grad` (`None` when `t` was not
    /// bound or does not require a gradient).
    pub fn fill(&mut self, t: &mut Tensor<T>) {
        t.grad = self.take(t);
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
