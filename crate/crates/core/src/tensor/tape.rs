use std::borrow::Cow;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    MulRow { x: Var, v: Var },
    AddBias { x: Var, b: Var },
    Dot(Var, Var),
    Scale { x: Var, c: T },
    Softmax(Var),
    Log { x: Var, floor: T },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    SliceCols { x: Var, start: usize, end: usize },
    Reshape(Var),
    Sum(Var),
    Select { x: Var, index: usize },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of executed ops; [`Tape::backward`] replays it in reverse.
///
/// Leaves may borrow parameter storage for the tape's lifetime, so binding a
/// large parameter set costs nothing. A tape is single-writer; independent
/// tapes over the same parameters can run concurrently.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(name, format!("non-finite output at flat index {pos}")));
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op<T>) -> bool {
        let g = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf { .. } => false,
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } => g(a) || g(b),
            Op::Add(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => g(a) || g(b),
            Op::MulRow { x, v } => g(x) || g(v),
            Op::AddBias { x, b } => g(x) || g(b),
            Op::LayerNorm { x, gain, bias, .. } => g(x) || g(gain) || g(bias),
            Op::Gather { table, .. } => g(table),
            Op::Concat { parts, .. } => parts.iter().any(g),
            Op::Scale { x, .. }
            | Op::Softmax(x)
            | Op::Log { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Gelu(x)
            | Op::MaskedFill { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Select { x, .. } => g(x),
        }
    }

    fn leaf(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, requires_grad: bool, param: Option<usize>) -> Result<Var> {
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical("leaf", format!("non-finite input at flat index {pos}")));
        }
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf { param },
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a borrowed parameter; its gradient is reported under `id`.
    pub fn param(&mut self, tensor: &'a Tensor<T>, id: usize) -> Result<Var> {
        self.leaf(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Some(id),
        )
    }

    /// Records a borrowed tensor, differentiable iff it requires grad.
    pub fn borrowed(&mut self, tensor: &'a Tensor<T>) -> Result<Var> {
        self.leaf(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            None,
        )
    }

    pub fn input(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let shape = tensor.shape().to_vec();
        self.leaf(Cow::Owned(tensor.into_data()), shape, requires_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.input(tensor, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Argmax positions recorded by a [`Tape::max_axis`] node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxAxis { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`, or `a[m×k] · b[k]` giving a length-`m` vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let bs = self.shape(b).to_vec();
        let (kb, n, out_shape) = match bs.len() {
            1 => (bs[0], 1, vec![m]),
            2 => (bs[0], bs[1], vec![m, bs[1]]),
            _ => return Err(Error::shape("matmul", self.shape(a), &bs)),
        };
        if kb != k {
            return Err(Error::shape("matmul", self.shape(a), &bs));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        self.push("matmul", out_shape, out, Op::MatMul { a, b, m, k, n })
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, kb) = self.matrix_dims(b, "matmul_nt")?;
        if kb != k {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNt { a, b, m, k, n })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    /// Multiplies every row of `x` elementwise by the vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if self.shape(v) != [c] {
            return Err(Error::shape("mul_row", self.shape(x), self.shape(v)));
        }
        let vv = self.value(v);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv).map(|(&a, &b)| a * b))
            .collect();
        self.push("mul_row", self.shape(x).to_vec(), out, Op::MulRow { x, v })
    }

    /// Adds `b` to every row of `x`; `b` has the row length, or length 1 for a scalar bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        let bl = self.value(b).len();
        if self.shape(b).len() > 1 || (bl != c && bl != 1) {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + if bl == 1 { bv[0] } else { bv[i % c] })
            .collect();
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias { x, b })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        self.same_shape(a, b, "dot")?;
        let out = dot(self.value(a), self.value(b));
        self.push("dot", vec![], vec![out], Op::Dot(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale { x, c })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if c == 0 {
            return Err(Error::shape("softmax", self.shape(x), &[1]));
        }
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    /// Natural log with inputs clamped from below at `floor`; clamped entries get no gradient.
    pub fn log(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push("log", self.shape(x).to_vec(), out, Op::Log { x, floor })
    }

    /// Maximum along `axis` (0 or 1 for matrices, 0 for vectors). Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, c, out_shape) = match (shape.len(), axis) {
            (1, 0) => (1, shape[0], vec![]),
            (2, 0) => (shape[0], shape[1], vec![shape[1]]),
            (2, 1) => (shape[0], shape[1], vec![shape[0]]),
            _ => return Err(Error::shape("max_axis", &shape, &[axis])),
        };
        if r == 0 || c == 0 {
            return Err(Error::shape("max_axis", &shape, &[axis]));
        }
        let xv = self.value(x);
        let (outer, inner, at): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = if shape.len() == 2 && axis == 0 {
            (c, r, Box::new(move |o, i| i * c + o))
        } else {
            (r, c, Box::new(move |o, i| o * c + i))
        };
        let mut out = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = 0;
            for i in 1..inner {
                if xv[at(o, i)] > xv[at(o, best)] {
                    best = i;
                }
            }
            out.push(xv[at(o, best)]);
            argmax.push(best);
        }
        self.push("max_axis", out_shape, out, Op::MaxAxis { x, axis, argmax })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let n = T::from_usize(c).unwrap();
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push("layer_norm", self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (k, s) = (T::lit(GELU_C), T::lit(SQRT_2_OVER_PI));
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (s * (v + k * v * v * v)).tanh()))
            .collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.matrix_dims(table, "gather")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        self.push("gather", vec![ids.len(), c], out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.gather(x, &[i])?;
        self.reshape(r, vec![self.shape(x)[1]])
    }

    /// Concatenation along `axis` (0: rows / vector elements, 1: matrix columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let s0 = self.shape(first).to_vec();
        let out_shape;
        let mut out = Vec::new();
        match (s0.len(), axis) {
            (0, 0) | (1, 0) => {
                for &p in parts {
                    if self.shape(p).len() > 1 {
                        return Err(Error::shape("concat", &s0, self.shape(p)));
                    }
                    out.extend_from_slice(self.value(p));
                }
                out_shape = vec![out.len()];
            }
            (2, 0) => {
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[1] != s0[1] {
                        return Err(Error::shape("concat", &s0, s));
                    }
                    rows += s[0];
                    out.extend_from_slice(self.value(p));
                }
                out_shape = vec![rows, s0[1]];
            }
            (2, 1) => {
                let mut cols = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != s0[0] {
                        return Err(Error::shape("concat", &s0, s));
                    }
                    cols.push(s[1]);
                }
                for i in 0..s0[0] {
                    for (&p, &c) in parts.iter().zip(&cols) {
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                out_shape = vec![s0[0], cols.iter().sum()];
            }
            _ => return Err(Error::shape("concat", &s0, &[axis])),
        }
        self.push("concat", out_shape, out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Replaces entries where `mask` is set by `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: T) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        self.push("masked_fill", self.shape(x).to_vec(), out, Op::MaskedFill { x, mask: mask.to_vec() })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        self.push("slice_cols", vec![r, end - start], out, Op::SliceCols { x, start, end })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    /// Flat element `index` as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        let v = *self.value(x).get(index).ok_or(Error::Index {
            what: "select",
            index,
            len,
        })?;
        self.push("select", vec![], vec![v], Op::Select { x, index })
    }

    /// Reverse pass from a single-element output, visiting each recorded op once.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::shape("backward", &self.nodes[output.0].shape, &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(node, &gy, &mut grads)?;
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } if n.needs_grad => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { node_grads: grads, params })
    }

    fn propagate(&self, node: &Node<'a, T>, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].needs_grad {
                let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(g);
            }
        };

        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    acc(a, &mut |g| gemm_nt(m, n, k, gy, val(b), g));
                }
                if wants(b) {
                    acc(b, &mut |g| gemm_tn(k, m, n, val(a), gy, g));
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    acc(a, &mut |g| gemm_nn(m, n, k, gy, val(b), g));
                }
                if wants(b) {
                    acc(b, &mut |g| gemm_tn(n, m, k, gy, val(a), g));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc(a, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(val(b)) {
                        *g += d * o;
                    }
                });
                acc(b, &mut |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(val(a)) {
                        *g += d * o;
                    }
                });
            }
            Op::MulRow { x, v } => {
                let (x, v) = (*x, *v);
                let c = val(v).len();
                acc(x, &mut |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        *g += gy[i] * val(v)[i % c];
                    }
                });
                acc(v, &mut |g| {
                    for (i, (&d, &xv)) in gy.iter().zip(val(x)).enumerate() {
                        g[i % c] += d * xv;
                    }
                });
            }
            Op::AddBias { x, b } => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                let bl = val(*b).len();
                acc(*b, &mut |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        g[if bl == 1 { 0 } else { i % bl }] += d;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                acc(a, &mut |g| axpy(gy[0], val(b), g));
                acc(b, &mut |g| axpy(gy[0], val(a), g));
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, c) = dims2(&node.shape);
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gy.chunks(c)) {
                        let s = dot(yr, dr);
                        for ((g, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (d - s);
                        }
                    }
                });
            }
            Op::Log { x, floor } => {
                acc(*x, &mut |g| {
                    for ((g, &d), &xv) in g.iter_mut().zip(gy).zip(val(*x)) {
                        if xv > *floor {
                            *g += d / xv;
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let s = &nodes[x.0].shape;
                let c = *s.last().unwrap();
                let col_reduce = s.len() == 2 && *axis == 0;
                acc(*x, &mut |g| {
                    for (o, &best) in argmax.iter().enumerate() {
                        let flat = if col_reduce { best * c + o } else { o * c + best };
                        g[flat] += gy[o];
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = val(*gain).len();
                let n = T::from_usize(c).unwrap();
                let gv = val(*gain);
                acc(*x, &mut |g| {
                    for (r, gr) in g.chunks_mut(c).enumerate() {
                        let dr = &gy[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            gr[j] += rstd[r] * (dr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dr in gy.chunks(c) {
                        for j in 0..c {
                            g[j] += dr[j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let (k, s) = (T::lit(GELU_C), T::lit(SQRT_2_OVER_PI));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                acc(*x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(val(*x)) {
                        let t = (s * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * s * (T::one() + three * k * v * v);
                        *g += d * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = *nodes[table.0].shape.last().unwrap();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &gy[r * c..(r + 1) * c], &mut g[id * c..(id + 1) * c]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 1 && node.shape.len() == 2 {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let c = nodes[p.0].shape[1];
                        acc(p, &mut |g| {
                            for i in 0..rows {
                                axpy(T::one(), &gy[i * total + off..i * total + off + c], &mut g[i * c..(i + 1) * c]);
                            }
                        });
                        off += c;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        acc(p, &mut |g| axpy(T::one(), &gy[off..off + len], g));
                        off += len;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                acc(*x, &mut |g| {
                    for ((g, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, end } => {
                let c = nodes[x.0].shape[1];
                let w = end - start;
                acc(*x, &mut |g| {
                    for (i, dr) in gy.chunks(w).enumerate() {
                        axpy(T::one(), dr, &mut g[i * c + start..i * c + end]);
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0]));
            }
            Op::Select { x, index } => {
                acc(*x, &mut |g| g[*index] += gy[0]);
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    node_grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a differentiable leaf, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` for every parameter bound with [`Tape::param`].
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.node_grads[i].as_deref().map(|g| (p, g)))
    }
}
