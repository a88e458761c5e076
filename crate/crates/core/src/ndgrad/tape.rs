//! Define-by-run reverse-mode tape over dense row-major `f64` arrays.
//!
//! Every operation appends one node. Node indices are assigned in
//! construction order, so walking the node list backwards is a valid
//! reverse topological order for the backward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use super::GradError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to an array recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape_id: u32,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u32 {
        self.tape_id
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    MaxScalar(usize, f64),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    /// out[i] = src[map[i]]; covers slice, permute and expand.
    Gather(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape. Build one per training step.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Index map for reading `out_shape` from a source laid out with `src_strides`
/// (one stride per output axis, zero for broadcast axes).
fn strided_map(out_shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    if total == 0 {
        return map;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = base;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    map
}

/// `c (+)= op(a) * op(b)` for row-major buffers, with optional transposed views.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_transposed: bool, b: &[f64], b_transposed: bool, c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // a viewed as m x k; b viewed as k x n.
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths checked above; strides describe in-bounds views.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, GradError> {
        if v.tape_id != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let index = self.nodes.len();
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { tape_id: self.id, index }
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var, GradError> {
        if numel(shape) != data.len() {
            return Err(GradError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn var(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, GradError> {
        self.leaf(shape, data, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, GradError> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Constant copy of `v`: same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var, GradError> {
        let i = self.idx(v)?;
        let node = &self.nodes[i];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Value of a single-element array.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.index].value[0]
    }

    // ---- elementwise binary -------------------------------------------------

    /// Output shape for a binary op. The shorter operand must equal a trailing
    /// suffix of the longer one; it is then repeated over the leading axes.
    fn broadcast_shape(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>, GradError> {
        let sa = &self.nodes[a].shape;
        let sb = &self.nodes[b].shape;
        let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if long[long.len() - short.len()..] != short[..] {
            return Err(GradError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        Ok(long.clone())
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let shape = self.broadcast_shape(op_name, ia, ib)?;
        let n = numel(&shape);
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let (la, lb) = (va.len(), vb.len());
        let value: Vec<f64> = (0..n).map(|i| f(va[i % la], vb[i % lb])).collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(shape, value, make(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let node = &self.nodes[ia];
        let value = node.value.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, value, op, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, |x| c * x, Op::Scale(ia, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x + c, Op::Offset(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, sigmoid, Op::Sigmoid(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, f64::tanh, Op::Tanh(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x.max(0.0), Op::Relu(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, f64::exp, Op::Exp(ia))
    }

    /// Natural log. Every input element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        if let Some((index, &value)) = self.nodes[ia].value.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(GradError::NonPositiveLog { index, value });
        }
        self.unary(a, f64::ln, Op::Log(ia))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x * x, Op::Square(ia))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, f64::sqrt, Op::Sqrt(ia))
    }

    /// Elementwise `max(x, c)`. The subgradient at the kink is zero.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x.max(c), Op::MaxScalar(ia, c))
    }

    // ---- linear algebra -----------------------------------------------------

    /// `[..., M, K] x [K, N] -> [..., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(GradError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let rows = if k == 0 { numel(&sa[..sa.len() - 1]) } else { rows };
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, &self.nodes[ia].value, false, &self.nodes[ib].value, false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(shape, out, Op::MatMul(ia, ib), rg))
    }

    /// `[G, M, K] x [G, K, N] -> [G, M, N]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(GradError::ShapeMismatch { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        {
            let va = &self.nodes[ia].value;
            let vb = &self.nodes[ib].value;
            for gi in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &va[gi * m * k..(gi + 1) * m * k],
                    false,
                    &vb[gi * k * n..(gi + 1) * k * n],
                    false,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul(ia, ib), rg))
    }

    // ---- reductions ---------------------------------------------------------

    fn axis_dims(&self, ia: usize, axis: usize, op: &'static str) -> Result<(usize, usize, usize), GradError> {
        let shape = &self.nodes[ia].shape;
        if axis >= shape.len() {
            return Err(GradError::BadAxis { op, axis, shape: shape.clone() });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        Ok((outer, shape[axis], inner))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let op_name = if mean { "mean_axis" } else { "sum_axis" };
        let (outer, len, inner) = self.axis_dims(ia, axis, op_name)?;
        let v = &self.nodes[ia].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = self.nodes[ia].shape.clone();
        shape.remove(axis);
        let rg = self.nodes[ia].requires_grad;
        let op = if mean { Op::MeanAxis(ia, axis) } else { Op::SumAxis(ia, axis) };
        Ok(self.push(shape, out, op, rg))
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.iter().sum();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Vec::new(), vec![s], Op::SumAll(ia), rg))
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- structural ---------------------------------------------------------

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        if parts.is_empty() {
            return Err(GradError::Empty("concat_last"));
        }
        let idxs: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_, _>>()?;
        let first = self.nodes[idxs[0]].shape.clone();
        if first.is_empty() {
            return Err(GradError::BadShape(format!("concat_last of scalar {:?}", first)));
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(GradError::ShapeMismatch { op: "concat_last", lhs: first.clone(), rhs: s.clone() });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idxs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(shape, out, Op::Concat(idxs), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].shape.clone();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(GradError::BadShape(format!("slice {start}..{end} on axis {axis} of shape {shape:?}")));
        }
        let strides = row_major_strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let map = strided_map(&out_shape, &strides, start * strides[axis]);
        Ok(self.gather(ia, out_shape, map))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        if numel(shape) != self.nodes[ia].value.len() {
            return Err(GradError::ShapeMismatch { op: "reshape", lhs: self.nodes[ia].shape.clone(), rhs: shape.to_vec() });
        }
        let value = self.nodes[ia].value.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(ia), rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].shape.clone();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(GradError::BadShape(format!("permute {axes:?} of shape {shape:?}")));
        }
        let strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&ax| strides[ax]).collect();
        let map = strided_map(&out_shape, &src_strides, 0);
        Ok(self.gather(ia, out_shape, map))
    }

    /// Repeat size-1 axes up to `shape`; ranks must match.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let src = self.nodes[ia].shape.clone();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(GradError::ShapeMismatch { op: "expand", lhs: src, rhs: shape.to_vec() });
        }
        let strides = row_major_strides(&src);
        let src_strides: Vec<usize> =
            src.iter().zip(shape).zip(&strides).map(|((&s, &d), &st)| if s == 1 && d != 1 { 0 } else { st }).collect();
        let map = strided_map(shape, &src_strides, 0);
        Ok(self.gather(ia, shape.to_vec(), map))
    }

    fn gather(&mut self, ia: usize, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = &self.nodes[ia].value;
        let value = map.iter().map(|&j| src[j]).collect();
        let rg = self.nodes[ia].requires_grad;
        self.push(shape, value, Op::Gather(ia, map), rg)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads, GradError> {
        let i = self.idx(loss)?;
        if !self.nodes[i].shape.is_empty() {
            return Err(GradError::NonScalarLoss(self.nodes[i].shape.clone()));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse pass seeded with explicit upstream gradients on any nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Grads, GradError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            let i = self.idx(*v)?;
            if g.len() != self.nodes[i].value.len() {
                return Err(GradError::DataLength { shape: self.nodes[i].shape.clone(), len: g.len() });
            }
            accumulate(&mut grads[i], g);
            top = top.max(i + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { tape_id: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_broadcast(*a, g.iter().copied(), grads);
                self.send_broadcast(*b, g.iter().copied(), grads);
            }
            Op::Sub(a, b) => {
                self.send_broadcast(*a, g.iter().copied(), grads);
                self.send_broadcast(*b, g.iter().map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (la, lb) = (va.len(), vb.len());
                self.send_broadcast(*a, g.iter().enumerate().map(|(k, x)| x * vb[k % lb]), grads);
                self.send_broadcast(*b, g.iter().enumerate().map(|(k, x)| x * va[k % la]), grads);
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (la, lb) = (va.len(), vb.len());
                self.send_broadcast(*a, g.iter().enumerate().map(|(k, x)| x / vb[k % lb]), grads);
                self.send_broadcast(
                    *b,
                    g.iter().enumerate().map(|(k, x)| {
                        let d = vb[k % lb];
                        -x * va[k % la] / (d * d)
                    }),
                    grads,
                );
            }
            Op::Scale(a, c) => self.send(*a, g.iter().map(|x| x * c), grads),
            Op::Offset(a) => self.send(*a, g.iter().copied(), grads),
            Op::Sigmoid(a) => self.send(*a, g.iter().zip(out).map(|(x, s)| x * s * (1.0 - s)), grads),
            Op::Tanh(a) => self.send(*a, g.iter().zip(out).map(|(x, t)| x * (1.0 - t * t)), grads),
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                self.send(*a, g.iter().zip(va).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }), grads)
            }
            Op::Exp(a) => self.send(*a, g.iter().zip(out).map(|(x, e)| x * e), grads),
            Op::Log(a) => {
                let va = &self.nodes[*a].value;
                self.send(*a, g.iter().zip(va).map(|(x, v)| x / v), grads)
            }
            Op::Square(a) => {
                let va = &self.nodes[*a].value;
                self.send(*a, g.iter().zip(va).map(|(x, v)| 2.0 * x * v), grads)
            }
            Op::Sqrt(a) => self.send(*a, g.iter().zip(out).map(|(x, r)| 0.5 * x / r), grads),
            Op::MaxScalar(a, c) => {
                let va = &self.nodes[*a].value;
                self.send(*a, g.iter().zip(va).map(|(x, v)| if *v > *c { *x } else { 0.0 }), grads)
            }
            Op::MatMul(a, b) => {
                let sb = &self.nodes[*b].shape;
                let (k, n) = (sb[0], sb[1]);
                let rows = g.len() / n.max(1);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, g, false, &self.nodes[*b].value, true, &mut da, false);
                    accumulate(&mut grads[*a], &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, rows, n, &self.nodes[*a].value, true, g, false, &mut db, false);
                    accumulate(&mut grads[*b], &db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = &self.nodes[*a].shape;
                let sb = &self.nodes[*b].shape;
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; bs * m * k];
                    for gi in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            false,
                            &vb[gi * k * n..(gi + 1) * k * n],
                            true,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(&mut grads[*a], &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; bs * k * n];
                    for gi in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[gi * m * k..(gi + 1) * m * k],
                            true,
                            &g[gi * m * n..(gi + 1) * m * n],
                            false,
                            &mut db[gi * k * n..(gi + 1) * k * n],
                            false,
                        );
                    }
                    accumulate(&mut grads[*b], &db);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = &self.nodes[*a].shape;
                let outer = numel(&shape[..*axis]);
                let len = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                let factor = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for q in 0..inner {
                            da[(o * len + l) * inner + q] = g[o * inner + q] * factor;
                        }
                    }
                }
                self.send_vec(*a, da, grads);
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                self.send(*a, std::iter::repeat_n(g[0], n), grads);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.nodes[p].shape.last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p], &dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => self.send(*a, g.iter().copied(), grads),
            Op::Gather(a, map) => {
                if self.nodes[*a].requires_grad {
                    let slot = grads[*a].get_or_insert_with(|| vec![0.0; self.nodes[*a].value.len()]);
                    for (x, &j) in g.iter().zip(map) {
                        slot[j] += x;
                    }
                }
            }
        }
    }

    fn send(&self, a: usize, contrib: impl Iterator<Item = f64>, grads: &mut [Option<Vec<f64>>]) {
        if !self.nodes[a].requires_grad {
            return;
        }
        match &mut grads[a] {
            Some(slot) => slot.iter_mut().zip(contrib).for_each(|(s, c)| *s += c),
            None => grads[a] = Some(contrib.collect()),
        }
    }

    fn send_vec(&self, a: usize, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if !self.nodes[a].requires_grad {
            return;
        }
        match &mut grads[a] {
            Some(slot) => slot.iter_mut().zip(&contrib).for_each(|(s, c)| *s += c),
            None => grads[a] = Some(contrib),
        }
    }

    /// Accumulate into an operand that may have been repeated over leading axes.
    fn send_broadcast(&self, a: usize, contrib: impl Iterator<Item = f64>, grads: &mut [Option<Vec<f64>>]) {
        if !self.nodes[a].requires_grad {
            return;
        }
        let len = self.nodes[a].value.len();
        let slot = grads[a].get_or_insert_with(|| vec![0.0; len]);
        for (k, c) in contrib.enumerate() {
            slot[k % len] += c;
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(s) => s.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads {
    tape_id: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is unreachable or constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Like [`Grads::get`] but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}
