//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends a node holding its value; [`Tape::backward`] walks
//! the tape in reverse and accumulates gradients into dense buffers. Values
//! are immutable once recorded.

use std::sync::Arc;

use crate::array::{numel, split_axis, swap_axes, Array};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::GradError;

/// A differentiable single-input operation defined outside this crate.
///
/// `backward` must accumulate (add) the input gradient into `grad_in`.
pub trait UnaryOp: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, input: &Array) -> Array;
    fn backward(&self, input: &Array, output: &Array, grad_out: &[f64], grad_in: &mut [f64]);
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed windowed overlap-add geometry for frames of shape `(B, N, T)`.
#[derive(Clone, Debug)]
pub struct OlaPlan {
    pub window: Vec<f64>,
    pub hop: usize,
    pub pad: usize,
    pub frames: usize,
    pub length: usize,
    inv_env: Vec<f64>,
}

impl OlaPlan {
    /// Synthesis plan: frame `m` starts at sample `m * hop - pad`; the output
    /// is normalized by the overlapped squared-window envelope.
    pub fn new(window: Vec<f64>, hop: usize, pad: usize, frames: usize, length: usize) -> Self {
        let mut env = vec![0.0; length];
        for m in 0..frames {
            for (j, w) in window.iter().enumerate() {
                let pos = (m * hop + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < length {
                    env[pos as usize] += w * w;
                }
            }
        }
        let inv_env = env
            .iter()
            .map(|&e| if e > 1e-11 { 1.0 / e } else { 0.0 })
            .collect();
        Self { window, hop, pad, frames, length, inv_env }
    }

    pub fn fft_size(&self) -> usize {
        self.window.len()
    }

    /// Calls `f(j, m, pos, weight)` for frame sample `j` of frame `m` landing at
    /// output position `pos`; `weight` folds in the window and the envelope.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        for (j, w) in self.window.iter().enumerate() {
            for m in 0..self.frames {
                let pos = (m * self.hop + j) as isize - self.pad as isize;
                if pos >= 0 && (pos as usize) < self.length {
                    let n = pos as usize;
                    f(j, m, n, w * self.inv_env[n]);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Prelu(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Conv1d { x: Var, w: Var, bias: Option<Var>, groups: usize },
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    RmsAxis(Var, usize),
    Softmax(Var),
    Expand(Var, usize, usize),
    UpsampleNearest(Var, usize),
    OverlapAdd(Var, Arc<OlaPlan>),
    GatherRows(Var, Vec<usize>),
    Custom(Var, Arc<dyn UnaryOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Prelu(..) => "prelu",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Conv1d { .. } => "conv1d",
            Op::SwapAxes(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis(..) => "mean_axis",
            Op::RmsAxis(..) => "rms_axis",
            Op::Softmax(..) => "softmax",
            Op::Expand(..) => "expand",
            Op::UpsampleNearest(..) => "upsample_nearest",
            Op::OverlapAdd(..) => "overlap_add",
            Op::GatherRows(..) => "gather_rows",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    frozen: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: Vec::new(), frozen: false }
    }

    /// A tape on which parameters bind as constants; nothing is differentiable.
    pub fn inference() -> Self {
        Self { frozen: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = store.value(id).clone();
        let v = if self.frozen { self.constant(value) } else { self.leaf(value) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b, op.name());
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data);
        self.derived(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.derived(value, Op::AddScalar(a), &[a])
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "mul_scalar: scalar operand has shape {:?}", self.shape(s));
        let c = self.value(s).item();
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.derived(value, Op::Exp(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.derived(value, Op::Gelu(a), &[a])
    }

    /// PReLU with one slope per entry of axis 1.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2, "prelu: input needs a channel axis, got {xs:?}");
        assert_eq!(self.shape(alpha), &[xs[1]], "prelu: slope shape mismatch");
        let (outer, c, inner) = split_axis(&xs, 1);
        let a = self.value(alpha).data().to_vec();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for (ch, &slope) in a.iter().enumerate().take(c) {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let v = src[i];
                    out[i] = if v > 0.0 { v } else { slope * v };
                }
            }
        }
        self.derived(Array::new(xs, out), Op::Prelu(x, alpha), &[x, alpha])
    }

    /// `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: incompatible {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.derived(Array::new(vec![m, n], out), Op::Matmul(a, b), &[a, b])
    }

    /// Batched `(B, m, k) x (B, k, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm: incompatible {sa:?} x {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.derived(Array::new(vec![bs, m, n], out), Op::Bmm(a, b), &[a, b])
    }

    /// 1-D convolution with "same" zero padding and stride 1.
    ///
    /// `x` is `(B, Cin, T)`, `w` is `(Cout, Cin / groups, K)`, `bias` is `(Cout)`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 3 && ws.len() == 3, "conv1d: expected rank-3 input and weight");
        let g = ConvGeom::new(&xs, &ws, groups);
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[g.cout], "conv1d: bias shape mismatch");
        }
        let mut out = vec![0.0; g.batch * g.cout * g.len];
        conv_forward(&g, self.value(x).data(), self.value(w).data(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for bi in 0..g.batch {
                for co in 0..g.cout {
                    let base = (bi * g.cout + co) * g.len;
                    for v in &mut out[base..base + g.len] {
                        *v += bv[co];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let value = Array::new(vec![g.batch, g.cout, g.len], out);
        self.derived(value, Op::Conv1d { x, w, bias, groups }, &parents)
    }

    /// Swaps two axes (copying).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(d0 < shape.len() && d1 < shape.len(), "transpose: axis out of range for {shape:?}");
        let (data, out_shape) = swap_axes(self.value(a).data(), &shape, d0, d1);
        self.derived(Array::new(out_shape, data), Op::SwapAxes(a, d0, d1), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.derived(value, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat: incompatible shapes {first:?} and {s:?} along axis {axis}"
            );
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.derived(Array::new(shape, out), Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        assert!(start + len <= ext && len > 0, "slice: [{start}, {}) out of range {ext}", start + len);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.derived(Array::new(s, out), Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.derived(Array::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.derived(Array::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..n {
                let src = &d[(o * n + s) * inner..(o * n + s + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Array::new(removed(&shape, axis), out);
        self.derived(value, Op::MeanAxis(a, axis), &[a])
    }

    /// `sqrt(mean(x^2) + eps)` along `axis`; the axis is removed.
    pub fn rms_axis(&mut self, a: Var, axis: usize, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..n {
                let src = &d[(o * n + s) * inner..(o * n + s + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v * v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v = (*v * inv + eps).sqrt());
        let value = Array::new(removed(&shape, axis), out);
        self.derived(value, Op::RmsAxis(a, axis), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax: rank-0 input");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.derived(Array::new(shape, out), Op::Softmax(a), &[a])
    }

    /// Inserts a new axis at `axis` by repeating the input `size` times.
    pub fn expand(&mut self, a: Var, axis: usize, size: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(axis <= shape.len() && size > 0, "expand: bad axis {axis} for {shape:?}");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            for _ in 0..size {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut s = shape;
        s.insert(axis, size);
        self.derived(Array::new(s, out), Op::Expand(a, axis, size), &[a])
    }

    /// Repeats every entry of the last axis `factor` times.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(factor > 0 && !shape.is_empty(), "upsample_nearest: bad factor or rank");
        if factor == 1 {
            let value = self.value(a).clone();
            return self.derived(value, Op::UpsampleNearest(a, 1), &[a]);
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(d.len() * factor);
        for &v in d {
            out.extend(std::iter::repeat_n(v, factor));
        }
        let mut s = shape;
        *s.last_mut().unwrap() *= factor;
        self.derived(Array::new(s, out), Op::UpsampleNearest(a, factor), &[a])
    }

    /// Windowed overlap-add of `(B, N, T)` frames into `(B, length)` signals.
    pub fn overlap_add(&mut self, frames: Var, plan: Arc<OlaPlan>) -> Var {
        let shape = self.shape(frames).to_vec();
        assert!(
            shape.len() == 3 && shape[1] == plan.fft_size() && shape[2] == plan.frames,
            "overlap_add: frames {shape:?} do not match plan (N={}, T={})",
            plan.fft_size(),
            plan.frames
        );
        let (b, n, t) = (shape[0], shape[1], shape[2]);
        let d = self.value(frames).data();
        let mut out = vec![0.0; b * plan.length];
        for bi in 0..b {
            let src = &d[bi * n * t..(bi + 1) * n * t];
            let dst = &mut out[bi * plan.length..(bi + 1) * plan.length];
            plan.for_each(|j, m, pos, w| dst[pos] += w * src[j * t + m]);
        }
        let value = Array::new(vec![b, plan.length], out);
        self.derived(value, Op::OverlapAdd(frames, plan), &[frames])
    }

    /// Rows of a `(V, W)` table, giving `(ids.len(), W)`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let shape = self.shape(table).to_vec();
        assert!(shape.len() == 2 && !ids.is_empty(), "gather_rows: expected (V, W) table and ids");
        let w = shape[1];
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            assert!(i < shape[0], "gather_rows: id {i} out of range {}", shape[0]);
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let value = Array::new(vec![ids.len(), w], out);
        self.derived(value, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    pub fn custom(&mut self, a: Var, op: Arc<dyn UnaryOp>) -> Var {
        let value = op.forward(self.value(a));
        self.derived(value, Op::Custom(a, op), &[a])
    }

    /// Gradients of scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            for p in self.parents(&node.op) {
                if let Some(buf) = &grads[p.0] {
                    if buf.iter().any(|v| !v.is_finite()) {
                        return Err(GradError::NonFinite { op: node.op.name(), node: i });
                    }
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => {
                    Some(g.map_or_else(|| Array::zeros(n.value.shape()), |d| Array::new(n.value.shape().to_vec(), d)))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, bound: self.bound.clone() })
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MulScalarVar(a, b) | Op::Prelu(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::SwapAxes(a, ..)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanAxis(a, _)
            | Op::RmsAxis(a, _)
            | Op::Softmax(a)
            | Op::Expand(a, ..)
            | Op::UpsampleNearest(a, _)
            | Op::OverlapAdd(a, _)
            | Op::GatherRows(a, _)
            | Op::Custom(a, _) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        add_into(buf!(p), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(buf!(*a), g);
                }
                if self.needs(*b) {
                    buf!(*b).iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = val(*b);
                    buf!(*a).iter_mut().zip(g.iter().zip(vb.iter())).for_each(|(d, (&gv, &y))| *d += gv * y);
                }
                if self.needs(*b) {
                    let va = val(*a);
                    buf!(*b).iter_mut().zip(g.iter().zip(va.iter())).for_each(|(d, (&gv, &x))| *d += gv * x);
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g.iter().zip(vb.iter())).for_each(|(d, (&gv, &y))| *d += gv / y);
                }
                if self.needs(*b) {
                    let out = node.value.data();
                    buf!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(out.iter().zip(vb.iter())))
                        .for_each(|(d, (&gv, (&o, &y)))| *d -= gv * o / y);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    add_into(buf!(*a), g);
                }
            }
            Op::MulScalarVar(a, s) => {
                let c = val(*s)[0];
                if self.needs(*a) {
                    buf!(*a).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c);
                }
                if self.needs(*s) {
                    let dot: f64 = g.iter().zip(val(*a)).map(|(gv, x)| gv * x).sum();
                    buf!(*s)[0] += dot;
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let out = node.value.data();
                    buf!(*a).iter_mut().zip(g.iter().zip(out)).for_each(|(d, (&gv, &o))| *d += gv * o);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = val(*a);
                    buf!(*a).iter_mut().zip(g.iter().zip(x.iter())).for_each(|(d, (&gv, &x))| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d += gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                    });
                }
            }
            Op::Prelu(x, alpha) => {
                let (outer, c, inner) = split_axis(shp(*x), 1);
                let xv = val(*x);
                let av = val(*alpha);
                if self.needs(*x) {
                    let dx = buf!(*x);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                dx[k] += if xv[k] > 0.0 { g[k] } else { av[ch] * g[k] };
                            }
                        }
                    }
                }
                if self.needs(*alpha) {
                    let da = buf!(*alpha);
                    for o in 0..outer {
                        for (ch, dslot) in da.iter_mut().enumerate().take(c) {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                if xv[k] <= 0.0 {
                                    *dslot += g[k] * xv[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if self.needs(*a) {
                    let vb = val(*b);
                    gemm(m, n, k, g, false, &vb, true, 1.0, buf!(*a));
                }
                if self.needs(*b) {
                    let va = val(*a);
                    gemm(k, m, n, &va, true, g, false, 1.0, buf!(*b));
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
                let n = shp(*b)[2];
                if self.needs(*a) {
                    let vb = val(*b);
                    let da = buf!(*a);
                    for i in 0..bs {
                        gemm(m, n, k, &g[i * m * n..], false, &vb[i * k * n..], true, 1.0, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if self.needs(*b) {
                    let va = val(*a);
                    let db = buf!(*b);
                    for i in 0..bs {
                        gemm(k, m, n, &va[i * m * k..], true, &g[i * m * n..], false, 1.0, &mut db[i * k * n..(i + 1) * k * n]);
                    }
                }
            }
            Op::Conv1d { x, w, bias, groups } => {
                let geom = ConvGeom::new(shp(*x), shp(*w), *groups);
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = buf!(*b);
                        for bi in 0..geom.batch {
                            for (co, slot) in db.iter_mut().enumerate() {
                                let base = (bi * geom.cout + co) * geom.len;
                                *slot += g[base..base + geom.len].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let xv = val(*x);
                let wv = val(*w);
                if self.needs(*w) {
                    conv_backward_weight(&geom, &xv, g, buf!(*w));
                }
                if self.needs(*x) {
                    conv_backward_input(&geom, &wv, g, buf!(*x));
                }
            }
            Op::SwapAxes(a, d0, d1) => {
                if self.needs(*a) {
                    let (back, _) = swap_axes(g, node.value.shape(), *d0, *d1);
                    add_into(buf!(*a), &back);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    add_into(buf!(*a), g);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = shp(p)[*axis];
                    if self.needs(p) {
                        let dp = buf!(p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            add_into(&mut dp[o * ext * inner..(o + 1) * ext * inner], src);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let (outer, ext, inner) = split_axis(shp(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let dx = buf!(*x);
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gv = g[0];
                    buf!(*a).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let gv = g[0] / val(*a).len() as f64;
                    buf!(*a).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::MeanAxis(a, axis) => {
                if self.needs(*a) {
                    let (outer, n, inner) = split_axis(shp(*a), *axis);
                    let inv = 1.0 / n as f64;
                    let da = buf!(*a);
                    for o in 0..outer {
                        for s in 0..n {
                            let dst = &mut da[(o * n + s) * inner..(o * n + s + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::RmsAxis(a, axis) => {
                if self.needs(*a) {
                    let (outer, n, inner) = split_axis(shp(*a), *axis);
                    let inv = 1.0 / n as f64;
                    let r = node.value.data();
                    let xv = val(*a);
                    let da = buf!(*a);
                    for o in 0..outer {
                        for s in 0..n {
                            let off = (o * n + s) * inner;
                            for i in 0..inner {
                                let k = o * inner + i;
                                da[off + i] += g[k] * xv[off + i] * inv / r[k];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let n = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let da = buf!(*a);
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Expand(a, axis, size) => {
                if self.needs(*a) {
                    let s = shp(*a);
                    let outer = numel(&s[..*axis]);
                    let inner = numel(&s[*axis..]);
                    let da = buf!(*a);
                    for o in 0..outer {
                        for r in 0..*size {
                            let src = &g[(o * size + r) * inner..(o * size + r + 1) * inner];
                            add_into(&mut da[o * inner..(o + 1) * inner], src);
                        }
                    }
                }
            }
            Op::UpsampleNearest(a, factor) => {
                if self.needs(*a) {
                    let da = buf!(*a);
                    for (d, chunk) in da.iter_mut().zip(g.chunks(*factor)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::OverlapAdd(frames, plan) => {
                if self.needs(*frames) {
                    let s = shp(*frames);
                    let (b, n, t) = (s[0], s[1], s[2]);
                    let df = buf!(*frames);
                    for bi in 0..b {
                        let dst = &mut df[bi * n * t..(bi + 1) * n * t];
                        let src = &g[bi * plan.length..(bi + 1) * plan.length];
                        plan.for_each(|j, m, pos, w| dst[j * t + m] += w * src[pos]);
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                if self.needs(*table) {
                    let w = shp(*table)[1];
                    let dt = buf!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Custom(a, op) => {
                if self.needs(*a) {
                    let input = &self.nodes[a.0].value;
                    op.backward(input, &node.value, g, buf!(*a));
                }
            }
        }
    }
}

fn removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Array>>,
    bound: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of a differentiable leaf; `None` for derived nodes and constants.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter bound on the tape, if it was bound.
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.bound.get(id.0).copied().flatten().and_then(|v| self.wrt(v))
    }
}

pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    k: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], groups: usize) -> Self {
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        assert!(groups > 0 && cin % groups == 0 && cout % groups == 0, "conv1d: channels not divisible by groups");
        assert_eq!(cin / groups, cin_g, "conv1d: weight expects {cin_g} input channels per group, input has {}", cin / groups);
        Self { batch, cin, cout, len, k, groups, cin_g, cout_g: cout / groups, pad_left: (k - 1) / 2 }
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Valid output range for tap `kk`: output t reads input t + kk - pad_left.
    fn tap_range(&self, kk: usize) -> (usize, usize, isize) {
        let shift = kk as isize - self.pad_left as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.len as isize - shift).min(self.len as isize).max(0) as usize;
        (lo, hi, shift)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        // x: (cin_g, len) -> cols: (cin_g * k, len)
        cols.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.cin_g {
            for kk in 0..self.k {
                let (lo, hi, shift) = self.tap_range(kk);
                let row = &mut cols[(ci * self.k + kk) * self.len..(ci * self.k + kk + 1) * self.len];
                let src = &x[ci * self.len..(ci + 1) * self.len];
                for t in lo..hi {
                    row[t] = src[(t as isize + shift) as usize];
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        for ci in 0..self.cin_g {
            for kk in 0..self.k {
                let (lo, hi, shift) = self.tap_range(kk);
                let row = &cols[(ci * self.k + kk) * self.len..(ci * self.k + kk + 1) * self.len];
                let dst = &mut dx[ci * self.len..(ci + 1) * self.len];
                for t in lo..hi {
                    dst[(t as isize + shift) as usize] += row[t];
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let t = g.len;
    if g.depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let src = &x[(b * g.cin + c) * t..(b * g.cin + c + 1) * t];
                let dst = &mut out[(b * g.cout + c) * t..(b * g.cout + c + 1) * t];
                let taps = &w[c * g.k..(c + 1) * g.k];
                for (kk, &wk) in taps.iter().enumerate() {
                    let (lo, hi, shift) = g.tap_range(kk);
                    let s0 = (lo as isize + shift) as usize;
                    for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                        *d += wk * s;
                    }
                }
            }
        }
        return;
    }
    let ck = g.cin_g * g.k;
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; ck * t] };
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let xs = &x[(b * g.cin + gi * g.cin_g) * t..(b * g.cin + (gi + 1) * g.cin_g) * t];
            let wg = &w[gi * g.cout_g * ck..(gi + 1) * g.cout_g * ck];
            let dst = &mut out[(b * g.cout + gi * g.cout_g) * t..(b * g.cout + (gi + 1) * g.cout_g) * t];
            if g.k == 1 {
                gemm(g.cout_g, ck, t, wg, false, xs, false, 0.0, dst);
            } else {
                g.im2col(xs, &mut cols);
                gemm(g.cout_g, ck, t, wg, false, &cols, false, 0.0, dst);
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, x: &[f64], gy: &[f64], dw: &mut [f64]) {
    let t = g.len;
    if g.depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let src = &x[(b * g.cin + c) * t..(b * g.cin + c + 1) * t];
                let gr = &gy[(b * g.cout + c) * t..(b * g.cout + c + 1) * t];
                for kk in 0..g.k {
                    let (lo, hi, shift) = g.tap_range(kk);
                    let s0 = (lo as isize + shift) as usize;
                    let dot: f64 = gr[lo..hi].iter().zip(&src[s0..s0 + (hi - lo)]).map(|(a, b)| a * b).sum();
                    dw[c * g.k + kk] += dot;
                }
            }
        }
        return;
    }
    let ck = g.cin_g * g.k;
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; ck * t] };
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let xs = &x[(b * g.cin + gi * g.cin_g) * t..(b * g.cin + (gi + 1) * g.cin_g) * t];
            let gr = &gy[(b * g.cout + gi * g.cout_g) * t..(b * g.cout + (gi + 1) * g.cout_g) * t];
            let dwg = &mut dw[gi * g.cout_g * ck..(gi + 1) * g.cout_g * ck];
            if g.k == 1 {
                gemm(g.cout_g, t, ck, gr, false, xs, true, 1.0, dwg);
            } else {
                g.im2col(xs, &mut cols);
                gemm(g.cout_g, t, ck, gr, false, &cols, true, 1.0, dwg);
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, w: &[f64], gy: &[f64], dx: &mut [f64]) {
    let t = g.len;
    if g.depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cout {
                let gr = &gy[(b * g.cout + c) * t..(b * g.cout + c + 1) * t];
                let dst = &mut dx[(b * g.cin + c) * t..(b * g.cin + c + 1) * t];
                for kk in 0..g.k {
                    let wk = w[c * g.k + kk];
                    let (lo, hi, shift) = g.tap_range(kk);
                    let s0 = (lo as isize + shift) as usize;
                    for (d, gv) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&gr[lo..hi]) {
                        *d += wk * gv;
                    }
                }
            }
        }
        return;
    }
    let ck = g.cin_g * g.k;
    let mut cols = vec![0.0; ck * t];
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let gr = &gy[(b * g.cout + gi * g.cout_g) * t..(b * g.cout + (gi + 1) * g.cout_g) * t];
            let wg = &w[gi * g.cout_g * ck..(gi + 1) * g.cout_g * ck];
            let dxs = &mut dx[(b * g.cin + gi * g.cin_g) * t..(b * g.cin + (gi + 1) * g.cin_g) * t];
            if g.k == 1 {
                gemm(ck, g.cout_g, t, wg, true, gr, false, 1.0, dxs);
            } else {
                gemm(ck, g.cout_g, t, wg, true, gr, false, 0.0, &mut cols);
                g.col2im(&cols, dxs);
            }
        }
    }
}
