//! Tape-based reverse-mode differentiation over [`Array`]s.
//!
//! Every primitive records its inputs (with their version at record time) and
//! whatever forward values its backward rule needs. Node indices are assigned
//! in recording order, so replaying them in reverse index order is a valid
//! reverse topological traversal.

use super::array::{gemm, numel, Array};
use super::optim::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { batched: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    AddBias,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Permute { axes: Vec<usize> },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Softmax { axis: usize },
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { indices: Vec<usize> },
    Conv1d { stride: usize, pad: usize, kernel: usize, cols: Vec<f64> },
    Upsample2,
    AddMask,
    StopGradient,
    StraightThrough,
    Mse,
    SmoothL1 { beta: f64 },
    CrossEntropy { targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    KlDiag,
    InfoNce { tau: f64, mask: Vec<bool>, saved: Box<InfoNceSaved> },
}

#[derive(Debug)]
struct InfoNceSaved {
    u: Vec<f64>,
    v: Vec<f64>,
    norm_a: Vec<f64>,
    norm_b: Vec<f64>,
    row_p: Vec<f64>,
    col_p: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    inputs: Vec<(usize, u32)>,
    version: u32,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients, summed over every binding of the same parameter.
    pub fn params(&self) -> Vec<(ParamId, Array)> {
        let mut out: Vec<(ParamId, Array)> = Vec::new();
        for &(pid, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // odometer increment
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(x[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = if x[base + k * inner] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (x[base + k * inner] - m).exp()
                };
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                out[base + k * inner] /= s;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, inputs, requires_grad)
    }

    fn push_with(&mut self, value: Array, op: Op, inputs: &[Var], requires_grad: bool) -> Var {
        let inputs = inputs.iter().map(|v| (v.0, self.nodes[v.0].version)).collect();
        self.nodes.push(Node { value, op, inputs, version: 0, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_with(value, Op::Leaf, &[], false)
    }

    /// Leaf that receives gradient (inputs of gradient checks, soft inputs).
    pub fn variable(&mut self, value: Array) -> Var {
        self.push_with(value, Op::Leaf, &[], true)
    }

    /// Binds a stored parameter. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if store.is_frozen() {
            self.constant(value)
        } else {
            self.push_with(value, Op::Param(id), &[], true)
        }
    }

    /// Replaces a recorded value in place. Any consumer recorded earlier can
    /// no longer be replayed.
    pub fn overwrite(&mut self, v: Var, value: Array) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "overwrite",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        node.version += 1;
        Ok(())
    }

    // ----- linear algebra -----

    /// `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` or `[b,m,k]x[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (value, batched) = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = *sa.last().unwrap();
                if sb[0] != k {
                    return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
                }
                let m = numel(&sa[..sa.len() - 1]);
                let n = sb[1];
                let mut out = vec![0.0; m * n];
                gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, false, &mut out, 0.0);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                (Array::from_parts(shape, out), false)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
                }
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = vec![0.0; bt * m * n];
                let (da, db) = (self.value(a).data(), self.value(b).data());
                for i in 0..bt {
                    gemm(
                        &da[i * m * k..(i + 1) * m * k],
                        &db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        false,
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                (Array::from_parts(vec![bt, m, n], out), true)
            }
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        Ok(self.push(value, Op::MatMul { batched }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar, &[a])
    }

    /// `x[..., n] + b[n]`, broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (r, bb) in row.iter_mut().zip(&bias) {
                *r += bb;
            }
        }
        Ok(self.push(v, Op::AddBias, &[x, b]))
    }

    // ----- structural -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(self.push(Array::from_parts(shape, out), Op::Concat { axis }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Array::from_parts(oshape, out), Op::Slice { axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{shape:?} by {axes:?}")));
        }
        let (oshape, data) = permute_data(self.value(x).data(), &shape, axes);
        Ok(self.push(Array::from_parts(oshape, data), Op::Permute { axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(x, &axes)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::SumAll, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Array::scalar(s), Op::MeanAll, &[x])
    }

    /// Sums out `axis`; a fully reduced result has shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(Array::from_parts(oshape, out), Op::SumAxis { axis }, &[x]))
    }

    // ----- pointwise -----

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let out = softmax_forward(self.value(x).data(), &shape, axis);
        Ok(self.push(Array::from_parts(shape, out), Op::Softmax { axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = d.len() / n;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(Array::from_parts(shape, out), Op::LayerNorm { xhat, rstd }, &[x, gamma, beta]))
    }

    /// Gathers rows of `table` (`[V, w]`) into `[indices.len(), w]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() {
            return Err(Error::shape("embedding", format!("table {shape:?}, {} indices", indices.len())));
        }
        let (v, w) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("index {bad} >= {v}")));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        Ok(self.push(
            Array::from_parts(vec![indices.len(), w], out),
            Op::Embedding { indices: indices.to_vec() },
            &[table],
        ))
    }

    /// Temporal convolution of `x: [B, T, C_in]` with `w: [kernel*C_in, C_out]`
    /// (row `k*C_in + c` holds tap `k` of input channel `c`) and `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != kernel * xs[2] || self.shape(b) != [ws[1]] || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("x {xs:?}, w {ws:?}, b {:?}, kernel {kernel}", self.shape(b)),
            ));
        }
        let (bsz, t_in, c_in) = (xs[0], xs[1], xs[2]);
        let c_out = ws[1];
        if t_in + 2 * pad < kernel {
            return Err(Error::shape("conv1d", format!("length {t_in} too short for kernel {kernel}")));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let kc = kernel * c_in;
        let mut cols = vec![0.0; bsz * t_out * kc];
        let xd = self.value(x).data();
        for bi in 0..bsz {
            for t in 0..t_out {
                let row = &mut cols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t_in {
                        let s = (bi * t_in + src as usize) * c_in;
                        row[k * c_in..(k + 1) * c_in].copy_from_slice(&xd[s..s + c_in]);
                    }
                }
            }
        }
        let mut out = vec![0.0; bsz * t_out * c_out];
        gemm(&cols, self.value(w).data(), bsz * t_out, kc, c_out, false, false, &mut out, 0.0);
        let bias = self.value(b).data();
        for row in out.chunks_mut(c_out) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(
            Array::from_parts(vec![bsz, t_out, c_out], out),
            Op::Conv1d { stride, pad, kernel, cols },
            &[x, w, b],
        ))
    }

    /// Nearest-neighbour ×2 upsampling along axis 1 of `[B, T, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2", format!("{s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * 2 * t * c);
        for bi in 0..b {
            for ti in 0..t {
                let row = &d[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                out.extend_from_slice(row);
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(Array::from_parts(vec![b, 2 * t, c], out), Op::Upsample2, &[x]))
    }

    /// Adds a constant mask whose shape equals `x`'s shape or a suffix of it.
    /// Entries may be `-inf`.
    pub fn add_mask(&mut self, x: Var, mask: &Array) -> Result<Var> {
        let xs = self.shape(x);
        let ms = mask.shape();
        if ms.len() > xs.len() || xs[xs.len() - ms.len()..] != *ms {
            return Err(Error::shape("add_mask", format!("{xs:?} + mask {ms:?}")));
        }
        let mut v = self.value(x).clone();
        let md = mask.data();
        for chunk in v.data_mut().chunks_mut(md.len()) {
            for (a, m) in chunk.iter_mut().zip(md) {
                *a += m;
            }
        }
        Ok(self.push(v, Op::AddMask, &[x]))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push_with(v, Op::StopGradient, &[x], false)
    }

    /// Forward value is exactly `quantized`; the gradient passes to `z`
    /// unchanged and nothing reaches `quantized`.
    pub fn straight_through(&mut self, z: Var, quantized: Var) -> Result<Var> {
        self.same_shape("straight_through", z, quantized)?;
        let v = self.value(quantized).clone();
        let rg = self.nodes[z.0].requires_grad;
        Ok(self.push_with(v, Op::StraightThrough, &[z], rg))
    }

    // ----- losses -----

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        self.check_finite("mse", &[a, b])?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / va.len() as f64;
        Ok(self.push(Array::scalar(v), Op::Mse, &[a, b]))
    }

    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("smooth_l1", a, b)?;
        self.check_finite("smooth_l1", &[a, b])?;
        let beta = 1.0;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| smooth_l1(x - y, beta)).sum();
        let v = s / va.len() as f64;
        Ok(self.push(Array::scalar(v), Op::SmoothL1 { beta }, &[a, b]))
    }

    /// Mean cross-entropy over rows of `logits: [n, V]` whose target is `Some`.
    /// `-inf` logits are excluded from the partition function.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        let (n, vsz) = (s[0], s[1]);
        if self.value(logits).data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { what: "cross_entropy logits".into() });
        }
        let probs = softmax_forward(self.value(logits).data(), &s, 1);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vsz {
                return Err(Error::shape("cross_entropy", format!("target {t} >= {vsz}")));
            }
            let p = probs[i * vsz + t];
            if p <= 0.0 {
                return Err(Error::NonFinite { what: format!("cross_entropy: target {t} of row {i} is masked") });
            }
            total -= p.ln();
            count += 1;
        }
        let _ = n;
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Array::scalar(v),
            Op::CrossEntropy { targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    /// `KL(N(mu1, exp(logvar1)) || N(mu2, exp(logvar2)))`, summed over the
    /// latent axis and averaged over rows.
    pub fn kl_diag(&mut self, mu1: Var, logvar1: Var, mu2: Var, logvar2: Var) -> Result<Var> {
        for v in [logvar1, mu2, logvar2] {
            self.same_shape("kl_diag", mu1, v)?;
        }
        self.check_finite("kl_diag", &[mu1, logvar1, mu2, logvar2])?;
        let rows = self.value(mu1).rows();
        let (m1, l1, m2, l2) = (
            self.value(mu1).data(),
            self.value(logvar1).data(),
            self.value(mu2).data(),
            self.value(logvar2).data(),
        );
        let mut s = 0.0;
        for i in 0..m1.len() {
            let d = m1[i] - m2[i];
            s += 0.5 * (l2[i] - l1[i] + (l1[i].exp() + d * d) / l2[i].exp() - 1.0);
        }
        Ok(self.push(Array::scalar(s / rows as f64), Op::KlDiag, &[mu1, logvar1, mu2, logvar2]))
    }

    /// Symmetric InfoNCE over cosine similarities of paired rows of `a` and `b`
    /// at temperature `tau`. `mask[i*n+j]` admits pair `(i, j)` into the
    /// partition functions; the diagonal is always admitted.
    pub fn info_nce(&mut self, a: Var, b: Var, tau: f64, mask: &[bool]) -> Result<Var> {
        self.same_shape("info_nce", a, b)?;
        self.check_finite("info_nce", &[a, b])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[0] || tau <= 0.0 {
            return Err(Error::shape("info_nce", format!("embeddings {s:?}, mask {}", mask.len())));
        }
        let (n, k) = (s[0], s[1]);
        let mut mask = mask.to_vec();
        for i in 0..n {
            mask[i * n + i] = true;
        }
        let normalize = |d: &[f64]| {
            let mut out = d.to_vec();
            let mut norms = vec![0.0; n];
            for i in 0..n {
                let nr = d[i * k..(i + 1) * k].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                norms[i] = nr;
                for c in 0..k {
                    out[i * k + c] /= nr;
                }
            }
            (out, norms)
        };
        let (u, norm_a) = normalize(self.value(a).data());
        let (v, norm_b) = normalize(self.value(b).data());
        let mut sim = vec![0.0; n * n];
        gemm(&u, &v, n, k, n, false, true, &mut sim, 0.0);
        for x in sim.iter_mut() {
            *x /= tau;
        }
        let mut row_p = vec![0.0; n * n];
        let mut col_p = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let m = (0..n).filter(|&j| mask[i * n + j]).map(|j| sim[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                if mask[i * n + j] {
                    let e = (sim[i * n + j] - m).exp();
                    row_p[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                row_p[i * n + j] /= z;
            }
            loss += 0.5 * (m + z.ln() - sim[i * n + i]) / n as f64;
        }
        for j in 0..n {
            let m = (0..n).filter(|&i| mask[i * n + j]).map(|i| sim[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                if mask[i * n + j] {
                    let e = (sim[i * n + j] - m).exp();
                    col_p[i * n + j] = e;
                    z += e;
                }
            }
            for i in 0..n {
                col_p[i * n + j] /= z;
            }
            loss += 0.5 * (m + z.ln() - sim[j * n + j]) / n as f64;
        }
        let saved = Box::new(InfoNceSaved { u, v, norm_a, norm_b, row_p, col_p });
        Ok(self.push(Array::scalar(loss), Op::InfoNce { tau, mask, saved }, &[a, b]))
    }

    fn check_finite(&self, what: &str, vars: &[Var]) -> Result<()> {
        if vars.iter().any(|v| !self.value(*v).all_finite()) {
            return Err(Error::NonFinite { what: what.to_string() });
        }
        Ok(())
    }

    // ----- backward -----

    /// Reverse pass seeded with ones of the output's shape.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let seed = Array::ones(self.shape(out));
        self.backward_with_seed(out, seed)
    }

    pub fn backward_with_seed(&self, out: Var, seed: Array) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape("backward", format!("seed {:?} for output {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Array>> = (0..=out.0).map(|_| None).collect();
        let mut params = Vec::new();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            let Some(g) = grads[idx].take() else { continue };
            for &(inp, ver) in &node.inputs {
                if self.nodes[inp].version != ver {
                    return Err(Error::TapeMutated { node: inp });
                }
            }
            for (inp, ig) in self.node_backward(node, &g) {
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, node: &Node, i: usize) -> bool {
        self.nodes[node.inputs[i].0].requires_grad
    }

    fn input_value(&self, node: &Node, i: usize) -> &Array {
        &self.nodes[node.inputs[i].0].value
    }

    fn node_backward(&self, node: &Node, g: &Array) -> Vec<(usize, Array)> {
        let ins: Vec<usize> = node.inputs.iter().map(|p| p.0).collect();
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient => {}
            Op::MatMul { batched } => {
                let a = self.input_value(node, 0);
                let b = self.input_value(node, 1);
                if !*batched {
                    let k = *a.shape().last().unwrap();
                    let m = a.len() / k;
                    let n = b.shape()[1];
                    if self.wants(node, 0) {
                        let mut ga = vec![0.0; m * k];
                        gemm(gd, b.data(), m, n, k, false, true, &mut ga, 0.0);
                        out.push((ins[0], Array::from_parts(a.shape().to_vec(), ga)));
                    }
                    if self.wants(node, 1) {
                        let mut gb = vec![0.0; k * n];
                        gemm(a.data(), gd, k, m, n, true, false, &mut gb, 0.0);
                        out.push((ins[1], Array::from_parts(b.shape().to_vec(), gb)));
                    }
                } else {
                    let (bt, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                    if self.wants(node, 0) {
                        let mut ga = vec![0.0; bt * m * k];
                        for i in 0..bt {
                            gemm(
                                &gd[i * m * n..(i + 1) * m * n],
                                &b.data()[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                false,
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                0.0,
                            );
                        }
                        out.push((ins[0], Array::from_parts(a.shape().to_vec(), ga)));
                    }
                    if self.wants(node, 1) {
                        let mut gb = vec![0.0; bt * k * n];
                        for i in 0..bt {
                            gemm(
                                &a.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                0.0,
                            );
                        }
                        out.push((ins[1], Array::from_parts(b.shape().to_vec(), gb)));
                    }
                }
            }
            Op::Add => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.clone()));
            }
            Op::Sub => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.map(|v| -v)));
            }
            Op::Mul => {
                let a = self.input_value(node, 0);
                let b = self.input_value(node, 1);
                if self.wants(node, 0) {
                    out.push((ins[0], g.zip_map(b, |x, y| x * y)));
                }
                if self.wants(node, 1) {
                    out.push((ins[1], g.zip_map(a, |x, y| x * y)));
                }
            }
            Op::Scale(s) => out.push((ins[0], g.map(|v| v * s))),
            Op::AddScalar => out.push((ins[0], g.clone())),
            Op::AddBias => {
                out.push((ins[0], g.clone()));
                if self.wants(node, 1) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((ins[1], Array::from_parts(vec![n], gb)));
                }
            }
            Op::Concat { axis } => {
                let shape = g.shape().to_vec();
                let (outer, total, inner) = axis_split(&shape, *axis);
                let mut offset = 0;
                for (pi, &inp) in ins.iter().enumerate() {
                    let pshape = self.nodes[inp].value.shape().to_vec();
                    let n = pshape[*axis];
                    if self.wants(node, pi) {
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        out.push((inp, Array::from_parts(pshape, part)));
                    }
                    offset += n;
                }
            }
            Op::Slice { axis, start } => {
                let ishape = self.input_value(node, 0).shape().to_vec();
                let (outer, n, inner) = axis_split(&ishape, *axis);
                let len = g.shape()[*axis];
                let mut gi = vec![0.0; numel(&ishape)];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((ins[0], Array::from_parts(ishape, gi)));
            }
            Op::Reshape => {
                let ishape = self.input_value(node, 0).shape().to_vec();
                out.push((ins[0], Array::from_parts(ishape, gd.to_vec())));
            }
            Op::Permute { axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inv);
                out.push((ins[0], Array::from_parts(shape, data)));
            }
            Op::SumAll => {
                let s = self.input_value(node, 0).shape().to_vec();
                out.push((ins[0], Array::full(&s, gd[0])));
            }
            Op::MeanAll => {
                let s = self.input_value(node, 0).shape().to_vec();
                let n = numel(&s) as f64;
                out.push((ins[0], Array::full(&s, gd[0] / n)));
            }
            Op::SumAxis { axis } => {
                let s = self.input_value(node, 0).shape().to_vec();
                let (outer, n, inner) = axis_split(&s, *axis);
                let mut gi = vec![0.0; numel(&s)];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        gi[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((ins[0], Array::from_parts(s, gi)));
            }
            Op::Relu => {
                let x = self.input_value(node, 0);
                out.push((ins[0], g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            Op::Gelu => {
                let x = self.input_value(node, 0);
                out.push((ins[0], g.zip_map(x, |gv, xv| gv * gelu_grad(xv))));
            }
            Op::Sigmoid => {
                out.push((ins[0], g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))));
            }
            Op::Exp => {
                out.push((ins[0], g.zip_map(&node.value, |gv, y| gv * y)));
            }
            Op::Softmax { axis } => {
                let y = node.value.data();
                let shape = g.shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..n {
                            let p = base + k * inner;
                            gi[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                out.push((ins[0], Array::from_parts(shape, gi)));
            }
            Op::LayerNorm { xhat, rstd } => {
                let gamma = self.input_value(node, 1).data();
                let n = gamma.len();
                let rows = gd.len() / n;
                if self.wants(node, 0) {
                    let mut gx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = gd[r * n + c] * gamma[c];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = gd[r * n + c] * gamma[c];
                            gx[r * n + c] = rstd[r] / n as f64 * (n as f64 * dh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                    out.push((ins[0], Array::from_parts(g.shape().to_vec(), gx)));
                }
                if self.wants(node, 1) {
                    let mut gg = vec![0.0; n];
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += gd[r * n + c] * xhat[r * n + c];
                        }
                    }
                    out.push((ins[1], Array::from_parts(vec![n], gg)));
                }
                if self.wants(node, 2) {
                    let mut gb = vec![0.0; n];
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] += gd[r * n + c];
                        }
                    }
                    out.push((ins[2], Array::from_parts(vec![n], gb)));
                }
            }
            Op::Embedding { indices } => {
                let ts = self.input_value(node, 0).shape().to_vec();
                let w = ts[1];
                let mut gt = vec![0.0; numel(&ts)];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..w {
                        gt[i * w + c] += gd[r * w + c];
                    }
                }
                out.push((ins[0], Array::from_parts(ts, gt)));
            }
            Op::Conv1d { stride, pad, kernel, cols } => {
                let xs = self.input_value(node, 0).shape().to_vec();
                let wv = self.input_value(node, 1);
                let (bsz, t_in, c_in) = (xs[0], xs[1], xs[2]);
                let c_out = wv.shape()[1];
                let t_out = g.shape()[1];
                let kc = kernel * c_in;
                if self.wants(node, 0) {
                    let mut gcols = vec![0.0; bsz * t_out * kc];
                    gemm(gd, wv.data(), bsz * t_out, c_out, kc, false, true, &mut gcols, 0.0);
                    let mut gx = vec![0.0; numel(&xs)];
                    for bi in 0..bsz {
                        for t in 0..t_out {
                            let row = &gcols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                            for k in 0..*kernel {
                                let src = (t * stride + k) as isize - *pad as isize;
                                if src >= 0 && (src as usize) < t_in {
                                    let s = (bi * t_in + src as usize) * c_in;
                                    for c in 0..c_in {
                                        gx[s + c] += row[k * c_in + c];
                                    }
                                }
                            }
                        }
                    }
                    out.push((ins[0], Array::from_parts(xs.clone(), gx)));
                }
                if self.wants(node, 1) {
                    let mut gw = vec![0.0; kc * c_out];
                    gemm(cols, gd, kc, bsz * t_out, c_out, true, false, &mut gw, 0.0);
                    out.push((ins[1], Array::from_parts(vec![kc, c_out], gw)));
                }
                if self.wants(node, 2) {
                    let mut gb = vec![0.0; c_out];
                    for row in gd.chunks(c_out) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((ins[2], Array::from_parts(vec![c_out], gb)));
                }
            }
            Op::Upsample2 => {
                let s = self.input_value(node, 0).shape().to_vec();
                let (b, t, c) = (s[0], s[1], s[2]);
                let mut gi = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            gi[(bi * t + ti) * c + ci] = gd[(bi * 2 * t + 2 * ti) * c + ci] + gd[(bi * 2 * t + 2 * ti + 1) * c + ci];
                        }
                    }
                }
                out.push((ins[0], Array::from_parts(s, gi)));
            }
            Op::AddMask | Op::StraightThrough => out.push((ins[0], g.clone())),
            Op::Mse => {
                let a = self.input_value(node, 0);
                let b = self.input_value(node, 1);
                let f = 2.0 * gd[0] / a.len() as f64;
                let ga = a.zip_map(b, |x, y| f * (x - y));
                if self.wants(node, 1) {
                    out.push((ins[1], ga.map(|v| -v)));
                }
                out.push((ins[0], ga));
            }
            Op::SmoothL1 { beta } => {
                let a = self.input_value(node, 0);
                let b = self.input_value(node, 1);
                let f = gd[0] / a.len() as f64;
                let ga = a.zip_map(b, |x, y| f * ((x - y) / beta).clamp(-1.0, 1.0));
                if self.wants(node, 1) {
                    out.push((ins[1], ga.map(|v| -v)));
                }
                out.push((ins[0], ga));
            }
            Op::CrossEntropy { targets, probs, count } => {
                let s = self.input_value(node, 0).shape().to_vec();
                let vsz = s[1];
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let f = gd[0] / *count as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..vsz {
                            gl[i * vsz + c] = f * probs[i * vsz + c];
                        }
                        gl[i * vsz + t] -= f;
                    }
                }
                out.push((ins[0], Array::from_parts(s, gl)));
            }
            Op::KlDiag => {
                let m1 = self.input_value(node, 0);
                let l1 = self.input_value(node, 1);
                let m2 = self.input_value(node, 2);
                let l2 = self.input_value(node, 3);
                let f = gd[0] / m1.rows() as f64;
                let n = m1.len();
                let (mut gm1, mut gl1, mut gm2, mut gl2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let d = m1.data()[i] - m2.data()[i];
                    let e1 = l1.data()[i].exp();
                    let e2 = l2.data()[i].exp();
                    gm1[i] = f * d / e2;
                    gm2[i] = -f * d / e2;
                    gl1[i] = f * 0.5 * (e1 / e2 - 1.0);
                    gl2[i] = f * 0.5 * (1.0 - (e1 + d * d) / e2);
                }
                let shape = m1.shape().to_vec();
                for (slot, gv) in [gm1, gl1, gm2, gl2].into_iter().enumerate() {
                    out.push((ins[slot], Array::from_parts(shape.clone(), gv)));
                }
            }
            Op::InfoNce { tau, mask, saved } => {
                let a = self.input_value(node, 0);
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let f = gd[0] * 0.5 / n as f64;
                let mut gs = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let p = i * n + j;
                        if mask[p] {
                            gs[p] = f * (saved.row_p[p] + saved.col_p[p]);
                        }
                        if i == j {
                            gs[p] -= 2.0 * f;
                        }
                    }
                }
                for v in gs.iter_mut() {
                    *v /= tau;
                }
                let back = |gn: Vec<f64>, unit: &[f64], norms: &[f64]| {
                    let mut gx = vec![0.0; n * k];
                    for i in 0..n {
                        let u = &unit[i * k..(i + 1) * k];
                        let gr = &gn[i * k..(i + 1) * k];
                        let dot: f64 = u.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..k {
                            gx[i * k + c] = (gr[c] - u[c] * dot) / norms[i];
                        }
                    }
                    gx
                };
                if self.wants(node, 0) {
                    let mut gu = vec![0.0; n * k];
                    gemm(&gs, &saved.v, n, n, k, false, false, &mut gu, 0.0);
                    let gx = back(gu, &saved.u, &saved.norm_a);
                    out.push((ins[0], Array::from_parts(vec![n, k], gx)));
                }
                if self.wants(node, 1) {
                    let mut gv = vec![0.0; n * k];
                    gemm(&gs, &saved.u, n, n, k, true, false, &mut gv, 0.0);
                    let gx = back(gv, &saved.v, &saved.norm_b);
                    out.push((ins[1], Array::from_parts(vec![n, k], gx)));
                }
            }
        }
        out
    }
}
