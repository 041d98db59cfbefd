use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Reshape(Var),
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
/// A graph borrows the parameter store it reads from and is discarded after
/// backward.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    track_params: bool,
    strict: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zero when `var` was not reached.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.nodes[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    /// Gradient for a parameter, `None` when the loss did not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Drops gradients for parameters failing `keep`.
    pub fn retain_params(&mut self, store: &ParamStore, keep: impl Fn(super::ParamGroup) -> bool) {
        for (i, g) in self.params.iter_mut().enumerate() {
            if !keep(store.group(ParamId(i))) {
                *g = None;
            }
        }
    }

    /// Adds `scale · other` parameterwise. Both must come from the same store.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                            *a += scale * b;
                        }
                    }
                    None => *mine = Some(t.map(|x| scale * x)),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|t| t.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales parameter gradients so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let mut refs: Vec<&mut Tensor> = self.params.iter_mut().flatten().collect();
        super::clip_global_norm(&mut refs, max_norm)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|t| t.is_finite())
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected rank 2".into(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given strides:
    // a has m·k elements, b has k·n, c has m·n, and the strides describe
    // row-major or transposed row-major views of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let spatial = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.ow {
                            let x = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.ow + oj] = if y >= 0
                                && x >= 0
                                && (y as usize) < self.h
                                && (x as usize) < self.w
                            {
                                img[(ci * self.h + y as usize) * self.w + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let spatial = self.oh * self.ow;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let x = (oj * self.stride + kj) as isize - self.pad as isize;
                            if x < 0 || x as usize >= self.w {
                                continue;
                            }
                            img[(ci * self.h + y as usize) * self.w + x as usize] +=
                                src[oi * self.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = match input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: s.to_vec(),
                reason: "input must be [N, C, H, W]".into(),
            })
        }
    };
    let (o, kc, kh, kw) = match kernel.shape() {
        [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
        s => {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: s.to_vec(),
                reason: "kernel must be [O, C, KH, KW]".into(),
            })
        }
    };
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            shape: input.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    /// A graph over `params` that tracks parameter gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::build(Some(params), true)
    }

    /// A graph over `params` that records nothing for parameters; use for
    /// acting and evaluation.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(Some(params), false)
    }

    /// A graph with no parameter store.
    pub fn standalone() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(params: Option<&'p ParamStore>, track_params: bool) -> Self {
        Self {
            params,
            param_vars: vec![None; params.map_or(0, |p| p.len())],
            nodes: Vec::new(),
            track_params,
            strict: cfg!(debug_assertions),
        }
    }

    /// Enables or disables non-finite checks on every op output. On by
    /// default in debug builds.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf input. With `requires_grad`, [`Graph::backward`] reports its gradient.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id).clone();
        self.nodes.push(Node {
            value: t,
            op: if self.track_params {
                Op::Param
            } else {
                Op::Leaf
            },
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2("add_row", self.value(a))?;
        let rn = self.value(row).len();
        if rn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push("add_row", t, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| c * x);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// `max(a, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        dims2("softmax", self.value(a))?;
        let t = softmax_rows(self.value(a));
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        dims2("log_softmax", self.value(a))?;
        let t = log_softmax_rows(self.value(a));
        self.push("log_softmax", t, Op::LogSoftmax(a), &[a])
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let (m, _) = dims2("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2("concat", self.value(p))?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        self.push("concat", t, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2("slice", self.value(a))?;
        if start >= end || end > n {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: vec![m, n],
                reason: format!("bad column range {start}..{end}"),
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let t = Tensor::new(vec![m, w], data)?;
        self.push("slice", t, Op::Slice(a, start, end), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums of a rank-2 tensor, shape `[m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("sum_cols", self.value(a))?;
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::new(vec![m, 1], data)?;
        self.push("sum_cols", t, Op::SumCols(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let shape = [s[0], s[1..].iter().product::<usize>().max(1)];
        self.reshape(a, &shape)
    }

    /// `out[i] = a[i, idx[i]]`, shape `[m, 1]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("pick", self.value(a))?;
        if idx.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: vec![m, n],
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    extent: n,
                });
            }
            data.push(self.value(a).data()[i * n + j]);
        }
        let t = Tensor::new(vec![m, 1], data)?;
        self.push("pick", t, Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, n) = dims2("gather_rows", self.value(table))?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &j in idx {
            if j >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: j,
                    extent: r,
                });
            }
            data.extend_from_slice(self.value(table).row_slice(j));
        }
        let t = Tensor::new(vec![idx.len().max(1), n], data)?;
        self.push("gather_rows", t, Op::Gather(table, idx.to_vec()), &[table])
    }

    /// 2-D convolution, NCHW input, OIHW kernel, optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv_geom(self.value(input), self.value(kernel), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.o {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(kernel).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let spatial = geom.oh * geom.ow;
        let patch = geom.patch();
        let img_len = geom.c * geom.h * geom.w;
        let out_len = geom.o * spatial;
        let mut out = vec![0.0; geom.n * out_len];
        let mut cols = vec![0.0; patch * spatial];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..geom.n {
                geom.im2col(&x[b * img_len..(b + 1) * img_len], &mut cols);
                gemm(
                    geom.o,
                    patch,
                    spatial,
                    k,
                    (patch as isize, 1),
                    &cols,
                    (spatial as isize, 1),
                    &mut out[b * out_len..(b + 1) * out_len],
                    false,
                );
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for chunk in out.chunks_mut(spatial).enumerate() {
                    let (i, ch) = chunk;
                    let o = i % geom.o;
                    for v in ch.iter_mut() {
                        *v += bd[o];
                    }
                }
            }
        }
        let t = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        fn acc_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let e = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(e);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.data();
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2("matmul", &nodes[a.0].value)?;
                    let (_, nn) = dims2("matmul", &nodes[b.0].value)?;
                    let bd = nodes[b.0].value.data();
                    let ad = nodes[a.0].value.data();
                    // dA = dC · Bᵀ
                    acc_with(&mut grads, nodes, *a, |ga| {
                        gemm(m, nn, k, &g, (nn as isize, 1), bd, (1, nn as isize), ga, true)
                    });
                    // dB = Aᵀ · dC
                    acc_with(&mut grads, nodes, *b, |gb| {
                        gemm(k, m, nn, ad, (1, k as isize), &g, (nn as isize, 1), gb, true)
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, nodes, *a, g.clone());
                    acc(&mut grads, nodes, *b, g);
                }
                Op::AddRow(a, row) => {
                    let n_cols = nodes[row.0].value.len();
                    acc_with(&mut grads, nodes, *row, |gr| {
                        for chunk in g.chunks(n_cols) {
                            for (x, y) in gr.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                    });
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, nodes, *b, g.iter().map(|x| -x).collect());
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    acc(&mut grads, nodes, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                    acc(&mut grads, nodes, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, c) => acc(&mut grads, nodes, *a, g.iter().map(|x| c * x).collect()),
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(
                        &mut grads,
                        nodes,
                        *a,
                        g.iter().zip(x).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(),
                    );
                }
                Op::Tanh(a) => acc(
                    &mut grads,
                    nodes,
                    *a,
                    g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect(),
                ),
                Op::Sigmoid(a) => acc(
                    &mut grads,
                    nodes,
                    *a,
                    g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect(),
                ),
                Op::Log(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut grads, nodes, *a, g.iter().zip(x).map(|(d, x)| d / x).collect());
                }
                Op::Exp(a) => acc(&mut grads, nodes, *a, g.iter().zip(out).map(|(d, y)| d * y).collect()),
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut grads, nodes, *a, g.iter().zip(x).map(|(d, x)| 2.0 * d * x).collect());
                }
                Op::ClampMin(a, floor) => {
                    let x = nodes[a.0].value.data();
                    acc(
                        &mut grads,
                        nodes,
                        *a,
                        g.iter().zip(x).map(|(d, x)| if x > floor { *d } else { 0.0 }).collect(),
                    );
                }
                Op::Softmax(a) => {
                    let cols = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, y), o) in gr.iter().zip(yr).zip(dst.iter_mut()) {
                            *o = y * (d - dot);
                        }
                    }
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let cols = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, y), o) in gr.iter().zip(yr).zip(dst.iter_mut()) {
                            *o = d - y.exp() * s;
                        }
                    }
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let off = offset;
                        acc_with(&mut grads, nodes, *p, |gp| {
                            for r in 0..m {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + off + c];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let n_cols = nodes[a.0].value.cols();
                    let w = end - start;
                    let start = *start;
                    acc_with(&mut grads, nodes, *a, |ga| {
                        for (r, chunk) in g.chunks(w).enumerate() {
                            for (c, v) in chunk.iter().enumerate() {
                                ga[r * n_cols + start + c] += v;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let len = nodes[a.0].value.len();
                    acc(&mut grads, nodes, *a, vec![g[0]; len]);
                }
                Op::Mean(a) => {
                    let len = nodes[a.0].value.len();
                    acc(&mut grads, nodes, *a, vec![g[0] / len as f64; len]);
                }
                Op::SumCols(a) => {
                    let n_cols = nodes[a.0].value.cols();
                    acc(
                        &mut grads,
                        nodes,
                        *a,
                        g.iter().flat_map(|&d| std::iter::repeat_n(d, n_cols)).collect(),
                    );
                }
                Op::Reshape(a) => acc(&mut grads, nodes, *a, g),
                Op::Pick(a, idx) => {
                    let n_cols = nodes[a.0].value.cols();
                    acc_with(&mut grads, nodes, *a, |ga| {
                        for (r, (&j, d)) in idx.iter().zip(&g).enumerate() {
                            ga[r * n_cols + j] += d;
                        }
                    });
                }
                Op::Gather(table, idx) => {
                    let n_cols = nodes[table.0].value.cols();
                    acc_with(&mut grads, nodes, *table, |gt| {
                        for (r, &j) in idx.iter().enumerate() {
                            for c in 0..n_cols {
                                gt[j * n_cols + c] += g[r * n_cols + c];
                            }
                        }
                    });
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let geom = conv_geom(&nodes[input.0].value, &nodes[kernel.0].value, *stride, *pad)?;
                    let spatial = geom.oh * geom.ow;
                    let patch = geom.patch();
                    let img_len = geom.c * geom.h * geom.w;
                    let out_len = geom.o * spatial;
                    if let Some(bv) = bias {
                        acc_with(&mut grads, nodes, *bv, |gb| {
                            for (i, ch) in g.chunks(spatial).enumerate() {
                                gb[i % geom.o] += ch.iter().sum::<f64>();
                            }
                        });
                    }
                    let x = nodes[input.0].value.data();
                    let k = nodes[kernel.0].value.data();
                    let mut cols = vec![0.0; patch * spatial];
                    if nodes[kernel.0].requires_grad {
                        let mut gk = vec![0.0; geom.o * patch];
                        for b in 0..geom.n {
                            geom.im2col(&x[b * img_len..(b + 1) * img_len], &mut cols);
                            // dK += dOut_b · colsᵀ
                            gemm(
                                geom.o,
                                spatial,
                                patch,
                                &g[b * out_len..(b + 1) * out_len],
                                (spatial as isize, 1),
                                &cols,
                                (1, spatial as isize),
                                &mut gk,
                                true,
                            );
                        }
                        acc(&mut grads, nodes, *kernel, gk);
                    }
                    if nodes[input.0].requires_grad {
                        let mut gx = vec![0.0; geom.n * img_len];
                        for b in 0..geom.n {
                            // dcols = Kᵀ · dOut_b
                            gemm(
                                patch,
                                geom.o,
                                spatial,
                                k,
                                (1, patch as isize),
                                &g[b * out_len..(b + 1) * out_len],
                                (spatial as isize, 1),
                                &mut cols,
                                false,
                            );
                            geom.col2im(&cols, &mut gx[b * img_len..(b + 1) * img_len]);
                        }
                        acc(&mut grads, nodes, *input, gx);
                    }
                }
            }
        }

        let mut params = vec![None; self.param_vars.len()];
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads[v.0].take() {
                    params[pid] = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g)?);
                }
            }
        }
        let mut node_grads = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        for (node, g) in self.nodes.iter().zip(grads) {
            shapes.push(node.value.shape().to_vec());
            node_grads.push(match g {
                Some(d) if matches!(node.op, Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), d)?),
                _ => None,
            });
        }
        Ok(Gradients {
            nodes: node_grads,
            shapes,
            params,
        })
    }
}
