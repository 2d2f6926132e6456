//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value computed during one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and the backward sweep is a single reverse scan.
//!
//! Gradients can be requested with respect to any leaf, parameters and inputs
//! alike. [`Graph::backward_wrt`] restricts the sweep to nodes that depend on
//! the requested leaves, which skips the parameter-gradient products when only
//! an input gradient is needed.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_into, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { input: Var, bias: Var, inner: usize },
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, pad: usize, cols: Vec<T> },
    MaxPool2x2 { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Log(Var),
    LogClamped(Var, T),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanLeading(Var),
    LogSoftmax(Var),
    Pick { input: Var, indices: Vec<usize> },
    MaskMul { input: Var, mask: Vec<T> },
    Reshape(Var),
    Concat(Vec<Var>),
    Tile { input: Var, times: usize },
    SliceRows { input: Var, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward computation and its tape.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` is not a
    /// differentiated leaf or the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `v` into the accumulator of `tensor`. A leaf the
    /// loss does not depend on contributes zeros.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.wrt(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                if tensor.grad().is_none() {
                    tensor.zero_grad();
                }
                Ok(())
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), checked: false }
    }

    /// In checked mode every leaf and op output is verified finite.
    pub fn checked() -> Self {
        Graph { nodes: Vec::new(), checked: true }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.checked && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite value produced by {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf holding a copy of `t`; it is differentiated iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.input(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err!("leaf shape {:?} needs {} values, got {}", shape, numel(shape), data.len()));
        }
        if self.checked && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("non-finite leaf value".into()));
        }
        self.nodes.push(Node { shape: shape.to_vec(), value: data, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias` (length = extent of axis 1) to every position of `input`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(shape_err!("bias {:?} does not match axis 1 of {:?}", self.shape(bias), shape));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias);
        let value = self
            .value(input)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[(i / inner) % channels])
            .collect();
        self.push(shape, value, Op::AddBias { input, bias, inner }, &[input, bias])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), false, self.value(b), false, &mut out, m, k, n, false);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Stride-1 convolution, NCHW input, OIHW kernel, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(shape_err!("conv2d: input {:?} kernel {:?}", si, sk));
        }
        let geo = ConvGeometry::new(&si, &sk, pad)?;
        let cols = geo.im2col(self.value(input));
        let mut tmp = vec![T::zero(); geo.o * geo.n * geo.p];
        matmul_into(self.value(kernel), false, &cols, false, &mut tmp, geo.o, geo.ckk, geo.n * geo.p, false);
        let mut out = vec![T::zero(); tmp.len()];
        for o in 0..geo.o {
            for n in 0..geo.n {
                let src = &tmp[o * geo.n * geo.p + n * geo.p..][..geo.p];
                out[(n * geo.o + o) * geo.p..][..geo.p].copy_from_slice(src);
            }
        }
        let keep_cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        self.push(
            vec![geo.n, geo.o, geo.ho, geo.wo],
            out,
            Op::Conv2d { input, kernel, pad, cols: keep_cols },
            &[input, kernel],
        )
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(shape_err!("maxpool2x2 needs NCHW with even H, W; got {:?}", s));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![s[0], s[1], ho, wo], out, Op::MaxPool2x2 { input, argmax }, &[input])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), |x| x.ln())
    }

    /// `ln(max(x, floor))`; zero derivative below the floor.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Result<Var> {
        self.map(a, Op::LogClamped(a, floor), |x| x.max(floor).ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s: T = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s / T::lit(n as f64)], Op::Mean(a), &[a])
    }

    /// Sums over the last axis: `[.., k] -> [..]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let k = *s.last().ok_or_else(|| shape_err!("sum_rows of a scalar"))?;
        let value = if k == 0 {
            vec![T::zero(); numel(&s[..s.len() - 1])]
        } else {
            self.value(a).chunks_exact(k).map(|r| r.iter().copied().sum()).collect()
        };
        self.push(s[..s.len() - 1].to_vec(), value, Op::SumRows(a), &[a])
    }

    /// Averages over the leading axis: `[a, ..] -> [..]`.
    pub fn mean_leading(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(shape_err!("mean_leading needs a non-empty leading axis, got {:?}", s));
        }
        let inner = numel(&s[1..]);
        let mut out = vec![T::zero(); inner];
        for chunk in self.value(a).chunks_exact(inner.max(1)) {
            add_into(&mut out, chunk);
        }
        let inv = T::one() / T::lit(s[0] as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        self.push(s[1..].to_vec(), out, Op::MeanLeading(a), &[a])
    }

    /// Row-wise log-softmax over the last axis, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let k = *s.last().ok_or_else(|| shape_err!("log_softmax of a scalar"))?;
        if k == 0 {
            return Err(shape_err!("log_softmax over an empty axis"));
        }
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.push(s, out, Op::LogSoftmax(a), &[a])
    }

    /// Per-row element selection: `[r, k] -> [r]` with `out[i] = a[i, indices[i]]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(shape_err!("pick: {:?} with {} indices", s, indices.len()));
        }
        let k = s[1];
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Data(format!("index {bad} out of range for {k} columns")));
        }
        let x = self.value(a);
        let value = indices.iter().enumerate().map(|(r, &i)| x[r * k + i]).collect();
        self.push(vec![s[0]], value, Op::Pick { input: a, indices: indices.to_vec() }, &[a])
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err!("mask of {} values for {:?}", mask.len(), self.shape(a)));
        }
        let value = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::MaskMul { input: a, mask }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(a), &[a])
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = self.shape(*first).get(1..).map(<[usize]>::to_vec).unwrap_or_default();
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} does not match trailing {:?}", s, tail));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(shape, value, Op::Concat(parts.to_vec()), parts)
    }

    /// Repeats the whole tensor `times` times along axis 0.
    pub fn tile(&mut self, a: Var, times: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if shape.is_empty() || times == 0 {
            return Err(shape_err!("tile: {:?} x {}", shape, times));
        }
        shape[0] *= times;
        let src = self.value(a);
        let mut value = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            value.extend_from_slice(src);
        }
        self.push(shape, value, Op::Tile { input: a, times }, &[a])
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err!("slice_rows {start}..{} of {:?}", start + len, shape));
        }
        let row: usize = shape[1..].iter().product();
        let value = self.value(a)[start * row..(start + len) * row].to_vec();
        shape[0] = len;
        self.push(shape, value, Op::SliceRows { input: a, start }, &[a])
    }

    /// Reverse sweep from a scalar `loss` over every differentiated node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let relevant: Vec<bool> = self.nodes[..=loss.0].iter().map(|n| n.requires_grad).collect();
        self.sweep(loss, relevant)
    }

    /// Reverse sweep restricted to nodes that depend on one of `targets`.
    pub fn backward_wrt(&self, loss: Var, targets: &[Var]) -> Result<Gradients<T>> {
        let mut relevant = vec![false; loss.0 + 1];
        for t in targets {
            if t.0 <= loss.0 && self.nodes[t.0].requires_grad {
                relevant[t.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = inputs_of(&self.nodes[i].op).iter().any(|v| relevant[v.0]);
            }
        }
        self.sweep(loss, relevant)
    }

    fn sweep(&self, loss: Var, relevant: Vec<bool>) -> Result<Gradients<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if relevant[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &relevant, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], relevant: &[bool], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let want = |v: Var| relevant[v.0];
        macro_rules! slot {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[$v.0].value.len()])
            };
        }
        // Elementwise contribution `f(g_i, other_i)`, written directly when the slot is empty.
        macro_rules! emit {
            ($v:expr, $other:expr, $f:expr) => {{
                let f = $f;
                match &mut grads[$v.0] {
                    Some(d) => d.iter_mut().zip(g).zip($other).for_each(|((d, &s), &y)| *d = *d + f(s, y)),
                    empty @ None => *empty = Some(g.iter().zip($other).map(|(&s, &y)| f(s, y)).collect()),
                }
            }};
        }
        macro_rules! pass {
            ($v:expr, $src:expr) => {{
                match &mut grads[$v.0] {
                    Some(d) => add_into(d, $src),
                    empty @ None => *empty = Some($src.to_vec()),
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    pass!(a, g);
                }
                if want(*b) {
                    pass!(b, g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    pass!(a, g);
                }
                if want(*b) {
                    slot!(b).iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    emit!(a, val(*b), |s: T, y: T| s * y);
                }
                if want(*b) {
                    emit!(b, val(*a), |s: T, x: T| s * x);
                }
            }
            Op::AddBias { input, bias, inner } => {
                if want(*input) {
                    pass!(input, g);
                }
                if want(*bias) {
                    let db = slot!(bias);
                    let channels = db.len();
                    for (i, &s) in g.iter().enumerate() {
                        let c = (i / inner) % channels;
                        db[c] = db[c] + s;
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    emit!(a, g, |s: T, _: T| s * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if want(*a) {
                    pass!(a, g);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let vb = val(*b);
                    matmul_into(g, false, vb, true, slot!(a), m, n, k, true);
                }
                if want(*b) {
                    let va = val(*a);
                    matmul_into(va, true, g, false, slot!(b), k, m, n, true);
                }
            }
            Op::Conv2d { input, kernel, pad, cols } => {
                let geo = ConvGeometry::new(&self.nodes[input.0].shape, &self.nodes[kernel.0].shape, *pad)
                    .expect("validated in forward");
                let np = geo.n * geo.p;
                let mut dtmp = vec![T::zero(); geo.o * np];
                for n in 0..geo.n {
                    for o in 0..geo.o {
                        let src = &g[(n * geo.o + o) * geo.p..][..geo.p];
                        dtmp[o * np + n * geo.p..][..geo.p].copy_from_slice(src);
                    }
                }
                if want(*kernel) {
                    matmul_into(&dtmp, false, cols, true, slot!(kernel), geo.o, np, geo.ckk, true);
                }
                if want(*input) {
                    let mut dcols = vec![T::zero(); geo.ckk * np];
                    matmul_into(val(*kernel), true, &dtmp, false, &mut dcols, geo.ckk, geo.o, np, false);
                    geo.col2im_add(&dcols, slot!(input));
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if want(*input) {
                    let dx = slot!(input);
                    for (&j, &s) in argmax.iter().zip(g) {
                        dx[j] = dx[j] + s;
                    }
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    emit!(a, val(*a), |s: T, x: T| if x > T::zero() { s } else { T::zero() });
                }
            }
            Op::Log(a) => {
                if want(*a) {
                    emit!(a, val(*a), |s: T, x: T| s / x);
                }
            }
            Op::LogClamped(a, floor) => {
                if want(*a) {
                    emit!(a, val(*a), |s: T, x: T| if x > *floor { s / x } else { T::zero() });
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    emit!(a, &node.value, |s: T, y: T| s * y);
                }
            }
            Op::Square(a) => {
                if want(*a) {
                    let two = T::lit(2.0);
                    emit!(a, val(*a), |s: T, x: T| two * s * x);
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    slot!(a).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let d0 = g[0] / T::lit(self.nodes[a.0].value.len() as f64);
                    slot!(a).iter_mut().for_each(|d| *d = *d + d0);
                }
            }
            Op::SumRows(a) => {
                if want(*a) {
                    let k = *self.nodes[a.0].shape.last().expect("validated");
                    if k > 0 {
                        for (row, &s) in slot!(a).chunks_exact_mut(k).zip(g) {
                            row.iter_mut().for_each(|d| *d = *d + s);
                        }
                    }
                }
            }
            Op::MeanLeading(a) => {
                if want(*a) {
                    let lead = self.nodes[a.0].shape[0];
                    let inv = T::one() / T::lit(lead as f64);
                    for chunk in slot!(a).chunks_exact_mut(g.len().max(1)) {
                        chunk.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * inv);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if want(*a) {
                    let k = *node.shape.last().expect("validated");
                    for ((drow, grow), yrow) in slot!(a).chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(node.value.chunks_exact(k)) {
                        let total: T = grow.iter().copied().sum();
                        for ((d, &s), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + s - y.exp() * total;
                        }
                    }
                }
            }
            Op::Pick { input, indices } => {
                if want(*input) {
                    let k = self.nodes[input.0].shape[1];
                    let dx = slot!(input);
                    for (r, (&i, &s)) in indices.iter().zip(g).enumerate() {
                        dx[r * k + i] = dx[r * k + i] + s;
                    }
                }
            }
            Op::MaskMul { input, mask } => {
                if want(*input) {
                    emit!(input, mask, |s: T, m: T| s * m);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if want(*p) {
                        pass!(p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Tile { input, times } => {
                if want(*input) {
                    let len = self.nodes[input.0].value.len();
                    pass!(input, &g[..len]);
                    let dx = slot!(input);
                    for t in 1..*times {
                        add_into(dx, &g[t * len..(t + 1) * len]);
                    }
                }
            }
            Op::SliceRows { input, start } => {
                if want(*input) {
                    let row: usize = self.nodes[input.0].shape[1..].iter().product();
                    add_into(&mut slot!(input)[start * row..start * row + g.len()], g);
                }
            }
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::AddBias { input, bias, .. } => vec![*input, *bias],
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Log(a)
        | Op::LogClamped(a, _)
        | Op::Exp(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::MeanLeading(a)
        | Op::LogSoftmax(a)
        | Op::Reshape(a) => vec![*a],
        Op::MaxPool2x2 { input, .. }
        | Op::Pick { input, .. }
        | Op::MaskMul { input, .. }
        | Op::Tile { input, .. }
        | Op::SliceRows { input, .. } => vec![*input],
        Op::Concat(parts) => parts.clone(),
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool2x2 { .. } => "maxpool2x2",
        Op::Relu(..) => "relu",
        Op::Log(..) => "log",
        Op::LogClamped(..) => "log_clamped",
        Op::Exp(..) => "exp",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumRows(..) => "sum_rows",
        Op::MeanLeading(..) => "mean_leading",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Pick { .. } => "pick",
        Op::MaskMul { .. } => "mask_mul",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Tile { .. } => "tile",
        Op::SliceRows { .. } => "slice_rows",
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    p: usize,
    ckk: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!("conv2d kernel {:?} larger than padded input {:?}", kernel, input));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        Ok(ConvGeometry { n, c, h, w, o, kh, kw, pad, ho, wo, p: ho * wo, ckk: c * kh * kw })
    }

    /// Output columns `lo..hi` whose input column `ox + kj - pad` is inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo).max(lo);
        (lo, hi)
    }

    /// Rows are `(c, ki, kj)`, columns are `(n, oy, ox)`.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let np = self.n * self.p;
        let mut cols = vec![T::zero(); self.ckk * np];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for n in 0..self.n {
                        let plane = &x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = oy + ki;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            let src_row = &plane[(iy - self.pad) * self.w..][..self.w];
                            let (lo, hi) = self.valid_ox(kj);
                            let out_row = &mut dst[n * self.p + oy * self.wo..][..self.wo];
                            out_row[lo..hi].copy_from_slice(&src_row[lo + kj - self.pad..hi + kj - self.pad]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let np = self.n * self.p;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * np..(row + 1) * np];
                    for n in 0..self.n {
                        let plane = &mut dx[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = oy + ki;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            let dst_row = &mut plane[(iy - self.pad) * self.w..][..self.w];
                            let in_row = &src[n * self.p + oy * self.wo..][..self.wo];
                            let (lo, hi) = self.valid_ox(kj);
                            add_into(&mut dst_row[lo + kj - self.pad..hi + kj - self.pad], &in_row[lo..hi]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let v = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(g.matmul(a, v), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_sliding_window_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = g.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = g.conv2d(x, k, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[4.0; 4]);
        // with padding 1 the corners see a single pixel
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert_eq!(g.value(y)[0], 1.0);
        assert_eq!(g.value(y)[5], 4.0);
    }

    #[test]
    fn quadratic_and_mean_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(&[4], vec![3.0, -1.0, 2.0, 7.0], true).unwrap();
        let loss = g.mean(x).unwrap();
        assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = g.input(&[2], vec![5.0, 6.0], true).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(unused).is_none());
        let mut t = Tensor::<f64>::zeros(&[2]);
        grads.accumulate_into(unused, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_accumulation_is_additive() {
        let mut g = Graph::<f64>::new();
        let mut w = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap().with_requires_grad(true);
        let wv = g.leaf(&w).unwrap();
        let sq = g.square(wv).unwrap();
        let loss = g.sum(sq).unwrap();
        for _ in 0..2 {
            g.backward(loss).unwrap().accumulate_into(wv, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[4.0, -4.0]);
    }

    #[test]
    fn backward_wrt_skips_other_leaves() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[1, 2], vec![1.0, 2.0], true).unwrap();
        let w = g.input(&[2, 1], vec![3.0, 4.0], true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward_wrt(loss, &[x]).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.wrt(w).is_none());
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::checked();
        assert!(matches!(g.input(&[1], vec![f64::NAN], false), Err(Error::Numerics(_))));
        let x = g.input(&[1], vec![0.0], false).unwrap();
        assert!(matches!(g.log(x), Err(Error::Numerics(_))));
        let mut g = Graph::<f64>::new();
        let x = g.input(&[1], vec![0.0], false).unwrap();
        assert!(g.log(x).is_ok());
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -5.0]).unwrap();
        let y = g.log_softmax(x).unwrap();
        for row in g.value(y).chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pick_rejects_bad_index() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(g.pick(x, &[3]), Err(Error::Data(_))));
        let p = g.pick(x, &[2]).unwrap();
        assert_eq!(g.value(p), &[3.0]);
    }

    #[test]
    fn forward_is_bit_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(&[2, 1, 4, 4], (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
            let k = g.constant(&[3, 1, 3, 3], (0..27).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
            let y = g.conv2d(x, k, 1).unwrap();
            let y = g.maxpool2x2(y).unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }
}
