//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tensor::backward`] on a scalar output walks the recording in reverse and
//! accumulates adjoints into each node's `grad` buffer. Gradients accumulate
//! additively across `backward` calls — training loops call
//! [`Tape::zero_grad`] between steps.
//!
//! A tape is confined to one thread; independent runs build independent tapes.
//! Shape rules are checked per primitive and violations panic with the
//! offending op tag and shapes, since they indicate a wiring bug rather than a
//! recoverable condition.

use std::cell::RefCell;
use std::rc::Rc;

/// Primitive tag attached to every tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable input (participates in gradients).
    Leaf,
    /// Non-trainable input (data, masks, precomputed matrices).
    Constant,
    MatMul,
    Transpose,
    Add,
    /// `[r, c] + [c]`, broadcasting the vector across rows.
    AddRow,
    Sub,
    Mul,
    Div,
    Neg,
    Recip,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Log,
    ClampMin(f64),
    Square,
    /// Softmax over the last axis (whole vector for 1-D, per row for 2-D).
    Softmax,
    Sum,
    Mean,
    /// Concatenation of 1-D tensors.
    Concat,
    /// Contiguous 1-D range `[start, start+len)`.
    Slice { start: usize, len: usize },
    /// Row range of a 2-D tensor.
    SliceRows { start: usize, len: usize },
    Reshape,
    /// Index map: `out[i] = x[map[i]]`, or 0 where the map is `None`.
    Gather { map: Vec<Option<usize>> },
    /// Valid 1-D convolution: input `[B, Cin, L]`, weight `[Cout, Cin, k]`, bias `[Cout]`.
    Conv1d { stride: usize },
    MaxPool1d { kernel: usize, stride: usize },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording of a differentiable computation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| inner.nodes[i].requires_grad),
        };
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        inner.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            grad,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Trainable leaf tensor.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(shape),
            values.len(),
            "leaf: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(Op::Leaf, vec![], shape.to_vec(), values)
    }

    /// Non-trainable tensor (inputs, labels, fixed matrices).
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(shape),
            values.len(),
            "constant: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(Op::Constant, vec![], shape.to_vec(), values)
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&[], vec![v])
    }

    /// Zeroes the stored gradient of every node.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense matmul via the gemm kernel; `a` is `m x k`, `b` is `k x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// As [`gemm`] but transposing `a` (`a` is `k x m` stored row-major).
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// As [`gemm`] but transposing `b` (`b` is `n x k` stored row-major).
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_rows(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Value of a scalar tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        assert_eq!(node.value.len(), 1, "scalar_value on non-scalar tensor");
        node.value[0]
    }

    /// Accumulated gradient (zeros until `backward` has touched this node).
    pub fn grad(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    fn with<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        f(&node.shape, &node.value)
    }

    fn same_tape(&self, other: &Tensor, op: &str) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "{op}: operands live on different tapes"
        );
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.same_tape(rhs, "matmul");
        let (ls, rs) = (self.shape(), rhs.shape());
        match (ls.as_slice(), rs.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                self.with(|_, a| rhs.with(|_, b| gemm(m, k, n, a, b, &mut out)));
                self.tape
                    .push(Op::MatMul, vec![self.idx, rhs.idx], vec![m, n], out)
            }
            (&[m, k], &[k2]) if k == k2 => {
                let mut out = vec![0.0; m];
                self.with(|_, a| rhs.with(|_, b| gemm(m, k, 1, a, b, &mut out)));
                self.tape
                    .push(Op::MatMul, vec![self.idx, rhs.idx], vec![m], out)
            }
            _ => panic!("matmul: incompatible shapes {ls:?} x {rs:?}"),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose: expected 2-D tensor, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let out = self.with(|_, v| {
            let mut out = vec![0.0; v.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        });
        self.tape.push(Op::Transpose, vec![self.idx], vec![c, r], out)
    }

    fn zip_same_shape(&self, rhs: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.same_tape(rhs, &format!("{op:?}"));
        let (ls, rs) = (self.shape(), rhs.shape());
        assert_eq!(ls, rs, "{op:?}: shape mismatch {ls:?} vs {rs:?}");
        let out = self.with(|_, a| rhs.with(|_, b| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()));
        self.tape.push(op, vec![self.idx, rhs.idx], ls, out)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() == 2 && rs.len() == 1 && ls[1] == rs[0] {
            // row broadcast
            let (r, c) = (ls[0], ls[1]);
            let out = self.with(|_, a| {
                rhs.with(|_, b| {
                    let mut out = vec![0.0; a.len()];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = a[i * c + j] + b[j];
                        }
                    }
                    out
                })
            });
            return self.tape.push(Op::AddRow, vec![self.idx, rhs.idx], ls, out);
        }
        self.zip_same_shape(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, Op::Div, |a, b| a / b)
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let s = self.shape();
        let out = self.with(|_, v| v.iter().map(|&x| f(x)).collect());
        self.tape.push(op, vec![self.idx], s, out)
    }

    pub fn neg(&self) -> Tensor {
        self.map(Op::Neg, |x| -x)
    }

    pub fn recip(&self) -> Tensor {
        self.map(Op::Recip, |x| 1.0 / x)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(Op::Scale(c), |x| c * x)
    }

    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.map(Op::Tanh, f64::tanh)
    }

    pub fn sin(&self) -> Tensor {
        self.map(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        self.map(Op::Cos, f64::cos)
    }

    pub fn log(&self) -> Tensor {
        self.map(Op::Log, f64::ln)
    }

    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.map(Op::ClampMin(floor), |x| x.max(floor))
    }

    pub fn square(&self) -> Tensor {
        self.map(Op::Square, |x| x * x)
    }

    pub fn softmax(&self) -> Tensor {
        let s = self.shape();
        let (rows, cols) = match s.as_slice() {
            &[n] => (1, n),
            &[r, c] => (r, c),
            _ => panic!("softmax: expected 1-D or 2-D tensor, got {s:?}"),
        };
        let out = self.with(|_, v| softmax_rows(rows, cols, v));
        self.tape.push(Op::Softmax, vec![self.idx], s, out)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&self) -> Tensor {
        let out = self.with(|_, v| vec![v.iter().sum()]);
        self.tape.push(Op::Sum, vec![self.idx], vec![], out)
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&self) -> Tensor {
        let out = self.with(|_, v| vec![v.iter().sum::<f64>() / v.len() as f64]);
        self.tape.push(Op::Mean, vec![self.idx], vec![], out)
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 1, "slice: expected 1-D tensor, got {s:?}");
        assert!(
            start + len <= s[0],
            "slice: range {start}..{} out of bounds for length {}",
            start + len,
            s[0]
        );
        let out = self.with(|_, v| v[start..start + len].to_vec());
        self.tape
            .push(Op::Slice { start, len }, vec![self.idx], vec![len], out)
    }

    /// Row range of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "slice_rows: expected 2-D tensor, got {s:?}");
        let (r, c) = (s[0], s[1]);
        assert!(
            start + len <= r,
            "slice_rows: rows {start}..{} out of bounds for {} rows",
            start + len,
            r
        );
        let out = self.with(|_, v| v[start * c..(start + len) * c].to_vec());
        self.tape
            .push(Op::SliceRows { start, len }, vec![self.idx], vec![len, c], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let s = self.shape();
        assert_eq!(
            numel(&s),
            numel(shape),
            "reshape: cannot reshape {s:?} into {shape:?}"
        );
        let out = self.with(|_, v| v.to_vec());
        self.tape.push(Op::Reshape, vec![self.idx], shape.to_vec(), out)
    }

    /// Rearranges elements by an index map; `None` entries read as zero.
    pub fn gather(&self, map: &[Option<usize>], shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            map.len(),
            "gather: map length {} does not match shape {shape:?}",
            map.len()
        );
        let out = self.with(|_, v| {
            map.iter()
                .map(|m| match m {
                    Some(j) => v[*j],
                    None => 0.0,
                })
                .collect()
        });
        self.tape.push(
            Op::Gather { map: map.to_vec() },
            vec![self.idx],
            shape.to_vec(),
            out,
        )
    }

    /// Valid 1-D convolution with bias. Input `[B, Cin, L]`, weight `[Cout, Cin, k]`,
    /// bias `[Cout]`; output `[B, Cout, (L - k)/stride + 1]`.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
        self.same_tape(weight, "conv1d");
        self.same_tape(bias, "conv1d");
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        let &[b, cin, l] = xs.as_slice() else {
            panic!("conv1d: expected 3-D input, got {xs:?}")
        };
        let &[cout, cin2, k] = ws.as_slice() else {
            panic!("conv1d: expected 3-D weight, got {ws:?}")
        };
        assert_eq!(cin, cin2, "conv1d: channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(bs, vec![cout], "conv1d: bias shape {bs:?} vs {cout} channels");
        assert!(k <= l, "conv1d: kernel {k} longer than input {l}");
        let lout = (l - k) / stride + 1;
        let mut out = vec![0.0; b * cout * lout];
        self.with(|_, x| {
            weight.with(|_, w| {
                bias.with(|_, bv| {
                    for bi in 0..b {
                        for co in 0..cout {
                            for j in 0..lout {
                                let mut acc = bv[co];
                                for ci in 0..cin {
                                    let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                    let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                    for t in 0..k {
                                        acc += wrow[t] * xrow[j * stride + t];
                                    }
                                }
                                out[(bi * cout + co) * lout + j] = acc;
                            }
                        }
                    }
                })
            })
        });
        self.tape.push(
            Op::Conv1d { stride },
            vec![self.idx, weight.idx, bias.idx],
            vec![b, cout, lout],
            out,
        )
    }

    /// 1-D max pooling over the last axis of a `[B, C, L]` tensor.
    pub fn maxpool1d(&self, kernel: usize, stride: usize) -> Tensor {
        let s = self.shape();
        let &[b, c, l] = s.as_slice() else {
            panic!("maxpool1d: expected 3-D input, got {s:?}")
        };
        assert!(kernel <= l, "maxpool1d: kernel {kernel} longer than input {l}");
        let lout = (l - kernel) / stride + 1;
        let mut out = vec![0.0; b * c * lout];
        self.with(|_, x| {
            for bc in 0..b * c {
                let row = &x[bc * l..(bc + 1) * l];
                for j in 0..lout {
                    out[bc * lout + j] = row[j * stride..j * stride + kernel]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                }
            }
        });
        self.tape.push(
            Op::MaxPool1d { kernel, stride },
            vec![self.idx],
            vec![b, c, lout],
            out,
        )
    }

    /// Propagates gradients from this scalar through the recorded graph,
    /// adding into each node's `grad` buffer.
    pub fn backward(&self) {
        let mut inner = self.tape.inner.borrow_mut();
        assert_eq!(
            inner.nodes[self.idx].value.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            inner.nodes[self.idx].shape
        );
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.idx + 1];
        adj[self.idx] = Some(vec![1.0]);
        for i in (0..=self.idx).rev() {
            let Some(go) = adj[i].take() else { continue };
            let node = &inner.nodes[i];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            // stash accumulated gradient on the node itself
            for (g, d) in inner.nodes[i].grad.iter_mut().zip(&go) {
                *g += d;
            }
            let node = &inner.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let inputs = node.inputs.clone();
            let op = node.op.clone();
            let mut push = |slot: usize, delta: Vec<f64>| {
                let idx = inputs[slot];
                if !inner.nodes[idx].requires_grad {
                    return;
                }
                match &mut adj[idx] {
                    Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    none => *none = Some(delta),
                }
            };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul => {
                    let a = &inner.nodes[inputs[0]];
                    let b = &inner.nodes[inputs[1]];
                    let (m, k) = (a.shape[0], a.shape[1]);
                    let n = if b.shape.len() == 2 { b.shape[1] } else { 1 };
                    let mut da = vec![0.0; a.value.len()];
                    let mut db = vec![0.0; b.value.len()];
                    // dA = gO * B^T ; dB = A^T * gO
                    gemm_bt(m, n, k, &go, &b.value, &mut da);
                    gemm_at(k, m, n, &a.value, &go, &mut db);
                    push(0, da);
                    push(1, db);
                }
                Op::Transpose => {
                    let node = &inner.nodes[i];
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let mut dx = vec![0.0; go.len()];
                    for p in 0..r {
                        for q in 0..c {
                            dx[q * r + p] = go[p * c + q];
                        }
                    }
                    push(0, dx);
                }
                Op::Add => {
                    push(0, go.clone());
                    push(1, go);
                }
                Op::AddRow => {
                    let b = &inner.nodes[inputs[1]];
                    let c = b.value.len();
                    let mut db = vec![0.0; c];
                    for (j, g) in go.iter().enumerate() {
                        db[j % c] += g;
                    }
                    push(0, go.clone());
                    push(1, db);
                }
                Op::Sub => {
                    push(0, go.clone());
                    push(1, go.iter().map(|g| -g).collect());
                }
                Op::Mul => {
                    let a = inner.nodes[inputs[0]].value.clone();
                    let b = inner.nodes[inputs[1]].value.clone();
                    push(0, go.iter().zip(&b).map(|(g, y)| g * y).collect());
                    push(1, go.iter().zip(&a).map(|(g, x)| g * x).collect());
                }
                Op::Div => {
                    let a = inner.nodes[inputs[0]].value.clone();
                    let b = inner.nodes[inputs[1]].value.clone();
                    push(0, go.iter().zip(&b).map(|(g, y)| g / y).collect());
                    push(
                        1,
                        go.iter()
                            .zip(a.iter().zip(&b))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                Op::Neg => push(0, go.iter().map(|g| -g).collect()),
                Op::Recip => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(0, go.iter().zip(x).map(|(g, x)| -g / (x * x)).collect());
                }
                Op::Scale(c) => push(0, go.iter().map(|g| c * g).collect()),
                Op::Relu => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(
                        0,
                        go.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Sigmoid => {
                    let y = &inner.nodes[i].value;
                    push(0, go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
                }
                Op::Tanh => {
                    let y = &inner.nodes[i].value;
                    push(0, go.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
                }
                Op::Sin => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(0, go.iter().zip(x).map(|(g, x)| g * x.cos()).collect());
                }
                Op::Cos => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(0, go.iter().zip(x).map(|(g, x)| -g * x.sin()).collect());
                }
                Op::Log => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(0, go.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::ClampMin(floor) => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(
                        0,
                        go.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Square => {
                    let x = &inner.nodes[inputs[0]].value;
                    push(0, go.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::Softmax => {
                    let node = &inner.nodes[i];
                    let (rows, cols) = match node.shape.as_slice() {
                        &[n] => (1, n),
                        &[r, c] => (r, c),
                        _ => unreachable!(),
                    };
                    let p = &node.value;
                    let mut dx = vec![0.0; p.len()];
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &go[r * cols..(r + 1) * cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    push(0, dx);
                }
                Op::Sum => {
                    let len = inner.nodes[inputs[0]].value.len();
                    push(0, vec![go[0]; len]);
                }
                Op::Mean => {
                    let len = inner.nodes[inputs[0]].value.len();
                    push(0, vec![go[0] / len as f64; len]);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for (slot, &idx) in inputs.iter().enumerate() {
                        let len = inner.nodes[idx].value.len();
                        push(slot, go[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Slice { start, len } => {
                    let total = inner.nodes[inputs[0]].value.len();
                    let mut dx = vec![0.0; total];
                    dx[start..start + len].copy_from_slice(&go);
                    push(0, dx);
                }
                Op::SliceRows { start, len } => {
                    let src = &inner.nodes[inputs[0]];
                    let c = src.shape[1];
                    let mut dx = vec![0.0; src.value.len()];
                    dx[start * c..(start + len) * c].copy_from_slice(&go);
                    push(0, dx);
                }
                Op::Reshape => push(0, go),
                Op::Gather { ref map } => {
                    let total = inner.nodes[inputs[0]].value.len();
                    let mut dx = vec![0.0; total];
                    for (i, m) in map.iter().enumerate() {
                        if let Some(j) = m {
                            dx[*j] += go[i];
                        }
                    }
                    push(0, dx);
                }
                Op::Conv1d { stride } => {
                    let x = &inner.nodes[inputs[0]];
                    let w = &inner.nodes[inputs[1]];
                    let (b, cin, l) = (x.shape[0], x.shape[1], x.shape[2]);
                    let (cout, _, k) = (w.shape[0], w.shape[1], w.shape[2]);
                    let lout = (l - k) / stride + 1;
                    let mut dx = vec![0.0; x.value.len()];
                    let mut dw = vec![0.0; w.value.len()];
                    let mut db = vec![0.0; cout];
                    for bi in 0..b {
                        for co in 0..cout {
                            for j in 0..lout {
                                let g = go[(bi * cout + co) * lout + j];
                                db[co] += g;
                                for ci in 0..cin {
                                    for t in 0..k {
                                        dx[(bi * cin + ci) * l + j * stride + t] +=
                                            g * w.value[(co * cin + ci) * k + t];
                                        dw[(co * cin + ci) * k + t] +=
                                            g * x.value[(bi * cin + ci) * l + j * stride + t];
                                    }
                                }
                            }
                        }
                    }
                    push(0, dx);
                    push(1, dw);
                    push(2, db);
                }
                Op::MaxPool1d { kernel, stride } => {
                    let x = &inner.nodes[inputs[0]];
                    let l = x.shape[2];
                    let lout = (l - kernel) / stride + 1;
                    let mut dx = vec![0.0; x.value.len()];
                    for bc in 0..x.shape[0] * x.shape[1] {
                        let row = &x.value[bc * l..(bc + 1) * l];
                        for j in 0..lout {
                            // ties resolve to the earliest index
                            let mut best = j * stride;
                            for t in 1..kernel {
                                if row[j * stride + t] > row[best] {
                                    best = j * stride + t;
                                }
                            }
                            dx[bc * l + best] += go[bc * lout + j];
                        }
                    }
                    push(0, dx);
                }
            }
        }
    }
}

/// Concatenates 1-D tensors end to end.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat: no inputs");
    let tape = parts[0].tape.clone();
    let mut value = Vec::new();
    let mut inputs = Vec::new();
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), 1, "concat: expected 1-D tensors, got {s:?}");
        p.with(|_, v| value.extend_from_slice(v));
        inputs.push(p.idx);
    }
    let len = value.len();
    tape.push(Op::Concat, inputs, vec![len], value)
}

/// Maximum relative error between the analytic gradient of `f` and a
/// central-difference estimate at `point`.
///
/// `f` must build a scalar from leaves it is handed. The relative error per
/// coordinate is `|a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &[(Vec<usize>, Vec<f64>)], eps: f64) -> f64
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let eval = |coords: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = point
            .iter()
            .zip(coords)
            .map(|((shape, _), vals)| tape.leaf(shape, vals.clone()))
            .collect();
        f(&tape, &leaves).scalar_value()
    };

    let tape = Tape::new();
    let leaves: Vec<Tensor> = point
        .iter()
        .map(|(shape, vals)| tape.leaf(shape, vals.clone()))
        .collect();
    let loss = f(&tape, &leaves);
    loss.backward();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();

    let base: Vec<Vec<f64>> = point.iter().map(|(_, v)| v.clone()).collect();
    let mut worst = 0.0_f64;
    for (ti, vals) in base.iter().enumerate() {
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[ti][ci] += eps;
            let mut minus = base.clone();
            minus[ti][ci] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    worst
}
