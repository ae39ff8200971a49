//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive op in creation order. Calling
//! [`Graph::backward`] consumes the graph and walks the record in exact
//! reverse order, accumulating vector-Jacobian products into the inputs that
//! need them. Inputs that do not require gradients never receive one.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Mse(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize },
    Conv1d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CosineRows { a: Var, b: Var, norms: Vec<(f64, f64)> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m×k) and `b` (k×n);
    // `c` is a dense row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Tensor>, delta: Tensor) {
    match dst {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(delta.data()) {
                *d += s;
            }
        }
        None => *dst = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Records a leaf; it takes part in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.validate("graph leaf")?;
        let requires_grad = t.requires_grad();
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.validate(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shapes(op, sa, sb));
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sr[0] != *sa.last().unwrap() {
            return Err(TensorError::shapes(op, sa, sr));
        }
        Ok(())
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k;
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
            0.0,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.record(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shapes("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                (k as isize, 1),
                &db[i * k * n..],
                (n as isize, 1),
                &mut out[i * m * n..],
                0.0,
            );
        }
        let value = Tensor::new([bs, m, n], out)?;
        self.record(value, Op::BatchMatMul(a, b), &[a, b], "bmm")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::contract("transpose_last", format!("rank of {s:?}")));
        }
        let value = transpose_last(self.value(a));
        self.record(value, Op::TransposeLast(a), &[a], "transpose_last")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(value, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a vector over the last axis (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("add_row", a, row)?;
        let mut value = self.value(a).clone().with_grad(false);
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(r.len()) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.record(value, Op::AddRow(a, row), &[a, row], "add_row")
    }

    /// Multiplies by a vector over the last axis (per-channel gain).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("mul_row", a, row)?;
        let mut value = self.value(a).clone().with_grad(false);
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(r.len()) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        self.record(value, Op::MulRow(a, row), &[a, row], "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.record(value, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.record(value, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.record(value, Op::Relu(a), &[a], "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.record(value, Op::Gelu(a), &[a], "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.record(value, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_last(self.value(a));
        self.record(value, Op::Softmax(a), &[a], "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let c = src.last_dim();
        let mut out = src.clone().with_grad(false);
        let mut inv_std = Vec::with_capacity(src.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.record(out, Op::LayerNorm { x, inv_std }, &[x], "layer_norm")
    }

    /// Mean of squared differences over every element; returns a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s: f64 = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / da.len() as f64);
        self.record(value, Op::Mse(a, b), &[a, b], "mse")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        self.record(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_axis(axis, start, end)?;
        self.record(value, Op::SliceAxis { x, axis, start }, &[x], "slice_axis")
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `x: [B, T, Cin]`, `w: [K, Cin, Cout]` with odd `K`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sb != [sw[2]] {
            return Err(TensorError::contract(
                "conv1d",
                format!("input {sx:?}, kernel {sw:?}, bias {sb:?}"),
            ));
        }
        if sw[0] % 2 == 0 {
            return Err(TensorError::contract(
                "conv1d",
                format!("kernel size {} must be odd", sw[0]),
            ));
        }
        let (bs, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let cols = im2col(self.value(x).data(), bs, t, cin, k);
        let mut out = vec![0.0; bs * t * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            bs * t,
            k * cin,
            cout,
            &cols,
            ((k * cin) as isize, 1),
            self.value(w).data(),
            (cout as isize, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new([bs, t, cout], out)?;
        self.record(value, Op::Conv1d { x, w, b, cols }, &[x, w, b], "conv1d")
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(TensorError::contract(
                "mean_axis",
                format!("axis {axis} of {s:?}"),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.record(value, Op::MeanAxis { x, axis }, &[x], "mean_axis")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?.with_grad(false);
        self.record(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.record(value, Op::Mean(x), &[x], "mean")
    }

    /// Row-wise cosine similarity of `[B, D]` inputs, giving `[B]`.
    ///
    /// A zero-norm row is a numeric error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        if self.shape(a).len() != 2 {
            return Err(TensorError::contract(
                "cosine_rows",
                format!("expected rank 2, got {:?}", self.shape(a)),
            ));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = ta.rows();
        let mut out = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(TensorError::Numeric(format!(
                    "cosine_rows: zero-norm embedding in row {r}"
                )));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
            norms.push((na, nb));
        }
        let value = Tensor::new([rows], out)?;
        self.record(value, Op::CosineRows { a, b, norms }, &[a, b], "cosine_rows")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let probs = softmax_last(self.value(logits));
        let nll: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs.row(r)[l].max(1e-300).ln())
            .sum();
        let value = Tensor::scalar(nll / labels.len() as f64);
        self.record(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::contract("backward", "empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.numel() / k;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut da, 0.0);
                    add_into(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, 0.0);
                    add_into(&mut grads[b.0], Tensor::new([k, n], db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m, n, k,
                            &g.data()[i * m * n..], (n as isize, 1),
                            &tb.data()[i * k * n..], (1, n as isize),
                            &mut da[i * m * k..], 0.0,
                        );
                    }
                    add_into(&mut grads[a.0], Tensor::new([bs, m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k, m, n,
                            &ta.data()[i * m * k..], (1, k as isize),
                            &g.data()[i * m * n..], (n as isize, 1),
                            &mut db[i * k * n..], 0.0,
                        );
                    }
                    add_into(&mut grads[b.0], Tensor::new([bs, k, n], db)?);
                }
            }
            Op::TransposeLast(a) => {
                add_into(&mut grads[a.0], transpose_last(g));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.needs(*row) {
                    let c = g.last_dim();
                    let mut dr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[row.0], Tensor::new([c], dr)?);
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let c = r.len();
                if self.needs(*a) {
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_mut(c) {
                        for (d, s) in chunk.iter_mut().zip(r) {
                            *d *= s;
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.needs(*row) {
                    let mut dr = vec![0.0; c];
                    for (gc, ac) in g.data().chunks(c).zip(self.value(*a).data().chunks(c)) {
                        for i in 0..c {
                            dr[i] += gc[i] * ac[i];
                        }
                    }
                    add_into(&mut grads[row.0], Tensor::new([c], dr)?);
                }
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g.map(|v| v * c)),
            Op::AddScalar(a) => add_into(&mut grads[a.0], g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                add_into(&mut grads[a.0], d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))?;
                add_into(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                add_into(&mut grads[a.0], d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = g.clone();
                for (dc, yc) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dc.iter().zip(yc).map(|(u, v)| u * v).sum();
                    for (u, v) in dc.iter_mut().zip(yc) {
                        *u = v * (*u - dot);
                    }
                }
                add_into(&mut grads[a.0], d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = g.clone();
                for ((dc, yc), is) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let mean_g = dc.iter().sum::<f64>() / c as f64;
                    let mean_gy = dc.iter().zip(yc).map(|(u, v)| u * v).sum::<f64>() / c as f64;
                    for (u, v) in dc.iter_mut().zip(yc) {
                        *u = is * (*u - mean_g - v * mean_gy);
                    }
                }
                add_into(&mut grads[x.0], d);
            }
            Op::Mse(a, b) => {
                let scale = 2.0 * g.item() / self.value(*a).numel() as f64;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * scale)?;
                if self.needs(*b) {
                    add_into(&mut grads[b.0], diff.map(|v| -v));
                }
                if self.needs(*a) {
                    add_into(&mut grads[a.0], diff);
                }
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.needs(*v) {
                        add_into(&mut grads[v.0], g.slice_axis(*axis, start, start + len)?);
                    }
                    start += len;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                let src = self.shape(*x).to_vec();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = src[*axis];
                let width = g.shape()[*axis];
                let mut d = vec![0.0; src.iter().product()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let from = o * width * inner;
                    d[dst..dst + width * inner].copy_from_slice(&g.data()[from..from + width * inner]);
                }
                add_into(&mut grads[x.0], Tensor::new(src, d)?);
            }
            Op::Conv1d { x, w, b, cols } => {
                let sx = self.shape(*x);
                let (bs, t, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (k, cout) = (sw[0], sw[2]);
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for chunk in g.data().chunks(cout) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[b.0], Tensor::new([cout], db)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * cin * cout];
                    gemm(
                        k * cin, bs * t, cout,
                        cols, (1, (k * cin) as isize),
                        g.data(), (cout as isize, 1),
                        &mut dw, 0.0,
                    );
                    add_into(&mut grads[w.0], Tensor::new([k, cin, cout], dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; bs * t * k * cin];
                    gemm(
                        bs * t, cout, k * cin,
                        g.data(), (cout as isize, 1),
                        self.value(*w).data(), (1, cout as isize),
                        &mut dcols, 0.0,
                    );
                    let dx = col2im(&dcols, bs, t, cin, k);
                    add_into(&mut grads[x.0], Tensor::new([bs, t, cin], dx)?);
                }
            }
            Op::MeanAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut d = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                add_into(&mut grads[x.0], Tensor::new(s, d)?);
            }
            Op::Reshape(x) => {
                add_into(&mut grads[x.0], g.reshape(self.shape(*x).to_vec())?.with_grad(false));
            }
            Op::Sum(x) => {
                let gv = g.item();
                add_into(&mut grads[x.0], Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let gv = g.item() / n;
                add_into(&mut grads[x.0], Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::CosineRows { a, b, norms } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.last_dim();
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    let s = node.value.data()[r];
                    let gr = g.data()[r];
                    let (ra, rb) = (ta.row(r), tb.row(r));
                    for i in 0..d {
                        da[r * d + i] = gr * (rb[i] / (na * nb) - s * ra[i] / (na * na));
                        db[r * d + i] = gr * (ra[i] / (na * nb) - s * rb[i] / (nb * nb));
                    }
                }
                if self.needs(*a) {
                    add_into(&mut grads[a.0], Tensor::new(ta.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits).to_vec();
                let c = s[1];
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                add_into(&mut grads[logits.0], Tensor::new(s, d)?);
            }
        }
        Ok(())
    }
}

fn transpose_last(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (m * n);
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("transpose preserves element count")
}

pub(crate) fn softmax_last(t: &Tensor) -> Tensor {
    let c = t.last_dim();
    let mut out = t.clone().with_grad(false);
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Rows of `[B*T, K*Cin]`: the zero-padded window centred on each frame.
fn im2col(x: &[f64], bs: usize, t: usize, cin: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut cols = vec![0.0; bs * t * k * cin];
    for b in 0..bs {
        for ti in 0..t {
            let row = &mut cols[(b * t + ti) * k * cin..(b * t + ti + 1) * k * cin];
            for kk in 0..k {
                let src_t = ti as isize + kk as isize - half as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = (b * t + src_t as usize) * cin;
                row[kk * cin..(kk + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], bs: usize, t: usize, cin: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut x = vec![0.0; bs * t * cin];
    for b in 0..bs {
        for ti in 0..t {
            let row = &cols[(b * t + ti) * k * cin..(b * t + ti + 1) * k * cin];
            for kk in 0..k {
                let src_t = ti as isize + kk as isize - half as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let dst = (b * t + src_t as usize) * cin;
                for c in 0..cin {
                    x[dst + c] += row[kk * cin + c];
                }
            }
        }
    }
    x
}
