//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op that touches a tensor requiring gradients records a [`GraphNode`]
//! holding its inputs and whatever the backward rule needs. [`Tensor::backward`]
//! walks the recorded DAG once in reverse topological order and accumulates
//! gradients into the leaf parameters. The graph lives as long as the output
//! tensor; dropping the loss frees it.
//!
//! Shapes are rank 0 (scalar), rank 1 (vector) or rank 2 (matrix). Broadcasting
//! is limited to adding a row vector to every row of a matrix.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Lower bound on the norms [`Tensor::normalize_rows`] divides by.
pub const NORM_EPS: f64 = 1e-12;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type GradFn = Rc<dyn Fn(f64) -> f64>;

/// Operation tag plus the values its backward rule needs.
#[derive(Clone)]
enum Op {
    MatMul,
    MatMulT,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale(f64),
    Relu,
    Exp,
    Log,
    ClampMin(f64),
    SoftmaxRows,
    MaskedLogSoftmaxRows(Rc<Vec<bool>>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows(Vec<usize>),
    SegmentMaxPool(Vec<usize>),
    MeanRows,
    Sum,
    NormalizeRows(Vec<f64>),
    Reshape,
    Map(GradFn),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::MatMulT => "matmul_t",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::ClampMin(_) => "clamp_min",
            Op::SoftmaxRows => "softmax_rows",
            Op::MaskedLogSoftmaxRows(_) => "masked_log_softmax_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SelectRows(_) => "select_rows",
            Op::SegmentMaxPool(_) => "segment_max_pool",
            Op::MeanRows => "mean_rows",
            Op::Sum => "sum",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Reshape => "reshape",
            Op::Map(_) => "map",
        }
    }
}

/// Backward-graph record attached to a non-leaf tensor.
pub struct GraphNode {
    op: Op,
    inputs: Vec<Tensor>,
}

struct Cell_ {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<GraphNode>,
}

/// Reference-counted handle; clones share storage.
#[derive(Clone)]
pub struct Tensor(Rc<Cell_>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &*self.0.data.borrow())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.tag()))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c += op(a) · op(b)` with `op` an optional transpose, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // op(a) is m×k; stored as k×m when transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the dimensions and strides above.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<GraphNode>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Cell_ {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 || numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.shape().to_vec(), t.to_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::build(vec![data.len()], data, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    /// Matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[&Tensor]) -> Self {
        let tracked = grad_enabled() && inputs.iter().any(|t| t.tracked());
        let node = tracked.then(|| GraphNode {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Self::build(shape, data, false, node)
    }

    fn tracked(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// Row count; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            2 => self.0.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            1 => self.0.shape[0],
            _ => self.0.shape[1],
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let c = self.cols();
        self.0.data.borrow()[i * c..(i + 1) * c].to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// In-place update of leaf values; used by optimizers and finite differences.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Same values, no graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    // ---- linear algebra ----

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = b.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &b.data(), false, &mut out);
        Ok(Self::derived(vec![m, n], out, Op::MatMul, &[self, b]))
    }

    /// `self · bᵀ` without materialising the transpose.
    pub fn matmul_t(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul_t")?;
        let (n, k2) = b.expect_matrix("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &b.data(), true, &mut out);
        Ok(Self::derived(vec![m, n], out, Op::MatMulT, &[self, b]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        Ok(Self::derived(vec![n, m], out, Op::Transpose, &[self]))
    }

    // ---- elementwise ----

    fn zip_with(&self, b: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(b, op.tag())?;
        let out = self
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Self::derived(self.shape().to_vec(), out, op, &[self, b]))
    }

    fn map_values(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Self::derived(self.shape().to_vec(), out, op, &[self])
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        self.zip_with(b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        self.zip_with(b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        self.zip_with(b, Op::Mul, |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("add_row")?;
        if bias.shape() != [n] {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        drop(b);
        Ok(Self::derived(vec![m, n], out, Op::AddRow, &[self, bias]))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_values(Op::Scale(c), |x| c * x)
    }

    pub fn relu(&self) -> Tensor {
        self.map_values(Op::Relu, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.map_values(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.map_values(Op::Log, f64::ln)
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.map_values(Op::ClampMin(floor), |x| x.max(floor))
    }

    /// Elementwise `f` with user-supplied derivative `df`.
    pub fn map(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        self.map_values(Op::Map(Rc::new(df)), f)
    }

    // ---- row-wise reductions ----

    /// Row-wise softmax, stabilised by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("softmax_rows")?;
        let d = self.data();
        if let Some(bad) = d.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: format!("non-finite input {bad}"),
            });
        }
        let mut out = vec![0.0; m * n];
        for (src, dst) in d.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - max).exp();
                z += *o;
            }
            dst.iter_mut().for_each(|o| *o /= z);
        }
        drop(d);
        Ok(Self::derived(vec![m, n], out, Op::SoftmaxRows, &[self]))
    }

    /// Row-wise log-softmax restricted to the entries where `mask` is true.
    /// Masked-out entries come back as 0 and receive no gradient. A row with
    /// no selected entries is all zeros.
    pub fn masked_log_softmax_rows(&self, mask: &[bool]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("masked_log_softmax_rows")?;
        if mask.len() != m * n {
            return Err(Error::shape("masked_log_softmax_rows", self.shape(), &[mask.len()]));
        }
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let sel = &mask[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max
                + row
                    .iter()
                    .zip(sel)
                    .filter(|(_, &s)| s)
                    .map(|(&x, _)| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..n {
                if sel[j] {
                    out[i * n + j] = row[j] - lse;
                }
            }
        }
        drop(d);
        Ok(Self::derived(
            vec![m, n],
            out,
            Op::MaskedLogSoftmaxRows(Rc::new(mask.to_vec())),
            &[self],
        ))
    }

    /// Divides each row by its L2 norm, floored at [`NORM_EPS`] so zero rows
    /// stay zero. Exactly scale invariant for rows above the floor.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("normalize_rows")?;
        let d = self.data();
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for (src, dst) in d.chunks(n).zip(out.chunks_mut(n)) {
            let norm = src.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = x / denom;
            }
            norms.push(norm);
        }
        drop(d);
        Ok(Self::derived(vec![m, n], out, Op::NormalizeRows(norms), &[self]))
    }

    /// Cosine similarity of two equal-length vectors, `ε`-guarded.
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::shape("cosine_similarity", self.shape(), other.shape()));
        }
        self.same_shape(other, "cosine_similarity")?;
        let n = self.numel();
        let u = self.reshape(&[1, n])?.normalize_rows()?;
        let v = other.reshape(&[1, n])?.normalize_rows()?;
        u.matmul_t(&v)?.reshape(&[])
    }

    /// Column-wise max over rows: `m×n → n`. Ties go to the lowest row.
    pub fn max_pool_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("max_pool_rows")?;
        let pooled = self.segment_max_pool(&[m])?;
        if m == 0 {
            return Err(Error::shape("max_pool_rows", self.shape(), &[1, n]));
        }
        pooled.reshape(&[n])
    }

    /// Max-pools consecutive row segments of the given lengths: `(Σ len)×n → S×n`.
    pub fn segment_max_pool(&self, lengths: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("segment_max_pool")?;
        if lengths.iter().sum::<usize>() != m || lengths.contains(&0) {
            return Err(Error::shape("segment_max_pool", self.shape(), lengths));
        }
        let d = self.data();
        let mut out = vec![0.0; lengths.len() * n];
        let mut argmax = vec![0usize; lengths.len() * n];
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            for c in 0..n {
                let mut best = start;
                for r in start + 1..start + len {
                    if d[r * n + c] > d[best * n + c] {
                        best = r;
                    }
                }
                out[s * n + c] = d[best * n + c];
                argmax[s * n + c] = best;
            }
            start += len;
        }
        drop(d);
        Ok(Self::derived(
            vec![lengths.len(), n],
            out,
            Op::SegmentMaxPool(argmax),
            &[self],
        ))
    }

    /// Column-wise mean: `m×n → n`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("mean_rows")?;
        if m == 0 {
            return Err(Error::shape("mean_rows", self.shape(), &[1, n]));
        }
        let d = self.data();
        let mut out = vec![0.0; n];
        for row in d.chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        drop(d);
        Ok(Self::derived(vec![n], out, Op::MeanRows, &[self]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::derived(Vec::new(), vec![s], Op::Sum, &[self])
    }

    // ---- structural ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.len() > 2 {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Self::derived(shape.to_vec(), self.to_vec(), Op::Reshape, &[self]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = first.expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.expect_matrix("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Self::derived(vec![m, total], out, Op::ConcatCols(widths), &refs))
    }

    /// Vertical concatenation. Vectors are treated as single rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = first.cols();
        let mut heights = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            if p.shape().is_empty() || p.cols() != n {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            heights.push(p.rows());
            out.extend_from_slice(&p.data());
        }
        let m = heights.iter().sum();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Self::derived(vec![m, n], out, Op::ConcatRows(heights), &refs))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape("select_rows", self.shape(), &[bad]));
        }
        let d = self.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        drop(d);
        Ok(Self::derived(
            vec![indices.len(), n],
            out,
            Op::SelectRows(indices.to_vec()),
            &[self],
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_rows(&idx)
    }

    // ---- backward ----

    /// Accumulates `d self / d leaf` into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Cell_, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&t.0)) else {
                continue;
            };
            match &t.0.node {
                None => {
                    if t.0.requires_grad {
                        let mut slot = t.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(node) => {
                    let input_grads = t.backward_rule(node, &g);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.tracked() {
                            continue;
                        }
                        match grads.get_mut(&Rc::as_ptr(&input.0)) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(Rc::as_ptr(&input.0), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked tensors; reversing it gives a valid backward order.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Cell_> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(Rc::as_ptr(&self.0));
        while let Some((t, next)) = stack.pop() {
            let inputs = t.0.node.as_ref().map_or(&[][..], |n| n.inputs.as_slice());
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((t, next + 1));
                if child.tracked() && seen.insert(Rc::as_ptr(&child.0)) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }

    fn backward_rule(&self, node: &GraphNode, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let inputs = &node.inputs;
        let want = |i: usize| inputs[i].tracked();
        match &node.op {
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b.data(), true, &mut ga);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a.data(), true, g, false, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::MatMulT => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k) = (a.rows(), a.cols());
                let n = b.rows();
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b.data(), false, &mut ga);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, &a.data(), false, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let (m, n) = (inputs[0].rows(), inputs[0].cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(out)]
            }
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|x| -x).collect()),
            ],
            Op::Mul => {
                let ga = want(0).then(|| {
                    g.iter().zip(inputs[1].data().iter()).map(|(x, y)| x * y).collect()
                });
                let gb = want(1).then(|| {
                    g.iter().zip(inputs[0].data().iter()).map(|(x, y)| x * y).collect()
                });
                vec![ga, gb]
            }
            Op::AddRow => {
                let n = inputs[1].numel();
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![want(0).then(|| g.to_vec()), gb]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|x| c * x).collect())],
            Op::Relu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter().zip(x.iter()).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect(),
                )]
            }
            Op::Exp => {
                let y = self.data();
                vec![Some(g.iter().zip(y.iter()).map(|(a, b)| a * b).collect())]
            }
            Op::Log => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(a, b)| a / b).collect())]
            }
            Op::ClampMin(floor) => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter().zip(x.iter()).map(|(gi, &xi)| if xi > *floor { *gi } else { 0.0 }).collect(),
                )]
            }
            Op::Map(df) => {
                let x = inputs[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(gi, &xi)| gi * df(xi)).collect())]
            }
            Op::SoftmaxRows => {
                let n = self.cols();
                let y = self.data();
                let mut out = vec![0.0; g.len()];
                for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::MaskedLogSoftmaxRows(mask) => {
                let n = self.cols();
                let y = self.data();
                let mut out = vec![0.0; g.len()];
                for i in 0..self.rows() {
                    let r = i * n..(i + 1) * n;
                    let (yr, gr, mr) = (&y[r.clone()], &g[r.clone()], &mask[r.clone()]);
                    let gsum: f64 = gr.iter().zip(mr).filter(|(_, &s)| s).map(|(x, _)| x).sum();
                    for j in 0..n {
                        if mr[j] {
                            out[i * n + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::NormalizeRows(norms) => {
                let n = self.cols();
                let x = inputs[0].data();
                let mut out = vec![0.0; g.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let r = i * n..(i + 1) * n;
                    let (xr, gr) = (&x[r.clone()], &g[r.clone()]);
                    let denom = norm.max(NORM_EPS);
                    let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[i * n + j] = gr[j] / denom;
                        // below the floor the denominator is constant
                        if norm > NORM_EPS {
                            out[i * n + j] -= gx * xr[j] / (norm * norm * norm);
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::SegmentMaxPool(argmax) => {
                let n = self.cols();
                let mut out = vec![0.0; inputs[0].numel()];
                for (flat, &src_row) in argmax.iter().enumerate() {
                    out[src_row * n + flat % n] += g[flat];
                }
                vec![Some(out)]
            }
            Op::MeanRows => {
                let m = inputs[0].rows() as f64;
                let mut out = Vec::with_capacity(inputs[0].numel());
                for _ in 0..inputs[0].rows() {
                    out.extend(g.iter().map(|x| x / m));
                }
                vec![Some(out)]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Reshape => vec![Some(g.to_vec())],
            Op::ConcatCols(widths) => {
                let m = self.rows();
                let total = self.cols();
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(p, &w)| {
                        let part = want(p).then(|| {
                            let mut out = Vec::with_capacity(m * w);
                            for i in 0..m {
                                out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            out
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }
            Op::ConcatRows(heights) => {
                let n = self.cols();
                let mut start = 0;
                heights
                    .iter()
                    .enumerate()
                    .map(|(p, &h)| {
                        let part = want(p).then(|| g[start * n..(start + h) * n].to_vec());
                        start += h;
                        part
                    })
                    .collect()
            }
            Op::SelectRows(indices) => {
                let n = self.cols();
                let mut out = vec![0.0; inputs[0].numel()];
                for (k, &i) in indices.iter().enumerate() {
                    out[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(out)]
            }
        }
    }
}
