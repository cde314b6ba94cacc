//! Dense f64 tensors and a define-by-run reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a plain value: shape, row-major values, a `requires_grad`
//! flag and (after a backward pass) a gradient of the same shape. A [`Tape`]
//! records one forward computation as a flat list of nodes; `backward`
//! replays it in exact reverse order, accumulating gradients additively
//! whenever a node feeds several downstream operations. Tapes are rebuilt
//! per forward pass and are single-threaded; tensors may be shared
//! read-only across threads once no backward pass will touch them.

use crate::error::{Error, Result};

/// Norm guard for cosine similarity and L2 normalization; zero vectors are
/// treated as having this norm instead of erroring.
pub const NORM_EPS: f64 = 1e-12;

/// Additive key bias used to exclude padded positions from attention.
pub const MASKED_LOGIT: f64 = -1e30;

// ── Tensor ──────────────────────────────────────────────────────────────

/// Dense 64-bit tensor with optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian-initialized tensor, used for parameter construction.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let values = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to values; the shape is fixed at construction.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient; rejected for non-trainable tensors and shape
    /// mismatches so the tensor invariants cannot be violated.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::contract(
                "gradient assigned to a tensor with requires_grad=false",
            ));
        }
        if grad.len() != self.values.len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match tensor of {} elements",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

// ── Tape ────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddConst { x: Var },
    Silu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, scale: Var, offset: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Cosine { a: Var, b: Var },
    Normalize { x: Var },
    MaxMany { xs: Vec<Var>, argmax: usize },
    StackScalars { xs: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SelectRows { x: Var, indices: Vec<usize> },
    Reshape { x: Var },
    SumAll { x: Var },
    LogSumExp { x: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation. Node order is topological by
/// construction: inputs always precede the operations consuming them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.node(v).values.len(), 1);
        self.node(v).values[0]
    }

    /// Gradient of a node, available after `backward`. `None` when the node
    /// did not participate in the differentiated subgraph.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ── Node constructors ───────────────────────────────────────────

    /// Enters an external tensor onto the tape, inheriting `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Constant node; never receives a gradient. Zero-sized shapes are
    /// allowed here (e.g. the empty text segment of a fused document).
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::contract(format!(
                "constant shape {shape:?} implies {numel} elements, got {}",
                values.len()
            )));
        }
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    /// Matrix product of `a: [m,k]` and `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a), self.value(b), m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::Transpose { x }))
    }

    /// Elementwise sum. `b` may be broadcast: its shape is aligned to the
    /// trailing axes of `a`, and 1-length (or missing leading) axes stretch.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, true)
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, false)
    }

    fn elementwise(&mut self, a: Var, b: Var, is_add: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = if is_add { "add" } else { "mul" };
        if !broadcast_compatible(&sa, &sb) {
            return Err(Error::Dimension {
                op: if is_add { "add" } else { "mul" },
                lhs: sa,
                rhs: sb,
            });
        }
        let _ = op_name;
        let map = BroadcastMap::new(&sa, &sb);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; av.len()];
        for i in 0..av.len() {
            let bi = map.index(i);
            out[i] = if is_add { av[i] + bv[bi] } else { av[i] * bv[bi] };
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let op = if is_add { Op::Add { a, b } } else { Op::Mul { a, b } };
        Ok(self.push(sa, out, rg, op))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let values = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, values, rg, Op::Scale { x, factor })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let values = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, values, rg, Op::AddConst { x })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, values, rg, Op::Silu { x })
    }

    /// Row-wise softmax with per-row max subtraction. Each output row sums
    /// to 1 and all entries lie in [0,1].
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "softmax_rows expects 2-D, got {s:?}"
            )));
        }
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows received NaN input".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(s, out, rg, Op::SoftmaxRows { x }))
    }

    /// Per-row layer normalization over the last axis with learned scale
    /// and offset vectors.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("layer_norm expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if self.shape(scale) != [cols] || self.shape(offset) != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(scale).to_vec(),
            });
        }
        let xv = self.value(x);
        let sv = self.value(scale).to_vec();
        let ov = self.value(offset).to_vec();
        let mut out = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * rstd * sv[j] + ov[j];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(scale).requires_grad
            || self.node(offset).requires_grad;
        Ok(self.push(
            s,
            out,
            rg,
            Op::LayerNorm {
                x,
                scale,
                offset,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Cosine similarity of two equal-length vectors; zero vectors are
    /// guarded by [`NORM_EPS`] so padded or empty inputs cannot crash.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a).values.len(), self.node(b).values.len());
        if na != nb {
            return Err(Error::Dimension {
                op: "cosine",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let norm_a = l2(av).max(NORM_EPS);
        let norm_b = l2(bv).max(NORM_EPS);
        let c = dot / (norm_a * norm_b);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![1], vec![c], rg, Op::Cosine { a, b }))
    }

    /// L2 normalization of a vector, with the same zero-vector guard as
    /// [`Tape::cosine`].
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = l2(xv).max(NORM_EPS);
        let values = xv.iter().map(|v| v / n).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, values, rg, Op::Normalize { x })
    }

    /// Maximum of a set of scalar nodes. The subgradient flows to the first
    /// input attaining the maximum, so ties resolve to the lowest index.
    pub fn max_many(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("max_many needs at least one input"));
        }
        let mut best = f64::NEG_INFINITY;
        let mut argmax = 0;
        for (i, &v) in xs.iter().enumerate() {
            if self.node(v).values.len() != 1 {
                return Err(Error::contract("max_many inputs must be scalars"));
            }
            let val = self.value_scalar(v);
            if val > best {
                best = val;
                argmax = i;
            }
        }
        let rg = xs.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(
            vec![1],
            vec![best],
            rg,
            Op::MaxMany {
                xs: xs.to_vec(),
                argmax,
            },
        ))
    }

    /// Gathers scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("stack_scalars needs at least one input"));
        }
        let mut values = Vec::with_capacity(xs.len());
        for &v in xs {
            if self.node(v).values.len() != 1 {
                return Err(Error::contract("stack_scalars inputs must be scalars"));
            }
            values.push(self.value_scalar(v));
        }
        let rg = xs.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(vec![xs.len()], values, rg, Op::StackScalars { xs: xs.to_vec() }))
    }

    /// Stacks 2-D parts on top of each other. Zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let cols = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: s,
                });
            }
            rows += s[0];
            values.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(
            vec![rows, cols],
            values,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stacks 2-D parts side by side (same row count).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let rows = self.shape(parts[0])[0];
        let mut total_cols = 0;
        for &p in parts {
            let s = self.shape(p).to_vec();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![rows, total_cols],
                    rhs: s,
                });
            }
            total_cols += s[1];
        }
        let mut values = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let pv = self.value(p);
            for r in 0..rows {
                values[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let rg = parts.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(
            vec![rows, total_cols],
            values,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Gathers rows of a 2-D node by index; repeated indices accumulate
    /// gradient into the same source row (embedding-lookup semantics).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "select_rows expects 2-D, got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let xv = self.value(x);
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![indices.len(), c],
            values,
            rg,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.node(x).values.len() {
            return Err(Error::contract(format!(
                "reshape to {shape:?} incompatible with {} elements",
                self.node(x).values.len()
            )));
        }
        let values = self.value(x).to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, values, rg, Op::Reshape { x }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum = self.value(x).iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![sum], rg, Op::SumAll { x })
    }

    /// Max-shifted log-sum-exp of a vector node; overflow-free for any
    /// finite inputs.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::contract("log_sum_exp of an empty vector"));
        }
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xv.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![1], vec![lse], rg, Op::LogSumExp { x }))
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let stacked = self.stack_scalars(xs)?;
        let sum = self.sum_all(stacked);
        Ok(self.scale(sum, 1.0 / xs.len() as f64))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` node that the
    /// loss depends on receives a gradient; running twice on the same tape
    /// is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; rebuild the tape before differentiating again"
                    .into(),
            ));
        }
        if self.node(loss).values.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.distribute(i, &g, &op);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn acc_at(&mut self, v: Var, index: usize, contribution: f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].values.len();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()[index] += contribution;
    }

    fn distribute(&mut self, node_idx: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(g, self.value(*b), m, n, k);
                    self.acc(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(self.value(*a), g, m, k, n);
                    self.acc(*b, &db);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Add { a, b } => {
                self.acc(*a, g);
                if self.nodes[b.0].requires_grad {
                    let db = reduce_to_shape(g, self.shape(*a), self.shape(*b));
                    self.acc(*b, &db);
                }
            }
            Op::Mul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let map = BroadcastMap::new(&sa, &sb);
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b);
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv[map.index(i)])
                        .collect();
                    self.acc(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a);
                    let numel_b: usize = sb.iter().product();
                    let mut db = vec![0.0; numel_b];
                    for (i, gi) in g.iter().enumerate() {
                        db[map.index(i)] += gi * av[i];
                    }
                    self.acc(*b, &db);
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                self.acc(*x, &dx);
            }
            Op::AddConst { x } => {
                self.acc(*x, g);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| {
                        let s = sigmoid(v);
                        gi * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let yv = &self.nodes[node_idx].values;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &yv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.acc(*x, &dx);
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                mean,
                rstd,
            } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x).to_vec();
                let sv = self.value(*scale).to_vec();
                let mut dx = vec![0.0; rows * cols];
                let mut dscale = vec![0.0; cols];
                let mut doffset = vec![0.0; cols];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * sv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dscale[j] += gr[j] * xhat;
                        doffset[j] += gr[j];
                    }
                    let inv = 1.0 / cols as f64;
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rs;
                        let dxhat = gr[j] * sv[j];
                        dx[r * cols + j] =
                            rs * (dxhat - sum_dxhat * inv - xhat * sum_dxhat_xhat * inv);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*scale, &dscale);
                self.acc(*offset, &doffset);
            }
            Op::Cosine { a, b } => {
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                let norm_a_raw = l2(&av);
                let norm_b_raw = l2(&bv);
                let na = norm_a_raw.max(NORM_EPS);
                let nb = norm_b_raw.max(NORM_EPS);
                let c = self.nodes[node_idx].values[0];
                let gs = g[0];
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = av
                        .iter()
                        .zip(&bv)
                        .map(|(&ai, &bi)| {
                            let mut d = bi / (na * nb);
                            if norm_a_raw > NORM_EPS {
                                d -= c * ai / (na * na);
                            }
                            gs * d
                        })
                        .collect();
                    self.acc(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = bv
                        .iter()
                        .zip(&av)
                        .map(|(&bi, &ai)| {
                            let mut d = ai / (na * nb);
                            if norm_b_raw > NORM_EPS {
                                d -= c * bi / (nb * nb);
                            }
                            gs * d
                        })
                        .collect();
                    self.acc(*b, &db);
                }
            }
            Op::Normalize { x } => {
                let xv = self.value(*x).to_vec();
                let norm_raw = l2(&xv);
                let n = norm_raw.max(NORM_EPS);
                let dx: Vec<f64> = if norm_raw > NORM_EPS {
                    let dot: f64 = g.iter().zip(&xv).map(|(gi, xi)| gi * xi).sum();
                    g.iter()
                        .zip(&xv)
                        .map(|(gi, xi)| gi / n - xi * dot / (n * n * n))
                        .collect()
                } else {
                    g.iter().map(|gi| gi / n).collect()
                };
                self.acc(*x, &dx);
            }
            Op::MaxMany { xs, argmax } => {
                self.acc_at(xs[*argmax], 0, g[0]);
            }
            Op::StackScalars { xs } => {
                for (j, &v) in xs.iter().enumerate() {
                    self.acc_at(v, 0, g[j]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    self.acc(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.shape(Var(node_idx))[0];
                let total_cols = self.shape(Var(node_idx))[1];
                let mut col_off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &g[r * total_cols + col_off..r * total_cols + col_off + c],
                            );
                        }
                        self.acc(p, &dp);
                    }
                    col_off += c;
                }
            }
            Op::SelectRows { x, indices } => {
                if self.nodes[x.0].requires_grad {
                    let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0; n * c];
                    for (row, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[row * c + j];
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Op::Reshape { x } => {
                self.acc(*x, g);
            }
            Op::SumAll { x } => {
                let len = self.nodes[x.0].values.len();
                let dx = vec![g[0]; len];
                self.acc(*x, &dx);
            }
            Op::LogSumExp { x } => {
                let xv = self.value(*x).to_vec();
                let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = xv.iter().map(|v| (v - max).exp()).sum();
                let dx: Vec<f64> = xv.iter().map(|v| g[0] * (v - max).exp() / sum).collect();
                self.acc(*x, &dx);
            }
        }
    }
}

// ── Raw kernels and broadcast helpers ───────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// C[m,n] = A[m,k] · B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for t in 0..n {
                s += arow[t] * brow[t];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `b` broadcasts to `a` when, aligned to `a`'s trailing axes, every axis of
/// `b` equals `a`'s or is 1.
fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let offset = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &db)| db == a[offset + i] || db == 1)
}

/// Maps flat indices of the output (shaped like `a`) to flat indices of a
/// broadcast operand `b`.
struct BroadcastMap {
    a_shape: Vec<usize>,
    b_padded: Vec<usize>,
    b_strides: Vec<usize>,
    identity: bool,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let offset = a.len() - b.len();
        let mut b_padded = vec![1; a.len()];
        b_padded[offset..].copy_from_slice(b);
        let mut b_strides = vec![0; a.len()];
        let mut stride = 1;
        for i in (0..a.len()).rev() {
            b_strides[i] = if b_padded[i] == 1 { 0 } else { stride };
            stride *= b_padded[i];
        }
        let identity = a == b_padded.as_slice();
        BroadcastMap {
            a_shape: a.to_vec(),
            b_padded,
            b_strides,
            identity,
        }
    }

    fn index(&self, flat: usize) -> usize {
        if self.identity {
            return flat;
        }
        let mut rem = flat;
        let mut out = 0;
        for d in (0..self.a_shape.len()).rev() {
            let coord = rem % self.a_shape[d];
            rem /= self.a_shape[d];
            if self.b_padded[d] != 1 {
                out += coord * self.b_strides[d];
            }
        }
        out
    }
}
