use std::borrow::Cow;

use rand::Rng;

use super::scalar::{gemm_into, MatRef, Scalar};
use super::{Activation, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove that the gradient checker
/// catches broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scale the layer-norm gain gradient by 1.5.
    LayerNormGainGrad,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    SelectRow { x: Var, row: usize },
    Reshape { x: Var },
    MeanRows { x: Var, rows: Vec<usize> },
    Sum { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<T>, inv_std: Vec<T> },
    Activation { x: Var, kind: Activation },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softmax { x: Var },
    Dropout { x: Var, keep_scale: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRow { .. } => "select_row",
            Op::Reshape { .. } => "reshape",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum { .. } => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activation { .. } => "activation",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax_masked",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRow { x, .. }
            | Op::Reshape { x }
            | Op::MeanRows { x, .. }
            | Op::Sum { x }
            | Op::Activation { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Softmax { x }
            | Op::Dropout { x, .. } => vec![*x],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations recorded during a forward pass.
///
/// Nodes are appended in execution order, so creation order is a valid
/// topological order. Leaf values may borrow external storage (frozen inputs,
/// parameter banks) for the lifetime `'a`.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` when it is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient with unreachable nodes reported as zeros of length `len`.
    pub fn get_or_zero(&self, var: Var, len: usize) -> Cow<'_, [T]> {
        match self.get(var) {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(vec![T::zero(); len]),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Register a leaf tensor. Trainable leaves set `requires_grad`.
    pub fn leaf(
        &mut self,
        value: impl Into<Cow<'a, [T]>>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let value = value.into();
        if shape.contains(&0) || numel(shape) != value.len() {
            return Err(TensorError::ShapeData { shape: shape.to_vec(), len: value.len() });
        }
        Ok(self.push_node(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn input(&mut self, value: impl Into<Cow<'a, [T]>>, shape: &[usize]) -> Result<Var, TensorError> {
        self.leaf(value, shape, false)
    }

    pub fn param(&mut self, value: impl Into<Cow<'a, [T]>>, shape: &[usize]) -> Result<Var, TensorError> {
        self.leaf(value, shape, true)
    }

    fn push_node(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Var, TensorError> {
        debug_assert_eq!(value.len(), numel(&shape));
        #[cfg(debug_assertions)]
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Cow::Owned(value), shape, op, requires_grad))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Rank { op, expected: 2, shape: s.to_vec() }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), &mut out, false);
        self.push(out, vec![m, n], Op::MatMul { a, b, b_transposed: false })
    }

    /// Matrix product with the right operand transposed: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul_t", lhs: vec![m, k], rhs: vec![n, k2] });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), n, k).t(), &mut out, false);
        self.push(out, vec![m, n], Op::MatMul { a, b, b_transposed: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(out, self.shape(a).to_vec(), Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        self.push(out, self.shape(a).to_vec(), Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(out, self.shape(a).to_vec(), Op::Mul { a, b })
    }

    /// `x[..×d] + bias[d]`, broadcast over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).len() != d {
            return Err(TensorError::Shape { op: "add_bias", lhs: self.shape(x).to_vec(), rhs: self.shape(bias).to_vec() });
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(d).flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        self.push(out, self.shape(x).to_vec(), Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(out, self.shape(x).to_vec(), Op::Scale { x, factor })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Rank { op: "concat", expected: axis + 1, shape: base });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(out, shape, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::Range { op: "slice_cols", index: start + len, extent: n });
        }
        let v = self.value(x);
        let out = (0..m).flat_map(|r| v[r * n + start..r * n + start + len].iter().copied()).collect();
        self.push(out, vec![m, len], Op::SliceCols { x, start })
    }

    /// Row `row` of a matrix, as a `1×n` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "select_row")?;
        if row >= m {
            return Err(TensorError::Range { op: "select_row", index: row, extent: m });
        }
        let out = self.value(x)[row * n..(row + 1) * n].to_vec();
        self.push(out, vec![1, n], Op::SelectRow { x, row })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.value(x).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape { x })
    }

    /// Mean of the first `rows` rows of a matrix, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: usize) -> Result<Var, TensorError> {
        let (m, _) = self.matrix_dims(x, "mean_rows")?;
        if rows == 0 || rows > m {
            return Err(TensorError::Range { op: "mean_rows", index: rows, extent: m });
        }
        let mask: Vec<bool> = (0..m).map(|r| r < rows).collect();
        self.mean_rows_masked(x, &mask)
    }

    /// Mean of the rows whose `mask` entry is true, as a `1×n` matrix.
    pub fn mean_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "mean_rows")?;
        if mask.len() != m {
            return Err(TensorError::Shape { op: "mean_rows", lhs: vec![m, n], rhs: vec![mask.len()] });
        }
        let rows: Vec<usize> = (0..m).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); n];
        for &r in &rows {
            for (o, &e) in out.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                *o += e;
            }
        }
        let inv = T::one() / T::of(rows.len() as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(out, vec![1, n], Op::MeanRows { x, rows })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum { x })
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = *self.shape(x).last().ok_or(TensorError::Empty { op: "layer_norm" })?;
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(TensorError::Shape { op: "layer_norm", lhs: self.shape(x).to_vec(), rhs: self.shape(p).to_vec() });
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let rows = self.value(x).len() / d;
        let mut out = Vec::with_capacity(rows * d);
        let mut normalized = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv;
                normalized.push(xhat);
                out.push(g[j] * xhat + b[j]);
            }
        }
        self.push(out, self.shape(x).to_vec(), Op::LayerNorm { x, gain, bias, normalized, inv_std })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        self.push(out, self.shape(x).to_vec(), Op::Activation { x, kind })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(out, self.shape(x).to_vec(), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.push(out, self.shape(x).to_vec(), Op::Tanh { x })
    }

    /// Softmax over the last axis. `mask` (true = valid) is either the full
    /// tensor extent or one row long, in which case it applies to every row.
    /// Masked entries come out exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let n = *self.shape(x).last().ok_or(TensorError::Empty { op: "softmax_masked" })?;
        let total = self.value(x).len();
        if let Some(m) = mask {
            if m.len() != n && m.len() != total {
                return Err(TensorError::Shape { op: "softmax_masked", lhs: self.shape(x).to_vec(), rhs: vec![m.len()] });
            }
        }
        let valid = |i: usize| mask.is_none_or(|m| m[i % m.len()]);
        let mut out = vec![T::zero(); total];
        for (r, (row, o)) in self.value(x).chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let base = r * n;
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| valid(base + j))
                .map(|(_, &v)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(TensorError::FullyMasked { row: r })?;
            let mut denom = T::zero();
            for (j, (&v, slot)) in row.iter().zip(o.iter_mut()).enumerate() {
                if valid(base + j) {
                    *slot = (v - max).exp();
                    denom += *slot;
                }
            }
            o.iter_mut().for_each(|slot| *slot = *slot / denom);
        }
        self.push(out, self.shape(x).to_vec(), Op::Softmax { x })
    }

    /// Inverted dropout. Inference mode and `p == 0` return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let keep_scale: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale }).collect();
        let out = self.value(x).iter().zip(&keep_scale).map(|(&v, &k)| v * k).collect();
        self.push(out, self.shape(x).to_vec(), Op::Dropout { x, keep_scale })
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (b, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: vec![b, c], rhs: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = T::zero();
        for (row, &label) in self.value(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            loss += denom.ln() + max - row[label];
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        loss = loss / T::of(b as f64);
        self.push(vec![loss], vec![], Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node reachable from `loss` that requires a gradient receives one;
    /// contributions from multiple paths add.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        // Accumulator for an input's gradient, or None if it needs none.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                let dc = MatRef::new(dy, m, n);
                let av = MatRef::new(&self.nodes[a.0].value[..], m, k);
                let bv = if *b_transposed {
                    MatRef::new(&self.nodes[b.0].value[..], n, k)
                } else {
                    MatRef::new(&self.nodes[b.0].value[..], k, n)
                };
                if let Some(da) = acc!(*a) {
                    // dA = dC · B'ᵀ
                    let b_logical_t = if *b_transposed { bv } else { bv.t() };
                    gemm_into(dc, b_logical_t, da, true);
                }
                if let Some(db) = acc!(*b) {
                    if *b_transposed {
                        // B stored n×k: dB = dCᵀ · A
                        gemm_into(dc.t(), av, db, true);
                    } else {
                        gemm_into(av.t(), dc, db, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(g) = acc!(v) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = acc!(*b) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(dy).zip(bv.iter()).for_each(|((g, &d), &o)| *g += d * o);
                }
                if let Some(g) = acc!(*b) {
                    g.iter_mut().zip(dy).zip(av.iter()).for_each(|((g, &d), &o)| *g += d * o);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = acc!(*bias) {
                    let d = g.len();
                    for row in dy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *factor);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.nodes[p.0].shape[*axis] * inner;
                    if let Some(g) = acc!(p) {
                        for o in 0..outer {
                            let src = &dy[o * row + offset..o * row + offset + block];
                            g[o * block..(o + 1) * block].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += block;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[x.0].shape[1];
                let len = node.shape[1];
                if let Some(g) = acc!(*x) {
                    for (r, src) in dy.chunks(len).enumerate() {
                        g[r * n + start..r * n + start + len].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let n = node.shape[1];
                if let Some(g) = acc!(*x) {
                    g[row * n..(row + 1) * n].iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Reshape { x } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::MeanRows { x, rows } => {
                let n = node.shape[1];
                let inv = T::one() / T::of(rows.len() as f64);
                if let Some(g) = acc!(*x) {
                    for &r in rows {
                        g[r * n..(r + 1) * n].iter_mut().zip(dy).for_each(|(g, &d)| *g += d * inv);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let d = *node.shape.last().unwrap();
                let dn = T::of(d as f64);
                let gv = &self.nodes[gain.0].value;
                if let Some(g) = acc!(*gain) {
                    let mut scale = T::one();
                    if self.fault == Some(Fault::LayerNormGainGrad) {
                        scale = T::of(1.5);
                    }
                    for (drow, xrow) in dy.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            g[j] += drow[j] * xrow[j] * scale;
                        }
                    }
                }
                if let Some(g) = acc!(*bias) {
                    for drow in dy.chunks(d) {
                        g.iter_mut().zip(drow).for_each(|(g, &v)| *g += v);
                    }
                }
                if let Some(g) = acc!(*x) {
                    for (r, (drow, xrow)) in dy.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let dxhat = drow[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xrow[j];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dxhat = drow[j] * gv[j];
                            g[r * d + j] += inv * (dxhat - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = &self.nodes[x.0].value;
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).zip(xv.iter()).for_each(|((g, &d), &v)| *g += d * kind.derivative(v));
                }
            }
            Op::Sigmoid { x } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).zip(out.iter()).for_each(|((g, &d), &y)| *g += d * y * (T::one() - y));
                }
            }
            Op::Tanh { x } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).zip(out.iter()).for_each(|((g, &d), &y)| *g += d * (T::one() - y * y));
                }
            }
            Op::Softmax { x } => {
                let n = *node.shape.last().unwrap();
                if let Some(g) = acc!(*x) {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for j in 0..n {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).zip(keep_scale).for_each(|((g, &d), &k)| *g += d * k);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[logits.0].shape[1];
                let scale = dy[0] / T::of(labels.len() as f64);
                if let Some(g) = acc!(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            g[r * c + j] += (probs[r * c + j] - target) * scale;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
