//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the parent
//! handles it needs for the backward rule. Nodes are appended in execution
//! order, so the node index is already a topological order and `backward`
//! is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        replace: Vec<bool>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations for one forward/backward step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that rejects NaN/Inf outputs (verification mode).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            backward_done: false,
        }
    }

    /// A tape that skips the per-operation finiteness scan.
    pub fn unchecked() -> Self {
        Tape {
            check_finite: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last `backward`, if the node required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut t = t.clone();
        t.clear_grad();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Batched product over the leading axis: `a[g×m×k] · b[g×k×n]`, or
    /// `a[g×m×k] · b[g×n×k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batch_matmul", format!("{sa:?} · {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dim("batch_matmul", format!("{sa:?} · {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for g in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[g * m * k..(g + 1) * m * k],
                    false,
                    &bd[g * k * n..(g + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            "batch_matmul",
            value,
            Op::BatchMatMul { a, b, trans_b, batch, m, k, n },
            &[a, b],
        )
    }

    /// Adds `bias[n]` to every row of `x[...×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(bias).numel() != cols || self.shape(bias).len() != 1 {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for rows of width {cols}", self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        out.clear_grad();
        {
            let b = self.value(bias).data().to_vec();
            for row in out.data_mut().chunks_mut(cols.max(1)) {
                for (o, bv) in row.iter_mut().zip(&b) {
                    *o += *bv;
                }
            }
        }
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", v, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim("softmax", format!("axis {axis} of shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push("softmax", v, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Last-axis softmax where `valid[r * len + j] == false` excludes entry
    /// `j` of row `r` (treated as −∞, so its output is exactly zero).
    /// A row with no valid entry yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let (rows, len) = self.value(x).rows_cols();
        if valid.len() != rows * len {
            return Err(Error::dim(
                "masked_softmax",
                format!("mask of {} entries for {rows}x{len}", valid.len()),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            let keep = &valid[r * len..(r + 1) * len];
            let mut max = T::neg_infinity();
            for (v, &k) in row.iter().zip(keep) {
                if k {
                    max = max.max(*v);
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * len..(r + 1) * len];
            let mut total = T::zero();
            for j in 0..len {
                if keep[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("masked_softmax", v, Op::MaskedSoftmax { x, len }, &[x])
    }

    /// Row-wise layer normalization with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "width {d}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dt = T::from_usize_lossy(d);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let rows = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let v = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", v, Op::ConcatCols { parts: widths }, parts)
    }

    /// Selects rows (with repetition) of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::index("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let v = Tensor::new(vec![rows.len(), c], out)?;
        self.push("gather_rows", v, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Rows flagged in `replace` are overwritten by the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, replace: &[bool]) -> Result<Var> {
        let (n, c) = self.matrix(x, "replace_rows")?;
        if replace.len() != n || self.value(fill).numel() != c {
            return Err(Error::dim(
                "replace_rows",
                format!("{n}x{c} with {} flags and fill {:?}", replace.len(), self.shape(fill)),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for (r, &rep) in replace.iter().enumerate() {
            if rep {
                out[r * c..(r + 1) * c].copy_from_slice(f);
            }
        }
        let v = Tensor::new(vec![n, c], out)?;
        self.push(
            "replace_rows",
            v,
            Op::ReplaceRows { x, fill, replace: replace.to_vec() },
            &[x, fill],
        )
    }

    /// Zeroes every row not flagged in `keep`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (n, c) = self.value(x).rows_cols();
        if keep.len() != n {
            return Err(Error::dim("mask_rows", format!("{} flags for {n} rows", keep.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * c..(r + 1) * c].fill(T::zero());
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("mask_rows", v, Op::MaskRows { x, keep: keep.to_vec() }, &[x])
    }

    /// `[batch·seq × heads·dh]` → `[batch·heads × seq × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix(x, "split_heads")?;
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::dim(
                "split_heads",
                format!("[{rows}x{width}] into {batch}x{seq} with {heads} heads"),
            ));
        }
        let dh = width / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + s) * width + h * dh;
                    let to = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let v = Tensor::new(vec![batch * heads, seq, dh], out)?;
        self.push("split_heads", v, Op::SplitHeads { x, batch, seq, heads }, &[x])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::dim("merge_heads", format!("{s:?} for {batch}x{seq}x{heads}")));
        }
        let dh = s[2];
        let width = dh * heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + s) * width + h * dh;
                    let from = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let v = Tensor::new(vec![batch * seq, width], out)?;
        self.push("merge_heads", v, Op::MergeHeads { x, batch, seq, heads }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.clear_grad();
        let v = v.reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::from_usize_lossy(n);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::dim("mse_loss", "empty input"));
        }
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = total / T::from_usize_lossy(n);
        self.push("mse_loss", Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target])
    }

    /// Mean negative log-softmax of the labelled logit per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(Error::dim("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::index("cross_entropy", format!("label {bad} with {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for r in 0..b {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[r]];
        }
        let loss = total / T::from_usize_lossy(b);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    // ----------------------------------------------------------- backward

    /// Populates `grad` on every node that depends on a trainable leaf.
    ///
    /// A second call without [`Tape::reset_grads`] is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape; reset first".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Zero-initialized gradient buffer for a parent.
        fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    T::gemm(m, n, k, g, false, val(b), true, T::one(), ga);
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    T::gemm(k, m, n, val(a), true, g, false, T::one(), gb);
                }
            }
            &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                let (ad, bd) = (val(a), val(b));
                if wants(a) {
                    let ga = slot(grads, nodes, a);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        let dst = &mut ga[s * m * k..(s + 1) * m * k];
                        // trans_b: b stored n×k, dA = G·B; else dA = G·Bᵀ
                        T::gemm(m, n, k, gs, false, bs, !trans_b, T::one(), dst);
                    }
                }
                if wants(b) {
                    let gb = slot(grads, nodes, b);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // dB[n×k] = Gᵀ·A
                            T::gemm(n, m, k, gs, true, as_, false, T::one(), dst);
                        } else {
                            // dB[k×n] = Aᵀ·G
                            T::gemm(k, m, n, as_, true, gs, false, T::one(), dst);
                        }
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    add_into(slot(grads, nodes, x), g);
                }
                if wants(bias) {
                    let gb = slot(grads, nodes, bias);
                    let cols = gb.len();
                    for row in g.chunks(cols.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
                if wants(b) {
                    add_into(slot(grads, nodes, b), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
                if wants(b) {
                    for (d, &gv) in slot(grads, nodes, b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((d, &gv), &o) in slot(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((d, &gv), &o) in slot(grads, nodes, b).iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if wants(x) {
                    for (d, &gv) in slot(grads, nodes, x).iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let xv = val(x);
                    for ((d, &gv), &v) in slot(grads, nodes, x).iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let xv = val(x);
                    for ((d, &gv), &v) in slot(grads, nodes, x).iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_parts(v).1;
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if wants(x) {
                    let y = nodes[i].value.data();
                    let gx = slot(grads, nodes, x);
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::MaskedSoftmax { x, len } => {
                if wants(x) {
                    let y = nodes[i].value.data();
                    let gx = slot(grads, nodes, x);
                    for ((gr, yr), dr) in g.chunks(len).zip(y.chunks(len)).zip(gx.chunks_mut(len)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..len {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(*gain).len();
                if wants(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain);
                    let dt = T::from_usize_lossy(d);
                    let gx = slot(grads, nodes, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &(p, c) in parts {
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let c = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                    let gx = slot(grads, nodes, *x);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::ReplaceRows { x, fill, replace } => {
                let c = val(*fill).len();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (r, &rep) in replace.iter().enumerate() {
                        if !rep {
                            add_into(&mut gx[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                }
                if wants(*fill) {
                    let gf = slot(grads, nodes, *fill);
                    for (r, &rep) in replace.iter().enumerate() {
                        if rep {
                            add_into(gf, &g[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                if wants(*x) {
                    let c = if keep.is_empty() { 0 } else { g.len() / keep.len() };
                    let gx = slot(grads, nodes, *x);
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut gx[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                if wants(x) {
                    let width = nodes[x.0].value.rows_cols().1;
                    let dh = width / heads;
                    let gx = slot(grads, nodes, x);
                    for b in 0..batch {
                        for s in 0..seq {
                            for h in 0..heads {
                                let to = (b * seq + s) * width + h * dh;
                                let from = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut gx[to..to + dh], &g[from..from + dh]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                if wants(x) {
                    let dh = nodes[x.0].value.shape()[2];
                    let width = dh * heads;
                    let gx = slot(grads, nodes, x);
                    for b in 0..batch {
                        for s in 0..seq {
                            for h in 0..heads {
                                let from = (b * seq + s) * width + h * dh;
                                let to = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut gx[to..to + dh], &g[from..from + dh]);
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    add_into(slot(grads, nodes, x), g);
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    for d in slot(grads, nodes, x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let gx = slot(grads, nodes, x);
                    let s = g[0] / T::from_usize_lossy(gx.len());
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (val(pred), val(target));
                let s = g[0] * T::from_f64_lossy(2.0) / T::from_usize_lossy(p.len());
                if wants(pred) {
                    for ((d, &pv), &tv) in slot(grads, nodes, pred).iter_mut().zip(p).zip(t) {
                        *d += s * (pv - tv);
                    }
                }
                if wants(target) {
                    for ((d, &pv), &tv) in slot(grads, nodes, target).iter_mut().zip(p).zip(t) {
                        *d -= s * (pv - tv);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let s = g[0] / T::from_usize_lossy(b);
                    let gl = slot(grads, nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// (gelu(x), d gelu / dx) for the tanh approximation.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::from_f64_lossy(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}
