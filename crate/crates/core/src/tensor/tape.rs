use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{axis_blocks, gelu, gelu_grad, matmul_raw, softmax_raw, transpose_raw};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    AddColBias(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskUpper(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(usize, Vec<usize>)>,
    },
    Pick {
        x: usize,
        idx: Vec<(usize, usize)>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Linear record of operations; the unit of reverse-mode differentiation.
///
/// Entries are appended in execution order, so every operation's inputs
/// precede it and a single reverse sweep visits each entry exactly once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[self.idx(v)].grad.as_deref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var { tape: self.id, idx }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn derived(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[i].value.dims2().map_err(|_| Error::Shape {
            op,
            detail: format!("expected rank 2, got {:?}", self.nodes[i].value.shape()),
        })
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xi = self.idx(x);
        let src = &self.nodes[xi].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.derived(value, &[xi], op)
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = self.dims2(ai, "matmul")?;
        let (k2, n) = self.dims2(bi, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(self.nodes[ai].value.data(), self.nodes[bi].value.data(), m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derived(value, &[ai, bi], Op::MatMul(ai, bi)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let (r, c) = self.dims2(ai, "transpose")?;
        let data = transpose_raw(self.nodes[ai].value.data(), r, c);
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        Ok(self.derived(value, &[ai], Op::Transpose(ai)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a);
        let value = self.nodes[ai].value.clone().reshape(shape.to_vec())?;
        Ok(self.derived(value, &[ai], Op::Reshape(ai)))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape(ai, bi, name)?;
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        Ok(self.derived(value, &[ai, bi], op(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `a[m×n] + bias[n]`, the bias repeated on every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(bias));
        let (m, n) = self.dims2(ai, "add_row_bias")?;
        if self.nodes[bi].value.numel() != n {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: vec![m, n],
                rhs: self.nodes[bi].value.shape().to_vec(),
            });
        }
        let b = self.nodes[bi].value.data();
        let mut data = self.nodes[ai].value.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derived(value, &[ai, bi], Op::AddRowBias(ai, bi)))
    }

    /// `a[m×n] + bias[m]`, `bias[r]` added to every entry of row `r`.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(bias));
        let (m, n) = self.dims2(ai, "add_col_bias")?;
        if self.nodes[bi].value.numel() != m {
            return Err(Error::Dimension {
                op: "add_col_bias",
                lhs: vec![m, n],
                rhs: self.nodes[bi].value.shape().to_vec(),
            });
        }
        let b = self.nodes[bi].value.data();
        let mut data = self.nodes[ai].value.data().to_vec();
        for (row, &bv) in data.chunks_exact_mut(n).zip(b) {
            for v in row {
                *v += bv;
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derived(value, &[ai, bi], Op::AddColBias(ai, bi)))
    }

    /// Multiplies row `r` of `a[m×n]` by `scale[r]`.
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (ai, si) = (self.idx(a), self.idx(scale));
        let (m, n) = self.dims2(ai, "scale_rows")?;
        if self.nodes[si].value.numel() != m {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: self.nodes[si].value.shape().to_vec(),
            });
        }
        let s = self.nodes[si].value.data();
        let mut data = self.nodes[ai].value.data().to_vec();
        for (row, &sv) in data.chunks_exact_mut(n).zip(s) {
            for v in row {
                *v *= sv;
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.derived(value, &[ai, si], Op::ScaleRows(ai, si)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ai = self.idx(a);
        self.map_unary(a, |v| v * c, Op::Scale(ai, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.map_unary(a, gelu, Op::Gelu(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        self.map_unary(a, sigmoid, Op::Sigmoid(ai))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.idx(a);
        let shape = self.nodes[ai].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let data = softmax_raw(self.nodes[ai].value.data(), &shape, axis);
        let value = Tensor { shape, data };
        Ok(self.derived(value, &[ai], Op::Softmax { x: ai, axis }))
    }

    /// Sets every entry above the main diagonal of a rank-2 tensor to `-inf`.
    pub fn mask_upper(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let (r, c) = self.dims2(ai, "mask_upper")?;
        let mut data = self.nodes[ai].value.data().to_vec();
        for i in 0..r {
            for v in &mut data[i * c + (i + 1).min(c)..(i + 1) * c] {
                *v = f64::NEG_INFINITY;
            }
        }
        let value = Tensor {
            shape: vec![r, c],
            data,
        };
        Ok(self.derived(value, &[ai], Op::MaskUpper(ai)))
    }

    /// Layer normalization over the last axis of `x[m×n]` with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (m, n) = self.dims2(xi, "layer_norm")?;
        for &p in &[gi, bi] {
            if self.nodes[p].value.numel() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[xi].value.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.derived(
            value,
            &[xi, gi, bi],
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table[V×H]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let (v, h) = self.dims2(ti, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        if ids.is_empty() {
            return Err(Error::Shape {
                op: "embedding",
                detail: "no ids".into(),
            });
        }
        let src = self.nodes[ti].value.data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        let value = Tensor {
            shape: vec![ids.len(), h],
            data,
        };
        Ok(self.derived(
            value,
            &[ti],
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rows of `x[m×n]` at `idx`, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let (m, n) = self.dims2(xi, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("indices {idx:?} invalid for {m} rows"),
            });
        }
        let src = self.nodes[xi].value.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor {
            shape: vec![idx.len(), n],
            data,
        };
        Ok(self.derived(
            value,
            &[xi],
            Op::GatherRows {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Sums parts into a zero `rows×n` matrix: row `j` of a part lands on row `idx[j]`.
    /// Parts are added in the order given.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], rows: usize, cols: usize) -> Result<Var> {
        let mut recorded = Vec::with_capacity(parts.len());
        let mut data = vec![0.0; rows * cols];
        for (v, idx) in parts {
            let vi = self.idx(*v);
            let (len, n) = self.dims2(vi, "scatter_rows")?;
            if n != cols || len != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::Dimension {
                    op: "scatter_rows",
                    lhs: vec![len, n],
                    rhs: vec![idx.len(), cols],
                });
            }
            let src = self.nodes[vi].value.data();
            for (j, &r) in idx.iter().enumerate() {
                for (o, &s) in data[r * cols..(r + 1) * cols].iter_mut().zip(&src[j * n..(j + 1) * n]) {
                    *o += s;
                }
            }
            recorded.push((vi, idx.clone()));
        }
        let inputs: Vec<usize> = recorded.iter().map(|(i, _)| *i).collect();
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        Ok(self.derived(value, &inputs, Op::ScatterRows { parts: recorded }))
    }

    /// Entries `x[r][c]` of a rank-2 tensor, as a vector.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xi = self.idx(x);
        let (m, n) = self.dims2(xi, "pick")?;
        if idx.is_empty() || idx.iter().any(|&(r, c)| r >= m || c >= n) {
            return Err(Error::Shape {
                op: "pick",
                detail: format!("indices invalid for {m}×{n}"),
            });
        }
        let src = self.nodes[xi].value.data();
        let data = idx.iter().map(|&(r, c)| src[r * n + c]).collect();
        let value = Tensor {
            shape: vec![idx.len()],
            data,
        };
        Ok(self.derived(
            value,
            &[xi],
            Op::Pick {
                x: xi,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Extent-`len` window of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x);
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, ext, inner) = axis_blocks(&shape, axis);
        let src = self.nodes[xi].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.derived(value, &[xi], Op::Slice { x: xi, axis, start }))
    }

    /// Splits `x` into `parts` equal windows along `axis`.
    pub fn chunk(&mut self, x: Var, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "chunk",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        if parts == 0 || !shape[axis].is_multiple_of(parts) {
            return Err(Error::Divisibility {
                what: "chunk extent",
                value: shape[axis],
                by: parts,
            });
        }
        let width = shape[axis] / parts;
        (0..parts).map(|p| self.slice(x, axis, p * width, width)).collect()
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect();
        let first = ids.first().ok_or(Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base_shape = self.nodes[*first].value.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {base_shape:?}"),
            });
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.derived(value, &ids.clone(), Op::Concat { xs: ids, axis }))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.nodes[ai].value.data().iter().sum();
        self.derived(Tensor::scalar(s), &[ai], Op::Sum(ai))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `targets` under `logits[T×V]`, over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let li = self.idx(logits);
        let (t, v) = self.dims2(li, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let probs = softmax_raw(self.nodes[li].value.data(), &[t, v], 1);
        let x = self.nodes[li].value.data();
        let mut total = 0.0;
        for (pos, row) in x.chunks_exact(v).enumerate() {
            if !mask[pos] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[pos]];
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.derived(
            value,
            &[li],
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ---------------------------------------------------------- backward

    /// Propagates d`loss`/d(every node) back through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss);
        if self.backward_done {
            return Err(Error::Backward("tape already differentiated; call zero_grad first".into()));
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = true;
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.nodes[li].grad = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            backprop(&rest[0], &g, before);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adds a contribution into node `idx`'s gradient buffer.
fn accum(nodes: &mut [Node], idx: usize, f: impl FnOnce(&[Node], &mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let mut g = nodes[idx]
        .grad
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[idx].value.numel()]);
    f(nodes, &mut g);
    nodes[idx].grad = Some(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &mut [Node]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            accum(nodes, a, |ns, ga| {
                let bt = transpose_raw(ns[b].value.data(), k, n);
                add_into(ga, &matmul_raw(g, &bt, m, n, k));
            });
            accum(nodes, b, |ns, gb| {
                let at = transpose_raw(ns[a].value.data(), m, k);
                add_into(gb, &matmul_raw(&at, g, k, m, n));
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accum(nodes, a, |_, ga| add_into(ga, &transpose_raw(g, r, c)));
        }
        &Op::Reshape(a) => {
            accum(nodes, a, |_, ga| add_into(ga, g));
        }
        &Op::Add(a, b) => {
            accum(nodes, a, |_, ga| add_into(ga, g));
            accum(nodes, b, |_, gb| add_into(gb, g));
        }
        &Op::Sub(a, b) => {
            accum(nodes, a, |_, ga| add_into(ga, g));
            accum(nodes, b, |_, gb| {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        &Op::Mul(a, b) => {
            accum(nodes, a, |ns, ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(ns[b].value.data()) {
                    *d += s * y;
                }
            });
            accum(nodes, b, |ns, gb| {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(ns[a].value.data()) {
                    *d += s * x;
                }
            });
        }
        &Op::AddRowBias(a, b) => {
            let n = out.shape()[1];
            accum(nodes, a, |_, ga| add_into(ga, g));
            accum(nodes, b, |_, gb| {
                for row in g.chunks_exact(n) {
                    add_into(gb, row);
                }
            });
        }
        &Op::AddColBias(a, b) => {
            let n = out.shape()[1];
            accum(nodes, a, |_, ga| add_into(ga, g));
            accum(nodes, b, |_, gb| {
                for (d, row) in gb.iter_mut().zip(g.chunks_exact(n)) {
                    *d += row.iter().sum::<f64>();
                }
            });
        }
        &Op::ScaleRows(a, s) => {
            let n = out.shape()[1];
            accum(nodes, a, |ns, ga| {
                let sv = ns[s].value.data();
                for ((drow, grow), &k) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(sv) {
                    for (d, &x) in drow.iter_mut().zip(grow) {
                        *d += x * k;
                    }
                }
            });
            accum(nodes, s, |ns, gs| {
                let av = ns[a].value.data();
                for ((d, grow), arow) in gs.iter_mut().zip(g.chunks_exact(n)).zip(av.chunks_exact(n)) {
                    *d += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        &Op::Scale(a, c) => {
            accum(nodes, a, |_, ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            });
        }
        &Op::Gelu(a) => {
            accum(nodes, a, |ns, ga| {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(ns[a].value.data()) {
                    *d += s * gelu_grad(x);
                }
            });
        }
        &Op::Sigmoid(a) => {
            accum(nodes, a, |_, ga| {
                for ((d, s), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y * (1.0 - y);
                }
            });
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_blocks(out.shape(), axis);
            let y = out.data();
            accum(nodes, x, |_, gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        &Op::MaskUpper(a) => {
            let c = out.shape()[1];
            accum(nodes, a, |_, ga| {
                for (r, (drow, grow)) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                    let keep = (r + 1).min(c);
                    add_into(&mut drow[..keep], &grow[..keep]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = out.shape()[1];
            let (x, gamma, beta) = (*x, *gamma, *beta);
            accum(nodes, x, |ns, gx| {
                let gm = ns[gamma].value.data();
                for (((drow, grow), hrow), &r) in gx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .zip(rstd)
                {
                    let dh: Vec<f64> = grow.iter().zip(gm).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, &dhj), &hj) in drow.iter_mut().zip(&dh).zip(hrow) {
                        *d += r * (dhj - mean_dh - hj * mean_dhh);
                    }
                }
            });
            accum(nodes, gamma, |_, gg| {
                for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for ((d, a), b) in gg.iter_mut().zip(grow).zip(hrow) {
                        *d += a * b;
                    }
                }
            });
            accum(nodes, beta, |_, gb| {
                for grow in g.chunks_exact(n) {
                    add_into(gb, grow);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let h = out.shape()[1];
            accum(nodes, *table, |_, gt| {
                for (grow, &id) in g.chunks_exact(h).zip(ids) {
                    add_into(&mut gt[id * h..(id + 1) * h], grow);
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let n = out.shape()[1];
            accum(nodes, *x, |_, gx| {
                for (grow, &r) in g.chunks_exact(n).zip(idx) {
                    add_into(&mut gx[r * n..(r + 1) * n], grow);
                }
            });
        }
        Op::ScatterRows { parts } => {
            let n = out.shape()[1];
            for (p, idx) in parts {
                accum(nodes, *p, |_, gp| {
                    for (drow, &r) in gp.chunks_exact_mut(n).zip(idx) {
                        add_into(drow, &g[r * n..(r + 1) * n]);
                    }
                });
            }
        }
        Op::Pick { x, idx } => {
            let n = nodes[*x].value.shape()[1];
            accum(nodes, *x, |_, gx| {
                for (&s, &(r, c)) in g.iter().zip(idx) {
                    gx[r * n + c] += s;
                }
            });
        }
        &Op::Slice { x, axis, start } => {
            let in_shape = nodes[x].value.shape().to_vec();
            let (outer, ext, inner) = axis_blocks(&in_shape, axis);
            let len = out.shape()[axis];
            accum(nodes, x, |_, gx| {
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    let w = len * inner;
                    add_into(&mut gx[base..base + w], &g[o * w..(o + 1) * w]);
                }
            });
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_blocks(out.shape(), *axis);
            let mut offset = 0;
            for &xi in xs {
                let ext = nodes[xi].value.shape()[*axis];
                accum(nodes, xi, |_, gx| {
                    let w = ext * inner;
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_into(&mut gx[o * w..(o + 1) * w], &g[src..src + w]);
                    }
                });
                offset += ext;
            }
        }
        &Op::Sum(a) => {
            accum(nodes, a, |_, ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = nodes[*logits].value.shape()[1];
            let scale = g[0] / *count as f64;
            accum(nodes, *logits, |_, gl| {
                for (pos, (drow, prow)) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                    if !mask[pos] {
                        continue;
                    }
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d += scale * p;
                    }
                    drow[targets[pos]] -= scale;
                }
            });
        }
    }
}
