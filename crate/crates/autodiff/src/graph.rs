//! Define-by-run tape.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed to replay its adjoint. `Graph::backward` consumes the tape and walks
//! it once in exact reverse execution order.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Stabilizer used in every normalization denominator.
pub const NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose {
        x: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    CosineMatrix {
        a: Var,
        b: Var,
    },
    MeanRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread of work; consumed by `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
}

/// Gradients of every `requires_grad` leaf, produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Vec<f64>>,
    named: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.named.get(name).and_then(|v| self.get(*v))
    }

    pub fn take_by_name(&mut self, name: &str) -> Option<Vec<f64>> {
        let var = *self.named.get(name)?;
        self.leaves.remove(&var)
    }

    /// Names of parameters that were bound with `requires_grad`.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named
            .iter()
            .filter(|(_, v)| self.leaves.contains_key(v))
            .map(|(k, _)| k.as_str())
    }

    /// Copies the gradient of a leaf into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

/// C = alpha * A * B + beta * C with arbitrary strides (row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(max_a >= 0 && (max_a as usize) < a.len());
    assert!(max_b >= 0 && (max_b as usize) < b.len());
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` holds at least m*n contiguous row-major elements.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::Index {
                op: "var",
                index: var.0,
                bound: self.nodes.len(),
            })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf. Gradients are tracked when `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Binds a named parameter once per graph; later calls return the same leaf.
    pub fn param(&mut self, name: &str, tensor: &Tensor) -> Var {
        if let Some(v) = self.named.get(name) {
            return *v;
        }
        let v = self.leaf(tensor.clone());
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.check(x)?;
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    /// Adds a bias vector of length `cols` to every row of `x: [rows, cols]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        let (_, cols) = tx.dims2()?;
        if tb.numel() != cols {
            return Err(shape_err("add_row", tx, tb));
        }
        let bd = tb.data();
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, cols) = tx.dims2()?;
        let (tg, tb) = (self.check(gain)?, self.check(bias)?);
        if tg.numel() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != cols {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gelu { x }, rg))
    }

    /// Gathers rows of `table: [vocab, d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.check(table)?;
        let (vocab, d) = tt.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let (r, c) = tx.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, cols) = self.check(*first)?.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = self.check(*p)?;
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (rows, _) = self.check(*first)?.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.check(*p)?;
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, cols) = tx.dims2()?;
        if start + len > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: rows,
            });
        }
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, cols) = tx.dims2()?;
        if start + len > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Max-stabilized softmax along `axis` of an n-dimensional tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, shape });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; tx.numel()];
        let src = tx.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax over a square score matrix where row `i` only sees columns `0..=i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, cols) = tx.dims2()?;
        if rows != cols {
            return Err(TensorError::Invalid {
                op: "causal_softmax",
                reason: format!("expected a square matrix, got [{rows}, {cols}]"),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..r * cols + r + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..r * cols + r + 1];
            let mut total = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::CausalSoftmax { x }, rg))
    }

    /// Mean negative log-likelihood over positions where `mask` is set.
    /// An all-false mask yields a zero loss with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.check(logits)?;
        let (rows, vocab) = tl.dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: format!(
                    "{} rows but {} targets and {} mask entries",
                    rows,
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity of paired rows: `out[i] = cos(a_i, b_i)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (rows, cols) = ta.dims2()?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_rows", ta, tb));
        }
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let (x, y) = (
                &ta.data()[r * cols..(r + 1) * cols],
                &tb.data()[r * cols..(r + 1) * cols],
            );
            *o = cosine(x, y).0;
        }
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::CosineRows { a, b }, rg))
    }

    /// Pairwise cosine similarity: `out[i][j] = cos(a_i, b_j)` for `a: [m,d]`, `b: [n,d]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, d) = ta.dims2()?;
        let (n, d2) = tb.dims2()?;
        if d != d2 {
            return Err(shape_err("cosine_matrix", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = cosine(ta.row(i), tb.row(j)).0;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::CosineMatrix { a, b }, rg))
    }

    /// Column means: `[rows, cols] -> [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, cols) = tx.dims2()?;
        let mut out = vec![0.0; cols];
        for row in tx.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let value = Tensor::new(vec![1, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.check(x)?.data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, rg))
    }

    /// Reverse pass from a single-element `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(Var(idx), g);
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.adjoint(idx, &g, &mut grads)?;
        }
        // Leaves that sit past the loss on the tape are unreachable but still reported.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves
                    .entry(Var(idx))
                    .or_insert_with(|| vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            leaves,
            named: self.named,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let da = accumulate(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        1.0,
                        da,
                    );
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let db = accumulate(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        db,
                    );
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (n, _) = tb.dims2()?;
                if self.wants(*a) {
                    // dA = G · B
                    let da = accumulate(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        tb.data(),
                        (k as isize, 1),
                        1.0,
                        da,
                    );
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let db = accumulate(grads, *b, n * k);
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        (1, n as isize),
                        ta.data(),
                        (k as isize, 1),
                        1.0,
                        db,
                    );
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let d = accumulate(grads, *v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = accumulate(grads, *a, g.len());
                    for ((d, g), y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if self.wants(*b) {
                    let d = accumulate(grads, *b, g.len());
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let d = accumulate(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
            }
            Op::AddRow { x, bias } => {
                let cols = self.value(*bias).numel();
                if self.wants(*x) {
                    let d = accumulate(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.wants(*bias) {
                    let d = accumulate(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = out.dims2()?;
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let d = accumulate(grads, *gain, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let d = accumulate(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                if self.wants(*x) {
                    let d = accumulate(grads, *x, rows * cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xs = self.value(*x).data();
                let d = accumulate(grads, *x, g.len());
                for ((d, g), &v) in d.iter_mut().zip(g).zip(xs) {
                    let u = GELU_C * (v + GELU_K * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    *d += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let (_, dim) = tt.dims2()?;
                let d = accumulate(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * dim..(r + 1) * dim];
                    d[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.value(*x).dims2()?;
                let d = accumulate(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        let d = accumulate(grads, *p, n);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = out.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2()?;
                    if self.wants(*p) {
                        let d = accumulate(grads, *p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let (_, cols) = tx.dims2()?;
                let d = accumulate(grads, *x, tx.numel());
                d[start * cols..start * cols + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2()?;
                let (_, len) = out.dims2()?;
                let d = accumulate(grads, *x, tx.numel());
                for r in 0..rows {
                    for c in 0..len {
                        d[r * cols + start + c] += g[r * len + c];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let d = accumulate(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::CausalSoftmax { x } => {
                let (rows, cols) = out.dims2()?;
                let y = out.data();
                let d = accumulate(grads, *x, rows * cols);
                for r in 0..rows {
                    let span = r * cols..r * cols + r + 1;
                    let dot: f64 = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for k in span {
                        d[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let count = mask.iter().filter(|m| **m).count();
                if count == 0 {
                    return Ok(());
                }
                let (rows, vocab) = self.value(*logits).dims2()?;
                let scale = g[0] / count as f64;
                let d = accumulate(grads, *logits, rows * vocab);
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let base = r * vocab;
                    for c in 0..vocab {
                        d[base + c] += scale * probs[base + c];
                    }
                    d[base + targets[r]] -= scale;
                }
            }
            Op::CosineRows { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, cols) = ta.dims2()?;
                let mut da = vec![0.0; rows * cols];
                let mut db = vec![0.0; rows * cols];
                for (r, &gr) in g.iter().enumerate().take(rows) {
                    let span = r * cols..(r + 1) * cols;
                    cosine_adjoint(
                        &ta.data()[span.clone()],
                        &tb.data()[span.clone()],
                        gr,
                        &mut da[span.clone()],
                        &mut db[span],
                    );
                }
                self.add_into(grads, *a, &da);
                self.add_into(grads, *b, &db);
            }
            Op::CosineMatrix { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, dim) = ta.dims2()?;
                let (n, _) = tb.dims2()?;
                let mut da = vec![0.0; m * dim];
                let mut db = vec![0.0; n * dim];
                for i in 0..m {
                    for j in 0..n {
                        cosine_adjoint(
                            ta.row(i),
                            tb.row(j),
                            g[i * n + j],
                            &mut da[i * dim..(i + 1) * dim],
                            &mut db[j * dim..(j + 1) * dim],
                        );
                    }
                }
                self.add_into(grads, *a, &da);
                self.add_into(grads, *b, &db);
            }
            Op::MeanRows { x } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let d = accumulate(grads, *x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] += g[c] / rows as f64;
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                let d = accumulate(grads, *x, n);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Ok(())
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if self.wants(v) {
            let d = accumulate(grads, v, delta.len());
            d.iter_mut().zip(delta).for_each(|(d, x)| *d += x);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Returns (cosine, dot, |x|², |y|², denominator). The denominator is
/// `sqrt(|x|²·|y|²)` floored at [`NORM_EPS`], so `cos(v, v)` is exactly 1.
fn cosine(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    let den = (nx * ny).sqrt().max(NORM_EPS);
    (dot / den, dot, nx, ny, den)
}

fn cosine_adjoint(x: &[f64], y: &[f64], g: f64, dx: &mut [f64], dy: &mut [f64]) {
    let (_, dot, nx, ny, den) = cosine(x, y);
    if den <= NORM_EPS {
        for i in 0..x.len() {
            dx[i] += g * y[i] / den;
            dy[i] += g * x[i] / den;
        }
        return;
    }
    let den3 = den * den * den;
    for i in 0..x.len() {
        dx[i] += g * (y[i] / den - dot * x[i] * ny / den3);
        dy[i] += g * (x[i] / den - dot * y[i] * nx / den3);
    }
}
