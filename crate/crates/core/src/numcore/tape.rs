//! Reverse-mode differentiation over 2-D values.
//!
//! A [`Tape`] owns every intermediate produced during a forward pass. Each
//! operation appends a node holding its value and enough state to push an
//! upstream gradient back to its inputs. Nodes are appended in topological
//! order, so [`Tape::backward`] is a single reverse sweep.
//!
//! Every value on the tape is a matrix; vectors are single rows and scalars
//! are `1×1`.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{Scalar, Tensor};
use crate::error::{LinkError, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Softmax {
        x: Var,
        inv_scale: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMatMulNt {
        a: Var,
        b: Var,
        groups: usize,
    },
    GroupMatMul {
        a: Var,
        b: Var,
        groups: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    RowSumSq(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        labels: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reachable and
    /// needed one.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("tape nodes are consistent")
    }

    /// Record a tensor as a leaf. Gradients flow to it iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        let (rows, cols) = tensor.as_matrix_dims()?;
        Ok(self.push(rows, cols, tensor.data().to_vec(), Op::Leaf, tensor.requires_grad))
    }

    /// A constant matrix that never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(LinkError::dim("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// A leaf matrix that receives gradient.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        let v = self.constant(rows, cols, data)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(LinkError::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(LinkError::dim("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(&[x]);
        self.push(c, r, out, Op::Transpose(x), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(LinkError::dim(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, tag: Op<T>) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, tag, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add the single row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(LinkError::dim("add_row", &[r, c], &[br, bc]));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(&[x, bias]);
        Ok(self.push(r, c, out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, out, Op::Scale(x, factor), ng)
    }

    /// `x + constant`, elementwise.
    pub fn offset(&mut self, x: Var, constant: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v + constant).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, out, Op::Offset(x), ng)
    }

    /// Row-wise `softmax(x / √scale_dim)`.
    pub fn scaled_softmax(&mut self, x: Var, scale_dim: usize) -> Result<Var> {
        if scale_dim == 0 {
            return Err(LinkError::Config("scaled_softmax needs scale_dim > 0".into()));
        }
        let (r, c) = self.dims(x);
        let inv_scale = T::of(1.0 / (scale_dim as f64).sqrt());
        let src = self.value(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(LinkError::Numeric("non-finite logits in scaled_softmax".into()));
        }
        let mut out = vec![T::zero(); r * c];
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * inv_scale));
            let mut total = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v * inv_scale - max).exp();
                total += d.f64();
            }
            let inv_total = T::of(1.0 / total);
            dst.iter_mut().for_each(|d| *d *= inv_total);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::Softmax { x, inv_scale }, ng))
    }

    /// Per-row standardization followed by the affine `gamma`, `beta`
    /// (both single rows of width `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            let (pr, pc) = self.dims(p);
            if pr != 1 || pc != c {
                return Err(LinkError::dim("layer_norm", &[r, c], &[pr, pc]));
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = T::of(inv);
            for j in 0..c {
                let h = T::of((row[j].f64() - mean) * inv);
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multiply by a fixed mask (already carrying the `1/(1-ratio)` scale).
    pub(crate) fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r * c {
            return Err(LinkError::dim("dropout", &[r, c], &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::Dropout { x, mask }, ng))
    }

    /// `x` where non-negative, `slope · x` elsewhere; `slope` is `1×1`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.dims(slope) != (1, 1) {
            let (sr, sc) = self.dims(slope);
            return Err(LinkError::dim("prelu", &[1, 1], &[sr, sc]));
        }
        let a = self.value(slope)[0];
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { a * v })
            .collect();
        let ng = self.needs(&[x, slope]);
        Ok(self.push(r, c, out, Op::Prelu { x, slope }, ng))
    }

    /// Concatenate along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LinkError::Usage("concat_cols of nothing".into()))?;
        let rows = self.dims(first).0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != rows {
                return Err(LinkError::dim("concat_cols", &[rows], &[pr, pc]));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stack along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LinkError::Usage("concat_rows of nothing".into()))?;
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != cols {
                return Err(LinkError::dim("concat_rows", &[cols], &[pr, pc]));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(LinkError::dim("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(r, w, out, Op::SliceCols { x, start }, ng))
    }

    /// Repeat each row `times` times consecutively: `G×c → (G·times)×c`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| std::iter::repeat_n(row, times).flatten().copied())
            .collect();
        let ng = self.needs(&[x]);
        self.push(r * times, c, out, Op::RepeatRows { x, times }, ng)
    }

    /// Rows of `x` picked by `rows`, in that order; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(LinkError::Usage(format!("gather_rows: row {bad} of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(rows.len(), c, out, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    fn group_sizes(&self, op: &'static str, a: Var, b: Var, groups: usize) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(LinkError::dim(op, &[ar, ac, groups], &[br, bc]));
        }
        Ok((ar / groups, br / groups))
    }

    /// Block-diagonal `a · bᵀ`: rows of `a` and `b` split into `groups`
    /// equal blocks and block `g` of `a` only meets block `g` of `b`.
    /// `(G·m)×k , (G·n)×k → (G·m)×n`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (m, n) = self.group_sizes("group_matmul_nt", a, b, groups)?;
        let (k, k2) = (self.dims(a).1, self.dims(b).1);
        if k != k2 {
            return Err(LinkError::dim("group_matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); groups * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for g in 0..groups {
            gemm_nt(
                &av[g * m * k..(g + 1) * m * k],
                &bv[g * n * k..(g + 1) * n * k],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(groups * m, n, out, Op::GroupMatMulNt { a, b, groups }, ng))
    }

    /// Block-diagonal `a · b`: `(G·m)×n , (G·n)×c → (G·m)×c`.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (m, n) = self.group_sizes("group_matmul", a, b, groups)?;
        let (an, c) = (self.dims(a).1, self.dims(b).1);
        if an != n {
            return Err(LinkError::dim("group_matmul", &[m, an], &[n, c]));
        }
        let mut out = vec![T::zero(); groups * m * c];
        let (av, bv) = (self.value(a), self.value(b));
        for g in 0..groups {
            gemm_nn(
                &av[g * m * n..(g + 1) * m * n],
                &bv[g * n * c..(g + 1) * n * c],
                &mut out[g * m * c..(g + 1) * m * c],
                m,
                n,
                c,
            );
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(groups * m, c, out, Op::GroupMatMul { a, b, groups }, ng))
    }

    /// Scale every row to unit L2 norm. A zero row is a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(LinkError::Numeric(format!("cannot normalize a row of norm {norm}")));
            }
            let inv = T::of(1.0 / norm);
            out.extend(row.iter().map(|&v| v * inv));
            norms.push(T::of(norm));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::NormalizeRows { x, norms }, ng))
    }

    /// Per-row sum of squares: `r×c → r×1`.
    pub fn row_sum_sq(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum())
            .collect();
        let ng = self.needs(&[x]);
        self.push(r, 1, out, Op::RowSumSq(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().map(|v| v.f64()).sum::<f64>();
        let ng = self.needs(&[x]);
        self.push(1, 1, vec![T::of(total)], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let total = vals.iter().map(|v| v.f64()).sum::<f64>() / vals.len().max(1) as f64;
        let ng = self.needs(&[x]);
        self.push(1, 1, vec![T::of(total)], Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` (any shape) against
    /// 0/1 `labels`, with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, labels: &[T]) -> Result<Var> {
        let vals = self.value(p);
        if vals.len() != labels.len() {
            return Err(LinkError::Usage(format!(
                "bce: {} probabilities vs {} labels",
                vals.len(),
                labels.len()
            )));
        }
        let n = vals.len().max(1) as f64;
        let loss = vals
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| {
                let pc = pv.f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let y = y.f64();
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.needs(&[p]);
        Ok(self.push(
            1,
            1,
            vec![T::of(loss)],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Propagate d`loss`/d(node) to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(LinkError::Usage(format!("backward needs a scalar loss, got {r}×{c}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                if let Some(ga) = self.slot(grads, a) {
                    gemm_nt(g, self.value(b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm_tn(self.value(a), g, gb, k, m, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                if let Some(ga) = self.slot(grads, a) {
                    gemm_nn(g, self.value(b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm_tn(g, self.value(a), gb, n, m, k);
                }
            }
            &Op::Transpose(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    // node is c×r of an r×c input
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(self.value(b)) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(self.value(a)) {
                        *d += s * o;
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * factor);
                }
            }
            &Op::Offset(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            &Op::Softmax { x, inv_scale } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((y, gy), dx) in node.value.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dx[j] += inv_scale * y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (h, gy) in xhat.chunks(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gy in g.chunks(cols) {
                        gb.iter_mut().zip(gy).for_each(|(d, &s)| *d += s);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::of(cols as f64);
                    for i in 0..rows {
                        let h = &xhat[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..cols {
                            let d = gy[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * h[j];
                        }
                        let (mean_d, mean_dh) = (sum_d / n, sum_dh / n);
                        let dx = &mut gx[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dx[j] += inv_std[i] * (gy[j] * gam[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            &Op::Prelu { x, slope } => {
                let xs = self.value(x);
                if let Some(gs) = self.slot(grads, slope) {
                    let mut acc = T::zero();
                    for (&v, &s) in xs.iter().zip(g) {
                        if v < T::zero() {
                            acc += v * s;
                        }
                    }
                    gs[0] += acc;
                }
                let a = self.value(slope)[0];
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xs) {
                        *d += if v >= T::zero() { s } else { a * s };
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * cols + offset..i * cols + offset + pc];
                            gp[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &s)| *d += s);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..rows {
                        let dst = &mut gx[i * xc + start..i * xc + start + cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::RepeatRows { x, times } => {
                if let Some(gx) = self.slot(grads, x) {
                    for (i, gy) in g.chunks(cols).enumerate() {
                        let src = i / times;
                        gx[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(gy)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::GatherRows { x, rows: picked } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (gy, &src) in g.chunks(cols).zip(picked) {
                        gx[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(gy)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            &Op::GroupMatMulNt { a, b, groups } => {
                let k = self.dims(a).1;
                let (m, n) = (rows / groups, cols);
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for gi in 0..groups {
                        gemm_nn(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bv[gi * n * k..(gi + 1) * n * k],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for gi in 0..groups {
                        gemm_tn(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &av[gi * m * k..(gi + 1) * m * k],
                            &mut gb[gi * n * k..(gi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                }
            }
            &Op::GroupMatMul { a, b, groups } => {
                let n = self.dims(a).1;
                let (m, c) = (rows / groups, cols);
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for gi in 0..groups {
                        gemm_nt(
                            &g[gi * m * c..(gi + 1) * m * c],
                            &bv[gi * n * c..(gi + 1) * n * c],
                            &mut ga[gi * m * n..(gi + 1) * m * n],
                            m,
                            c,
                            n,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for gi in 0..groups {
                        gemm_tn(
                            &av[gi * m * n..(gi + 1) * m * n],
                            &g[gi * m * c..(gi + 1) * m * c],
                            &mut gb[gi * n * c..(gi + 1) * n * c],
                            n,
                            m,
                            c,
                        );
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        let inv = T::one() / norms[i];
                        for j in 0..cols {
                            gx[i * cols + j] += (gy[j] - y[j] * dot) * inv;
                        }
                    }
                }
            }
            &Op::RowSumSq(x) => {
                let xc = self.dims(x).1;
                let xs = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for (i, &s) in g.iter().enumerate() {
                        for j in 0..xc {
                            gx[i * xc + j] += T::of(2.0) * xs[i * xc + j] * s;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    let share = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                if let Some(gp) = self.slot(grads, *p) {
                    let n = T::of(labels.len().max(1) as f64);
                    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
                    for ((d, &pk), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        let pf = pk.f64();
                        // the clamp is flat outside its range
                        if pf <= lo || pf >= hi {
                            continue;
                        }
                        *d += g[0] * (-y / pk + (T::one() - y) / (T::one() - pk)) / n;
                    }
                }
            }
        }
    }
}
