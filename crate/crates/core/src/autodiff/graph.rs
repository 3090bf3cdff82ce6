//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order and the reverse sweep walks it backwards once.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Slope of the sigmoid-weighted linear unit `x * sigmoid(1.702 x)`.
pub const ACT_SLOPE: f64 = 1.702;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    BroadcastRows(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    Slice { src: Var, outer: usize, inner: usize, start: usize, src_len: usize },
    MeanPool { src: Var, grid: [usize; 3], pool: usize },
    Upsample { src: Var, grid: [usize; 3], pool: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Act(Var),
    Embedding { table: Var, idx: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with per-leaf gradient accumulators.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c = op(a) * op(b) + beta * c` with row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against m, k, n above and the
    // strides address only elements inside those slices.
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that participates in differentiation when `t.is_trainable()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.is_trainable(),
        )
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    pub fn act(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(ACT_SLOPE * x), Op::Act(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- linear algebra and layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (need 2-D)")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (t={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} (need 2-D)")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Repeat a `[n]` or `[1, n]` vector into `[rows, n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        let n = match s {
            [n] => *n,
            [1, n] => *n,
            _ => return Err(Error::shape("broadcast_rows", format!("{s:?}"))),
        };
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows, n], out, Op::BroadcastRows(a), rg))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    /// `x * row` with `row` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        let b = self.broadcast_rows(row, rows)?;
        self.mul(x, b)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src_len = s[axis];
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * src_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                src: a,
                outer,
                inner,
                start,
                src_len,
            },
            rg,
        ))
    }

    /// Average `[gx*gy*gz, C]` token features over non-overlapping `pool^3` blocks.
    ///
    /// Token `i` sits at `(x, y, z)` with `i = x + gx * (y + gy * z)`.
    pub fn mean_pool3d(&mut self, a: Var, grid: [usize; 3], pool: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let tokens: usize = grid.iter().product();
        if s.len() != 2 || s[0] != tokens || pool == 0 || grid.iter().any(|g| g % pool != 0) {
            return Err(Error::shape(
                "mean_pool3d",
                format!("{s:?} grid {grid:?} pool {pool}"),
            ));
        }
        let c = s[1];
        let coarse = [grid[0] / pool, grid[1] / pool, grid[2] / pool];
        let n_coarse: usize = coarse.iter().product();
        let src = self.value(a);
        let mut out = vec![0.0; n_coarse * c];
        let w = 1.0 / (pool * pool * pool) as f64;
        for (i, row) in src.chunks_exact(c).enumerate() {
            let j = coarse_index(i, grid, coarse, pool);
            for (o, v) in out[j * c..(j + 1) * c].iter_mut().zip(row) {
                *o += v * w;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n_coarse, c], out, Op::MeanPool { src: a, grid, pool }, rg))
    }

    /// Nearest-neighbour upsampling from the coarse grid back to `grid`.
    pub fn upsample3d(&mut self, a: Var, grid: [usize; 3], pool: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if pool == 0 || grid.iter().any(|g| g % pool != 0) {
            return Err(Error::shape("upsample3d", format!("grid {grid:?} pool {pool}")));
        }
        let coarse = [grid[0] / pool, grid[1] / pool, grid[2] / pool];
        let n_coarse: usize = coarse.iter().product();
        if s.len() != 2 || s[0] != n_coarse {
            return Err(Error::shape("upsample3d", format!("{s:?} for coarse {coarse:?}")));
        }
        let c = s[1];
        let tokens: usize = grid.iter().product();
        let src = self.value(a);
        let mut out = Vec::with_capacity(tokens * c);
        for i in 0..tokens {
            let j = coarse_index(i, grid, coarse, pool);
            out.extend_from_slice(&src[j * c..(j + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![tokens, c], out, Op::Upsample { src: a, grid, pool }, rg))
    }

    // ---- row-wise reductions over the last axis ----

    pub fn softmax(&mut self, a: Var) -> Var {
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), rg)
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = last_dim(&s);
        let out: Vec<f64> = self.value(a).chunks_exact(n).map(logsumexp).collect();
        let shape = if s.is_empty() { Vec::new() } else { s[..s.len() - 1].to_vec() };
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::LogSumExp(a), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let n = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LayerNorm { src: a, inv_std }, rg)
    }

    // ---- indexing ----

    /// Rows of `table` (`[V, C]`) selected by `idx`, giving `[idx.len(), C]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table {s:?}")));
        }
        let (v, c) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("index {bad} >= vocab {v}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = src[i, idx[i]]` for a `[m, n]` source.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape("gather", format!("{s:?} with {} indices", idx.len())));
        }
        let n = s[1];
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} >= {n}")));
        }
        let vals = self.value(src);
        let out = idx.iter().enumerate().map(|(r, &j)| vals[r * n + j]).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    // ---- reverse sweep ----

    /// Accumulate `d loss / d leaf` into every trainable leaf.
    ///
    /// Calling this twice without [`Graph::zero_grads`] doubles the stored
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    None => self.leaf_grads[i] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((d, x), w) in d.iter_mut().zip(g).zip(vb) {
                        *d += x * w;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, x), w) in d.iter_mut().zip(g).zip(va) {
                        *d += x * w;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x * s));
            }
            Op::AddConst(a) | Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = dC * op(B)^T
                self.acc(grads, *a, |d| gemm(m, n, k, g, false, vb, !*trans_b, d, 1.0));
                if *trans_b {
                    // B is [n, k]: dB = dC^T * A
                    self.acc(grads, *b, |d| gemm(n, m, k, g, true, va, false, d, 1.0));
                } else {
                    // B is [k, n]: dB = A^T * dC
                    debug_assert_eq!(sb[0], k);
                    self.acc(grads, *b, |d| gemm(k, m, n, va, true, g, false, d, 1.0));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                self.acc(grads, *a, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let n = node.shape[1];
                self.acc(grads, *a, |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Concat { parts, outer, inner } => {
                let total = node.shape.iter().product::<usize>() / outer;
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len() / outer;
                    self.acc(grads, *p, |d| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut d[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
                let _ = inner;
            }
            Op::Slice {
                src,
                outer,
                inner,
                start,
                src_len,
            } => {
                let len = g.len() / outer;
                self.acc(grads, *src, |d| {
                    for o in 0..*outer {
                        let base = (o * src_len + start) * inner;
                        add_into(&mut d[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            Op::MeanPool { src, grid, pool } => {
                let c = node.shape[1];
                let coarse = [grid[0] / pool, grid[1] / pool, grid[2] / pool];
                let w = 1.0 / (pool * pool * pool) as f64;
                self.acc(grads, *src, |d| {
                    for (i, row) in d.chunks_exact_mut(c).enumerate() {
                        let j = coarse_index(i, *grid, coarse, *pool);
                        for (r, x) in row.iter_mut().zip(&g[j * c..(j + 1) * c]) {
                            *r += x * w;
                        }
                    }
                });
            }
            Op::Upsample { src, grid, pool } => {
                let c = node.shape[1];
                let coarse = [grid[0] / pool, grid[1] / pool, grid[2] / pool];
                self.acc(grads, *src, |d| {
                    for (i, row) in g.chunks_exact(c).enumerate() {
                        let j = coarse_index(i, *grid, coarse, *pool);
                        add_into(&mut d[j * c..(j + 1) * c], row);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = last_dim(&node.shape);
                self.acc(grads, *a, |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dd, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(&node.shape);
                self.acc(grads, *a, |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((dd, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let n = last_dim(self.shape(*a));
                self.acc(grads, *a, |d| {
                    for (r, (dr, xr)) in d.chunks_exact_mut(n).zip(x.chunks_exact(n)).enumerate() {
                        let lse = y[r];
                        for (dd, xx) in dr.iter_mut().zip(xr) {
                            *dd += g[r] * (xx - lse).exp();
                        }
                    }
                });
            }
            Op::LayerNorm { src, inv_std } => {
                let n = last_dim(&node.shape);
                self.acc(grads, *src, |d| {
                    for (r, ((dr, gr), yr)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((dd, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += inv_std[r] * (gg - mg - yy * mgy);
                        }
                    }
                });
            }
            Op::Act(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((dd, gg), xx) in d.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(ACT_SLOPE * xx);
                        *dd += gg * (s + ACT_SLOPE * xx * s * (1.0 - s));
                    }
                });
            }
            Op::Embedding { table, idx } => {
                let c = node.shape[1];
                self.acc(grads, *table, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Gather { src, idx } => {
                let n = self.shape(*src)[1];
                self.acc(grads, *src, |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * n + j] += g[r];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((dd, gg), xx) in d.iter_mut().zip(g).zip(x) {
                        *dd += gg / xx;
                    }
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |d| {
                    for ((dd, gg), yy) in d.iter_mut().zip(g).zip(y) {
                        *dd += gg * yy;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn coarse_index(i: usize, grid: [usize; 3], coarse: [usize; 3], pool: usize) -> usize {
    let x = i % grid[0];
    let y = (i / grid[0]) % grid[1];
    let z = i / (grid[0] * grid[1]);
    (x / pool) + coarse[0] * ((y / pool) + coarse[1] * (z / pool))
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
