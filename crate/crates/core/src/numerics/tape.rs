//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes only ever reference earlier nodes, so a
//! single reverse sweep over the node list is a valid topological traversal.

use super::kernels::{self, Conv3dGeometry};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MeanLast(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Concat(Vec<Var>),
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv3d { input: Var, kernel: Var, geom: Conv3dGeometry, cols: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    CosineDistance(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation; rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, op });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            requires_grad: tensor.requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of `x` (last axis `n`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(row).len() != cols {
            return Err(NumericsError::Shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, &[x, row], Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, &[x], Op::Scale(x, factor))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], &[x], Op::Mean(x))
    }

    /// Mean over the leading axis of a `[m, n]` matrix, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(NumericsError::Shape(format!("mean_rows expects a matrix, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let mut out = vec![0.0; n];
        for row in self.value(x).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(vec![n], out, &[x], Op::MeanRows(x)))
    }

    /// Mean over the last axis, dropping it (`[.., n]` to `[..]`).
    pub fn mean_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(NumericsError::Shape(format!("mean_last needs rank >= 2, got {shape:?}")));
        }
        let n = shape[shape.len() - 1];
        let out = self.value(x).chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        Ok(self.push(shape[..shape.len() - 1].to_vec(), out, &[x], Op::MeanLast(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NumericsError::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, &[x], Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::Shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = kernels::permute(self.value(x), &shape, perm);
        Ok(self.push(out_shape, out, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.permute(x, &[1, 0])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x);
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(NumericsError::Shape(format!(
                "slice_cols [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let n = shape[1];
        let rows = shape[0];
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], out, &[x], Op::SliceCols { x, start, len }))
    }

    /// Selects rows (leading-axis slices) of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let stride: usize = shape[1..].iter().product();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(NumericsError::Shape(format!("gather_rows {rows:?} from {shape:?}")));
        }
        let v = self.value(x);
        let out = rows.iter().flat_map(|&r| v[r * stride..(r + 1) * stride].iter().copied()).collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.push(out_shape, out, &[x], Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(NumericsError::Shape(format!(
                    "concat: trailing dims {:?} vs {tail:?}",
                    &s[1..]
                )));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, out, parts, Op::Concat(parts.to_vec())))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var, NumericsError> {
        check_temperature(temperature)?;
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            kernels::softmax_in_place(row, temperature);
        }
        Ok(self.push(self.shape(x).to_vec(), out, &[x], Op::Softmax { x, temperature }))
    }

    /// Log-softmax of `x / temperature` along the last axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var, NumericsError> {
        check_temperature(temperature)?;
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            kernels::log_softmax_in_place(row, temperature);
        }
        Ok(self.push(self.shape(x).to_vec(), out, &[x], Op::LogSoftmax { x, temperature }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(NumericsError::Shape(format!(
                "layer_norm: features {cols}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            &[x, gain, bias],
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Cross-correlation of a `[C_in, T, H, W]` volume with `[C_out, C_in, kT, kH, kW]` kernels.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var, NumericsError> {
        let geom = Conv3dGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let cols = kernels::im2col(self.value(input), &geom);
        let mut out = vec![0.0; geom.c_out * geom.out_positions()];
        kernels::gemm(
            geom.c_out,
            geom.patch_len(),
            geom.out_positions(),
            self.value(kernel),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let shape = vec![geom.c_out, geom.out[0], geom.out[1], geom.out[2]];
        Ok(self.push(shape, out, &[input, kernel], Op::Conv3d { input, kernel, geom, cols }))
    }

    /// Mean cross-entropy of `[N, C]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericsError::Shape(format!(
                "cross_entropy: logits {shape:?} for {} targets",
                targets.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::Shape(format!("target class {bad} >= {classes}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(classes).zip(targets) {
            kernels::log_softmax_in_place(row, 1.0);
            loss -= row[t];
            row.iter_mut().for_each(|v| *v = v.exp());
        }
        let n = targets.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss / n],
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Mean over rows of `1 - cos(a_i, b_i)` for `[B, d]` inputs.
    ///
    /// A row where either side has zero norm contributes exactly 1 and no gradient.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "cosine_distance")?;
        let (rows, cols) = rows_cols(self.shape(a));
        let (av, bv) = (self.value(a), self.value(b));
        let mut total = 0.0;
        for r in 0..rows {
            let (x, y) = (&av[r * cols..(r + 1) * cols], &bv[r * cols..(r + 1) * cols]);
            total += 1.0 - kernels::cosine(x, y).unwrap_or(0.0);
        }
        Ok(self.push(vec![1], vec![total / rows as f64], &[a, b], Op::CosineDistance(a, b)))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Accumulates into the adjoint of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                acc(*a, &mut |da| kernels::gemm(m, n, k, g, false, &nodes[b.0].value, true, da, 1.0));
                acc(*b, &mut |db| kernels::gemm(k, m, n, &nodes[a.0].value, true, g, false, db, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |d| add_into(d, g));
                let cols = nodes[row.0].value.len();
                acc(*row, &mut |d| {
                    for chunk in g.chunks(cols) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += f * b)),
            Op::Relu(x) => {
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gi), o) in d.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((a, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        *a += gi * kernels::gelu_derivative(*xi);
                    }
                });
            }
            Op::Tanh(x) => {
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gi), o) in d.iter_mut().zip(g).zip(out) {
                        *a += gi * (1.0 - o * o);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((a, gi), o) in d.iter_mut().zip(g).zip(out) {
                        *a += gi * o * (1.0 - o);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MeanRows(x) => {
                let m = nodes[x.0].shape[0] as f64;
                acc(*x, &mut |d| {
                    for chunk in d.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(a, b)| *a += b / m);
                    }
                });
            }
            Op::MeanLast(x) => {
                let n = *nodes[x.0].shape.last().unwrap();
                acc(*x, &mut |d| {
                    for (chunk, gi) in d.chunks_mut(n).zip(g) {
                        chunk.iter_mut().for_each(|a| *a += gi / n as f64);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = kernels::permute(g, &node.shape, &inverse);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::SliceCols { x, start, len } => {
                let n = nodes[x.0].shape[1];
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(*len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let stride = g.len() / rows.len();
                acc(*x, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * stride..(r + 1) * stride], &g[k * stride..(k + 1) * stride]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Softmax { x, temperature } => {
                let cols = *node.shape.last().unwrap();
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *di += yi * (gi - dot) / temperature;
                        }
                    }
                });
            }
            Op::LogSoftmax { x, temperature } => {
                let cols = *node.shape.last().unwrap();
                let out = &node.value;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: f64 = grow.iter().sum();
                        for ((di, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *di += (gi - yi.exp() * total) / temperature;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = *node.shape.last().unwrap();
                let gv = &nodes[gain.0].value;
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            drow[c] += rstd[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((di, gi), hi) in d.iter_mut().zip(grow).zip(hrow) {
                            *di += gi * hi;
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(cols) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Conv3d { input, kernel, geom, cols } => {
                let (co, k, p) = (geom.c_out, geom.patch_len(), geom.out_positions());
                acc(*kernel, &mut |d| kernels::gemm(co, p, k, g, false, cols, true, d, 1.0));
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; k * p];
                    kernels::gemm(k, co, p, &nodes[kernel.0].value, true, g, false, &mut dcols, 0.0);
                    acc(*input, &mut |d| kernels::col2im(&dcols, geom, d));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = nodes[logits.0].shape[1];
                let n = targets.len() as f64;
                acc(*logits, &mut |d| {
                    for ((drow, prow), &t) in d.chunks_mut(classes).zip(probs.chunks(classes)).zip(targets) {
                        for (c, (di, pi)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *di += g[0] * (pi - onehot) / n;
                        }
                    }
                });
            }
            Op::CosineDistance(a, b) => {
                let cols = *nodes[a.0].shape.last().unwrap();
                let rows = nodes[a.0].value.len() / cols;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = -g[0] / rows as f64;
                let grad_side = |x: &[f64], y: &[f64], d: &mut [f64]| {
                    for r in 0..rows {
                        let (xr, yr) = (&x[r * cols..(r + 1) * cols], &y[r * cols..(r + 1) * cols]);
                        let (nx, ny) = (kernels::norm(xr), kernels::norm(yr));
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        let cos = kernels::dot(xr, yr) / (nx * ny);
                        for c in 0..cols {
                            d[r * cols + c] += scale * (yr[c] / (nx * ny) - cos * xr[c] / (nx * nx));
                        }
                    }
                };
                acc(*a, &mut |d| grad_side(av, bv, d));
                acc(*b, &mut |d| grad_side(bv, av, d));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn check_temperature(t: f64) -> Result<(), NumericsError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::Config(format!("temperature must be positive, got {t}")))
    }
}
