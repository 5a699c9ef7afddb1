//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its inputs. [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates (`+=`) gradients into each input, so a tensor used at several
//! sites receives the sum of all contributions.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, check_tau};
use super::{rows_cols, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Tanh(usize),
    Softmax { a: usize, tau: f64 },
    L2Normalize { a: usize, norms: Vec<f64> },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Mean { a: usize, axis: usize },
    Sum(usize),
    Transpose(usize),
    GatherRows { a: usize, rows: Vec<usize> },
    Gather { a: usize, idx: Vec<usize> },
    Reshape(usize),
    SliceCols { a: usize, start: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, tau: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass. Not `Sync`; one tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Leaf gradients produced by one backward pass, indexed by the variables of that tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape if nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes. Requires exclusive access, so no `Var` can outlive it.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input; [`Tape::backward`] reports its gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Backpropagate from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if nodes[root.id].value.len() != 1 {
            return Err(Error::dim("backward", nodes[root.id].value.shape(), &[1]));
        }
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are consumed here; only leaves are reported.
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: usize, contribution: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.rows_cols();
                    let nn = bv.cols();
                    if nodes[*a].needs_grad {
                        acc(*a, kernels::matmul_nt(&g, bv.data(), m, nn, k));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, kernels::matmul_tn(av.data(), &g, m, k, nn));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect());
                    acc(*b, g.iter().zip(av).map(|(gi, ai)| gi * ai).collect());
                }
                Op::Scale(a, f) => acc(*a, g.iter().map(|v| v * f).collect()),
                Op::AddRow(a, bias) => {
                    let c = nodes[*bias].value.len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*bias, gb);
                    acc(*a, g);
                }
                Op::Tanh(a) => acc(
                    *a,
                    g.iter()
                        .zip(out.data())
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect(),
                ),
                Op::Softmax { a, tau } => {
                    let c = out.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot) / tau));
                    }
                    acc(*a, ga);
                }
                Op::L2Normalize { a, norms } => {
                    let c = out.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for ((gr, yr), nrm) in g.chunks(c).zip(out.data().chunks(c)).zip(norms) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / nrm));
                    }
                    acc(*a, ga);
                }
                Op::LayerNorm { a, inv_std } => {
                    let c = out.cols();
                    let nc = c as f64;
                    let mut ga = Vec::with_capacity(g.len());
                    for ((gr, yr), r) in g.chunks(c).zip(out.data().chunks(c)).zip(inv_std) {
                        let mean_g = gr.iter().sum::<f64>() / nc;
                        let mean_gy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / nc;
                        ga.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(gi, yi)| r * (gi - mean_g - yi * mean_gy)),
                        );
                    }
                    acc(*a, ga);
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for &p in parts {
                            let len = nodes[p].value.len();
                            acc(p, g[offset..offset + len].to_vec());
                            offset += len;
                        }
                    } else {
                        let total = out.cols();
                        let mut col = 0;
                        for &p in parts {
                            let pc = nodes[p].value.cols();
                            let gp = g
                                .chunks(total)
                                .flat_map(|row| row[col..col + pc].iter().copied())
                                .collect();
                            acc(p, gp);
                            col += pc;
                        }
                    }
                }
                Op::Mean { a, axis } => {
                    let (r, c) = nodes[*a].value.rows_cols();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = if *axis == 0 {
                                g[j] / r as f64
                            } else {
                                g[i] / c as f64
                            };
                        }
                    }
                    acc(*a, ga);
                }
                Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.len()]),
                Op::Transpose(a) => {
                    let (r, c) = nodes[*a].value.rows_cols();
                    acc(*a, kernels::transpose(&g, c, r));
                }
                Op::GatherRows { a, rows } => {
                    let av = &nodes[*a].value;
                    let c = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += g[k * c + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Gather { a, idx } => {
                    let mut ga = vec![0.0; nodes[*a].value.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i] += g[k];
                    }
                    acc(*a, ga);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::SliceCols { a, start } => {
                    let av = &nodes[*a].value;
                    let (r, c) = av.rows_cols();
                    let len = out.cols();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(*a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    tau,
                    probs,
                } => {
                    let k = nodes[*logits].value.cols();
                    let scale = g[0] / (targets.len() as f64 * tau);
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * k + t] -= scale;
                    }
                    acc(*logits, gl);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix_dims("matmul", &a)?;
        let (k2, n) = matrix_dims("matmul", &b)?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let out = Tensor {
            shape: vec![m, n],
            data: kernels::matmul(a.data(), b.data(), m, k, n),
        };
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    fn zip_with(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_same_tape(other);
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        };
        Ok(self.binary(other, out, op))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let out = self.value().scale(factor);
        self.unary(out, Op::Scale(self.id, factor))
    }

    /// Add a `[c]` bias to every row of a `[r×c]` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(bias);
        let (a, b) = (self.value(), bias.value());
        let c = a.cols();
        if b.rank() != 1 || b.len() != c {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let a = self.value();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|x| x.tanh()).collect(),
        };
        self.unary(out, Op::Tanh(self.id))
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax(&self, tau: f64) -> Result<Var<'t>> {
        check_tau(tau)?;
        let a = self.value();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data: kernels::softmax_rows(a.data(), a.cols(), tau),
        };
        Ok(self.unary(out, Op::Softmax { a: self.id, tau }))
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (data, norms) = kernels::l2_normalize_rows(a.data(), a.cols())?;
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        Ok(self.unary(out, Op::L2Normalize { a: self.id, norms }))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let a = self.value();
        let (data, inv_std) = kernels::layer_norm_rows(a.data(), a.cols(), eps);
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        self.unary(out, Op::LayerNorm { a: self.id, inv_std })
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 joins columns).
    /// Rank-1 inputs count as single rows.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| {
                first.check_same_tape(p);
                p.value()
            })
            .collect();
        let (r0, c0) = values[0].rows_cols();
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for v in &values {
                    let (r, c) = v.rows_cols();
                    if c != c0 {
                        return Err(Error::dim("concat", values[0].shape(), v.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                Tensor {
                    shape: vec![rows, c0],
                    data,
                }
            }
            1 => {
                let mut total = 0;
                for v in &values {
                    let (r, c) = v.rows_cols();
                    if r != r0 {
                        return Err(Error::dim("concat", values[0].shape(), v.shape()));
                    }
                    total += c;
                }
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for v in &values {
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor {
                    shape: vec![r0, total],
                    data,
                }
            }
            _ => return Err(Error::validation(format!("concat axis {axis} unsupported"))),
        };
        let needs = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(out, Op::Concat { parts: ids, axis }, needs))
    }

    /// Mean over `axis` of a `[r×c]` matrix: axis 0 gives `[c]`, axis 1 gives `[r]`.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        let data = match axis {
            0 => (0..c)
                .map(|j| (0..r).map(|i| a.data()[i * c + j]).sum::<f64>() / r as f64)
                .collect(),
            1 => a
                .data()
                .chunks(c)
                .map(|row| row.iter().sum::<f64>() / c as f64)
                .collect(),
            _ => return Err(Error::validation(format!("mean axis {axis} unsupported"))),
        };
        Ok(self.unary(Tensor::vector(data), Op::Mean { a: self.id, axis }))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = matrix_dims("transpose", &a)?;
        let out = Tensor {
            shape: vec![c, r],
            data: kernels::transpose(a.data(), r, c),
        };
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    /// Row `row` of a matrix as a `[c]` vector.
    pub fn gather_row(&self, row: usize) -> Result<Var<'t>> {
        let g = self.gather_rows(&[row])?;
        let c = g.value().cols();
        g.reshape(&[c])
    }

    /// Rows `rows` (in the given order, repeats allowed) as a `[rows.len()×c]` matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if rows.is_empty() {
            return Err(Error::Degenerate("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    index: i,
                    len: r,
                    context: "gather_rows",
                });
            }
            data.extend_from_slice(a.row(i));
        }
        let out = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        Ok(self.unary(
            out,
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Flat (row-major) element gather into a `[idx.len()]` vector.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if idx.is_empty() {
            return Err(Error::Degenerate("gather of zero elements".into()));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= a.len() {
                return Err(Error::Index {
                    index: i,
                    len: a.len(),
                    context: "gather",
                });
            }
            data.push(a.data()[i]);
        }
        Ok(self.unary(
            Tensor::vector(data),
            Op::Gather {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = a.rows_cols();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", a.shape(), &[start, len]));
        }
        let data = a
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let shape = if a.rank() == 1 { vec![len] } else { vec![r, len] };
        Ok(self.unary(Tensor { shape, data }, Op::SliceCols { a: self.id, start }))
    }

    /// Pairwise cosine similarities between the rows of `self` and `other`.
    pub fn cosine_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.as_matrix()?.l2_normalize()?;
        let b = other.as_matrix()?.l2_normalize()?;
        if a.value().cols() != b.value().cols() {
            return Err(Error::dim("cosine_rows", &a.shape(), &b.shape()));
        }
        a.matmul(&b.transpose()?)
    }

    /// Cosine similarity of two vectors as a `[1]` tensor.
    pub fn cosine(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.value().rank() != 1 || self.shape() != other.shape() {
            return Err(Error::dim("cosine", &self.shape(), &other.shape()));
        }
        self.cosine_rows(other)?.reshape(&[1])
    }

    fn as_matrix(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() == 2 {
            Ok(*self)
        } else {
            let (r, c) = rows_cols(&shape);
            self.reshape(&[r, c])
        }
    }

    /// Mean over rows of `−log softmax(logits / tau)[target]`.
    pub fn cross_entropy(&self, targets: &[usize], tau: f64) -> Result<Var<'t>> {
        check_tau(tau)?;
        let z = self.value();
        let (b, k) = matrix_dims("cross_entropy", &z)?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", z.shape(), &[targets.len()]));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::Index {
                    index: t,
                    len: k,
                    context: "cross_entropy target",
                });
            }
        }
        let probs = kernels::softmax_rows(z.data(), k, tau);
        let mut total = 0.0;
        for (row, &t) in z.data().chunks(k).zip(targets) {
            let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
            total += kernels::log_sum_exp(&scaled) - scaled[t];
        }
        let loss = Tensor::scalar(total / b as f64);
        Ok(self.unary(
            loss,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                tau,
                probs,
            },
        ))
    }
}
