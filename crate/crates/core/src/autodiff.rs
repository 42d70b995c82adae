//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! already a topological order. [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products into each parent, so a single pass
//! yields the gradient of a scalar with respect to every intermediate value,
//! attention matrices included.
//!
//! All tensors on a tape are rank 2; a scalar is a `1×1` matrix. The only
//! broadcast is the row-vector bias in [`Tape::add_row`].

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes run on the current thread.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.with(|c| c.get())
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Transpose(Var),
    RowSum(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Pick {
        input: Var,
        row: usize,
        col: usize,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    Logistic {
        logit: Var,
        target: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Single-threaded recording of one computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn require_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Leaves must be rank 2 and finite.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        require_matrix("leaf", &value)?;
        self.push("leaf", value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was
    /// reachable from it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = x.zip_map(y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a `1×q` row vector to every row of a `p×q` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        require_matrix("add_row", x)?;
        if b.shape() != [1, x.cols()] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for matrix {:?}", b.shape(), x.shape()),
            ));
        }
        let cols = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b.data()[i % cols];
        }
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("hadamard", x, y)?;
        let out = x.zip_map(y, |p, q| p * q);
        self.push("hadamard", out, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        require_matrix("transpose", x)?;
        let out = x.transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// `p×q → p×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        require_matrix("row_sum", x)?;
        let data = (0..x.rows()).map(|r| x.row(r).iter().fold(T::zero(), |s, &v| s + v)).collect();
        let out = Tensor::matrix(x.rows(), 1, data)?;
        self.push("row_sum", out, Op::RowSum(a))
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row-wise softmax where columns with `key_mask[j] == false` are treated
    /// as `-inf` logits: they receive exactly zero probability and no gradient.
    /// Rows whose every column is masked are an error.
    pub fn masked_softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        require_matrix("softmax_rows", x)?;
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = key_mask {
            if m.len() != cols {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("key mask of length {} for {cols} columns", m.len()),
                ));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Contract("softmax row with every key masked".into()));
            }
        }
        let live = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            let row = x.row(r);
            let max = (0..cols)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in (0..cols).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                out.set(r, j, e);
                total = total + e;
            }
            for j in (0..cols).filter(|&j| live(j)) {
                let e = out.get(r, j);
                out.set(r, j, e / total);
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1×q` affine parameters.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let x = self.value(a);
        require_matrix("layer_norm", x)?;
        let (rows, cols) = (x.rows(), x.cols());
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, cols] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for width {cols}", self.value(p).shape()),
                ));
            }
        }
        let n = T::of(cols as f64);
        let mut normalized = Tensor::zeros(vec![rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                normalized.set(r, j, (v - mean) * inv);
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = normalized.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % cols;
            *v = *v * g.data()[j] + b.data()[j];
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Selects rows of `table` by index, `V×d → len(ids)×d`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        require_matrix("gather", t)?;
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather", format!("row {id} of {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        require_matrix("slice_rows", x)?;
        if start + len > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, x.rows()),
            ));
        }
        let c = x.cols();
        let out = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        require_matrix("slice_cols", x)?;
        if start + len > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, x.cols()),
            ));
        }
        let data = (0..x.rows())
            .flat_map(|r| x.row(r)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::matrix(x.rows(), len, data)?;
        self.push("slice_cols", out, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            require_matrix("concat_cols", v)?;
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// One entry of a matrix as a `1×1` scalar.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let x = self.value(a);
        require_matrix("pick", x)?;
        if row >= x.rows() || col >= x.cols() {
            return Err(Error::shape(
                "pick",
                format!("({row}, {col}) outside {:?}", x.shape()),
            ));
        }
        let out = Tensor::scalar(x.get(row, col));
        self.push("pick", out, Op::Pick { input: a, row, col })
    }

    /// `-log softmax(logits)[target]` for a `1×n` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().first() != Some(&1) || target >= x.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {target} for logits {:?}", x.shape()),
            ));
        }
        let max = x.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |s, &v| s + v);
        let loss = total.ln() + max - x.data()[target];
        let probs = exps.iter().map(|&e| e / total).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Binary logistic loss `softplus(z) - y·z` for a `1×1` logit.
    pub fn logistic_loss(&mut self, logit: Var, target: bool) -> Result<Var> {
        let x = self.value(logit);
        if x.len() != 1 {
            return Err(Error::shape("logistic_loss", format!("{:?}", x.shape())));
        }
        let z = x.data()[0];
        let y = if target { T::one() } else { T::zero() };
        // softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
        let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
        self.push(
            "logistic_loss",
            Tensor::scalar(softplus - y * z),
            Op::Logistic { logit, target: y },
        )
    }

    /// Populates gradients of the scalar `root` for every node it depends on.
    /// Gradients from any earlier pass are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));

        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, delta) in contributions {
                debug_assert!(parent.0 < i);
                let slot = &mut self.nodes[parent.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&delta),
                    None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(self.value(*b))?),
                (*b, self.value(*a).t_matmul(g)?),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, g.matmul(self.value(*b))?),
                (*b, g.t_matmul(self.value(*a))?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, bias) => {
                let cols = g.cols();
                let mut db = Tensor::zeros(vec![1, cols]);
                for (k, &v) in g.data().iter().enumerate() {
                    let d = db.data_mut();
                    d[k % cols] = d[k % cols] + v;
                }
                vec![(*a, g.clone()), (*bias, db)]
            }
            Op::Hadamard(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |p, q| p * q)),
                (*b, g.zip_map(self.value(*a), |p, q| p * q)),
            ],
            Op::Scale(a, factor) => vec![(*a, g.map(|v| v * *factor))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() }),
            )],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, |d, t| d * (T::one() - t * t)))],
            Op::Gelu(a) => vec![(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x)))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::RowSum(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let data = (0..x.len()).map(|k| g.data()[k / cols]).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape().to_vec(), g.data()[0]))],
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..cols {
                        dx.set(r, j, yr[j] * (gr[j] - dot));
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let n = T::of(cols as f64);
                let mut dgamma = Tensor::zeros(vec![1, cols]);
                let mut dbeta = Tensor::zeros(vec![1, cols]);
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), normalized.row(r));
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        let dhat = gr[j] * gam[j];
                        mean_d = mean_d + dhat;
                        mean_dx = mean_dx + dhat * xr[j];
                        dgamma.data_mut()[j] = dgamma.data()[j] + gr[j] * xr[j];
                        dbeta.data_mut()[j] = dbeta.data()[j] + gr[j];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    for j in 0..cols {
                        let dhat = gr[j] * gam[j];
                        dx.set(r, j, inv_std[r] * (dhat - mean_d - xr[j] * mean_dx));
                    }
                }
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = Tensor::zeros(t.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let d = dt.data_mut();
                    for (j, &v) in g.row(r).iter().enumerate() {
                        d[id * cols + j] = d[id * cols + j] + v;
                    }
                }
                vec![(*table, dt)]
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let c = x.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*input, dx)]
            }
            Op::SliceCols { input, start } => {
                let x = self.value(*input);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for r in 0..g.rows() {
                    for (j, &v) in g.row(r).iter().enumerate() {
                        dx.set(r, start + j, v);
                    }
                }
                vec![(*input, dx)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    let data = (0..g.rows())
                        .flat_map(|r| g.row(r)[offset..offset + w].iter().copied())
                        .collect();
                    out.push((p, Tensor::matrix(g.rows(), w, data)?));
                    offset += w;
                }
                out
            }
            Op::Pick { input, row, col } => {
                let mut dx = Tensor::zeros(self.value(*input).shape().to_vec());
                dx.set(*row, *col, g.data()[0]);
                vec![(*input, dx)]
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let onehot = if k == *target { T::one() } else { T::zero() };
                        (p - onehot) * scale
                    })
                    .collect();
                vec![(*logits, Tensor::new(self.value(*logits).shape().to_vec(), data)?)]
            }
            Op::Logistic { logit, target } => {
                let z = self.value(*logit).data()[0];
                let sigma = T::one() / (T::one() + (-z).exp());
                vec![(*logit, Tensor::scalar((sigma - *target) * g.data()[0]))]
            }
        };
        Ok(out)
    }
}
