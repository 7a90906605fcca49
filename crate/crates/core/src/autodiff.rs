//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node order is already a topological order. [`Graph::backward`] walks the
//! list in reverse and accumulates gradients into leaves created with
//! `requires_grad = true`.
//!
//! ```
//! use protogroup::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};

/// Rows whose norm falls below this are treated as zero by `l2_normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                message: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    message: format!("row {} has {} columns, expected {}", i, r.len(), cols),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log {
        x: Var,
        floor: f64,
    },
    Relu(Var),
    SoftmaxRows {
        x: Var,
        temp: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherElements {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    SegmentMean {
        x: Var,
        ids: Vec<usize>,
        counts: Vec<usize>,
    },
    GroupMean {
        x: Var,
        idx: Vec<usize>,
        group: usize,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record. Single-threaded; build a fresh graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    degenerate_rows: usize,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            message: format!("expected a matrix, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            message: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

/// Row-major product of an (n×k) and a (k×m) matrix.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    // Column-major views of row-major buffers are transposes: Cᵀ = Bᵀ Aᵀ.
    let at = nalgebra::DMatrixView::from_slice(a, k, n);
    let bt = nalgebra::DMatrixView::from_slice(b, m, k);
    let mut out = nalgebra::DMatrix::<f64>::zeros(m, n);
    out.gemm(1.0, &bt, &at, 0.0);
    out.data.into()
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of `x / temp` with max subtraction.
pub fn softmax_raw(logits: &[f64], temp: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / temp).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
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

    /// Number of rows `l2_normalize_rows` left at zero because their norm was below [`NORM_EPS`].
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        check_finite("add", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        check_finite("sub", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        check_finite("mul", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.iter().map(|x| x * s).collect();
        check_finite("scalar_mul", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScalarMul(a, s), rg))
    }

    /// Adds a 1×C (or length-C) row vector to every row of an R×C matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = dims2("add_row", tx)?;
        if tb.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                message: format!("bias has {} values for {} columns", tb.numel(), c),
            });
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data[j];
            }
        }
        check_finite("add_row", &data)?;
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims2("matmul", ta)?;
        let (k2, m) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                message: format!("{}x{} times {}x{}", n, k, k2, m),
            });
        }
        let data = matmul_raw(&ta.data, &tb.data, n, k, m);
        check_finite("matmul", &data)?;
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("transpose", ta)?;
        let out = Tensor::matrix(c, r, transpose_raw(&ta.data, r, c))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.iter().map(|x| x.exp()).collect();
        check_finite("exp", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    /// Natural log of `max(x, floor)`; clamped entries receive zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.iter().map(|&x| x.max(floor).ln()).collect();
        check_finite("log", &data)?;
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log { x: a, floor }, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.log_clamped(a, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var, temp: f64) -> Result<Var> {
        if !(temp > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be > 0, got {}", temp)));
        }
        let ta = self.value(a);
        let (r, c) = dims2("softmax_rows", ta)?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax_raw(ta.row(i), temp));
        }
        check_finite("softmax_rows", &data)?;
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows { x: a, temp }, rg))
    }

    /// Rows with norm below [`NORM_EPS`] become exact zero rows and are counted in
    /// [`Graph::degenerate_rows`]; their gradient is zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("l2_normalize_rows", ta)?;
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        let mut degenerate = 0;
        for i in 0..r {
            let row = ta.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n < NORM_EPS {
                degenerate += 1;
                continue;
            }
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        check_finite("l2_normalize_rows", &data)?;
        self.degenerate_rows += degenerate;
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("gather_rows", ta)?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    message: format!("row {} out of range for {} rows", i, r),
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks individual `(row, col)` entries into a rank-1 tensor.
    pub fn gather_elements(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("gather_elements", ta)?;
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::Dimension {
                    op: "gather_elements",
                    message: format!("({}, {}) out of range for {}x{}", i, j, r, c),
                });
            }
            data.push(ta.data[i * c + j]);
        }
        let out = Tensor::from_vec(data);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherElements {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of the output is the mean of rows `idx[i*group .. (i+1)*group]` of `a`.
    pub fn gather_mean(&mut self, a: Var, idx: &[usize], group: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("gather_mean", ta)?;
        if group == 0 || idx.len() % group != 0 {
            return Err(Error::Dimension {
                op: "gather_mean",
                message: format!("{} indices do not split into groups of {}", idx.len(), group),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_mean",
                message: format!("row {} out of range for {} rows", bad, r),
            });
        }
        let rows = idx.len() / group;
        let inv = 1.0 / group as f64;
        let mut data = vec![0.0; rows * c];
        for (o, chunk) in data.chunks_exact_mut(c).zip(idx.chunks_exact(group)) {
            for &i in chunk {
                o.iter_mut().zip(ta.row(i)).for_each(|(d, v)| *d += v);
            }
            o.iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GroupMean {
                x: a,
                idx: idx.to_vec(),
                group,
            },
            rg,
        ))
    }

    /// Averages rows sharing a segment id. Every segment in `0..num_segments` must be non-empty.
    pub fn segment_mean(&mut self, a: Var, ids: &[usize], num_segments: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = dims2("segment_mean", ta)?;
        if ids.len() != r {
            return Err(Error::Dimension {
                op: "segment_mean",
                message: format!("{} segment ids for {} rows", ids.len(), r),
            });
        }
        let mut counts = vec![0usize; num_segments];
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::Dimension {
                    op: "segment_mean",
                    message: format!("segment id {} >= {}", s, num_segments),
                });
            }
            counts[s] += 1;
            for j in 0..c {
                data[s * c + j] += ta.data[i * c + j];
            }
        }
        if let Some(s) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Precondition(format!("segment {} is empty", s)));
        }
        for s in 0..num_segments {
            let n = counts[s] as f64;
            data[s * c..(s + 1) * c].iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::matrix(num_segments, c, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x: a,
                ids: ids.to_vec(),
                counts,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        check_finite("mean", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Row sums of an R×C matrix as an R×1 matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, _) = dims2("sum_rows", ta)?;
        let data: Vec<f64> = (0..r).map(|i| ta.row(i).iter().sum()).collect();
        check_finite("sum_rows", &data)?;
        let out = Tensor::matrix(r, 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    /// `Σ_k w_k · x_k` over all elements, with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if weights.len() != ta.numel() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                message: format!("{} weights for {} elements", weights.len(), ta.numel()),
            });
        }
        let s: f64 = ta.data.iter().zip(weights).map(|(x, w)| x * w).sum();
        check_finite("weighted_sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x: a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Copies the value into a fresh constant; nothing flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                message: format!("loss must be scalar, got shape {:?}", lt.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let n = &mut self.nodes[i];
                match &mut n.grad {
                    Some(acc) => acc.iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(dy),
                }
                continue;
            }
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, g: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(&mut grads, *a, dy.clone());
                    send(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, dy.iter().map(|v| -v).collect());
                    send(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    let ga = dy.iter().zip(vb).map(|(d, y)| d * y).collect();
                    let gb = dy.iter().zip(va).map(|(d, x)| d * x).collect();
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::ScalarMul(a, s) => {
                    send(&mut grads, *a, dy.iter().map(|d| d * s).collect());
                }
                Op::AddRow(x, b) => {
                    let c = node.value.cols();
                    let mut gb = vec![0.0; c];
                    for (k, d) in dy.iter().enumerate() {
                        gb[k % c] += d;
                    }
                    send(&mut grads, *b, gb);
                    send(&mut grads, *x, dy);
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (n, k) = (ta.shape[0], ta.shape[1]);
                    let m = tb.shape[1];
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose_raw(&tb.data, k, m);
                        send(&mut grads, *a, matmul_raw(&dy, &bt, n, m, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose_raw(&ta.data, n, k);
                        send(&mut grads, *b, matmul_raw(&at, &dy, k, n, m));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape[0], node.value.shape[1]);
                    send(&mut grads, *a, transpose_raw(&dy, r, c));
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    send(&mut grads, *a, dy.iter().zip(y).map(|(d, y)| d * y).collect());
                }
                Op::Log { x, floor } => {
                    let xv = &self.nodes[x.0].value.data;
                    let g = dy
                        .iter()
                        .zip(xv)
                        .map(|(d, &x)| if x > *floor { d / x } else { 0.0 })
                        .collect();
                    send(&mut grads, *x, g);
                }
                Op::Relu(a) => {
                    let xv = &self.nodes[a.0].value.data;
                    let g = dy
                        .iter()
                        .zip(xv)
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, g);
                }
                Op::SoftmaxRows { x, temp } => {
                    let (r, c) = (node.value.shape[0], node.value.shape[1]);
                    let y = &node.value.data;
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dy[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] = yr[j] * (dr[j] - dot) / temp;
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let (r, c) = (node.value.shape[0], node.value.shape[1]);
                    let y = &node.value.data;
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        if norms[i] < NORM_EPS {
                            continue;
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dy[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] = (dr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::GatherRows { x, idx } => {
                    let src = &self.nodes[x.0].value;
                    let c = src.cols();
                    let mut g = vec![0.0; src.numel()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += dy[k * c + j];
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::GatherElements { x, idx } => {
                    let src = &self.nodes[x.0].value;
                    let c = src.cols();
                    let mut g = vec![0.0; src.numel()];
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        g[i * c + j] += dy[k];
                    }
                    send(&mut grads, *x, g);
                }
                Op::SegmentMean { x, ids, counts } => {
                    let c = node.value.cols();
                    let mut g = vec![0.0; ids.len() * c];
                    for (i, &s) in ids.iter().enumerate() {
                        let n = counts[s] as f64;
                        for j in 0..c {
                            g[i * c + j] = dy[s * c + j] / n;
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::GroupMean { x, idx, group } => {
                    let src = &self.nodes[x.0].value;
                    let c = src.cols();
                    let inv = 1.0 / *group as f64;
                    let mut g = vec![0.0; src.numel()];
                    for (d, chunk) in dy.chunks_exact(c).zip(idx.chunks_exact(*group)) {
                        for &i in chunk {
                            g[i * c..(i + 1) * c].iter_mut().zip(d).for_each(|(a, b)| *a += b * inv);
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    send(&mut grads, *a, vec![dy[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.numel();
                    send(&mut grads, *a, vec![dy[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let c = src.cols();
                    let g = (0..src.numel()).map(|k| dy[k / c]).collect();
                    send(&mut grads, *a, g);
                }
                Op::WeightedSum { x, weights } => {
                    send(&mut grads, *x, weights.iter().map(|w| w * dy[0]).collect());
                }
            }
        }
        Ok(())
    }
}
