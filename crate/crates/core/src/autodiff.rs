//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! appended in creation order, so the node vector is already a topological
//! order and [`Graph::backward`] walks it once in reverse.
//!
//! Binary elementwise ops accept equal shapes, or a right-hand operand that
//! broadcasts along the leading dimension (a row vector matching the
//! trailing size, or a scalar). The left-hand operand may broadcast the same
//! way when the right-hand one is the larger.

use crate::array::{matmul_into, DenseArray};
use crate::error::{Error, Result};
use crate::fft::dft_parts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule for an op defined outside this module.
pub trait Backward: Send + Sync {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        output: &DenseArray,
    ) -> Result<Vec<DenseArray>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Softplus,
    Silu,
    Gelu,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Equal,
    RowRhs,
    ScalarRhs,
    RowLhs,
    ScalarLhs,
}

enum Op {
    Leaf,
    Binary(BinaryOp, Bcast),
    Unary(UnaryOp),
    Scale(f64),
    Matmul,
    Transpose,
    Reshape,
    Sum,
    Mean,
    LayerNorm { eps: f64 },
    ReverseRows,
    GatherRows(Vec<usize>),
    SliceCols { start: usize, len: usize },
    ConcatRows,
    DftRe,
    DftIm,
    Custom(Box<dyn Backward>),
}

struct Node {
    value: DenseArray,
    grad: Option<DenseArray>,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn bcast(a: &[usize], b: &[usize], a_len: usize, b_len: usize) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Equal);
    }
    let trailing = |big: &[usize], small_len: usize| -> bool {
        big.len() >= 2 && big[1..].iter().product::<usize>() == small_len
    };
    if b_len == 1 {
        Some(Bcast::ScalarRhs)
    } else if a_len == 1 {
        Some(Bcast::ScalarLhs)
    } else if trailing(a, b_len) {
        Some(Bcast::RowRhs)
    } else if trailing(b, a_len) {
        Some(Bcast::RowLhs)
    } else {
        None
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let v = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * 0.044715 * x * x);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (v, d)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
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

    fn push(&mut self, value: DenseArray, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, zeros if nothing reached this node.
    pub fn grad(&self, v: Var) -> DenseArray {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| DenseArray::zeros(n.value.shape()))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = bcast(av.shape(), bv.shape(), av.len(), bv.len()).ok_or_else(|| {
            Error::ShapeMismatch(format!("{:?} {op:?} {:?}", av.shape(), bv.shape()))
        })?;
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let (big, small, small_is_rhs) = match kind {
            Bcast::Equal | Bcast::RowRhs | Bcast::ScalarRhs => (av, bv, true),
            Bcast::RowLhs | Bcast::ScalarLhs => (bv, av, false),
        };
        let s = small.data();
        let m = s.len();
        let data: Vec<f64> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if m == big.len() { s[i] } else { s[i % m] };
                if small_is_rhs {
                    f(x, y)
                } else {
                    f(y, x)
                }
            })
            .collect();
        let value = DenseArray::new(big.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Binary(op, kind), vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| match op {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Gelu => gelu(x).0,
            UnaryOp::Square => x * x,
        });
        self.push(value, Op::Unary(op), vec![a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * k);
        self.push(value, Op::Scale(k), vec![a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Matmul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        self.push(value, Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape, vec![a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseArray::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let value = DenseArray::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean, vec![a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv;
            }
        }
        let value = DenseArray::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LayerNorm { eps }, vec![a])
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let r = v.rows();
        let order: Vec<usize> = (0..r).rev().collect();
        let value = gather(v, &order);
        self.push(value, Op::ReverseRows, vec![a])
    }

    /// Output row `k` is input row `indices[k]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::DimensionMismatch(format!(
                "row index {bad} out of {} rows",
                v.rows()
            )));
        }
        let value = gather(v, indices);
        Ok(self.push(value, Op::GatherRows(indices.to_vec()), vec![a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.rows(), v.cols());
        if v.shape().len() != 2 || start + len > c || len == 0 {
            return Err(Error::DimensionMismatch(format!(
                "slice cols {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let value = DenseArray::from_fn2(r, len, |i, j| v.at(i, start + j));
        Ok(self.push(value, Op::SliceCols { start, len }, vec![a]))
    }

    /// Stacks same-length vectors (or rows) into a matrix, one row each.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero nodes".into()))?;
        let c = self.nodes[first.0].value.len();
        let mut data = Vec::with_capacity(c * parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "concat rows of length {c} and {}",
                    v.len()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let value = DenseArray::matrix(parts.len(), c, data)?;
        Ok(self.push(value, Op::ConcatRows, parts.to_vec()))
    }

    /// Real part of the DFT of every column of a `[n x c]` array.
    pub fn dft_re(&mut self, a: Var) -> Var {
        let value = dft_columns(&self.nodes[a.0].value, true);
        self.push(value, Op::DftRe, vec![a])
    }

    /// Imaginary part of the DFT of every column of a `[n x c]` array.
    pub fn dft_im(&mut self, a: Var) -> Var {
        let value = dft_columns(&self.nodes[a.0].value, false);
        self.push(value, Op::DftIm, vec![a])
    }

    /// Registers an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: DenseArray, rule: Box<dyn Backward>) -> Var {
        self.push(value, Op::Custom(rule), inputs.to_vec())
    }

    /// Propagates d(root)/d(node) into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.backward_seeded(&[(root, DenseArray::ones(&root_shape))])
    }

    /// Reverse pass from several outputs at once, each seeded with a given
    /// upstream gradient of its own shape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, DenseArray)]) -> Result<()> {
        for n in &mut self.nodes {
            n.grad = None;
        }
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        for (v, seed) in seeds {
            let node = &mut self.nodes[v.0];
            if seed.shape() != node.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "seed {:?} for node {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(seed.data())
                    .for_each(|(a, b)| *a += b),
                None => node.grad = Some(seed.clone()),
            }
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let grads = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            let parents = self.nodes[i].parents.clone();
            for (p, pg) in parents.into_iter().zip(grads) {
                let Some(pg) = pg else { continue };
                let node = &mut self.nodes[p.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    None => node.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &DenseArray) -> Result<Vec<Option<DenseArray>>> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.parents[k].0].value;
        let wants = |k: usize| self.nodes[node.parents[k].0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(op, kind) => {
                let (a, b) = (input(0), input(1));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|x| -x)),
                    BinaryOp::Mul => {
                        let (big_a, big_b) = expand_pair(a, b, *kind);
                        (
                            g.zip_map(&big_b, |x, y| x * y)?,
                            g.zip_map(&big_a, |x, y| x * y)?,
                        )
                    }
                };
                let ga = reduce_to(ga, a);
                let gb = reduce_to(gb, b);
                vec![Some(ga), Some(gb)]
            }
            Op::Unary(op) => {
                let x = input(0);
                let d = match op {
                    UnaryOp::Exp => node.value.clone(),
                    UnaryOp::Softplus => x.map(sigmoid),
                    UnaryOp::Silu => x.map(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    }),
                    UnaryOp::Gelu => x.map(|v| gelu(v).1),
                    UnaryOp::Square => x.map(|v| 2.0 * v),
                };
                vec![Some(g.zip_map(&d, |a, b| a * b)?)]
            }
            Op::Scale(k) => vec![Some(g.map(|x| x * k))],
            Op::Matmul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = if wants(0) {
                    let bt = b.transpose();
                    let mut buf = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut buf, m, n, k);
                    Some(DenseArray::new(a.shape().to_vec(), buf)?)
                } else {
                    None
                };
                let gb = if wants(1) {
                    let at = a.transpose();
                    let mut buf = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut buf, k, m, n);
                    Some(DenseArray::new(b.shape().to_vec(), buf)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::Reshape => vec![Some(g.reshape(input(0).shape().to_vec())?)],
            Op::Sum => vec![Some(DenseArray::filled(input(0).shape(), g.data()[0]))],
            Op::Mean => {
                let x = input(0);
                vec![Some(DenseArray::filled(
                    x.shape(),
                    g.data()[0] / x.len() as f64,
                ))]
            }
            Op::LayerNorm { eps } => {
                let x = input(0);
                let (r, c) = (x.rows(), x.cols());
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let xr = x.row(row);
                    let mu = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = node.value.row(row);
                    let gr = g.row(row);
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[row * c + j] = inv * (gr[j] - gmean - yr[j] * gy);
                    }
                }
                vec![Some(DenseArray::new(x.shape().to_vec(), gx)?)]
            }
            Op::ReverseRows => {
                let order: Vec<usize> = (0..g.rows()).rev().collect();
                vec![Some(gather(g, &order))]
            }
            Op::GatherRows(idx) => {
                let x = input(0);
                let c = x.cols();
                let mut gx = DenseArray::zeros(x.shape());
                let buf = gx.data_mut();
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        buf[src * c + j] += g.data()[k * c + j];
                    }
                }
                vec![Some(gx)]
            }
            Op::SliceCols { start, len } => {
                let x = input(0);
                let mut gx = DenseArray::zeros(x.shape());
                for r in 0..x.rows() {
                    for j in 0..*len {
                        gx.set(r, start + j, g.at(r, j));
                    }
                }
                vec![Some(gx)]
            }
            Op::ConcatRows => node
                .parents
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let shape = self.nodes[p.0].value.shape().to_vec();
                    DenseArray::new(shape, g.row(k).to_vec()).map(Some)
                })
                .collect::<Result<Vec<_>>>()?,
            // The DFT is linear with a symmetric kernel, so its adjoint is
            // the same transform applied to the incoming gradient.
            Op::DftRe => vec![Some(dft_columns(g, true))],
            Op::DftIm => vec![Some(dft_columns(g, false))],
            Op::Custom(rule) => {
                let inputs: Vec<&DenseArray> = node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                rule.backward(g, &inputs, &node.value)?
                    .into_iter()
                    .map(Some)
                    .collect()
            }
        };
        Ok(out)
    }
}

fn gather(v: &DenseArray, rows: &[usize]) -> DenseArray {
    let c = v.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(v.row(r));
    }
    let mut shape = v.shape().to_vec();
    shape[0] = rows.len();
    DenseArray::new(shape, data).expect("gather keeps trailing shape")
}

fn dft_columns(x: &DenseArray, real: bool) -> DenseArray {
    let (n, c) = (x.rows(), x.cols());
    let mut out = DenseArray::zeros(&[n, c]);
    for j in 0..c {
        let (re, im) = dft_parts(&x.column(j));
        let part = if real { re } else { im };
        for (k, v) in part.into_iter().enumerate() {
            out.set(k, j, v);
        }
    }
    out.reshape(x.shape().to_vec()).expect("same size")
}

/// Broadcasts both operands of a binary op to the output shape.
fn expand_pair(a: &DenseArray, b: &DenseArray, kind: Bcast) -> (DenseArray, DenseArray) {
    let expand = |small: &DenseArray, big: &DenseArray| {
        let m = small.len();
        let data = (0..big.len()).map(|i| small.data()[i % m]).collect();
        DenseArray::new(big.shape().to_vec(), data).expect("broadcast shape")
    };
    match kind {
        Bcast::Equal => (a.clone(), b.clone()),
        Bcast::RowRhs | Bcast::ScalarRhs => (a.clone(), expand(b, a)),
        Bcast::RowLhs | Bcast::ScalarLhs => (expand(a, b), b.clone()),
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: DenseArray, target: &DenseArray) -> DenseArray {
    if g.len() == target.len() {
        return g.reshape(target.shape().to_vec()).expect("same size");
    }
    let m = target.len();
    let mut acc = vec![0.0; m];
    for (i, v) in g.data().iter().enumerate() {
        acc[i % m] += v;
    }
    DenseArray::new(target.shape().to_vec(), acc).expect("target shape")
}
