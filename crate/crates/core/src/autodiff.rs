//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the tape once in reverse. Constants never receive gradients and any
//! subgraph that depends only on constants is skipped during the reverse pass.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_acc, Lu, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("Tensor::new", shape, &[data.len()]);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    /// Column vector of shape `[n, 1]`.
    pub fn column(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len(), 1],
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => shape_err("Tensor::to_matrix", &self.shape, &[0, 0]),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(op, &self.shape, &[0, 0]),
        }
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in compressed row form, used for linear stencils.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn tr_matvec_acc(&self, g: &[f64], out: &mut [f64]) {
        for (i, &gi) in g.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col_idx[k]] += self.values[k] * gi;
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] += self.values[k];
            }
        }
        m
    }
}

/// Pivot magnitude below which [`Tape::solve`] regularises the system.
pub const RIDGE_PIVOT_THRESHOLD: f64 = 1e-10;
/// Diagonal shift applied when regularising.
pub const RIDGE: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Relu(Var),
    SoftmaxCols(Var),
    Solve { m: Var, b: Var, lu: Box<Lu> },
    Sparse(Rc<CsrMatrix>, Var),
    Conv2d { x: Var, w: Var, b: Var },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ridge_events: usize,
}

/// Gradients indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.ridge_events = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of [`Tape::solve`] calls that fell back to the ridge.
    pub fn ridge_events(&self) -> usize {
        self.ridge_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return shape_err(op, sa, sb);
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|p| f(*p)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |p| p * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Adds a row vector (any shape with `c` elements) to every row of an r×c matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_row")?;
        if self.value(b).len() != c {
            return shape_err("add_row", &[r, c], &self.value(b).shape);
        }
        let bias = &self.value(b).data;
        let mut v = self.value(x).clone();
        for row in v.data.chunks_mut(c) {
            for (p, q) in row.iter_mut().zip(bias) {
                *p += q;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddRow(x, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", &[m, k], &[k2, n]);
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).to_matrix()?.transpose();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_matrix(&t), Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return shape_err("reshape", &x.shape, shape);
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Concatenates the flattened inputs into a `[1, total]` row.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let n = data.len();
        self.push(
            Tensor {
                shape: vec![1, n],
                data,
            },
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |p| p.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Softmax over the rows of each column of a matrix.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("softmax_cols")?;
        let x = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let mx = (0..r).map(|i| x[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..r {
                let e = (x[i * c + j] - mx).exp();
                out[i * c + j] = e;
                s += e;
            }
            for i in 0..r {
                out[i * c + j] /= s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data: out,
            },
            Op::SoftmaxCols(a),
            ng,
        ))
    }

    /// Solves `M X = B` for square `M`. When the smallest LU pivot of `M`
    /// falls below [`RIDGE_PIVOT_THRESHOLD`] the system `(M + RIDGE·I) X = B`
    /// is solved instead and the event is counted.
    pub fn solve(&mut self, m: Var, b: Var) -> Result<Var> {
        let mm = self.value(m).to_matrix()?;
        let bm = self.value(b).to_matrix()?;
        if mm.rows() != mm.cols() || bm.rows() != mm.rows() {
            return shape_err("solve", &mm.shape(), &bm.shape());
        }
        let lu = match Lu::factor_with_tol(&mm, 0.0) {
            Ok(lu) if lu.min_pivot() >= RIDGE_PIVOT_THRESHOLD => lu,
            _ => {
                self.ridge_events += 1;
                let mut shifted = mm.clone();
                for i in 0..shifted.rows() {
                    shifted[(i, i)] += RIDGE;
                }
                Lu::factor_with_tol(&shifted, 0.0)?
            }
        };
        let x = lu.solve(&bm)?;
        if !x.all_finite() {
            return Err(Error::Instability {
                step: 0,
                detail: "non-finite solution in differentiable solve".into(),
            });
        }
        let ng = self.ng(m) || self.ng(b);
        Ok(self.push(
            Tensor::from_matrix(&x),
            Op::Solve {
                m,
                b,
                lu: Box::new(lu),
            },
            ng,
        ))
    }

    /// Applies a constant sparse matrix to a vector-shaped tensor.
    pub fn sparse_matvec(&mut self, s: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != s.cols {
            return shape_err("sparse_matvec", &[s.rows, s.cols], &xv.shape);
        }
        let data = s.matvec(&xv.data);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: vec![s.rows, 1],
                data,
            },
            Op::Sparse(s, x),
            ng,
        ))
    }

    /// Periodic ("circular") 2-D cross-correlation of one sample.
    ///
    /// `x` is `[c_in, H, W]`, `w` is `[c_out, c_in, k, k]` with odd `k`, `b`
    /// has `c_out` elements. Output is `[c_out, H, W]`.
    pub fn conv2d_periodic(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        let (ci, h, wd) = match xs[..] {
            [c, h, w] => (c, h, w),
            _ => return shape_err("conv2d", &xs, &[0, 0, 0]),
        };
        let (co, k) = match ws[..] {
            [o, i, k1, k2] if i == ci && k1 == k2 && k1 % 2 == 1 => (o, k1),
            _ => return shape_err("conv2d", &xs, &ws),
        };
        if self.value(b).len() != co {
            return shape_err("conv2d bias", &ws, &self.value(b).shape);
        }
        let out = conv_forward(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            ConvDims { ci, co, h, w: wd, k },
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![co, h, wd],
                data: out,
            },
            Op::Conv2d { x, w, b },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return shape_err("backward", &self.value(out).shape, &[1]);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor {
            shape: self.value(out).shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.value(v).shape.clone(),
                    data: delta,
                })
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.clone());
                self.accumulate(grads, *b, gd.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.clone());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.ng(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * s).collect());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gd.clone());
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (p, q) in gb.iter_mut().zip(row) {
                            *p += q;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape[1];
                if self.ng(*a) {
                    // dA = G Bᵀ
                    let bt = self.value(*b).to_matrix()?.transpose();
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(gd, bt.as_slice(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    // dB = Aᵀ G
                    let at = self.value(*a).to_matrix()?.transpose();
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(at.as_slice(), gd, &mut gb, k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let gt = g.to_matrix()?.transpose();
                self.accumulate(grads, *a, gt.into_vec());
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.clone());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                let d = gd
                    .iter()
                    .zip(av)
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCols(a) => {
                let (r, c) = node.value.dims2("softmax_cols")?;
                let y = &node.value.data;
                let mut d = vec![0.0; r * c];
                for j in 0..c {
                    let s: f64 = (0..r).map(|i| gd[i * c + j] * y[i * c + j]).sum();
                    for i in 0..r {
                        d[i * c + j] = y[i * c + j] * (gd[i * c + j] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Solve { m, b, lu } => {
                // X = M⁻¹B: dB = M⁻ᵀ G, dM = −dB Xᵀ.
                let gm = g.to_matrix()?;
                let (n, c) = (gm.rows(), gm.cols());
                let mut gb = Matrix::zeros(n, c);
                for j in 0..c {
                    gb.set_column(j, &lu.solve_transpose_vec(&gm.column(j))?);
                }
                if self.ng(*m) {
                    let x = node.value.to_matrix()?;
                    let gmm = gb.matmul(&x.transpose())?.scale(-1.0);
                    self.accumulate(grads, *m, gmm.into_vec());
                }
                self.accumulate(grads, *b, gb.into_vec());
            }
            Op::Sparse(s, x) => {
                let mut d = vec![0.0; s.cols];
                s.tr_matvec_acc(gd, &mut d);
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b } => {
                let xs = &self.value(*x).shape;
                let ws = &self.value(*w).shape;
                let dims = ConvDims {
                    ci: xs[0],
                    co: ws[0],
                    h: xs[1],
                    w: xs[2],
                    k: ws[2],
                };
                let plane = dims.h * dims.w;
                if self.ng(*b) {
                    let gb = gd.chunks(plane).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *b, gb);
                }
                if self.ng(*w) {
                    let gw = conv_grad_weight(&self.value(*x).data, gd, dims);
                    self.accumulate(grads, *w, gw);
                }
                if self.ng(*x) {
                    let gx = conv_grad_input(&self.value(*w).data, gd, dims);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Copies `c` planes of `h × w` into planes with a periodic halo of `r` cells.
fn pad_periodic(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = (py + h - r % h) % h;
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            for (px, d) in drow.iter_mut().enumerate() {
                *d = srow[(px + w - r % w) % w];
            }
        }
    }
    out
}

/// `dst[y][x] += Σ taps[dy][dx] · pad[y+dy][x+dx]` over one padded plane.
fn correlate_acc(dst: &mut [f64], pad: &[f64], taps: &[f64], h: usize, w: usize, k: usize) {
    let pw = w + k - 1;
    for y in 0..h {
        let d = &mut dst[y * w..(y + 1) * w];
        for dy in 0..k {
            let row = &pad[(y + dy) * pw..(y + dy + 1) * pw];
            for dx in 0..k {
                let tv = taps[dy * k + dx];
                for (dv, &s) in d.iter_mut().zip(&row[dx..dx + w]) {
                    *dv += tv * s;
                }
            }
        }
    }
}

/// `out[dy][dx] += Σ g[y][x] · pad[y+dy][x+dx]` over one padded plane.
fn correlate_grad(out: &mut [f64], g: &[f64], pad: &[f64], h: usize, w: usize, k: usize) {
    let pw = w + k - 1;
    if k == 3 {
        // All nine taps in one sweep with independent accumulators.
        let mut acc = [0.0; 9];
        for y in 0..h {
            let gr = &g[y * w..(y + 1) * w];
            let r0 = &pad[y * pw..y * pw + pw];
            let r1 = &pad[(y + 1) * pw..(y + 1) * pw + pw];
            let r2 = &pad[(y + 2) * pw..(y + 2) * pw + pw];
            for x in 0..w {
                let gv = gr[x];
                acc[0] += gv * r0[x];
                acc[1] += gv * r0[x + 1];
                acc[2] += gv * r0[x + 2];
                acc[3] += gv * r1[x];
                acc[4] += gv * r1[x + 1];
                acc[5] += gv * r1[x + 2];
                acc[6] += gv * r2[x];
                acc[7] += gv * r2[x + 1];
                acc[8] += gv * r2[x + 2];
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a;
        }
        return;
    }
    for y in 0..h {
        let gr = &g[y * w..(y + 1) * w];
        for dy in 0..k {
            let row = &pad[(y + dy) * pw..(y + dy + 1) * pw];
            for dx in 0..k {
                out[dy * k + dx] += gr.iter().zip(&row[dx..dx + w]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// One output plane: `dst[y][x] += Σ_i Σ taps_i[dy][dx] · pad_i[y+dy][x+dx]`,
/// with `taps(i)` giving the kernel applied to padded input plane `i`. Rows
/// are the outer loop so each output row stays in cache across inputs.
fn correlate_sum3(dst: &mut [f64], pads: &[f64], n_in: usize, taps: impl Fn(usize) -> [f64; 9], h: usize, w: usize) {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let kernels: Vec<[f64; 9]> = (0..n_in).map(taps).collect();
    for y in 0..h {
        let d = &mut dst[y * w..(y + 1) * w];
        for (i, t) in kernels.iter().enumerate() {
            let pad = &pads[i * pplane..(i + 1) * pplane];
            let r0 = &pad[y * pw..y * pw + pw];
            let r1 = &pad[(y + 1) * pw..(y + 1) * pw + pw];
            let r2 = &pad[(y + 2) * pw..(y + 2) * pw + pw];
            let (a0, b0, c0) = (&r0[..w], &r0[1..w + 1], &r0[2..w + 2]);
            let (a1, b1, c1) = (&r1[..w], &r1[1..w + 1], &r1[2..w + 2]);
            let (a2, b2, c2) = (&r2[..w], &r2[1..w + 1], &r2[2..w + 2]);
            for x in 0..w {
                d[x] += t[0] * a0[x] + t[1] * b0[x] + t[2] * c0[x]
                    + t[3] * a1[x] + t[4] * b1[x] + t[5] * c1[x]
                    + t[6] * a2[x] + t[7] * b2[x] + t[8] * c2[x];
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], wt: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let r = d.k / 2;
    let pplane = (d.h + 2 * r) * (d.w + 2 * r);
    let kk = d.k * d.k;
    let xp = pad_periodic(x, d.ci, d.h, d.w, r);
    let mut out = vec![0.0; d.co * plane];
    for o in 0..d.co {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b[o]);
    }
    for o in 0..d.co {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if d.k == 3 {
            let taps = |i: usize| -> [f64; 9] { wt[(o * d.ci + i) * 9..(o * d.ci + i + 1) * 9].try_into().expect("3x3 kernel") };
            correlate_sum3(dst, &xp, d.ci, taps, d.h, d.w);
            continue;
        }
        for i in 0..d.ci {
            let taps = &wt[(o * d.ci + i) * kk..(o * d.ci + i + 1) * kk];
            correlate_acc(dst, &xp[i * pplane..(i + 1) * pplane], taps, d.h, d.w, d.k);
        }
    }
    out
}

fn conv_grad_weight(x: &[f64], g: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let r = d.k / 2;
    let pplane = (d.h + 2 * r) * (d.w + 2 * r);
    let kk = d.k * d.k;
    let xp = pad_periodic(x, d.ci, d.h, d.w, r);
    let mut gw = vec![0.0; d.co * d.ci * kk];
    for o in 0..d.co {
        let go = &g[o * plane..(o + 1) * plane];
        for i in 0..d.ci {
            let out = &mut gw[(o * d.ci + i) * kk..(o * d.ci + i + 1) * kk];
            correlate_grad(out, go, &xp[i * pplane..(i + 1) * pplane], d.h, d.w, d.k);
        }
    }
    gw
}

fn conv_grad_input(wt: &[f64], g: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let r = d.k / 2;
    let pplane = (d.h + 2 * r) * (d.w + 2 * r);
    let kk = d.k * d.k;
    // The adjoint of a periodic correlation is a correlation with the kernel
    // flipped in both directions.
    let gp = pad_periodic(g, d.co, d.h, d.w, r);
    let mut gx = vec![0.0; d.ci * plane];
    let mut flipped = vec![0.0; kk];
    for i in 0..d.ci {
        let dst = &mut gx[i * plane..(i + 1) * plane];
        if d.k == 3 {
            let taps = |o: usize| -> [f64; 9] {
                let t = &wt[(o * d.ci + i) * 9..(o * d.ci + i + 1) * 9];
                std::array::from_fn(|q| t[8 - q])
            };
            correlate_sum3(dst, &gp, d.co, taps, d.h, d.w);
            continue;
        }
        for o in 0..d.co {
            let taps = &wt[(o * d.ci + i) * kk..(o * d.ci + i + 1) * kk];
            for (q, f) in flipped.iter_mut().enumerate() {
                *f = taps[kk - 1 - q];
            }
            correlate_acc(dst, &gp[o * pplane..(o + 1) * pplane], &flipped, d.h, d.w, d.k);
        }
    }
    gx
}

/// Adaptive-moment optimiser over a flat list of parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err("Adam::step", &[params.len()], &[grads.len()]);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape != g.shape {
                return shape_err("Adam::step", &p.shape, &g.shape);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Compares `analytic` gradients of `f` against central differences at the
/// given flat parameter indices. Relative error uses the floor
/// `1e-6 · max(1, |f(x)|)` in the denominator.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    probes: &[usize],
    h: f64,
) -> Result<GradCheck> {
    let f0 = f(x)?;
    let floor = 1e-6 * f0.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &i in probes {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(GradCheck {
        probes: probes.len(),
        max_rel_err: worst,
    })
}
