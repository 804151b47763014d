//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in execution
//! order. Nodes are addressed by [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns the gradient of that scalar with respect to every node that
//! requires one.
//!
//! The op vocabulary is fixed to what the transformer needs. Shapes are
//! never broadcast except for [`Graph::add_row`], which adds a bias vector to
//! every row of a matrix.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    ChannelsToFrames(Var),
    /// Scalar function whose gradient was computed alongside its value.
    ScalarWithGrad {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
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

    /// Adds a differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn require_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {shape:?}"
            )));
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul_nt", a)?;
        let (n, k2) = self.require_rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_rank2("transpose", a)?;
        let out = transpose_raw(self.data(a), r, c);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.require_rank2("add_row", x)?;
        if self.nodes[bias.0].value.numel() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |x| x * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let t = self.map(a, |x| x + offset);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus_scalar);
        self.push(t, Op::Softplus(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let t = self.map(a, f64::ln);
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let t = self.map(a, f64::sqrt);
        Ok(self.push(t, Op::Sqrt(a), &[a]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.dims2(a);
        let data = softmax_rows(self.data(a), c);
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.dims2(a);
        let data = log_softmax_rows(self.data(a), c);
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.require_rank2("layer_norm", x)?;
        for p in [gain, bias] {
            if self.nodes[p.0].value.numel() != c {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.require_rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.require_rank2("concat_rows", p)?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_rank2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.require_rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.require_rank2("concat_cols", p)?;
            if r2 != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::matrix(r, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Row lookup (embedding): output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.require_rank2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "gather_rows id {bad} out of range for {v} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks `x[i, cols[i]]` from every row, giving a vector of length `rows`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.require_rank2("pick", x)?;
        if cols.len() != r {
            return Err(shape_err("pick", self.shape(x), &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "pick column {bad} out of range for {c} columns"
            )));
        }
        let src = self.data(x);
        let data = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        Ok(self.push(
            Tensor::vector(data)?,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// 3×3 convolution with zero "same" padding and unit stride.
    ///
    /// `x` is `[c_in, h, w]`, `w` is `[c_out, c_in, 3, 3]`, `b` is `[c_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err("conv2d", self.shape(x), self.shape(w))),
        };
        let cout = match *self.shape(w) {
            [co, ci, 3, 3] if ci == cin => co,
            _ => return Err(shape_err("conv2d", self.shape(x), self.shape(w))),
        };
        if self.nodes[b.0].value.numel() != cout {
            return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
        }
        let xs = self.data(x);
        let ws = self.data(w);
        let bs = self.data(b);
        let mut out = vec![0.0; cout * h * wd];
        for co in 0..cout {
            let plane = &mut out[co * h * wd..(co + 1) * h * wd];
            plane.fill(bs[co]);
            for ci in 0..cin {
                let xin = &xs[ci * h * wd..(ci + 1) * h * wd];
                let k = &ws[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = k[ky * 3 + kx];
                        for i in 0..h {
                            let si = i as isize + ky as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let src = &xin[si as usize * wd..(si as usize + 1) * wd];
                            let dst = &mut plane[i * wd..(i + 1) * wd];
                            for j in 0..wd {
                                let sj = j as isize + kx as isize - 1;
                                if sj >= 0 && sj < wd as isize {
                                    dst[j] += kv * src[sj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// 2×2 average pooling over the last two axes of `[c, h, w]`, dropping odd remainders.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] if h >= 2 && w >= 2 => (c, h, w),
            _ => {
                return Err(Error::Contract(format!(
                    "avg_pool2 needs [c, h>=2, w>=2], got {:?}",
                    self.shape(x)
                )))
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w;
                    let s = xs[base + 2 * i * w + 2 * j]
                        + xs[base + 2 * i * w + 2 * j + 1]
                        + xs[base + (2 * i + 1) * w + 2 * j]
                        + xs[base + (2 * i + 1) * w + 2 * j + 1];
                    out[ch * oh * ow + i * ow + j] = 0.25 * s;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    /// `[c, h, w]` → `[h, c·w]`: one row per time step, channels side by side.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => return Err(shape_err("channels_to_frames", self.shape(x), &[])),
        };
        let xs = self.data(x);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h {
                let src = &xs[ch * h * w + i * w..ch * h * w + (i + 1) * w];
                out[i * c * w + ch * w..i * c * w + (ch + 1) * w].copy_from_slice(src);
            }
        }
        let t = Tensor::matrix(h, c * w, out)?;
        Ok(self.push(t, Op::ChannelsToFrames(x), &[x]))
    }

    /// Records a scalar function of `x` whose value and gradient were computed externally.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.nodes[x.0].value.numel() {
            return Err(shape_err("scalar_with_grad", self.shape(x), &[grad.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, grad }, &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if needs(*a) {
                    let da = matmul_nt_raw(gout, self.data(*b), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let db = matmul_tn_raw(self.data(*a), gout, m, k, n);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                if needs(*a) {
                    let da = matmul_raw(gout, self.data(*b), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let db = matmul_tn_raw(gout, self.data(*a), m, n, k);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                accumulate(&mut grads[a.0], &transpose_raw(gout, c, r));
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], gout);
                accumulate(&mut grads[b.0], gout);
            }
            Op::AddRow(x, bias) => {
                accumulate(&mut grads[x.0], gout);
                if needs(*bias) {
                    let c = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; c];
                    for row in gout.chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], gout);
                if needs(*b) {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let da: Vec<f64> = gout.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let db: Vec<f64> = gout.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = gout.iter().map(|g| g * f).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], gout),
            Op::Relu(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = gout.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = gout.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = gout.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(&mut grads[a.0], &vec![gout[0]; n]);
            }
            Op::Softmax(a) => {
                let (_, c) = self.dims2(*a);
                let mut da = vec![0.0; gout.len()];
                for ((g, y), d) in gout.chunks(c).zip(out.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
            Op::LogSoftmax(a) => {
                let (_, c) = self.dims2(*a);
                let mut da = vec![0.0; gout.len()];
                for ((g, y), d) in gout.chunks(c).zip(out.chunks(c)).zip(da.chunks_mut(c)) {
                    let total: f64 = g.iter().sum();
                    for j in 0..c {
                        d[j] = g[j] - y[j].exp() * total;
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims2(*x);
                let g = self.data(*gain);
                if needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gout[i * c + j] * xhat[i * c + j];
                        }
                    }
                    accumulate(&mut grads[gain.0], &dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; c];
                    for row in gout.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| gout[i * c + j] * g[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat
                            .iter()
                            .zip(&xhat[i * c..(i + 1) * c])
                            .map(|(d, h)| d * h)
                            .sum();
                        for j in 0..c {
                            dx[i * c + j] =
                                inv_std[i] / cf * (cf * dxhat[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims2(*x);
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + gout.len()].copy_from_slice(gout);
                accumulate(&mut grads[x.0], &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if needs(*p) {
                        accumulate(&mut grads[p.0], &gout[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(*x);
                let len = gout.len() / r;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.dims2(*p);
                    if needs(*p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&gout[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &dp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.dims2(*table);
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gout[i * d + j];
                    }
                }
                accumulate(&mut grads[table.0], &dt);
            }
            Op::Pick { x, cols } => {
                let (r, c) = self.dims2(*x);
                let mut dx = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] = gout[i];
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, gout, grads),
            Op::AvgPool2(x) => {
                let (c, h, w) = match *self.shape(*x) {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!("checked in forward"),
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = 0.25 * gout[ch * oh * ow + i * ow + j];
                            let base = ch * h * w;
                            dx[base + 2 * i * w + 2 * j] += g;
                            dx[base + 2 * i * w + 2 * j + 1] += g;
                            dx[base + (2 * i + 1) * w + 2 * j] += g;
                            dx[base + (2 * i + 1) * w + 2 * j + 1] += g;
                        }
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::ChannelsToFrames(x) => {
                let (c, h, w) = match *self.shape(*x) {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!("checked in forward"),
                };
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        dx[ch * h * w + i * w..ch * h * w + (i + 1) * w]
                            .copy_from_slice(&gout[i * c * w + ch * w..i * c * w + (ch + 1) * w]);
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::ScalarWithGrad { x, grad } => {
                let dx: Vec<f64> = grad.iter().map(|g| g * gout[0]).collect();
                accumulate(&mut grads[x.0], &dx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (cin, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            _ => unreachable!("checked in forward"),
        };
        let cout = self.shape(w)[0];
        let xs = self.data(x);
        let ws = self.data(w);
        let plane = h * wd;
        if self.nodes[b.0].requires_grad {
            let db: Vec<f64> = gout.chunks(plane).map(|p| p.iter().sum()).collect();
            accumulate(&mut grads[b.0], &db);
        }
        let want_w = self.nodes[w.0].requires_grad;
        let want_x = self.nodes[x.0].requires_grad;
        let mut dw = vec![0.0; ws.len()];
        let mut dx = vec![0.0; xs.len()];
        for co in 0..cout {
            let g = &gout[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let xin = &xs[ci * plane..(ci + 1) * plane];
                let kbase = (co * cin + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = ws[kbase + ky * 3 + kx];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + ky as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let si = si as usize;
                            for j in 0..wd {
                                let sj = j as isize + kx as isize - 1;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                let sj = sj as usize;
                                let gv = g[i * wd + j];
                                acc += gv * xin[si * wd + sj];
                                if want_x {
                                    dx[ci * plane + si * wd + sj] += gv * kv;
                                }
                            }
                        }
                        dw[kbase + ky * 3 + kx] += acc;
                    }
                }
            }
        }
        if want_w {
            accumulate(&mut grads[w.0], &dw);
        }
        if want_x {
            accumulate(&mut grads[x.0], &dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.leaf(mat(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -1.0]]));
        let i = g.constant(Tensor::identity(3));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), g.value(a).data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[1, 5], 3.0));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = g.leaf(mat(&[&[0.0, 60.0]]));
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!(d[0] < 1e-20 && (1.0 - d[1]).abs() < 1e-20);
    }

    #[test]
    fn softplus_and_relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, -1.0, 2.0, 800.0, -800.0]).unwrap());
        let s = g.softplus(x);
        let d = g.value(s).data();
        assert!((d[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d[3], 800.0);
        assert!(d[4] >= 0.0 && d[4].is_finite());
        let r = g.relu(x);
        assert_eq!(&g.value(r).data()[..3], &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn domain_errors_name_the_op() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap());
        match g.log(x) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected domain error, got {other:?}"),
        }
        let y = g.leaf(Tensor::vector(vec![-1.0]).unwrap());
        assert!(matches!(g.sqrt(y), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 4], 7.0));
        let gain = g.leaf(Tensor::filled(&[4], 1.0));
        let bias = g.leaf(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_and_square() {
        let mut g = Graph::new();
        let w = g.leaf(mat(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let w = g.leaf(mat(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_unreachable() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let unused = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        let c = g.constant(Tensor::zeros(&[2, 2]));
        let t = g.add(a, c).unwrap();
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn pooling_floors_odd_lengths() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 9, 5], 1.0));
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 2]);
        let f = g.channels_to_frames(y).unwrap();
        assert_eq!(g.shape(f), &[4, 4]);
    }
}
