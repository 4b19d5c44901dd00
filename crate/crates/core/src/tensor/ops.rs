//! Primitive operations and their adjoints.

use super::tape::{accumulate, Node, Op, Var};
use super::value::Tensor;
use crate::error::{contract_err, dim_err, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe the given slices exactly; every index
    // touched is below m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

impl<'t> Var<'t> {
    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_pair<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return dim_err(format!("{what}: shapes {a:?} and {b:?} differ"));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.with_pair(other, |a, b| {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(|a| {
            let data = a.data().iter().map(|&x| f(x)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
        })
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return dim_err(format!("{what} expects a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = self.zip_with(other, |a, b| a + b);
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = self.zip_with(other, |a, b| a - b);
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = self.zip_with(other, |a, b| a * b);
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    /// Adds a vector to every row (bias broadcast over the trailing axis).
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_pair(bias, |x, b| {
            if b.numel() != x.cols() || x.shape().is_empty() {
                return dim_err(format!(
                    "add_row: bias {:?} does not match trailing extent of {:?}",
                    b.shape(),
                    x.shape()
                ));
            }
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                row.iter_mut().zip(b.data()).for_each(|(r, &bv)| *r += bv);
            }
            Tensor::new(x.shape().to_vec(), data)
        })?;
        Ok(self.tape.push(v, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner extents differ, [{m}x{k}] x [{k2}x{n}]"
            ));
        }
        let v = self.with_pair(other, |a, b| {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
            Tensor::matrix(m, n, out).expect("matmul shape")
        });
        Ok(self.tape.push(v, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("transpose")?;
        let v = self.with_value(|a| {
            let src = a.data();
            let mut out = vec![0.0; src.len()];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
            Tensor::matrix(cols, rows, out).expect("transpose shape")
        });
        Ok(self.tape.push(v, Op::Transpose { input: self.id, rows, cols }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshaped(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return contract_err("concat of an empty list");
        };
        let tape = first.tape;
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|p| p.matrix_dims("concat")).collect::<Result<_>>()?;
        let v = {
            let nodes = tape.nodes.borrow();
            match axis {
                0 => {
                    let cols = dims[0].1;
                    if let Some(d) = dims.iter().find(|d| d.1 != cols) {
                        return dim_err(format!("concat rows: column counts {cols} and {} differ", d.1));
                    }
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.data());
                    }
                    let rows = dims.iter().map(|d| d.0).sum();
                    Tensor::matrix(rows, cols, data)?
                }
                1 => {
                    let rows = dims[0].0;
                    if let Some(d) = dims.iter().find(|d| d.0 != rows) {
                        return dim_err(format!("concat cols: row counts {rows} and {} differ", d.0));
                    }
                    let cols: usize = dims.iter().map(|d| d.1).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for (p, d) in parts.iter().zip(&dims) {
                            data.extend_from_slice(&nodes[p.id].value.data()[r * d.1..(r + 1) * d.1]);
                        }
                    }
                    Tensor::matrix(rows, cols, data)?
                }
                _ => return dim_err(format!("concat axis {axis} unsupported for matrices")),
            }
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(v, Op::Concat { inputs, axis }))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("slice_cols")?;
        if start + width > cols {
            return dim_err(format!("slice_cols {start}..{} out of {cols} columns", start + width));
        }
        let v = self.with_value(|a| {
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + width]);
            }
            Tensor::matrix(rows, width, data).expect("slice shape")
        });
        Ok(self.tape.push(v, Op::SliceCols { input: self.id, start, width }))
    }

    /// Rows picked by `index` (repeats allowed); adjoint scatter-adds.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        self.matrix_dims("gather_rows")?;
        let v = self.with_value(|a| a.gather_rows(index))?;
        Ok(self.tape.push(v, Op::GatherRows { input: self.id, index: index.to_vec() }))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with_value(|a| a.data().iter().sum::<f64>());
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let (s, n) = self.with_value(|a| (a.data().iter().sum::<f64>(), a.numel()));
        if n == 0 {
            return contract_err("mean of an empty tensor");
        }
        Ok(self.tape.push(Tensor::scalar(s / n as f64), Op::Mean(self.id)))
    }

    /// Column means of a matrix, as a `1×cols` matrix.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("mean_rows")?;
        if rows == 0 {
            return contract_err("mean_rows of a matrix with no rows");
        }
        let v = self.with_value(|a| {
            let mut out = vec![0.0; cols];
            for r in a.data().chunks(cols) {
                out.iter_mut().zip(r).for_each(|(o, &x)| *o += x);
            }
            out.iter_mut().for_each(|o| *o /= rows as f64);
            Tensor::matrix(1, cols, out).expect("mean_rows shape")
        });
        Ok(self.tape.push(v, Op::MeanRows(self.id)))
    }

    /// Normalizes over the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let cols = self.with_value(|a| a.cols());
        if gain.with_value(|g| g.numel()) != cols || bias.with_value(|b| b.numel()) != cols {
            return dim_err(format!(
                "layer_norm: gain {:?}/bias {:?} do not match trailing extent {cols}",
                gain.shape(),
                bias.shape()
            ));
        }
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let g = nodes[gain.id].value.data();
        let b = nodes[bias.id].value.data();
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; x.numel()];
        for ((src, xh), dst) in x.data().chunks(cols).zip(xhat.chunks_mut(cols)).zip(out.chunks_mut(cols)) {
            let mu = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..cols {
                xh[j] = (src[j] - mu) * r;
                dst[j] = xh[j] * g[j] + b[j];
            }
        }
        let shape = x.shape().to_vec();
        drop(nodes);
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.push(v, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd }))
    }

    /// Batch normalization of a `batch × features` matrix over the batch axis.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// updated running statistics (biased mean, unbiased variance blended
    /// with `momentum`) are returned. In eval mode the running statistics
    /// are used and nothing is returned.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn batch_norm(
        &self,
        gain: &Var<'t>,
        bias: &Var<'t>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        momentum: f64,
        train: bool,
    ) -> Result<(Var<'t>, Option<(Vec<f64>, Vec<f64>)>)> {
        let (rows, cols) = self.matrix_dims("batch_norm")?;
        if gain.with_value(|g| g.numel()) != cols
            || bias.with_value(|b| b.numel()) != cols
            || running_mean.len() != cols
            || running_var.len() != cols
        {
            return dim_err(format!("batch_norm: parameter extents do not match {cols} features"));
        }
        if rows == 0 {
            return contract_err("batch_norm of an empty batch");
        }
        let nodes = self.tape.nodes.borrow();
        let x = nodes[self.id].value.data();
        let g = nodes[gain.id].value.data();
        let b = nodes[bias.id].value.data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; cols];
            for r in x.chunks(cols) {
                mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; cols];
            for r in x.chunks(cols) {
                for j in 0..cols {
                    var[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                xhat[k] = (x[k] - mean[j]) * rstd[j];
                out[k] = xhat[k] * g[j] + b[j];
            }
        }
        drop(nodes);
        let running = train.then(|| {
            let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let rm = running_mean.iter().zip(&mean).map(|(r, m)| (1.0 - momentum) * r + momentum * m).collect();
            let rv = running_var
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
                .collect();
            (rm, rv)
        });
        let v = Tensor::matrix(rows, cols, out)?;
        let var_out = self.tape.push(
            v,
            Op::BatchNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd, train },
        );
        Ok((var_out, running))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.map(gelu);
        self.tape.push(v, Op::Gelu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.map(softplus);
        self.tape.push(v, Op::Softplus(self.id))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let v = self.with_value(|a| {
            if a.shape().is_empty() {
                return dim_err("softmax of a scalar");
            }
            Tensor::new(a.shape().to_vec(), softmax_rows(a.data(), a.cols()))
        })?;
        Ok(self.tape.push(v, Op::Softmax(self.id)))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let v = self.with_value(|a| {
            if a.shape().is_empty() {
                return dim_err("log_softmax of a scalar");
            }
            let cols = a.cols();
            let mut out = vec![0.0; a.numel()];
            for (src, dst) in a.data().chunks(cols).zip(out.chunks_mut(cols)) {
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s - lse);
            }
            Tensor::new(a.shape().to_vec(), out)
        })?;
        Ok(self.tape.push(v, Op::LogSoftmax(self.id)))
    }
}

/// Replays the adjoint of node `id` given its upstream gradient `g`.
pub(crate) fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(x, b) => {
            accumulate(nodes, grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| {
                let c = s.len();
                for row in g.chunks(c) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(nodes, grads, *a, |s| gemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, s));
            accumulate(nodes, grads, *b, |s| gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, s));
        }
        Op::Transpose { input, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            accumulate(nodes, grads, *input, |s| {
                for i in 0..rows {
                    for j in 0..cols {
                        s[i * cols + j] += g[j * rows + i];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Concat { inputs, axis } => {
            let out_cols = node.value.cols();
            let mut offset = 0;
            for &p in inputs {
                let pv = &nodes[p].value;
                let (pr, pc) = (pv.rows(), pv.cols());
                match axis {
                    0 => {
                        let start = offset * out_cols;
                        accumulate(nodes, grads, p, |s| {
                            s.iter_mut().zip(&g[start..start + pr * pc]).for_each(|(s, g)| *s += g)
                        });
                        offset += pr;
                    }
                    _ => {
                        accumulate(nodes, grads, p, |s| {
                            for r in 0..pr {
                                for c in 0..pc {
                                    s[r * pc + c] += g[r * out_cols + offset + c];
                                }
                            }
                        });
                        offset += pc;
                    }
                }
            }
        }
        Op::SliceCols { input, start, width } => {
            let cols = nodes[*input].value.cols();
            let (start, width) = (*start, *width);
            accumulate(nodes, grads, *input, |s| {
                for (r, grow) in g.chunks(width).enumerate() {
                    for c in 0..width {
                        s[r * cols + start + c] += grow[c];
                    }
                }
            });
        }
        Op::GatherRows { input, index } => {
            let cols = node.value.cols();
            accumulate(nodes, grads, *input, |s| {
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        s[src * cols + c] += g[r * cols + c];
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::MeanRows(a) => {
            let av = &nodes[*a].value;
            let (rows, cols) = (av.rows() as f64, av.cols());
            accumulate(nodes, grads, *a, |s| {
                for row in s.chunks_mut(cols) {
                    row.iter_mut().zip(g).for_each(|(s, g)| *s += g / rows);
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let cols = node.value.cols();
            let gv = val(*gain);
            accumulate(nodes, grads, *x, |s| {
                let mut gx = vec![0.0; cols];
                for (r, ((srow, grow), xrow)) in
                    s.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..cols {
                        gx[j] = grow[j] * gv[j];
                        mean_g += gx[j];
                        mean_gx += gx[j] * xrow[j];
                    }
                    mean_g /= cols as f64;
                    mean_gx /= cols as f64;
                    for j in 0..cols {
                        srow[j] += rstd[r] * (gx[j] - mean_g - xrow[j] * mean_gx);
                    }
                }
            });
            accumulate(nodes, grads, *gain, |s| {
                for (grow, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        s[j] += grow[j] * xrow[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |s| {
                for grow in g.chunks(cols) {
                    s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::BatchNorm { x, gain, bias, xhat, rstd, train } => {
            let cols = node.value.cols();
            let rows = node.value.rows();
            let gv = val(*gain);
            accumulate(nodes, grads, *x, |s| {
                if *train {
                    for j in 0..cols {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for i in 0..rows {
                            let k = i * cols + j;
                            mean_g += g[k] * gv[j];
                            mean_gx += g[k] * gv[j] * xhat[k];
                        }
                        mean_g /= rows as f64;
                        mean_gx /= rows as f64;
                        for i in 0..rows {
                            let k = i * cols + j;
                            s[k] += rstd[j] * (g[k] * gv[j] - mean_g - xhat[k] * mean_gx);
                        }
                    }
                } else {
                    for i in 0..rows {
                        for j in 0..cols {
                            s[i * cols + j] += g[i * cols + j] * gv[j] * rstd[j];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *gain, |s| {
                for (grow, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        s[j] += grow[j] * xrow[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |s| {
                for grow in g.chunks(cols) {
                    s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * gelu_grad(av[i]);
                }
            });
        }
        Op::Softplus(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * sigmoid(av[i]);
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let cols = node.value.cols();
            accumulate(nodes, grads, *a, |s| {
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..cols {
                        srow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let cols = node.value.cols();
            accumulate(nodes, grads, *a, |s| {
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..cols {
                        srow[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            });
        }
    }
}
