//! Primitive operations: forward kernels and their vector-Jacobian products.
//!
//! Every primitive works on [`Tensor`]s. Matrix primitives require 2-D
//! operands; elementwise primitives require identical shapes (no implicit
//! broadcasting, apart from the bias row of [`Op::Affine`]).

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{DiffError, Tensor};

/// Source map for [`Op::Gather`]: output element `i` copies input element
/// `src[i]`, or is zero when `src[i]` is `None`.
#[derive(Debug, PartialEq)]
pub struct GatherIndex {
    pub shape: Vec<usize>,
    pub src: Vec<Option<usize>>,
}

impl GatherIndex {
    pub fn new(shape: Vec<usize>, src: Vec<Option<usize>>) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != src.len() {
            return Err(DiffError::BadData { shape, len: src.len() });
        }
        Ok(Self { shape, src })
    }

    /// Column selection `x[:, cols]` for an `rows x in_cols` matrix.
    pub fn columns(rows: usize, in_cols: usize, cols: &[usize]) -> Self {
        let mut src = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            src.extend(cols.iter().map(|&c| Some(r * in_cols + c)));
        }
        Self {
            shape: vec![rows, cols.len()],
            src,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    MatMul,
    /// `x · w + b` with `b` a single row broadcast over the rows of `x · w`.
    Affine,
    Relu,
    Softplus,
    Tanh,
    Clip {
        lo: f64,
        hi: f64,
    },
    Square,
    Scale(f64),
    AddScalar(f64),
    Sum,
    Mean,
    /// Row-wise minimum: `[n, m] -> [n, 1]`.
    MinReduce,
    /// Row-wise maximum: `[n, m] -> [n, 1]`.
    MaxReduce,
    Concat {
        axis: usize,
    },
    Reshape(Vec<usize>),
    Transpose,
    Gather(Arc<GatherIndex>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Tanh => "tanh",
            Op::Clip { .. } => "clip",
            Op::Square => "square",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MinReduce => "min_reduce",
            Op::MaxReduce => "max_reduce",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::Gather(_) => "gather",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => Some(2),
            Op::Affine => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(DiffError::Arity {
                    op: self.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        }
        match self {
            Op::Add => zip_map(self, inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => zip_map(self, inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => zip_map(self, inputs[0], inputs[1], |a, b| a * b),
            Op::MatMul => {
                let (m, k) = dims2(self, inputs[0])?;
                let (k2, n) = dims2(self, inputs[1])?;
                if k != k2 {
                    return Err(mismatch(self, inputs[0], inputs[1]));
                }
                let mut out = Tensor::zeros([m, n]);
                gemm(
                    view(inputs[0].data(), m, k),
                    view(inputs[1].data(), k, n),
                    out.data_mut(),
                    0.0,
                );
                Ok(out)
            }
            Op::Affine => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (m, k) = dims2(self, x)?;
                let (k2, n) = dims2(self, w)?;
                if k != k2 {
                    return Err(mismatch(self, x, w));
                }
                if b.numel() != n {
                    return Err(mismatch(self, w, b));
                }
                let mut out = Tensor::zeros([m, n]);
                {
                    let data = out.data_mut();
                    for r in 0..m {
                        data[r * n..(r + 1) * n].copy_from_slice(b.data());
                    }
                }
                gemm(view(x.data(), m, k), view(w.data(), k, n), out.data_mut(), 1.0);
                Ok(out)
            }
            Op::Relu => Ok(map(inputs[0], |x| if x > 0.0 { x } else { 0.0 })),
            Op::Softplus => Ok(map(inputs[0], softplus)),
            Op::Tanh => Ok(map(inputs[0], f64::tanh)),
            Op::Clip { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                Ok(map(inputs[0], |x| x.max(lo).min(hi)))
            }
            Op::Square => Ok(map(inputs[0], |x| x * x)),
            Op::Scale(s) => {
                let s = *s;
                Ok(map(inputs[0], |x| s * x))
            }
            Op::AddScalar(s) => {
                let s = *s;
                Ok(map(inputs[0], |x| x + s))
            }
            Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Op::Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(DiffError::Empty { op: self.name() });
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            Op::MinReduce | Op::MaxReduce => {
                let x = inputs[0];
                let (n, m) = dims2(self, x)?;
                if m == 0 {
                    return Err(DiffError::Empty { op: self.name() });
                }
                let take_min = matches!(self, Op::MinReduce);
                let data = (0..n).map(|r| x.row(r)[arg_extreme(x.row(r), take_min)]).collect();
                Tensor::new([n, 1], data)
            }
            Op::Concat { axis } => concat(self, *axis, inputs),
            Op::Reshape(shape) => {
                let x = inputs[0];
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(DiffError::ShapeMismatch {
                        op: self.name(),
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                x.clone().reshaped(shape.clone())
            }
            Op::Transpose => {
                let (r, c) = dims2(self, inputs[0])?;
                Ok(transpose(inputs[0], r, c))
            }
            Op::Gather(index) => {
                let x = inputs[0].data();
                let mut data = Vec::with_capacity(index.src.len());
                for s in &index.src {
                    data.push(match s {
                        Some(j) => *x.get(*j).ok_or(DiffError::ShapeMismatch {
                            op: self.name(),
                            lhs: inputs[0].shape().to_vec(),
                            rhs: index.shape.clone(),
                        })?,
                        None => 0.0,
                    });
                }
                Tensor::new(index.shape.clone(), data)
            }
        }
    }

    /// Vector-Jacobian product: given the upstream gradient of the output,
    /// the gradient contribution for each input (in input order).
    ///
    /// `needs[i]` false allows skipping the (possibly expensive) gradient of
    /// input `i`; the returned slot is then `None`.
    pub fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let all = match self {
            Op::Add => vec![grad.clone(), grad.clone()],
            Op::Sub => vec![grad.clone(), map(grad, |g| -g)],
            Op::Mul => vec![
                zip_unchecked(grad, inputs[1], |g, b| g * b),
                zip_unchecked(grad, inputs[0], |g, a| g * a),
            ],
            Op::MatMul => {
                let (m, k) = inputs[0].dims2().expect("checked in forward");
                let n = out.shape()[1];
                let g = view(grad.data(), m, n);
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros([m, k]);
                    gemm(g, view(inputs[1].data(), k, n).t(), da.data_mut(), 0.0);
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros([k, n]);
                    gemm(view(inputs[0].data(), m, k).t(), g, db.data_mut(), 0.0);
                    db
                });
                return vec![da, db];
            }
            Op::Affine => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (m, k) = x.dims2().expect("checked in forward");
                let n = out.shape()[1];
                let g = view(grad.data(), m, n);
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros([m, k]);
                    gemm(g, view(w.data(), k, n).t(), dx.data_mut(), 0.0);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros([k, n]);
                    gemm(view(x.data(), m, k).t(), g, dw.data_mut(), 0.0);
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = Tensor::zeros(b.shape().to_vec());
                    let acc = db.data_mut();
                    for r in 0..m {
                        for (a, v) in acc.iter_mut().zip(grad.row(r)) {
                            *a += v;
                        }
                    }
                    db
                });
                return vec![dx, dw, db];
            }
            Op::Relu => vec![zip_unchecked(grad, inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })],
            Op::Softplus => vec![zip_unchecked(grad, inputs[0], |g, x| g * sigmoid(x))],
            Op::Tanh => vec![zip_unchecked(grad, out, |g, y| g * (1.0 - y * y))],
            Op::Clip { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                vec![zip_unchecked(
                    grad,
                    inputs[0],
                    |g, x| {
                        if x > lo && x < hi {
                            g
                        } else {
                            0.0
                        }
                    },
                )]
            }
            Op::Square => vec![zip_unchecked(grad, inputs[0], |g, x| 2.0 * g * x)],
            Op::Scale(s) => {
                let s = *s;
                vec![map(grad, |g| s * g)]
            }
            Op::AddScalar(_) => vec![grad.clone()],
            Op::Sum => vec![Tensor::full(inputs[0].shape().to_vec(), grad.item())],
            Op::Mean => {
                let n = inputs[0].numel() as f64;
                vec![Tensor::full(inputs[0].shape().to_vec(), grad.item() / n)]
            }
            Op::MinReduce | Op::MaxReduce => {
                let x = inputs[0];
                let (n, m) = x.dims2().expect("checked in forward");
                let take_min = matches!(self, Op::MinReduce);
                let mut dx = Tensor::zeros([n, m]);
                let data = dx.data_mut();
                for r in 0..n {
                    data[r * m + arg_extreme(x.row(r), take_min)] = grad.data()[r];
                }
                vec![dx]
            }
            Op::Concat { axis } => split(*axis, inputs, grad),
            Op::Reshape(_) => vec![grad
                .clone()
                .reshaped(inputs[0].shape().to_vec())
                .expect("same element count")],
            Op::Transpose => {
                let (r, c) = out.dims2().expect("2-D");
                vec![transpose(grad, r, c)]
            }
            Op::Gather(index) => {
                let mut dx = Tensor::zeros(inputs[0].shape().to_vec());
                let acc = dx.data_mut();
                for (s, g) in index.src.iter().zip(grad.data()) {
                    if let Some(j) = s {
                        acc[*j] += g;
                    }
                }
                vec![dx]
            }
        };
        all.into_iter().zip(needs).map(|(g, &need)| need.then_some(g)).collect()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
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

/// Index of the first minimum (or maximum) of a non-empty row.
fn arg_extreme(row: &[f64], take_min: bool) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        let better = if take_min { v < row[best] } else { v > row[best] };
        if better {
            best = i;
        }
    }
    best
}

fn view(data: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), data).expect("shape checked by caller")
}

fn gemm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, c: &mut [f64], beta: f64) {
    let (m, n) = (a.nrows(), b.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("shape checked by caller");
    general_mat_mul(1.0, &a, &b, beta, &mut cv);
}

fn transpose(x: &Tensor, r: usize, c: usize) -> Tensor {
    let src = x.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new([c, r], data).expect("same element count")
}

fn dims2(op: &Op, x: &Tensor) -> Result<(usize, usize), DiffError> {
    x.dims2().ok_or_else(|| DiffError::NotMatrix {
        op: op.name(),
        shape: x.shape().to_vec(),
    })
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same element count")
}

fn zip_unchecked(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same element count")
}

fn zip_map(op: &Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(zip_unchecked(a, b, f))
}

fn concat(op: &Op, axis: usize, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    let first = inputs.first().ok_or(DiffError::Empty { op: op.name() })?;
    let (r0, c0) = dims2(op, first)?;
    match axis {
        0 => {
            let mut rows = 0;
            let mut data = Vec::new();
            for x in inputs {
                let (r, c) = dims2(op, x)?;
                if c != c0 {
                    return Err(mismatch(op, first, x));
                }
                rows += r;
                data.extend_from_slice(x.data());
            }
            Tensor::new([rows, c0], data)
        }
        1 => {
            let mut cols = 0;
            for x in inputs {
                let (r, c) = dims2(op, x)?;
                if r != r0 {
                    return Err(mismatch(op, first, x));
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for x in inputs {
                    data.extend_from_slice(x.row(r));
                }
            }
            Tensor::new([r0, cols], data)
        }
        _ => Err(DiffError::BadAxis { op: op.name(), axis }),
    }
}

fn split(axis: usize, inputs: &[&Tensor], grad: &Tensor) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    match axis {
        0 => {
            let mut offset = 0;
            for x in inputs {
                let n = x.numel();
                out.push(
                    Tensor::new(x.shape().to_vec(), grad.data()[offset..offset + n].to_vec())
                        .expect("same element count"),
                );
                offset += n;
            }
        }
        _ => {
            let mut offset = 0;
            for x in inputs {
                let (r, c) = x.dims2().expect("2-D");
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend_from_slice(&grad.row(i)[offset..offset + c]);
                }
                out.push(Tensor::new([r, c], data).expect("same element count"));
                offset += c;
            }
        }
    }
    out
}
