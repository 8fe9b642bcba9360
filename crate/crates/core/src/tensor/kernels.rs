//! Forward kernels shared by the autodiff graph and by plain-value callers.
//!
//! Every reduction runs in a fixed index order so identical inputs always
//! give bit-identical outputs.

use super::{Result, Tensor, TensorError};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            // exact form, not the tanh approximation
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
        }
    }

    /// d/dx given the input `x` and the forward output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn unary(op: Unary, x: &Tensor) -> Result<Tensor> {
    if op == Unary::Log {
        if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
    }
    Ok(x.map(|v| op.apply(v)))
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape_err = || TensorError::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (m, k) = require_rank2("matmul", a).map_err(|_| shape_err())?;
    let (k2, n) = require_rank2("matmul", b).map_err(|_| shape_err())?;
    if k != k2 {
        return Err(shape_err());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("transpose", a)?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

/// (outer, axis length, inner) strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Usage(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Output of [`layernorm_parts`]: the affine result plus the cached
/// normalized input and per-row inverse standard deviation.
pub struct LayerNormParts {
    pub output: Tensor,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the last axis with per-feature gain and bias.
pub fn layernorm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormParts> {
    let n = x.cols();
    if gain.numel() != n || bias.numel() != n {
        return Err(TensorError::Shape {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / n;
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![0.0; x.numel()];
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..n {
            let xh = (row[j] - mean) * rstd;
            normalized[r * n + j] = xh;
            out[r * n + j] = xh * g[j] + b[j];
        }
    }
    Ok(LayerNormParts {
        output: Tensor::new(x.shape().to_vec(), out)?,
        normalized,
        inv_std,
    })
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layernorm_parts(x, gain, bias, eps)?.output)
}
