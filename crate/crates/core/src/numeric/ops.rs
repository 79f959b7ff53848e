//! Dense kernels. All are pure functions: identical inputs produce
//! bit-identical outputs, and finite inputs produce finite outputs
//! (softmax is max-shifted, logs are clamped, layernorm adds epsilon).

use crate::error::{Error, Result};
use crate::numeric::scalar::Scalar;
use crate::numeric::tensor::Tensor;

/// Variance epsilon for layernorm, fixed so oracles are unambiguous.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Probabilities are clamped here before any log.
pub const LOG_CLAMP: f64 = 1e-12;

fn want_matrix<E: Scalar>(t: &Tensor<E>, what: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(Error::Dimension(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(a, "matmul lhs")?;
    want_matrix(b, "matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents disagree: {m}x{k} vs {k2}x{n}"
        )));
    }
    let mut out = vec![E::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<E: Scalar>(a: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(a, "transpose")?;
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add shapes disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// [n,d] + [1,d], the bias-broadcast used by every affine layer.
pub fn add_row_broadcast<E: Scalar>(a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(a, "add_row_broadcast lhs")?;
    want_matrix(bias, "add_row_broadcast bias")?;
    if bias.rows() != 1 || bias.cols() != a.cols() {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not broadcast over {:?}",
            bias.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    let d = a.cols();
    let bd = bias.data();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        for j in 0..d {
            row[j] += bd[j];
        }
    }
    Ok(out)
}

pub fn scale<E: Scalar>(a: &Tensor<E>, c: E) -> Tensor<E> {
    a.map(|v| v * c)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(x, "softmax_rows")?;
    if !x.all_finite() {
        return Err(Error::Numeric("softmax_rows input is not finite".into()));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = E::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Per-row standardization then affine. gain/bias are [1,d].
pub fn layernorm<E: Scalar>(x: &Tensor<E>, gain: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(x, "layernorm")?;
    let d = x.cols();
    if gain.shape() != [1, d] || bias.shape() != [1, d] {
        return Err(Error::Dimension(format!(
            "layernorm affine shapes {:?}/{:?} do not match width {d}",
            gain.shape(),
            bias.shape()
        )));
    }
    let eps = E::from_f64(LAYERNORM_EPS);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let mut out = x.clone();
    let g = gain.data();
    let b = bias.data();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mut mean = E::ZERO;
        for &v in row.iter() {
            mean += v;
        }
        mean *= inv_d;
        let mut var = E::ZERO;
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rstd = E::ONE / (var + eps).sqrt();
        for j in 0..d {
            row[j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    Ok(out)
}

/// tanh-form GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar<E: Scalar>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::ONE + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    x.map(gelu_scalar)
}

pub fn gelu_grad_scalar<E: Scalar>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (E::ONE + three * k * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * du
}

/// Soft cross-entropy: mean over rows of −Σ target·log(clamp(pred)).
pub fn cross_entropy_soft<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    want_matrix(pred, "cross_entropy_soft pred")?;
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "cross_entropy_soft shapes disagree: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let clamp = E::from_f64(LOG_CLAMP);
    let mut total = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        total -= t * p.maximum(clamp).ln();
    }
    Ok(total / E::from_f64(pred.rows() as f64))
}

/// Σ|x| over one tensor; subgradient at zero is zero.
pub fn l1<E: Scalar>(t: &Tensor<E>) -> E {
    let mut s = E::ZERO;
    for &v in t.data() {
        s += v.abs();
    }
    s
}

/// [n,d] -> [1,d] arithmetic mean over rows.
pub fn mean_rows<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    want_matrix(x, "mean_rows")?;
    let (n, d) = (x.rows(), x.cols());
    let inv = E::ONE / E::from_f64(n as f64);
    let mut out = vec![E::ZERO; d];
    for i in 0..n {
        let row = x.row(i);
        for j in 0..d {
            out[j] += row[j];
        }
    }
    for v in out.iter_mut() {
        *v *= inv;
    }
    Tensor::new(vec![1, d], out)
}

pub fn slice_cols<E: Scalar>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    want_matrix(x, "slice_cols")?;
    if start + len > x.cols() || len == 0 {
        return Err(Error::Dimension(format!(
            "slice_cols [{start}, {start}+{len}) out of width {}",
            x.cols()
        )));
    }
    let mut out = Vec::with_capacity(x.rows() * len);
    for i in 0..x.rows() {
        out.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Tensor::new(vec![x.rows(), len], out)
}

pub fn slice_rows<E: Scalar>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    want_matrix(x, "slice_rows")?;
    if start + len > x.rows() || len == 0 {
        return Err(Error::Dimension(format!(
            "slice_rows [{start}, {start}+{len}) out of height {}",
            x.rows()
        )));
    }
    let d = x.cols();
    let data = x.data()[start * d..(start + len) * d].to_vec();
    Tensor::new(vec![len, d], data)
}

pub fn concat_rows<E: Scalar>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_rows of nothing".into()));
    }
    let d = parts[0].cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        want_matrix(p, "concat_rows part")?;
        if p.cols() != d {
            return Err(Error::Dimension(format!(
                "concat_rows widths disagree: {d} vs {}",
                p.cols()
            )));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, d], data)
}

pub fn concat_cols<E: Scalar>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat_cols of nothing".into()));
    }
    let n = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            want_matrix(p, "concat_cols part")?;
            if p.rows() != n {
                return Err(Error::Dimension(format!(
                    "concat_cols heights disagree: {n} vs {}",
                    p.rows()
                )));
            }
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![n, total], data)
}

/// Mean squared error over all elements (warmup reconstruction objective).
pub fn mse<E: Scalar>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "mse shapes disagree: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut s = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let d = p - t;
        s += d * d;
    }
    Ok(s / E::from_f64(pred.numel() as f64))
}
