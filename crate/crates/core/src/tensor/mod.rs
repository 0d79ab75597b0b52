//! Dense row-major `f64` tensors and the small set of kernels the model needs.
//!
//! Every operation has a plain (forward-only) form here and a recorded form on
//! [`Tape`], which adds reverse-mode gradients. Shapes are explicit: the only
//! broadcasting is a trailing-dimension vector applied to every row.

mod kernels;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// Epsilon used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every extent but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("[{m}x{k}] x [{k2}x{n}]"),
        ));
    }
    Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))?.ensure_finite("matmul")
}

/// Softmax along `axis`, stabilized by subtracting the maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, slot) in lane.iter_mut().enumerate() {
                *slot = out[base + e * inner];
            }
            kernels::softmax_in_place(&mut lane);
            for (e, v) in lane.iter().enumerate() {
                out[base + e * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)?.ensure_finite("softmax")
}

/// Layer normalization over the last axis followed by a per-column affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gain/bias of length {}/{} for width {cols}",
                gain.len(),
                bias.len()
            ),
        ));
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gain.data(), bias.data(), cols, eps);
    Tensor::new(x.shape().to_vec(), y)?.ensure_finite("layer_norm")
}

/// Reverse-mode gradients of a scalar `loss` recorded on `tape` with respect
/// to each of `wrt`. A parameter the loss does not depend on gets zeros.
pub fn grad(tape: &Tape, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(wrt.iter().map(|v| grads.wrt(tape, *v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn matmul_identity_and_pick() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());

        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let got = matmul(
            &Tensor::matrix(3, 4, a).unwrap(),
            &Tensor::matrix(4, 2, b).unwrap(),
        )
        .unwrap();
        assert!(close(got.data(), &oracle, 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        assert!(close(u.data(), &[1.0 / 3.0; 3], 1e-15));
        let big = softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert!(close(big.data(), &[0.5, 0.5], 1e-15));
        let l = softmax(&Tensor::vector(vec![1f64.ln(), 3f64.ln()]), 0).unwrap();
        assert!(close(l.data(), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &[0.5; 4], 1e-15));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0; 4]);
        let zero = Tensor::vector(vec![0.0; 4]);
        let c = layer_norm(&Tensor::vector(vec![7.0; 4]), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert!(close(c.data(), &[0.0; 4], 1e-12));

        let one2 = Tensor::vector(vec![1.0; 2]);
        let zero2 = Tensor::vector(vec![0.0; 2]);
        let y = layer_norm(&Tensor::vector(vec![-1.0, 1.0]), &one2, &zero2, LAYER_NORM_EPS)
            .unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-5));

        let bias = Tensor::vector(vec![0.5, -2.0]);
        let collapsed = layer_norm(
            &Tensor::from_rows(&[vec![3.0, 9.0], vec![-4.0, 2.0]]).unwrap(),
            &zero2,
            &bias,
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert_eq!(collapsed.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!((t.rows(), t.cols()), (6, 4));
    }
}
