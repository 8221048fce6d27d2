//! Dense 2-D tensors over f32/f64 and the handful of kernels the tape needs.
//!
//! Everything in the training stack is a row-major matrix; vectors are 1xN.
//! Kernels iterate in fixed orders so that repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::CheckpointFormat(format!("unknown dtype {other:?}"))),
        }
    }

    pub fn byte_width(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar type of the numeric substrate. f32 is the training default,
/// f64 exists for gradient-verification runs.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: S) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn l2_norm(&self) -> S {
        let mut acc = S::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape());
        let mut m = S::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    pub fn add_scaled(&mut self, other: &Self, c: S) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * c;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }
}

/// C = op(A) @ op(B) where op transposes when the flag is set.
pub fn matmul<S: Real>(a: &Tensor<S>, ta: bool, b: &Tensor<S>, tb: bool) -> Tensor<S> {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "matmul inner dimension mismatch");
    let k = ka;
    let mut out = Tensor::zeros(m, n);
    match (ta, tb) {
        (false, false) => {
            // C[i] += A[i][p] * B[p]
            for i in 0..m {
                let a_row = a.row(i);
                let out_row = out.row_mut(i);
                for p in 0..k {
                    let av = a_row[p];
                    if av == S::zero() {
                        continue;
                    }
                    let b_row = b.row(p);
                    for j in 0..n {
                        out_row[j] += av * b_row[j];
                    }
                }
            }
        }
        (false, true) => {
            // C[i][j] = dot(A[i], B[j])
            for i in 0..m {
                let a_row = a.row(i);
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] = dot(a_row, b.row(j));
                }
            }
        }
        (true, false) => {
            // C[i][j] = sum_p A[p][i] * B[p][j]
            for p in 0..k {
                let a_row = a.row(p);
                let b_row = b.row(p);
                for i in 0..m {
                    let av = a_row[i];
                    if av == S::zero() {
                        continue;
                    }
                    let out_row = out.row_mut(i);
                    for j in 0..n {
                        out_row[j] += av * b_row[j];
                    }
                }
            }
        }
        (true, true) => {
            // Rare; go through an explicit transpose of A.
            let at = a.transpose();
            return matmul(&at, false, b, true);
        }
    }
    out
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// tanh-form GELU; the analytic derivative in the tape matches this form
/// exactly, which keeps finite-difference checks clean.
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    let half = S::from_f64(0.5);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let d_inner = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * sech2 * d_inner
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
