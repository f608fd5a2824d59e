//! Dense row-major `f64` arrays and the raw kernels the tape is built on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                alloc::format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// `rows × cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
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

    /// Row count when viewed as a matrix; rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", alloc::format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// `out[r×c] += a[r×k] · b[k×c]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * c + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * c..(i + 1) * c];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums keep the loop vectorizable without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub fn l2_norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Plain matrix product without the tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = (a.rows(), a.cols());
    let (k2, c) = (b.rows(), b.cols());
    if k != k2 {
        return Err(shape_err("matmul", alloc::format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0; r * c];
    gemm_nn(&a.data, &b.data, &mut out, r, k, c);
    Tensor::matrix(r, c, out)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let s = matmul(&Tensor::from_rows(&[&[2.0]]).unwrap(), &Tensor::from_rows(&[&[3.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[6.0]);
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        gemm_nn(&a, &b, &mut nn, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((nn[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // b^T is 4x3; a · (b^T)^T via gemm_nt must equal nn
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 4);
        for (x, y) in nn.iter().zip(&nt) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T (3x2) · nn (2x4)
        let mut tn = vec![0.0; 12];
        gemm_tn(&a, &nn, &mut tn, 2, 3, 4);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * nn[i * 4 + j]).sum();
                assert!((tn[p * 4 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0, 2.0, 3.0, -50.0]);
        let s: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
