//! Dense row-major f32 tensors.
//!
//! Deliberately minimal: shapes are plain `Vec<usize>`, data is a flat
//! `Vec<f32>`, and reductions accumulate in f64 so that results stay
//! deterministic and finite-difference oracles stay honest.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller keeps us independent of rand_distr.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (z as f32) * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = *self.shape.last().expect("row() needs >= 1 dim");
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = *self.shape.last().expect("row_mut() needs >= 1 dim");
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate 2-D tensors along the last dimension.
    pub fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("hcat of zero tensors"));
        }
        let rows = parts[0].shape[0];
        for p in parts {
            if p.shape.len() != 2 || p.shape[0] != rows {
                return Err(Error::invalid("hcat expects 2-D tensors with equal rows"));
            }
        }
        let d_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Tensor::zeros(&[rows, d_total]);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let d = p.shape[1];
                out.data[r * d_total + off..r * d_total + off + d].copy_from_slice(p.row(r));
                off += d;
            }
        }
        Ok(out)
    }
}

/// `a (p×q) * b (q×r)` with f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = dims2(a)?;
    let (q2, r) = dims2(b)?;
    if q != q2 {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[p, r]);
    matmul_into(a.data(), b.data(), p, q, r, out.data_mut());
    Ok(out)
}

pub(crate) fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(format!("expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Flat `a (p×q) * b (q×r)` into `out (p×r)`, accumulating in f64.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], p: usize, q: usize, r: usize, out: &mut [f32]) {
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0f64;
            for k in 0..q {
                acc += a[i * q + k] as f64 * b[k * r + j] as f64;
            }
            out[i * r + j] = acc as f32;
        }
    }
}

/// Flat `a (p×q) * b^T` where b is (r×q), into `out (p×r)`.
pub(crate) fn matmul_tb_into(a: &[f32], b: &[f32], p: usize, q: usize, r: usize, out: &mut [f32]) {
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0f64;
            for k in 0..q {
                acc += a[i * q + k] as f64 * b[j * q + k] as f64;
            }
            out[i * r + j] = acc as f32;
        }
    }
}

/// Flat `a^T (q×p) * b (p×r)` where a is (p×q), into `out (q×r)`.
pub(crate) fn matmul_ta_into(a: &[f32], b: &[f32], p: usize, q: usize, r: usize, out: &mut [f32]) {
    for i in 0..q {
        for j in 0..r {
            let mut acc = 0.0f64;
            for k in 0..p {
                acc += a[k * q + i] as f64 * b[k * r + j] as f64;
            }
            out[i * r + j] = acc as f32;
        }
    }
}

/// Adds `src` into `dst` element-wise.
pub(crate) fn axpy(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_bitwise() {
        let m = Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 3.25, 0.125]).unwrap();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn reshape_rejects_bad_size() {
        let m = Tensor::zeros(&[2, 3]);
        assert!(m.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn hcat_lays_out_rows() {
        let a = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::hcat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
