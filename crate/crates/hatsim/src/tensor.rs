//! Dense row-major f64 tensors.
//!
//! Everything in this crate is desk-scale, so a plain `Vec<f64>` with a shape
//! is enough. Matrices are `[rows, cols]`, vectors `[n]`, scalars `[1]`.

use crate::error::{HatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.contains(&0) {
            return Err(HatError::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(HatError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Index and sign of the entry with the largest absolute value
    /// (first occurrence wins ties).
    pub fn argmax_abs(&self) -> (usize, f64) {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        (best, self.data[best])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// c = a · b for `[m,k] × [k,n]`.
pub fn matmul(a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(HatError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    TensorValue::new(vec![m, n], out)
}

/// c = x · wᵀ for `x: [b, n]`, `w: [m, n]` — the layer orientation used
/// throughout the crate.
pub fn matmul_nt(x: &TensorValue, w: &TensorValue) -> Result<TensorValue> {
    let (b, n) = (x.rows(), x.cols());
    let (m, n2) = (w.rows(), w.cols());
    if n != n2 {
        return Err(HatError::ShapeMismatch {
            op: "matmul_nt",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for o in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += x.data[i * n + j] * w.data[o * n + j];
            }
            out[i * m + o] = acc;
        }
    }
    TensorValue::new(vec![b, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant() {
        assert!(TensorValue::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorValue::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorValue::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let w = TensorValue::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = TensorValue::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let z = matmul(&w, &x).unwrap();
        assert_eq!(z.data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_nt_matches_manual() {
        // x: [1,3], w: [2,3] -> [1,2]
        let x = TensorValue::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = TensorValue::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let z = matmul_nt(&x, &w).unwrap();
        assert_eq!(z.data(), &[-2.0, 3.0]);
    }

    #[test]
    fn argmax_abs_first_tie() {
        let t = TensorValue::new(vec![4], vec![-2.0, 2.0, 1.0, -2.0]).unwrap();
        let (i, v) = t.argmax_abs();
        assert_eq!(i, 0);
        assert_eq!(v, -2.0);
    }
}
