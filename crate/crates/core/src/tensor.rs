//! Dense f64 arrays of rank 0..=2 with the small op set the tape needs.
//!
//! Broadcasting is deliberately restricted: elementwise ops accept equal
//! shapes or a scalar (rank-0) operand, nothing else. Anything fancier must
//! be spelled out with explicit reshape/broadcast ops.

use crate::autodiff::AutodiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], x: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![x; n] }
    }

    pub fn from_shape(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
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

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine under the restricted broadcast rule.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor { shape: self.shape.clone(), data })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// (m,n) x (n,k) -> (m,k); plain ikj loop, fast enough at lab sizes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, n, k) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let arow = &self.data[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * k..(p + 1) * k];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, k], data: out })
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data }
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert_eq!(self.rank(), 2, "sum_axis needs rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += self.data[i * n + j];
                    }
                }
                Tensor { shape: vec![n], data: out }
            }
            1 => {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    out[i] = self.data[i * n..(i + 1) * n].iter().sum();
                }
                Tensor { shape: vec![m], data: out }
            }
            _ => panic!("axis {axis} out of range"),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
