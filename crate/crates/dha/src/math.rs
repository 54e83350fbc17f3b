//! Dense f64 vectors and matrices, activations, and the SPD solver used by
//! the closed-form factor updates.
//!
//! Everything here is 64-bit IEEE-754 with a fixed operation order, so
//! results are reproducible bit-for-bit across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{DhaError, Result};

/// Dense vector of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        DenseVector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(DhaError::DimensionMismatch(format!(
                "dot of vectors with dims {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &DenseVector, scale: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        DenseVector { data }
    }
}

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DhaError::DimensionMismatch(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(DhaError::DimensionMismatch(
                    "ragged rows in matrix constructor".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> DenseVector {
        DenseVector::from_vec(self.row(r).to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x
    pub fn matvec(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.dim() != self.cols {
            return Err(DhaError::DimensionMismatch(format!(
                "matvec: matrix {}x{} with vector of dim {}",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot_slices(self.row(r), x.as_slice());
        }
        Ok(DenseVector::from_vec(out))
    }

    /// y = A^T x
    pub fn matvec_transpose(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.dim() != self.rows {
            return Err(DhaError::DimensionMismatch(format!(
                "matvec_transpose: matrix {}x{} with vector of dim {}",
                self.rows,
                self.cols,
                x.dim()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += xr * a;
            }
        }
        Ok(DenseVector::from_vec(out))
    }

    /// self += scale * u v^T
    pub fn add_outer(&mut self, scale: f64, u: &DenseVector, v: &DenseVector) {
        debug_assert_eq!(u.dim(), self.rows);
        debug_assert_eq!(v.dim(), self.cols);
        for r in 0..self.rows {
            let s = scale * u[r];
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (a, b) in row.iter_mut().zip(v.as_slice()) {
                *a += s * b;
            }
        }
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot_slices(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gram matrix A^T A (cols x cols). Exploits symmetry.
    pub fn gram(&self) -> DenseMatrix {
        let d = self.cols;
        let mut g = DenseMatrix::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let grow = &mut g.data[i * d..(i + 1) * d];
                for j in i..d {
                    grow[j] += ri * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g.data[i * d + j] = g.data[j * d + i];
            }
        }
        g
    }
}

/// Fixed-order dot product with four independent accumulators.
/// The summation order is part of the reproducibility contract.
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        s += xa * xb;
    }
    s
}

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sigmoid,
    Relu,
    Tanh,
    Identity,
}

impl ActivationKind {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation output y = f(x).
    /// All four kinds admit this form, which lets backward passes cache
    /// outputs only.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => y * (1.0 - y),
            ActivationKind::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => 1.0 - y * y,
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn id(self) -> u32 {
        match self {
            ActivationKind::Sigmoid => 0,
            ActivationKind::Relu => 1,
            ActivationKind::Tanh => 2,
            ActivationKind::Identity => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Ok(match id {
            0 => ActivationKind::Sigmoid,
            1 => ActivationKind::Relu,
            2 => ActivationKind::Tanh,
            3 => ActivationKind::Identity,
            other => {
                return Err(DhaError::ConfigInvalid(format!(
                    "unknown activation id {other}"
                )))
            }
        })
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = DhaError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sigmoid" => ActivationKind::Sigmoid,
            "relu" => ActivationKind::Relu,
            "tanh" => ActivationKind::Tanh,
            "identity" => ActivationKind::Identity,
            other => {
                return Err(DhaError::ConfigInvalid(format!(
                    "unknown activation '{other}' (expected sigmoid|relu|tanh|identity)"
                )))
            }
        })
    }
}

/// Apply an activation elementwise.
pub fn apply_activation(kind: ActivationKind, x: &DenseVector) -> DenseVector {
    DenseVector::from_vec(x.as_slice().iter().map(|&v| kind.apply_scalar(v)).collect())
}

/// Solve a x = b for symmetric positive-definite a via Cholesky
/// factorization. Only the lower triangle of a is read.
pub fn solve_spd(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector> {
    let n = a.rows();
    if a.cols() != n {
        return Err(DhaError::DimensionMismatch(format!(
            "solve_spd: matrix is {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.dim() != n {
        return Err(DhaError::DimensionMismatch(format!(
            "solve_spd: matrix dim {} vs rhs dim {}",
            n,
            b.dim()
        )));
    }

    // Lower-triangular Cholesky factor, computed in place on a copy.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !s.is_finite() || s <= 0.0 {
                    return Err(DhaError::NotPositiveDefinite { row: i, pivot: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }

    // Forward substitution: L y = b
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // Back substitution: L^T x = y
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(DenseVector::from_vec(x))
}
