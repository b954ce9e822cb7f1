//! Dense linear algebra, seeded randomness, initializers and finite differences.
//!
//! Matrices are row-major. Matrix-vector products are the hot path; everything
//! else favours clarity. Shape agreement inside the hot kernels is asserted,
//! public entry points that take user data return [`Error::ShapeMismatch`].

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vector(vec![value; n])
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..n).map(f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vector {
        assert_eq!(self.len(), other.len(), "zip_map: length mismatch");
        Vector(self.iter().zip(other).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|v| v * s)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &[f64]) {
        assert_eq!(self.len(), x.len(), "axpy: length mismatch");
        for (s, v) in self.iter_mut().zip(x) {
            *s += a * v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry, first index on ties. Empty vectors give 0.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Copy with a trailing constant 1 appended.
    pub fn augmented(&self) -> Vector {
        let mut v = Vec::with_capacity(self.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(1.0);
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `W x`, where `x` may omit the trailing bias coordinate: if
    /// `x.len() + 1 == cols` the last column is added as a bias.
    pub fn matvec(&self, x: &[f64]) -> Vector {
        let bias = match x.len() {
            n if n == self.cols => false,
            n if n + 1 == self.cols => true,
            n => panic!("matvec: {}x{} matrix against length {n}", self.rows, self.cols),
        };
        let n = x.len();
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let s: f64 = row[..n].iter().zip(x).map(|(a, b)| a * b).sum();
                if bias {
                    s + row[n]
                } else {
                    s
                }
            })
            .collect()
    }

    /// `W[:, ..x.len()] x`, ignoring any trailing columns.
    pub fn matvec_prefix(&self, x: &[f64]) -> Vector {
        let n = x.len();
        assert!(n <= self.cols, "matvec_prefix: length {n} exceeds {} columns", self.cols);
        (0..self.rows)
            .map(|i| self.row(i)[..n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `W^T y` restricted to the first `n` columns.
    pub fn matvec_t_prefix(&self, y: &[f64], n: usize) -> Vector {
        assert_eq!(y.len(), self.rows, "matvec_t: length mismatch");
        assert!(n <= self.cols);
        let mut out = vec![0.0; n];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&self.row(i)[..n]) {
                *o += yi * w;
            }
        }
        Vector(out)
    }

    /// `W^T y`
    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        self.matvec_t_prefix(y, self.cols)
    }

    /// `self += alpha * u v^T`, where `v` may omit the trailing bias coordinate.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "add_outer: row mismatch");
        let bias = match v.len() {
            n if n == self.cols => false,
            n if n + 1 == self.cols => true,
            n => panic!("add_outer: {} columns against length {n}", self.cols),
        };
        let n = v.len();
        let cols = self.cols;
        for (i, &ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a == 0.0 {
                continue;
            }
            let row = &mut self.data[i * cols..(i + 1) * cols];
            for (r, vj) in row[..n].iter_mut().zip(v) {
                *r += a * vj;
            }
            if bias {
                row[n] += a;
            }
        }
    }

    /// `self += alpha * u v^T` on the first `v.len()` columns only.
    pub fn add_outer_prefix(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "add_outer_prefix: row mismatch");
        assert!(v.len() <= self.cols, "add_outer_prefix: column mismatch");
        let cols = self.cols;
        for (i, &ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a == 0.0 {
                continue;
            }
            let row = &mut self.data[i * cols..i * cols + v.len()];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += a * vj;
            }
        }
    }

    /// Largest singular value squared.
    pub fn spectral_norm_sq(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let m = self.to_nalgebra();
        let gram = if self.rows <= self.cols {
            &m * m.transpose()
        } else {
            m.transpose() * &m
        };
        gram.symmetric_eigenvalues().max().max(0.0)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut m = self.clone();
        m.axpy(-1.0, other);
        m
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Seeded counter-based generator. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this seed and a label.
    pub fn fork(seed: u64, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        Rng(r)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.0.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }

    pub fn uniform_vector(&mut self, n: usize, lo: f64, hi: f64) -> Vector {
        Vector::from_fn(n, |_| self.uniform(lo, hi))
    }
}

fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Entries uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let a = glorot_bound(rows, cols);
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-a, a))
}

/// Negated absolute Glorot draws: every entry lies in `[-a, 0)`.
pub fn negative_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let a = glorot_bound(rows, cols);
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v = -rng.uniform(-a, a).abs();
        if v < 0.0 {
            break v;
        }
    })
}

/// `theta - lr * grad`. A zero rate is the identity.
pub fn sgd_step(theta: &Matrix, grad: &Matrix, lr: f64) -> Result<Matrix> {
    if theta.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", theta.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let mut out = theta.clone();
    out.axpy(-lr, grad);
    Ok(out)
}

/// Central differences `(f(θ + h e_ij) - f(θ - h e_ij)) / 2h` for every entry.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Matrix) -> f64,
    theta: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {h}")));
    }
    let mut probe = theta.clone();
    let mut grad = Matrix::zeros(theta.rows(), theta.cols());
    for idx in 0..theta.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let plus = f(&probe);
        probe.data[idx] = orig - h;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at entry {idx}: {plus}, {minus}"
            )));
        }
        grad.data[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Central differences of a scalar function of a vector.
pub fn finite_difference_vector(
    mut f: impl FnMut(&Vector) -> f64,
    x: &Vector,
    h: f64,
) -> Result<Vector> {
    let as_matrix = Matrix::from_vec(1, x.dim(), x.to_vec())?;
    let g = finite_difference_gradient(|m| f(&Vector::from(m.as_slice())), &as_matrix, h)?;
    Ok(Vector::from(g.as_slice()))
}

/// Largest entrywise difference scaled by the reference's largest entry.
pub fn relative_error(got: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(got.shape(), reference.shape());
    let diff = got.sub(reference).max_abs();
    diff / reference.max_abs().max(1e-12)
}
