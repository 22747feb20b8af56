//! Dense row-major matrices and the row-stochastic helpers built on them.
//!
//! Everything here is `f64`. Gradient checks elsewhere in the crate compare
//! against central differences at ~1e-5 relative error, which single
//! precision cannot deliver.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Row sums below this are treated as degenerate by [`row_normalize`].
pub const DEGENERATE_ROW_SUM: f64 = 1e-30;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries ({rows}x{cols})", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "Matrix::from_vec",
                format!(
                    "non-finite entry at ({}, {})",
                    pos / cols.max(1),
                    pos % cols.max(1)
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Row-major constructor that skips validation. Callers guarantee the
    /// length and finiteness invariants.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("equal row counts ({})", self.rows),
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let rhs_row = &rhs.data[p * m..(p + 1) * m];
            for i in 0..n {
                let a = self.data[p * n + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("equal column counts ({})", self.cols),
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", rhs, |a, b| a * b)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Sum of each row, as a column vector stored in a `Vec`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Index of the largest entry in row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }

    fn check_same_shape(&self, op: &'static str, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(op, rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// An `n × m` matrix whose rows are probability distributions over labels.
#[derive(Clone, PartialEq, Serialize)]
pub struct AssignmentMatrix(Matrix);

impl fmt::Debug for AssignmentMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Assignment{:?}", self.0)
    }
}

impl AssignmentMatrix {
    /// Row tolerance accepted by [`AssignmentMatrix::new`].
    pub const ROW_SUM_TOL: f64 = 1e-9;

    pub fn new(inner: Matrix) -> Result<Self> {
        for r in 0..inner.rows() {
            let row = inner.row(r);
            if let Some(c) = row.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Contract(format!(
                    "assignment entry ({r}, {c}) = {} outside [0, 1]",
                    row[c]
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::Contract(format!("assignment row {r} sums to {s}")));
            }
        }
        Ok(Self(inner))
    }

    pub(crate) fn new_unchecked(inner: Matrix) -> Self {
        Self(inner)
    }

    pub fn uniform(n: usize, m: usize) -> Self {
        Self(Matrix::filled(n, m, 1.0 / m as f64))
    }

    /// One-hot rows at `labels`.
    pub fn one_hot(labels: &[usize], m: usize) -> Result<Self> {
        let mut out = Matrix::zeros(labels.len(), m);
        for (i, &y) in labels.iter().enumerate() {
            if y >= m {
                return Err(Error::Contract(format!(
                    "label {y} at row {i} outside [0, {m})"
                )));
            }
            out[(i, y)] = 1.0;
        }
        Ok(Self(out))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }
}

impl std::ops::Deref for AssignmentMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Row-wise softmax of `logits / temperature` with per-row max subtraction.
pub fn softmax_with_temperature(logits: &Matrix, temperature: f64) -> Result<AssignmentMatrix> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::param(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::numeric(
            "softmax_with_temperature",
            "non-finite logits",
        ));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), temperature, out.row_mut(r));
    }
    Ok(AssignmentMatrix::new_unchecked(out))
}

pub(crate) fn softmax_row(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Mean of `-ln(max(x[i, y_i], ε))` over the rows selected by `mask`.
pub fn cross_entropy(x: &AssignmentMatrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    check_labels_mask("cross_entropy", x.matrix(), labels, mask)?;
    let selected = mask.iter().filter(|&&s| s).count();
    if selected == 0 {
        return Err(Error::InvalidBatch(
            "every row is masked out of the loss".into(),
        ));
    }
    let total: f64 = (0..x.rows())
        .filter(|&i| mask[i])
        .map(|i| -x.matrix()[(i, labels[i])].max(LOG_EPS).ln())
        .sum();
    Ok(total / selected as f64)
}

pub(crate) fn check_labels_mask(
    op: &'static str,
    x: &Matrix,
    labels: &[usize],
    mask: &[bool],
) -> Result<()> {
    if labels.len() != x.rows() || mask.len() != x.rows() {
        return Err(Error::shape(
            op,
            format!("{} labels and mask entries", x.rows()),
            format!("{} labels, {} mask entries", labels.len(), mask.len()),
        ));
    }
    if let Some(i) = labels.iter().position(|&y| y >= x.cols()) {
        return Err(Error::Contract(format!(
            "label {} at row {i} outside [0, {})",
            labels[i],
            x.cols()
        )));
    }
    Ok(())
}

/// Divides each row by its sum. Rows summing to less than
/// [`DEGENERATE_ROW_SUM`] are taken from `fallback` instead.
pub fn row_normalize(m: &Matrix, fallback: &AssignmentMatrix) -> Result<AssignmentMatrix> {
    if m.shape() != fallback.shape() {
        return Err(Error::shape(
            "row_normalize",
            format!("{:?}", m.shape()),
            format!("{:?}", fallback.shape()),
        ));
    }
    if let Some(pos) = m.as_slice().iter().position(|&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "row_normalize needs non-negative input, entry {pos} is {}",
            m.as_slice()[pos]
        )));
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        let row = out.row_mut(r);
        if s < DEGENERATE_ROW_SUM {
            row.copy_from_slice(fallback.row(r));
        } else {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(AssignmentMatrix::new_unchecked(out))
}
