//! Dense rank-<=2 tensors of 64-bit reals, stored row-major.

use crate::error::{Error, Result};

/// A `(rows, cols)` matrix of `f64`. Vectors are `1 x n` or `n x 1`,
/// scalars are `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the length invariant and rejecting
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor::new",
                format!("{}x{}", rows, cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!(
                "non-finite entry {bad} in {rows}x{cols} tensor"
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Internal constructor for operation outputs; skips the finite check
    /// (the trainer screens losses instead).
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// 1x1 tensor.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(1, 1, vec![value])
    }

    /// Builds from nested rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Usage("ragged rows in Tensor::from_rows".into()));
        }
        Tensor::new(r, c, rows.concat())
    }

    /// 1 x n row vector.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(1, n, values)
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// One value for 1x1 tensors.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Usage(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies every entry by `factor` in place.
    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// L2 norm of a flat slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_invariant_is_checked() {
        assert!(Tensor::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        assert!(Tensor::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.get(0, 2), 3.0);
        assert_eq!(t.get(1, 0), 4.0);
    }

    #[test]
    fn norm_of_three_four() {
        let t = Tensor::row(vec![3.0, 4.0]).unwrap();
        assert_eq!(t.l2_norm(), 5.0);
    }
}
